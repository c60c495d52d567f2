//! Linear-Gaussian recurrent state-space model.
//!
//! ```text
//! h' = A h + B z + C a
//! z  ~ N(W h, diag(exp(prior_logvar)))
//! o  ~ N(D [h; z], diag(exp(obs_logvar)))
//! r  ~ N(w . [h; z] + b, 1)
//! q(z | h, o) = N(E_h h + E_o o + e, diag(exp(enc_logvar)))
//! ```

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::elbo::DifferentiableRssm;
use super::{LatentModel, ModelDims};
use crate::error::{Error, Result};
use crate::gaussian::DiagGaussian;
use crate::types::ActionVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "LinearDoc", try_from = "LinearDoc")]
pub struct LinearGaussianRssm {
    pub dims: ModelDims,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub prior_logvar: DVector<f64>,
    pub d: DMatrix<f64>,
    pub obs_logvar: DVector<f64>,
    pub reward_w: DVector<f64>,
    pub reward_b: f64,
    pub enc_h: DMatrix<f64>,
    pub enc_o: DMatrix<f64>,
    pub enc_b: DVector<f64>,
    pub enc_logvar: DVector<f64>,
}

fn randn<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn randv<R: Rng + ?Sized>(rng: &mut R, n: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(lo..hi))
}

impl LinearGaussianRssm {
    pub fn zeros(dims: ModelDims) -> Self {
        let ModelDims { d_h, d_z, d_o, d_a } = dims;
        Self {
            dims,
            a: DMatrix::zeros(d_h, d_h),
            b: DMatrix::zeros(d_h, d_z),
            c: DMatrix::zeros(d_h, d_a),
            w: DMatrix::zeros(d_z, d_h),
            prior_logvar: DVector::zeros(d_z),
            d: DMatrix::zeros(d_o, d_h + d_z),
            obs_logvar: DVector::zeros(d_o),
            reward_w: DVector::zeros(d_h + d_z),
            reward_b: 0.0,
            enc_h: DMatrix::zeros(d_z, d_h),
            enc_o: DMatrix::zeros(d_z, d_o),
            enc_b: DVector::zeros(d_z),
            enc_logvar: DVector::zeros(d_z),
        }
    }

    /// A random, mildly contractive instance with a random encoder.
    pub fn random<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        let ModelDims { d_h, d_z, d_o, d_a } = dims;
        let mut m = Self::zeros(dims);
        m.a = randn(rng, d_h, d_h, 0.5 / (d_h as f64).sqrt());
        m.b = randn(rng, d_h, d_z, 0.5 / (d_z as f64).sqrt());
        m.c = randn(rng, d_h, d_a, 0.5);
        m.w = randn(rng, d_z, d_h, 0.5 / (d_h as f64).sqrt());
        m.prior_logvar = randv(rng, d_z, -1.0, 0.5);
        m.d = randn(rng, d_o, d_h + d_z, 1.0 / ((d_h + d_z) as f64).sqrt());
        m.obs_logvar = randv(rng, d_o, -1.5, 0.0);
        m.reward_w = DVector::from_fn(d_h + d_z, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
        m.reward_b = 0.1 * rng.sample::<f64, _>(StandardNormal);
        m.randomize_encoder(rng);
        m
    }

    pub fn randomize_encoder<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let ModelDims { d_h, d_z, d_o, .. } = self.dims;
        self.enc_h = randn(rng, d_z, d_h, 0.5);
        self.enc_o = randn(rng, d_z, d_o, 0.5);
        self.enc_b = DVector::from_fn(d_z, |_, _| 0.2 * rng.sample::<f64, _>(StandardNormal));
        self.enc_logvar = randv(rng, d_z, -2.0, 0.5);
    }

    /// Split of the observation matrix into its `h` and `z` blocks.
    pub fn d_blocks(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let d_h = self.dims.d_h;
        let d_z = self.dims.d_z;
        (
            self.d.columns(0, d_h).into_owned(),
            self.d.columns(d_h, d_z).into_owned(),
        )
    }

    /// Set the encoder to the per-step Gaussian conditional `p(z | h, o)`
    /// (gain form). The variance keeps only the diagonal of the conditional
    /// covariance, which is exact when that covariance is diagonal.
    pub fn set_exact_conditional_encoder(&mut self) -> Result<()> {
        let p = DMatrix::from_diagonal(&self.prior_logvar.map(f64::exp));
        let r = DMatrix::from_diagonal(&self.obs_logvar.map(f64::exp));
        let (d_hh, d_zz) = self.d_blocks();
        let s = &d_zz * &p * d_zz.transpose() + r;
        let s_inv = s
            .cholesky()
            .ok_or(Error::SingularCovariance("innovation covariance"))?
            .inverse();
        let gain = &p * d_zz.transpose() * s_inv;
        let eye = DMatrix::<f64>::identity(self.dims.d_z, self.dims.d_z);
        self.enc_h = (&eye - &gain * &d_zz) * &self.w - &gain * &d_hh;
        let cov = &p - &gain * &d_zz * &p;
        self.enc_o = gain;
        self.enc_b = DVector::zeros(self.dims.d_z);
        self.enc_logvar = cov.diagonal().map(f64::ln);
        Ok(())
    }

    fn hz(h: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(h.len() + z.len());
        x.rows_mut(0, h.len()).copy_from(h);
        x.rows_mut(h.len(), z.len()).copy_from(z);
        x
    }

    fn layout(&self) -> Layout {
        Layout::new(self.dims)
    }
}

impl LatentModel for LinearGaussianRssm {
    fn dims(&self) -> ModelDims {
        self.dims
    }

    fn posterior(&self, h: &DVector<f64>, o: &DVector<f64>) -> DiagGaussian {
        let (m, lv) = self.posterior_raw(h, o);
        DiagGaussian::from_logvar(m, &lv)
    }

    fn transition(&self, h: &DVector<f64>, z: &DVector<f64>, a: &ActionVector) -> DVector<f64> {
        &self.a * h + &self.b * z + &self.c * a
    }

    fn prior(&self, h: &DVector<f64>) -> DiagGaussian {
        let (m, lv) = self.prior_raw(h);
        DiagGaussian::from_logvar(m, &lv)
    }

    fn decode(&self, h: &DVector<f64>, z: &DVector<f64>) -> DiagGaussian {
        let (m, lv) = self.decode_raw(h, z);
        DiagGaussian::from_logvar(m, &lv)
    }

    fn reward(&self, h: &DVector<f64>, z: &DVector<f64>) -> f64 {
        self.reward_w.dot(&Self::hz(h, z)) + self.reward_b
    }
}

/// Offsets of each parameter block in the flat vector (row-major matrices).
struct Layout {
    a: Range<usize>,
    b: Range<usize>,
    c: Range<usize>,
    w: Range<usize>,
    prior_logvar: Range<usize>,
    d: Range<usize>,
    obs_logvar: Range<usize>,
    reward_w: Range<usize>,
    reward_b: usize,
    enc_h: Range<usize>,
    enc_o: Range<usize>,
    enc_b: Range<usize>,
    enc_logvar: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(dims: ModelDims) -> Self {
        let ModelDims { d_h, d_z, d_o, d_a } = dims;
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let a = take(d_h * d_h);
        let b = take(d_h * d_z);
        let c = take(d_h * d_a);
        let w = take(d_z * d_h);
        let prior_logvar = take(d_z);
        let d = take(d_o * (d_h + d_z));
        let obs_logvar = take(d_o);
        let reward_w = take(d_h + d_z);
        let reward_b = take(1).start;
        let enc_h = take(d_z * d_h);
        let enc_o = take(d_z * d_o);
        let enc_b = take(d_z);
        let enc_logvar = take(d_z);
        let total = off;
        Self {
            a,
            b,
            c,
            w,
            prior_logvar,
            d,
            obs_logvar,
            reward_w,
            reward_b,
            enc_h,
            enc_o,
            enc_b,
            enc_logvar,
            total,
        }
    }
}

fn write_matrix(dst: &mut [f64], m: &DMatrix<f64>) {
    let cols = m.ncols();
    for i in 0..m.nrows() {
        for j in 0..cols {
            dst[i * cols + j] = m[(i, j)];
        }
    }
}

fn read_matrix(src: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, src)
}

/// `grad += g u^T` into a row-major block.
fn add_outer(dst: &mut [f64], g: &DVector<f64>, u: &DVector<f64>) {
    let cols = u.len();
    for (i, gi) in g.iter().enumerate() {
        if *gi == 0.0 {
            continue;
        }
        for (j, uj) in u.iter().enumerate() {
            dst[i * cols + j] += gi * uj;
        }
    }
}

fn add_vec(dst: &mut [f64], g: &DVector<f64>) {
    for (d, x) in dst.iter_mut().zip(g.iter()) {
        *d += x;
    }
}

impl DifferentiableRssm for LinearGaussianRssm {
    fn param_len(&self) -> usize {
        self.layout().total
    }

    fn params(&self) -> Vec<f64> {
        let l = self.layout();
        let mut p = vec![0.0; l.total];
        write_matrix(&mut p[l.a], &self.a);
        write_matrix(&mut p[l.b], &self.b);
        write_matrix(&mut p[l.c], &self.c);
        write_matrix(&mut p[l.w], &self.w);
        p[l.prior_logvar].copy_from_slice(self.prior_logvar.as_slice());
        write_matrix(&mut p[l.d], &self.d);
        p[l.obs_logvar].copy_from_slice(self.obs_logvar.as_slice());
        p[l.reward_w].copy_from_slice(self.reward_w.as_slice());
        p[l.reward_b] = self.reward_b;
        write_matrix(&mut p[l.enc_h], &self.enc_h);
        write_matrix(&mut p[l.enc_o], &self.enc_o);
        p[l.enc_b].copy_from_slice(self.enc_b.as_slice());
        p[l.enc_logvar].copy_from_slice(self.enc_logvar.as_slice());
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        let l = self.layout();
        assert_eq!(p.len(), l.total);
        let ModelDims { d_h, d_z, d_o, d_a } = self.dims;
        self.a = read_matrix(&p[l.a], d_h, d_h);
        self.b = read_matrix(&p[l.b], d_h, d_z);
        self.c = read_matrix(&p[l.c], d_h, d_a);
        self.w = read_matrix(&p[l.w], d_z, d_h);
        self.prior_logvar = DVector::from_column_slice(&p[l.prior_logvar]);
        self.d = read_matrix(&p[l.d], d_o, d_h + d_z);
        self.obs_logvar = DVector::from_column_slice(&p[l.obs_logvar]);
        self.reward_w = DVector::from_column_slice(&p[l.reward_w]);
        self.reward_b = p[l.reward_b];
        self.enc_h = read_matrix(&p[l.enc_h], d_z, d_h);
        self.enc_o = read_matrix(&p[l.enc_o], d_z, d_o);
        self.enc_b = DVector::from_column_slice(&p[l.enc_b]);
        self.enc_logvar = DVector::from_column_slice(&p[l.enc_logvar]);
    }

    fn prior_raw(&self, h: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (&self.w * h, self.prior_logvar.clone())
    }

    fn posterior_raw(&self, h: &DVector<f64>, o: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (
            &self.enc_h * h + &self.enc_o * o + &self.enc_b,
            self.enc_logvar.clone(),
        )
    }

    fn decode_raw(&self, h: &DVector<f64>, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (&self.d * Self::hz(h, z), self.obs_logvar.clone())
    }

    fn transition_vjp(
        &self,
        h: &DVector<f64>,
        z: &DVector<f64>,
        a: &ActionVector,
        g_out: &DVector<f64>,
        grad: &mut [f64],
    ) -> (DVector<f64>, DVector<f64>) {
        let l = self.layout();
        add_outer(&mut grad[l.a], g_out, h);
        add_outer(&mut grad[l.b], g_out, z);
        add_outer(&mut grad[l.c], g_out, a);
        (self.a.tr_mul(g_out), self.b.tr_mul(g_out))
    }

    fn prior_vjp(&self, h: &DVector<f64>, g_mean: &DVector<f64>, g_logvar: &DVector<f64>, grad: &mut [f64]) -> DVector<f64> {
        let l = self.layout();
        add_outer(&mut grad[l.w], g_mean, h);
        add_vec(&mut grad[l.prior_logvar], g_logvar);
        self.w.tr_mul(g_mean)
    }

    fn posterior_vjp(
        &self,
        h: &DVector<f64>,
        o: &DVector<f64>,
        g_mean: &DVector<f64>,
        g_logvar: &DVector<f64>,
        grad: &mut [f64],
    ) -> DVector<f64> {
        let l = self.layout();
        add_outer(&mut grad[l.enc_h], g_mean, h);
        add_outer(&mut grad[l.enc_o], g_mean, o);
        add_vec(&mut grad[l.enc_b], g_mean);
        add_vec(&mut grad[l.enc_logvar], g_logvar);
        self.enc_h.tr_mul(g_mean)
    }

    fn decode_vjp(
        &self,
        h: &DVector<f64>,
        z: &DVector<f64>,
        g_mean: &DVector<f64>,
        g_logvar: &DVector<f64>,
        grad: &mut [f64],
    ) -> (DVector<f64>, DVector<f64>) {
        let l = self.layout();
        let x = Self::hz(h, z);
        add_outer(&mut grad[l.d], g_mean, &x);
        add_vec(&mut grad[l.obs_logvar], g_logvar);
        let gx = self.d.tr_mul(g_mean);
        split(&gx, h.len())
    }

    fn reward_vjp(&self, h: &DVector<f64>, z: &DVector<f64>, g: f64, grad: &mut [f64]) -> (DVector<f64>, DVector<f64>) {
        let l = self.layout();
        let x = Self::hz(h, z);
        add_vec(&mut grad[l.reward_w], &(&x * g));
        grad[l.reward_b] += g;
        split(&(&self.reward_w * g), h.len())
    }
}

pub(crate) fn split(x: &DVector<f64>, at: usize) -> (DVector<f64>, DVector<f64>) {
    (
        x.rows(0, at).into_owned(),
        x.rows(at, x.len() - at).into_owned(),
    )
}

/// Versioned JSON document; matrices are stored row-major as nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LinearDoc {
    version: u32,
    d_h: usize,
    d_z: usize,
    d_o: usize,
    d_a: usize,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    prior_logvar: Vec<f64>,
    #[serde(rename = "D")]
    d: Vec<Vec<f64>>,
    obs_logvar: Vec<f64>,
    reward_w: Vec<f64>,
    reward_b: f64,
    enc_h: Vec<Vec<f64>>,
    enc_o: Vec<Vec<f64>>,
    enc_b: Vec<f64>,
    enc_logvar: Vec<f64>,
}

pub(crate) const MODEL_DOC_VERSION: u32 = 1;

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub(crate) fn from_rows(r: &[Vec<f64>], nrows: usize, ncols: usize, what: &'static str) -> std::result::Result<DMatrix<f64>, String> {
    if r.len() != nrows || r.iter().any(|row| row.len() != ncols) {
        return Err(format!("{what}: expected {nrows}x{ncols} matrix"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| r[i][j]))
}

pub(crate) fn vec_of(v: &[f64], n: usize, what: &'static str) -> std::result::Result<DVector<f64>, String> {
    if v.len() != n {
        return Err(format!("{what}: expected length {n}, got {}", v.len()));
    }
    Ok(DVector::from_column_slice(v))
}

impl From<LinearGaussianRssm> for LinearDoc {
    fn from(m: LinearGaussianRssm) -> Self {
        Self {
            version: MODEL_DOC_VERSION,
            d_h: m.dims.d_h,
            d_z: m.dims.d_z,
            d_o: m.dims.d_o,
            d_a: m.dims.d_a,
            a: rows(&m.a),
            b: rows(&m.b),
            c: rows(&m.c),
            w: rows(&m.w),
            prior_logvar: m.prior_logvar.as_slice().to_vec(),
            d: rows(&m.d),
            obs_logvar: m.obs_logvar.as_slice().to_vec(),
            reward_w: m.reward_w.as_slice().to_vec(),
            reward_b: m.reward_b,
            enc_h: rows(&m.enc_h),
            enc_o: rows(&m.enc_o),
            enc_b: m.enc_b.as_slice().to_vec(),
            enc_logvar: m.enc_logvar.as_slice().to_vec(),
        }
    }
}

impl TryFrom<LinearDoc> for LinearGaussianRssm {
    type Error = String;

    fn try_from(doc: LinearDoc) -> std::result::Result<Self, String> {
        if doc.version != MODEL_DOC_VERSION {
            return Err(format!("unsupported model document version {}", doc.version));
        }
        let dims = ModelDims {
            d_h: doc.d_h,
            d_z: doc.d_z,
            d_o: doc.d_o,
            d_a: doc.d_a,
        };
        let ModelDims { d_h, d_z, d_o, d_a } = dims;
        Ok(Self {
            dims,
            a: from_rows(&doc.a, d_h, d_h, "A")?,
            b: from_rows(&doc.b, d_h, d_z, "B")?,
            c: from_rows(&doc.c, d_h, d_a, "C")?,
            w: from_rows(&doc.w, d_z, d_h, "W")?,
            prior_logvar: vec_of(&doc.prior_logvar, d_z, "prior_logvar")?,
            d: from_rows(&doc.d, d_o, d_h + d_z, "D")?,
            obs_logvar: vec_of(&doc.obs_logvar, d_o, "obs_logvar")?,
            reward_w: vec_of(&doc.reward_w, d_h + d_z, "reward_w")?,
            reward_b: doc.reward_b,
            enc_h: from_rows(&doc.enc_h, d_z, d_h, "enc_h")?,
            enc_o: from_rows(&doc.enc_o, d_z, d_o, "enc_o")?,
            enc_b: vec_of(&doc.enc_b, d_z, "enc_b")?,
            enc_logvar: vec_of(&doc.enc_logvar, d_z, "enc_logvar")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims { d_h: 3, d_z: 2, d_o: 3, d_a: 2 }
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = LinearGaussianRssm::random(dims(), &mut rng);
        let mut z = LinearGaussianRssm::zeros(dims());
        z.set_params(&m.params());
        assert_eq!(z, m);
        assert_eq!(m.params().len(), m.param_len());
    }

    #[test]
    fn json_is_row_major_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = LinearGaussianRssm::random(dims(), &mut rng);
        let js = serde_json::to_value(&m).unwrap();
        assert_eq!(js["version"], 1);
        assert_eq!(js["A"][0][1].as_f64().unwrap(), m.a[(0, 1)]);
        assert_eq!(js["D"].as_array().unwrap().len(), 3);
        let back: LinearGaussianRssm = serde_json::from_value(js).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn json_rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = LinearGaussianRssm::random(dims(), &mut rng);
        let mut js = serde_json::to_value(&m).unwrap();
        js["A"] = serde_json::json!([[1.0]]);
        assert!(serde_json::from_value::<LinearGaussianRssm>(js).is_err());
    }

    #[test]
    fn exact_conditional_matches_scalar_formula() {
        // d_z = d_o = 1, d_h = 1: posterior mean = W h + k (o - D_h h - D_z W h)
        let mut m = LinearGaussianRssm::zeros(ModelDims { d_h: 1, d_z: 1, d_o: 1, d_a: 1 });
        m.w[(0, 0)] = 0.7;
        m.prior_logvar[0] = (0.5f64).ln();
        m.d[(0, 0)] = 0.3;
        m.d[(0, 1)] = 2.0;
        m.obs_logvar[0] = (0.2f64).ln();
        m.set_exact_conditional_encoder().unwrap();
        let h = DVector::from_element(1, 0.4);
        let o = DVector::from_element(1, 1.3);
        let k = 0.5 * 2.0 / (4.0 * 0.5 + 0.2);
        let mean = 0.7 * 0.4 + k * (1.3 - 0.3 * 0.4 - 2.0 * 0.7 * 0.4);
        let var = 0.5 - k * 2.0 * 0.5;
        let q = m.posterior(&h, &o);
        assert!((q.mean[0] - mean).abs() < 1e-14);
        assert!((q.var[0] - var).abs() < 1e-14);
    }
}
