//! Aggregates run sets over seeds and tests differences between them.
//!
//! A run set is a directory holding `seed_*/metrics.csv`. Every seed is
//! reduced to one value per evaluation `env_step` (the mean over that
//! round's episodes), and every set must share the same grid.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Debug, Clone, PartialEq)]
pub enum CompareError {
    Io(String),
    Parse(String),
    /// Seeds or sets disagree on the env_step grid.
    GridMismatch(String),
    TooFew(String),
}

impl fmt::Display for CompareError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompareError::Io(e) => write!(f, "io: {e}"),
            CompareError::Parse(e) => write!(f, "parse: {e}"),
            CompareError::GridMismatch(e) => write!(f, "mismatched evaluation grids: {e}"),
            CompareError::TooFew(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CompareError {}

/// Per-seed curves of one run set.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSet {
    pub name: String,
    pub seeds: Vec<u64>,
    pub grid: Vec<u64>,
    /// `values[s][g]` for seed `s` at grid point `g`.
    pub values: Vec<Vec<f64>>,
}

impl RunSet {
    pub fn from_curves(name: &str, curves: Vec<(u64, BTreeMap<u64, f64>)>) -> Result<Self, CompareError> {
        if curves.is_empty() {
            return Err(CompareError::TooFew(format!("{name}: no seeds")));
        }
        let grid: Vec<u64> = curves[0].1.keys().copied().collect();
        if grid.is_empty() {
            return Err(CompareError::TooFew(format!("{name}: no rows for the selected phase")));
        }
        let mut seeds = Vec::new();
        let mut values = Vec::new();
        for (seed, c) in curves {
            let g: Vec<u64> = c.keys().copied().collect();
            if g != grid {
                return Err(CompareError::GridMismatch(format!("{name}: seed {seed} has steps {g:?}, expected {grid:?}")));
            }
            seeds.push(seed);
            values.push(c.into_values().collect());
        }
        Ok(Self { name: name.to_string(), seeds, grid, values })
    }

    /// Per-seed mean over the last `last` grid points.
    pub fn final_values(&self, last: usize) -> Vec<f64> {
        let n = last.clamp(1, self.grid.len());
        self.values
            .iter()
            .map(|v| v[v.len() - n..].iter().sum::<f64>() / n as f64)
            .collect()
    }
}

/// Read one `metrics.csv` and reduce `metric` rows of `phase` to the mean
/// per env_step. `NA` cells are skipped.
pub fn read_curve(path: &Path, metric: &str, phase: &str) -> Result<BTreeMap<u64, f64>, CompareError> {
    let text = std::fs::read_to_string(path).map_err(|e| CompareError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| CompareError::Parse(format!("{}: no column '{name}'", path.display())))
    };
    let (pc, sc, mc) = (col("phase")?, col("env_step")?, col(metric)?);
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(CompareError::Parse(format!("{}: row {} has {} cells", path.display(), i + 2, cells.len())));
        }
        if cells[pc] != phase || cells[mc] == "NA" {
            continue;
        }
        let bad = |e: String| CompareError::Parse(format!("{}: row {}: {e}", path.display(), i + 2));
        let step: u64 = cells[sc].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
        let v: f64 = cells[mc].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
        let e = acc.entry(step).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

/// Load every `seed_*` directory under `dir`, ordered by seed.
pub fn load_run_set(dir: &Path, metric: &str, phase: &str) -> Result<RunSet, CompareError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CompareError::Io(format!("{}: {e}", dir.display())))?;
    let mut found: Vec<(u64, PathBuf)> = Vec::new();
    for e in entries {
        let e = e.map_err(|e| CompareError::Io(e.to_string()))?;
        let name = e.file_name().to_string_lossy().to_string();
        if let Some(s) = name.strip_prefix("seed_").and_then(|s| s.parse::<u64>().ok()) {
            found.push((s, e.path().join("metrics.csv")));
        }
    }
    found.sort();
    let curves = found
        .into_iter()
        .map(|(s, p)| read_curve(&p, metric, phase).map(|c| (s, c)))
        .collect::<Result<Vec<_>, _>>()?;
    let name = dir.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_else(|| dir.display().to_string());
    RunSet::from_curves(&name, curves)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    /// Half-width of the 95% t-interval; NaN for a single seed.
    pub half_width: f64,
}

impl Summary {
    pub fn ci(&self) -> (f64, f64) {
        (self.mean - self.half_width, self.mean + self.half_width)
    }
}

pub fn summarize(xs: &[f64]) -> Summary {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return Summary { n, mean, std: f64::NAN, half_width: f64::NAN };
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof").inverse_cdf(0.975);
    Summary { n, mean, std: var.sqrt(), half_width: t * (var / n as f64).sqrt() }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Welch {
    /// `mean(other) - mean(baseline)`.
    pub delta: f64,
    pub t: f64,
    pub dof: f64,
    /// One-sided p for `other > baseline`.
    pub p_greater: f64,
    pub p_two_sided: f64,
}

/// Welch's unequal-variance t-test of `other` against `baseline`.
pub fn welch(baseline: &[f64], other: &[f64]) -> Welch {
    let a = summarize(baseline);
    let b = summarize(other);
    let delta = b.mean - a.mean;
    let va = a.std.powi(2) / a.n as f64;
    let vb = b.std.powi(2) / b.n as f64;
    let se2 = va + vb;
    if !(se2 > 0.0) {
        let (p1, p2) = if delta > 0.0 {
            (0.0, 0.0)
        } else if delta < 0.0 {
            (1.0, 0.0)
        } else {
            (0.5, 1.0)
        };
        return Welch { delta, t: f64::NAN, dof: f64::NAN, p_greater: p1, p_two_sided: p2 };
    }
    let t = delta / se2.sqrt();
    let dof = se2 * se2 / (va * va / (a.n as f64 - 1.0) + vb * vb / (b.n as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).expect("valid dof");
    Welch { delta, t, dof, p_greater: dist.sf(t), p_two_sided: (2.0 * dist.sf(t.abs())).min(1.0) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub baseline: String,
    pub other: String,
    pub baseline_summary: Summary,
    pub other_summary: Summary,
    pub test: Welch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub metric: String,
    pub grid: Vec<u64>,
    pub sets: Vec<RunSet>,
    /// `curves[i][g]` summarizes set `i` at grid point `g`.
    pub curves: Vec<Vec<Summary>>,
    pub comparisons: Vec<Comparison>,
}

/// Compare every set against the first one on the per-seed mean of the last
/// `last` grid points.
pub fn compare(sets: Vec<RunSet>, metric: &str, last: usize) -> Result<Report, CompareError> {
    if sets.len() < 2 {
        return Err(CompareError::TooFew("compare needs at least two run sets".into()));
    }
    let grid = sets[0].grid.clone();
    for s in &sets[1..] {
        if s.grid != grid {
            return Err(CompareError::GridMismatch(format!("{} has steps {:?}, {} has {:?}", sets[0].name, grid, s.name, s.grid)));
        }
    }
    let curves = sets
        .iter()
        .map(|s| (0..grid.len()).map(|g| summarize(&s.values.iter().map(|v| v[g]).collect::<Vec<_>>())).collect())
        .collect();
    let base = sets[0].final_values(last);
    let comparisons = sets[1..]
        .iter()
        .map(|s| {
            let o = s.final_values(last);
            Comparison {
                baseline: sets[0].name.clone(),
                other: s.name.clone(),
                baseline_summary: summarize(&base),
                other_summary: summarize(&o),
                test: welch(&base, &o),
            }
        })
        .collect();
    Ok(Report { metric: metric.to_string(), grid, sets, curves, comparisons })
}

impl Report {
    /// Plot-ready rows: `set,env_step,n,mean,ci_low,ci_high`.
    pub fn aggregated_csv(&self) -> String {
        let mut out = String::from("set,env_step,n,mean,ci_low,ci_high\n");
        for (s, curve) in self.sets.iter().zip(&self.curves) {
            for (step, m) in self.grid.iter().zip(curve) {
                let (lo, hi) = m.ci();
                out += &format!("{},{},{},{:?},{:?},{:?}\n", s.name, step, m.n, m.mean, lo, hi);
            }
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!("metric: {}\n", self.metric);
        out += &format!("{:<24} {:>4} {:>12} {:>26}\n", "set", "n", "mean", "95% CI");
        let mut row = |name: &str, m: &Summary| {
            let (lo, hi) = m.ci();
            out += &format!("{:<24} {:>4} {:>12.4} [{:>11.4}, {:>11.4}]\n", name, m.n, m.mean, lo, hi);
        };
        if let Some(c) = self.comparisons.first() {
            row(&c.baseline, &c.baseline_summary);
        }
        for c in &self.comparisons {
            row(&c.other, &c.other_summary);
        }
        for c in &self.comparisons {
            out += &format!(
                "{} - {}: delta {:.4}, t {:.3}, dof {:.1}, p(one-sided) {:.4}, p(two-sided) {:.4}\n",
                c.other, c.baseline, c.test.delta, c.test.t, c.test.dof, c.test.p_greater, c.test.p_two_sided
            );
        }
        out
    }
}
