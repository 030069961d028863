//! ROC/AUC evaluation with the convention that a low consistency score
//! flags an adversarial image: an item is called adversarial iff its score
//! is below the threshold.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub benign: Vec<f64>,
    pub adversarial: Vec<f64>,
}

impl ScoredSet {
    pub fn new(benign: Vec<f64>, adversarial: Vec<f64>) -> Self {
        Self { benign, adversarial }
    }

    fn check(&self) -> Result<(), EvalError> {
        if self.benign.is_empty() || self.adversarial.is_empty() {
            return Err(EvalError::Usage(format!(
                "AUC needs both sides nonempty (benign {}, adversarial {})",
                self.benign.len(),
                self.adversarial.len()
            )));
        }
        if let Some(x) = self.benign.iter().chain(&self.adversarial).find(|x| x.is_nan()) {
            return Err(EvalError::Usage(format!("score {x} is not a number")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Points for every distinct score plus a sentinel one below the minimum
/// and one above the maximum, so the curve runs from (0,0) to (1,1).
pub fn roc_curve(set: &ScoredSet) -> Result<Vec<RocPoint>, EvalError> {
    set.check()?;
    let b = sorted(&set.benign);
    let a = sorted(&set.adversarial);
    let mut distinct: Vec<f64> = b.iter().chain(&a).copied().collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let lo = distinct[0] - 1.0;
    let hi = distinct[distinct.len() - 1] + 1.0;
    let (nb, na) = (b.len() as f64, a.len() as f64);
    let point = |t: f64| RocPoint {
        threshold: t,
        fpr: b.partition_point(|&x| x < t) as f64 / nb,
        tpr: a.partition_point(|&x| x < t) as f64 / na,
    };
    Ok(std::iter::once(lo).chain(distinct).chain(std::iter::once(hi)).map(point).collect())
}

/// Mann-Whitney statistic: the probability that an adversarial score falls
/// below a benign one, counting ties as one half.
pub fn auc(set: &ScoredSet) -> Result<f64, EvalError> {
    set.check()?;
    let b = sorted(&set.benign);
    // Twice the credit, so ties stay integral.
    let mut credit: u128 = 0;
    for &x in &set.adversarial {
        let below = b.partition_point(|&y| y <= x);
        let ties = below - b.partition_point(|&y| y < x);
        credit += 2 * (b.len() - below) as u128 + ties as u128;
    }
    Ok(credit as f64 / (2.0 * b.len() as f64 * set.adversarial.len() as f64))
}

pub fn trapezoid_auc(curve: &[RocPoint]) -> f64 {
    curve.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width histogram on [0, 1]; the last bin is closed on the right and
/// scores outside the range are counted in the nearest edge bin.
pub fn score_density(scores: &[f64], n_bins: usize) -> Vec<DensityBin> {
    let n_bins = n_bins.max(1);
    let mut bins: Vec<DensityBin> = (0..n_bins)
        .map(|i| DensityBin { lo: i as f64 / n_bins as f64, hi: (i + 1) as f64 / n_bins as f64, count: 0 })
        .collect();
    for &s in scores {
        let i = if s.is_nan() { 0 } else { ((s * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1) };
        bins[i].count += 1;
    }
    bins
}

/// One scored comparison: an attack type evaluated with one scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEntry {
    pub attack: String,
    pub scorer: String,
    pub set: ScoredSet,
}

impl EvalEntry {
    pub fn tag(&self) -> String {
        format!("{}_{}", self.attack, self.scorer)
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub tag: String,
    pub attack: String,
    pub scorer: String,
    pub auc: f64,
    pub n_benign: usize,
    pub n_adversarial: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub metadata: serde_json::Value,
    pub results: Vec<MetricRow>,
}

impl Metrics {
    pub fn auc_of(&self, attack: &str, scorer: &str) -> Option<f64> {
        self.results.iter().find(|r| r.attack == attack && r.scorer == scorer).map(|r| r.auc)
    }
}

pub const DENSITY_BINS: usize = 50;

fn write_file(path: &Path, body: &str) -> Result<(), EvalError> {
    let io = |source| EvalError::Io { path: path.to_path_buf(), source };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(body.as_bytes()).map_err(io)
}

fn density_csv(scores: &[f64]) -> String {
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for b in score_density(scores, DENSITY_BINS) {
        s.push_str(&format!("{},{},{}\n", b.lo, b.hi, b.count));
    }
    s
}

/// Writes `metrics.json`, `roc_<tag>.csv` and per-side
/// `density_<tag>_{benign,adversarial}.csv` into `out_dir`.
pub fn report(
    out_dir: impl AsRef<Path>,
    metadata: serde_json::Value,
    entries: &[EvalEntry],
) -> Result<Metrics, EvalError> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| EvalError::Io { path: dir.to_path_buf(), source })?;
    let mut results = Vec::with_capacity(entries.len());
    for e in entries {
        let tag = e.tag();
        let curve = roc_curve(&e.set)?;
        let mut roc = String::from("threshold,fpr,tpr\n");
        for p in &curve {
            roc.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
        }
        write_file(&dir.join(format!("roc_{tag}.csv")), &roc)?;
        write_file(&dir.join(format!("density_{tag}_benign.csv")), &density_csv(&e.set.benign))?;
        write_file(&dir.join(format!("density_{tag}_adversarial.csv")), &density_csv(&e.set.adversarial))?;
        results.push(MetricRow {
            tag,
            attack: e.attack.clone(),
            scorer: e.scorer.clone(),
            auc: auc(&e.set)?,
            n_benign: e.set.benign.len(),
            n_adversarial: e.set.adversarial.len(),
        });
    }
    let metrics = Metrics { metadata, results };
    let mut json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    json.push('\n');
    write_file(&dir.join("metrics.json"), &json)?;
    Ok(metrics)
}
