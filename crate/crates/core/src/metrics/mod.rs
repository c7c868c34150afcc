//! Verification-style privacy metrics over trial scores: equal error rate
//! and the linkability measure `D_sys`, plus per-condition report records.

mod report;

pub use report::{csv_row, parse_csv, MetricsReport, CSV_HEADER};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 100;
pub const LINKABILITY_EPS: f64 = 1e-12;

/// Scores of same-speaker (mated) and different-speaker (nonmated) trials.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub mated: Vec<f64>,
    pub nonmated: Vec<f64>,
}

impl ScoreSet {
    pub fn new(mated: Vec<f64>, nonmated: Vec<f64>) -> Self {
        Self { mated, nonmated }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mated.is_empty() || self.nonmated.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "need mated and nonmated scores, got {} and {}",
                self.mated.len(),
                self.nonmated.len()
            )));
        }
        if self.mated.iter().chain(&self.nonmated).any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("scores must be finite".into()));
        }
        Ok(())
    }

    /// Writes `mated.txt` and `nonmated.txt`, one score per line.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, scores) in [("mated.txt", &self.mated), ("nonmated.txt", &self.nonmated)] {
            let path = dir.join(name);
            fs::write(&path, score_text(scores)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let set = Self {
            mated: read_scores(&dir.join("mated.txt"))?,
            nonmated: read_scores(&dir.join("nonmated.txt"))?,
        };
        set.validate()?;
        Ok(set)
    }
}

pub fn score_text(scores: &[f64]) -> String {
    let mut out = String::with_capacity(scores.len() * 24);
    for s in scores {
        out.push_str(&format!("{s:.16e}\n"));
    }
    out
}

pub fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| Error::format(path, format!("line {}: `{l}` is not a score", n + 1)))
        })
        .collect()
}

/// Equal error rate and the threshold at which it occurs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerPoint {
    pub eer: f64,
    pub threshold: f64,
}

/// Sweeps every distinct score as a threshold. At threshold `t` a nonmated
/// trial is falsely accepted when its score is `>= t` and a mated trial is
/// falsely rejected when its score is `< t`. The rates cross between two
/// adjacent operating points; the EER is read off the straight segment
/// joining them.
pub fn eer(scores: &ScoreSet) -> Result<EerPoint> {
    scores.validate()?;
    let mut mated = scores.mated.clone();
    let mut nonmated = scores.nonmated.clone();
    mated.sort_by(f64::total_cmp);
    nonmated.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = mated.iter().chain(&nonmated).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (nm, nn) = (mated.len() as f64, nonmated.len() as f64);
    let rates = |t: f64| {
        let far = (nonmated.len() - nonmated.partition_point(|&s| s < t)) as f64 / nn;
        let frr = mated.partition_point(|&s| s < t) as f64 / nm;
        (far, frr)
    };

    // Below every score: everything accepted.
    let mut prev = (f64::NEG_INFINITY, 1.0, 0.0);
    for &t in thresholds.iter().chain(std::iter::once(&f64::INFINITY)) {
        let (far, frr) = if t == f64::INFINITY { (0.0, 1.0) } else { rates(t) };
        let diff = far - frr;
        if diff <= 0.0 {
            let (pt, pfar, pfrr) = prev;
            let pdiff = pfar - pfrr;
            // pdiff > 0 >= diff, so the segment crosses zero once.
            let w = pdiff / (pdiff - diff);
            let eer = pfar + w * (far - pfar);
            let threshold = if pt.is_finite() && t.is_finite() {
                pt + w * (t - pt)
            } else if t.is_finite() {
                t
            } else {
                pt
            };
            return Ok(EerPoint {
                eer: eer.clamp(0.0, 1.0),
                threshold,
            });
        }
        prev = (t, far, frr);
    }
    unreachable!("the final operating point always has FAR - FRR = -1")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linkability {
    pub d_sys: f64,
    /// Per-bin local linkability `D(s)`.
    pub local: Vec<f64>,
}

/// Histogram estimate of the global linkability `D_sys` with equal priors.
pub fn linkability(scores: &ScoreSet, num_bins: usize) -> Result<Linkability> {
    scores.validate()?;
    if num_bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "num_bins must be >= 2, got {num_bins}"
        )));
    }
    let all = scores.mated.iter().chain(&scores.nonmated);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(Linkability {
            d_sys: 0.0,
            local: vec![0.0; num_bins],
        });
    }
    let width = (hi - lo) / num_bins as f64;
    let histogram = |xs: &[f64]| {
        let mut h = vec![0.0; num_bins];
        for &x in xs {
            let b = (((x - lo) / width) as usize).min(num_bins - 1);
            h[b] += 1.0;
        }
        let n = xs.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
        h
    };
    let p_mated = histogram(&scores.mated);
    let p_nonmated = histogram(&scores.nonmated);

    let local: Vec<f64> = p_mated
        .iter()
        .zip(&p_nonmated)
        .map(|(&pm, &pn)| {
            let lr = (pm + LINKABILITY_EPS) / (pn + LINKABILITY_EPS);
            (2.0 * lr / (1.0 + lr) - 1.0).max(0.0)
        })
        .collect();
    let d_sys: f64 = local.iter().zip(&p_mated).map(|(d, p)| d * p).sum();
    Ok(Linkability {
        d_sys: d_sys.clamp(0.0, 1.0),
        local,
    })
}
