//! Pitch-trajectory anonymization: moment matching to a target speaker and
//! additive white Gaussian noise at a prescribed signal-to-noise ratio.
//!
//! Statistics are taken over voiced frames only. Unvoiced frames carry the
//! value 0 and pass through every transform untouched.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const DEFAULT_FRAME_RATE: f64 = 100.0;
/// Lower bound applied to voiced values after a transform.
pub const MIN_VOICED_HZ: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct F0Track {
    values: Vec<f64>,
    voiced: Vec<bool>,
    frame_rate: f64,
}

impl F0Track {
    /// Checks that unvoiced frames are exactly 0 and voiced frames are
    /// positive and finite.
    pub fn new(values: Vec<f64>, voiced: Vec<bool>, frame_rate: f64) -> Result<Self> {
        if values.len() != voiced.len() {
            return Err(Error::shape(
                "F0Track::new",
                format!("{} values, {} voicing flags", values.len(), voiced.len()),
            ));
        }
        for (t, (&v, &is_voiced)) in values.iter().zip(&voiced).enumerate() {
            let ok = if is_voiced {
                v.is_finite() && v > 0.0
            } else {
                v == 0.0
            };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "frame {t}: value {v} inconsistent with voiced={is_voiced}"
                )));
            }
        }
        Ok(Self {
            values,
            voiced,
            frame_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn voiced(&self) -> &[bool] {
        &self.voiced
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn voiced_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(&self.voiced)
            .filter_map(|(&v, &is_voiced)| is_voiced.then_some(v))
    }

    pub fn voiced_count(&self) -> usize {
        self.voiced.iter().filter(|&&v| v).count()
    }

    fn map_voiced(&self, mut f: impl FnMut(f64) -> f64) -> F0Track {
        let values = self
            .values
            .iter()
            .zip(&self.voiced)
            .map(|(&v, &is_voiced)| if is_voiced { f(v) } else { v })
            .collect();
        F0Track {
            values,
            voiced: self.voiced.clone(),
            frame_rate: self.frame_rate,
        }
    }

    /// Two columns per frame: value in Hz and a 0/1 voicing flag.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.len() * 26);
        for (v, &is_voiced) in self.values.iter().zip(&self.voiced) {
            writeln!(out, "{v:.16e} {}", u8::from(is_voiced)).expect("write to String");
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut values = Vec::new();
        let mut voiced = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::format(origin, format!("line {}: {what}", n + 1));
            let mut cols = line.split_whitespace();
            let (Some(v), Some(flag), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(bad("expected two columns"));
            };
            let v: f64 = v.parse().map_err(|_| bad("value is not a number"))?;
            let flag = match flag {
                "0" => false,
                "1" => true,
                _ => return Err(bad("voicing flag must be 0 or 1")),
            };
            values.push(v);
            voiced.push(flag);
        }
        Self::new(values, voiced, DEFAULT_FRAME_RATE).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F0Stats {
    pub mean: f64,
    /// Population standard deviation (divides by n).
    pub std: f64,
    pub voiced_count: usize,
}

pub fn f0_stats(track: &F0Track) -> Result<F0Stats> {
    let n = track.voiced_count();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 voiced frames, found {n}"
        )));
    }
    let mean = track.voiced_values().sum::<f64>() / n as f64;
    let var = track
        .voiced_values()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    Ok(F0Stats {
        mean,
        std: var.sqrt(),
        voiced_count: n,
    })
}

/// Maps voiced frames affinely so that statistics `src` become `tgt`:
/// `f' = (f - src.mean) / src.std * tgt.std + tgt.mean`.
///
/// Equal source and target statistics return the track unchanged. Results
/// are floored at [`MIN_VOICED_HZ`].
pub fn linear_shift(track: &F0Track, src: &F0Stats, tgt: &F0Stats) -> Result<F0Track> {
    if !(src.std > 0.0) {
        return Err(Error::Degenerate(format!(
            "source F0 std is {}; cannot rescale a flat trajectory",
            src.std
        )));
    }
    if !(tgt.std >= 0.0) || !tgt.mean.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "invalid target statistics mean={} std={}",
            tgt.mean, tgt.std
        )));
    }
    if src.mean == tgt.mean && src.std == tgt.std {
        return Ok(track.clone());
    }
    let ratio = tgt.std / src.std;
    Ok(track.map_voiced(|f| ((f - src.mean) * ratio + tgt.mean).max(MIN_VOICED_HZ)))
}

/// How the signal power of a trajectory is measured for SNR purposes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SignalPower {
    /// Variance of the voiced values (mean removed).
    #[default]
    Variance,
    /// Mean square of the voiced values, mean included.
    MeanSquare,
}

impl SignalPower {
    fn of(self, track: &F0Track) -> Result<f64> {
        let stats = f0_stats(track)?;
        Ok(match self {
            SignalPower::Variance => stats.std * stats.std,
            SignalPower::MeanSquare => {
                track.voiced_values().map(|v| v * v).sum::<f64>() / stats.voiced_count as f64
            }
        })
    }
}

/// Adds `N(0, P / 10^(snr_db/10))` noise to voiced frames, `P` being the
/// voiced variance. Results are floored at [`MIN_VOICED_HZ`].
pub fn add_awgn<R: Rng + ?Sized>(track: &F0Track, snr_db: f64, rng: &mut R) -> Result<F0Track> {
    add_awgn_with(track, snr_db, SignalPower::Variance, rng)
}

pub fn add_awgn_with<R: Rng + ?Sized>(
    track: &F0Track,
    snr_db: f64,
    power: SignalPower,
    rng: &mut R,
) -> Result<F0Track> {
    if snr_db.is_nan() {
        return Err(Error::InvalidArgument("snr_db is NaN".into()));
    }
    let p = power.of(track)?;
    if !(p > 0.0) {
        return Err(Error::Degenerate("zero signal power".into()));
    }
    if snr_db == f64::INFINITY {
        return Ok(track.clone());
    }
    let sigma = (p / 10f64.powf(snr_db / 10.0)).sqrt();
    let normal =
        Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(format!("noise std {sigma}: {e}")))?;
    Ok(track.map_voiced(|f| (f + normal.sample(rng)).max(MIN_VOICED_HZ)))
}

/// `10 log10(var(clean) / mean((noisy - clean)^2))` over voiced frames.
pub fn measured_snr(clean: &F0Track, noisy: &F0Track) -> Result<f64> {
    if clean.voiced() != noisy.voiced() {
        return Err(Error::InvalidArgument("voiced masks differ".into()));
    }
    let stats = f0_stats(clean)?;
    let noise: f64 = clean
        .voiced_values()
        .zip(noisy.voiced_values())
        .map(|(c, n)| (n - c) * (n - c))
        .sum::<f64>()
        / stats.voiced_count as f64;
    if !(noise > 0.0) {
        return Err(Error::Degenerate("zero noise energy".into()));
    }
    Ok(10.0 * (stats.std * stats.std / noise).log10())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn track(values: &[f64]) -> F0Track {
        let voiced = values.iter().map(|&v| v != 0.0).collect();
        F0Track::new(values.to_vec(), voiced, DEFAULT_FRAME_RATE).unwrap()
    }

    fn stats(mean: f64, std: f64) -> F0Stats {
        F0Stats {
            mean,
            std,
            voiced_count: 0,
        }
    }

    #[test]
    fn mask_must_match_values() {
        assert!(F0Track::new(vec![0.0, 100.0], vec![true, true], 100.0).is_err());
        assert!(F0Track::new(vec![5.0], vec![false], 100.0).is_err());
        assert!(F0Track::new(vec![-5.0], vec![true], 100.0).is_err());
    }

    #[test]
    fn stats_examples() {
        let s = f0_stats(&track(&[100.0, 100.0, 100.0])).unwrap();
        assert_eq!((s.mean, s.std), (100.0, 0.0));
        let s = f0_stats(&track(&[90.0, 110.0])).unwrap();
        assert_eq!((s.mean, s.std), (100.0, 10.0));
        let s = f0_stats(&track(&[0.0, 100.0, 100.0])).unwrap();
        assert_eq!((s.mean, s.voiced_count), (100.0, 2));
        assert!(f0_stats(&track(&[0.0, 0.0, 120.0])).is_err());
    }

    #[test]
    fn shift_identity_and_affine_value() {
        let t = track(&[110.0, 0.0, 95.5]);
        let s = stats(100.0, 10.0);
        assert_eq!(linear_shift(&t, &s, &s).unwrap(), t);
        let out = linear_shift(&t, &s, &stats(200.0, 20.0)).unwrap();
        assert_eq!(out.values()[0], 220.0);
        assert_eq!(out.values()[1], 0.0);
        assert!(!out.voiced()[1]);
    }

    #[test]
    fn shift_rejects_flat_source() {
        let t = track(&[100.0, 100.0]);
        let err = linear_shift(&t, &stats(100.0, 0.0), &stats(200.0, 20.0)).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn awgn_hand_sigma() {
        // sigma_n = sqrt(400 / 10^1.5)
        let sigma = (400.0 / 10f64.powf(1.5)).sqrt();
        assert!((sigma - 3.557).abs() < 1e-3);
    }

    #[test]
    fn awgn_infinite_snr_is_identity() {
        let t = track(&[100.0, 0.0, 120.0, 80.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(add_awgn(&t, f64::INFINITY, &mut rng).unwrap(), t);
    }

    #[test]
    fn awgn_leaves_unvoiced_bitwise() {
        let t = track(&[100.0, 0.0, 120.0, 0.0, 80.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy = add_awgn(&t, 0.0, &mut rng).unwrap();
        assert_eq!(noisy.voiced(), t.voiced());
        assert_eq!(noisy.values()[1].to_bits(), 0f64.to_bits());
        assert_eq!(noisy.values()[3].to_bits(), 0f64.to_bits());
        assert_ne!(noisy.values()[0], 100.0);
    }

    #[test]
    fn awgn_rejects_flat_track() {
        let t = track(&[100.0, 100.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(add_awgn(&t, 15.0, &mut rng).is_err());
    }

    #[test]
    fn snr_rejects_zero_noise_and_mask_mismatch() {
        let t = track(&[100.0, 0.0, 120.0]);
        assert!(measured_snr(&t, &t).is_err());
        let other = track(&[100.0, 110.0, 120.0]);
        assert!(measured_snr(&t, &other).is_err());
    }

    #[test]
    fn text_round_trip() {
        let t = track(&[123.456_789_012_345_68, 0.0, 0.1 + 0.2]);
        let back = F0Track::parse(&t.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, t);
        assert!(F0Track::parse("100.0 2\n", Path::new("mem")).is_err());
        assert!(F0Track::parse("100.0\n", Path::new("mem")).is_err());
        assert!(F0Track::parse("0.0 1\n", Path::new("mem")).is_err());
    }
}
