use std::io::{Read, Write};

use rand::seq::index;
use rand::Rng;

use crate::autodiff::Tensor2D;
use crate::error::{Error, Result};

pub const DEFAULT_DECAY: f64 = 0.99;
pub const DEFAULT_LAPLACE_EPS: f64 = 1e-5;
pub const DEFAULT_DEAD_THRESHOLD: f64 = 1e-3;

const MAGIC: &[u8; 4] = b"VQCB";
const VERSION: u32 = 1;

/// A dictionary of `V` prototype vectors of dimension `D`, learned by
/// exponential moving averages of the latents assigned to each prototype.
///
/// The accumulators start at one pseudo-assignment per prototype located at
/// the prototype itself, so `prototypes == embed_sum / cluster_size` holds
/// from construction on.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    prototypes: Tensor2D,
    ema_cluster_size: Vec<f64>,
    ema_embed_sum: Tensor2D,
    decay: f64,
    laplace_eps: f64,
}

impl Codebook {
    pub fn new(prototypes: Tensor2D, decay: f64, laplace_eps: f64) -> Result<Self> {
        if prototypes.rows() == 0 || prototypes.cols() == 0 {
            return Err(Error::InvalidArgument("codebook must be non-empty".into()));
        }
        if !prototypes.is_finite() {
            return Err(Error::InvalidArgument("prototypes must be finite".into()));
        }
        check_decay(decay)?;
        check_laplace(laplace_eps)?;
        Ok(Self {
            ema_cluster_size: vec![1.0; prototypes.rows()],
            ema_embed_sum: prototypes.clone(),
            prototypes,
            decay,
            laplace_eps,
        })
    }

    /// Initializes from `size` distinct rows of `frames`, chosen at random.
    pub fn from_frames<R: Rng + ?Sized>(
        frames: &Tensor2D,
        size: usize,
        decay: f64,
        laplace_eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if size == 0 || frames.rows() < size {
            return Err(Error::Config(format!(
                "cannot draw {size} distinct prototypes from {} frames",
                frames.rows()
            )));
        }
        let mut picked = index::sample(rng, frames.rows(), size).into_vec();
        picked.sort_unstable();
        Self::new(frames.select_rows(&picked), decay, laplace_eps)
    }

    pub fn size(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn prototypes(&self) -> &Tensor2D {
        &self.prototypes
    }

    pub fn prototype(&self, i: usize) -> &[f64] {
        self.prototypes.row(i)
    }

    pub fn cluster_sizes(&self) -> &[f64] {
        &self.ema_cluster_size
    }

    pub fn embed_sums(&self) -> &Tensor2D {
        &self.ema_embed_sum
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn laplace_eps(&self) -> f64 {
        self.laplace_eps
    }

    pub fn set_decay(&mut self, decay: f64) -> Result<()> {
        check_decay(decay)?;
        self.decay = decay;
        Ok(())
    }

    /// Overwrites prototypes directly; used by gradient-based codebook
    /// learning, which bypasses the moving averages.
    pub fn set_prototypes(&mut self, prototypes: Tensor2D) -> Result<()> {
        if !prototypes.same_shape(&self.prototypes) {
            return Err(Error::shape(
                "Codebook::set_prototypes",
                format!("{:?} vs {:?}", prototypes.shape(), self.prototypes.shape()),
            ));
        }
        self.prototypes = prototypes;
        Ok(())
    }

    /// Moving-average update from one batch of latents and their assignments.
    ///
    /// With `n_i` frames and sum `m_i` assigned to prototype `i`:
    /// `size_i <- g*size_i + (1-g)*n_i`, `sum_i <- g*sum_i + (1-g)*m_i`, and
    /// `e_i = sum_i / smoothed_i` where
    /// `smoothed_i = (size_i + eps) / (N + V*eps) * N` and `N = sum_i size_i`.
    pub fn ema_update(&mut self, h: &Tensor2D, indices: &[usize]) -> Result<()> {
        if h.cols() != self.dim() {
            return Err(Error::shape(
                "ema_update",
                format!("latent dim {} vs codebook dim {}", h.cols(), self.dim()),
            ));
        }
        if indices.len() != h.rows() {
            return Err(Error::shape(
                "ema_update",
                format!("{} indices for {} frames", indices.len(), h.rows()),
            ));
        }
        let v = self.size();
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!("prototype index {bad} >= {v}")));
        }

        let mut counts = vec![0.0; v];
        let mut sums = Tensor2D::zeros(v, self.dim());
        for (row, &i) in h.row_iter().zip(indices) {
            counts[i] += 1.0;
            for (s, x) in sums.row_mut(i).iter_mut().zip(row) {
                *s += x;
            }
        }

        let g = self.decay;
        for (c, n) in self.ema_cluster_size.iter_mut().zip(&counts) {
            *c = g * *c + (1.0 - g) * n;
        }
        for (s, m) in self.ema_embed_sum.data_mut().iter_mut().zip(sums.data()) {
            *s = g * *s + (1.0 - g) * m;
        }
        self.refresh_prototypes();
        Ok(())
    }

    fn refresh_prototypes(&mut self) {
        let v = self.size() as f64;
        let eps = self.laplace_eps;
        let total: f64 = self.ema_cluster_size.iter().sum();
        for i in 0..self.size() {
            let smoothed = (self.ema_cluster_size[i] + eps) / (total + v * eps) * total;
            let (sum, proto) = (self.ema_embed_sum.row(i), self.prototypes.row_mut(i));
            for (p, s) in proto.iter_mut().zip(sum) {
                *p = s / smoothed;
            }
        }
    }

    /// Replaces every prototype whose moving-average size is below `threshold`
    /// with a uniformly drawn row of `h`, resetting its accumulators to one
    /// assignment at that row. Returns the replaced indices.
    pub fn dead_code_reseed<R: Rng + ?Sized>(
        &mut self,
        h: &Tensor2D,
        threshold: f64,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if !(threshold >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold must be >= 0, got {threshold}"
            )));
        }
        if h.cols() != self.dim() {
            return Err(Error::shape(
                "dead_code_reseed",
                format!("latent dim {} vs codebook dim {}", h.cols(), self.dim()),
            ));
        }
        let dead: Vec<usize> = (0..self.size())
            .filter(|&i| self.ema_cluster_size[i] < threshold)
            .collect();
        if h.rows() == 0 {
            return Ok(Vec::new());
        }
        for &i in &dead {
            let j = rng.random_range(0..h.rows());
            self.prototypes.row_mut(i).copy_from_slice(h.row(j));
            self.ema_embed_sum.row_mut(i).copy_from_slice(h.row(j));
            self.ema_cluster_size[i] = 1.0;
        }
        Ok(dead)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.size() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        w.write_all(&self.decay.to_le_bytes())?;
        w.write_all(&self.laplace_eps.to_le_bytes())?;
        let values = self
            .prototypes
            .data()
            .iter()
            .chain(&self.ema_cluster_size)
            .chain(self.ema_embed_sum.data());
        for x in values {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |detail: String| Error::format("<codebook>", detail);
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let v = u64::from_le_bytes(read_array(r)?) as usize;
        let d = u64::from_le_bytes(read_array(r)?) as usize;
        // Reject absurd headers before allocating.
        if v == 0 || d == 0 || v.checked_mul(d).is_none_or(|n| n > (1 << 28)) {
            return Err(bad(format!("implausible codebook shape {v}x{d}")));
        }
        let decay = f64::from_le_bytes(read_array(r)?);
        let laplace_eps = f64::from_le_bytes(read_array(r)?);
        let prototypes = Tensor2D::new(v, d, read_f64s(r, v * d)?)?;
        let ema_cluster_size = read_f64s(r, v)?;
        let ema_embed_sum = Tensor2D::new(v, d, read_f64s(r, v * d)?)?;
        check_decay(decay)?;
        check_laplace(laplace_eps)?;
        Ok(Self {
            prototypes,
            ema_cluster_size,
            ema_embed_sum,
            decay,
            laplace_eps,
        })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let cb = Self::read_from(&mut bytes)?;
        if !bytes.is_empty() {
            return Err(Error::format(
                "<codebook>",
                format!("{} trailing bytes", bytes.len()),
            ));
        }
        Ok(cb)
    }
}

fn check_decay(decay: f64) -> Result<()> {
    if !(decay > 0.0 && decay < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "decay must lie in (0, 1), got {decay}"
        )));
    }
    Ok(())
}

fn check_laplace(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "laplace_eps must be > 0, got {eps}"
        )));
    }
    Ok(())
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::format("<binary>", format!("truncated input: {e}")))
}

pub(crate) fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(f64::from_le_bytes(read_array(r)?));
    }
    Ok(out)
}

/// `exp(entropy)` of the empirical prototype-usage distribution.
pub fn codebook_perplexity(indices: &[usize], size: usize) -> Result<f64> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= size) {
        return Err(Error::InvalidArgument(format!("prototype index {bad} >= {size}")));
    }
    if indices.is_empty() {
        return Ok(1.0);
    }
    let mut counts = vec![0usize; size];
    for &i in indices {
        counts[i] += 1;
    }
    let n = indices.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cb(rows: &[&[f64]]) -> Codebook {
        Codebook::new(
            Tensor2D::from_rows(rows).unwrap(),
            DEFAULT_DECAY,
            DEFAULT_LAPLACE_EPS,
        )
        .unwrap()
    }

    #[test]
    fn perplexity_single_prototype() {
        assert_eq!(codebook_perplexity(&[3, 3, 3, 3], 8).unwrap(), 1.0);
    }

    #[test]
    fn perplexity_uniform() {
        let idx: Vec<usize> = (0..64).cycle().take(640).collect();
        assert!((codebook_perplexity(&idx, 64).unwrap() - 64.0).abs() < 1e-9);
    }

    #[test]
    fn perplexity_three_quarters() {
        // H = -(3/4 ln 3/4 + 1/4 ln 1/4) = 0.5623351446...
        let h = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((h - 0.5623).abs() < 1e-4);
        let p = codebook_perplexity(&[0, 0, 0, 1], 2).unwrap();
        assert!((p - h.exp()).abs() < 1e-12);
        assert!((p - 1.7548).abs() < 1e-4);
    }

    #[test]
    fn perplexity_rejects_bad_index() {
        assert!(codebook_perplexity(&[0, 2], 2).is_err());
    }

    #[test]
    fn unused_prototype_shrinks_but_stays_finite() {
        let mut book = cb(&[&[0.0, 0.0], &[5.0, 5.0]]);
        let h = Tensor2D::from_rows(&[[0.1, -0.1], [-0.1, 0.1]]).unwrap();
        for _ in 0..5000 {
            book.ema_update(&h, &[0, 0]).unwrap();
        }
        let far = book.prototype(1);
        assert!(far.iter().all(|v| v.is_finite()));
        assert!(far.iter().all(|v| v.abs() < 5.0));
        assert!(book.cluster_sizes()[1] < DEFAULT_DEAD_THRESHOLD);
    }

    #[test]
    fn reseed_noop_when_all_alive() {
        let mut book = cb(&[&[0.0, 0.0], &[5.0, 5.0]]);
        let before = book.clone();
        let h = Tensor2D::from_rows(&[[9.0, 9.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let replaced = book
            .dead_code_reseed(&h, DEFAULT_DEAD_THRESHOLD, &mut rng)
            .unwrap();
        assert!(replaced.is_empty());
        assert_eq!(book, before);
    }

    #[test]
    fn reseed_replaces_dead_prototype_with_a_frame() {
        let mut book = cb(&[&[0.0, 0.0], &[5.0, 5.0]]);
        let h0 = Tensor2D::from_rows(&[[0.1, 0.0]]).unwrap();
        for _ in 0..2000 {
            book.ema_update(&h0, &[0]).unwrap();
        }
        let h = Tensor2D::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let replaced = book
            .dead_code_reseed(&h, DEFAULT_DEAD_THRESHOLD, &mut rng)
            .unwrap();
        assert_eq!(replaced, vec![1]);
        assert!(h.row_iter().any(|r| r == book.prototype(1)));
        assert_eq!(book.cluster_sizes()[1], 1.0);
        assert_eq!(book.embed_sums().row(1), book.prototype(1));
    }

    #[test]
    fn serialization_round_trip_and_header() {
        let mut book = cb(&[&[0.25, -1.0, 3.5], &[1e-300, 7.0, -0.0]]);
        let h = Tensor2D::from_rows(&[[0.3, 0.1, 0.2]]).unwrap();
        book.ema_update(&h, &[1]).unwrap();
        let bytes = book.to_bytes();
        assert_eq!(&bytes[..4], b"VQCB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = Codebook::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, book);
    }

    #[test]
    fn deserialization_rejects_corruption() {
        let book = cb(&[&[1.0, 2.0]]);
        let mut bytes = book.to_bytes();
        assert!(Codebook::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(Codebook::from_bytes(&bytes).is_err());
    }

    #[test]
    fn from_frames_uses_distinct_rows() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, -(i as f64)]).collect();
        let frames = Tensor2D::from_rows(&rows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let book = Codebook::from_frames(&frames, 8, 0.99, 1e-5, &mut rng).unwrap();
        let mut firsts: Vec<i64> = (0..8).map(|i| book.prototype(i)[0] as i64).collect();
        firsts.dedup();
        assert_eq!(firsts.len(), 8);
        assert!(Codebook::from_frames(&frames, 21, 0.99, 1e-5, &mut rng).is_err());
    }
}
