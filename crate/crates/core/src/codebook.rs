//! Codebooks, the trained model, and the exhaustive nearest-codeword kernels.
//!
//! Codewords are stored as `f32` (the serialized precision) and every distance is
//! accumulated in `f64`, so a model read back from disk searches and reconstructs
//! bit-identically to the one that was written.

use crate::error::{Error, Result};
use crate::layout::SubVectorLayout;

/// Smallest prior probability a finalized codebook may carry.
pub const PRIOR_FLOOR: f64 = 1.0 / 4_294_967_296.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    dim: usize,
    bits: u8,
    vectors: Vec<f32>,
    prior: Vec<f64>,
    rate_bits: Vec<f64>,
    uniform_prior: bool,
    code_lengths: Option<Vec<u8>>,
}

#[inline]
pub(crate) fn sq_dist(r: &[f64], c: &[f32]) -> f64 {
    r.iter()
        .zip(c)
        .map(|(&a, &b)| {
            let d = a - b as f64;
            d * d
        })
        .sum()
}

impl Codebook {
    /// A codebook of `2^bits` codewords with a uniform prior.
    pub fn new(dim: usize, bits: u8, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("codeword dimension must be positive".into()));
        }
        if bits == 0 || bits > crate::layout::MAX_BITS {
            return Err(Error::Config(format!("codebook bit width {bits} unsupported")));
        }
        let size = 1usize << bits;
        if vectors.len() != size * dim {
            return Err(Error::Config(format!(
                "codebook needs {} values ({size} x {dim}), got {}",
                size * dim,
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("codebook contains non-finite values".into()));
        }
        let p = 1.0 / size as f64;
        Ok(Self {
            dim,
            bits,
            vectors,
            prior: vec![p; size],
            rate_bits: vec![bits as f64; size],
            uniform_prior: true,
            code_lengths: None,
        })
    }

    /// Replaces the prior. Entries must be positive and sum to one within `1e-9`.
    pub fn with_prior(mut self, prior: Vec<f64>) -> Result<Self> {
        self.set_prior(prior)?;
        Ok(self)
    }

    pub(crate) fn set_prior(&mut self, prior: Vec<f64>) -> Result<()> {
        if prior.len() != self.size() {
            return Err(Error::Config(format!(
                "prior has {} entries, codebook has {}",
                prior.len(),
                self.size()
            )));
        }
        if let Some((index, &value)) = prior
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.is_finite() && **p > 0.0))
        {
            return Err(Error::InvalidPrior { index, value });
        }
        let sum: f64 = prior.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("prior sums to {sum}, expected 1")));
        }
        self.rate_bits = prior.iter().map(|p| -p.log2()).collect();
        self.uniform_prior = self.rate_bits.iter().all(|&r| r == self.rate_bits[0]);
        self.prior = prior;
        Ok(())
    }

    /// Attaches Huffman code lengths. The lengths must satisfy the Kraft inequality.
    pub fn with_code_lengths(mut self, lengths: Vec<u8>) -> Result<Self> {
        if lengths.len() != self.size() {
            return Err(Error::Config("code length table size mismatch".into()));
        }
        if lengths.iter().any(|&l| l == 0 || l > crate::entropy::MAX_CODE_LEN) {
            return Err(Error::Config("code length out of range".into()));
        }
        let kraft: u128 = lengths.iter().map(|&l| 1u128 << (64 - l as u32)).sum();
        if kraft > 1u128 << 64 {
            return Err(Error::Config("code lengths violate the Kraft inequality".into()));
        }
        self.code_lengths = Some(lengths);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn size(&self) -> usize {
        1 << self.bits
    }

    pub fn codeword(&self, k: usize) -> &[f32] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn code_lengths(&self) -> Option<&[u8]> {
        self.code_lengths.as_deref()
    }

    fn check_query(&self, r: &[f64]) -> Result<()> {
        if r.len() != self.dim {
            return Err(Error::Data(format!(
                "query has {} entries, codebook dimension is {}",
                r.len(),
                self.dim
            )));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("query contains non-finite values".into()));
        }
        Ok(())
    }

    /// Index of the codeword closest to `r` in squared Euclidean distance (lowest index on
    /// ties) and that distance.
    pub fn nearest(&self, r: &[f64]) -> Result<(usize, f64)> {
        self.check_query(r)?;
        Ok(self.scan_nearest(r))
    }

    /// Index minimizing `lambda * ||r - c_k||^2 - log2 p_k`, its distortion and its rate in
    /// bits.
    pub fn nearest_rate_penalized(&self, r: &[f64], lambda: f64) -> Result<(usize, f64, f64)> {
        self.check_query(r)?;
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
        }
        if let Some((index, &value)) = self.prior.iter().enumerate().find(|(_, p)| **p <= 0.0) {
            return Err(Error::InvalidPrior { index, value });
        }
        let (k, d) = self.scan_penalized(r, lambda);
        Ok((k, d, self.rate_bits[k]))
    }

    #[inline]
    pub(crate) fn scan_nearest(&self, r: &[f64]) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for (k, c) in self.vectors.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(r, c);
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    #[inline]
    pub(crate) fn scan_penalized(&self, r: &[f64], lambda: f64) -> (usize, f64) {
        // A constant rate term cannot change the argmin; skip it so rounding cannot either.
        if self.uniform_prior {
            return self.scan_nearest(r);
        }
        let mut best = (0usize, f64::INFINITY, f64::INFINITY);
        for (k, c) in self.vectors.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(r, c);
            let j = lambda * d + self.rate_bits[k];
            if j < best.2 {
                best = (k, d, j);
            }
        }
        (best.0, best.1)
    }

    #[inline]
    pub(crate) fn rate_bits(&self, k: usize) -> f64 {
        self.rate_bits[k]
    }

    pub(crate) fn vectors_mut(&mut self) -> &mut [f32] {
        &mut self.vectors
    }
}

/// Which search rule a stage uses when quantizing a residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AssignRule {
    Nearest,
    RatePenalized { lambda: f64 },
}

impl AssignRule {
    /// Returns the chosen index and its squared distortion.
    #[inline]
    pub fn assign(&self, codebook: &Codebook, r: &[f64]) -> (usize, f64) {
        match *self {
            AssignRule::Nearest => codebook.scan_nearest(r),
            AssignRule::RatePenalized { lambda } => codebook.scan_penalized(r, lambda),
        }
    }
}

/// A trained multi-stage codec: layout, fallback means and all stage codebooks.
#[derive(Debug, Clone, PartialEq)]
pub struct MsvqModel {
    layout: SubVectorLayout,
    means: Vec<f32>,
    codebooks: Vec<Vec<Codebook>>,
    ec_enabled: bool,
    lambda: Vec<f32>,
    strict: bool,
    table_digest: Option<u64>,
}

impl MsvqModel {
    /// `means` is layout-ordered (`N * D` values); `codebooks[g][t]` is the codebook
    /// shared by group `g` at stage `t`.
    pub fn new(
        layout: SubVectorLayout,
        means: Vec<f32>,
        codebooks: Vec<Vec<Codebook>>,
        ec_enabled: bool,
        lambda: Vec<f32>,
    ) -> Result<Self> {
        let t_max = layout.t_max();
        if means.len() != layout.m_dim() {
            return Err(Error::Config("fallback means do not match the layout".into()));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("fallback means are not finite".into()));
        }
        if codebooks.len() != layout.n_groups() {
            return Err(Error::Config(format!(
                "{} codebook groups for {} layout groups",
                codebooks.len(),
                layout.n_groups()
            )));
        }
        for (g, stages) in codebooks.iter().enumerate() {
            if stages.len() != t_max {
                return Err(Error::Config(format!("group {g} has {} stages", stages.len())));
            }
            for (t, cb) in stages.iter().enumerate() {
                if cb.dim() != layout.sub_dim() || cb.bits() != layout.group_bits(g, t) {
                    return Err(Error::Config(format!(
                        "codebook ({g}, {t}) is {} bits x {} dims, layout needs {} x {}",
                        cb.bits(),
                        cb.dim(),
                        layout.group_bits(g, t),
                        layout.sub_dim()
                    )));
                }
            }
        }
        if ec_enabled && (lambda.len() != t_max || lambda.iter().any(|&l| !(l > 0.0 && l.is_finite()))) {
            return Err(Error::Config("entropy-coded model needs one positive lambda per stage".into()));
        }
        Ok(Self {
            layout,
            means,
            codebooks,
            ec_enabled,
            lambda: if ec_enabled { lambda } else { Vec::new() },
            strict: false,
            table_digest: None,
        })
    }

    pub fn layout(&self) -> &SubVectorLayout {
        &self.layout
    }

    pub fn t_max(&self) -> usize {
        self.layout.t_max()
    }

    pub fn ec_enabled(&self) -> bool {
        self.ec_enabled
    }

    pub fn lambda(&self) -> &[f32] {
        &self.lambda
    }

    pub fn strict(&self) -> bool {
        self.strict
    }

    /// True when every codebook carries Huffman code lengths.
    pub fn has_entropy_codes(&self) -> bool {
        self.codebooks
            .iter()
            .flatten()
            .all(|cb| cb.code_lengths().is_some())
    }

    /// Replaces the codebooks with the same shapes (used to attach code lengths).
    pub(crate) fn map_codebooks(
        mut self,
        mut f: impl FnMut(usize, usize, Codebook) -> Result<Codebook>,
    ) -> Result<Self> {
        let books = std::mem::take(&mut self.codebooks);
        self.codebooks = books
            .into_iter()
            .enumerate()
            .map(|(g, stages)| {
                stages
                    .into_iter()
                    .enumerate()
                    .map(|(t, cb)| f(g, t, cb))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self)
    }

    pub fn table_digest(&self) -> Option<u64> {
        self.table_digest
    }

    /// Layout-ordered means used to reconstruct sub-vectors that receive no stages.
    pub fn means(&self) -> &[f32] {
        &self.means
    }

    pub fn mean_of(&self, i: usize) -> &[f32] {
        let d = self.layout.sub_dim();
        &self.means[i * d..(i + 1) * d]
    }

    pub fn codebooks(&self) -> &[Vec<Codebook>] {
        &self.codebooks
    }

    /// Same model bound to a specific marginal-loss table.
    pub fn with_table_digest(mut self, digest: Option<u64>) -> Self {
        self.table_digest = digest;
        self
    }

    pub fn with_strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    /// Codebook used by sub-vector `i` at stage `t` (both zero-based).
    pub fn resolve(&self, i: usize, t: usize) -> Result<&Codebook> {
        if i >= self.layout.n_sub() || t >= self.t_max() {
            return Err(Error::Index(format!(
                "(sub-vector {i}, stage {t}) outside {} x {}",
                self.layout.n_sub(),
                self.t_max()
            )));
        }
        Ok(&self.codebooks[self.layout.group_of()[i]][t])
    }

    #[inline]
    pub(crate) fn codebook(&self, i: usize, t: usize) -> &Codebook {
        &self.codebooks[self.layout.group_of()[i]][t]
    }

    /// Search rule for stage `t`.
    pub fn rule(&self, t: usize) -> AssignRule {
        if self.ec_enabled {
            AssignRule::RatePenalized {
                lambda: self.lambda[t] as f64,
            }
        } else {
            AssignRule::Nearest
        }
    }

    /// Number of stored codeword coordinates, counted from the codebooks themselves.
    pub fn codeword_parameter_count(&self) -> usize {
        self.codebooks
            .iter()
            .flatten()
            .map(|cb| cb.vectors().len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_codebook(rng: &mut impl Rng, dim: usize, bits: u8) -> Codebook {
        let v = (0..(1usize << bits) * dim)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        Codebook::new(dim, bits, v).unwrap()
    }

    fn brute_force(cb: &Codebook, r: &[f64]) -> usize {
        let dists: Vec<f64> = (0..cb.size())
            .map(|k| {
                cb.codeword(k)
                    .iter()
                    .zip(r)
                    .map(|(&c, &x)| (x - c as f64).powi(2))
                    .sum()
            })
            .collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        dists.iter().position(|&d| d == min).unwrap()
    }

    #[test]
    fn two_point_geometry() {
        let cb = Codebook::new(2, 1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let (k, d) = cb.nearest(&[0.9, 0.9]).unwrap();
        assert_eq!(k, 1);
        let expected = 2.0 * (0.9f64 - 1.0).powi(2);
        assert!((d - expected).abs() < 1e-15);
        assert!((d - 0.02).abs() < 1e-12);
    }

    #[test]
    fn exact_match_has_zero_distortion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cb = random_codebook(&mut rng, 3, 3);
        let q: Vec<f64> = cb.codeword(4).iter().map(|&v| v as f64).collect();
        assert_eq!(cb.nearest(&q).unwrap(), (4, 0.0));
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cb = random_codebook(&mut rng, 4, 4);
        for _ in 0..100 {
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
            assert_eq!(cb.nearest(&q).unwrap().0, brute_force(&cb, &q));
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let cb = Codebook::new(1, 1, vec![-1.0, 1.0]).unwrap();
        assert_eq!(cb.nearest(&[0.0]).unwrap().0, 0);
        let dup = Codebook::new(1, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(dup.nearest(&[0.5]).unwrap().0, 0);
    }

    #[test]
    fn query_validation() {
        let cb = Codebook::new(2, 1, vec![0.0; 4]).unwrap();
        assert!(matches!(cb.nearest(&[0.0]), Err(Error::Data(_))));
        assert!(matches!(cb.nearest(&[0.0, f64::NAN]), Err(Error::Data(_))));
    }

    #[test]
    fn rate_penalized_worked_example() {
        let cb = Codebook::new(1, 1, vec![0.0, 1.0])
            .unwrap()
            .with_prior(vec![0.9, 0.1])
            .unwrap();
        let (k, d, rate) = cb.nearest_rate_penalized(&[0.45], 1.0).unwrap();
        // Objectives: 0.2025 + 0.152 = 0.3545 vs 0.3025 + 3.322 = 3.624.
        assert_eq!(k, 0);
        assert!((d - 0.2025).abs() < 1e-12);
        assert!((rate - (-(0.9f64).log2())).abs() < 1e-12);
        assert!((rate - 0.152).abs() < 1e-3);
    }

    #[test]
    fn uniform_prior_and_huge_lambda_agree_with_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cb = random_codebook(&mut rng, 4, 5);
        let mut skewed: Vec<f64> = (0..32).map(|k| 1.0 + k as f64).collect();
        let s: f64 = skewed.iter().sum();
        skewed.iter_mut().for_each(|p| *p /= s);
        let skewed_cb = cb.clone().with_prior(skewed).unwrap();
        for _ in 0..200 {
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let plain = cb.nearest(&q).unwrap().0;
            for lambda in [1e-3, 0.5, 10.0] {
                assert_eq!(cb.nearest_rate_penalized(&q, lambda).unwrap().0, plain);
            }
            assert_eq!(skewed_cb.nearest_rate_penalized(&q, 1e9).unwrap().0, plain);
        }
    }

    #[test]
    fn invalid_prior_rejected() {
        let cb = Codebook::new(1, 1, vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            cb.clone().with_prior(vec![1.0, 0.0]),
            Err(Error::InvalidPrior { index: 1, .. })
        ));
        assert!(cb.clone().with_prior(vec![0.5, 0.6]).is_err());
        assert!(cb.nearest_rate_penalized(&[0.0], 0.0).is_err());
    }

    #[test]
    fn kraft_checked_on_code_lengths() {
        let cb = Codebook::new(1, 2, vec![0.0; 4]).unwrap();
        assert!(cb.clone().with_code_lengths(vec![1, 2, 3, 3]).is_ok());
        assert!(cb.with_code_lengths(vec![1, 1, 2, 2]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn nearest_equals_scan(
                seed in any::<u64>(),
                dim in 1usize..6,
                bits in 1u8..6,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let cb = random_codebook(&mut rng, dim, bits);
                for _ in 0..20 {
                    let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                    prop_assert_eq!(cb.nearest(&q).unwrap().0, brute_force(&cb, &q));
                    let lambda = rng.random_range(1e-3..1e3);
                    prop_assert_eq!(cb.nearest_rate_penalized(&q, lambda).unwrap().0, brute_force(&cb, &q));
                }
            }
        }
    }
}
