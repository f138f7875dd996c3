//! Feature statistics, the variance-sorted sub-vector layout, shared-codebook groups
//! and per-module bit allocations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

/// Largest per-module bit width accepted (codebooks of up to 2^16 codewords).
pub const MAX_BITS: u8 = 16;

/// Per-coordinate mean and population variance of a feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub sample_count: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Average variance over all coordinates.
    pub fn mean_variance(&self) -> f64 {
        self.variance.iter().sum::<f64>() / self.variance.len() as f64
    }
}

/// Exact sample mean and population (1/n) variance of every coordinate.
pub fn compute_stats(data: &FeatureMatrix) -> Result<FeatureStats> {
    if data.rows() < 2 {
        return Err(Error::InsufficientData(format!(
            "statistics need at least 2 rows, got {}",
            data.rows()
        )));
    }
    data.ensure_finite()?;
    let m = data.cols();
    let n = data.rows() as f64;
    let mut mean = vec![0.0f64; m];
    for row in data.iter_rows() {
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc += v as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    // Two-pass variance; the shifted sum avoids cancellation on offset data.
    let mut variance = vec![0.0f64; m];
    for row in data.iter_rows() {
        for ((acc, &v), mu) in variance.iter_mut().zip(row).zip(&mean) {
            let d = v as f64 - mu;
            *acc += d * d;
        }
    }
    variance.iter_mut().for_each(|v| *v /= n);
    Ok(FeatureStats {
        mean,
        variance,
        sample_count: data.rows(),
    })
}

/// An `N x T_max` matrix of quantization bit widths, row `i` = sub-vector, column `t` = stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitMatrix {
    n_sub: usize,
    t_max: usize,
    bits: Vec<u8>,
}

impl BitMatrix {
    /// Builds a matrix from rows, enforcing the monotone allocation rules: widths never
    /// grow for later (lower-variance) sub-vectors or for later stages.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n_sub = rows.len();
        if n_sub == 0 {
            return Err(Error::Config("bit matrix has no rows".into()));
        }
        let t_max = rows[0].len();
        if t_max == 0 {
            return Err(Error::Config("bit matrix has no stages".into()));
        }
        let mut bits = Vec::with_capacity(n_sub * t_max);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != t_max {
                return Err(Error::Config(format!(
                    "bit matrix row {i} has {} stages, expected {t_max}",
                    row.len()
                )));
            }
            bits.extend_from_slice(row);
        }
        let m = Self { n_sub, t_max, bits };
        m.validate()?;
        Ok(m)
    }

    fn uniform_blocks(n_sub: usize, t_max: usize, high: &[u8], low: &[u8]) -> Self {
        let n_high = n_sub.div_ceil(2);
        let mut bits = Vec::with_capacity(n_sub * t_max);
        for i in 0..n_sub {
            bits.extend_from_slice(if i < n_high { high } else { low });
        }
        Self { n_sub, t_max, bits }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n_sub {
            for t in 0..self.t_max {
                let b = self.get(i, t);
                if b == 0 || b > MAX_BITS {
                    return Err(Error::Config(format!(
                        "bit width {b} at ({i}, {t}) outside 1..={MAX_BITS}"
                    )));
                }
                if t > 0 && b > self.get(i, t - 1) {
                    return Err(Error::Config(format!(
                        "sub-vector {i}: stage {t} has more bits than stage {}",
                        t - 1
                    )));
                }
                if i > 0 && b > self.get(i - 1, t) {
                    return Err(Error::Config(format!(
                        "stage {t}: sub-vector {i} has more bits than sub-vector {}",
                        i - 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_sub(&self) -> usize {
        self.n_sub
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    #[inline]
    pub fn get(&self, i: usize, t: usize) -> u8 {
        self.bits[i * self.t_max + t]
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.t_max..(i + 1) * self.t_max]
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.bits.chunks(self.t_max).map(<[u8]>::to_vec).collect()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.bits
    }

    /// Bits of the full plan (every sub-vector at all stages).
    pub fn total(&self) -> u64 {
        self.bits.iter().map(|&b| b as u64).sum()
    }
}

/// Named allocation strategies.
///
/// `TypeI` gives the higher-variance half 8, 7, 6, ... bits per stage and the rest
/// 6, 5, 4, ...; `TypeII` gives 7 and 5 bits at every stage; `TypeIII` gives 6 bits
/// everywhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AllocationPreset {
    TypeI,
    TypeII,
    TypeIII,
    Custom(BitMatrix),
}

impl AllocationPreset {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "type1" | "typei" | "i" => Ok(Self::TypeI),
            "type2" | "typeii" | "ii" => Ok(Self::TypeII),
            "type3" | "typeiii" | "iii" => Ok(Self::TypeIII),
            other => Err(Error::Config(format!("unknown allocation preset '{other}'"))),
        }
    }
}

pub fn allocation_preset(preset: &AllocationPreset, n_sub: usize, t_max: usize) -> Result<BitMatrix> {
    if n_sub == 0 || t_max == 0 {
        return Err(Error::Config("allocation needs n_sub >= 1 and t_max >= 1".into()));
    }
    let m = match preset {
        AllocationPreset::TypeI => {
            if t_max > 6 {
                return Err(Error::Config(format!(
                    "TypeI allocation supports at most 6 stages, got {t_max}"
                )));
            }
            let high: Vec<u8> = (0..t_max).map(|t| 8 - t as u8).collect();
            let low: Vec<u8> = (0..t_max).map(|t| 6 - t as u8).collect();
            BitMatrix::uniform_blocks(n_sub, t_max, &high, &low)
        }
        AllocationPreset::TypeII => {
            BitMatrix::uniform_blocks(n_sub, t_max, &vec![7; t_max], &vec![5; t_max])
        }
        AllocationPreset::TypeIII => {
            BitMatrix::uniform_blocks(n_sub, t_max, &vec![6; t_max], &vec![6; t_max])
        }
        AllocationPreset::Custom(m) => {
            if m.n_sub() != n_sub || m.t_max() != t_max {
                return Err(Error::Config(format!(
                    "custom allocation is {}x{}, layout needs {n_sub}x{t_max}",
                    m.n_sub(),
                    m.t_max()
                )));
            }
            m.clone()
        }
    };
    m.validate()?;
    Ok(m)
}

/// Partition of an `M`-vector into `N` sub-vectors of `D` coordinates each, sorted by
/// descending variance, with shared-codebook group assignment and bit widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubVectorLayout {
    m_dim: usize,
    sub_dim: usize,
    n_sub: usize,
    /// `perm[j]` is the original coordinate placed at layout position `j`.
    perm: Vec<usize>,
    inverse: Vec<usize>,
    group_of: Vec<usize>,
    n_groups: usize,
    bits: BitMatrix,
}

impl SubVectorLayout {
    /// Assembles a layout from raw parts, checking every structural invariant.
    pub fn from_parts(
        sub_dim: usize,
        perm: Vec<usize>,
        group_of: Vec<usize>,
        n_groups: usize,
        bits: BitMatrix,
    ) -> Result<Self> {
        let m_dim = perm.len();
        if sub_dim == 0 || m_dim == 0 || m_dim % sub_dim != 0 {
            return Err(Error::Config(format!(
                "dimension {m_dim} is not a positive multiple of sub-vector size {sub_dim}"
            )));
        }
        let n_sub = m_dim / sub_dim;
        let mut inverse = vec![usize::MAX; m_dim];
        for (pos, &coord) in perm.iter().enumerate() {
            if coord >= m_dim || inverse[coord] != usize::MAX {
                return Err(Error::Config("permutation is not a bijection".into()));
            }
            inverse[coord] = pos;
        }
        if group_of.len() != n_sub {
            return Err(Error::Config(format!(
                "group map has {} entries, expected {n_sub}",
                group_of.len()
            )));
        }
        if n_groups == 0 || group_of.iter().any(|&g| g >= n_groups) {
            return Err(Error::Config("group id out of range".into()));
        }
        if bits.n_sub() != n_sub {
            return Err(Error::Config(format!(
                "bit matrix has {} rows, layout has {n_sub} sub-vectors",
                bits.n_sub()
            )));
        }
        bits.validate()?;
        let mut leader: Vec<Option<usize>> = vec![None; n_groups];
        for (i, &g) in group_of.iter().enumerate() {
            match leader[g] {
                None => leader[g] = Some(i),
                Some(l) if bits.row(l) != bits.row(i) => {
                    return Err(Error::Config(format!(
                        "sub-vectors {l} and {i} share group {g} but have different bit widths"
                    )));
                }
                Some(_) => {}
            }
        }
        if leader.iter().any(Option::is_none) {
            return Err(Error::Config("every group needs at least one sub-vector".into()));
        }
        Ok(Self {
            m_dim,
            sub_dim,
            n_sub,
            perm,
            inverse,
            group_of,
            n_groups,
            bits,
        })
    }

    pub fn m_dim(&self) -> usize {
        self.m_dim
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    pub fn n_sub(&self) -> usize {
        self.n_sub
    }

    pub fn t_max(&self) -> usize {
        self.bits.t_max()
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }

    pub fn bits(&self) -> &BitMatrix {
        &self.bits
    }

    /// Sub-vectors that share group `g`'s codebooks, in layout order.
    pub fn members(&self, g: usize) -> impl Iterator<Item = usize> + '_ {
        self.group_of
            .iter()
            .enumerate()
            .filter(move |(_, &gi)| gi == g)
            .map(|(i, _)| i)
    }

    /// Bit width of group `g` at stage `t` (identical for all members).
    pub fn group_bits(&self, g: usize, t: usize) -> u8 {
        let first = self.members(g).next().expect("groups are non-empty");
        self.bits.get(first, t)
    }

    /// Original coordinates owned by sub-vector `i`.
    pub fn coords(&self, i: usize) -> &[usize] {
        &self.perm[i * self.sub_dim..(i + 1) * self.sub_dim]
    }

    /// Reorders `z` into layout order (sub-vector major).
    pub fn permute(&self, z: &[f32]) -> Vec<f64> {
        self.perm.iter().map(|&c| z[c] as f64).collect()
    }

    /// Inverse of [`permute`](Self::permute): layout-ordered values back to original coordinates.
    pub fn unpermute<T: Copy>(&self, v: &[T]) -> Vec<T> {
        self.inverse.iter().map(|&pos| v[pos]).collect()
    }
}

/// Builds the layout: coordinates sorted by descending variance (ties by index),
/// consecutive runs of `sub_dim` form sub-vectors, and contiguous runs of `N / groups`
/// sub-vectors share codebooks.
pub fn build_layout(
    stats: &FeatureStats,
    sub_dim: usize,
    t_max: usize,
    groups: usize,
    alloc: &AllocationPreset,
) -> Result<SubVectorLayout> {
    let m = stats.dim();
    if sub_dim == 0 || m == 0 || m % sub_dim != 0 {
        return Err(Error::Config(format!(
            "feature dimension {m} is not divisible by sub-vector size {sub_dim}"
        )));
    }
    if t_max == 0 {
        return Err(Error::Config("t_max must be at least 1".into()));
    }
    let n_sub = m / sub_dim;
    if groups == 0 || groups > n_sub || n_sub % groups != 0 {
        return Err(Error::Config(format!(
            "group count {groups} must divide the sub-vector count {n_sub}"
        )));
    }
    let mut perm: Vec<usize> = (0..m).collect();
    perm.sort_by(|&a, &b| {
        stats.variance[b]
            .total_cmp(&stats.variance[a])
            .then(a.cmp(&b))
    });
    let per_group = n_sub / groups;
    let group_of = (0..n_sub).map(|i| i / per_group).collect();
    let bits = allocation_preset(alloc, n_sub, t_max)?;
    SubVectorLayout::from_parts(sub_dim, perm, group_of, groups, bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn stats_with_variance(variance: Vec<f64>) -> FeatureStats {
        FeatureStats {
            mean: vec![0.0; variance.len()],
            variance,
            sample_count: 10,
        }
    }

    #[test]
    fn two_point_stats() {
        let data = FeatureMatrix::from_rows(&[[0.0f32, 0.0], [2.0, 0.0]]).unwrap();
        let s = compute_stats(&data).unwrap();
        assert_eq!(s.mean, vec![1.0, 0.0]);
        assert_eq!(s.variance, vec![1.0, 0.0]);
        assert_eq!(s.sample_count, 2);
    }

    #[test]
    fn constant_data_has_zero_variance() {
        let data = FeatureMatrix::from_rows(&vec![[3.5f32, -1.0, 7.0]; 5]).unwrap();
        let s = compute_stats(&data).unwrap();
        assert!(s.variance.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_variance_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f32>> = (0..1000)
            .map(|_| {
                (0..8)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .map(|v: f64| v as f32)
                    .collect()
            })
            .collect();
        let data = FeatureMatrix::from_rows(&rows).unwrap();
        let s = compute_stats(&data).unwrap();
        for c in 0..8 {
            let mu: f64 = rows.iter().map(|r| r[c] as f64).sum::<f64>() / 1000.0;
            let var: f64 = rows.iter().map(|r| (r[c] as f64 - mu).powi(2)).sum::<f64>() / 1000.0;
            assert!((s.variance[c] - var).abs() < 1e-9);
            assert!((0.8..=1.2).contains(&s.variance[c]), "{}", s.variance[c]);
        }
    }

    #[test]
    fn stats_errors() {
        let one = FeatureMatrix::from_rows(&[[1.0f32]]).unwrap();
        assert!(matches!(compute_stats(&one), Err(Error::InsufficientData(_))));
        let bad = FeatureMatrix::from_rows(&[[1.0f32], [f32::INFINITY]]).unwrap();
        assert!(matches!(compute_stats(&bad), Err(Error::Data(_))));
    }

    #[test]
    fn variance_sorted_permutation() {
        let s = stats_with_variance(vec![5.0, 1.0, 9.0, 3.0]);
        let l = build_layout(&s, 2, 1, 1, &AllocationPreset::TypeIII).unwrap();
        assert_eq!(l.perm(), &[2, 0, 3, 1]);
        assert_eq!(l.coords(0), &[2, 0]);
        assert_eq!(l.coords(1), &[3, 1]);
    }

    #[test]
    fn ties_keep_index_order() {
        let s = stats_with_variance(vec![2.0; 6]);
        let l = build_layout(&s, 3, 2, 2, &AllocationPreset::TypeIII).unwrap();
        assert_eq!(l.perm(), &[0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn sixteen_groups_of_eight() {
        let s = stats_with_variance((0..512).map(|v| v as f64).collect());
        let l = build_layout(&s, 4, 3, 16, &AllocationPreset::TypeIII).unwrap();
        assert_eq!(l.n_sub(), 128);
        for i in 0..128 {
            assert_eq!(l.group_of()[i], i / 8);
        }
        assert_eq!(l.members(0).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn divisibility_errors() {
        let s = stats_with_variance(vec![1.0; 6]);
        assert!(matches!(
            build_layout(&s, 4, 1, 1, &AllocationPreset::TypeIII),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_layout(&s, 2, 1, 2, &AllocationPreset::TypeIII),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_layout(&s, 2, 1, 4, &AllocationPreset::TypeIII),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn type_one_preset_matches_published_widths() {
        let m = allocation_preset(&AllocationPreset::TypeI, 128, 3).unwrap();
        for i in 0..64 {
            assert_eq!(m.row(i), &[8, 7, 6]);
        }
        for i in 64..128 {
            assert_eq!(m.row(i), &[6, 5, 4]);
        }
    }

    #[test]
    fn type_two_and_three_presets() {
        let m = allocation_preset(&AllocationPreset::TypeII, 128, 3).unwrap();
        assert!((0..64).all(|i| m.row(i) == [7, 7, 7]));
        assert!((64..128).all(|i| m.row(i) == [5, 5, 5]));
        let m = allocation_preset(&AllocationPreset::TypeIII, 4, 2).unwrap();
        assert!((0..4).all(|i| m.row(i) == [6, 6]));
    }

    #[test]
    fn custom_allocation_checked() {
        let bad = BitMatrix::from_rows(&[vec![4, 5]]);
        assert!(matches!(bad, Err(Error::Config(_))));
        let bad = BitMatrix::from_rows(&[vec![4, 4], vec![5, 4]]);
        assert!(matches!(bad, Err(Error::Config(_))));
        let ok = BitMatrix::from_rows(&[vec![5, 4], vec![4, 4]]).unwrap();
        let preset = AllocationPreset::Custom(ok.clone());
        assert_eq!(allocation_preset(&preset, 2, 2).unwrap(), ok);
        assert!(matches!(allocation_preset(&preset, 3, 2), Err(Error::Config(_))));
    }

    #[test]
    fn shared_group_needs_identical_rows() {
        let s = stats_with_variance(vec![4.0, 3.0, 2.0, 1.0]);
        // TypeI gives the two sub-vectors different rows; one shared group is invalid.
        assert!(matches!(
            build_layout(&s, 2, 3, 1, &AllocationPreset::TypeI),
            Err(Error::Config(_))
        ));
        assert!(build_layout(&s, 2, 3, 2, &AllocationPreset::TypeI).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn layout_properties(
                variance in proptest::collection::vec(0.0f64..10.0, 1..8usize)
                    .prop_flat_map(|v| { let n = v.len(); (Just(v), 1..=3usize, Just(n)) }),
                probe in proptest::collection::vec(-5.0f32..5.0, 24),
            ) {
                let (base, sub_dim, _) = variance;
                // Repeat the variance pattern so the dimension is a multiple of sub_dim.
                let m = base.len() * sub_dim;
                let var: Vec<f64> = (0..m).map(|c| base[c % base.len()] + (c as f64) * 1e-3).collect();
                let s = stats_with_variance(var.clone());
                let l = build_layout(&s, sub_dim, 2, 1, &AllocationPreset::TypeIII).unwrap();
                for i in 0..l.n_sub().saturating_sub(1) {
                    let lo = l.coords(i).iter().map(|&c| var[c]).fold(f64::INFINITY, f64::min);
                    let hi = l.coords(i + 1).iter().map(|&c| var[c]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(lo >= hi);
                }
                let z: Vec<f32> = probe[..m].to_vec();
                let p = l.permute(&z);
                let back = l.unpermute(&p);
                prop_assert_eq!(back, z.iter().map(|&v| v as f64).collect::<Vec<_>>());
                prop_assert!(l.bits().validate().is_ok());
            }
        }
    }
}
