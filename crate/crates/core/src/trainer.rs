//! Sequential multi-stage codebook training.
//!
//! Stage `t` pools the current residuals of every sub-vector in a group, fits that
//! group's codebook with Lloyd iterations (plain, or entropy-constrained with a
//! rate-penalized assignment), then quantizes the pooled residuals and hands the new
//! residuals to stage `t + 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{sq_dist, AssignRule, Codebook, MsvqModel};
use crate::entropy::{attach_entropy_codes, pmf_from_counts};
use crate::error::{Error, Result};
use crate::layout::{compute_stats, SubVectorLayout};
use crate::matrix::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_iters: usize,
    /// Stop when the relative objective improvement of one iteration falls below this.
    pub rel_tol: f64,
    pub seed: u64,
    /// Per-stage distortion weight, entropy-constrained mode only.
    pub lambda: Vec<f64>,
    pub ec: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            rel_tol: 1e-5,
            seed: 0,
            lambda: Vec::new(),
            ec: false,
        }
    }
}

impl TrainConfig {
    pub fn entropy_constrained(mut self, lambda: Vec<f64>) -> Self {
        self.ec = true;
        self.lambda = lambda;
        self
    }

    fn validate(&self, t_max: usize) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Config("rel_tol must be positive".into()));
        }
        if self.ec {
            if self.lambda.len() != t_max {
                return Err(Error::Config(format!(
                    "{} lambda values for {t_max} stages",
                    self.lambda.len()
                )));
            }
            if self.lambda.iter().any(|&l| !(l.is_finite() && l > 0.0 && (l as f32) > 0.0)) {
                return Err(Error::Config("lambda values must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Lambda schedule `base[t] * 4^t / mean_variance`: the multipliers are in units of the
/// data's average per-coordinate variance, growing with depth as residuals shrink.
pub fn variance_scaled_lambda(mean_variance: f64, multiplier: f64, t_max: usize) -> Vec<f64> {
    (0..t_max)
        .map(|t| multiplier * 4f64.powi(t as i32) / mean_variance)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: usize,
    pub iterations: usize,
    /// Objective after each Lloyd iteration: mean distortion (plain), or
    /// `lambda * D + R + (1/P) sum_k -log2 p_k` (entropy-constrained).
    pub objective_trace: Vec<f64>,
    pub usage: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    /// Mean per-vector residual energy after this stage.
    pub distortion: f64,
    pub groups: Vec<GroupReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-vector energy of `z - mean`, i.e. the error with no stage active.
    pub initial_distortion: f64,
    pub per_stage_distortion: Vec<f64>,
    pub stages: Vec<StageReport>,
}

impl TrainReport {
    pub fn final_distortion(&self) -> f64 {
        *self.per_stage_distortion.last().unwrap_or(&self.initial_distortion)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LloydMode {
    Plain,
    EntropyConstrained { lambda: f64 },
}

impl LloydMode {
    fn rule(self) -> AssignRule {
        match self {
            LloydMode::Plain => AssignRule::Nearest,
            LloydMode::EntropyConstrained { lambda } => AssignRule::RatePenalized { lambda },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LloydStats {
    /// Mean distortion of the new assignment under the old codewords.
    pub distortion_before: f64,
    /// Mean distortion of the same assignment under the updated codewords.
    pub distortion_after: f64,
    /// Mean `-log2 p` of the assignment under the updated prior.
    pub rate: f64,
    pub objective: f64,
    pub counts: Vec<u64>,
    pub reseeded: usize,
}

fn assign_all(points: &[f64], codebook: &Codebook, rule: AssignRule) -> Vec<(u32, f64)> {
    points
        .par_chunks_exact(codebook.dim())
        .map(|p| {
            let (k, d) = rule.assign(codebook, p);
            (k as u32, d)
        })
        .collect()
}

/// One assign / update / re-prior round on `points` (flat, `codebook.dim()` per point).
///
/// Empty cells are moved onto the points with the largest error under the updated
/// codewords, worst first.
pub fn lloyd_step(points: &[f64], codebook: &mut Codebook, mode: LloydMode) -> Result<LloydStats> {
    let dim = codebook.dim();
    if points.is_empty() || points.len() % dim != 0 {
        return Err(Error::Data(format!(
            "expected a non-empty multiple of {dim} values, got {}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    let k = codebook.size();
    let assign = assign_all(points, codebook, mode.rule());
    let distortion_before = assign.iter().map(|a| a.1).sum::<f64>() / n as f64;

    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0u64; k];
    for (p, &(c, _)) in points.chunks_exact(dim).zip(&assign) {
        let c = c as usize;
        counts[c] += 1;
        for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p) {
            *s += v;
        }
    }
    {
        let vectors = codebook.vectors_mut();
        for c in 0..k {
            if counts[c] > 0 {
                let inv = counts[c] as f64;
                for j in 0..dim {
                    vectors[c * dim + j] = (sums[c * dim + j] / inv) as f32;
                }
            }
        }
    }
    let errors: Vec<f64> = points
        .par_chunks_exact(dim)
        .zip(assign.par_iter())
        .map(|(p, &(c, _))| sq_dist(p, codebook.codeword(c as usize)))
        .collect();
    let distortion_after = errors.iter().sum::<f64>() / n as f64;

    let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !empty.is_empty() {
        let mut worst: Vec<usize> = (0..n).collect();
        worst.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
        let vectors = codebook.vectors_mut();
        for (slot, &c) in empty.iter().enumerate() {
            let p = worst[slot % n];
            for j in 0..dim {
                vectors[c * dim + j] = points[p * dim + j] as f32;
            }
        }
    }

    let (rate, objective) = match mode {
        LloydMode::Plain => (0.0, distortion_after),
        LloydMode::EntropyConstrained { lambda } => {
            let prior = pmf_from_counts(&counts);
            codebook.set_prior(prior)?;
            let rate = assign
                .iter()
                .map(|&(c, _)| codebook.rate_bits(c as usize))
                .sum::<f64>()
                / n as f64;
            let reg = (0..k).map(|c| codebook.rate_bits(c)).sum::<f64>() / n as f64;
            (rate, lambda * distortion_after + rate + reg)
        }
    };
    Ok(LloydStats {
        distortion_before,
        distortion_after,
        rate,
        objective,
        counts,
        reseeded: empty.len(),
    })
}

/// k-means++ seeding: first center uniform, the rest with probability proportional to
/// the squared distance to the closest chosen center.
pub fn kmeans_plus_plus(points: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f32> {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centers: Vec<usize> = Vec::with_capacity(k);
    centers.push(rng.random_range(0..n));
    let as_f32 = |i: usize| point(i).iter().map(|&v| v as f32).collect::<Vec<f32>>();
    let mut nearest: Vec<f64> = points
        .par_chunks_exact(dim)
        .map(|p| sq_dist(p, &as_f32(centers[0])))
        .collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 && total.is_finite() {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            centers[0]
        };
        centers.push(next);
        let c = as_f32(next);
        nearest
            .par_iter_mut()
            .zip(points.par_chunks_exact(dim))
            .for_each(|(m, p)| *m = m.min(sq_dist(p, &c)));
    }
    centers.into_iter().flat_map(as_f32).collect()
}

fn stage_group_seed(seed: u64, stage: usize, group: usize) -> u64 {
    let mix = ((stage as u64) << 32) | group as u64;
    seed ^ mix.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct FittedGroup {
    codebook: Codebook,
    report: GroupReport,
}

fn fit_group(
    points: &[f64],
    dim: usize,
    bits: u8,
    mode: LloydMode,
    config: &TrainConfig,
    stage: usize,
    group: usize,
) -> Result<FittedGroup> {
    let k = 1usize << bits;
    let n = points.len() / dim;
    if n < k {
        return Err(Error::InsufficientData(format!(
            "stage {stage}, group {group}: {n} training residuals for {k} codewords"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stage_group_seed(config.seed, stage, group));
    let init = kmeans_plus_plus(points, dim, k, &mut rng);
    let mut codebook = Codebook::new(dim, bits, init).map_err(|e| Error::Numerical {
        stage,
        group,
        detail: e.to_string(),
    })?;
    let mut trace = Vec::new();
    for _ in 0..config.max_iters {
        let stats = lloyd_step(points, &mut codebook, mode)?;
        if !stats.objective.is_finite() || codebook.vectors().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                stage,
                group,
                detail: "non-finite codeword or objective".into(),
            });
        }
        let prev = trace.last().copied();
        trace.push(stats.objective);
        if stats.objective == 0.0 {
            break;
        }
        if let Some(prev) = prev {
            if prev - stats.objective <= config.rel_tol * prev.abs() {
                break;
            }
        }
    }
    let usage = {
        let mut u = vec![0u64; k];
        for (c, _) in assign_all(points, &codebook, mode.rule()) {
            u[c as usize] += 1;
        }
        u
    };
    Ok(FittedGroup {
        codebook,
        report: GroupReport {
            group,
            iterations: trace.len(),
            objective_trace: trace,
            usage,
        },
    })
}

/// Trains every stage codebook on `data` and returns the finalized model.
pub fn train(
    data: &FeatureMatrix,
    layout: &SubVectorLayout,
    config: &TrainConfig,
) -> Result<(MsvqModel, TrainReport)> {
    let t_max = layout.t_max();
    config.validate(t_max)?;
    if data.cols() != layout.m_dim() {
        return Err(Error::Data(format!(
            "data has {} columns, layout expects {}",
            data.cols(),
            layout.m_dim()
        )));
    }
    let stats = compute_stats(data)?;
    let m = layout.m_dim();
    let d = layout.sub_dim();
    let rows = data.rows();
    let means: Vec<f32> = layout.perm().iter().map(|&c| stats.mean[c] as f32).collect();
    // Lambdas pass through f32 so training uses exactly the values the model file stores.
    let lambda: Vec<f32> = config.lambda.iter().map(|&l| l as f32).collect();

    let mut residual: Vec<f64> = Vec::with_capacity(rows * m);
    for z in data.iter_rows() {
        for (&c, &mu) in layout.perm().iter().zip(&means) {
            residual.push(z[c] as f64 - mu as f64);
        }
    }
    let energy = |res: &[f64]| -> f64 {
        res.chunks_exact(m)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / rows as f64
    };
    let initial_distortion = energy(&residual);
    let members: Vec<Vec<usize>> = (0..layout.n_groups())
        .map(|g| layout.members(g).collect())
        .collect();

    let mut codebooks: Vec<Vec<Codebook>> = vec![Vec::with_capacity(t_max); layout.n_groups()];
    let mut per_stage_distortion = Vec::with_capacity(t_max);
    let mut stage_reports = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let mode = if config.ec {
            LloydMode::EntropyConstrained {
                lambda: lambda[t] as f64,
            }
        } else {
            LloydMode::Plain
        };
        let fitted: Vec<(Vec<f64>, FittedGroup)> = (0..layout.n_groups())
            .into_par_iter()
            .map(|g| {
                let mut pool = Vec::with_capacity(rows * members[g].len() * d);
                for row in residual.chunks_exact(m) {
                    for &i in &members[g] {
                        pool.extend_from_slice(&row[i * d..(i + 1) * d]);
                    }
                }
                let fit = fit_group(&pool, d, layout.group_bits(g, t), mode, config, t, g)?;
                Ok((pool, fit))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut groups = Vec::with_capacity(fitted.len());
        for (g, (pool, fit)) in fitted.into_iter().enumerate() {
            let rule = mode.rule();
            let assign = assign_all(&pool, &fit.codebook, rule);
            let mut slot = 0;
            for row in residual.chunks_exact_mut(m) {
                for &i in &members[g] {
                    let c = fit.codebook.codeword(assign[slot].0 as usize);
                    for (r, &cv) in row[i * d..(i + 1) * d].iter_mut().zip(c) {
                        *r -= cv as f64;
                    }
                    slot += 1;
                }
            }
            codebooks[g].push(fit.codebook);
            groups.push(fit.report);
        }
        let distortion = energy(&residual);
        if !distortion.is_finite() {
            return Err(Error::Numerical {
                stage: t,
                group: 0,
                detail: "residual energy is not finite".into(),
            });
        }
        per_stage_distortion.push(distortion);
        stage_reports.push(StageReport {
            stage: t,
            distortion,
            groups,
        });
    }

    let mut model = MsvqModel::new(layout.clone(), means, codebooks, config.ec, lambda)?;
    if config.ec {
        model = attach_entropy_codes(model, data)?;
    }
    Ok((
        model,
        TrainReport {
            initial_distortion,
            per_stage_distortion,
            stages: stage_reports,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_layout, AllocationPreset, BitMatrix};
    use crate::quantizer::{encode, squared_error, SelectionPlan};
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_blobs(rows: usize, dim: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let data = (0..rows)
            .flat_map(|_| {
                let c = &centers[rng.random_range(0..5)];
                (0..dim)
                    .map(|j| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        (c[j] + 0.5 * e) as f32
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        FeatureMatrix::new(rows, dim, data).unwrap()
    }

    fn layout_for(data: &FeatureMatrix, sub_dim: usize, rows: &[Vec<u8>], groups: usize) -> SubVectorLayout {
        let stats = compute_stats(data).unwrap();
        let bits = BitMatrix::from_rows(rows).unwrap();
        build_layout(&stats, sub_dim, bits.t_max(), groups, &AllocationPreset::Custom(bits)).unwrap()
    }

    #[test]
    fn interpolation_regime() {
        let pts: Vec<[f32; 2]> = vec![[0.0, 0.0], [1.0, 5.0], [-2.0, 3.0], [4.0, -1.0]];
        let data = FeatureMatrix::from_rows(&pts).unwrap();
        let layout = layout_for(&data, 2, &[vec![2]], 1);
        let (model, report) = train(&data, &layout, &TrainConfig::default()).unwrap();
        assert!(report.final_distortion() < 1e-10, "{}", report.final_distortion());
        let plan = SelectionPlan::full(model.layout());
        for z in data.iter_rows() {
            let (_, z_hat) = encode(&model, z, &plan).unwrap();
            assert!(squared_error(z, &z_hat) < 1e-10);
        }
    }

    #[test]
    fn stages_reduce_energy_and_match_reencoding() {
        let data = gaussian_blobs(2000, 8, 1);
        let layout = layout_for(&data, 4, &[vec![4, 4, 4], vec![4, 4, 4]], 2);
        let (model, report) = train(&data, &layout, &TrainConfig { seed: 3, ..Default::default() }).unwrap();
        let mut prev = report.initial_distortion;
        for &d in &report.per_stage_distortion {
            assert!(d < prev, "{:?}", report.per_stage_distortion);
            prev = d;
        }
        // Independent oracle: re-encode the training set at each depth.
        for t in 1..=3u8 {
            let plan = SelectionPlan::new(model.layout(), vec![t; 2]).unwrap();
            let mse: f64 = data
                .iter_rows()
                .map(|z| squared_error(z, &encode(&model, z, &plan).unwrap().1))
                .sum::<f64>()
                / data.rows() as f64;
            let reported = report.per_stage_distortion[t as usize - 1];
            assert!((mse - reported).abs() <= 1e-9 * reported, "{mse} vs {reported}");
        }
    }

    #[test]
    fn plain_lloyd_trace_is_monotone() {
        let data = gaussian_blobs(1500, 4, 2);
        let layout = layout_for(&data, 2, &[vec![5, 4], vec![5, 4]], 1);
        let (_, report) = train(&data, &layout, &TrainConfig { seed: 4, ..Default::default() }).unwrap();
        for stage in &report.stages {
            for g in &stage.groups {
                for w in g.objective_trace.windows(2) {
                    assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", g.objective_trace);
                }
                assert_eq!(g.usage.iter().sum::<u64>(), 1500 * 2);
            }
        }
    }

    #[test]
    fn ec_objective_trace_is_monotone_and_saves_bits() {
        let data = gaussian_blobs(3000, 4, 5);
        let layout = layout_for(&data, 4, &[vec![5, 5]], 1);
        let config = TrainConfig {
            seed: 1,
            ..Default::default()
        }
        .entropy_constrained(vec![0.05, 0.2]);
        let (model, report) = train(&data, &layout, &config).unwrap();
        for stage in &report.stages {
            for g in &stage.groups {
                for w in g.objective_trace.windows(2) {
                    assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "{:?}", g.objective_trace);
                }
            }
        }
        assert!(model.has_entropy_codes());
        // Small lambda concentrates mass: mean code length beats the 5 fixed bits.
        let counts = crate::entropy::group_index_counts(&model, &data).unwrap();
        for t in 0..2 {
            let total: u64 = counts[0][t].iter().sum();
            let lens = model.codebooks()[0][t].code_lengths().unwrap();
            let mean_len: f64 = counts[0][t]
                .iter()
                .zip(lens)
                .map(|(&c, &l)| c as f64 * l as f64)
                .sum::<f64>()
                / total as f64;
            assert!(mean_len < 5.0, "stage {t}: {mean_len}");
        }
    }

    #[test]
    fn lloyd_step_two_clusters() {
        let mut cb = Codebook::new(1, 1, vec![0.4, 0.6]).unwrap();
        let s = lloyd_step(&[0.0, 1.0], &mut cb, LloydMode::Plain).unwrap();
        assert_eq!(cb.vectors(), &[0.0, 1.0]);
        assert_eq!(s.distortion_after, 0.0);
        assert!((s.distortion_before - 0.16).abs() < 1e-7);
    }

    #[test]
    fn lloyd_step_degenerate_data() {
        let mut cb = Codebook::new(2, 2, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        let pts = [0.5f64, 0.5].repeat(10);
        let s = lloyd_step(&pts, &mut cb, LloydMode::Plain).unwrap();
        assert_eq!(s.distortion_after, 0.0);
        assert_eq!(s.reseeded, 3);
        assert!(cb.vectors().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn lloyd_step_never_increases_distortion() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let pts: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
            let init: Vec<f32> = (0..16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut cb = Codebook::new(3, 4, init).unwrap();
            let s = lloyd_step(&pts, &mut cb, LloydMode::Plain).unwrap();
            assert!(s.distortion_after <= s.distortion_before * (1.0 + 1e-12));
        }
    }

    #[test]
    fn insufficient_data_reported() {
        let data = gaussian_blobs(10, 2, 3);
        let layout = layout_for(&data, 2, &[vec![5]], 1);
        assert!(matches!(
            train(&data, &layout, &TrainConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let data = gaussian_blobs(800, 4, 9);
        let layout = layout_for(&data, 2, &[vec![4, 3], vec![4, 3]], 2);
        let cfg = TrainConfig {
            seed: 77,
            ..Default::default()
        };
        let (a, _) = train(&data, &layout, &cfg).unwrap();
        let (b, _) = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| train(&data, &layout, &cfg))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let data = gaussian_blobs(100, 2, 3);
        let layout = layout_for(&data, 2, &[vec![2, 2]], 1);
        let bad = TrainConfig::default().entropy_constrained(vec![1.0]);
        assert!(matches!(train(&data, &layout, &bad), Err(Error::Config(_))));
        let bad = TrainConfig {
            max_iters: 0,
            ..Default::default()
        };
        assert!(matches!(train(&data, &layout, &bad), Err(Error::Config(_))));
    }
}
