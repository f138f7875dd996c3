//! Brute-force references: exhaustive stage selection, exhaustive nearest neighbour and
//! direct marginal-loss evaluation. Nothing here calls into the selection code it checks.

use rayon::prelude::*;
use serde::Serialize;

use crate::codebook::MsvqModel;
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::quantizer::{encode, squared_error, SelectionPlan};
use crate::rate::MarginalLossTable;

/// Largest number of plans [`exhaustive_select`] will enumerate.
pub const MAX_PLANS: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub best_plan: Vec<u8>,
    pub best_loss: f64,
    /// Number of feasible plans visited.
    pub enumerated: u64,
}

fn plan_count(n: usize, t_max: usize) -> Option<u64> {
    (0..n).try_fold(1u64, |acc, _| acc.checked_mul(t_max as u64 + 1))
}

/// Enumerates every plan in `{0..=T_max}^N` under `b_cap` and returns the minimum
/// total loss. Ties go to the lexicographically smallest plan.
pub fn exhaustive_select(table: &MarginalLossTable, b_cap: f64) -> Result<OracleResult> {
    let n = table.n();
    let t_max = table.t_max();
    let total = plan_count(n, t_max).filter(|&c| c <= MAX_PLANS).ok_or_else(|| {
        Error::SizeGuard(format!("(T_max + 1)^N for N = {n}, T_max = {t_max} exceeds {MAX_PLANS}"))
    })?;
    let loss = table.loss();
    let step = table.step_bits();
    // cost[i][T]: bits of the first T stages of row i.
    let cost: Vec<Vec<f64>> = step
        .iter()
        .map(|r| {
            let mut c = vec![0.0];
            for &b in r {
                c.push(c.last().unwrap() + b);
            }
            c
        })
        .collect();
    let per_prefix = total / (t_max as u64 + 1);
    let partial: Vec<Option<OracleResult>> = (0..=t_max)
        .into_par_iter()
        .map(|first| {
            let mut plan = vec![0u8; n];
            plan[0] = first as u8;
            let mut best: Option<OracleResult> = None;
            let mut feasible = 0u64;
            for _ in 0..per_prefix {
                let bits: f64 = plan.iter().enumerate().map(|(i, &t)| cost[i][t as usize]).sum();
                if bits <= b_cap {
                    feasible += 1;
                    let l: f64 = plan.iter().enumerate().map(|(i, &t)| loss[i][t as usize]).sum();
                    if best.as_ref().is_none_or(|b| l < b.best_loss) {
                        best = Some(OracleResult {
                            best_plan: plan.clone(),
                            best_loss: l,
                            enumerated: 0,
                        });
                    }
                }
                // Odometer over positions 1..N, last position fastest.
                for pos in (1..n).rev() {
                    if (plan[pos] as usize) < t_max {
                        plan[pos] += 1;
                        break;
                    }
                    plan[pos] = 0;
                }
            }
            best.map(|mut b| {
                b.enumerated = feasible;
                b
            })
        })
        .collect();
    let enumerated = partial.iter().flatten().map(|r| r.enumerated).sum();
    let mut best: Option<OracleResult> = None;
    for r in partial.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| r.best_loss < b.best_loss) {
            best = Some(r);
        }
    }
    // The empty plan costs nothing, so a non-negative budget always has a feasible plan.
    let mut best = best.ok_or_else(|| Error::Config(format!("no feasible plan under budget {b_cap}")))?;
    best.enumerated = enumerated;
    Ok(best)
}

/// Exhaustive nearest codeword: every distance computed, first minimum kept.
pub fn exhaustive_nearest(vectors: &[f32], dim: usize, r: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in vectors.chunks_exact(dim).enumerate() {
        let d: f64 = c.iter().zip(r).map(|(&a, &b)| (b - a as f64).powi(2)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Mean squared error over `data` when sub-vector `i` keeps `t` stages and all others
/// keep `T_max`, by encoding every row with that plan.
pub fn direct_marginal_loss(model: &MsvqModel, data: &FeatureMatrix, i: usize, t: usize) -> Result<f64> {
    let layout = model.layout();
    if i >= layout.n_sub() || t > layout.t_max() {
        return Err(Error::Index(format!("({i}, {t}) is outside the layout")));
    }
    let mut stages = vec![layout.t_max() as u8; layout.n_sub()];
    stages[i] = t as u8;
    let plan = SelectionPlan::new(layout, stages)?;
    let errors = data
        .iter_rows()
        .map(|z| {
            let (_, z_hat) = encode(model, z, &plan)?;
            Ok(squared_error(z, &z_hat))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errors.iter().sum::<f64>() / data.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rate::{build_table, select_stages, BitMode};
    use crate::testutil::random_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn worked_table() -> MarginalLossTable {
        let loss = vec![vec![11.0, 1.0, 0.0], vec![11.0, 5.0, 0.0], vec![5.0, 2.0, 0.0]];
        MarginalLossTable::exact(loss, vec![vec![2, 2]; 3]).unwrap()
    }

    #[test]
    fn worked_instance_optimum() {
        let t = worked_table();
        let r = exhaustive_select(&t, 6.0).unwrap();
        assert_eq!(t.total_loss(&[0, 0, 0]) - r.best_loss, 21.0);
        let g = select_stages(&t, 6.0);
        assert_eq!(t.total_loss(&g.stages), r.best_loss);
        // Plans with at most three active stages: sum_{k<=3} of compositions.
        assert_eq!(r.enumerated, 1 + 3 + 6 + 7);
    }

    #[test]
    fn unlimited_budget_takes_everything() {
        let t = worked_table();
        let r = exhaustive_select(&t, f64::INFINITY).unwrap();
        assert_eq!(r.best_plan, vec![2, 2, 2]);
        assert_eq!(r.enumerated, 27);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let loss = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let t = MarginalLossTable::exact(loss, vec![vec![1], vec![1]]).unwrap();
        assert_eq!(exhaustive_select(&t, 1.0).unwrap().best_plan, vec![0, 1]);
    }

    #[test]
    fn size_guard() {
        let loss = vec![vec![1.0, 0.5, 0.25, 0.0]; 12];
        let t = MarginalLossTable::exact(loss, vec![vec![1, 1, 1]; 12]).unwrap();
        assert!(matches!(exhaustive_select(&t, 5.0), Err(Error::SizeGuard(_))));
    }

    #[test]
    fn nearest_matches_codebook_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f32> = (0..16 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cb = crate::codebook::Codebook::new(4, 4, v.clone()).unwrap();
        for _ in 0..100 {
            let r: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
            assert_eq!(cb.nearest(&r).unwrap().0, exhaustive_nearest(&v, 4, &r).0);
        }
    }

    #[test]
    fn direct_loss_matches_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = random_model(&mut rng, 2, &[vec![3, 2], vec![2, 2], vec![2, 1]]);
        let data = FeatureMatrix::new(
            30,
            6,
            (0..180).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let table = build_table(&model, &data, BitMode::Exact).unwrap();
        for i in 0..3 {
            for t in 0..=2 {
                let direct = direct_marginal_loss(&model, &data, i, t).unwrap();
                let fast = table.loss()[i][t];
                assert!((direct - fast).abs() <= 1e-9 * direct.abs().max(1e-300), "{i} {t}");
            }
        }
        let full = direct_marginal_loss(&model, &data, 0, 2).unwrap();
        for i in 0..3 {
            assert_eq!(direct_marginal_loss(&model, &data, i, 2).unwrap(), full);
        }
    }
}
