//! Marginal-loss table and greedy stage selection under a bit budget.
//!
//! Entry `(i, T)` of the table is the mean loss when sub-vector `i` keeps `T` stages
//! and every other sub-vector keeps all of them. Selection starts from the empty plan
//! and repeatedly grants one more stage to the sub-vector with the largest loss drop
//! per bit that still fits the budget.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bitstream::digest64;
use crate::codebook::MsvqModel;
use crate::entropy::ModelCodes;
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::quantizer::{truncation_profile, SelectionPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BitMode {
    /// Step costs are the fixed-length widths `B_i^(t)`.
    Exact,
    /// Step costs are measured mean Huffman code lengths.
    Average,
}

/// Serialized form (`MLT1`). `fixed_bits` may be omitted for exact-mode tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableFile {
    n: usize,
    t_max: usize,
    mode: BitMode,
    loss: Vec<Vec<f64>>,
    step_bits: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fixed_bits: Option<Vec<Vec<u8>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalLossTable {
    n: usize,
    t_max: usize,
    mode: BitMode,
    loss: Vec<Vec<f64>>,
    step_bits: Vec<Vec<f64>>,
    fixed_bits: Vec<Vec<u8>>,
}

impl MarginalLossTable {
    /// `loss` is `n x (t_max + 1)`, `step_bits` and `fixed_bits` are `n x t_max`.
    pub fn new(
        mode: BitMode,
        loss: Vec<Vec<f64>>,
        step_bits: Vec<Vec<f64>>,
        fixed_bits: Vec<Vec<u8>>,
    ) -> Result<Self> {
        let n = loss.len();
        if n == 0 {
            return Err(Error::Config("marginal-loss table has no rows".into()));
        }
        let t_max = loss[0].len().saturating_sub(1);
        if t_max == 0 {
            return Err(Error::Config("marginal-loss table needs at least one stage".into()));
        }
        let shape_ok = loss.iter().all(|r| r.len() == t_max + 1)
            && step_bits.len() == n
            && step_bits.iter().all(|r| r.len() == t_max)
            && fixed_bits.len() == n
            && fixed_bits.iter().all(|r| r.len() == t_max);
        if !shape_ok {
            return Err(Error::Config("marginal-loss table rows have inconsistent lengths".into()));
        }
        if loss.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("marginal-loss table contains non-finite losses".into()));
        }
        if step_bits.iter().flatten().any(|&b| !(b.is_finite() && b > 0.0)) {
            return Err(Error::Data("step bits must be positive and finite".into()));
        }
        if fixed_bits.iter().flatten().any(|&b| b == 0) {
            return Err(Error::Data("fixed bit widths must be positive".into()));
        }
        Ok(Self {
            n,
            t_max,
            mode,
            loss,
            step_bits,
            fixed_bits,
        })
    }

    /// A table whose step costs are its fixed widths.
    pub fn exact(loss: Vec<Vec<f64>>, fixed_bits: Vec<Vec<u8>>) -> Result<Self> {
        let step_bits = fixed_bits
            .iter()
            .map(|r| r.iter().map(|&b| b as f64).collect())
            .collect();
        Self::new(BitMode::Exact, loss, step_bits, fixed_bits)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn mode(&self) -> BitMode {
        self.mode
    }

    pub fn loss(&self) -> &[Vec<f64>] {
        &self.loss
    }

    pub fn step_bits(&self) -> &[Vec<f64>] {
        &self.step_bits
    }

    pub fn fixed_bits(&self) -> &[Vec<u8>] {
        &self.fixed_bits
    }

    /// Objective value of a plan: `sum_i loss(i, T_i)`.
    pub fn total_loss(&self, stages: &[u8]) -> f64 {
        stages
            .iter()
            .enumerate()
            .map(|(i, &t)| self.loss[i][t as usize])
            .sum()
    }

    /// Budgeted cost of a plan: `sum_i sum_{t < T_i} step_bits(i, t)`.
    pub fn plan_bits(&self, stages: &[u8]) -> f64 {
        stages
            .iter()
            .enumerate()
            .map(|(i, &t)| self.step_bits[i][..t as usize].iter().sum::<f64>())
            .sum::<f64>()
            + 0.0
    }

    /// Full-model loss, taken as the mean of the `T_max` column.
    pub fn full_loss(&self) -> f64 {
        self.loss.iter().map(|r| r[self.t_max]).sum::<f64>() / self.n as f64
    }

    /// Predicted mean squared error of a plan. Exact when the loss is the feature-space
    /// squared error, which decomposes across sub-vectors.
    pub fn predicted_mse(&self, stages: &[u8]) -> f64 {
        self.total_loss(stages) - (self.n as f64 - 1.0) * self.full_loss()
    }

    /// Largest budget that can be spent: every stage of every sub-vector.
    pub fn total_bits(&self) -> f64 {
        self.step_bits.iter().flatten().sum()
    }

    /// Checks that this table describes `model`'s layout.
    pub fn check_model(&self, model: &MsvqModel) -> Result<()> {
        let layout = model.layout();
        if self.n != layout.n_sub() || self.t_max != layout.t_max() {
            return Err(Error::State(format!(
                "table is {}x{}, model has {} sub-vectors and {} stages",
                self.n,
                self.t_max,
                layout.n_sub(),
                layout.t_max()
            )));
        }
        for (i, row) in self.fixed_bits.iter().enumerate() {
            if row.as_slice() != layout.bits().row(i) {
                return Err(Error::State(format!(
                    "table bit widths for sub-vector {i} differ from the model"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let file = TableFile {
            n: self.n,
            t_max: self.t_max,
            mode: self.mode,
            loss: self.loss.clone(),
            step_bits: self.step_bits.clone(),
            fixed_bits: Some(self.fixed_bits.clone()),
        };
        let mut bytes = serde_json::to_vec_pretty(&file)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let file: TableFile = serde_json::from_slice(bytes)?;
        let fixed_bits = match (file.fixed_bits, file.mode) {
            (Some(b), _) => b,
            (None, BitMode::Exact) => file
                .step_bits
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|&b| {
                            if b.fract() == 0.0 && (1.0..=255.0).contains(&b) {
                                Ok(b as u8)
                            } else {
                                Err(Error::Data(format!("exact-mode step bits must be integers, got {b}")))
                            }
                        })
                        .collect::<Result<Vec<u8>>>()
                })
                .collect::<Result<Vec<_>>>()?,
            (None, BitMode::Average) => {
                return Err(Error::Data("average-mode tables must carry fixed_bits".into()))
            }
        };
        let table = Self::new(file.mode, file.loss, file.step_bits, fixed_bits)?;
        if table.n != file.n || table.t_max != file.t_max {
            return Err(Error::Data(format!(
                "table header says {}x{}, body is {}x{}",
                file.n, file.t_max, table.n, table.t_max
            )));
        }
        Ok(table)
    }

    /// 64-bit digest of the serialized table; binds a model to this table.
    pub fn digest(&self) -> Result<u64> {
        Ok(digest64(&self.to_json_bytes()?))
    }
}

/// Builds the table from a full-depth encoding of `data`, using the decomposition
/// `loss(i, T) = C - e_i(T_max) + e_i(T)`, where `e_i(T)` is sub-vector `i`'s mean
/// squared error at depth `T` and `C = sum_i e_i(T_max)`.
pub fn build_table(model: &MsvqModel, data: &FeatureMatrix, mode: BitMode) -> Result<MarginalLossTable> {
    let layout = model.layout();
    if data.cols() != layout.m_dim() {
        return Err(Error::Data(format!(
            "data has {} columns, model expects {}",
            data.cols(),
            layout.m_dim()
        )));
    }
    if data.rows() == 0 {
        return Err(Error::InsufficientData("table construction needs data".into()));
    }
    let codes = match mode {
        BitMode::Exact => None,
        BitMode::Average => {
            if !model.has_entropy_codes() {
                return Err(Error::State(
                    "average-bit table requested but the model has no entropy codes".into(),
                ));
            }
            Some(ModelCodes::from_model(model)?)
        }
    };
    let n = layout.n_sub();
    let t_max = layout.t_max();
    let partials = data
        .as_slice()
        .par_chunks(data.cols() * 256)
        .map(|chunk| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut err = vec![0.0f64; n * (t_max + 1)];
            let mut len = vec![0.0f64; n * t_max];
            for z in chunk.chunks_exact(data.cols()) {
                let prof = truncation_profile(model, z)?;
                for (a, b) in err.iter_mut().zip(&prof.errors) {
                    *a += b;
                }
                if let Some(codes) = &codes {
                    use crate::entropy::CodeLookup;
                    for (i, idx) in prof.indices.iter().enumerate() {
                        for (t, &k) in idx.iter().enumerate() {
                            len[i * t_max + t] += codes.code(i, t).len(k as usize) as f64;
                        }
                    }
                }
            }
            Ok((err, len))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut err = vec![0.0f64; n * (t_max + 1)];
    let mut len = vec![0.0f64; n * t_max];
    for (e, l) in partials {
        err.iter_mut().zip(e).for_each(|(a, b)| *a += b);
        len.iter_mut().zip(l).for_each(|(a, b)| *a += b);
    }
    let rows = data.rows() as f64;
    let mean_err: Vec<f64> = err.iter().map(|v| v / rows).collect();
    let e = |i: usize, t: usize| mean_err[i * (t_max + 1) + t];
    let full: f64 = (0..n).map(|i| e(i, t_max)).sum();
    let loss = (0..n)
        .map(|i| (0..=t_max).map(|t| full - e(i, t_max) + e(i, t)).collect())
        .collect();
    let fixed_bits = layout.bits().rows();
    let step_bits = match mode {
        BitMode::Exact => fixed_bits
            .iter()
            .map(|r| r.iter().map(|&b| b as f64).collect())
            .collect(),
        BitMode::Average => (0..n)
            .map(|i| (0..t_max).map(|t| len[i * t_max + t] / rows).collect())
            .collect(),
    };
    MarginalLossTable::new(mode, loss, step_bits, fixed_bits)
}

/// Sub-vector indices in the order the greedy rule grants stages under `b_cap`.
pub fn selection_order(table: &MarginalLossTable, b_cap: f64) -> Vec<usize> {
    let mut stages = vec![0usize; table.n];
    let mut used = 0.0f64;
    let mut order = Vec::new();
    loop {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..table.n {
            let t = stages[i];
            if t >= table.t_max {
                continue;
            }
            let cost = table.step_bits[i][t];
            if used + cost > b_cap {
                continue;
            }
            let ratio = (table.loss[i][t] - table.loss[i][t + 1]) / cost;
            if best.is_none_or(|(_, r)| ratio > r) {
                best = Some((i, ratio));
            }
        }
        let Some((i, _)) = best else { break };
        used += table.step_bits[i][stages[i]];
        stages[i] += 1;
        order.push(i);
    }
    order
}

/// Plan from replaying a prefix of a greedy order.
pub fn plan_from_order(table: &MarginalLossTable, order: &[usize]) -> SelectionPlan {
    let mut stages = vec![0u8; table.n];
    for &i in order {
        stages[i] += 1;
    }
    let exact_bits = stages
        .iter()
        .enumerate()
        .map(|(i, &t)| table.fixed_bits[i][..t as usize].iter().map(|&b| b as u64).sum::<u64>())
        .sum();
    let avg_bits = table.plan_bits(&stages);
    SelectionPlan {
        stages,
        exact_bits,
        avg_bits,
    }
}

/// Greedy incremental allocation: the plan both ends derive from `(table, b_cap)`.
pub fn select_stages(table: &MarginalLossTable, b_cap: f64) -> SelectionPlan {
    let b_cap = if b_cap.is_nan() { 0.0 } else { b_cap.max(0.0) };
    plan_from_order(table, &selection_order(table, b_cap))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowShape {
    /// `loss(i, T)` strictly decreasing in `T`.
    pub monotone: bool,
    /// Successive drops non-increasing in `T`.
    pub convex: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub rows: Vec<RowShape>,
    /// Every row has the same step cost at every stage.
    pub equal_row_bits: bool,
    /// Every step in the table has the same cost.
    pub uniform_bits: bool,
}

impl ConvexityReport {
    pub fn all_monotone(&self) -> bool {
        self.rows.iter().all(|r| r.monotone)
    }

    pub fn all_convex(&self) -> bool {
        self.rows.iter().all(|r| r.convex)
    }

    /// Conditions under which the greedy plan is provably optimal: monotone convex rows
    /// and one common step cost.
    pub fn greedy_optimal(&self) -> bool {
        self.all_monotone() && self.all_convex() && self.uniform_bits
    }
}

pub fn row_shape(row: &[f64]) -> RowShape {
    let drops: Vec<f64> = row.windows(2).map(|w| w[0] - w[1]).collect();
    RowShape {
        monotone: drops.iter().all(|&d| d > 0.0),
        convex: drops.windows(2).all(|w| w[1] <= w[0]),
    }
}

pub fn validate_convexity(table: &MarginalLossTable) -> ConvexityReport {
    let first = table.step_bits[0][0];
    ConvexityReport {
        rows: table.loss.iter().map(|r| row_shape(r)).collect(),
        equal_row_bits: table
            .step_bits
            .iter()
            .all(|r| r.iter().all(|&b| b == r[0])),
        uniform_bits: table.step_bits.iter().flatten().all(|&b| b == first),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table_from_drops(drops: &[Vec<f64>], bits: u8) -> MarginalLossTable {
        let loss = drops
            .iter()
            .map(|d| {
                let mut row = vec![d.iter().sum::<f64>()];
                for x in d {
                    let last = *row.last().unwrap();
                    row.push(last - x);
                }
                row
            })
            .collect();
        let fixed = drops.iter().map(|d| vec![bits; d.len()]).collect();
        MarginalLossTable::exact(loss, fixed).unwrap()
    }

    #[test]
    fn zero_budget_selects_nothing() {
        let t = table_from_drops(&[vec![3.0, 1.0], vec![2.0, 1.0]], 4);
        let p = select_stages(&t, 0.0);
        assert_eq!(p.stages, vec![0, 0]);
        assert_eq!(p.exact_bits, 0);
    }

    #[test]
    fn unlimited_budget_selects_everything() {
        let t = table_from_drops(&[vec![3.0, 1.0], vec![2.0, 1.0]], 4);
        assert_eq!(select_stages(&t, t.total_bits()).stages, vec![2, 2]);
        assert_eq!(select_stages(&t, f64::INFINITY).stages, vec![2, 2]);
    }

    #[test]
    fn worked_three_row_instance() {
        let t = table_from_drops(&[vec![10.0, 1.0], vec![6.0, 5.0], vec![3.0, 2.0]], 2);
        let order = selection_order(&t, 6.0);
        assert_eq!(order, vec![0, 1, 1]);
        let p = select_stages(&t, 6.0);
        assert_eq!(p.stages, vec![1, 2, 0]);
        assert_eq!(p.exact_bits, 6);
        let drop = t.total_loss(&[0, 0, 0]) - t.total_loss(&p.stages);
        assert_eq!(drop, 21.0);
    }

    #[test]
    fn skips_steps_that_do_not_fit() {
        let loss = vec![vec![100.0, 0.0], vec![10.0, 9.0]];
        let t = MarginalLossTable::exact(loss, vec![vec![8], vec![2]]).unwrap();
        assert_eq!(select_stages(&t, 5.0).stages, vec![0, 1]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let t = table_from_drops(&[vec![4.0], vec![4.0], vec![4.0]], 3);
        assert_eq!(select_stages(&t, 3.0).stages, vec![1, 0, 0]);
    }

    #[test]
    fn convexity_report() {
        assert_eq!(
            row_shape(&[9.0, 4.0, 1.0, 0.0]),
            RowShape {
                monotone: true,
                convex: true
            }
        );
        let s = row_shape(&[5.0, 4.0, 0.0]);
        assert!(s.monotone && !s.convex);
        let s = row_shape(&[5.0, 5.0]);
        assert!(!s.monotone);
        let t = table_from_drops(&[vec![5.0, 3.0, 1.0]], 4);
        let r = validate_convexity(&t);
        assert!(r.greedy_optimal());
    }

    #[test]
    fn json_round_trip_and_digest() {
        let t = table_from_drops(&[vec![5.5, 3.0], vec![1.25, 0.5]], 6);
        let bytes = t.to_json_bytes().unwrap();
        let back = MarginalLossTable::from_json_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.digest().unwrap(), t.digest().unwrap());
        let minimal = br#"{"n":1,"t_max":1,"mode":"exact","loss":[[2.0,1.0]],"step_bits":[[3]]}"#;
        let m = MarginalLossTable::from_json_bytes(minimal).unwrap();
        assert_eq!(m.fixed_bits(), &[vec![3]]);
        let bad = br#"{"n":2,"t_max":1,"mode":"exact","loss":[[2.0,1.0]],"step_bits":[[3]]}"#;
        assert!(MarginalLossTable::from_json_bytes(bad).is_err());
        let avg = br#"{"n":1,"t_max":1,"mode":"average","loss":[[2.0,1.0]],"step_bits":[[2.5]]}"#;
        assert!(MarginalLossTable::from_json_bytes(avg).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn random_table(seed: u64) -> MarginalLossTable {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..8);
            let t_max = rng.random_range(1..4);
            let bits = rng.random_range(1..9u8);
            let drops = (0..n)
                .map(|_| (0..t_max).map(|_| rng.random_range(0.0..10.0)).collect())
                .collect::<Vec<Vec<f64>>>();
            table_from_drops(&drops, bits)
        }

        proptest! {
            #[test]
            fn budget_nesting_and_monotone_loss(seed in any::<u64>(), steps in 2usize..20) {
                let t = random_table(seed);
                let total = t.total_bits();
                let mut prev: Option<SelectionPlan> = None;
                for s in 0..=steps {
                    let b = total * s as f64 / steps as f64;
                    let p = select_stages(&t, b);
                    prop_assert!(t.plan_bits(&p.stages) <= b + 1e-9);
                    prop_assert_eq!(&p, &select_stages(&t, b));
                    if let Some(q) = &prev {
                        prop_assert!(q.stages.iter().zip(&p.stages).all(|(a, b)| a <= b));
                        prop_assert!(t.total_loss(&p.stages) <= t.total_loss(&q.stages));
                    }
                    prev = Some(p);
                }
            }

            #[test]
            fn feasible_with_heterogeneous_bits(seed in any::<u64>(), b in 0.0f64..60.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = rng.random_range(1..6);
                let loss: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(5.0..9.0), rng.random_range(0.0..5.0)]).collect();
                let fixed: Vec<Vec<u8>> = (0..n).map(|_| vec![rng.random_range(1..12u8)]).collect();
                let t = MarginalLossTable::exact(loss, fixed).unwrap();
                let p = select_stages(&t, b);
                prop_assert!(p.exact_bits as f64 <= b);
            }
        }
    }
}
