//! Multi-stage encode and decode.
//!
//! Sub-vector `i` starts from the residual `z_i - mean_i`. Each active stage picks a
//! codeword for the current residual and subtracts it; the reconstruction is
//! `mean_i + c^(1) + ... + c^(T_i)`, always summed in ascending stage order so the
//! transmitter and receiver produce bit-identical output.

use serde::{Deserialize, Serialize};

use crate::codebook::MsvqModel;
use crate::error::{Error, Result};
use crate::layout::SubVectorLayout;

/// Number of active stages per sub-vector plus its bit accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub stages: Vec<u8>,
    /// `sum_i sum_{t < T_i} B_i^(t)` with the fixed-length widths of the layout.
    pub exact_bits: u64,
    /// Budgeted bits: equal to `exact_bits` for fixed-length coding, the sum of mean
    /// code lengths for entropy-coded models.
    pub avg_bits: f64,
}

fn exact_bits_of(layout: &SubVectorLayout, stages: &[u8]) -> u64 {
    stages
        .iter()
        .enumerate()
        .map(|(i, &ti)| {
            layout.bits().row(i)[..ti as usize]
                .iter()
                .map(|&b| b as u64)
                .sum::<u64>()
        })
        .sum()
}

impl SelectionPlan {
    /// Plan with fixed-length accounting (`avg_bits == exact_bits`).
    pub fn new(layout: &SubVectorLayout, stages: Vec<u8>) -> Result<Self> {
        Self::check_stages(layout, &stages)?;
        let exact_bits = exact_bits_of(layout, &stages);
        Ok(Self {
            stages,
            exact_bits,
            avg_bits: exact_bits as f64,
        })
    }

    pub fn with_avg_bits(mut self, avg_bits: f64) -> Self {
        self.avg_bits = avg_bits;
        self
    }

    /// Every sub-vector at `T_max`.
    pub fn full(layout: &SubVectorLayout) -> Self {
        Self::new(layout, vec![layout.t_max() as u8; layout.n_sub()]).expect("full plan is valid")
    }

    pub fn empty(layout: &SubVectorLayout) -> Self {
        Self::new(layout, vec![0; layout.n_sub()]).expect("empty plan is valid")
    }

    fn check_stages(layout: &SubVectorLayout, stages: &[u8]) -> Result<()> {
        if stages.len() != layout.n_sub() {
            return Err(Error::PlanMismatch(format!(
                "plan covers {} sub-vectors, layout has {}",
                stages.len(),
                layout.n_sub()
            )));
        }
        if let Some(i) = stages.iter().position(|&t| t as usize > layout.t_max()) {
            return Err(Error::PlanMismatch(format!(
                "sub-vector {i} requests {} stages, maximum is {}",
                stages[i],
                layout.t_max()
            )));
        }
        Ok(())
    }

    /// Checks the plan against a layout, including its recorded bit total.
    pub fn verify(&self, layout: &SubVectorLayout) -> Result<()> {
        Self::check_stages(layout, &self.stages)?;
        let expected = exact_bits_of(layout, &self.stages);
        if expected != self.exact_bits {
            return Err(Error::PlanMismatch(format!(
                "plan records {} bits, layout implies {expected}",
                self.exact_bits
            )));
        }
        Ok(())
    }

    pub fn active_stages(&self) -> usize {
        self.stages.iter().map(|&t| t as usize).sum()
    }
}

/// Codeword indices of one vector: `indices[i]` holds one entry per active stage of
/// sub-vector `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFeature {
    pub indices: Vec<Vec<u32>>,
    pub plan: SelectionPlan,
}

fn check_input(layout: &SubVectorLayout, z: &[f32]) -> Result<()> {
    if z.len() != layout.m_dim() {
        return Err(Error::Data(format!(
            "vector has {} entries, model expects {}",
            z.len(),
            layout.m_dim()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("vector contains non-finite values".into()));
    }
    Ok(())
}

/// Quantizes `z` with `plan`, returning the indices and the transmitter-side
/// reconstruction in original coordinate order.
pub fn encode(model: &MsvqModel, z: &[f32], plan: &SelectionPlan) -> Result<(EncodedFeature, Vec<f64>)> {
    let layout = model.layout();
    check_input(layout, z)?;
    plan.verify(layout)?;
    let d = layout.sub_dim();
    let zl = layout.permute(z);
    let mut rec = vec![0.0f64; layout.m_dim()];
    let mut indices = Vec::with_capacity(layout.n_sub());
    let mut residual = vec![0.0f64; d];
    for i in 0..layout.n_sub() {
        let span = i * d..(i + 1) * d;
        let mean = model.mean_of(i);
        for j in 0..d {
            residual[j] = zl[span.start + j] - mean[j] as f64;
            rec[span.start + j] = mean[j] as f64;
        }
        let n_stages = plan.stages[i] as usize;
        let mut chosen = Vec::with_capacity(n_stages);
        for t in 0..n_stages {
            let cb = model.codebook(i, t);
            let (k, _) = model.rule(t).assign(cb, &residual);
            let c = cb.codeword(k);
            for j in 0..d {
                residual[j] -= c[j] as f64;
                rec[span.start + j] += c[j] as f64;
            }
            chosen.push(k as u32);
        }
        indices.push(chosen);
    }
    Ok((
        EncodedFeature {
            indices,
            plan: plan.clone(),
        },
        layout.unpermute(&rec),
    ))
}

/// Rebuilds the reconstruction from indices alone.
pub fn decode(model: &MsvqModel, enc: &EncodedFeature) -> Result<Vec<f64>> {
    let layout = model.layout();
    enc.plan.verify(layout)?;
    if enc.indices.len() != layout.n_sub() {
        return Err(Error::PlanMismatch(format!(
            "{} index lists for {} sub-vectors",
            enc.indices.len(),
            layout.n_sub()
        )));
    }
    let d = layout.sub_dim();
    let mut rec = vec![0.0f64; layout.m_dim()];
    for (i, idx) in enc.indices.iter().enumerate() {
        if idx.len() != enc.plan.stages[i] as usize {
            return Err(Error::PlanMismatch(format!(
                "sub-vector {i} carries {} indices, plan says {}",
                idx.len(),
                enc.plan.stages[i]
            )));
        }
        let base = i * d;
        for (j, &m) in model.mean_of(i).iter().enumerate() {
            rec[base + j] = m as f64;
        }
        for (t, &k) in idx.iter().enumerate() {
            let cb = model.codebook(i, t);
            if k as usize >= cb.size() {
                return Err(Error::corrupt(
                    0,
                    format!("index {k} exceeds codebook size {} at ({i}, {t})", cb.size()),
                ));
            }
            for (j, &c) in cb.codeword(k as usize).iter().enumerate() {
                rec[base + j] += c as f64;
            }
        }
    }
    Ok(layout.unpermute(&rec))
}

/// Per-sub-vector squared errors of one vector at every truncation depth, plus the
/// full-depth indices.
#[derive(Debug, Clone)]
pub struct TruncationProfile {
    /// `errors[i * (T_max + 1) + T]` = `||z_i - zhat_i^(T)||^2`.
    pub errors: Vec<f64>,
    pub indices: Vec<Vec<u32>>,
}

/// Runs the full-depth encoding of `z` once and records the squared error each
/// sub-vector would have at every truncation `T = 0..=T_max`.
pub fn truncation_profile(model: &MsvqModel, z: &[f32]) -> Result<TruncationProfile> {
    let layout = model.layout();
    check_input(layout, z)?;
    let d = layout.sub_dim();
    let t_max = layout.t_max();
    let zl = layout.permute(z);
    let mut errors = Vec::with_capacity(layout.n_sub() * (t_max + 1));
    let mut indices = Vec::with_capacity(layout.n_sub());
    let mut residual = vec![0.0f64; d];
    let mut rec = vec![0.0f64; d];
    let err = |zi: &[f64], rec: &[f64]| -> f64 {
        zi.iter().zip(rec).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    for i in 0..layout.n_sub() {
        let zi = &zl[i * d..(i + 1) * d];
        let mean = model.mean_of(i);
        for j in 0..d {
            residual[j] = zi[j] - mean[j] as f64;
            rec[j] = mean[j] as f64;
        }
        errors.push(err(zi, &rec));
        let mut chosen = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let cb = model.codebook(i, t);
            let (k, _) = model.rule(t).assign(cb, &residual);
            let c = cb.codeword(k);
            for j in 0..d {
                residual[j] -= c[j] as f64;
                rec[j] += c[j] as f64;
            }
            errors.push(err(zi, &rec));
            chosen.push(k as u32);
        }
        indices.push(chosen);
    }
    Ok(TruncationProfile { errors, indices })
}

pub fn squared_error(z: &[f32], z_hat: &[f64]) -> f64 {
    z.iter()
        .zip(z_hat)
        .map(|(&a, &b)| {
            let d = a as f64 - b;
            d * d
        })
        .sum()
}
