//! Frame-wise cross-entropy, KL divergence and the dual-classifier sequence
//! regularizer (DSR).
//!
//! DSR couples the two heads in opposite directions on two disjoint parts of
//! each window. On the early range the task head is pulled towards a frozen
//! copy of the auxiliary head; on the late range the auxiliary head is pulled
//! towards a frozen copy of the task head.

use serde::{Deserialize, Serialize};

use crate::autograd::{concat, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fractional bounds of the early and late ranges, each half-open.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RangeBounds {
    pub early_lo: f64,
    pub early_hi: f64,
    pub late_lo: f64,
    pub late_hi: f64,
}

impl Default for RangeBounds {
    fn default() -> Self {
        Self {
            early_lo: 0.2,
            early_hi: 0.6,
            late_lo: 0.8,
            late_hi: 1.0,
        }
    }
}

/// Row indices of the early (`early`) and late (`late`) frames, possibly over
/// several stacked windows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceRanges {
    pub early: Vec<usize>,
    pub late: Vec<usize>,
    /// Number of stacked windows the indices cover.
    pub windows: usize,
}

/// `[floor(lo·T), floor(hi·T))` for both ranges.
pub fn sequence_ranges(t: usize, bounds: &RangeBounds) -> Result<SequenceRanges> {
    let b = bounds;
    for (name, lo, hi) in [("early", b.early_lo, b.early_hi), ("late", b.late_lo, b.late_hi)] {
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!(
                "{name} range [{lo}, {hi}) must satisfy 0 <= lo <= hi <= 1"
            )));
        }
    }
    let idx = |lo: f64, hi: f64| -> Vec<usize> {
        let a = (lo * t as f64).floor() as usize;
        let z = ((hi * t as f64).floor() as usize).min(t);
        (a..z).collect()
    };
    let early = idx(b.early_lo, b.early_hi);
    let late = idx(b.late_lo, b.late_hi);
    if early.iter().any(|i| late.contains(i)) {
        return Err(Error::Config(format!(
            "early range {early:?} and late range {late:?} overlap for T={t}"
        )));
    }
    Ok(SequenceRanges {
        early,
        late,
        windows: 1,
    })
}

impl SequenceRanges {
    /// The same ranges repeated over `batch` consecutive windows of `t` rows.
    pub fn tiled(&self, batch: usize, t: usize) -> Self {
        let rep = |v: &[usize]| -> Vec<usize> {
            (0..batch).flat_map(|b| v.iter().map(move |&i| b * t + i)).collect()
        };
        Self {
            early: rep(&self.early),
            late: rep(&self.late),
            windows: self.windows * batch,
        }
    }
}

/// Gathers rows of a `[R, C]` tensor, as contiguous runs.
pub fn select_rows<'t, S: Scalar>(x: Var<'t, S>, idx: &[usize]) -> Result<Var<'t, S>> {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && idx[j] == idx[j - 1] + 1 {
            j += 1;
        }
        parts.push(x.slice(0, idx[i], j - i)?);
        i = j;
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        concat(&parts, 0)
    }
}

fn check_stochastic<S: Scalar>(op: &'static str, p: &Var<'_, S>) -> Result<()> {
    let v = p.value();
    let c = *v.shape().last().unwrap();
    for row in v.data().chunks(c) {
        let sum: f64 = row.iter().map(|x| x.as_f64()).sum();
        if row.iter().any(|x| x.as_f64() < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "{op}: rows must be probability vectors (row sums to {sum})"
            )));
        }
    }
    Ok(())
}

/// Mean over rows of `-ln max(p[t, y[t]], 1e-12)` for `p` of shape `[T, C]`.
pub fn cross_entropy<'t, S: Scalar>(p: Var<'t, S>, y: &[usize]) -> Result<Var<'t, S>> {
    let shape = p.shape();
    if shape.len() != 2 || shape[0] != y.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![y.len()],
        });
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= shape[1]) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            shape[1]
        )));
    }
    p.ln_floor(S::prob_floor())?.pick_rows(y)?.mean(&[0])?.neg()
}

/// `Σ p (ln p − ln q)` with both sides floored at 1e-12. For `[R, C]`
/// inputs the per-row divergences are summed.
pub fn kl_div<'t, S: Scalar>(p: Var<'t, S>, q: Var<'t, S>) -> Result<Var<'t, S>> {
    if p.shape() != q.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_div",
            lhs: p.shape(),
            rhs: q.shape(),
        });
    }
    check_stochastic("kl_div", &p)?;
    check_stochastic("kl_div", &q)?;
    let floor = S::prob_floor();
    p.mul(p.ln_floor(floor)?.sub(q.ln_floor(floor)?)?)?.sum()
}

/// The two DSR terms and their weighted sum.
pub struct DsrTerms<'t, S: Scalar> {
    /// `Σ_E KL(p_task ‖ sg(p_aux))`
    pub early: Option<Var<'t, S>>,
    /// `Σ_L KL(p_aux ‖ sg(p_task))`
    pub late: Option<Var<'t, S>>,
    pub total: Var<'t, S>,
}

/// DSR over `[R, C]` probabilities. Range sums are divided by the number of
/// windows; with `average` they are divided by the range sizes instead.
pub fn dsr_terms<'t, S: Scalar>(
    p_task: Var<'t, S>,
    p_aux: Var<'t, S>,
    ranges: &SequenceRanges,
    average: bool,
) -> Result<DsrTerms<'t, S>> {
    if p_task.shape() != p_aux.shape() || p_task.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "dsr_loss",
            lhs: p_task.shape(),
            rhs: p_aux.shape(),
        });
    }
    let rows = p_task.shape()[0];
    if let Some(&bad) = ranges.early.iter().chain(&ranges.late).find(|&&i| i >= rows) {
        return Err(Error::InvalidArgument(format!("range index {bad} outside {rows} frames")));
    }
    let term = |student: Var<'t, S>, teacher: Var<'t, S>, idx: &[usize]| -> Result<Option<Var<'t, S>>> {
        if idx.is_empty() {
            return Ok(None);
        }
        let s = select_rows(student, idx)?;
        let t = select_rows(teacher, idx)?.detach();
        let kl = kl_div(s, t)?;
        let denom = if average { idx.len() } else { ranges.windows.max(1) };
        Ok(Some(if denom == 1 {
            kl
        } else {
            kl.scale(S::one() / S::from_count(denom))?
        }))
    };
    let early = term(p_task, p_aux, &ranges.early)?;
    let late = term(p_aux, p_task, &ranges.late)?;
    let total = match (early, late) {
        (Some(a), Some(b)) => a.add(b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => p_task.tape().constant(crate::tensor::Tensor::scalar(S::zero())),
    };
    Ok(DsrTerms { early, late, total })
}

/// Summed DSR objective, see [`dsr_terms`].
pub fn dsr_loss<'t, S: Scalar>(p_task: Var<'t, S>, p_aux: Var<'t, S>, ranges: &SequenceRanges) -> Result<Var<'t, S>> {
    Ok(dsr_terms(p_task, p_aux, ranges, false)?.total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossOptions {
    /// Supervise the auxiliary head with CE too.
    pub aux_ce: bool,
    /// Normalize DSR range sums by range size.
    pub dsr_average: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            aux_ce: true,
            dsr_average: false,
        }
    }
}

pub struct LossBreakdown<'t, S: Scalar> {
    pub total: Var<'t, S>,
    pub ce_task: Var<'t, S>,
    pub ce_aux: Option<Var<'t, S>>,
    pub dsr: Var<'t, S>,
}

/// `CE(p_task) [+ CE(p_aux)] + λ·DSR`.
pub fn total_loss<'t, S: Scalar>(
    p_task: Var<'t, S>,
    p_aux: Var<'t, S>,
    y: &[usize],
    ranges: &SequenceRanges,
    lambda: S,
    opts: &LossOptions,
) -> Result<LossBreakdown<'t, S>> {
    if lambda < S::zero() {
        return Err(Error::Config("lambda must be non-negative".into()));
    }
    let ce_task = cross_entropy(p_task, y)?;
    let ce_aux = if opts.aux_ce { Some(cross_entropy(p_aux, y)?) } else { None };
    let dsr = dsr_terms(p_task, p_aux, ranges, opts.dsr_average)?.total;
    let mut total = ce_task;
    if let Some(a) = ce_aux {
        total = total.add(a)?;
    }
    if lambda != S::zero() {
        total = total.add(dsr.scale(lambda)?)?;
    }
    Ok(LossBreakdown {
        total,
        ce_task,
        ce_aux,
        dsr,
    })
}
