//! Critical-token identification from verification attention scores.
//!
//! Every full-attention forward records, per layer, query head and query
//! position, the raw attention logits and their log-sum-exp. After a
//! verification pass those rows are turned back into probabilities,
//! averaged into one importance value per KV position, and the top `budget`
//! positions become the [`CriticalTokenSet`] that the next stride of sparse
//! drafts attends to. Nothing here runs the model again.

use std::collections::BTreeMap;

use crate::error::{config_err, contract_err, Result};

/// Tolerance for stored log-sum-exp values and for row normalization.
pub const LSE_TOLERANCE: f64 = 1e-9;

/// Attention logits of one query head at one query position.
///
/// `logits[j]` is the scaled dot product with KV position `j`; the row covers
/// the query's causal window `0..=query_pos`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub layer: usize,
    pub q_head: usize,
    pub query_pos: usize,
    pub logits: Vec<f64>,
    pub lse: f64,
}

/// Score rows dumped by one full-attention forward.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionScoreLog {
    /// KV length once the forward's new tokens are appended.
    pub kv_len: usize,
    pub rows: Vec<ScoreRow>,
}

impl AttentionScoreLog {
    /// Checks that every row fits the KV length and that its stored
    /// log-sum-exp agrees with the logits.
    pub fn validate(&self) -> Result<()> {
        for row in &self.rows {
            if row.logits.is_empty() || row.logits.len() > self.kv_len {
                return Err(contract_err(format!(
                    "score row of length {} does not fit KV length {}",
                    row.logits.len(),
                    self.kv_len
                )));
            }
            let direct = log_sum_exp(&row.logits)?;
            if (direct - row.lse).abs() > LSE_TOLERANCE * direct.abs().max(1.0) {
                return Err(contract_err(format!(
                    "stored lse {} disagrees with recomputed {}",
                    row.lse, direct
                )));
            }
        }
        Ok(())
    }
}

/// Numerically stable `log Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if let Some(bad) = xs.iter().find(|v| !v.is_finite()) {
        return Err(contract_err(format!("non-finite attention logit {bad}")));
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln())
}

/// Attention probabilities of one query head at one query position.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRow {
    pub layer: usize,
    pub q_head: usize,
    pub probs: Vec<f64>,
}

/// `p[j] = exp(logit[j] - lse)` for every stored row.
pub fn rematerialize_scores(log: &AttentionScoreLog) -> Result<Vec<ProbRow>> {
    log.rows
        .iter()
        .map(|row| {
            if let Some(bad) = row.logits.iter().find(|v| !v.is_finite()) {
                return Err(contract_err(format!("non-finite attention logit {bad}")));
            }
            if !row.lse.is_finite() {
                return Err(contract_err("non-finite log-sum-exp"));
            }
            Ok(ProbRow {
                layer: row.layer,
                q_head: row.q_head,
                probs: row.logits.iter().map(|l| (l - row.lse).exp()).collect(),
            })
        })
        .collect()
}

/// Averages probability rows into one importance value per KV position.
///
/// Rows shorter than `kv_len` are causal and read as zero past their end.
/// Means are taken over query positions for each head, then over the heads
/// of each KV group, then over all (layer, group) pairs.
pub fn aggregate_scores(rows: &[ProbRow], group_map: &[usize], kv_len: usize) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(contract_err("cannot aggregate zero score rows"));
    }
    let mut per_head: BTreeMap<(usize, usize), (Vec<f64>, usize)> = BTreeMap::new();
    for row in rows {
        if row.probs.len() > kv_len {
            return Err(contract_err(format!(
                "score row of length {} exceeds KV length {kv_len}",
                row.probs.len()
            )));
        }
        if row.q_head >= group_map.len() {
            return Err(contract_err(format!("query head {} has no KV group", row.q_head)));
        }
        let (sum, n) = per_head
            .entry((row.layer, row.q_head))
            .or_insert_with(|| (vec![0.0; kv_len], 0));
        for (s, p) in sum.iter_mut().zip(&row.probs) {
            *s += p;
        }
        *n += 1;
    }

    let mut per_group: BTreeMap<(usize, usize), (Vec<f64>, usize)> = BTreeMap::new();
    for ((layer, q_head), (sum, n)) in per_head {
        let (gsum, gn) = per_group
            .entry((layer, group_map[q_head]))
            .or_insert_with(|| (vec![0.0; kv_len], 0));
        for (g, s) in gsum.iter_mut().zip(&sum) {
            *g += s / n as f64;
        }
        *gn += 1;
    }

    let groups = per_group.len() as f64;
    let mut out = vec![0.0; kv_len];
    for (gsum, gn) in per_group.into_values() {
        for (o, g) in out.iter_mut().zip(&gsum) {
            *o += g / gn as f64;
        }
    }
    for o in &mut out {
        *o /= groups;
    }
    Ok(out)
}

/// KV positions a sparse draft may attend to, fixed for one stride.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CriticalTokenSet {
    positions: Vec<usize>,
    budget: usize,
    identified_at: usize,
}

impl CriticalTokenSet {
    /// `positions` must be ascending and below `identified_at`.
    pub fn new(positions: Vec<usize>, budget: usize, identified_at: usize) -> Self {
        Self {
            positions,
            budget,
            identified_at,
        }
    }

    /// Every position of a cache of length `len`.
    pub fn all(len: usize) -> Self {
        Self::new((0..len).collect(), len.max(1), len)
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Committed KV length when the set was selected.
    pub fn identified_at(&self) -> usize {
        self.identified_at
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_consistent(&self) -> bool {
        self.positions.len() == self.budget.min(self.identified_at)
            && self.positions.windows(2).all(|w| w[0] < w[1])
            && self.positions.last().is_none_or(|&p| p < self.identified_at)
    }
}

/// The `budget` positions of highest importance, ties to the lower index,
/// returned in ascending order.
pub fn select_critical_tokens(importance: &[f64], budget: usize) -> CriticalTokenSet {
    let n = importance.len();
    let take = budget.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let by_rank =
        |a: &usize, b: &usize| importance[*b].total_cmp(&importance[*a]).then(a.cmp(b));
    if take > 0 && take < n {
        idx.select_nth_unstable_by(take - 1, by_rank);
    }
    idx.truncate(take);
    idx.sort_unstable();
    CriticalTokenSet::new(idx, budget, n)
}

/// `max(1, ⌈sparsity · kv_len⌉)`, at most `kv_len` when that is positive.
pub fn compute_budget(kv_len: usize, sparsity: f64) -> Result<usize> {
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(config_err(format!("sparsity {sparsity} outside (0, 1]")));
    }
    if kv_len == 0 {
        return Ok(1);
    }
    let x = sparsity * kv_len as f64;
    // products like 0.07 * 100 land a hair above the integer they denote
    let r = x.round();
    let want = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
    Ok((want as usize).clamp(1, kv_len))
}

/// Rematerializes `log`, aggregates it, keeps the first `surviving` positions
/// and selects `compute_budget(surviving, sparsity)` of them.
pub fn identify(
    log: &AttentionScoreLog,
    group_map: &[usize],
    surviving: usize,
    sparsity: f64,
) -> Result<CriticalTokenSet> {
    if surviving > log.kv_len {
        return Err(contract_err(format!(
            "{surviving} surviving positions exceed logged KV length {}",
            log.kv_len
        )));
    }
    let rows = rematerialize_scores(log)?;
    let mut importance = aggregate_scores(&rows, group_map, log.kv_len)?;
    importance.truncate(surviving);
    let budget = compute_budget(surviving, sparsity)?;
    Ok(select_critical_tokens(&importance, budget))
}
