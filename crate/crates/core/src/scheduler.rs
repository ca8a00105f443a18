//! Iteration batching for speculative requests.
//!
//! Every active request sits in a *slot*: draft phase `0..k`, verification
//! phase `k`, or (with delayed verification) the stall slot it occupies for
//! the one iteration after its verification while the host processes the
//! result. Each iteration every runnable, non-stalled request joins the batch:
//! draft-phase requests with one token, verification-phase requests with the
//! drafted tokens plus the pending one.
//!
//! With the unified policy a new request is placed into the least-loaded slot
//! by shortening its first round, so the batch mixes both phases evenly. The
//! naive policy joins the running cohort and alternates between all-draft and
//! all-verify batches.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Error, Result};

pub type RequestId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Unified,
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    Delayed,
    Synchronous,
}

impl std::str::FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unified" => Ok(Self::Unified),
            "naive" => Ok(Self::Naive),
            _ => Err(config_err(format!("unknown scheduling policy `{s}`"))),
        }
    }
}

impl std::str::FromStr for PipelineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delayed" => Ok(Self::Delayed),
            "synchronous" => Ok(Self::Synchronous),
            _ => Err(config_err(format!("unknown pipeline mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Slot {
    Phase(usize),
    Stalled,
}

/// Request counts per slot.
///
/// Index `p` in `0..=k` counts requests at phase `p`; in delayed mode index
/// `k + 1` counts stalled requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseBuckets {
    k: usize,
    counts: Vec<usize>,
}

impl PhaseBuckets {
    pub fn new(k: usize, mode: PipelineMode) -> Self {
        let n = match mode {
            PipelineMode::Synchronous => k + 1,
            PipelineMode::Delayed => k + 2,
        };
        Self { k, counts: vec![0; n] }
    }

    pub fn from_counts(k: usize, counts: Vec<usize>) -> Result<Self> {
        if counts.len() != k + 1 && counts.len() != k + 2 {
            return Err(contract_err(format!(
                "{} bucket counts for k = {k}",
                counts.len()
            )));
        }
        Ok(Self { k, counts })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn slot(&self, index: usize) -> Slot {
        if index <= self.k {
            Slot::Phase(index)
        } else {
            Slot::Stalled
        }
    }

    fn index(&self, slot: Slot) -> Option<usize> {
        match slot {
            Slot::Phase(p) if p <= self.k => Some(p),
            Slot::Stalled if self.counts.len() == self.k + 2 => Some(self.k + 1),
            _ => None,
        }
    }

    pub fn add(&mut self, slot: Slot) -> Result<()> {
        let i = self
            .index(slot)
            .ok_or_else(|| contract_err(format!("slot {slot:?} does not exist")))?;
        self.counts[i] += 1;
        Ok(())
    }

    /// Iterations until a request in slot `index` is next verified.
    pub fn distance_to_verify(&self, index: usize) -> usize {
        if index <= self.k {
            self.k - index
        } else {
            self.k + 1
        }
    }

    pub fn spread(&self) -> usize {
        let max = self.counts.iter().max().copied().unwrap_or(0);
        let min = self.counts.iter().min().copied().unwrap_or(0);
        max - min
    }
}

/// Least-loaded slot; ties go to the slot whose verification is furthest away.
pub fn assign_new_request(buckets: &PhaseBuckets) -> Slot {
    let best = (0..buckets.counts.len())
        .min_by_key(|&i| (buckets.counts[i], std::cmp::Reverse(buckets.distance_to_verify(i))))
        .expect("at least one slot");
    buckets.slot(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct VerifyMember {
    pub id: RequestId,
    /// Drafted tokens plus the pending token.
    pub tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IterationBatch {
    pub iteration: u64,
    pub draft_members: Vec<RequestId>,
    pub verify_members: Vec<VerifyMember>,
    /// Verified last iteration; their results are being processed.
    pub stalled: Vec<RequestId>,
    /// Active but not runnable this iteration (for example, KV not resident).
    pub waiting: Vec<RequestId>,
    pub gemm_tokens: usize,
    /// KV positions read by attention, filled in by [`IterationBatch::account_attn`].
    pub attn_positions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Draft,
    Verify { tokens: usize },
}

impl IterationBatch {
    pub fn is_empty(&self) -> bool {
        self.draft_members.is_empty() && self.verify_members.is_empty()
    }

    pub fn members(&self) -> impl Iterator<Item = (RequestId, Role)> + '_ {
        self.draft_members
            .iter()
            .map(|&id| (id, Role::Draft))
            .chain(
                self.verify_members
                    .iter()
                    .map(|v| (v.id, Role::Verify { tokens: v.tokens })),
            )
    }

    /// Sums the KV positions each member touches.
    pub fn account_attn(&mut self, mut positions: impl FnMut(RequestId, Role) -> usize) {
        let total = self.members().map(|(id, r)| positions(id, r)).sum();
        self.attn_positions = total;
    }
}

#[derive(Debug, Clone)]
struct Member {
    id: RequestId,
    slot: Slot,
    entry_phase: usize,
    finishing: bool,
}

/// The scheduling actor: placement, batch formation and the one-iteration
/// verification pipeline.
#[derive(Debug, Clone)]
pub struct Scheduler {
    k: usize,
    policy: Policy,
    mode: PipelineMode,
    members: Vec<Member>,
    iteration: u64,
}

impl Scheduler {
    pub fn new(k: usize, policy: Policy, mode: PipelineMode) -> Result<Self> {
        if k == 0 {
            return Err(config_err("k must be at least 1"));
        }
        Ok(Self {
            k,
            policy,
            mode,
            members: Vec::new(),
            iteration: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn mode(&self) -> PipelineMode {
        self.mode
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, id: RequestId) -> bool {
        self.members.iter().any(|m| m.id == id)
    }

    pub fn slot_of(&self, id: RequestId) -> Option<Slot> {
        self.members.iter().find(|m| m.id == id).map(|m| m.slot)
    }

    pub fn buckets(&self) -> PhaseBuckets {
        let mut b = PhaseBuckets::new(self.k, self.mode);
        for m in &self.members {
            b.add(m.slot).expect("member slots are valid");
        }
        b
    }

    /// Places a new request and returns its slot. A slot of `Phase(p)` means
    /// the first round drafts `k - p` tokens.
    pub fn admit(&mut self, id: RequestId) -> Result<Slot> {
        if self.contains(id) {
            return Err(contract_err(format!("request {id} admitted twice")));
        }
        let slot = match self.policy {
            Policy::Unified => assign_new_request(&self.buckets()),
            Policy::Naive => self.members.first().map_or(Slot::Phase(0), |m| m.slot),
        };
        let entry_phase = match slot {
            Slot::Phase(p) => p,
            Slot::Stalled => 0,
        };
        self.members.push(Member {
            id,
            slot,
            entry_phase,
            finishing: false,
        });
        Ok(slot)
    }

    /// Drops a request regardless of its slot.
    pub fn remove(&mut self, id: RequestId) -> Result<()> {
        let before = self.members.len();
        self.members.retain(|m| m.id != id);
        if self.members.len() == before {
            return Err(contract_err(format!("unknown request {id}")));
        }
        Ok(())
    }

    pub fn form_batch(&self, mut runnable: impl FnMut(RequestId) -> bool) -> IterationBatch {
        let mut batch = IterationBatch {
            iteration: self.iteration,
            ..IterationBatch::default()
        };
        for m in &self.members {
            match m.slot {
                Slot::Stalled => batch.stalled.push(m.id),
                Slot::Phase(_) if !runnable(m.id) => batch.waiting.push(m.id),
                Slot::Phase(p) if p < self.k => {
                    batch.draft_members.push(m.id);
                    batch.gemm_tokens += 1;
                }
                Slot::Phase(_) => {
                    let tokens = self.k - m.entry_phase + 1;
                    batch.verify_members.push(VerifyMember { id: m.id, tokens });
                    batch.gemm_tokens += tokens;
                }
            }
        }
        batch
    }

    /// Advances every member of `batch` by one slot. `finished` lists
    /// verification members whose request is complete. Returns the requests
    /// that leave the scheduler this iteration; in delayed mode a finished
    /// request leaves after its stall.
    pub fn complete(&mut self, batch: &IterationBatch, finished: &[RequestId]) -> Result<Vec<RequestId>> {
        if batch.iteration != self.iteration {
            return Err(Error::State(format!(
                "batch of iteration {} completed at iteration {}",
                batch.iteration, self.iteration
            )));
        }
        for id in finished {
            if !batch.verify_members.iter().any(|v| v.id == *id) {
                return Err(contract_err(format!(
                    "result for request {id}, which was not verified this iteration"
                )));
            }
        }
        let drafts: HashSet<RequestId> = batch.draft_members.iter().copied().collect();
        let verifies: HashSet<RequestId> = batch.verify_members.iter().map(|v| v.id).collect();
        let stalled: HashSet<RequestId> = batch.stalled.iter().copied().collect();
        let finished: HashSet<RequestId> = finished.iter().copied().collect();
        let mut leaving = Vec::new();
        for m in &mut self.members {
            match m.slot {
                Slot::Stalled if stalled.contains(&m.id) => {
                    if m.finishing {
                        leaving.push(m.id);
                    }
                    m.slot = Slot::Phase(0);
                }
                Slot::Phase(p) if p < self.k && drafts.contains(&m.id) => {
                    m.slot = Slot::Phase(p + 1);
                }
                Slot::Phase(_) if verifies.contains(&m.id) => {
                    m.entry_phase = 0;
                    let done = finished.contains(&m.id);
                    match self.mode {
                        PipelineMode::Synchronous => {
                            m.slot = Slot::Phase(0);
                            if done {
                                leaving.push(m.id);
                            }
                        }
                        PipelineMode::Delayed => {
                            m.slot = Slot::Stalled;
                            m.finishing = done;
                        }
                    }
                }
                _ => {}
            }
        }
        let gone: HashSet<RequestId> = leaving.iter().copied().collect();
        self.members.retain(|m| !gone.contains(&m.id));
        self.iteration += 1;
        Ok(leaving)
    }
}

/// Steady-state batch tokens for `b` requests spread evenly over `k + 1`
/// phases.
pub fn steady_gemm_tokens(b: usize, k: usize) -> f64 {
    b as f64 * (2 * k + 1) as f64 / (k + 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fluctuation {
    pub mean: f64,
    /// Population standard deviation over mean.
    pub cov: f64,
    pub max_over_mean: f64,
}

/// Fluctuation of a per-iteration token series.
pub fn balance_metric(series: &[usize]) -> Result<Fluctuation> {
    if series.is_empty() {
        return Err(contract_err("empty batch history"));
    }
    let n = series.len() as f64;
    let mean = series.iter().map(|&x| x as f64).sum::<f64>() / n;
    if mean == 0.0 {
        return Ok(Fluctuation {
            mean,
            cov: 0.0,
            max_over_mean: 0.0,
        });
    }
    let var = series.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let max = series.iter().copied().max().unwrap_or(0) as f64;
    Ok(Fluctuation {
        mean,
        cov: var.sqrt() / mean,
        max_over_mean: max / mean,
    })
}

/// Runs `b` requests that never finish for `iterations` iterations and
/// returns the gemm token series. Useful for balance studies.
pub fn gemm_series(
    k: usize,
    b: usize,
    policy: Policy,
    mode: PipelineMode,
    iterations: usize,
) -> Result<Vec<usize>> {
    let mut s = Scheduler::new(k, policy, mode)?;
    for id in 0..b as RequestId {
        s.admit(id)?;
    }
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let batch = s.form_batch(|_| true);
        out.push(batch.gemm_tokens);
        s.complete(&batch, &[])?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SYNC: PipelineMode = PipelineMode::Synchronous;
    const DELAYED: PipelineMode = PipelineMode::Delayed;

    #[test]
    fn least_loaded_examples() {
        let b = PhaseBuckets::from_counts(3, vec![4, 2, 3, 3]).unwrap();
        assert_eq!(assign_new_request(&b), Slot::Phase(1));
        let b = PhaseBuckets::from_counts(3, vec![2, 2, 2, 2]).unwrap();
        assert_eq!(assign_new_request(&b), Slot::Phase(0));
        let b = PhaseBuckets::from_counts(3, vec![1, 2, 0, 0]).unwrap();
        assert_eq!(assign_new_request(&b), Slot::Phase(2));
        let b = PhaseBuckets::from_counts(2, vec![1, 1, 1, 1]).unwrap();
        assert_eq!(assign_new_request(&b), Slot::Stalled);
    }

    #[test]
    fn thousand_arrivals_stay_balanced() {
        let mut s = Scheduler::new(7, Policy::Unified, SYNC).unwrap();
        for id in 0..1000 {
            s.admit(id).unwrap();
        }
        assert!(s.buckets().spread() <= 1);
        assert_eq!(s.buckets().total(), 1000);
    }

    #[test]
    fn even_spread_gives_formula_tokens() {
        // B = 9, k = 2: 3 + 3 drafts and 3 verifies of 3 tokens
        // the first cycle still holds shortened verifications
        let series = gemm_series(2, 9, Policy::Unified, SYNC, 12).unwrap();
        assert!(series[3..].iter().all(|&t| t == 15), "{series:?}");
        assert_eq!(steady_gemm_tokens(9, 2), 15.0);
    }

    #[test]
    fn first_round_is_shortened() {
        let mut s = Scheduler::new(2, Policy::Unified, SYNC).unwrap();
        assert_eq!(s.admit(0).unwrap(), Slot::Phase(0));
        assert_eq!(s.admit(1).unwrap(), Slot::Phase(1));
        assert_eq!(s.admit(2).unwrap(), Slot::Phase(2));
        let b = s.form_batch(|_| true);
        assert_eq!(b.draft_members, vec![0, 1]);
        assert_eq!(b.verify_members, vec![VerifyMember { id: 2, tokens: 1 }]);
        assert_eq!(b.gemm_tokens, 3);
        s.complete(&b, &[]).unwrap();
        let b = s.form_batch(|_| true);
        assert_eq!(b.verify_members, vec![VerifyMember { id: 1, tokens: 2 }]);
        s.complete(&b, &[]).unwrap();
        let b = s.form_batch(|_| true);
        assert_eq!(b.verify_members, vec![VerifyMember { id: 0, tokens: 3 }]);
        s.complete(&b, &[]).unwrap();
        let b = s.form_batch(|_| true);
        assert_eq!(b.verify_members, vec![VerifyMember { id: 2, tokens: 3 }]);
    }

    #[test]
    fn naive_cohort_cycles() {
        let series = gemm_series(2, 9, Policy::Naive, SYNC, 9).unwrap();
        assert_eq!(series, vec![9, 9, 27, 9, 9, 27, 9, 9, 27]);
        let f = balance_metric(&series).unwrap();
        assert!((f.max_over_mean - 27.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn naive_peak_over_mean_k8() {
        let series = gemm_series(8, 18, Policy::Naive, SYNC, 9 * 4).unwrap();
        let f = balance_metric(&series).unwrap();
        assert!((f.max_over_mean - 81.0 / 17.0).abs() < 1e-12);
    }

    #[test]
    fn unified_steady_state_is_flat() {
        let series = gemm_series(8, 90, Policy::Unified, SYNC, 40).unwrap();
        let f = balance_metric(&series[9..]).unwrap();
        assert_eq!(f.cov, 0.0);
        assert_eq!(f.max_over_mean, 1.0);
    }

    #[test]
    fn single_request_series() {
        let series = gemm_series(3, 1, Policy::Unified, SYNC, 8).unwrap();
        assert_eq!(series, vec![1, 1, 1, 4, 1, 1, 1, 4]);
    }

    #[test]
    fn empty_scheduler_gives_empty_batch() {
        let s = Scheduler::new(4, Policy::Unified, DELAYED).unwrap();
        let b = s.form_batch(|_| true);
        assert!(b.is_empty());
        assert_eq!(b.gemm_tokens, 0);
        assert!(balance_metric(&[]).is_err());
    }

    #[test]
    fn delayed_verify_stalls_exactly_one_iteration() {
        let mut s = Scheduler::new(2, Policy::Unified, DELAYED).unwrap();
        s.admit(7).unwrap();
        let mut present = Vec::new();
        let mut stalled = Vec::new();
        let mut verified = Vec::new();
        for _ in 0..14 {
            let b = s.form_batch(|_| true);
            present.push(!b.is_empty());
            stalled.push(b.stalled.contains(&7));
            if !b.verify_members.is_empty() {
                verified.push(b.iteration);
            }
            s.complete(&b, &[]).unwrap();
        }
        // an empty scheduler places into the stall slot: idle at 0, drafts at
        // 1 and 2, verifies at 3
        assert_eq!(verified, vec![3, 7, 11]);
        for v in verified {
            let v = v as usize;
            assert!(stalled[v + 1] && present[v + 2] && !stalled[v + 2]);
        }
        assert_eq!(stalled.iter().filter(|&&x| x).count(), 4);
    }

    #[test]
    fn synchronous_never_stalls() {
        let mut s = Scheduler::new(3, Policy::Unified, SYNC).unwrap();
        for id in 0..10 {
            s.admit(id).unwrap();
        }
        for _ in 0..20 {
            let b = s.form_batch(|_| true);
            assert!(b.stalled.is_empty());
            assert_eq!(b.draft_members.len() + b.verify_members.len(), 10);
            s.complete(&b, &[]).unwrap();
        }
    }

    #[test]
    fn unknown_result_is_contract_error() {
        let mut s = Scheduler::new(2, Policy::Unified, SYNC).unwrap();
        s.admit(1).unwrap();
        let b = s.form_batch(|_| true);
        assert!(matches!(s.complete(&b, &[1]), Err(Error::Contract(_))));
        assert!(matches!(s.complete(&b, &[99]), Err(Error::Contract(_))));
    }

    #[test]
    fn finished_requests_leave() {
        let mut s = Scheduler::new(1, Policy::Unified, DELAYED).unwrap();
        assert_eq!(s.admit(1).unwrap(), Slot::Stalled);
        let mut b = s.form_batch(|_| true);
        while b.verify_members.is_empty() {
            s.complete(&b, &[]).unwrap();
            b = s.form_batch(|_| true);
        }
        assert!(s.complete(&b, &[1]).unwrap().is_empty());
        assert_eq!(s.slot_of(1), Some(Slot::Stalled));
        let b = s.form_batch(|_| true);
        assert_eq!(s.complete(&b, &[]).unwrap(), vec![1]);
        assert!(s.is_empty());
    }

    #[test]
    fn waiting_members_hold_their_phase() {
        let mut s = Scheduler::new(2, Policy::Unified, SYNC).unwrap();
        s.admit(1).unwrap();
        let b = s.form_batch(|_| false);
        assert_eq!(b.waiting, vec![1]);
        s.complete(&b, &[]).unwrap();
        assert_eq!(s.slot_of(1), Some(Slot::Phase(0)));
    }

    #[test]
    fn parse_modes() {
        assert_eq!("naive".parse::<Policy>().unwrap(), Policy::Naive);
        assert_eq!("delayed".parse::<PipelineMode>().unwrap(), DELAYED);
        assert!("eager".parse::<PipelineMode>().is_err());
    }

    proptest! {
        #[test]
        fn packing_bound_without_departures(
            k in 1usize..10,
            delayed in any::<bool>(),
            arrivals in prop::collection::vec(0usize..6, 1..60),
        ) {
            let mode = if delayed { DELAYED } else { SYNC };
            let mut s = Scheduler::new(k, Policy::Unified, mode).unwrap();
            let mut id = 0;
            for n in arrivals {
                for _ in 0..n {
                    s.admit(id).unwrap();
                    id += 1;
                    prop_assert!(s.buckets().spread() <= 1);
                }
                let b = s.form_batch(|_| true);
                s.complete(&b, &[]).unwrap();
                prop_assert!(s.buckets().spread() <= 1);
            }
        }

        #[test]
        fn balanced_batches_within_bound(k in 1usize..10, b in 1usize..200) {
            let series = gemm_series(k, b, Policy::Unified, SYNC, 3 * (k + 1)).unwrap();
            let target = steady_gemm_tokens(b, k);
            for t in series.iter().skip(k + 1) {
                prop_assert!((*t as f64 - target).abs() <= (k + 1) as f64);
            }
        }

        #[test]
        fn phases_cycle(k in 1usize..8, delayed in any::<bool>()) {
            let mode = if delayed { DELAYED } else { SYNC };
            let mut s = Scheduler::new(k, Policy::Unified, mode).unwrap();
            s.admit(0).unwrap();
            let cycle = if delayed { k + 2 } else { k + 1 };
            let mut verifies = 0;
            for _ in 0..cycle * 5 {
                let b = s.form_batch(|_| true);
                verifies += b.verify_members.len();
                s.complete(&b, &[]).unwrap();
            }
            prop_assert_eq!(verifies, 5);
        }
    }
}
