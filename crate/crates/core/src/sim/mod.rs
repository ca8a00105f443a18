//! Iteration-stepped serving simulation.
//!
//! Each iteration the driver reloads offloaded KV, admits arrived requests
//! while memory and the batch limit allow, asks the scheduler for a batch,
//! executes it, grows each verified request's KV, and converts the batch into
//! time with the cost model. What a draft or a verification *does* is left to
//! an executor: [`cost_sim`] samples acceptance around a configured rate,
//! [`token_sim`] runs the real model.
//!
//! Timing per iteration: device time is GEMM, attention and the fixed
//! overhead. Host time (`cpu_ms`) adds to it in synchronous mode and overlaps
//! it in delayed mode. KV transfers overlap device time and only the excess
//! is charged.

pub mod cost_sim;
pub mod report;
pub mod token_sim;
pub mod workload;

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::cost::{speedup, Breakdown, CostModelParams, SpecConfig};
use crate::error::{config_err, Error, Result};
use crate::kv_manager::{KvConfig, KvPolicy, KvPool};
use crate::pillar::compute_budget;
use crate::scheduler::{PipelineMode, Policy, RequestId, Role, Scheduler, Slot};

pub use cost_sim::run_cost_sim;
pub use report::{IterationRow, SimReport, Summary, CSV_COLUMNS};
pub use token_sim::{random_prompts, run_token_sim, TokenRequest};
pub use workload::{generate_workload, ArrivalKind, LengthDist, LengthKind, SimRequest, WorkloadSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub k: usize,
    pub s: f64,
    /// Acceptance rate for cost-level runs.
    pub alpha: f64,
    pub policy: Policy,
    pub mode: PipelineMode,
    /// Admitted requests at most.
    pub max_batch: usize,
    pub kv: KvConfig,
    pub params: CostModelParams,
    /// Host work per iteration.
    pub cpu_ms: f64,
    pub seed: u64,
    pub max_iterations: u64,
}

impl SimConfig {
    pub fn new(k: usize, s: f64, alpha: f64, kv: KvConfig, params: CostModelParams) -> Self {
        Self {
            k,
            s,
            alpha,
            policy: Policy::Unified,
            mode: PipelineMode::Delayed,
            max_batch: 256,
            kv,
            params,
            cpu_ms: 0.0,
            seed: 0,
            max_iterations: 10_000_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        SpecConfig {
            k: self.k,
            alpha: self.alpha,
            s: self.s,
            batch: 0.0,
            kv_bytes: 0.0,
        }
        .validate()?;
        if self.max_batch == 0 {
            return Err(config_err("max_batch must be at least 1"));
        }
        if !(self.cpu_ms >= 0.0 && self.cpu_ms.is_finite()) {
            return Err(config_err("cpu_ms must be finite and non-negative"));
        }
        self.kv.validate()?;
        self.params.validate()
    }
}

/// Outcome of one verification as seen by the driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Verified {
    pub accepted: usize,
    pub emitted: usize,
    pub done: bool,
}

pub(crate) trait Executor {
    /// Prefills `req` (again, when `resumed`) and reports whether it already
    /// finished.
    fn prefill(&mut self, req: &SimRequest, resumed: bool) -> Result<bool>;
    fn enter(&mut self, id: RequestId, slot: Slot) -> Result<()>;
    fn draft(&mut self, id: RequestId) -> Result<()>;
    fn verify(&mut self, id: RequestId, drafted: usize) -> Result<Verified>;
    /// Forgets a preempted request's in-flight round.
    fn preempted(&mut self, id: RequestId);
    fn finish(&mut self, id: RequestId) -> Result<()>;
    /// Acceptance rate fed to the speedup estimate.
    fn alpha(&self) -> f64;
}

struct Active {
    req: SimRequest,
    generated: usize,
    round_drafts: usize,
}

struct Queued {
    req: SimRequest,
    generated: usize,
}

pub(crate) fn drive<E: Executor>(cfg: &SimConfig, requests: &[SimRequest], exec: &mut E) -> Result<SimReport> {
    cfg.validate()?;
    let cap = cfg.kv.capacity_pages;
    for r in requests {
        let need = r.input_len + r.output_len;
        if need > cap {
            return Err(Error::ImpossibleRequest { need, capacity: cap });
        }
    }
    let mut order: Vec<&SimRequest> = requests.iter().collect();
    order.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms).then(a.id.cmp(&b.id)));
    let mut pending: VecDeque<Queued> = order
        .into_iter()
        .map(|r| Queued { req: *r, generated: 0 })
        .collect();

    let mut pool = KvPool::new(cfg.kv.clone())?;
    let mut sched = Scheduler::new(cfg.k, cfg.policy, cfg.mode)?;
    let mut active: HashMap<RequestId, Active> = HashMap::new();
    let page_bytes = cfg.kv.page_bytes;
    let p = &cfg.params;

    let mut rows = Vec::new();
    let mut live_pages = Vec::new();
    let mut batch_sizes = Vec::new();
    let mut kv_bytes_sum = 0.0;
    let mut breakdown = Breakdown::default();
    let mut idle_ms = 0.0;
    let mut clock = 0.0;
    let mut tokens_generated = 0u64;
    let mut it = 0u64;

    loop {
        if pending.is_empty() && sched.is_empty() {
            break;
        }
        if it >= cfg.max_iterations {
            return Err(Error::Invariant(format!(
                "simulation did not finish within {} iterations",
                cfg.max_iterations
            )));
        }
        pool.set_iteration(it);

        let mut moved: usize = pool.reload_step().iter().map(|c| c.pages.len()).sum();
        if pool.offloaded_pages() > 0 && !active.keys().any(|&id| pool.is_runnable(id)) {
            moved += pool.make_room_for_reload().iter().map(|c| c.pages.len()).sum::<usize>();
            moved += pool.reload_step().iter().map(|c| c.pages.len()).sum::<usize>();
        }

        let mut prefill_tokens = 0;
        while let Some(q) = pending.front() {
            if q.req.arrival_ms > clock || sched.len() >= cfg.max_batch {
                break;
            }
            let resumed = q.generated > 0;
            let need = q.req.input_len + q.generated.max(1);
            let fits = match cfg.kv.policy {
                KvPolicy::Offload => pool.offloaded_pages() == 0 && pool.free_pages() >= need,
                KvPolicy::Preempt => pool.free_pages() >= need,
                KvPolicy::Oracle => pool.reserve(q.req.id, q.req.input_len + q.req.output_len)?,
            };
            if !fits {
                break;
            }
            let q = pending.pop_front().expect("non-empty");
            let id = q.req.id;
            pool.allocate(id, need)?;
            prefill_tokens += q.req.input_len + q.generated;
            let done = exec.prefill(&q.req, resumed)?;
            if !resumed {
                tokens_generated += 1;
            }
            let generated = q.generated.max(1);
            if done || generated >= q.req.output_len {
                pool.release(id)?;
                exec.finish(id)?;
                continue;
            }
            let slot = sched.admit(id)?;
            exec.enter(id, slot)?;
            active.insert(
                id,
                Active {
                    req: q.req,
                    generated,
                    round_drafts: 0,
                },
            );
        }

        if sched.is_empty() && prefill_tokens == 0 {
            match pending.front() {
                Some(q) if q.req.arrival_ms > clock => {
                    idle_ms += q.req.arrival_ms - clock;
                    clock = q.req.arrival_ms;
                    continue;
                }
                Some(q) => {
                    return Err(Error::Invariant(format!(
                        "request {} cannot be admitted into an empty system",
                        q.req.id
                    )));
                }
                None => break,
            }
        }

        let mut batch = sched.form_batch(|id| pool.is_runnable(id));
        let s = cfg.s;
        batch.account_attn(|id, role| {
            let a = &active[&id];
            let committed = a.req.input_len + a.generated - 1;
            match role {
                Role::Draft => compute_budget(committed, s).unwrap_or(0) + a.round_drafts + 1,
                Role::Verify { tokens } => committed + tokens,
            }
        });
        let members = batch.draft_members.len() + batch.verify_members.len();
        let full_kv: usize = batch
            .members()
            .map(|(id, _)| active[&id].req.input_len + active[&id].generated)
            .sum();

        for &id in &batch.draft_members {
            exec.draft(id)?;
            active.get_mut(&id).expect("member is active").round_drafts += 1;
        }
        let mut finished = Vec::new();
        let mut gone: Vec<RequestId> = Vec::new();
        for v in &batch.verify_members {
            if gone.contains(&v.id) {
                continue;
            }
            let out = exec.verify(v.id, v.tokens - 1)?;
            let a = active.get_mut(&v.id).expect("member is active");
            a.round_drafts = 0;
            let emitted = out.emitted.min(a.req.output_len - a.generated);
            a.generated += emitted;
            tokens_generated += emitted as u64;
            let done = out.done || a.generated >= a.req.output_len;
            if done {
                pool.release(v.id)?;
                finished.push(v.id);
                continue;
            }
            if emitted == 0 {
                continue;
            }
            let alloc = pool.allocate(v.id, emitted)?;
            moved += alloc.offloaded.iter().map(|c| c.pages.len()).sum::<usize>();
            for victim in alloc.preempted {
                sched.remove(victim)?;
                exec.preempted(victim);
                let a = active.remove(&victim).expect("victim is active");
                gone.push(victim);
                pending.push_front(Queued {
                    req: a.req,
                    generated: a.generated,
                });
            }
        }
        for id in sched.complete(&batch, &finished)? {
            active.remove(&id);
            exec.finish(id)?;
        }
        if cfg.mode == PipelineMode::Synchronous {
            debug_assert!(batch.stalled.is_empty());
        }

        let gemm_tokens = batch.gemm_tokens + prefill_tokens;
        let attn_bytes = batch.attn_positions as u64 * page_bytes;
        let busy = gemm_tokens > 0;
        let (gemm_ms, attn_ms, fixed_ms) = if busy {
            (p.t_gemm(gemm_tokens as f64), p.t_attn(attn_bytes as f64), p.fixed_overhead_ms)
        } else {
            (0.0, 0.0, 0.0)
        };
        let gpu = gemm_ms + attn_ms + fixed_ms;
        let cpu = if busy || !batch.stalled.is_empty() { cfg.cpu_ms } else { 0.0 };
        let cpu_exposed = match cfg.mode {
            PipelineMode::Synchronous => cpu,
            PipelineMode::Delayed => (cpu - gpu).max(0.0),
        };
        let transfer_exposed = (cfg.kv.transfer_ms(moved) - gpu).max(0.0);
        let latency = gpu + cpu_exposed + transfer_exposed;
        breakdown.cpu_ms += cpu_exposed;
        breakdown.attn_ms += attn_ms;
        breakdown.gemm_ms += gemm_ms;
        breakdown.other_ms += fixed_ms + transfer_exposed;

        rows.push(IterationRow {
            iteration: it,
            gemm_tokens,
            attn_bytes,
            latency_ms: latency,
            device_util: pool.utilization(),
            offloaded_pages: pool.offloaded_pages(),
            stalled_requests: batch.stalled.len(),
        });
        live_pages.push(pool.device_pages() + pool.offloaded_pages());
        batch_sizes.push(members);
        kv_bytes_sum += full_kv as f64 * page_bytes as f64;
        clock += latency;
        it += 1;
    }

    pool.check()?;
    if pool.device_pages() != 0 || pool.offloaded_pages() != 0 {
        return Err(Error::Invariant("pages leaked after all requests finished".into()));
    }
    breakdown.other_ms += idle_ms;
    let n = rows.len().max(1) as f64;
    let mean_batch = batch_sizes.iter().sum::<usize>() as f64 / n;
    let mean_kv_bytes = kv_bytes_sum / n;
    let eta = speedup(
        p,
        &SpecConfig {
            k: cfg.k,
            alpha: exec.alpha(),
            s: cfg.s,
            batch: mean_batch,
            kv_bytes: mean_kv_bytes,
        },
    )?
    .eta;
    let total = breakdown.total_ms();
    Ok(SimReport {
        rows,
        live_pages,
        batch_sizes,
        breakdown,
        idle_ms,
        tokens_generated,
        recomputed_tokens: pool.stats().recomputed_tokens,
        tokens_per_second: if total > 0.0 { tokens_generated as f64 / (total / 1e3) } else { 0.0 },
        eta,
        mean_batch,
        mean_kv_bytes,
        realized_alpha: None,
        alpha_histogram: None,
        outputs: Vec::new(),
    })
}
