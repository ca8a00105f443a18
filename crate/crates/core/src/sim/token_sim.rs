//! Serving simulation that runs the real model for every request and checks
//! each finished output against plain greedy decoding.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::{drive, Executor, SimConfig, SimReport, SimRequest, Verified};
use crate::engine::{greedy_decode, Request, RequestState, SpecEngine, SpecParams};
use crate::error::{config_err, Error, Result};
use crate::kv_manager::KvPolicy;
use crate::numerics::{Token, ToyModel};
use crate::scheduler::{RequestId, Slot};

#[derive(Debug, Clone, PartialEq)]
pub struct TokenRequest {
    pub sim: SimRequest,
    pub prompt: Vec<Token>,
}

/// Uniform random prompts of each request's input length.
pub fn random_prompts(workload: &[SimRequest], vocab_size: usize, seed: u64) -> Vec<TokenRequest> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    workload
        .iter()
        .map(|r| TokenRequest {
            sim: *r,
            prompt: (0..r.input_len)
                .map(|_| rng.random_range(0..vocab_size as Token))
                .collect(),
        })
        .collect()
}

struct Real<'m> {
    engine: SpecEngine<'m>,
    prompts: HashMap<RequestId, TokenRequest>,
    states: HashMap<RequestId, RequestState>,
    outputs: Vec<(RequestId, Vec<Token>)>,
    histogram: Vec<usize>,
    drafted: usize,
    accepted: usize,
}

impl Real<'_> {
    fn state(&mut self, id: RequestId) -> Result<&mut RequestState> {
        self.states
            .get_mut(&id)
            .ok_or_else(|| Error::State(format!("request {id} is not running")))
    }
}

impl Executor for Real<'_> {
    fn prefill(&mut self, req: &SimRequest, _resumed: bool) -> Result<bool> {
        let t = &self.prompts[&req.id];
        let state = self.engine.prefill(&Request {
            id: req.id,
            prompt: t.prompt.clone(),
            max_output: req.output_len,
        })?;
        let done = state.is_done();
        self.states.insert(req.id, state);
        Ok(done)
    }

    fn enter(&mut self, id: RequestId, slot: Slot) -> Result<()> {
        let phase = match slot {
            Slot::Phase(p) => p,
            Slot::Stalled => 0,
        };
        let engine = self.engine.clone();
        engine.enter_at_phase(self.state(id)?, phase)
    }

    fn draft(&mut self, id: RequestId) -> Result<()> {
        let engine = self.engine.clone();
        engine.draft_step(self.state(id)?).map(|_| ())
    }

    fn verify(&mut self, id: RequestId, drafted: usize) -> Result<Verified> {
        let engine = self.engine.clone();
        let state = self.state(id)?;
        if state.drafted().len() != drafted {
            return Err(Error::Invariant(format!(
                "request {id} drafted {} tokens, scheduler expected {drafted}",
                state.drafted().len()
            )));
        }
        let out = engine.verify_round(state)?;
        let done = state.is_done();
        if self.histogram.len() <= out.accepted_count {
            self.histogram.resize(out.accepted_count + 1, 0);
        }
        self.histogram[out.accepted_count] += 1;
        self.drafted += out.drafted;
        self.accepted += out.accepted_count;
        Ok(Verified {
            accepted: out.accepted_count,
            emitted: out.emitted.len(),
            done,
        })
    }

    fn preempted(&mut self, id: RequestId) {
        self.states.remove(&id);
    }

    fn finish(&mut self, id: RequestId) -> Result<()> {
        let state = self
            .states
            .remove(&id)
            .ok_or_else(|| Error::State(format!("request {id} finished twice")))?;
        let t = &self.prompts[&id];
        let oracle = greedy_decode(
            self.engine.model(),
            &t.prompt,
            t.sim.output_len,
            self.engine.params().eos,
        )?;
        if state.committed() != oracle.as_slice() {
            return Err(Error::Invariant(format!(
                "request {id}: speculative output differs from greedy decoding"
            )));
        }
        self.outputs.push((id, oracle));
        Ok(())
    }

    fn alpha(&self) -> f64 {
        if self.drafted == 0 {
            1.0
        } else {
            self.accepted as f64 / self.drafted as f64
        }
    }
}

/// Runs real speculative decoding through the scheduler and KV manager.
/// Every finished request is compared with greedy decoding; a mismatch is an
/// [`Error::Invariant`].
pub fn run_token_sim(cfg: &SimConfig, model: &ToyModel, requests: &[TokenRequest]) -> Result<SimReport> {
    if cfg.kv.policy == KvPolicy::Preempt {
        return Err(config_err("token-level runs support the offload and oracle KV policies"));
    }
    for r in requests {
        if r.prompt.len() != r.sim.input_len {
            return Err(config_err(format!("request {} prompt length mismatch", r.sim.id)));
        }
    }
    let engine = SpecEngine::new(model, SpecParams::new(cfg.k, cfg.s))?;
    let mut exec = Real {
        engine,
        prompts: requests.iter().map(|r| (r.sim.id, r.clone())).collect(),
        states: HashMap::new(),
        outputs: Vec::new(),
        histogram: vec![0; cfg.k + 1],
        drafted: 0,
        accepted: 0,
    };
    let sims: Vec<SimRequest> = requests.iter().map(|r| r.sim).collect();
    let mut report = drive(cfg, &sims, &mut exec)?;
    exec.outputs.sort_by_key(|(id, _)| *id);
    report.realized_alpha = Some(exec.alpha());
    report.alpha_histogram = Some(exec.histogram);
    report.outputs = exec.outputs;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostModelParams;
    use crate::kv_manager::KvConfig;
    use crate::numerics::{planted_prompt, ModelConfig, PlantedSpec};
    use crate::scheduler::{PipelineMode, Policy};

    fn cfg(k: usize, s: f64, capacity: usize) -> SimConfig {
        let mut kv = KvConfig::new(capacity, KvPolicy::Offload);
        kv.chunk_pages = 8;
        SimConfig::new(k, s, 0.5, kv, CostModelParams::default())
    }

    fn workload(n: usize, input: usize, output: usize) -> Vec<SimRequest> {
        (0..n)
            .map(|i| SimRequest {
                id: i as RequestId,
                arrival_ms: 0.0,
                input_len: input + i % 3,
                output_len: output + 2 * i,
            })
            .collect()
    }

    #[test]
    fn lossless_under_scheduling_and_offload() {
        let model = ToyModel::init(ModelConfig::tiny(4)).unwrap();
        let reqs = random_prompts(&workload(8, 10, 20), 64, 1);
        for (policy, mode) in [
            (Policy::Unified, PipelineMode::Delayed),
            (Policy::Naive, PipelineMode::Synchronous),
        ] {
            let mut c = cfg(4, 0.2, 120);
            c.policy = policy;
            c.mode = mode;
            let r = run_token_sim(&c, &model, &reqs).unwrap();
            assert_eq!(r.outputs.len(), 8);
            let want: u64 = reqs.iter().map(|t| t.sim.output_len as u64).sum();
            assert_eq!(r.tokens_generated, want);
            assert!(r.rows.iter().any(|row| row.offloaded_pages > 0));
            assert_eq!(r.recomputation_ratio(), 0.0);
        }
    }

    #[test]
    fn full_budget_accepts_everything() {
        let model = ToyModel::init(ModelConfig::tiny(5)).unwrap();
        let reqs = random_prompts(&workload(5, 6, 15), 64, 2);
        let r = run_token_sim(&cfg(3, 1.0, 10_000), &model, &reqs).unwrap();
        assert_eq!(r.realized_alpha, Some(1.0));
    }

    #[test]
    fn planted_model_accepts_everything() {
        let spec = PlantedSpec::default();
        let model = ToyModel::planted(PlantedSpec::config(1), &spec).unwrap();
        let reqs: Vec<TokenRequest> = workload(4, 30, 20)
            .into_iter()
            .map(|sim| TokenRequest {
                prompt: planted_prompt(&spec, model.config(), sim.input_len, 3, sim.id),
                sim,
            })
            .collect();
        // ceil(0.1 * 30) = 3 anchors fit the smallest budget
        let r = run_token_sim(&cfg(5, 0.1, 10_000), &model, &reqs).unwrap();
        assert_eq!(r.realized_alpha, Some(1.0));
    }

    #[test]
    fn preempt_is_rejected() {
        let model = ToyModel::init(ModelConfig::tiny(5)).unwrap();
        let mut c = cfg(3, 0.5, 100);
        c.kv.policy = KvPolicy::Preempt;
        assert!(matches!(run_token_sim(&c, &model, &[]), Err(Error::Config(_))));
    }
}
