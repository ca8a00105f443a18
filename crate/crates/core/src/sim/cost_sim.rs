//! Serving simulation with sampled acceptance.
//!
//! A verification of `d` drafts accepts `⌊α·d⌋` tokens plus one more with
//! probability `frac(α·d)`, so the expectation is exactly `α·d`.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::{drive, Executor, SimConfig, SimReport, SimRequest, Verified};
use crate::error::Result;
use crate::scheduler::{RequestId, Slot};

struct Sampled {
    rng: Xoshiro256PlusPlus,
    alpha: f64,
}

impl Executor for Sampled {
    fn prefill(&mut self, _req: &SimRequest, _resumed: bool) -> Result<bool> {
        Ok(false)
    }

    fn enter(&mut self, _id: RequestId, _slot: Slot) -> Result<()> {
        Ok(())
    }

    fn draft(&mut self, _id: RequestId) -> Result<()> {
        Ok(())
    }

    fn verify(&mut self, _id: RequestId, drafted: usize) -> Result<Verified> {
        let mean = self.alpha * drafted as f64;
        let floor = mean.floor();
        let extra = self.rng.random_bool((mean - floor).clamp(0.0, 1.0));
        let accepted = (floor as usize + usize::from(extra)).min(drafted);
        Ok(Verified {
            accepted,
            emitted: accepted + 1,
            done: false,
        })
    }

    fn preempted(&mut self, _id: RequestId) {}

    fn finish(&mut self, _id: RequestId) -> Result<()> {
        Ok(())
    }

    fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Runs `requests` through the scheduler, KV manager and cost model.
pub fn run_cost_sim(cfg: &SimConfig, requests: &[SimRequest]) -> Result<SimReport> {
    let mut exec = Sampled {
        rng: Xoshiro256PlusPlus::seed_from_u64(cfg.seed),
        alpha: cfg.alpha,
    };
    drive(cfg, requests, &mut exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{t_base, CostModelParams};
    use crate::error::Error;
    use crate::kv_manager::{KvConfig, KvPolicy};
    use crate::scheduler::{PipelineMode, Policy};

    fn params() -> CostModelParams {
        CostModelParams {
            b_hat: 256.0,
            gemm_base_ms: 7.2,
            gemm_slope_ms_per_token: 7.2 / 256.0,
            attn_ms_per_byte: 1e-8,
            fixed_overhead_ms: 1.2,
        }
    }

    fn reqs(n: usize, input: usize, output: usize) -> Vec<SimRequest> {
        (0..n)
            .map(|i| SimRequest {
                id: i as RequestId,
                arrival_ms: 0.0,
                input_len: input,
                output_len: output,
            })
            .collect()
    }

    fn cfg(k: usize, alpha: f64, s: f64) -> SimConfig {
        let mut kv = KvConfig::new(1 << 20, KvPolicy::Offload);
        kv.page_bytes = 1000;
        SimConfig::new(k, s, alpha, kv, params())
    }

    #[test]
    fn accounting_closes() {
        let w = reqs(20, 30, 57);
        let r = run_cost_sim(&cfg(4, 0.6, 0.1), &w).unwrap();
        assert_eq!(r.tokens_generated, 20 * 57);
        let sum: f64 = r.rows.iter().map(|x| x.latency_ms).sum::<f64>() + r.idle_ms;
        assert!((sum - r.total_ms()).abs() <= 1e-9 * r.total_ms().max(1.0));
    }

    #[test]
    fn deterministic() {
        let w = reqs(12, 10, 40);
        let c = cfg(3, 0.7, 0.2);
        assert_eq!(run_cost_sim(&c, &w).unwrap(), run_cost_sim(&c, &w).unwrap());
    }

    #[test]
    fn acceptance_expectation() {
        let mut e = Sampled {
            rng: Xoshiro256PlusPlus::seed_from_u64(3),
            alpha: 0.77,
        };
        let n = 20_000;
        let total: usize = (0..n).map(|_| e.verify(0, 8).unwrap().accepted).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 0.77 * 8.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn single_request_too_large() {
        let mut c = cfg(2, 0.5, 0.5);
        c.kv.capacity_pages = 50;
        let r = run_cost_sim(&c, &reqs(1, 30, 30));
        assert!(matches!(r, Err(Error::ImpossibleRequest { need: 60, capacity: 50 })));
    }

    #[test]
    fn no_speculation_sanity() {
        // k = 1, alpha = 1, s = 1 yields B tokens per iteration at T_base cost
        let (b, input, output) = (64, 100, 400);
        let mut c = cfg(1, 1.0, 1.0);
        c.mode = PipelineMode::Synchronous;
        let r = run_cost_sim(&c, &reqs(b, input, output)).unwrap();
        let mean_len = input as f64 + output as f64 / 2.0;
        let predicted = b as f64 / t_base(&c.params, b as f64, b as f64 * mean_len * 1000.0) * 1e3;
        assert!((r.tokens_per_second / predicted - 1.0).abs() < 0.05, "{} vs {predicted}", r.tokens_per_second);
    }

    #[test]
    fn poisson_arrivals_idle() {
        let mut w = reqs(3, 5, 5);
        w[1].arrival_ms = 1e4;
        w[2].arrival_ms = 2e4;
        let r = run_cost_sim(&cfg(2, 0.5, 0.5), &w).unwrap();
        assert!(r.idle_ms > 0.0);
        assert!(r.total_ms() >= 2e4);
        assert_eq!(r.tokens_generated, 15);
    }

    #[test]
    fn naive_policy_runs() {
        let mut c = cfg(3, 0.5, 0.3);
        c.policy = Policy::Naive;
        let r = run_cost_sim(&c, &reqs(9, 20, 30)).unwrap();
        assert_eq!(r.tokens_generated, 9 * 30);
    }
}
