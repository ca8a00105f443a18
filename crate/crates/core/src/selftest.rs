//! Quick invariant suites against independent oracles, for the `selftest`
//! subcommand. Each check is small enough that the whole run takes seconds.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::cost::{calibrate, speedup, CostModelParams, Observation, SpecConfig};
use crate::engine::{decode_to_completion, greedy_decode, Request};
use crate::error::{Error, Result};
use crate::kv_manager::{KvConfig, KvPolicy};
use crate::numerics::{planted_prompt, ModelConfig, PlantedSpec, Token, ToyModel};
use crate::pillar::{log_sum_exp, rematerialize_scores, select_critical_tokens, AttentionScoreLog, ScoreRow};
use crate::scheduler::{gemm_series, steady_gemm_tokens, PipelineMode, Policy, Scheduler};
use crate::sim::{random_prompts, run_cost_sim, run_token_sim, SimConfig, SimRequest};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// `Err(Error::Invariant)` naming the failed checks, if any.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let failed: Vec<&str> = self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        Err(Error::Invariant(format!("selftest failed: {}", failed.join(", "))))
    }
}

fn violated(msg: String) -> Error {
    Error::Invariant(msg)
}

fn lossless(rng: &mut Xoshiro256PlusPlus) -> Result<String> {
    let n = 12;
    for i in 0..n {
        let model = ToyModel::init(ModelConfig::tiny(rng.random()))?;
        let prompt: Vec<Token> = (0..rng.random_range(1..=16)).map(|_| rng.random_range(0..64)).collect();
        let (k, s, out) = (rng.random_range(1..=12), rng.random_range(0.02..=1.0), rng.random_range(32..=96));
        let spec = decode_to_completion(&model, &Request { id: i, prompt: prompt.clone(), max_output: out }, k, s)?;
        if spec.tokens != greedy_decode(&model, &prompt, out, None)? {
            return Err(violated(format!("config {i} (k {k}, s {s:.3}) differs from greedy decoding")));
        }
    }
    Ok(format!("{n} random configs match greedy decoding"))
}

fn topk(rng: &mut Xoshiro256PlusPlus) -> Result<String> {
    let n = 300;
    for case in 0..n {
        let len = rng.random_range(1..=1024);
        let levels = if case % 2 == 0 { 4 } else { 1 << 16 };
        let imp: Vec<f64> = (0..len).map(|_| rng.random_range(0..levels) as f64).collect();
        let budget = rng.random_range(1..=len);
        let mut idx: Vec<usize> = (0..len).collect();
        idx.sort_by(|&a, &b| imp[b].total_cmp(&imp[a]).then(a.cmp(&b)));
        let mut want = idx[..budget].to_vec();
        want.sort_unstable();
        if select_critical_tokens(&imp, budget).positions() != want.as_slice() {
            return Err(violated(format!("vector {case} differs from the sort oracle")));
        }
    }
    Ok(format!("{n} vectors match the sort oracle"))
}

fn remat(rng: &mut Xoshiro256PlusPlus) -> Result<String> {
    let n = 300;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let len = rng.random_range(1..=256);
        let logits: Vec<f64> = (0..len).map(|_| rng.random_range(-30.0..30.0)).collect();
        let lse = log_sum_exp(&logits)?;
        let log = AttentionScoreLog {
            kv_len: len,
            rows: vec![ScoreRow { layer: 0, q_head: 0, query_pos: len - 1, logits: logits.clone(), lse }],
        };
        let probs = &rematerialize_scores(&log)?[0].probs;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|x| (x - max).exp()).sum();
        for (p, x) in probs.iter().zip(&logits) {
            worst = worst.max((p - (x - max).exp() / z).abs());
        }
        worst = worst.max((probs.iter().sum::<f64>() - 1.0).abs());
    }
    if worst > 1e-9 {
        return Err(violated(format!("rematerialized scores off by {worst:.2e}")));
    }
    Ok(format!("{n} rows within {worst:.1e} of direct softmax"))
}

fn acceptance(rng: &mut Xoshiro256PlusPlus) -> Result<String> {
    for seed in 0..4 {
        let model = ToyModel::init(ModelConfig::tiny(seed))?;
        let prompt: Vec<Token> = (0..8).map(|_| rng.random_range(0..64)).collect();
        let d = decode_to_completion(&model, &Request { id: seed, prompt, max_output: 48 }, 4, 1.0)?;
        if d.stats.realized_alpha() != 1.0 {
            return Err(violated(format!("s = 1 gave alpha {} on seed {seed}", d.stats.realized_alpha())));
        }
    }
    let spec = PlantedSpec::default();
    for m in 1..=4 {
        let model = ToyModel::planted(PlantedSpec::config(m as u64), &spec)?;
        let prompt = planted_prompt(&spec, model.config(), 32, m, m as u64);
        let d = decode_to_completion(&model, &Request { id: 0, prompt, max_output: 48 }, 4, m as f64 / 32.0)?;
        if d.stats.realized_alpha() != 1.0 {
            return Err(violated(format!("planted model with {m} anchors gave alpha {}", d.stats.realized_alpha())));
        }
    }
    Ok("alpha = 1 at full budget and on planted models".into())
}

fn scheduler(rng: &mut Xoshiro256PlusPlus) -> Result<String> {
    for k in [2, 8] {
        for b in [9, 90, 198] {
            let series = gemm_series(k, b, Policy::Unified, PipelineMode::Synchronous, 3 * (k + 1))?;
            let target = steady_gemm_tokens(b, k);
            if let Some(t) = series[k + 1..].iter().find(|&&t| (t as f64 - target).abs() > (k + 1) as f64) {
                return Err(violated(format!("k {k}, B {b}: {t} GEMM tokens against {target}")));
            }
        }
    }
    let mut s = Scheduler::new(5, Policy::Unified, PipelineMode::Delayed)?;
    let mut next = 0;
    for _ in 0..200 {
        for _ in 0..rng.random_range(0..4) {
            s.admit(next)?;
            next += 1;
        }
        let batch = s.form_batch(|_| true);
        // departures unbalance buckets; placement only bounds the spread under arrivals
        s.complete(&batch, &[])?;
        if s.buckets().spread() > 1 {
            return Err(violated(format!("bucket spread {} after {next} arrivals", s.buckets().spread())));
        }
    }
    Ok(format!("balanced GEMM tokens, spread <= 1 over {next} arrivals"))
}

fn serving(rng: &mut Xoshiro256PlusPlus) -> Result<String> {
    let requests: Vec<SimRequest> = (0..24)
        .map(|i| SimRequest {
            id: i,
            arrival_ms: 0.0,
            input_len: rng.random_range(20..60),
            output_len: rng.random_range(100..400),
        })
        .collect();
    let demand: usize = requests.iter().map(|r| r.input_len + r.output_len).sum();
    let capacity = demand * 2 / 3;
    let mut kv = KvConfig::new(capacity, KvPolicy::Offload);
    kv.chunk_pages = 16;
    let cfg = SimConfig::new(4, 0.1, 0.7, kv, CostModelParams::default());
    let a = run_cost_sim(&cfg, &requests)?;
    let want: u64 = requests.iter().map(|r| r.output_len as u64).sum();
    if a.tokens_generated != want || a.recomputation_ratio() != 0.0 {
        return Err(violated(format!("generated {} of {want} tokens", a.tokens_generated)));
    }
    let (mut x, mut y) = (Vec::new(), Vec::new());
    a.write_csv(&mut x)?;
    run_cost_sim(&cfg, &requests)?.write_csv(&mut y)?;
    if x != y {
        return Err(violated("identical runs wrote different reports".into()));
    }

    let model = ToyModel::init(ModelConfig::tiny(rng.random()))?;
    let small: Vec<SimRequest> = requests[..6]
        .iter()
        .map(|r| SimRequest { input_len: r.input_len / 4, output_len: r.output_len / 10, ..*r })
        .collect();
    let mut kv = KvConfig::new(small.iter().map(|r| r.input_len + r.output_len).sum::<usize>() / 2, KvPolicy::Offload);
    kv.chunk_pages = 4;
    run_token_sim(&SimConfig::new(3, 0.3, 0.7, kv, CostModelParams::default()), &model, &random_prompts(&small, 64, 1))?;
    Ok("offload run closes its accounting; token-level run is lossless".into())
}

fn cost_model(rng: &mut Xoshiro256PlusPlus) -> Result<String> {
    let c = SpecConfig { k: 16, alpha: 0.75, s: 0.05, batch: 64.0, kv_bytes: 1e9 };
    if (c.attn_reduction() - 13.0 / 1.8).abs() > 1e-12 {
        return Err(violated(format!("attention reduction {}", c.attn_reduction())));
    }
    let p = CostModelParams::default();
    let base = SpecConfig { k: 8, alpha: 0.0, s: 1.0, batch: 128.0, kv_bytes: 1e11 };
    let mut prev_row: Option<Vec<f64>> = None;
    for i in 0..=5 {
        let row: Vec<f64> = (1..=5)
            .map(|j| speedup(&p, &SpecConfig { alpha: i as f64 / 5.0, s: j as f64 / 5.0, ..base }).map(|r| r.eta))
            .collect::<Result<_>>()?;
        if row.windows(2).any(|w| w[1] > w[0]) || prev_row.is_some_and(|pr| pr.iter().zip(&row).any(|(a, b)| b < a)) {
            return Err(violated("eta is not monotone in alpha and s".into()));
        }
        prev_row = Some(row);
    }

    let truth = CostModelParams {
        gemm_base_ms: rng.random_range(1.0..10.0),
        gemm_slope_ms_per_token: rng.random_range(0.001..0.05),
        attn_ms_per_byte: rng.random_range(1e-11..1e-9),
        fixed_overhead_ms: 0.0,
        ..p
    };
    let obs: Vec<Observation> = (0..10)
        .map(|i| {
            let (tokens, bytes) = (64.0 * (i + 1) as f64, 1e9 * ((i * 7) % 10 + 1) as f64);
            Observation { tokens, bytes, latency_ms: truth.iteration_ms(tokens, bytes) }
        })
        .collect();
    let fit = calibrate(&obs, truth.b_hat)?.params;
    let err = [
        (fit.gemm_base_ms, truth.gemm_base_ms),
        (fit.gemm_slope_ms_per_token, truth.gemm_slope_ms_per_token),
        (fit.attn_ms_per_byte, truth.attn_ms_per_byte),
    ]
    .iter()
    .map(|(a, b)| ((a - b) / b).abs())
    .fold(0.0, f64::max);
    if err > 1e-6 {
        return Err(violated(format!("calibration recovered params within {err:.2e} only")));
    }
    Ok(format!("closed form monotone; calibration error {err:.1e}"))
}

type Suite = fn(&mut Xoshiro256PlusPlus) -> Result<String>;

/// Runs every suite; failures are recorded, not returned.
pub fn run_selftest(seed: u64) -> SelftestReport {
    let suites: [(&'static str, Suite); 7] = [
        ("lossless decoding", lossless),
        ("critical-token selection", topk),
        ("score rematerialization", remat),
        ("acceptance recovery", acceptance),
        ("scheduler balance", scheduler),
        ("serving simulation", serving),
        ("cost model", cost_model),
    ];
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let checks = suites
        .into_iter()
        .map(|(name, run)| match run(&mut rng) {
            Ok(detail) => Check { name, passed: true, detail },
            Err(e) => Check { name, passed: false, detail: e.to_string() },
        })
        .collect();
    SelftestReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let r = run_selftest(0);
        for c in &r.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert!(r.into_result().is_ok());
    }

    #[test]
    fn failures_become_invariant_errors() {
        let r = SelftestReport {
            checks: vec![Check { name: "x", passed: false, detail: String::new() }],
        };
        assert!(matches!(r.into_result(), Err(Error::Invariant(m)) if m.contains('x')));
    }
}
