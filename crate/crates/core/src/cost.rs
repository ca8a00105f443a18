//! Analytical latency model for one decoding step.
//!
//! GEMM latency is flat up to the saturation batch `b_hat` and linear beyond
//! it; attention latency is linear in the KV bytes read. Without speculation
//! one step of `B` requests costs `T_gemm(B) + T_attn(M)`. With `k` sparse
//! drafts and one verification per round, averaged over a round and divided
//! by the `kα + 1` tokens it yields:
//!
//! ```text
//! T_spec = (k+1)/(kα+1) · T_gemm((2k+1)/(k+1) · B) + (ks+1)/(kα+1) · T_attn(M)
//! ```
//!
//! The per-iteration overhead is scaled like the GEMM term.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Relative singular-value cutoff below which a calibration is rank-deficient.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModelParams {
    /// Saturation point, in GEMM input tokens.
    #[serde(default = "default_b_hat")]
    pub b_hat: f64,
    pub gemm_base_ms: f64,
    pub gemm_slope_ms_per_token: f64,
    pub attn_ms_per_byte: f64,
    #[serde(default)]
    pub fixed_overhead_ms: f64,
}

fn default_b_hat() -> f64 {
    256.0
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("b_hat", self.b_hat),
            ("gemm_base_ms", self.gemm_base_ms),
            ("gemm_slope_ms_per_token", self.gemm_slope_ms_per_token),
            ("attn_ms_per_byte", self.attn_ms_per_byte),
            ("fixed_overhead_ms", self.fixed_overhead_ms),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.attn_ms_per_byte <= 0.0 {
            return Err(config_err("attn_ms_per_byte must be positive"));
        }
        Ok(())
    }

    pub fn t_gemm(&self, tokens: f64) -> f64 {
        if tokens <= self.b_hat {
            self.gemm_base_ms
        } else {
            self.gemm_base_ms + self.gemm_slope_ms_per_token * (tokens - self.b_hat)
        }
    }

    pub fn t_attn(&self, bytes: f64) -> f64 {
        self.attn_ms_per_byte * bytes
    }

    /// Device time of one iteration reading `bytes` of KV for `tokens` inputs.
    pub fn iteration_ms(&self, tokens: f64, bytes: f64) -> f64 {
        self.t_gemm(tokens) + self.t_attn(bytes) + self.fixed_overhead_ms
    }

    /// Parameters that reproduce a measured non-speculative step of `batch`
    /// requests over `kv_bytes` of KV. Past the knee GEMM time grows in
    /// proportion to tokens.
    pub fn from_baseline_breakdown(b: &Breakdown, batch: f64, kv_bytes: f64, b_hat: f64) -> Result<Self> {
        if !(batch > 0.0 && batch <= b_hat) {
            return Err(config_err("baseline batch must lie in (0, b_hat]"));
        }
        if !(kv_bytes > 0.0) {
            return Err(config_err("baseline KV bytes must be positive"));
        }
        let p = Self {
            b_hat,
            gemm_base_ms: b.gemm_ms,
            gemm_slope_ms_per_token: b.gemm_ms / b_hat,
            attn_ms_per_byte: b.attn_ms / kv_bytes,
            fixed_overhead_ms: b.other_ms,
        };
        p.validate()?;
        Ok(p)
    }
}

impl Default for CostModelParams {
    fn default() -> Self {
        Self {
            b_hat: default_b_hat(),
            gemm_base_ms: 7.2,
            gemm_slope_ms_per_token: 7.2 / 256.0,
            attn_ms_per_byte: 17.1 / 40e9,
            fixed_overhead_ms: 1.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecConfig {
    pub k: usize,
    pub alpha: f64,
    pub s: f64,
    /// Concurrent requests.
    pub batch: f64,
    /// Total KV bytes read by full attention.
    pub kv_bytes: f64,
}

impl SpecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(config_err("k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_err(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.s > 0.0 && self.s <= 1.0) {
            return Err(config_err(format!("s {} outside (0, 1]", self.s)));
        }
        if !(self.batch >= 0.0 && self.batch.is_finite()) {
            return Err(config_err("batch must be finite and non-negative"));
        }
        if !(self.kv_bytes >= 0.0 && self.kv_bytes.is_finite()) {
            return Err(config_err("kv_bytes must be finite and non-negative"));
        }
        Ok(())
    }

    fn k(&self) -> f64 {
        self.k as f64
    }

    /// Tokens yielded per round.
    pub fn yield_per_round(&self) -> f64 {
        self.k() * self.alpha + 1.0
    }

    /// Mean GEMM input over a round with requests spread evenly over phases.
    pub fn avg_gemm_tokens(&self) -> f64 {
        (2.0 * self.k() + 1.0) / (self.k() + 1.0) * self.batch
    }

    /// Mean attention bytes over a round.
    pub fn avg_attn_bytes(&self) -> f64 {
        (self.k() * self.s + 1.0) / (self.k() + 1.0) * self.kv_bytes
    }

    /// Attention time without speculation over attention time with it.
    pub fn attn_reduction(&self) -> f64 {
        self.yield_per_round() / (self.k() * self.s + 1.0)
    }
}

pub fn t_base(p: &CostModelParams, batch: f64, kv_bytes: f64) -> f64 {
    p.iteration_ms(batch, kv_bytes)
}

/// Milliseconds per accepted token per request slot.
pub fn t_spec(p: &CostModelParams, c: &SpecConfig) -> f64 {
    let y = c.yield_per_round();
    let k = c.k();
    (k + 1.0) / y * (p.t_gemm(c.avg_gemm_tokens()) + p.fixed_overhead_ms)
        + (k * c.s + 1.0) / y * p.t_attn(c.kv_bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpeedupReport {
    pub t_base_ms: f64,
    pub t_spec_ms: f64,
    pub eta: f64,
    pub attn_reduction: f64,
    pub avg_gemm_tokens: f64,
    pub avg_attn_bytes: f64,
}

pub fn speedup(p: &CostModelParams, c: &SpecConfig) -> Result<SpeedupReport> {
    p.validate()?;
    c.validate()?;
    let t_base_ms = t_base(p, c.batch, c.kv_bytes);
    let t_spec_ms = t_spec(p, c);
    if !(t_spec_ms > 0.0) {
        return Err(Error::Degenerate(format!("T_spec = {t_spec_ms}")));
    }
    Ok(SpeedupReport {
        t_base_ms,
        t_spec_ms,
        eta: t_base_ms / t_spec_ms,
        attn_reduction: c.attn_reduction(),
        avg_gemm_tokens: c.avg_gemm_tokens(),
        avg_attn_bytes: c.avg_attn_bytes(),
    })
}

/// One measured iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub tokens: f64,
    pub bytes: f64,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub params: CostModelParams,
    pub residual_rms_ms: f64,
    pub residual_max_ms: f64,
    /// False when no observation lies past the knee, leaving the slope at 0.
    pub slope_identified: bool,
}

/// Least-squares fit of base, slope and attention cost for a known knee.
/// The constant term is reported as `gemm_base_ms`; `fixed_overhead_ms` is 0.
pub fn calibrate(obs: &[Observation], b_hat: f64) -> Result<Calibration> {
    if obs.len() < 2 {
        return Err(Error::Calibration(format!("{} observations; need at least 2", obs.len())));
    }
    if obs
        .iter()
        .any(|o| !(o.tokens >= 0.0 && o.bytes >= 0.0 && o.latency_ms.is_finite()))
    {
        return Err(Error::Calibration("observations must be finite and non-negative".into()));
    }
    let excess: Vec<f64> = obs.iter().map(|o| (o.tokens - b_hat).max(0.0)).collect();
    let slope_identified = excess.iter().any(|&e| e > 0.0);

    let mut columns: Vec<Vec<f64>> = vec![vec![1.0; obs.len()]];
    if slope_identified {
        columns.push(excess.clone());
    }
    columns.push(obs.iter().map(|o| o.bytes).collect());

    // scale columns to unit norm so byte counts and token counts are comparable
    let scales: Vec<f64> = columns
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE))
        .collect();
    let a = DMatrix::from_fn(obs.len(), columns.len(), |i, j| columns[j][i] / scales[j]);
    let y = DVector::from_iterator(obs.len(), obs.iter().map(|o| o.latency_ms));

    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if columns.len() > obs.len() || !(smin > RANK_TOLERANCE * smax) {
        return Err(Error::Calibration("observations are rank-deficient".into()));
    }
    let x = svd
        .solve(&y, RANK_TOLERANCE * smax)
        .map_err(|e| Error::Calibration(e.to_string()))?;
    let coef: Vec<f64> = x.iter().zip(&scales).map(|(v, s)| v / s).collect();
    let (base, slope, attn) = if slope_identified {
        (coef[0], coef[1], coef[2])
    } else {
        (coef[0], 0.0, coef[1])
    };

    let residuals = &a * &x - &y;
    let n = obs.len() as f64;
    Ok(Calibration {
        params: CostModelParams {
            b_hat,
            gemm_base_ms: base,
            gemm_slope_ms_per_token: slope,
            attn_ms_per_byte: attn,
            fixed_overhead_ms: 0.0,
        },
        residual_rms_ms: (residuals.norm_squared() / n).sqrt(),
        residual_max_ms: residuals.amax(),
        slope_identified,
    })
}

/// Per-step time split into host, attention, GEMM and remaining work.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub cpu_ms: f64,
    pub attn_ms: f64,
    pub gemm_ms: f64,
    pub other_ms: f64,
}

impl Breakdown {
    pub fn total_ms(&self) -> f64 {
        self.cpu_ms + self.attn_ms + self.gemm_ms + self.other_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BreakdownEcho {
    pub baseline: Breakdown,
    pub speculative: Breakdown,
    pub attn_reduction_pct: f64,
    pub total_reduction_pct: f64,
}

/// Predicts the per-token breakdown under speculation from a measured
/// baseline step. With `overlap_cpu`, host work hides behind device work of
/// the same iteration and only the excess is exposed.
pub fn echo_breakdown(
    p: &CostModelParams,
    baseline: &Breakdown,
    c: &SpecConfig,
    overlap_cpu: bool,
) -> Result<BreakdownEcho> {
    p.validate()?;
    c.validate()?;
    let y = c.yield_per_round();
    let per_iter = (c.k() + 1.0) / y;
    let gemm_iter = p.t_gemm(c.avg_gemm_tokens());
    let attn_iter = p.t_attn(c.avg_attn_bytes());
    let cpu_iter = if overlap_cpu {
        (baseline.cpu_ms - (gemm_iter + attn_iter + p.fixed_overhead_ms)).max(0.0)
    } else {
        baseline.cpu_ms
    };
    let speculative = Breakdown {
        cpu_ms: per_iter * cpu_iter,
        attn_ms: per_iter * attn_iter,
        gemm_ms: per_iter * gemm_iter,
        other_ms: per_iter * p.fixed_overhead_ms,
    };
    Ok(BreakdownEcho {
        baseline: *baseline,
        speculative,
        attn_reduction_pct: 100.0 * (1.0 - speculative.attn_ms / baseline.attn_ms),
        total_reduction_pct: 100.0 * (1.0 - speculative.total_ms() / baseline.total_ms()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> CostModelParams {
        CostModelParams {
            b_hat: 256.0,
            gemm_base_ms: 5.0,
            gemm_slope_ms_per_token: 0.02,
            attn_ms_per_byte: 1e-9,
            fixed_overhead_ms: 0.5,
        }
    }

    fn cfg(k: usize, alpha: f64, s: f64, batch: f64, kv_bytes: f64) -> SpecConfig {
        SpecConfig { k, alpha, s, batch, kv_bytes }
    }

    #[test]
    fn gemm_is_piecewise() {
        let p = params();
        assert_eq!(p.t_gemm(0.0), 5.0);
        assert_eq!(p.t_gemm(256.0), 5.0);
        assert!((p.t_gemm(356.0) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn attention_reduction_k16() {
        let c = cfg(16, 0.75, 0.05, 64.0, 1e9);
        assert!((c.attn_reduction() - 13.0 / 1.8).abs() < 1e-12);
    }

    #[test]
    fn alpha_equal_to_s_gives_no_attention_reduction() {
        let c = cfg(8, 0.3, 0.3, 10.0, 1e9);
        assert!((c.attn_reduction() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn full_acceptance_and_density_has_no_attention_saving() {
        let p = params();
        let c = cfg(4, 1.0, 1.0, 100.0, 3e9);
        let want = p.t_gemm(c.avg_gemm_tokens()) + p.fixed_overhead_ms + p.t_attn(3e9);
        assert!((t_spec(&p, &c) - want).abs() < 1e-12);
    }

    #[test]
    fn attention_dominated_eta_is_bracketed() {
        let p = params();
        let c = cfg(8, 0.7, 0.05, 16.0, 200e9);
        let r = speedup(&p, &c).unwrap();
        assert!(r.eta > 1.0 && r.eta < r.attn_reduction, "{r:?}");
        assert!((r.eta - r.t_base_ms / r.t_spec_ms).abs() < 1e-12);
    }

    #[test]
    fn eta_grows_with_kv_and_shrinks_with_batch() {
        let p = params();
        let mut last = 0.0;
        for m in [1e9, 5e9, 2e10, 1e11] {
            let eta = speedup(&p, &cfg(8, 0.7, 0.5, 32.0, m)).unwrap().eta;
            assert!(eta > last);
            last = eta;
        }
        let small = speedup(&p, &cfg(8, 0.7, 0.05, 32.0, 2e10)).unwrap().eta;
        let large = speedup(&p, &cfg(8, 0.7, 0.05, 2048.0, 2e10)).unwrap().eta;
        assert!(large < small);
    }

    #[test]
    fn degenerate_speculation_is_not_free() {
        let p = params();
        for b in [1.0, 100.0, 300.0, 1000.0] {
            let r = speedup(&p, &cfg(1, 1.0, 1.0, b, 1e10)).unwrap();
            assert!(r.eta <= 1.0 + 1e-12, "{r:?}");
        }
    }

    #[test]
    fn zero_cost_is_degenerate() {
        let p = CostModelParams {
            gemm_base_ms: 0.0,
            gemm_slope_ms_per_token: 0.0,
            fixed_overhead_ms: 0.0,
            ..params()
        };
        let r = speedup(&p, &cfg(2, 0.5, 0.5, 1.0, 0.0));
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn invalid_configs() {
        let p = params();
        assert!(speedup(&p, &cfg(0, 0.5, 0.5, 1.0, 1.0)).is_err());
        assert!(speedup(&p, &cfg(2, 1.5, 0.5, 1.0, 1.0)).is_err());
        assert!(speedup(&p, &cfg(2, 0.5, 0.0, 1.0, 1.0)).is_err());
        let bad = CostModelParams { attn_ms_per_byte: 0.0, ..p };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    fn synth(p: &CostModelParams, pts: &[(f64, f64)]) -> Vec<Observation> {
        pts.iter()
            .map(|&(tokens, bytes)| Observation {
                tokens,
                bytes,
                latency_ms: p.t_gemm(tokens) + p.t_attn(bytes),
            })
            .collect()
    }

    #[test]
    fn calibration_recovers_params() {
        let truth = CostModelParams {
            fixed_overhead_ms: 0.0,
            ..params()
        };
        let obs = synth(&truth, &[(10.0, 1e9), (200.0, 3e10), (300.0, 2e9), (900.0, 5e10), (500.0, 7e9)]);
        let c = calibrate(&obs, 256.0).unwrap();
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!(rel(c.params.gemm_base_ms, truth.gemm_base_ms) < 1e-6);
        assert!(rel(c.params.gemm_slope_ms_per_token, truth.gemm_slope_ms_per_token) < 1e-6);
        assert!(rel(c.params.attn_ms_per_byte, truth.attn_ms_per_byte) < 1e-6);
        assert!(c.residual_rms_ms < 1e-9);
        assert!(c.slope_identified);
    }

    #[test]
    fn calibration_without_knee_data() {
        let truth = CostModelParams {
            fixed_overhead_ms: 0.0,
            ..params()
        };
        let obs = synth(&truth, &[(10.0, 1e9), (20.0, 4e9)]);
        let c = calibrate(&obs, 256.0).unwrap();
        assert!(!c.slope_identified);
        assert!((c.params.attn_ms_per_byte - 1e-9).abs() < 1e-15);
    }

    #[test]
    fn calibration_rejects_degenerate_input() {
        let o = Observation { tokens: 10.0, bytes: 1e9, latency_ms: 6.0 };
        assert!(matches!(calibrate(&[o, o], 256.0), Err(Error::Calibration(_))));
        assert!(matches!(calibrate(&[o], 256.0), Err(Error::Calibration(_))));
    }

    #[test]
    fn baseline_breakdown_round_trips() {
        let b = Breakdown { cpu_ms: 3.2, attn_ms: 17.1, gemm_ms: 7.2, other_ms: 1.2 };
        let p = CostModelParams::from_baseline_breakdown(&b, 128.0, 40e9, 256.0).unwrap();
        assert!((p.iteration_ms(128.0, 40e9) - (b.total_ms() - b.cpu_ms)).abs() < 1e-12);
        assert!((b.total_ms() - 28.7).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn eta_monotone(
            k in 1usize..20,
            a1 in 0.0f64..1.0, a2 in 0.0f64..1.0,
            s1 in 0.01f64..1.0, s2 in 0.01f64..1.0,
            batch in 1.0f64..2000.0,
            m in 1e8f64..1e11,
        ) {
            let p = params();
            let (alo, ahi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let (slo, shi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let e = |a, s| speedup(&p, &cfg(k, a, s, batch, m)).unwrap().eta;
            prop_assert!(e(ahi, slo) >= e(alo, slo));
            prop_assert!(e(alo, shi) <= e(alo, slo));
        }
    }
}
