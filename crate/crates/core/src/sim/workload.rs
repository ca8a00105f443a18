//! Synthetic request traces.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::scheduler::RequestId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthKind {
    Constant,
    Normal,
    Lognormal,
}

/// A length distribution described by its mean and standard deviation.
/// Samples are rounded and clamped to `[1, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthDist {
    pub kind: LengthKind,
    pub mean: f64,
    pub std: f64,
    pub max: usize,
}

impl LengthDist {
    pub fn constant(value: usize) -> Self {
        Self {
            kind: LengthKind::Constant,
            mean: value as f64,
            std: 0.0,
            max: value.max(1),
        }
    }

    pub fn normal(mean: f64, std: f64, max: usize) -> Self {
        Self {
            kind: LengthKind::Normal,
            mean,
            std,
            max,
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if !(self.mean.is_finite() && self.mean >= 1.0) {
            return Err(config_err(format!("{what} mean must be at least 1")));
        }
        if !(self.std.is_finite() && self.std >= 0.0) {
            return Err(config_err(format!("{what} std must be non-negative")));
        }
        if self.kind == LengthKind::Constant && self.std != 0.0 {
            return Err(config_err(format!("{what} is constant but has std {}", self.std)));
        }
        if self.max == 0 || (self.max as f64) < self.mean.round() {
            return Err(config_err(format!("{what} max must be at least the mean")));
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let x = match self.kind {
            LengthKind::Constant => self.mean,
            _ if self.std == 0.0 => self.mean,
            LengthKind::Normal => Normal::new(self.mean, self.std).expect("validated").sample(rng),
            LengthKind::Lognormal => {
                let var = (1.0 + (self.std / self.mean).powi(2)).ln();
                let mu = self.mean.ln() - var / 2.0;
                LogNormal::new(mu, var.sqrt()).expect("validated").sample(rng)
            }
        };
        (x.round().max(1.0) as usize).min(self.max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArrivalKind {
    AllAtStart,
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub n_requests: usize,
    pub input_len: LengthDist,
    pub output_len: LengthDist,
    #[serde(default = "default_arrival")]
    pub arrival: ArrivalKind,
    /// Requests per second for Poisson arrivals.
    #[serde(default)]
    pub arrival_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_arrival() -> ArrivalKind {
    ArrivalKind::AllAtStart
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        self.input_len.validate("input length")?;
        self.output_len.validate("output length")?;
        if self.arrival == ArrivalKind::Poisson && !(self.arrival_rate > 0.0 && self.arrival_rate.is_finite()) {
            return Err(config_err("Poisson arrivals need a positive arrival_rate"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimRequest {
    pub id: RequestId,
    pub arrival_ms: f64,
    pub input_len: usize,
    pub output_len: usize,
}

/// Samples a trace; identical specs give identical traces.
pub fn generate_workload(spec: &WorkloadSpec) -> Result<Vec<SimRequest>> {
    spec.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let gaps = Exp::new(spec.arrival_rate.max(f64::MIN_POSITIVE)).expect("positive rate");
    let mut t = 0.0;
    Ok((0..spec.n_requests)
        .map(|i| {
            let input_len = spec.input_len.sample(&mut rng);
            let output_len = spec.output_len.sample(&mut rng);
            if spec.arrival == ArrivalKind::Poisson && i > 0 {
                t += gaps.sample(&mut rng) * 1e3;
            }
            SimRequest {
                id: i as RequestId,
                arrival_ms: t,
                input_len,
                output_len,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aime(n: usize, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            n_requests: n,
            input_len: LengthDist::constant(138),
            output_len: LengthDist::normal(13185.0, 7626.0, 65536),
            arrival: ArrivalKind::AllAtStart,
            arrival_rate: 0.0,
            seed,
        }
    }

    #[test]
    fn aime_means_within_three_percent() {
        let w = generate_workload(&aime(2048, 11)).unwrap();
        let mean = |f: fn(&SimRequest) -> usize| w.iter().map(|r| f(r) as f64).sum::<f64>() / w.len() as f64;
        assert_eq!(mean(|r| r.input_len), 138.0);
        let out = mean(|r| r.output_len);
        assert!((out / 13185.0 - 1.0).abs() < 0.03, "{out}");
        assert!(w.iter().all(|r| r.output_len >= 1));
    }

    #[test]
    fn zero_std_is_constant() {
        let mut s = aime(50, 1);
        s.output_len.std = 0.0;
        let w = generate_workload(&s).unwrap();
        assert!(w.iter().all(|r| r.output_len == 13185));
    }

    #[test]
    fn seeded_determinism() {
        let mut s = aime(100, 5);
        s.arrival = ArrivalKind::Poisson;
        s.arrival_rate = 4.0;
        s.output_len.kind = LengthKind::Lognormal;
        assert_eq!(generate_workload(&s).unwrap(), generate_workload(&s).unwrap());
        let w = generate_workload(&s).unwrap();
        assert!(w.windows(2).all(|p| p[0].arrival_ms <= p[1].arrival_ms));
        assert_eq!(w[0].arrival_ms, 0.0);
    }

    #[test]
    fn clamps_to_max() {
        let mut s = aime(200, 2);
        s.output_len.max = 14000;
        assert!(generate_workload(&s).unwrap().iter().all(|r| r.output_len <= 14000));
    }

    #[test]
    fn invalid_specs() {
        let mut s = aime(10, 0);
        s.output_len.std = -1.0;
        assert!(generate_workload(&s).is_err());
        let mut s = aime(10, 0);
        s.arrival = ArrivalKind::Poisson;
        assert!(generate_workload(&s).is_err());
        let mut s = aime(10, 0);
        s.input_len.std = 3.0;
        assert!(generate_workload(&s).is_err());
    }
}
