//! GNSS emulation with a component-wise latency budget.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::sim::{position_selector, Matrix3x6, VehicleState};

pub const GNSS_SENSOR_ID: u32 = 1;
pub const CAMERA_TRACK_SENSOR_ID: u32 = 2;

/// One stage of the sensing pipeline, e.g. motion capture or network hop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyComponent {
    pub name: String,
    /// Seconds.
    pub mean_s: f64,
    /// Seconds.
    pub std_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyBudget {
    pub components: Vec<LatencyComponent>,
    /// Deterministic delay added on top of the stochastic components.
    #[serde(default)]
    pub pad_s: f64,
    /// Latency the pipeline is meant to reproduce; informational.
    #[serde(default)]
    pub target_s: Option<f64>,
}

impl LatencyBudget {
    /// Motion capture, simulator processing and one-way wifi hop as measured
    /// for the GNSS emulation path, with the 73 ms pad that brings the
    /// nominal end-to-end figure up to a 100 ms receiver latency.
    pub fn gnss_emulation() -> Self {
        Self {
            components: vec![
                LatencyComponent {
                    name: "mocap".into(),
                    mean_s: 6.02e-3,
                    std_s: 0.88e-3,
                },
                LatencyComponent {
                    name: "sim_processing".into(),
                    mean_s: 16.01e-3,
                    std_s: 4.45e-3,
                },
                LatencyComponent {
                    name: "network".into(),
                    mean_s: 4.62e-3,
                    std_s: 0.98e-3,
                },
            ],
            pad_s: 73e-3,
            target_s: Some(0.1),
        }
    }

    pub fn zero() -> Self {
        Self {
            components: vec![LatencyComponent {
                name: "none".into(),
                mean_s: 0.0,
                std_s: 0.0,
            }],
            pad_s: 0.0,
            target_s: None,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.components.is_empty() {
            return Err(SimError::Config(format!(
                "{path}.components must not be empty"
            )));
        }
        for (i, c) in self.components.iter().enumerate() {
            if !(c.mean_s >= 0.0 && c.mean_s.is_finite()) {
                return Err(SimError::Config(format!(
                    "{path}.components[{i}].mean_s must be >= 0"
                )));
            }
            if !(c.std_s >= 0.0 && c.std_s.is_finite()) {
                return Err(SimError::Config(format!(
                    "{path}.components[{i}].std_s must be >= 0"
                )));
            }
        }
        if !(self.pad_s >= 0.0 && self.pad_s.is_finite()) {
            return Err(SimError::Config(format!("{path}.pad_s must be >= 0")));
        }
        Ok(())
    }

    /// Expected end-to-end latency ignoring truncation at zero.
    pub fn nominal_mean(&self) -> f64 {
        self.pad_s + self.components.iter().map(|c| c.mean_s).sum::<f64>()
    }

    /// Upper bound used to size rewind buffers: mean + 6 sigma per component.
    pub fn conservative_max(&self) -> f64 {
        self.pad_s
            + self
                .components
                .iter()
                .map(|c| c.mean_s + 6.0 * c.std_s)
                .sum::<f64>()
    }
}

/// Per-component delays, each drawn from N(mean, std²) and truncated at zero.
pub fn sample_latency_parts<R: Rng + ?Sized>(budget: &LatencyBudget, rng: &mut R) -> Vec<f64> {
    budget
        .components
        .iter()
        .map(|c| {
            let z: f64 = rng.sample(StandardNormal);
            (c.mean_s + c.std_s * z).max(0.0)
        })
        .collect()
}

pub fn sample_latency<R: Rng + ?Sized>(budget: &LatencyBudget, rng: &mut R) -> f64 {
    budget.pad_s + sample_latency_parts(budget, rng).iter().sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub std: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Linear-interpolation quantile (`h = (n - 1) p`) of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn latency_stats(samples: &[f64]) -> Result<LatencyStats> {
    if samples.len() < 2 {
        return Err(SimError::InsufficientSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    // Welford: exact for constant data, so a zero-spread budget reports
    // quartiles equal to its mean.
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &x) in samples.iter().enumerate() {
        let d = x - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (x - mean);
    }
    let var = m2 / (samples.len() - 1) as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        mean,
        std: var.sqrt(),
        q1: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Genuine,
    Spoofed,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Genuine => "genuine",
            Provenance::Spoofed => "spoofed",
        }
    }
}

/// A position sample as it travels from sensor to consumer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub sensor_id: u32,
    pub seq: u64,
    /// Time the sample describes.
    pub stamp: f64,
    /// Time the sample becomes available to consumers.
    pub deliver_time: f64,
    pub value: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnssConfig {
    pub rate_hz: f64,
    pub r: Matrix3<f64>,
    pub bias: Vector3<f64>,
    pub h: Matrix3x6,
    r_chol: Matrix3<f64>,
}

impl GnssConfig {
    pub fn new(rate_hz: f64, r: Matrix3<f64>, bias: Vector3<f64>) -> Result<Self> {
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(SimError::Config("gnss.rate_hz must be > 0".into()));
        }
        let r_chol = positive_definite_factor(&r)
            .ok_or_else(|| SimError::Config("gnss.r must be symmetric positive definite".into()))?;
        Ok(Self {
            rate_hz,
            r,
            bias,
            h: position_selector(),
            r_chol,
        })
    }

    /// Noise-free configuration. The estimator still sees a tiny R so the
    /// innovation covariance stays invertible.
    pub fn noiseless(rate_hz: f64) -> Self {
        let mut cfg = Self::new(rate_hz, Matrix3::identity(), Vector3::zeros()).expect("valid");
        cfg.r_chol = Matrix3::zeros();
        cfg
    }

    /// A draw from N(0, R). Always consumes three normals.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<f64> {
        let n = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        self.r_chol * n
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub(crate) fn positive_definite_factor(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    if (m - m.transpose()).abs().max() > 1e-12 * m.abs().max().max(1.0) {
        return None;
    }
    m.cholesky().map(|c| c.l())
}

/// Hook through which an attacker may rewrite GNSS measurements.
pub trait GnssInjector {
    /// `truth` is the victim's true state at the sample time.
    fn inject(&mut self, m: Measurement, truth: &VehicleState) -> Result<Measurement>;
}

/// Pass-through injector for attack-free runs.
pub struct NoAttack;

impl GnssInjector for NoAttack {
    fn inject(&mut self, m: Measurement, _truth: &VehicleState) -> Result<Measurement> {
        Ok(m)
    }
}

/// Produces one GNSS fix at the true state's time.
///
/// Noise and latency come from separate streams so the latency model can be
/// changed without perturbing the noise sequence.
pub fn emulate_gnss<N, L>(
    true_state: &VehicleState,
    seq: u64,
    cfg: &GnssConfig,
    budget: &LatencyBudget,
    injector: &mut dyn GnssInjector,
    noise_rng: &mut N,
    latency_rng: &mut L,
) -> Result<Measurement>
where
    N: Rng + ?Sized,
    L: Rng + ?Sized,
{
    let value = cfg.h * true_state.stacked() + cfg.bias + cfg.sample_noise(noise_rng);
    let stamp = true_state.t;
    let deliver_time = stamp + sample_latency(budget, latency_rng);
    let genuine = Measurement {
        sensor_id: GNSS_SENSOR_ID,
        seq,
        stamp,
        deliver_time,
        value,
        cov: cfg.r,
        provenance: Provenance::Genuine,
    };
    injector.inject(genuine, true_state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn measured_components(pad_s: f64) -> LatencyBudget {
        LatencyBudget {
            pad_s,
            ..LatencyBudget::gnss_emulation()
        }
    }

    fn deterministic(mut b: LatencyBudget) -> LatencyBudget {
        for c in &mut b.components {
            c.std_s = 0.0;
        }
        b
    }

    #[test]
    fn deterministic_budget_sums_component_means() {
        let mut rng = stream(1, Stream::GnssLatency);
        let l = sample_latency(&deterministic(measured_components(0.0)), &mut rng);
        assert!((l - 26.65e-3).abs() < 1e-12, "{l}");
        let l = sample_latency(&deterministic(measured_components(73e-3)), &mut rng);
        assert!((l - 99.65e-3).abs() < 1e-12, "{l}");
    }

    #[test]
    fn single_deterministic_component() {
        let b = LatencyBudget {
            components: vec![LatencyComponent {
                name: "x".into(),
                mean_s: 0.001,
                std_s: 0.0,
            }],
            pad_s: 0.0,
            target_s: None,
        };
        let mut rng = stream(1, Stream::GnssLatency);
        assert_eq!(sample_latency(&b, &mut rng), 0.001);
    }

    #[test]
    fn truncation_keeps_components_nonnegative() {
        let b = LatencyBudget {
            components: vec![LatencyComponent {
                name: "x".into(),
                mean_s: 0.0,
                std_s: 1.0,
            }],
            pad_s: 0.0,
            target_s: None,
        };
        let mut rng = stream(2, Stream::GnssLatency);
        let draws: Vec<f64> = (0..1000).map(|_| sample_latency(&b, &mut rng)).collect();
        assert!(draws.iter().all(|&x| x >= 0.0));
        assert!(draws.iter().filter(|&&x| x == 0.0).count() > 400);
    }

    #[test]
    fn monte_carlo_mean_within_three_standard_errors() {
        let b = measured_components(73e-3);
        let mut rng = stream(5, Stream::GnssLatency);
        let draws: Vec<f64> = (0..10_000).map(|_| sample_latency(&b, &mut rng)).collect();
        let s = latency_stats(&draws).unwrap();
        let se = s.std / (draws.len() as f64).sqrt();
        assert!(
            (s.mean - b.nominal_mean()).abs() < 3.0 * se,
            "{} vs {}",
            s.mean,
            b.nominal_mean()
        );
    }

    #[test]
    fn stats_examples() {
        let s = latency_stats(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 0.0));
        let s = latency_stats(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(s.mean, 3.0);
        // sqrt(10 / 4)
        assert!((s.std - 1.5811388300841898).abs() < 1e-12);
        assert_eq!((s.q1, s.median, s.q3), (2.0, 3.0, 4.0));
        let s = latency_stats(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (1.75, 2.5, 3.25));
        assert!(matches!(
            latency_stats(&[1.0]),
            Err(SimError::InsufficientSamples { needed: 2, got: 1 })
        ));
    }

    fn state(t: f64, p: Vector3<f64>) -> VehicleState {
        VehicleState::at_rest(t, p)
    }

    #[test]
    fn noiseless_passthrough_and_bias() {
        let cfg = GnssConfig::noiseless(10.0);
        let mut nr = stream(1, Stream::GnssNoise);
        let mut lr = stream(1, Stream::GnssLatency);
        let p = Vector3::new(1.0, 2.0, 3.0);
        let m = emulate_gnss(
            &state(0.3, p),
            0,
            &cfg,
            &LatencyBudget::zero(),
            &mut NoAttack,
            &mut nr,
            &mut lr,
        )
        .unwrap();
        assert_eq!(m.value, p);
        assert_eq!(m.provenance, Provenance::Genuine);
        assert_eq!(m.stamp, m.deliver_time);

        let mut biased = GnssConfig::noiseless(10.0);
        biased.bias = Vector3::new(0.5, 0.0, 0.0);
        let m = emulate_gnss(
            &state(0.3, p),
            1,
            &biased,
            &LatencyBudget::zero(),
            &mut NoAttack,
            &mut nr,
            &mut lr,
        )
        .unwrap();
        assert_eq!(m.value, p + Vector3::new(0.5, 0.0, 0.0));
    }

    #[test]
    fn ten_hz_for_sixty_seconds() {
        let cfg = GnssConfig::new(
            10.0,
            Matrix3::from_diagonal(&Vector3::new(0.25, 0.25, 0.64)),
            Vector3::zeros(),
        )
        .unwrap();
        let budget = LatencyBudget::gnss_emulation();
        let mut nr = stream(1, Stream::GnssNoise);
        let mut lr = stream(1, Stream::GnssLatency);
        // Sampling grid: every 10th step of a 100 Hz clock, end exclusive.
        let stamps: Vec<f64> = (0..6000u64)
            .filter(|k| k % 10 == 0)
            .map(|k| k as f64 * 0.01)
            .collect();
        let ms: Vec<Measurement> = stamps
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                emulate_gnss(
                    &state(t, Vector3::zeros()),
                    i as u64,
                    &cfg,
                    &budget,
                    &mut NoAttack,
                    &mut nr,
                    &mut lr,
                )
                .unwrap()
            })
            .collect();
        assert_eq!(ms.len(), 600);
        for (i, m) in ms.iter().enumerate() {
            assert!((m.stamp - i as f64 * 0.1).abs() < 1e-9);
            assert!(m.deliver_time >= m.stamp);
            assert_eq!(m.cov, cfg.r);
        }
    }

    #[test]
    fn merged_sensor_streams_arrive_out_of_stamp_order() {
        // 10 Hz GNSS behind the padded budget and 5 Hz camera tracks behind a
        // ~25 ms budget: a camera sample stamped after a GNSS fix routinely
        // lands before it.
        let gnss = LatencyBudget::gnss_emulation();
        let camera = LatencyBudget {
            components: vec![
                LatencyComponent {
                    name: "network".into(),
                    mean_s: 4.62e-3,
                    std_s: 0.98e-3,
                },
                LatencyComponent {
                    name: "processing".into(),
                    mean_s: 20e-3,
                    std_s: 5e-3,
                },
            ],
            pad_s: 0.0,
            target_s: None,
        };
        let mut rng = stream(9, Stream::GnssLatency);
        let mut arrivals: Vec<(f64, f64)> = Vec::new();
        for k in 0..10_000u64 {
            let t = k as f64 * 0.01;
            if k % 10 == 0 {
                arrivals.push((t + sample_latency(&gnss, &mut rng), t));
            }
            if k % 20 == 0 {
                arrivals.push((t + sample_latency(&camera, &mut rng), t));
            }
        }
        arrivals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let inversions = arrivals.windows(2).filter(|w| w[1].1 < w[0].1).count();
        assert!(inversions > 0);
    }
}
