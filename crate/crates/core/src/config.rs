//! Scenario configuration: one JSON document, strict schema, every field
//! defaulted.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::attack::{AttackMode, AttackSpec};
use crate::camera::{CameraModel, PfParams, TrackNoiseModel};
use crate::detector::DetectorConfig;
use crate::error::{Result, SimError};
use crate::sensor::{GnssConfig, LatencyBudget, LatencyComponent};
use crate::sim::{DynamicsModel, Gains, Waypoint, WaypointPlan};

pub const RNG_NAME: &str = "chacha20";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_s: f64,
    /// Recorded for reproducibility; only `chacha20` is accepted.
    pub rng: String,
    pub dynamics: DynamicsSection,
    pub mission: MissionSection,
    pub controller: ControllerSection,
    pub estimator: EstimatorSection,
    pub gnss: GnssSection,
    pub cameras: CameraSection,
    pub attack: AttackSection,
    pub monitor: MonitorSection,
    pub detector: DetectorSection,
    pub mitigation: MitigationSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsSection {
    pub dt_s: f64,
    /// White-acceleration power spectral density, m²/s³.
    pub accel_noise_psd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointEntry {
    pub p_m: [f64; 3],
    pub t_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissionSection {
    pub waypoints: Vec<WaypointEntry>,
    #[serde(rename = "loop")]
    pub looped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    pub kp: f64,
    pub kd: f64,
    pub a_max_mps2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    pub init_pos_std_m: f64,
    pub init_vel_std_mps: f64,
    /// Rewind horizon in steps; derived from the latency budgets when absent.
    pub buffer_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GnssSection {
    pub rate_hz: f64,
    pub r_m2: [[f64; 3]; 3],
    pub bias_m: [f64; 3],
    pub latency: LatencyBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraNode {
    pub id: u32,
    pub position_m: [f64; 3],
    #[serde(default = "default_bearing_sigma")]
    pub bearing_sigma_rad: f64,
    #[serde(default = "default_p_miss")]
    pub p_miss: f64,
    #[serde(default)]
    pub boresight: Option<[f64; 3]>,
    #[serde(default)]
    pub fov_half_angle_rad: Option<f64>,
}

fn default_bearing_sigma() -> f64 {
    0.002
}

fn default_p_miss() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParticleFilterSection {
    pub particles: usize,
    pub accel_sigma_mps2: f64,
    pub init_half_width_m: f64,
    pub init_vel_std_mps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSection {
    pub enabled: bool,
    pub rate_hz: f64,
    pub nodes: Vec<CameraNode>,
    pub latency: LatencyBudget,
    pub pf: ParticleFilterSection,
    /// Reported track covariance is `inflation * P`, floored per axis.
    pub track_cov_inflation: f64,
    pub track_sigma_min_m: f64,
}

/// Attack ramp rate: a fixed value or `"auto"` for stealth calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RampRate {
    Auto,
    Fixed(f64),
}

impl Serialize for RampRate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            RampRate::Auto => s.serialize_str("auto"),
            RampRate::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for RampRate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = RampRate;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a ramp rate in m/s or \"auto\"")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<RampRate, E> {
                if v == "auto" {
                    Ok(RampRate::Auto)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<RampRate, E> {
                Ok(RampRate::Fixed(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<RampRate, E> {
                Ok(RampRate::Fixed(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<RampRate, E> {
                Ok(RampRate::Fixed(v as f64))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub mode: AttackMode,
    pub t_on_s: f64,
    pub direction: [f64; 3],
    pub ramp_rate_mps: RampRate,
    /// Stealth margin used by `"auto"`.
    pub margin: f64,
    pub iters: u32,
    pub r_max_mps: f64,
    /// Seed for calibration runs; the scenario seed when absent.
    pub calibration_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorSection {
    pub alpha: f64,
    /// Number of consecutive residuals summed by the gate.
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub enabled: bool,
    pub window_steps: usize,
    pub slide_steps: usize,
    pub alpha_off: f64,
    pub persistence: usize,
    /// Wait after a window closes before evaluating it, so late
    /// measurements stamped inside the window can arrive.
    pub decision_delay_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MitigationSection {
    pub enabled: bool,
    /// Factor on GNSS R once external positions are fused; 1 keeps it as is.
    pub gnss_r_inflation: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            duration_s: 120.0,
            rng: RNG_NAME.into(),
            dynamics: DynamicsSection::default(),
            mission: MissionSection::default(),
            controller: ControllerSection::default(),
            estimator: EstimatorSection::default(),
            gnss: GnssSection::default(),
            cameras: CameraSection::default(),
            attack: AttackSection::default(),
            monitor: MonitorSection::default(),
            detector: DetectorSection::default(),
            mitigation: MitigationSection::default(),
        }
    }
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            dt_s: 0.01,
            accel_noise_psd: 0.002,
        }
    }
}

impl Default for MissionSection {
    fn default() -> Self {
        let corners = [
            [0.0, 0.0, 5.0],
            [20.0, 0.0, 5.0],
            [20.0, 20.0, 5.0],
            [0.0, 20.0, 5.0],
            [0.0, 0.0, 5.0],
        ];
        Self {
            waypoints: corners
                .iter()
                .enumerate()
                .map(|(i, &p_m)| WaypointEntry {
                    p_m,
                    t_s: 40.0 * i as f64,
                })
                .collect(),
            looped: true,
        }
    }
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            kp: 2.0,
            kd: 2.8,
            a_max_mps2: 3.0,
        }
    }
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            init_pos_std_m: 0.5,
            init_vel_std_mps: 0.1,
            buffer_steps: None,
        }
    }
}

impl Default for GnssSection {
    fn default() -> Self {
        Self {
            rate_hz: 10.0,
            r_m2: [[0.25, 0.0, 0.0], [0.0, 0.25, 0.0], [0.0, 0.0, 0.64]],
            bias_m: [0.0; 3],
            latency: LatencyBudget::gnss_emulation(),
        }
    }
}

impl Default for ParticleFilterSection {
    fn default() -> Self {
        Self {
            particles: 1000,
            accel_sigma_mps2: 1.5,
            init_half_width_m: 1.0,
            init_vel_std_mps: 0.2,
        }
    }
}

impl Default for CameraSection {
    fn default() -> Self {
        let spots = [
            [-10.0, -10.0, 1.0],
            [30.0, -10.0, 1.0],
            [30.0, 30.0, 1.0],
            [-10.0, 30.0, 1.0],
        ];
        Self {
            enabled: true,
            rate_hz: 5.0,
            nodes: spots
                .iter()
                .enumerate()
                .map(|(i, &position_m)| CameraNode {
                    id: i as u32 + 1,
                    position_m,
                    bearing_sigma_rad: default_bearing_sigma(),
                    p_miss: default_p_miss(),
                    boresight: None,
                    fov_half_angle_rad: None,
                })
                .collect(),
            latency: LatencyBudget {
                components: vec![
                    LatencyComponent {
                        name: "processing".into(),
                        mean_s: 20e-3,
                        std_s: 5e-3,
                    },
                    LatencyComponent {
                        name: "network".into(),
                        mean_s: 4.62e-3,
                        std_s: 0.98e-3,
                    },
                ],
                pad_s: 0.0,
                target_s: None,
            },
            pf: ParticleFilterSection::default(),
            track_cov_inflation: 2.0,
            track_sigma_min_m: 0.1,
        }
    }
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            mode: AttackMode::Meaconing,
            t_on_s: 30.0,
            direction: [1.0, 0.0, 0.0],
            ramp_rate_mps: RampRate::Auto,
            margin: 0.1,
            iters: 12,
            r_max_mps: 0.5,
            calibration_seed: None,
        }
    }
}

impl Default for MonitorSection {
    fn default() -> Self {
        Self {
            alpha: 1e-6,
            window: 1,
        }
    }
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            enabled: true,
            window_steps: 100,
            slide_steps: 50,
            alpha_off: 0.01,
            persistence: 3,
            decision_delay_s: 0.15,
        }
    }
}

impl Default for MitigationSection {
    fn default() -> Self {
        Self {
            enabled: true,
            gnss_r_inflation: 1.0,
        }
    }
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::from(a)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(SimError::Config(msg()))
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    ensure(v > 0.0 && v.is_finite(), || {
        format!("{key} must be > 0, got {v}")
    })
}

fn unit_interval(key: &str, v: f64) -> Result<()> {
    ensure(v > 0.0 && v < 1.0, || {
        format!("{key} must be in (0, 1), got {v}")
    })
}

impl ScenarioConfig {
    /// Parses a JSON document; errors carry the key path and line.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let mut msg = format!("{path}: {inner}");
            if let Some(hint) = unknown_key_hint(&inner.to_string()) {
                msg.push_str(&format!("; did you mean `{hint}`?"));
            }
            SimError::Config(msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            SimError::Config(m) => SimError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.rng == RNG_NAME, || {
            format!("rng must be \"{RNG_NAME}\", got \"{}\"", self.rng)
        })?;
        ensure(
            self.duration_s >= 0.0 && self.duration_s.is_finite(),
            || format!("duration_s must be >= 0, got {}", self.duration_s),
        )?;
        self.dynamics_model()?;
        self.plan()?;
        positive("controller.a_max_mps2", self.controller.a_max_mps2)?;
        ensure(self.controller.kp > 0.0 && self.controller.kd > 0.0, || {
            "controller.kp and controller.kd must be > 0".into()
        })?;
        positive("estimator.init_pos_std_m", self.estimator.init_pos_std_m)?;
        positive(
            "estimator.init_vel_std_mps",
            self.estimator.init_vel_std_mps,
        )?;
        if let Some(b) = self.estimator.buffer_steps {
            ensure(b >= 1, || "estimator.buffer_steps must be >= 1".into())?;
        }
        self.gnss_config()?;
        self.gnss.latency.validate("gnss.latency")?;
        self.step_divisor("gnss.rate_hz", self.gnss.rate_hz)?;

        let c = &self.cameras;
        self.step_divisor("cameras.rate_hz", c.rate_hz)?;
        c.latency.validate("cameras.latency")?;
        ensure(!c.enabled || !c.nodes.is_empty(), || {
            "cameras.nodes must not be empty".into()
        })?;
        for cam in self.camera_models() {
            cam.validate()?;
        }
        let mut ids: Vec<u32> = c.nodes.iter().map(|n| n.id).collect();
        ids.sort_unstable();
        ids.dedup();
        ensure(ids.len() == c.nodes.len(), || {
            "cameras.nodes ids must be unique".into()
        })?;
        for (i, n) in c.nodes.iter().enumerate() {
            ensure(
                n.boresight.is_some() == n.fov_half_angle_rad.is_some(),
                || format!("cameras.nodes[{i}]: boresight and fov_half_angle_rad go together"),
            )?;
        }
        ensure(c.pf.particles >= 1, || {
            "cameras.pf.particles must be >= 1".into()
        })?;
        positive("cameras.pf.accel_sigma_mps2", c.pf.accel_sigma_mps2)?;
        positive("cameras.pf.init_half_width_m", c.pf.init_half_width_m)?;
        ensure(c.pf.init_vel_std_mps >= 0.0, || {
            "cameras.pf.init_vel_std_mps must be >= 0".into()
        })?;
        ensure(c.track_cov_inflation >= 1.0, || {
            "cameras.track_cov_inflation must be >= 1".into()
        })?;
        positive("cameras.track_sigma_min_m", c.track_sigma_min_m)?;

        let a = &self.attack;
        ensure(a.t_on_s >= 0.0 && a.t_on_s.is_finite(), || {
            "attack.t_on_s must be >= 0".into()
        })?;
        let d = v3(a.direction);
        ensure(d.iter().all(|x| x.is_finite()) && d.norm() > 1e-12, || {
            "attack.direction must be a nonzero vector".into()
        })?;
        if let RampRate::Fixed(r) = a.ramp_rate_mps {
            ensure(r >= 0.0 && r.is_finite(), || {
                format!("attack.ramp_rate_mps must be >= 0, got {r}")
            })?;
        }
        unit_interval("attack.margin", a.margin)?;
        ensure(a.iters >= 1, || "attack.iters must be >= 1".into())?;
        positive("attack.r_max_mps", a.r_max_mps)?;

        unit_interval("monitor.alpha", self.monitor.alpha)?;
        ensure(self.monitor.window >= 1, || {
            "monitor.window must be >= 1".into()
        })?;

        let det = &self.detector;
        ensure(det.window_steps >= 1 && det.slide_steps >= 1, || {
            "detector.window_steps and detector.slide_steps must be >= 1".into()
        })?;
        unit_interval("detector.alpha_off", det.alpha_off)?;
        ensure(det.persistence >= 1, || {
            "detector.persistence must be >= 1".into()
        })?;
        ensure(det.decision_delay_s >= 0.0, || {
            "detector.decision_delay_s must be >= 0".into()
        })?;
        ensure(self.mitigation.gnss_r_inflation >= 1.0, || {
            "mitigation.gnss_r_inflation must be >= 1".into()
        })?;
        Ok(())
    }

    fn step_divisor(&self, key: &str, rate: f64) -> Result<()> {
        positive(key, rate)?;
        let steps = 1.0 / (rate * self.dynamics.dt_s);
        ensure(
            (steps - steps.round()).abs() < 1e-9 && steps.round() >= 1.0,
            || format!("{key} = {rate} must divide the base rate 1/dynamics.dt_s"),
        )
    }

    pub fn dynamics_model(&self) -> Result<DynamicsModel> {
        positive("dynamics.dt_s", self.dynamics.dt_s)?;
        ensure(self.dynamics.accel_noise_psd >= 0.0, || {
            "dynamics.accel_noise_psd must be >= 0".into()
        })?;
        DynamicsModel::double_integrator(self.dynamics.dt_s, self.dynamics.accel_noise_psd)
    }

    pub fn plan(&self) -> Result<WaypointPlan> {
        let wps = self
            .mission
            .waypoints
            .iter()
            .map(|w| Waypoint {
                p: v3(w.p_m),
                t: w.t_s,
            })
            .collect();
        WaypointPlan::new(wps, self.mission.looped)
    }

    pub fn gains(&self) -> Gains {
        Gains {
            kp: self.controller.kp,
            kd: self.controller.kd,
        }
    }

    pub fn gnss_config(&self) -> Result<GnssConfig> {
        let r = Matrix3::from_fn(|i, j| self.gnss.r_m2[i][j]);
        GnssConfig::new(self.gnss.rate_hz, r, v3(self.gnss.bias_m))
            .map_err(|e| SimError::Config(format!("gnss.r_m2: {e}")))
    }

    pub fn camera_models(&self) -> Vec<CameraModel> {
        self.cameras
            .nodes
            .iter()
            .map(|n| CameraModel {
                id: n.id,
                position: v3(n.position_m),
                bearing_sigma: n.bearing_sigma_rad,
                rate_hz: self.cameras.rate_hz,
                p_miss: n.p_miss,
                fov: n
                    .boresight
                    .zip(n.fov_half_angle_rad)
                    .map(|(b, h)| (v3(b).normalize(), h)),
            })
            .collect()
    }

    pub fn pf_params(&self) -> PfParams {
        PfParams {
            dt: 1.0 / self.cameras.rate_hz,
            accel_sigma: self.cameras.pf.accel_sigma_mps2,
        }
    }

    pub fn track_noise(&self) -> TrackNoiseModel {
        TrackNoiseModel {
            inflation: self.cameras.track_cov_inflation,
            sigma_min: self.cameras.track_sigma_min_m,
        }
    }

    /// Attack spec with a resolved rate; `None` while the rate is `"auto"`.
    pub fn attack_spec(&self) -> Option<AttackSpec> {
        match self.attack.ramp_rate_mps {
            RampRate::Fixed(r) => Some(self.attack_spec_with(r)),
            RampRate::Auto if self.attack.mode == AttackMode::Off => Some(AttackSpec::off()),
            RampRate::Auto => None,
        }
    }

    pub fn attack_spec_with(&self, ramp_rate: f64) -> AttackSpec {
        AttackSpec {
            mode: self.attack.mode,
            t_on: self.attack.t_on_s,
            direction: v3(self.attack.direction).normalize(),
            ramp_rate,
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            window_steps: self.detector.window_steps,
            slide_steps: self.detector.slide_steps,
            alpha: self.detector.alpha_off,
            persistence: self.detector.persistence,
        }
    }

    /// Rewind horizon covering the slowest delivery path.
    pub fn buffer_steps(&self) -> usize {
        self.estimator.buffer_steps.unwrap_or_else(|| {
            let worst = self
                .gnss
                .latency
                .conservative_max()
                .max(self.cameras.latency.conservative_max());
            (worst / self.dynamics.dt_s).ceil() as usize + 2
        })
    }

    pub fn base_steps(&self) -> u64 {
        (self.duration_s / self.dynamics.dt_s).round() as u64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Nearest expected key for serde's "unknown field" message.
fn unknown_key_hint(msg: &str) -> Option<String> {
    if !msg.starts_with("unknown field") {
        return None;
    }
    let ticks: Vec<&str> = msg.split('`').collect();
    let unknown = ticks.get(1)?;
    ticks
        .iter()
        .skip(3)
        .step_by(2)
        .map(|k| (strsim::jaro_winkler(unknown, k), *k))
        .filter(|(score, _)| *score > 0.7)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k.to_string())
}
