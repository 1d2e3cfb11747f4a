//! GNSS meaconing: a spoofer rebroadcasts positions that follow the victim's
//! planned route plus a slowly growing offset.

use nalgebra::Vector3;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::sensor::{GnssConfig, GnssInjector, Measurement, Provenance};
use crate::sim::{VehicleState, WaypointPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    Off,
    Meaconing,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub mode: AttackMode,
    pub t_on: f64,
    /// Unit vector.
    pub direction: Vector3<f64>,
    /// m/s.
    pub ramp_rate: f64,
}

impl AttackSpec {
    pub fn off() -> Self {
        Self {
            mode: AttackMode::Off,
            t_on: 0.0,
            direction: Vector3::x(),
            ramp_rate: 0.0,
        }
    }

    pub fn is_active_at(&self, t: f64) -> bool {
        self.mode == AttackMode::Meaconing && t >= self.t_on
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SpooferState {
    /// Victim's true position at the first spoofed sample.
    pub anchor: Option<Vector3<f64>>,
    pub active: bool,
}

/// Broadcast position: the victim's reference plus a linear ramp from onset.
pub fn spoofer_position(t: f64, spec: &AttackSpec, p_ref_victim: &Vector3<f64>) -> Vector3<f64> {
    p_ref_victim + spec.direction * ((t - spec.t_on) * spec.ramp_rate)
}

/// Replace a genuine GNSS fix with the spoofer's broadcast.
///
/// `noise` is the receiver-level noise the replayed signal still carries.
/// Only `value` and `provenance` ever change.
pub fn apply_meaconing(
    m: Measurement,
    victim_true_p: &Vector3<f64>,
    spec: &AttackSpec,
    sp: &mut SpooferState,
    plan: &WaypointPlan,
    noise: &Vector3<f64>,
) -> Measurement {
    if !spec.is_active_at(m.stamp) {
        return m;
    }
    if sp.anchor.is_none() {
        sp.anchor = Some(*victim_true_p);
        sp.active = true;
    }
    let (p_ref, _) = plan.reference_at(m.stamp);
    Measurement {
        value: spoofer_position(m.stamp, spec, &p_ref) + noise,
        provenance: Provenance::Spoofed,
        ..m
    }
}

/// [`GnssInjector`] running the meaconing attack inside the event loop.
pub struct MeaconingInjector {
    pub spec: AttackSpec,
    pub state: SpooferState,
    plan: WaypointPlan,
    receiver: GnssConfig,
    rng: ChaCha20Rng,
}

impl MeaconingInjector {
    pub fn new(
        spec: AttackSpec,
        plan: WaypointPlan,
        receiver: GnssConfig,
        rng: ChaCha20Rng,
    ) -> Self {
        Self {
            spec,
            state: SpooferState::default(),
            plan,
            receiver,
            rng,
        }
    }
}

impl GnssInjector for MeaconingInjector {
    fn inject(&mut self, m: Measurement, truth: &VehicleState) -> Result<Measurement> {
        if !self.spec.is_active_at(m.stamp) {
            return Ok(m);
        }
        let noise = self.receiver.sample_noise(&mut self.rng);
        let out = apply_meaconing(m, &truth.p, &self.spec, &mut self.state, &self.plan, &noise);
        if !out.value.iter().all(|c| c.is_finite()) {
            return Err(SimError::Config(format!(
                "attack injector produced a non-finite value at stamp {}",
                m.stamp
            )));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ramp_rate: f64,
    /// Largest onboard residual energy seen during the attack at that rate.
    pub max_q: f64,
    /// Residual limit `(1 - margin) * gamma`.
    pub limit: f64,
    /// Set when even the top of the bracket stayed under the limit.
    pub saturated: bool,
    pub nominal_max_q: f64,
}

/// Bisection for the largest ramp rate whose closed-loop onboard residual
/// stays under `(1 - margin) * gamma_on` during the attack.
///
/// `max_q_at` runs a full simulation at the given rate and returns the
/// maximum onboard residual energy over the attack interval. It is assumed
/// nondecreasing in the rate; both ends of the bracket are checked.
pub fn calibrate_stealth_rate<F>(
    mut max_q_at: F,
    gamma_on: f64,
    margin: f64,
    r_max: f64,
    iters: u32,
) -> Result<Calibration>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(margin > 0.0 && margin < 1.0) {
        return Err(SimError::Config(format!(
            "attack.margin must be in (0, 1), got {margin}"
        )));
    }
    if !(r_max > 0.0 && r_max.is_finite()) {
        return Err(SimError::Config(format!(
            "attack.r_max_mps must be > 0, got {r_max}"
        )));
    }
    let limit = (1.0 - margin) * gamma_on;
    let nominal = max_q_at(0.0)?;
    if nominal > limit {
        return Err(SimError::Calibration(format!(
            "even a zero ramp peaks at q = {nominal:.3} above the stealth limit {limit:.3}; \
             the onboard monitor flags nominal noise (check monitor.alpha)"
        )));
    }
    let top = max_q_at(r_max)?;
    if top <= limit {
        log::warn!(
            "ramp rate {r_max} m/s is still stealthy; calibration saturated at the bracket top"
        );
        return Ok(Calibration {
            ramp_rate: r_max,
            max_q: top,
            limit,
            saturated: true,
            nominal_max_q: nominal,
        });
    }
    let (mut lo, mut lo_q, mut hi) = (0.0, nominal, r_max);
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        let q = max_q_at(mid)?;
        if q <= limit {
            lo = mid;
            lo_q = q;
        } else {
            hi = mid;
        }
    }
    Ok(Calibration {
        ramp_rate: lo,
        max_q: lo_q,
        limit,
        saturated: false,
        nominal_max_q: nominal,
    })
}
