//! Plant, mission reference, tracking controller and the event queue that
//! orders everything in a run.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};

use nalgebra::{Matrix3, SMatrix, Vector3, Vector6};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

pub type Matrix6 = nalgebra::Matrix6<f64>;
pub type Matrix6x3 = SMatrix<f64, 6, 3>;
pub type Matrix3x6 = SMatrix<f64, 3, 6>;

/// Observation matrix selecting position out of `[p; v]`.
pub fn position_selector() -> Matrix3x6 {
    let mut h = Matrix3x6::zeros();
    h.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&Matrix3::identity());
    h
}

/// Discrete linear plant `x' = A x + B u + w`, `w ~ N(0, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    pub dt: f64,
    pub a: Matrix6,
    pub b: Matrix6x3,
    pub q: Matrix6,
    q_sqrt: Matrix6,
}

impl DynamicsModel {
    pub fn new(dt: f64, a: Matrix6, b: Matrix6x3, q: Matrix6) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SimError::Config(format!(
                "dynamics.dt_s must be > 0, got {dt}"
            )));
        }
        let sym = (q + q.transpose()) * 0.5;
        if (sym - q).abs().max() > 1e-12 * q.abs().max().max(1.0) {
            return Err(SimError::Config(
                "process noise covariance is not symmetric".into(),
            ));
        }
        let eig = sym.symmetric_eigen();
        let scale = eig.eigenvalues.abs().max().max(1e-300);
        if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
            return Err(SimError::Config(
                "process noise covariance is not positive semidefinite".into(),
            ));
        }
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let q_sqrt = eig.eigenvectors * Matrix6::from_diagonal(&roots);
        Ok(Self {
            dt,
            a,
            b,
            q: sym,
            q_sqrt,
        })
    }

    /// Per-axis double integrator under zero-order-hold acceleration, driven by
    /// white acceleration noise of spectral density `accel_psd` (m²/s³).
    pub fn double_integrator(dt: f64, accel_psd: f64) -> Result<Self> {
        if accel_psd.is_nan() || accel_psd < 0.0 {
            return Err(SimError::Config(format!(
                "dynamics.accel_noise_psd must be >= 0, got {accel_psd}"
            )));
        }
        let i3 = Matrix3::<f64>::identity();
        let mut a = Matrix6::identity();
        a.fixed_view_mut::<3, 3>(0, 3).copy_from(&(i3 * dt));
        let mut b = Matrix6x3::zeros();
        b.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(i3 * (0.5 * dt * dt)));
        b.fixed_view_mut::<3, 3>(3, 0).copy_from(&(i3 * dt));
        let mut q = Matrix6::zeros();
        q.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(i3 * (accel_psd * dt.powi(3) / 3.0)));
        q.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(i3 * (accel_psd * dt.powi(2) / 2.0)));
        q.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(i3 * (accel_psd * dt.powi(2) / 2.0)));
        q.fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&(i3 * (accel_psd * dt)));
        Self::new(dt, a, b, q)
    }

    /// A sample from N(0, Q). Always consumes six normals so the stream
    /// position does not depend on Q.
    pub fn sample_process_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector6<f64> {
        let n = Vector6::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        self.q_sqrt * n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub t: f64,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl VehicleState {
    pub fn at_rest(t: f64, p: Vector3<f64>) -> Self {
        Self {
            t,
            p,
            v: Vector3::zeros(),
        }
    }

    pub fn stacked(&self) -> Vector6<f64> {
        Vector6::new(self.p.x, self.p.y, self.p.z, self.v.x, self.v.y, self.v.z)
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.p.iter().chain(self.v.iter()).all(|c| c.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlCommand {
    pub u: Vector3<f64>,
    pub a_max: f64,
}

impl ControlCommand {
    pub fn zero(a_max: f64) -> Self {
        Self {
            u: Vector3::zeros(),
            a_max,
        }
    }
}

/// One true-state step of the plant.
pub fn step_dynamics<R: Rng + ?Sized>(
    s: &VehicleState,
    cmd: &ControlCommand,
    model: &DynamicsModel,
    rng: &mut R,
) -> Result<VehicleState> {
    let x = model.a * s.stacked() + model.b * cmd.u + model.sample_process_noise(rng);
    let next = VehicleState {
        t: s.t + model.dt,
        p: x.fixed_rows::<3>(0).into_owned(),
        v: x.fixed_rows::<3>(3).into_owned(),
    };
    if !next.is_finite() {
        return Err(SimError::NonFiniteState {
            step: (s.t / model.dt).round() as u64 + 1,
        });
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub p: Vector3<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaypointPlan {
    waypoints: Vec<Waypoint>,
    looped: bool,
}

impl WaypointPlan {
    pub fn new(waypoints: Vec<Waypoint>, looped: bool) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(SimError::Config(
                "mission.waypoints needs at least 2 entries".into(),
            ));
        }
        for (i, pair) in waypoints.windows(2).enumerate() {
            if pair[1].t.partial_cmp(&pair[0].t) != Some(std::cmp::Ordering::Greater) {
                return Err(SimError::Config(format!(
                    "mission.waypoints[{}].t must be strictly greater than the previous arrival time",
                    i + 1
                )));
            }
        }
        if waypoints
            .iter()
            .any(|w| !w.t.is_finite() || w.p.iter().any(|c| !c.is_finite()))
        {
            return Err(SimError::Config(
                "mission.waypoints contains non-finite values".into(),
            ));
        }
        Ok(Self { waypoints, looped })
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn looped(&self) -> bool {
        self.looped
    }

    /// Reference position and velocity at time `t`.
    pub fn reference_at(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let first = self.waypoints[0];
        let last = self.waypoints[self.waypoints.len() - 1];
        if t <= first.t {
            return (first.p, Vector3::zeros());
        }
        let t = if t > last.t {
            if !self.looped {
                return (last.p, Vector3::zeros());
            }
            first.t + (t - first.t).rem_euclid(last.t - first.t)
        } else {
            t
        };
        // Index of the last waypoint with time <= t.
        let i = self
            .waypoints
            .partition_point(|w| w.t <= t)
            .saturating_sub(1);
        if i + 1 >= self.waypoints.len() {
            return (last.p, Vector3::zeros());
        }
        let (a, b) = (self.waypoints[i], self.waypoints[i + 1]);
        let v = (b.p - a.p) / (b.t - a.t);
        (a.p + v * (t - a.t), v)
    }
}

/// Free-function form of [`WaypointPlan::reference_at`].
pub fn reference_at(t: f64, plan: &WaypointPlan) -> (Vector3<f64>, Vector3<f64>) {
    plan.reference_at(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub kp: f64,
    pub kd: f64,
}

/// PD position tracking with per-axis saturation.
pub fn controller_cmd(
    est_p: &Vector3<f64>,
    est_v: &Vector3<f64>,
    p_ref: &Vector3<f64>,
    v_ref: &Vector3<f64>,
    gains: Gains,
    a_max: f64,
) -> ControlCommand {
    let raw = (p_ref - est_p) * gains.kp + (v_ref - est_v) * gains.kd;
    ControlCommand {
        u: raw.map(|c| c.clamp(-a_max, a_max)),
        a_max,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum EventClass {
    Dynamics = 0,
    Delivery = 1,
    Detector = 2,
    Logging = 3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub deliver_time: f64,
    pub class: EventClass,
    pub sensor_id: u32,
    pub seq: u64,
}

impl SimEvent {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.deliver_time
            .total_cmp(&other.deliver_time)
            .then(self.class.cmp(&other.class))
            .then(self.sensor_id.cmp(&other.sensor_id))
            .then(self.seq.cmp(&other.seq))
    }
}

impl Eq for SimEvent {}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key_cmp(other)
    }
}

struct Entry<T> {
    event: SimEvent,
    payload: T,
}

impl<T> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.event == other.event
    }
}
impl<T> Eq for Entry<T> {}
impl<T> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T> Ord for Entry<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.event.cmp(&other.event)
    }
}

/// Min-queue of events under the `(deliver_time, class, sensor_id, seq)` order.
///
/// `(class, sensor_id, seq)` must be unique over the lifetime of the queue,
/// which makes the order total.
pub struct EventQueue<T> {
    heap: BinaryHeap<Reverse<Entry<T>>>,
    seen: HashSet<(EventClass, u32, u64)>,
}

impl<T> Default for EventQueue<T> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            seen: HashSet::new(),
        }
    }
}

impl<T> EventQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: SimEvent, payload: T) -> Result<()> {
        if !self.seen.insert((event.class, event.sensor_id, event.seq)) {
            return Err(SimError::DuplicateEvent {
                class: event.class as u8,
                sensor_id: event.sensor_id,
                seq: event.seq,
            });
        }
        self.heap.push(Reverse(Entry { event, payload }));
        Ok(())
    }

    /// Pops the minimum event; `None` signals the end of the simulation.
    pub fn next_event(&mut self) -> Option<(SimEvent, T)> {
        self.heap.pop().map(|Reverse(e)| (e.event, e.payload))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
