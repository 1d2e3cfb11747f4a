//! Onboard Kalman filter with rewind-and-replay fusion of delayed
//! measurements, the chi-squared innovation monitor, and the latched
//! switch to external-position aiding.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::chi2::chi2_threshold;
use crate::error::{Result, SimError};
use crate::sensor::Measurement;
use crate::sim::{position_selector, ControlCommand, DynamicsModel, Matrix3x6, Matrix6};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    GnssOnly,
    GnssPlusExternal,
}

impl EstimatorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorMode::GnssOnly => "gnss_only",
            EstimatorMode::GnssPlusExternal => "gnss_plus_external",
        }
    }
}

/// Where a position measurement comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// The vehicle's own receiver; always fused.
    Onboard,
    /// The camera network; fused only after reconfiguration.
    External,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorConfig {
    pub alpha: f64,
    /// Measurement dimension.
    pub dof: usize,
    /// Samples summed per test; 1 is the instantaneous gate.
    pub window: usize,
    pub gamma: f64,
}

impl MonitorConfig {
    pub fn new(alpha: f64, dof: usize, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(SimError::Config("monitor.window must be >= 1".into()));
        }
        let gamma = chi2_threshold(dof * window, alpha)?;
        Ok(Self {
            alpha,
            dof,
            window,
            gamma,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualRecord {
    /// Fusion (delivery) time.
    pub t: f64,
    pub stamp: f64,
    pub sensor_id: u32,
    pub nu: Vector3<f64>,
    pub s: Matrix3<f64>,
    pub q: f64,
    pub gamma: f64,
    pub flagged: bool,
    pub mode: EstimatorMode,
}

/// Innovation of `z` against a prior and its normalized energy.
pub fn innovation_stat(
    x_prior: &Vector6<f64>,
    p_prior: &Matrix6,
    z: &Vector3<f64>,
    h: &Matrix3x6,
    r: &Matrix3<f64>,
) -> Option<(Vector3<f64>, Matrix3<f64>, f64)> {
    let nu = z - h * x_prior;
    let s = h * p_prior * h.transpose() + r;
    let s = (s + s.transpose()) * 0.5;
    let chol = s.cholesky()?;
    let q = nu.dot(&chol.solve(&nu));
    Some((nu, s, q.max(0.0)))
}

/// Kalman measurement update with the Joseph-form covariance.
fn joseph_update(
    x: &Vector6<f64>,
    p: &Matrix6,
    nu: &Vector3<f64>,
    s: &Matrix3<f64>,
    h: &Matrix3x6,
    r: &Matrix3<f64>,
) -> Option<(Vector6<f64>, Matrix6)> {
    let s_inv = s.cholesky()?.inverse();
    let k = p * h.transpose() * s_inv;
    let ikh = Matrix6::identity() - k * h;
    let p_new = ikh * p * ikh.transpose() + k * r * k.transpose();
    Some((x + k * nu, (p_new + p_new.transpose()) * 0.5))
}

#[derive(Debug, Clone)]
struct Fused {
    sensor_id: u32,
    seq: u64,
    value: Vector3<f64>,
    r: Matrix3<f64>,
}

#[derive(Debug, Clone)]
struct Snapshot {
    step: i64,
    /// Input applied from this step to the next; `None` at the head.
    u: Option<Vector3<f64>>,
    x_prior: Vector6<f64>,
    p_prior: Matrix6,
    x_post: Vector6<f64>,
    p_post: Matrix6,
    /// Measurements at this step in `(sensor_id, seq)` order.
    fused: Vec<Fused>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FuseOutcome {
    Fused(ResidualRecord),
    /// Stamp older than the rewind horizon.
    Dropped,
    /// External measurement while still in `GnssOnly` mode.
    Ignored,
}

#[derive(Debug, Clone)]
pub struct EstimatorState {
    model: DynamicsModel,
    h: Matrix3x6,
    buffer: VecDeque<Snapshot>,
    capacity: usize,
    mode: EstimatorMode,
    gnss_r_inflation: f64,
    dropped: u64,
}

impl EstimatorState {
    /// `capacity` is the number of grid steps kept for rewinding; size it as
    /// `ceil(max_latency / dt) + 1` or more.
    pub fn new(
        model: DynamicsModel,
        t0: f64,
        x0: Vector6<f64>,
        p0: Matrix6,
        capacity: usize,
    ) -> Result<Self> {
        if p0.cholesky().is_none() {
            return Err(SimError::Config(
                "estimator initial covariance must be positive definite".into(),
            ));
        }
        let step = (t0 / model.dt).round() as i64;
        let mut buffer = VecDeque::with_capacity(capacity.max(1) + 1);
        buffer.push_back(Snapshot {
            step,
            u: None,
            x_prior: x0,
            p_prior: p0,
            x_post: x0,
            p_post: p0,
            fused: Vec::new(),
        });
        Ok(Self {
            model,
            h: position_selector(),
            buffer,
            capacity: capacity.max(1),
            mode: EstimatorMode::GnssOnly,
            gnss_r_inflation: 1.0,
            dropped: 0,
        })
    }

    /// Scale applied to onboard R once external aiding is active.
    pub fn with_gnss_r_inflation(mut self, factor: f64) -> Self {
        self.gnss_r_inflation = factor;
        self
    }

    fn head(&self) -> &Snapshot {
        self.buffer.back().expect("buffer never empty")
    }

    pub fn t(&self) -> f64 {
        self.head().step as f64 * self.model.dt
    }

    pub fn step(&self) -> i64 {
        self.head().step
    }

    pub fn x_hat(&self) -> Vector6<f64> {
        self.head().x_post
    }

    pub fn covariance(&self) -> Matrix6 {
        self.head().p_post
    }

    pub fn position(&self) -> Vector3<f64> {
        self.head().x_post.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.head().x_post.fixed_rows::<3>(3).into_owned()
    }

    pub fn mode(&self) -> EstimatorMode {
        self.mode
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Oldest step still available for rewinding.
    pub fn horizon_step(&self) -> i64 {
        self.buffer.front().expect("buffer never empty").step
    }

    /// Time update by one grid step.
    pub fn predict(&mut self, cmd: &ControlCommand) -> Result<()> {
        let (a, b, q) = (self.model.a, self.model.b, self.model.q);
        let head = self.buffer.back_mut().expect("buffer never empty");
        head.u = Some(cmd.u);
        let x = a * head.x_post + b * cmd.u;
        let p = a * head.p_post * a.transpose() + q;
        let p = (p + p.transpose()) * 0.5;
        let step = head.step + 1;
        if step % 100 == 0 && p.cholesky().is_none() {
            return Err(SimError::CovarianceNotPd { step });
        }
        self.buffer.push_back(Snapshot {
            step,
            u: None,
            x_prior: x,
            p_prior: p,
            x_post: x,
            p_post: p,
            fused: Vec::new(),
        });
        while self.buffer.len() > self.capacity {
            self.buffer.pop_front();
        }
        Ok(())
    }

    /// Latches external aiding on the first raised offboard flag.
    pub fn reconfigure(&mut self, offboard_flag: bool) {
        if offboard_flag {
            self.mode = EstimatorMode::GnssPlusExternal;
        }
    }

    fn effective_r(&self, z: &Measurement, source: Source) -> Matrix3<f64> {
        match (source, self.mode) {
            (Source::Onboard, EstimatorMode::GnssPlusExternal) => z.cov * self.gnss_r_inflation,
            _ => z.cov,
        }
    }

    /// Out-of-sequence measurement update.
    ///
    /// Rewinds to the snapshot at the measurement's grid step, applies every
    /// measurement stored there in canonical order, then replays inputs and
    /// later measurements forward to the head. `now` is recorded as the
    /// fusion time in the residual record; `gamma` is the monitor threshold.
    pub fn fuse(
        &mut self,
        z: &Measurement,
        source: Source,
        now: f64,
        gamma: f64,
    ) -> Result<FuseOutcome> {
        if source == Source::External && self.mode == EstimatorMode::GnssOnly {
            return Ok(FuseOutcome::Ignored);
        }
        let j = (z.stamp / self.model.dt).round() as i64;
        let front = self.horizon_step();
        let head = self.step();
        if j < front {
            self.dropped += 1;
            log::debug!(
                "dropping measurement stamped {} (horizon step {front})",
                z.stamp
            );
            return Ok(FuseOutcome::Dropped);
        }
        if j > head {
            return Err(SimError::Config(format!(
                "measurement stamped {} is ahead of the estimator clock {}",
                z.stamp,
                self.t()
            )));
        }
        let r = self.effective_r(z, source);
        let idx = (j - front) as usize;
        let entry = Fused {
            sensor_id: z.sensor_id,
            seq: z.seq,
            value: z.value,
            r,
        };
        let snap = &mut self.buffer[idx];
        let pos = snap
            .fused
            .partition_point(|f| (f.sensor_id, f.seq) < (entry.sensor_id, entry.seq));
        snap.fused.insert(pos, entry);

        let mut record = None;
        self.refilter_step(idx, Some(pos), &mut record, z)?;
        for i in idx + 1..self.buffer.len() {
            let prev = &self.buffer[i - 1];
            let u = prev.u.expect("inputs recorded for all but the head");
            let x = self.model.a * prev.x_post + self.model.b * u;
            let p = self.model.a * prev.p_post * self.model.a.transpose() + self.model.q;
            let snap = &mut self.buffer[i];
            snap.x_prior = x;
            snap.p_prior = (p + p.transpose()) * 0.5;
            self.refilter_step(i, None, &mut None, z)?;
        }
        let (nu, s, q) = record.expect("new measurement applied during refilter");
        Ok(FuseOutcome::Fused(ResidualRecord {
            t: now,
            stamp: z.stamp,
            sensor_id: z.sensor_id,
            nu,
            s,
            q,
            gamma,
            flagged: q > gamma,
            mode: self.mode,
        }))
    }

    /// Rebuilds the posterior of buffer entry `idx` from its prior.
    fn refilter_step(
        &mut self,
        idx: usize,
        capture: Option<usize>,
        record: &mut Option<(Vector3<f64>, Matrix3<f64>, f64)>,
        z: &Measurement,
    ) -> Result<()> {
        let h = self.h;
        let snap = &mut self.buffer[idx];
        let (mut x, mut p) = (snap.x_prior, snap.p_prior);
        for (i, f) in snap.fused.iter().enumerate() {
            let singular = || SimError::SingularInnovation {
                sensor_id: f.sensor_id,
                stamp: z.stamp,
            };
            let (nu, s, q) = innovation_stat(&x, &p, &f.value, &h, &f.r).ok_or_else(singular)?;
            if capture == Some(i) {
                *record = Some((nu, s, q));
            }
            (x, p) = joseph_update(&x, &p, &nu, &s, &h, &f.r).ok_or_else(singular)?;
        }
        snap.x_post = x;
        snap.p_post = p;
        Ok(())
    }
}

/// Instantaneous or sliding-window chi-squared gate over residual energies.
#[derive(Debug, Clone)]
pub struct OnboardMonitor {
    pub cfg: MonitorConfig,
    recent: VecDeque<f64>,
}

impl OnboardMonitor {
    pub fn new(cfg: MonitorConfig) -> Self {
        Self {
            cfg,
            recent: VecDeque::with_capacity(cfg.window),
        }
    }

    /// Feeds one residual energy; returns whether the gate fires.
    pub fn check(&mut self, q: f64) -> bool {
        if self.cfg.window == 1 {
            return q > self.cfg.gamma;
        }
        self.recent.push_back(q);
        if self.recent.len() > self.cfg.window {
            self.recent.pop_front();
        }
        self.recent.len() == self.cfg.window && self.recent.iter().sum::<f64>() > self.cfg.gamma
    }
}
