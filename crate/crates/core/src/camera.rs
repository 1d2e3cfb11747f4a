//! Camera-network stand-in: fixed cameras emitting noisy bearings, a
//! bootstrap particle filter fusing them, and publication of the track as an
//! external position measurement.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::sensor::{
    sample_latency, LatencyBudget, Measurement, Provenance, CAMERA_TRACK_SENSOR_ID,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub id: u32,
    pub position: Vector3<f64>,
    /// Radians.
    pub bearing_sigma: f64,
    pub rate_hz: f64,
    pub p_miss: f64,
    /// Optional field-of-view gate: unit boresight and half-angle (rad).
    pub fov: Option<(Vector3<f64>, f64)>,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        let path = format!("cameras.nodes[id={}]", self.id);
        if !(self.bearing_sigma > 0.0 && self.bearing_sigma.is_finite()) {
            return Err(SimError::Config(format!(
                "{path}: bearing sigma must be > 0"
            )));
        }
        if self.rate_hz.is_nan() || self.rate_hz <= 0.0 {
            return Err(SimError::Config(format!("{path}: rate must be > 0")));
        }
        if !(0.0..1.0).contains(&self.p_miss) {
            return Err(SimError::Config(format!(
                "{path}: p_miss must be in [0, 1)"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BearingDetection {
    pub camera_id: u32,
    pub stamp: f64,
    /// Unit vector from the camera towards the target.
    pub bearing: Vector3<f64>,
}

/// Two unit vectors completing `b` to an orthonormal basis.
fn perpendicular_basis(b: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if b.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let e1 = b.cross(&helper).normalize();
    let e2 = b.cross(&e1);
    (e1, e2)
}

/// Angle between two unit vectors, accurate for tiny angles.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// One synthetic detection. Always consumes three draws from `rng`.
pub fn detect<R: Rng + ?Sized>(
    cam: &CameraModel,
    stamp: f64,
    true_p: &Vector3<f64>,
    rng: &mut R,
) -> Option<BearingDetection> {
    let miss_draw: f64 = rng.random();
    let phi = rng.random::<f64>() * 2.0 * PI;
    let theta = cam.bearing_sigma * rng.sample::<f64, _>(StandardNormal);

    let d = true_p - cam.position;
    let dist = d.norm();
    if dist < 1e-9 {
        return None;
    }
    let b = d / dist;
    if let Some((boresight, half_angle)) = cam.fov {
        if angle_between(&boresight, &b) > half_angle {
            return None;
        }
    }
    if miss_draw < cam.p_miss {
        return None;
    }
    let (e1, e2) = perpendicular_basis(&b);
    let axis = e1 * phi.cos() + e2 * phi.sin();
    // Rodrigues rotation; the axis is perpendicular to b.
    let rotated = b * theta.cos() + axis.cross(&b) * theta.sin();
    Some(BearingDetection {
        camera_id: cam.id,
        stamp,
        bearing: rotated.normalize(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn centered(center: Vector3<f64>, half_extent: Vector3<f64>) -> Self {
        Self {
            min: center - half_extent,
            max: center + half_extent,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub pos: Vec<Vector3<f64>>,
    pub vel: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Effective sample size `1 / Σ w²`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfParams {
    /// Seconds between filter ticks.
    pub dt: f64,
    /// Std of the white acceleration jitter driving the constant-velocity model.
    pub accel_sigma: f64,
}

pub fn pf_init<R: Rng + ?Sized>(
    region: &Aabb,
    n: usize,
    vel_sigma: f64,
    rng: &mut R,
) -> ParticleSet {
    let mut pos = Vec::with_capacity(n);
    let mut vel = Vec::with_capacity(n);
    for _ in 0..n {
        let u = Vector3::from_fn(|_, _| rng.random::<f64>());
        pos.push(region.min + (region.max - region.min).component_mul(&u));
        vel.push(Vector3::from_fn(|_, _| {
            vel_sigma * rng.sample::<f64, _>(StandardNormal)
        }));
    }
    ParticleSet {
        pos,
        vel,
        weights: vec![1.0 / n as f64; n],
    }
}

/// Indices drawn by systematic resampling with offset `u0 ∈ [0, 1/N)`.
pub fn systematic_resample(weights: &[f64], u0: f64) -> Vec<usize> {
    let n = weights.len();
    let step = 1.0 / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for k in 0..n {
        let target = u0 + k as f64 * step;
        while target > cum && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackEstimate {
    pub stamp: f64,
    pub p_mean: Vector3<f64>,
    pub p_cov: Matrix3<f64>,
    pub n_detections_used: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepInfo {
    pub resampled: bool,
    /// Every weight underflowed and the set was reset to uniform weights.
    pub diverged: bool,
}

fn weighted_moments(ps: &ParticleSet) -> (Vector3<f64>, Matrix3<f64>) {
    let mean = ps
        .pos
        .iter()
        .zip(&ps.weights)
        .fold(Vector3::zeros(), |acc, (p, w)| acc + p * *w);
    let cov = ps
        .pos
        .iter()
        .zip(&ps.weights)
        .fold(Matrix3::zeros(), |acc, (p, w)| {
            let d = p - mean;
            acc + d * d.transpose() * *w
        });
    (mean, (cov + cov.transpose()) * 0.5)
}

/// Propagate, weight by bearing likelihood, normalize, resample when the
/// effective sample size drops under N/2, and summarize.
pub fn pf_step<R: Rng + ?Sized>(
    ps: &mut ParticleSet,
    stamp: f64,
    detections: &[BearingDetection],
    cams: &[CameraModel],
    params: &PfParams,
    rng: &mut R,
) -> (TrackEstimate, StepInfo) {
    let dt = params.dt;
    for (p, v) in ps.pos.iter_mut().zip(ps.vel.iter_mut()) {
        let a = Vector3::from_fn(|_, _| params.accel_sigma * rng.sample::<f64, _>(StandardNormal));
        *p += *v * dt + a * (0.5 * dt * dt);
        *v += a * dt;
    }

    let mut info = StepInfo::default();
    let used: Vec<(&BearingDetection, &CameraModel)> = detections
        .iter()
        .filter_map(|d| cams.iter().find(|c| c.id == d.camera_id).map(|c| (d, c)))
        .collect();

    if !used.is_empty() {
        let log_w: Vec<f64> = ps
            .pos
            .iter()
            .zip(&ps.weights)
            .map(|(p, w)| {
                let ll: f64 = used
                    .iter()
                    .map(|(d, c)| {
                        let pred = p - c.position;
                        let n = pred.norm();
                        if n < 1e-12 {
                            return f64::NEG_INFINITY;
                        }
                        let theta = angle_between(&(pred / n), &d.bearing);
                        -theta * theta / (2.0 * c.bearing_sigma * c.bearing_sigma)
                    })
                    .sum();
                w.ln() + ll
            })
            .collect();
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        if max.is_finite() {
            for (w, lw) in ps.weights.iter_mut().zip(&log_w) {
                *w = (lw - max).exp();
                sum += *w;
            }
        }
        if !(sum > 0.0 && sum.is_finite()) {
            info.diverged = true;
            let n = ps.len() as f64;
            ps.weights.iter_mut().for_each(|w| *w = 1.0 / n);
        } else {
            ps.weights.iter_mut().for_each(|w| *w /= sum);
        }

        if ps.ess() < ps.len() as f64 / 2.0 {
            let u0 = rng.random::<f64>() / ps.len() as f64;
            let idx = systematic_resample(&ps.weights, u0);
            ps.pos = idx.iter().map(|&i| ps.pos[i]).collect();
            ps.vel = idx.iter().map(|&i| ps.vel[i]).collect();
            let n = ps.len() as f64;
            ps.weights.iter_mut().for_each(|w| *w = 1.0 / n);
            info.resampled = true;
        }
    }

    let (p_mean, p_cov) = weighted_moments(ps);
    (
        TrackEstimate {
            stamp,
            p_mean,
            p_cov,
            n_detections_used: used.len(),
        },
        info,
    )
}

/// How the track covariance is turned into a reported measurement covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackNoiseModel {
    pub inflation: f64,
    /// Per-axis floor on the reported standard deviation (m).
    pub sigma_min: f64,
}

impl Default for TrackNoiseModel {
    fn default() -> Self {
        Self {
            inflation: 2.0,
            sigma_min: 0.1,
        }
    }
}

/// Inflated covariance with its eigenvalues floored at `sigma_min²`.
pub fn reported_covariance(p_cov: &Matrix3<f64>, model: &TrackNoiseModel) -> Matrix3<f64> {
    let scaled = p_cov * model.inflation;
    let eig = ((scaled + scaled.transpose()) * 0.5).symmetric_eigen();
    let floor = model.sigma_min * model.sigma_min;
    let vals = eig.eigenvalues.map(|l| l.max(floor));
    let out = eig.eigenvectors * Matrix3::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (out + out.transpose()) * 0.5
}

pub fn publish_track<R: Rng + ?Sized>(
    est: &TrackEstimate,
    seq: u64,
    budget: &LatencyBudget,
    noise: &TrackNoiseModel,
    latency_rng: &mut R,
) -> Measurement {
    Measurement {
        sensor_id: CAMERA_TRACK_SENSOR_ID,
        seq,
        stamp: est.stamp,
        deliver_time: est.stamp + sample_latency(budget, latency_rng),
        value: est.p_mean,
        cov: reported_covariance(&est.p_cov, noise),
        provenance: Provenance::Genuine,
    }
}
