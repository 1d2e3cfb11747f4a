//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls the code paths it checks.
#![allow(dead_code)]

use mixsense_core::camera::{detect, pf_init, pf_step, Aabb, CameraModel, PfParams};
use mixsense_core::detector::{
    build_lifted_system, parity_residual, LiftEntry, LiftModel, LiftWindow,
};
use mixsense_core::estimator::{EstimatorState, Source};
use mixsense_core::rng::{stream, Stream};
use mixsense_core::sensor::{Measurement, Provenance};
use mixsense_core::sim::{ControlCommand, DynamicsModel, Matrix6};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector6};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub fn normal(rng: &mut ChaCha20Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_mat(rng: &mut ChaCha20Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

pub fn random_spd(rng: &mut ChaCha20Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let g = random_mat(rng, n, n);
    &g * g.transpose() * 0.1 + DMatrix::identity(n, n) * floor
}

pub fn random_stable(rng: &mut ChaCha20Rng, n: usize) -> DMatrix<f64> {
    let a = random_mat(rng, n, n);
    let rho = a
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max);
    a * (0.95 / rho.max(1e-9))
}

/// Random system with `n <= 6` states and at most 30 entries.
pub fn random_instance(rng: &mut ChaCha20Rng) -> (LiftModel, LiftWindow) {
    let n = rng.random_range(2..=6);
    let p = rng.random_range(1..=3);
    let model = LiftModel {
        a: random_stable(rng, n),
        b: random_mat(rng, n, p),
        q: random_spd(rng, n, 1e-3),
    };
    let n_steps = rng.random_range(5..=20);
    let count = rng.random_range(n..=(n + 12)).min(30);
    let entries = (0..count)
        .map(|i| {
            let m = rng.random_range(1..=3);
            LiftEntry {
                k: rng.random_range(0..n_steps),
                h: random_mat(rng, m, n),
                r: random_spd(rng, m, 0.05),
                z: DVector::from_fn(m, |_, _| normal(rng)),
                sensor_id: rng.random_range(1..=3),
                seq: i as u64,
            }
        })
        .collect();
    let inputs = (0..n_steps)
        .map(|_| DVector::from_fn(p, |_, _| normal(rng)))
        .collect();
    (
        model,
        LiftWindow {
            n_steps,
            t0: 0.0,
            entries,
            inputs,
        },
    )
}

pub fn sorted_entries(w: &LiftWindow) -> Vec<LiftEntry> {
    let mut e = w.entries.clone();
    e.sort_by_key(|e| (e.k, e.sensor_id, e.seq));
    e
}

/// `min_x (z̃ - O x)ᵀ Σ⁻¹ (z̃ - O x)` from the normal equations, with a
/// few rounds of iterative refinement so ill-conditioned O (the normal
/// matrix squares its condition number) still yields an accurate minimum.
pub fn wls_minimum(o: &DMatrix<f64>, z: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let chol = sigma.clone().cholesky().expect("Σ positive definite");
    let si_o = chol.solve(o);
    let normal_m = o.transpose() * &si_o;
    let solve = |rhs: &DVector<f64>| match normal_m.clone().cholesky() {
        Some(c) => c.solve(rhs),
        None => {
            normal_m
                .clone()
                .pseudo_inverse(1e-14 * normal_m.norm())
                .unwrap()
                * rhs
        }
    };
    let mut x = solve(&(si_o.transpose() * z));
    for _ in 0..8 {
        let r = z - o * &x;
        x += solve(&(si_o.transpose() * r));
    }
    let r = z - o * x;
    (r.transpose() * chol.solve(&r))[0]
}

/// Condition number of `Σ^{-1/2} O`.
pub fn whitened_condition(o: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    let eig = sigma.clone().symmetric_eigen();
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let w = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
    let sv = (w * o).singular_values();
    sv.max() / sv.min()
}

/// Stacks whose whitened operator is this ill-conditioned have no
/// well-defined numerical rank in double precision; they are skipped.
pub const MAX_CONDITION: f64 = 1e6;

pub struct ParityCheck {
    pub checked: usize,
    pub skipped_ill_conditioned: usize,
    pub worst_gap: f64,
}

/// Largest |parity - WLS| relative gap over `count` random instances with
/// redundancy and a well-posed rank.
pub fn parity_vs_wls(seed: u64, count: usize) -> ParityCheck {
    let mut rng = stream(seed, Stream::Init);
    let mut out = ParityCheck {
        checked: 0,
        skipped_ill_conditioned: 0,
        worst_gap: 0.0,
    };
    while out.checked < count {
        let (model, w) = random_instance(&mut rng);
        let ls = build_lifted_system(&w, &model).unwrap();
        if ls.dof == 0 {
            continue;
        }
        if whitened_condition(&ls.o, &ls.sigma) > MAX_CONDITION {
            out.skipped_ill_conditioned += 1;
            continue;
        }
        let (q, _) = parity_residual(&ls).unwrap();
        let wls = wls_minimum(&ls.o, &ls.z_tilde, &ls.sigma);
        out.worst_gap = out.worst_gap.max((q - wls).abs() / wls.abs().max(1.0));
        out.checked += 1;
    }
    out
}

/// Relative Frobenius error between the lifted Σ and the empirical
/// covariance of stacked noise simulated step by step.
pub fn sigma_monte_carlo_error(seed: u64, draws: usize) -> f64 {
    let mut rng = stream(seed, Stream::Init);
    let (model, w) = random_instance(&mut rng);
    let ls = build_lifted_system(&w, &model).unwrap();
    let entries = sorted_entries(&w);
    let n = model.a.nrows();
    let q_chol = model.q.clone().cholesky().unwrap().l();
    let r_chol: Vec<DMatrix<f64>> = entries
        .iter()
        .map(|e| e.r.clone().cholesky().unwrap().l())
        .collect();
    let m = ls.o.nrows();
    let mut acc = DMatrix::<f64>::zeros(m, m);
    let mut mc = stream(seed, Stream::Dynamics);
    for _ in 0..draws {
        let mut states = vec![DVector::zeros(n)];
        for k in 0..w.n_steps {
            let wk = &q_chol * DVector::from_fn(n, |_, _| normal(&mut mc));
            states.push(&model.a * &states[k] + wk);
        }
        let mut e = DVector::zeros(m);
        let mut row = 0;
        for (i, en) in entries.iter().enumerate() {
            let v = &r_chol[i] * DVector::from_fn(en.h.nrows(), |_, _| normal(&mut mc));
            e.rows_mut(row, en.h.nrows())
                .copy_from(&(&en.h * &states[en.k] + v));
            row += en.h.nrows();
        }
        acc += &e * e.transpose();
    }
    acc /= draws as f64;
    (&acc - &ls.sigma).norm() / ls.sigma.norm()
}

/// A measurement schedule for the out-of-sequence fusion check.
pub struct Schedule {
    pub model: DynamicsModel,
    pub x0: Vector6<f64>,
    pub p0: Matrix6,
    pub inputs: Vec<Vector3<f64>>,
    pub measurements: Vec<(usize, Measurement)>,
}

/// Random stamps, values, covariances and delivery delays on the grid.
pub fn random_schedule(seed: u64, steps: usize, max_delay_steps: usize) -> Schedule {
    let mut rng = stream(seed, Stream::Init);
    let model = DynamicsModel::double_integrator(0.01, 0.05).unwrap();
    let x0 = Vector6::from_fn(|_, _| normal(&mut rng));
    let p0 = Matrix6::identity() * 0.5;
    let inputs = (0..steps)
        .map(|_| Vector3::from_fn(|_, _| normal(&mut rng)))
        .collect();
    let mut measurements = Vec::new();
    let mut seqs = [0u64; 3];
    for k in 0..steps - max_delay_steps - 1 {
        for (sensor, seq) in seqs.iter_mut().enumerate() {
            if rng.random::<f64>() < 0.15 {
                let l = Matrix3::from_fn(|i, j| if i >= j { 0.3 * normal(&mut rng) } else { 0.0 });
                let cov = l * l.transpose() + Matrix3::identity() * 0.05;
                let delay = rng.random_range(0..=max_delay_steps);
                let jitter = rng.random::<f64>() * 0.009;
                let deliver_step = k + delay;
                let m = Measurement {
                    sensor_id: sensor as u32 + 1,
                    seq: *seq,
                    stamp: k as f64 * 0.01,
                    deliver_time: deliver_step as f64 * 0.01 + jitter,
                    value: Vector3::from_fn(|_, _| 3.0 * normal(&mut rng)),
                    cov,
                    provenance: Provenance::Genuine,
                };
                *seq += 1;
                measurements.push((deliver_step, m));
            }
        }
    }
    Schedule {
        model,
        x0,
        p0,
        inputs,
        measurements,
    }
}

/// Feeds the schedule in delivery order through the rewind-and-replay
/// estimator. Ties in delivery time are broken by `order`.
pub fn run_oosm(s: &Schedule, shuffle_seed: Option<u64>) -> (Vector6<f64>, Matrix6) {
    let mut est =
        EstimatorState::new(s.model.clone(), 0.0, s.x0, s.p0, s.inputs.len() + 1).unwrap();
    let mut pending: Vec<(usize, Measurement)> = s.measurements.clone();
    if let Some(seed) = shuffle_seed {
        // Random delivery order among measurements due by the same step.
        let mut rng = stream(seed, Stream::GnssLatency);
        let keys: Vec<f64> = pending.iter().map(|_| rng.random()).collect();
        let mut idx: Vec<usize> = (0..pending.len()).collect();
        idx.sort_by(|&a, &b| {
            pending[a]
                .0
                .cmp(&pending[b].0)
                .then(keys[a].total_cmp(&keys[b]))
        });
        pending = idx.into_iter().map(|i| pending[i]).collect();
    } else {
        pending.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then(a.1.deliver_time.total_cmp(&b.1.deliver_time))
        });
    }
    let mut next = 0;
    for (k, u) in s.inputs.iter().enumerate() {
        est.predict(&ControlCommand {
            u: *u,
            a_max: f64::INFINITY,
        })
        .unwrap();
        while next < pending.len() && pending[next].0 <= k {
            let m = pending[next].1;
            est.fuse(&m, Source::Onboard, (k as f64 + 0.5) * 0.01, f64::INFINITY)
                .unwrap();
            next += 1;
        }
    }
    assert_eq!(next, pending.len());
    (est.x_hat(), est.covariance())
}

/// Plain time-ordered Kalman filter over the same data: measurements at a
/// step applied in (sensor, seq) order with the standard update, then the
/// step's input propagated.
pub fn batch_filter(s: &Schedule) -> (Vector6<f64>, Matrix6) {
    let h = {
        let mut h = nalgebra::SMatrix::<f64, 3, 6>::zeros();
        h.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
        h
    };
    let mut by_step: Vec<Vec<Measurement>> = vec![Vec::new(); s.inputs.len() + 1];
    for (_, m) in &s.measurements {
        by_step[(m.stamp / 0.01).round() as usize].push(*m);
    }
    let (mut x, mut p) = (s.x0, s.p0);
    for (k, ms) in by_step.iter_mut().enumerate() {
        ms.sort_by_key(|m| (m.sensor_id, m.seq));
        for m in ms.iter() {
            let s_mat = h * p * h.transpose() + m.cov;
            let k_gain = p * h.transpose() * s_mat.try_inverse().unwrap();
            x += k_gain * (m.value - h * x);
            p = (Matrix6::identity() - k_gain * h) * p;
            p = (p + p.transpose()) * 0.5;
        }
        if k < s.inputs.len() {
            x = s.model.a * x + s.model.b * s.inputs[k];
            p = s.model.a * p * s.model.a.transpose() + s.model.q;
        }
    }
    (x, p)
}

/// Least-squares intersection of bearing rays `c_i + t d_i`.
pub fn triangulate(origins: &[Vector3<f64>], dirs: &[Vector3<f64>]) -> Vector3<f64> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (c, d) in origins.iter().zip(dirs) {
        let d = d.normalize();
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * c;
    }
    a.try_inverse().unwrap() * b
}

/// Noise-free, miss-free two-camera tracking of a static target; returns
/// the track mean after `ticks` updates and the triangulated point.
pub fn pf_two_camera_run(particles: usize, ticks: usize) -> (Vector3<f64>, Vector3<f64>) {
    let target = Vector3::new(5.0, 5.0, 0.0);
    let filter_cams: Vec<CameraModel> = [Vector3::zeros(), Vector3::new(10.0, 0.0, 0.0)]
        .iter()
        .enumerate()
        .map(|(i, &position)| CameraModel {
            id: i as u32 + 1,
            position,
            bearing_sigma: 0.01,
            rate_hz: 5.0,
            p_miss: 0.0,
            fov: None,
        })
        .collect();
    let sensing: Vec<CameraModel> = filter_cams
        .iter()
        .map(|c| CameraModel {
            bearing_sigma: 0.0,
            ..c.clone()
        })
        .collect();
    let mut det_rng = stream(9, Stream::Camera(1));
    let mut pf_rng = stream(9, Stream::ParticleFilter);
    let region = Aabb::centered(Vector3::new(4.0, 6.0, 0.5), Vector3::new(3.0, 3.0, 2.0));
    let mut ps = pf_init(&region, particles, 0.0, &mut pf_rng);
    let params = PfParams {
        dt: 0.2,
        accel_sigma: 0.1,
    };
    let mut mean = Vector3::zeros();
    let mut bearings = Vec::new();
    for tick in 0..ticks {
        let t = tick as f64 * 0.2;
        let dets: Vec<_> = sensing
            .iter()
            .filter_map(|c| detect(c, t, &target, &mut det_rng))
            .collect();
        bearings = dets.iter().map(|d| d.bearing).collect();
        mean = pf_step(&mut ps, t, &dets, &filter_cams, &params, &mut pf_rng)
            .0
            .p_mean;
    }
    let origins: Vec<Vector3<f64>> = filter_cams.iter().map(|c| c.position).collect();
    (mean, triangulate(&origins, &bearings))
}
