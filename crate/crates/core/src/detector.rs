//! Offboard attack detector: lifts every measurement that lands in a sliding
//! window onto the state at the window start, then tests the stacked data
//! for consistency through its parity (left-null-space) residual.
//!
//! For an entry with observation `H_i` stamped `k_i` steps into the window,
//!
//! ```text
//! z_i = H_i A^{k_i} x_0 + H_i Σ_{l<k_i} A^{k_i-1-l} (B u_l + w_l) + v_i
//! ```
//!
//! so with known inputs the compensated stack `z̃ = O x_0 + e` has an exactly
//! known noise covariance `Σ`. Measurements from sensors running at
//! different rates and latencies only differ in their `k_i`.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::chi2::chi2_threshold;
use crate::error::{Result, SimError};
use crate::sensor::Measurement;
use crate::sim::DynamicsModel;

/// Plant matrices in dynamic form so the detector works for any state size.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl From<&DynamicsModel> for LiftModel {
    fn from(m: &DynamicsModel) -> Self {
        Self {
            a: DMatrix::from_column_slice(6, 6, m.a.as_slice()),
            b: DMatrix::from_column_slice(6, 3, m.b.as_slice()),
            q: DMatrix::from_column_slice(6, 6, m.q.as_slice()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftEntry {
    /// Step index inside the window, `0 <= k < n_steps`.
    pub k: usize,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub z: DVector<f64>,
    pub sensor_id: u32,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftWindow {
    pub n_steps: usize,
    pub t0: f64,
    pub entries: Vec<LiftEntry>,
    /// Known inputs `u_0 .. u_{n_steps-1}`.
    pub inputs: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedSystem {
    pub o: DMatrix<f64>,
    pub z_tilde: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub rank: usize,
    pub dof: usize,
}

/// Numerical rank from singular values above `1e-10 * σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let top = sv.max();
    if top <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-10 * top).count()
}

pub fn build_lifted_system(w: &LiftWindow, model: &LiftModel) -> Result<LiftedSystem> {
    let n = model.a.nrows();
    if w.inputs.len() < w.n_steps {
        return Err(SimError::Config(format!(
            "lift window needs {} inputs, got {}",
            w.n_steps,
            w.inputs.len()
        )));
    }
    let mut entries: Vec<&LiftEntry> = w.entries.iter().collect();
    if let Some(e) = entries.iter().find(|e| e.k >= w.n_steps) {
        return Err(SimError::Config(format!(
            "lift entry step {} outside window of {}",
            e.k, w.n_steps
        )));
    }
    entries.sort_by_key(|e| (e.k, e.sensor_id, e.seq));

    let k_max = entries.iter().map(|e| e.k).max().unwrap_or(0);
    // Powers A^k, input response s_k and accumulated process noise P_k,
    // all indexed by step within the window.
    let mut powers = Vec::with_capacity(k_max + 1);
    let mut forced = Vec::with_capacity(k_max + 1);
    let mut noise = Vec::with_capacity(k_max + 1);
    powers.push(DMatrix::identity(n, n));
    forced.push(DVector::zeros(n));
    noise.push(DMatrix::zeros(n, n));
    for k in 0..k_max {
        powers.push(&model.a * &powers[k]);
        forced.push(&model.a * &forced[k] + &model.b * &w.inputs[k]);
        let p = &model.a * &noise[k] * model.a.transpose() + &model.q;
        noise.push((&p + p.transpose()) * 0.5);
    }

    let offsets: Vec<usize> = entries
        .iter()
        .scan(0, |acc, e| {
            let start = *acc;
            *acc += e.h.nrows();
            Some(start)
        })
        .collect();
    let m_total: usize = entries.iter().map(|e| e.h.nrows()).sum();

    let mut o = DMatrix::zeros(m_total, n);
    let mut z_tilde = DVector::zeros(m_total);
    let mut sigma = DMatrix::zeros(m_total, m_total);
    for (i, e) in entries.iter().enumerate() {
        let rows = e.h.nrows();
        o.view_mut((offsets[i], 0), (rows, n))
            .copy_from(&(&e.h * &powers[e.k]));
        z_tilde
            .rows_mut(offsets[i], rows)
            .copy_from(&(&e.z - &e.h * &forced[e.k]));
        for (j, f) in entries.iter().enumerate().skip(i) {
            // Entries are sorted, so k_i <= k_j and the cross covariance of
            // the accumulated noise is P_{k_i} (A^{k_j - k_i})ᵀ.
            let mut block = &e.h * &noise[e.k] * powers[f.k - e.k].transpose() * f.h.transpose();
            if i == j {
                block += &e.r;
            }
            sigma
                .view_mut((offsets[i], offsets[j]), (rows, f.h.nrows()))
                .copy_from(&block);
            if i != j {
                sigma
                    .view_mut((offsets[j], offsets[i]), (f.h.nrows(), rows))
                    .copy_from(&block.transpose());
            }
        }
    }
    let rank = numerical_rank(&o);
    Ok(LiftedSystem {
        o,
        z_tilde,
        sigma,
        rank,
        dof: m_total - rank,
    })
}

struct Whitened {
    o_w: DMatrix<f64>,
    z_w: DVector<f64>,
    /// Orthonormal basis of range(O_w).
    range: DMatrix<f64>,
}

fn whiten(ls: &LiftedSystem) -> Result<Whitened> {
    let eig = ls.sigma.clone().symmetric_eigen();
    let top = eig.eigenvalues.max();
    let floor = 1e-14 * top;
    if top.is_nan() || top <= 0.0 || eig.eigenvalues.iter().any(|&l| l.is_nan() || l <= floor) {
        return Err(SimError::StackedCovarianceNotPd);
    }
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let w = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
    let o_w = &w * &ls.o;
    let z_w = &w * &ls.z_tilde;
    let svd = o_w.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let top_sv = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| top_sv > 0.0 && svd.singular_values[i] > 1e-10 * top_sv)
        .collect();
    let range = DMatrix::from_fn(u.nrows(), keep.len(), |r, c| u[(r, keep[c])]);
    Ok(Whitened { o_w, z_w, range })
}

/// Orthonormal basis `W` of the left null space of the whitened operator.
pub fn parity_basis(ls: &LiftedSystem) -> Result<DMatrix<f64>> {
    let wh = whiten(ls)?;
    let m = wh.o_w.nrows();
    let proj = DMatrix::identity(m, m) - &wh.range * wh.range.transpose();
    let eig = proj.symmetric_eigen();
    let cols: Vec<usize> = (0..m).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    Ok(DMatrix::from_fn(m, cols.len(), |r, c| {
        eig.eigenvectors[(r, cols[c])]
    }))
}

/// Parity residual energy `‖Wᵀ Σ^{-1/2} z̃‖²` and its degrees of freedom.
///
/// Computed as the squared norm of the projection of the whitened data onto
/// the orthogonal complement of range(O_w), which equals `‖Wᵀ z_w‖²` for
/// any orthonormal parity basis `W`.
pub fn parity_residual(ls: &LiftedSystem) -> Result<(f64, usize)> {
    if ls.dof == 0 {
        return Err(SimError::Config(
            "lifted system has no redundancy (dof = 0)".into(),
        ));
    }
    let wh = whiten(ls)?;
    let coeffs = wh.range.transpose() * &wh.z_w;
    let parity = &wh.z_w - &wh.range * coeffs;
    Ok((parity.norm_squared(), ls.dof))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OffboardDecision {
    /// End of the evaluated window.
    pub t: f64,
    pub q_off: f64,
    pub dof: usize,
    pub gamma_off: f64,
    pub exceed: bool,
    /// Persistence-gated and latched.
    pub flag: bool,
}

/// Persistence-gated, latching chi-squared decision rule.
#[derive(Debug, Clone)]
pub struct DecisionRule {
    alpha: f64,
    persistence: usize,
    streak: usize,
    latched: bool,
    thresholds: HashMap<usize, f64>,
}

impl DecisionRule {
    pub fn new(alpha: f64, persistence: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(SimError::InvalidAlpha(alpha));
        }
        if persistence == 0 {
            return Err(SimError::Config("detector.persistence must be >= 1".into()));
        }
        Ok(Self {
            alpha,
            persistence,
            streak: 0,
            latched: false,
            thresholds: HashMap::new(),
        })
    }

    pub fn threshold(&mut self, dof: usize) -> Result<f64> {
        if let Some(&g) = self.thresholds.get(&dof) {
            return Ok(g);
        }
        let g = chi2_threshold(dof, self.alpha)?;
        self.thresholds.insert(dof, g);
        Ok(g)
    }

    pub fn decide(&mut self, t: f64, q_off: f64, dof: usize) -> Result<OffboardDecision> {
        let gamma_off = self.threshold(dof)?;
        let exceed = q_off > gamma_off;
        self.streak = if exceed { self.streak + 1 } else { 0 };
        if self.streak >= self.persistence {
            self.latched = true;
        }
        Ok(OffboardDecision {
            t,
            q_off,
            dof,
            gamma_off,
            exceed,
            flag: self.latched,
        })
    }

    pub fn latched(&self) -> bool {
        self.latched
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub window_steps: usize,
    pub slide_steps: usize,
    pub alpha: f64,
    pub persistence: usize,
}

#[derive(Debug, Clone)]
struct Logged {
    step: i64,
    deliver_time: f64,
    m: Measurement,
}

/// Collects delivered measurements and commanded inputs and evaluates
/// sliding windows as they close.
pub struct OffboardDetector {
    cfg: DetectorConfig,
    model: LiftModel,
    dt: f64,
    rule: DecisionRule,
    h: DMatrix<f64>,
    inputs: BTreeMap<i64, DVector<f64>>,
    log: Vec<Logged>,
    skipped: u64,
}

impl OffboardDetector {
    pub fn new(cfg: DetectorConfig, model: &DynamicsModel) -> Result<Self> {
        if cfg.window_steps == 0 || cfg.slide_steps == 0 {
            return Err(SimError::Config(
                "detector window and slide must be >= 1 step".into(),
            ));
        }
        let mut h = DMatrix::zeros(3, 6);
        h.view_mut((0, 0), (3, 3)).fill_with_identity();
        Ok(Self {
            cfg,
            model: LiftModel::from(model),
            dt: model.dt,
            rule: DecisionRule::new(cfg.alpha, cfg.persistence)?,
            h,
            inputs: BTreeMap::new(),
            log: Vec::new(),
            skipped: 0,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn skipped_windows(&self) -> u64 {
        self.skipped
    }

    pub fn flagged(&self) -> bool {
        self.rule.latched()
    }

    pub fn record_input(&mut self, step: i64, u: &nalgebra::Vector3<f64>) {
        self.inputs
            .insert(step, DVector::from_column_slice(u.as_slice()));
    }

    /// Called when a position measurement is delivered.
    pub fn record_measurement(&mut self, m: &Measurement) {
        self.log.push(Logged {
            step: (m.stamp / self.dt).round() as i64,
            deliver_time: m.deliver_time,
            m: *m,
        });
    }

    /// Assembles the window starting at `start_step` from what has been
    /// delivered by `now`.
    pub fn window(&self, start_step: i64, now: f64) -> LiftWindow {
        let n = self.cfg.window_steps;
        let end = start_step + n as i64;
        let entries = self
            .log
            .iter()
            .filter(|l| l.step >= start_step && l.step < end && l.deliver_time <= now)
            .map(|l| LiftEntry {
                k: (l.step - start_step) as usize,
                h: self.h.clone(),
                r: DMatrix::from_column_slice(3, 3, l.m.cov.as_slice()),
                z: DVector::from_column_slice(l.m.value.as_slice()),
                sensor_id: l.m.sensor_id,
                seq: l.m.seq,
            })
            .collect();
        let inputs = (start_step..end)
            .map(|s| {
                self.inputs
                    .get(&s)
                    .cloned()
                    .unwrap_or_else(|| DVector::zeros(3))
            })
            .collect();
        LiftWindow {
            n_steps: n,
            t0: start_step as f64 * self.dt,
            entries,
            inputs,
        }
    }

    /// Evaluates one window; `None` when it has no analytic redundancy.
    pub fn evaluate(&mut self, start_step: i64, now: f64) -> Result<Option<OffboardDecision>> {
        let w = self.window(start_step, now);
        let ls = build_lifted_system(&w, &self.model)?;
        // Older data can never enter a later window.
        let next_start = start_step + self.cfg.slide_steps as i64;
        self.log.retain(|l| l.step >= next_start);
        self.inputs = self.inputs.split_off(&next_start);
        if ls.dof == 0 || w.entries.is_empty() {
            self.skipped += 1;
            return Ok(None);
        }
        let (q, dof) = parity_residual(&ls)?;
        let t_end = (start_step + self.cfg.window_steps as i64) as f64 * self.dt;
        self.rule.decide(t_end, q, dof).map(Some)
    }
}
