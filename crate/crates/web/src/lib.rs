//! Browser bindings: latency sampling, a closed-loop scenario run reduced to
//! plot series, and chi-squared thresholds.
//!
//! Every export takes and returns plain strings or numbers; the page parses
//! the JSON. The `*_json` functions are ordinary Rust so they run in native
//! tests too.

use mixsense_core::chi2;
use mixsense_core::config::ScenarioConfig;
use mixsense_core::report::latency_report;
use mixsense_core::rng::{stream, Stream};
use mixsense_core::scenario::{run_scenario, RunMetrics};
use mixsense_core::sensor::sample_latency;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const HIST_BINS: usize = 40;
/// Truth rows kept per second in the plotted series.
const PLOT_RATE_HZ: f64 = 10.0;

#[derive(Serialize)]
struct LatencyRow {
    component: String,
    mean_ms: f64,
    std_ms: f64,
    median_ms: f64,
}

#[derive(Serialize)]
struct LatencyView {
    rows: Vec<LatencyRow>,
    bin_lo_ms: f64,
    bin_width_ms: f64,
    counts: Vec<u32>,
}

#[derive(Serialize, Default)]
struct Series {
    t: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
    ref_x: Vec<f64>,
    ref_y: Vec<f64>,
    deviation: Vec<f64>,
    onboard_t: Vec<f64>,
    onboard_q: Vec<f64>,
    onboard_gamma: f64,
    detector_t: Vec<f64>,
    detector_ratio: Vec<f64>,
    detector_flag: Vec<bool>,
}

#[derive(Serialize)]
struct RunView {
    metrics: RunMetrics,
    series: Series,
}

/// Samples the GNSS latency budget and bins the end-to-end delay.
pub fn latency_json(samples: usize, seed: u64) -> Result<String, String> {
    let budget = ScenarioConfig::default().gnss.latency;
    let report = latency_report(&budget, samples, &mut stream(seed, Stream::GnssLatency))
        .map_err(|e| e.to_string())?;
    let mut rng = stream(seed ^ 0x5eed, Stream::GnssLatency);
    let totals: Vec<f64> = (0..samples)
        .map(|_| 1e3 * sample_latency(&budget, &mut rng))
        .collect();
    let lo = totals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = totals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / HIST_BINS as f64).max(1e-9);
    let mut counts = vec![0u32; HIST_BINS];
    for v in &totals {
        let i = (((v - lo) / width) as usize).min(HIST_BINS - 1);
        counts[i] += 1;
    }
    let rows = report
        .rows
        .iter()
        .map(|(name, s)| LatencyRow {
            component: name.clone(),
            mean_ms: 1e3 * s.mean,
            std_ms: 1e3 * s.std,
            median_ms: 1e3 * s.median,
        })
        .collect();
    let view = LatencyView {
        rows,
        bin_lo_ms: lo,
        bin_width_ms: width,
        counts,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

/// Runs one scenario from a (possibly partial) JSON config and returns the
/// metrics plus decimated plot series.
pub fn run_json(config: &str) -> Result<String, String> {
    let cfg = ScenarioConfig::from_json(config).map_err(|e| e.to_string())?;
    let out = run_scenario(&cfg, None).map_err(|e| e.to_string())?;
    let stride = ((1.0 / (PLOT_RATE_HZ * cfg.dynamics.dt_s)).round() as usize).max(1);
    let mut s = Series::default();
    for row in out.trace.truth.iter().step_by(stride) {
        s.t.push(row.t);
        s.x.push(row.p.x);
        s.y.push(row.p.y);
        s.ref_x.push(row.p_ref.x);
        s.ref_y.push(row.p_ref.y);
        s.deviation.push((row.p - row.p_ref).norm());
    }
    for r in &out.trace.residuals {
        s.onboard_t.push(r.t);
        s.onboard_q.push(r.q);
        s.onboard_gamma = r.gamma;
    }
    for d in &out.trace.detector {
        s.detector_t.push(d.t);
        s.detector_ratio.push(d.q_off / d.gamma_off);
        s.detector_flag.push(d.flag);
    }
    let view = RunView {
        metrics: out.metrics,
        series: s,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

/// Default scenario as pretty JSON, used to seed the page's editor.
pub fn default_config_json() -> String {
    ScenarioConfig::default().to_json()
}

#[wasm_bindgen]
pub fn latency(samples: usize, seed: u64) -> Result<String, JsValue> {
    latency_json(samples, seed).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn run(config: &str) -> Result<String, JsValue> {
    run_json(config).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn default_config() -> String {
    default_config_json()
}

#[wasm_bindgen]
pub fn chi2_threshold(dof: usize, alpha: f64) -> Result<f64, JsValue> {
    chi2::chi2_threshold(dof, alpha).map_err(|e| JsValue::from_str(&e.to_string()))
}
