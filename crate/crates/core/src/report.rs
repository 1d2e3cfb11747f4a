//! Latency report and trace files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Result, SimError};
use crate::scenario::{RunMetrics, Trace};
use crate::sensor::{latency_stats, sample_latency_parts, LatencyBudget, LatencyStats};

pub const MIN_LATENCY_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    /// One row per component, then `end_to_end`. Values in seconds.
    pub rows: Vec<(String, LatencyStats)>,
}

impl LatencyReport {
    pub fn end_to_end(&self) -> &LatencyStats {
        &self.rows.last().expect("end_to_end row").1
    }

    /// CSV in milliseconds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,mean_ms,std_ms,q1_ms,median_ms,q3_ms\n");
        for (name, s) in &self.rows {
            let ms = |v: f64| v * 1e3;
            writeln!(
                out,
                "{name},{},{},{},{},{}",
                ms(s.mean),
                ms(s.std),
                ms(s.q1),
                ms(s.median),
                ms(s.q3)
            )
            .expect("write to string");
        }
        out
    }
}

/// Samples the budget `n_samples` times and summarizes each stage and the
/// end-to-end delay (pad included).
pub fn latency_report<R: Rng + ?Sized>(
    budget: &LatencyBudget,
    n_samples: usize,
    rng: &mut R,
) -> Result<LatencyReport> {
    if n_samples < MIN_LATENCY_SAMPLES {
        return Err(SimError::InsufficientSamples {
            needed: MIN_LATENCY_SAMPLES,
            got: n_samples,
        });
    }
    budget.validate("latency")?;
    let k = budget.components.len();
    let mut per_component = vec![Vec::with_capacity(n_samples); k];
    let mut total = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let parts = sample_latency_parts(budget, rng);
        total.push(budget.pad_s + parts.iter().sum::<f64>());
        for (acc, p) in per_component.iter_mut().zip(parts) {
            acc.push(p);
        }
    }
    let mut rows = Vec::with_capacity(k + 1);
    for (c, samples) in budget.components.iter().zip(&per_component) {
        rows.push((c.name.clone(), latency_stats(samples)?));
    }
    rows.push(("end_to_end".to_string(), latency_stats(&total)?));
    Ok(LatencyReport { rows })
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| SimError::io(path, e))
}

pub const TRUTH_HEADER: &str = "t,px,py,pz,vx,vy,vz,prx,pry,prz";
pub const GNSS_HEADER: &str = "stamp,deliver,zx,zy,zz,provenance";
pub const RESIDUALS_HEADER: &str = "t,sensor_id,nu_x,nu_y,nu_z,q,gamma,flagged,mode";
pub const DETECTOR_HEADER: &str = "t_window_end,q_off,dof,gamma_off,exceed,flag";
pub const TRACK_HEADER: &str = "t,px,py,pz,cov_trace,n_detections_used";

fn csv<T>(header: &str, rows: &[T], mut line: impl FnMut(&mut String, &T)) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(header);
    out.push('\n');
    for r in rows {
        line(&mut out, r);
        out.push('\n');
    }
    out
}

/// Writes every trace stream plus `metrics.json` into `out_dir`.
///
/// Floats use Rust's shortest round-trip formatting, so files are
/// byte-identical for identical runs and parse back to the exact values.
pub fn emit_traces(trace: &Trace, metrics: &RunMetrics, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| SimError::io(out_dir, e))?;
    let w =
        |out: &mut String, args: std::fmt::Arguments| out.write_fmt(args).expect("write to string");

    let truth = csv(TRUTH_HEADER, &trace.truth, |o, r| {
        w(
            o,
            format_args!(
                "{},{},{},{},{},{},{},{},{},{}",
                r.t, r.p.x, r.p.y, r.p.z, r.v.x, r.v.y, r.v.z, r.p_ref.x, r.p_ref.y, r.p_ref.z
            ),
        )
    });
    let gnss = csv(GNSS_HEADER, &trace.gnss, |o, m| {
        w(
            o,
            format_args!(
                "{},{},{},{},{},{}",
                m.stamp,
                m.deliver_time,
                m.value.x,
                m.value.y,
                m.value.z,
                m.provenance.as_str()
            ),
        )
    });
    let residuals = csv(RESIDUALS_HEADER, &trace.residuals, |o, r| {
        w(
            o,
            format_args!(
                "{},{},{},{},{},{},{},{},{}",
                r.t,
                r.sensor_id,
                r.nu.x,
                r.nu.y,
                r.nu.z,
                r.q,
                r.gamma,
                r.flagged,
                r.mode.as_str()
            ),
        )
    });
    let detector = csv(DETECTOR_HEADER, &trace.detector, |o, d| {
        w(
            o,
            format_args!(
                "{},{},{},{},{},{}",
                d.t, d.q_off, d.dof, d.gamma_off, d.exceed, d.flag
            ),
        )
    });
    let track = csv(TRACK_HEADER, &trace.track, |o, r| {
        w(
            o,
            format_args!(
                "{},{},{},{},{},{}",
                r.t, r.p.x, r.p.y, r.p.z, r.cov_trace, r.n_detections_used
            ),
        )
    });
    write_file(out_dir, "truth.csv", &truth)?;
    write_file(out_dir, "gnss.csv", &gnss)?;
    write_file(out_dir, "residuals.csv", &residuals)?;
    write_file(out_dir, "detector.csv", &detector)?;
    write_file(out_dir, "track.csv", &track)?;
    let json = serde_json::to_string_pretty(metrics).expect("metrics serialize");
    write_file(out_dir, "metrics.json", &(json + "\n"))
}
