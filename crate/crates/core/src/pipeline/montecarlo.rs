//! Randomized two-target trials and their summary statistics.

use std::f64::consts::PI;
use std::fmt::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_all, scene_saf, Method, PipelineConfig};
use crate::channel::Scenario;
use crate::error::{Error, Result};
use crate::geometry::{Target, Vec2};
use crate::rng::{derive_seed, stream, StreamTag};

/// How each trial places the second target relative to the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Randomization {
    pub anchor: Vec2,
    pub anchor_velocity: Vec2,
    /// Separation range in metres; `(min rho, 3 max rho)` of the SAF when absent.
    pub separation: Option<(f64, f64)>,
    pub speed: (f64, f64),
    /// Range of the angle between the two velocity vectors, radians.
    pub velocity_angle: (f64, f64),
    /// Range of the RCS ratio `anchor / other`.
    pub rcs_ratio: (f64, f64),
    pub anchor_rcs: f64,
}

impl Default for Randomization {
    fn default() -> Self {
        Self {
            anchor: Vec2::new(1.0, 5.0),
            anchor_velocity: Vec2::new(0.0, 3.0),
            separation: None,
            speed: (1.0, 5.0),
            velocity_angle: (PI / 4.0, 7.0 * PI / 8.0),
            rcs_ratio: (0.2, 1.0),
            anchor_rcs: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSpec {
    pub trials: usize,
    pub snr_db: Vec<f64>,
    pub methods: Vec<Method>,
    pub randomization: Randomization,
    /// Edges of the normalized-distance bins used in the summary.
    pub distance_bins: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub snr_db: f64,
    pub method: Method,
    pub separation: f64,
    /// Separation over the mean resolution `(rho_x + rho_y) / 2`.
    pub normalized_distance: f64,
    pub target_count: usize,
    pub location_rmse: f64,
    pub velocity_rmse_x: Option<f64>,
    pub velocity_rmse_y: Option<f64>,
    pub swap: Option<bool>,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloResult {
    pub rho_x: f64,
    pub rho_y: f64,
    pub records: Vec<TrialRecord>,
}

/// Scenario of trial `trial` at SNR index `snr_index`. The target placement
/// depends on the trial only, so every SNR sees the same scenes.
pub fn trial_scenario(
    base: &Scenario,
    spec: &MonteCarloSpec,
    separation: (f64, f64),
    trial: usize,
    snr_index: usize,
) -> Scenario {
    let r = &spec.randomization;
    let mut rng = stream(spec.seed, StreamTag::Trial, trial as u64, 0);
    let dist = rng.gen_range(separation.0..=separation.1);
    let dir = rng.gen_range(-PI..PI);
    let speed = rng.gen_range(r.speed.0..=r.speed.1);
    let angle = rng.gen_range(r.velocity_angle.0..=r.velocity_angle.1) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let ratio = rng.gen_range(r.rcs_ratio.0..=r.rcs_ratio.1);
    let phases: [f64; 2] = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
    let base_angle = r.anchor_velocity.angle();
    let mut s = base.clone();
    s.targets = vec![
        Target {
            position: r.anchor,
            velocity: r.anchor_velocity,
            rcs: r.anchor_rcs,
            scattering_phase: phases[0],
        },
        Target {
            position: r.anchor + Vec2::from_polar(dist, dir),
            velocity: Vec2::from_polar(speed, base_angle + angle),
            rcs: r.anchor_rcs / ratio,
            scattering_phase: phases[1],
        },
    ];
    s.snr_db = Some(spec.snr_db[snr_index]);
    s.seed = derive_seed(spec.seed, (trial * spec.snr_db.len() + snr_index) as u64);
    s.clock_params.seed = derive_seed(s.seed, 1);
    s
}

pub fn monte_carlo(base: &Scenario, config: &PipelineConfig, spec: &MonteCarloSpec) -> Result<MonteCarloResult> {
    if spec.trials == 0 || spec.snr_db.is_empty() {
        return Err(Error::Config("Monte Carlo needs at least one trial and one SNR".into()));
    }
    let saf = scene_saf(base, config)?;
    let (rho_x, rho_y) = (saf.rho_x, saf.rho_y);
    let separation = spec
        .randomization
        .separation
        .unwrap_or((rho_x.min(rho_y), 3.0 * rho_x.max(rho_y)));
    let rho_xy = 0.5 * (rho_x + rho_y);
    let jobs: Vec<(usize, usize)> = (0..spec.trials)
        .flat_map(|t| (0..spec.snr_db.len()).map(move |s| (t, s)))
        .collect();
    let records: Vec<Vec<TrialRecord>> = jobs
        .par_iter()
        .map(|&(trial, si)| {
            let s = trial_scenario(base, spec, separation, trial, si);
            let sep = s.targets[0].position.distance(s.targets[1].position);
            let outcome = run_all(&s, config, &spec.methods, Some(&saf));
            spec.methods
                .iter()
                .map(|&m| {
                    let mut rec = TrialRecord {
                        trial,
                        snr_db: spec.snr_db[si],
                        method: m,
                        separation: sep,
                        normalized_distance: sep / rho_xy,
                        target_count: 0,
                        location_rmse: f64::NAN,
                        velocity_rmse_x: None,
                        velocity_rmse_y: None,
                        swap: None,
                        failed: true,
                    };
                    if let Ok(rep) = &outcome {
                        rec.target_count = rep.target_count;
                        if let Some(metrics) = rep.method(m).and_then(|r| r.metrics.as_ref()) {
                            rec.location_rmse = metrics.location_rmse;
                            rec.velocity_rmse_x = metrics.velocity_rmse.map(|v| v.x);
                            rec.velocity_rmse_y = metrics.velocity_rmse.map(|v| v.y);
                            rec.swap = metrics.swap;
                            rec.failed = m == Method::Movisac && rep.association_error.is_some();
                        }
                    } else if let Err(e) = &outcome {
                        log::warn!("trial {trial} at {} dB failed: {e}", spec.snr_db[si]);
                    }
                    rec
                })
                .collect()
        })
        .collect();
    Ok(MonteCarloResult {
        rho_x,
        rho_y,
        records: records.into_iter().flatten().collect(),
    })
}

/// Linear-interpolation percentile of finite values, `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub snr_db: Option<f64>,
    pub bin: Option<(f64, f64)>,
    pub count: usize,
    pub median_location_rmse: f64,
    pub p95_location_rmse: f64,
    pub median_velocity_rmse_x: f64,
    pub median_velocity_rmse_y: f64,
    pub swap_rate: Option<f64>,
}

fn summarize<'a>(method: Method, snr: Option<f64>, bin: Option<(f64, f64)>, rows: impl Iterator<Item = &'a TrialRecord>) -> SummaryRow {
    let rows: Vec<&TrialRecord> = rows.collect();
    let loc: Vec<f64> = rows.iter().map(|r| r.location_rmse).collect();
    let vx: Vec<f64> = rows.iter().filter_map(|r| r.velocity_rmse_x).collect();
    let vy: Vec<f64> = rows.iter().filter_map(|r| r.velocity_rmse_y).collect();
    let swaps: Vec<bool> = rows.iter().filter_map(|r| r.swap).collect();
    SummaryRow {
        method,
        snr_db: snr,
        bin,
        count: rows.len(),
        median_location_rmse: percentile(&loc, 0.5),
        p95_location_rmse: percentile(&loc, 0.95),
        median_velocity_rmse_x: percentile(&vx, 0.5),
        median_velocity_rmse_y: percentile(&vy, 0.5),
        swap_rate: (!swaps.is_empty()).then(|| swaps.iter().filter(|&&s| s).count() as f64 / swaps.len() as f64),
    }
}

impl MonteCarloResult {
    /// One row per (method, SNR) and per (method, distance bin).
    pub fn summary(&self, spec: &MonteCarloSpec) -> Vec<SummaryRow> {
        let mut out = Vec::new();
        for &m in &spec.methods {
            for &snr in &spec.snr_db {
                out.push(summarize(
                    m,
                    Some(snr),
                    None,
                    self.records.iter().filter(|r| r.method == m && r.snr_db == snr),
                ));
            }
            for w in spec.distance_bins.windows(2) {
                let (lo, hi) = (w[0], w[1]);
                out.push(summarize(
                    m,
                    None,
                    Some((lo, hi)),
                    self.records
                        .iter()
                        .filter(|r| r.method == m && r.normalized_distance >= lo && r.normalized_distance < hi),
                ));
            }
        }
        out
    }

    pub fn records_csv(&self) -> String {
        let mut out = String::from(
            "trial,snr_db,method,separation_m,normalized_distance,target_count,location_rmse_m,velocity_rmse_x_mps,velocity_rmse_y_mps,swap,failed\n",
        );
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.trial,
                r.snr_db,
                r.method.name(),
                r.separation,
                r.normalized_distance,
                r.target_count,
                r.location_rmse,
                opt(r.velocity_rmse_x),
                opt(r.velocity_rmse_y),
                r.swap.map_or(String::new(), |s| s.to_string()),
                r.failed
            );
        }
        out
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "method,snr_db,bin_lo,bin_hi,count,median_location_rmse_m,p95_location_rmse_m,median_velocity_rmse_x_mps,median_velocity_rmse_y_mps,swap_rate\n",
    );
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.method.name(),
            opt(r.snr_db),
            opt(r.bin.map(|b| b.0)),
            opt(r.bin.map(|b| b.1)),
            r.count,
            r.median_location_rmse,
            r.p95_location_rmse,
            r.median_velocity_rmse_x,
            r.median_velocity_rmse_y,
            opt(r.swap_rate)
        );
    }
    out
}
