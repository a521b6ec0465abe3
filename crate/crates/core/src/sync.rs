//! Over-the-air synchronization from the direct path between devices.
//!
//! For every bistatic pair the LOS delay and carrier phase are estimated from
//! the CIR and used as a reference: shifting the delay origin to the LOS and
//! counter-rotating its phase removes the timing offset, the CFO drift and the
//! phase offset at once, leaving only delays and phases relative to the LOS.

use std::fmt::Write as _;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{CirCube, Scenario};
use crate::error::{Error, Result};
use crate::geometry::{los_tof, steering_from_direction, Device};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LosSelection {
    /// Global maximum of the delay power profile.
    #[default]
    Strongest,
    /// Earliest local maximum above the detection threshold.
    FirstPeak,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncConfig {
    pub selection: LosSelection,
    /// Minimum LOS power above the local noise floor, dB.
    pub threshold_db: f64,
    /// First-peak mode ignores local maxima this far below the strongest sample, dB.
    pub relative_floor_db: f64,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            selection: LosSelection::Strongest,
            threshold_db: 6.0,
            relative_floor_db: 20.0,
        }
    }
}

/// LOS reference of one ordered pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSync {
    pub tx: usize,
    pub rx: usize,
    /// Estimated LOS delay, seconds.
    pub los_tof: f64,
    /// LOS delay in delay-grid samples.
    pub shift: i64,
    /// Unit-modulus LOS phasor per slow-time index.
    pub phase: Vec<Complex64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncEstimate {
    pub pairs: Vec<PairSync>,
}

/// Delay power profile `sum_k sum_l |h|^2 / K` of one pair.
pub fn delay_power(cube: &CirCube, pair: usize) -> Vec<f64> {
    let mut power = vec![0.0; cube.delay_count];
    for k in 0..cube.slow_time_count {
        for l in 0..cube.antenna_count {
            for (p, v) in power.iter_mut().zip(cube.series(pair, k, l)) {
                *p += v.norm_sqr();
            }
        }
    }
    let scale = 1.0 / cube.slow_time_count as f64;
    power.iter_mut().for_each(|p| *p *= scale);
    power
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Noise floor per delay sample.
///
/// Pilot interpolation colours the noise along delay, so the profile is
/// whitened by the interpolation envelope, its median taken as the white
/// level, and the envelope re-applied.
pub fn noise_floor(cube: &CirCube, pair: usize, power: &[f64]) -> Vec<f64> {
    let env: Vec<f64> = (0..power.len())
        .map(|j| cube.noise_envelope(cube.delay(pair, j)).max(1e-3))
        .collect();
    let white: Vec<f64> = power.iter().zip(&env).map(|(p, e)| p / e).collect();
    let level = median(&white);
    env.iter().map(|e| e * level).collect()
}

/// Estimated LOS delay in seconds and the matching signed delay index.
pub fn estimate_los_tof(
    cube: &CirCube,
    pair: usize,
    tx: usize,
    rx: usize,
    config: &SyncConfig,
) -> Result<(f64, i64)> {
    let power = delay_power(cube, pair);
    let floor = noise_floor(cube, pair, &power);
    let factor = 10f64.powf(config.threshold_db / 10.0);
    let fail = |reason: String| Error::SyncFailure { tx, rx, reason };
    let best = (0..power.len())
        .max_by(|&a, &b| power[a].total_cmp(&power[b]))
        .ok_or_else(|| fail("empty delay axis".into()))?;
    if !(power[best] > factor * floor[best]) || power[best] == 0.0 {
        return Err(fail(format!(
            "no delay sample exceeds the noise floor by {} dB",
            config.threshold_db
        )));
    }
    let j = match config.selection {
        LosSelection::Strongest => best,
        LosSelection::FirstPeak => {
            let n = power.len();
            let min_power = power[best] * 10f64.powf(-config.relative_floor_db / 10.0);
            (0..n)
                .find(|&j| {
                    let left = if j > 0 { power[j - 1] } else { 0.0 };
                    let right = if j + 1 < n { power[j + 1] } else { 0.0 };
                    power[j] > factor * floor[j]
                        && power[j] >= min_power
                        && power[j] >= left
                        && power[j] >= right
                })
                .unwrap_or(best)
        }
    };
    let tof = cube.delay(pair, j) + refine_peak(cube, &power, j) * cube.delay_step;
    Ok((tof, (tof / cube.delay_step).round() as i64))
}

/// Sub-sample offset of a power peak from a parabola through the log power of
/// it and its neighbours. The log-domain fit is nearly unbiased on sinc-like
/// mainlobes.
fn refine_peak(cube: &CirCube, power: &[f64], j: usize) -> f64 {
    let n = power.len();
    let (left, right) = if cube.circular() {
        ((j + n - 1) % n, (j + 1) % n)
    } else if j > 0 && j + 1 < n {
        (j - 1, j + 1)
    } else {
        return 0.0;
    };
    let (a, b, c) = (power[left], power[j], power[right]);
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return 0.0;
    }
    let (a, b, c) = (a.ln(), b.ln(), c.ln());
    let den = a - 2.0 * b + c;
    if den >= 0.0 {
        return 0.0;
    }
    (0.5 * (a - c) / den).clamp(-0.5, 0.5)
}

/// Per slow-time index, the normalized combination `a^H exp(j arg h)` at the LOS delay.
pub fn estimate_los_phase(
    cube: &CirCube,
    pair: usize,
    shift: i64,
    rx_steering: &[Complex64],
) -> Vec<Complex64> {
    (0..cube.slow_time_count)
        .map(|k| {
            let z: Complex64 = rx_steering
                .iter()
                .enumerate()
                .map(|(l, a)| {
                    let h = cube.sample(pair, k, l, shift);
                    let unit = if h.norm() > 0.0 { h / h.norm() } else { h };
                    a.conj() * unit
                })
                .sum();
            let n = z.norm();
            if n > 0.0 {
                z / n
            } else {
                Complex64::new(1.0, 0.0)
            }
        })
        .collect()
}

/// Steering vector of the Rx array towards the LOS arrival direction.
pub fn los_steering(tx: &Device, rx: &Device, f0: f64) -> Vec<Complex64> {
    let d = rx.position - tx.position;
    let u = d * (1.0 / d.norm());
    steering_from_direction(rx, u, f0)
}

/// High-SNR lower bound on the LOS phase-error variance, rad^2.
///
/// `snr` is the per-antenna SNR `sigma_s^2 (M/N) |rho_0|^2 / sigma_z^2`.
/// Combining `L` antennas over `M/N` pilots gives `N^2 / (M^2 L snr)`, about
/// (0.1 deg)^2 for `L = 5`, `M = 1024`, `N = 4` at 0 dB.
pub fn phase_crlb(snr: f64, antennas: usize, subcarriers: usize, devices: usize) -> f64 {
    let (m, n) = (subcarriers as f64, devices as f64);
    n * n / (m * m * antennas as f64 * snr)
}

/// LOS references for every pair. Monostatic pairs share a clock and get an
/// identity reference.
pub fn synchronize(cube: &CirCube, scenario: &Scenario, config: &SyncConfig) -> Result<SyncEstimate> {
    let n = scenario.device_count();
    if cube.pair_count != n * n {
        return Err(Error::LengthMismatch {
            expected: n * n,
            found: cube.pair_count,
        });
    }
    let f0 = scenario.carrier();
    let pairs = (0..cube.pair_count)
        .into_par_iter()
        .map(|pair| {
            let (tx, rx) = scenario.pair(pair);
            if tx == rx {
                return Ok(PairSync {
                    tx,
                    rx,
                    los_tof: 0.0,
                    shift: 0,
                    phase: vec![Complex64::new(1.0, 0.0); cube.slow_time_count],
                });
            }
            let (los_tof, shift) = estimate_los_tof(cube, pair, tx, rx, config)?;
            let a = los_steering(&scenario.devices[tx], &scenario.devices[rx], f0);
            Ok(PairSync {
                tx,
                rx,
                los_tof,
                shift,
                phase: estimate_los_phase(cube, pair, shift, &a),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyncEstimate { pairs })
}

/// Reference built from the known geometry alone, ignoring clock errors. Gives
/// the same result as [`synchronize`] with ideal clocks and shows the effect of
/// skipping synchronization otherwise.
pub fn geometric_reference(cube: &CirCube, scenario: &Scenario) -> SyncEstimate {
    let f0 = scenario.carrier();
    let pairs = (0..cube.pair_count)
        .map(|pair| {
            let (tx, rx) = scenario.pair(pair);
            let tof = if tx == rx {
                0.0
            } else {
                los_tof(&scenario.devices[tx], &scenario.devices[rx])
            };
            PairSync {
                tx,
                rx,
                los_tof: tof,
                shift: (tof / cube.delay_step).round() as i64,
                phase: vec![
                    Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * f0 * tof);
                    cube.slow_time_count
                ],
            }
        })
        .collect();
    SyncEstimate { pairs }
}

/// Re-references every pair to its LOS: delay origin moved to the LOS sample
/// and each slow-time slice multiplied by the conjugate LOS phasor.
pub fn compensate(mut cube: CirCube, sync: &SyncEstimate) -> Result<CirCube> {
    for pair in 0..cube.pair_count {
        let Some(ps) = sync.pairs.get(pair) else {
            return Err(Error::MissingSync {
                tx: pair / (cube.pair_count as f64).sqrt() as usize,
                rx: pair % (cube.pair_count as f64).sqrt() as usize,
            });
        };
        if ps.phase.len() != cube.slow_time_count {
            return Err(Error::LengthMismatch {
                expected: cube.slow_time_count,
                found: ps.phase.len(),
            });
        }
    }
    let slice = cube.antenna_count * cube.delay_count;
    let kk = cube.slow_time_count;
    for (pair, ps) in sync.pairs.iter().enumerate().take(cube.pair_count) {
        cube.start[pair] -= ps.shift;
        cube.origin[pair] = ps.los_tof / cube.delay_step - ps.shift as f64;
        let values = cube.pair_values_mut(pair);
        values
            .par_chunks_mut(slice)
            .zip(ps.phase.par_iter())
            .for_each(|(chunk, phi)| {
                let c = phi.conj();
                if c != Complex64::new(1.0, 0.0) {
                    chunk.iter_mut().for_each(|v| *v *= c);
                }
            });
        debug_assert_eq!(values.len(), kk * slice);
    }
    Ok(cube)
}

/// CSV with one row per pair: LOS delay, mean LOS phase and the phase bound.
pub fn sync_report_csv(scenario: &Scenario, sync: &SyncEstimate) -> Result<String> {
    let w = &scenario.waveform;
    let mut out = String::from("tx,rx,los_tof_s,mean_los_phase_rad,phase_crlb_rad2\n");
    for ps in &sync.pairs {
        let mean: Complex64 = ps.phase.iter().sum();
        let crlb = if ps.tx == ps.rx {
            0.0
        } else {
            let noise = scenario.noise_variance(ps.tx, ps.rx)?;
            if noise > 0.0 {
                let (a, b) = (&scenario.devices[ps.tx], &scenario.devices[ps.rx]);
                let lambda = w.wavelength();
                let rho = lambda / (4.0 * std::f64::consts::PI * a.position.distance(b.position));
                let snr = w.pilot_power * rho * rho / noise;
                phase_crlb(snr, b.antenna_count, w.subcarrier_count, w.device_count)
            } else {
                0.0
            }
        };
        writeln!(out, "{},{},{:.6e},{:.6},{:.6e}", ps.tx, ps.rx, ps.los_tof, mean.arg(), crlb)
            .expect("write to string");
    }
    Ok(out)
}
