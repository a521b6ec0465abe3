//! Pilot channel synthesis, LS estimation and CIR formation.
//!
//! The channel is synthesized directly at the pilot subcarriers of each Tx
//! device, one slice per (pair, slow-time index). Logical subcarrier `i` sits
//! at baseband frequency `(i - M/2) * df`, so the band is centred on the
//! carrier and the CIR kernel is a real-valued sinc around each path delay.
//!
//! Pairs are ordered row-major over (Tx `n`, Rx `m`): pair index `n * N + m`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::clocks::{ClockParams, ClockTrack};
use crate::error::{Error, Result};
use crate::geometry::{
    amplitude, beam_gain, doppler_shift, los_tof, steering_from_direction, steering_vector,
    tx_beamformer, ArrayRole, Device, Target, Vec2, Waveform, SPEED_OF_LIGHT,
};
use crate::rng::{complex_normal, stream, StreamTag};

/// Tx gain applied to the bistatic direct path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LosModel {
    /// Unit gain, as if a dedicated wide beam were used for the sync pilot.
    #[default]
    Isotropic,
    /// Gain of the sensing beamformer towards the receiving device.
    Beamformed,
}

/// Full description of one simulated acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub devices: Vec<Device>,
    pub targets: Vec<Target>,
    pub waveform: Waveform,
    pub clock_params: ClockParams,
    /// Per-antenna SNR referenced to target 0; `None` disables noise.
    pub snr_db: Option<f64>,
    pub include_los: bool,
    pub los_model: LosModel,
    /// Monostatic Tx-to-Rx leakage attenuation below the 1 m free-space level.
    pub self_coupling_isolation_db: f64,
    /// Point the sensing beams of every device are steered towards.
    pub beam_focus: Vec2,
    /// Stretch path delays by the Tx CFO, `tau (1 + beta_n)`. Off by default: the
    /// LOS reference only cancels this term approximately.
    pub tx_cfo_time_distortion: bool,
    pub seed: u64,
}

impl Scenario {
    pub fn device_count(&self) -> usize {
        self.devices.len()
    }

    pub fn pair_count(&self) -> usize {
        self.devices.len() * self.devices.len()
    }

    pub fn pair_index(&self, tx: usize, rx: usize) -> usize {
        tx * self.devices.len() + rx
    }

    pub fn pair(&self, index: usize) -> (usize, usize) {
        (index / self.devices.len(), index % self.devices.len())
    }

    pub fn carrier(&self) -> f64 {
        self.waveform.carrier_frequency
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::Config("at least one device is required".into()));
        }
        if self.devices.len() != self.waveform.device_count {
            return Err(Error::Config(format!(
                "waveform is configured for {} devices but {} are listed",
                self.waveform.device_count,
                self.devices.len()
            )));
        }
        self.waveform.validate()?;
        self.clock_params.validate()?;
        for d in &self.devices {
            d.validate()?;
        }
        for t in &self.targets {
            t.validate()?;
            for d in &self.devices {
                if t.position.distance(d.position) == 0.0 {
                    return Err(Error::DegenerateGeometry(
                        "target coincides with a device".into(),
                    ));
                }
            }
        }
        for (i, a) in self.devices.iter().enumerate() {
            for b in &self.devices[i + 1..] {
                if a.position.distance(b.position) == 0.0 {
                    return Err(Error::DegenerateGeometry("two devices share a position".into()));
                }
            }
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::Config("snr_db must be finite".into()));
            }
        }
        Ok(())
    }

    /// `|rho_{nm,0}|` of the first target, or 1 when the scene has no targets.
    pub fn reference_amplitude(&self, tx: usize, rx: usize) -> Result<f64> {
        match self.targets.first() {
            Some(t) => amplitude(&self.devices[tx], &self.devices[rx], t, self.carrier()),
            None => Ok(1.0),
        }
    }

    /// Noise variance per antenna and subcarrier for the given pair.
    pub fn noise_variance(&self, tx: usize, rx: usize) -> Result<f64> {
        Ok(match self.snr_db {
            Some(snr) => {
                let r = self.reference_amplitude(tx, rx)?;
                self.waveform.pilot_power * r * r / 10f64.powf(snr / 10.0)
            }
            None => 0.0,
        })
    }

    /// Ideal-clock copy of the scenario.
    pub fn with_ideal_clocks(&self) -> Scenario {
        Scenario {
            clock_params: ClockParams::ideal(),
            ..self.clone()
        }
    }

    pub fn sample_clocks(&self) -> Vec<ClockTrack> {
        crate::clocks::sample_clocks(
            &self.clock_params,
            self.waveform.slow_time_count,
            self.devices.len(),
        )
    }
}

/// One propagation path of a pair, ready for per-slice evaluation.
#[derive(Debug, Clone)]
struct Path {
    /// True TOF, seconds.
    tof: f64,
    /// `chi * rho`.
    gain: Complex64,
    rx_steering: Vec<Complex64>,
    doppler: f64,
    scattering_phase: f64,
}

fn pair_paths(scenario: &Scenario, tx: usize, rx: usize) -> Result<Vec<Path>> {
    let f0 = scenario.carrier();
    let (dn, dm) = (&scenario.devices[tx], &scenario.devices[rx]);
    let lambda = SPEED_OF_LIGHT / f0;
    let mut paths = Vec::with_capacity(scenario.targets.len() + 1);
    if scenario.include_los {
        if tx == rx {
            let a = 10f64.powf(-scenario.self_coupling_isolation_db / 20.0) * lambda / (4.0 * PI);
            paths.push(Path {
                tof: 0.0,
                gain: Complex64::new(a, 0.0),
                rx_steering: vec![Complex64::new(1.0, 0.0); dm.antenna_count],
                doppler: 0.0,
                scattering_phase: 0.0,
            });
        } else {
            let d = dn.position.distance(dm.position);
            let u = (dm.position - dn.position) * (1.0 / d);
            let chi = match scenario.los_model {
                LosModel::Isotropic => Complex64::new(1.0, 0.0),
                LosModel::Beamformed => {
                    let b = tx_beamformer(dn, scenario.beam_focus, f0)?;
                    beam_gain(&steering_from_direction(dn, u, f0), &b)
                }
            };
            paths.push(Path {
                tof: los_tof(dn, dm),
                gain: chi * (lambda / (4.0 * PI * d)),
                rx_steering: steering_from_direction(dm, u, f0),
                doppler: 0.0,
                scattering_phase: 0.0,
            });
        }
    }
    let b = tx_beamformer(dn, scenario.beam_focus, f0)?;
    for t in &scenario.targets {
        let chi = beam_gain(&steering_vector(dn, t.position, f0, ArrayRole::Tx)?, &b);
        paths.push(Path {
            tof: crate::geometry::tof(dn, dm, t.position, Vec2::ZERO, 0.0),
            gain: chi * amplitude(dn, dm, t, f0)?,
            rx_steering: steering_vector(dm, t.position, f0, ArrayRole::Rx)?,
            doppler: doppler_shift(dn, dm, t.position, t.velocity, f0)?,
            scattering_phase: t.scattering_phase,
        });
    }
    Ok(paths)
}

/// Unit-modulus pilot phases of device `n`, one per pilot subcarrier.
fn pilot_symbols(scenario: &Scenario, n: usize, count: usize) -> Vec<Complex64> {
    let mut rng = stream(scenario.seed, StreamTag::Pilot, n as u64, 0);
    let amp = scenario.waveform.pilot_power.sqrt();
    (0..count)
        .map(|_| Complex64::from_polar(amp, rng.gen_range(0.0..2.0 * PI)))
        .collect()
}

/// Per-pair constants shared by every slow-time slice.
struct PairModel {
    tx: usize,
    paths: Vec<Path>,
    /// Baseband frequency of each pilot subcarrier of the Tx.
    freqs: Vec<f64>,
    pilots: Vec<Complex64>,
    noise_std: f64,
    dto: f64,
}

impl PairModel {
    fn new(scenario: &Scenario, clocks: &[ClockTrack], pair: usize) -> Result<Self> {
        let (tx, rx) = scenario.pair(pair);
        let w = &scenario.waveform;
        let subcarriers = w.pilot_subcarriers(tx);
        Ok(Self {
            tx,
            paths: pair_paths(scenario, tx, rx)?,
            freqs: subcarriers.iter().map(|&i| w.subcarrier_frequency(i)).collect(),
            pilots: pilot_symbols(scenario, tx, subcarriers.len()),
            noise_std: scenario.noise_variance(tx, rx)?.sqrt(),
            dto: clocks[tx].to - clocks[rx].to,
        })
    }

    /// LS channel estimate at the pilots for slow-time `k`, layout `[antenna][pilot]`.
    fn slice(&self, scenario: &Scenario, clocks: &[ClockTrack], pair: usize, k: usize, out: &mut [Complex64]) {
        let (tx, rx) = scenario.pair(pair);
        let f0 = scenario.carrier();
        let t = k as f64 * scenario.waveform.repetition_interval;
        let beta_n = clocks[tx].cfo[k];
        let dcfo = beta_n - clocks[rx].cfo[k];
        let np = self.freqs.len();
        out.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        let mut phasors = vec![Complex64::new(0.0, 0.0); np];
        for path in &self.paths {
            let stretch = if scenario.tx_cfo_time_distortion { 1.0 + beta_n } else { 1.0 };
            let apparent = path.tof * stretch - self.dto;
            let phase = 2.0 * PI * f0 * dcfo * t - 2.0 * PI * f0 * apparent
                - 2.0 * PI * path.doppler * t
                + path.scattering_phase;
            let g = path.gain * Complex64::from_polar(1.0, phase);
            for (p, &f) in phasors.iter_mut().zip(&self.freqs) {
                *p = g * Complex64::from_polar(1.0, -2.0 * PI * f * apparent);
            }
            for (row, a) in out.chunks_exact_mut(np).zip(&path.rx_steering) {
                for (v, p) in row.iter_mut().zip(&phasors) {
                    *v += a * p;
                }
            }
        }
        if self.noise_std > 0.0 {
            let mut rng = stream(scenario.seed, StreamTag::Noise, pair as u64, k as u64);
            for row in out.chunks_exact_mut(np) {
                for (v, s) in row.iter_mut().zip(&self.pilots) {
                    let y = *v * s + complex_normal(&mut rng, self.noise_std);
                    *v = y / s;
                }
            }
        }
    }
}

/// Channel at the pilot subcarriers of each pair's Tx.
#[derive(Debug, Clone)]
pub struct FreqChannel {
    pub device_count: usize,
    pub slow_time_count: usize,
    pub antenna_count: usize,
    /// Pilot subcarrier indices of each Tx device.
    pub pilots: Vec<Vec<usize>>,
    /// Per pair, layout `[k][antenna][pilot]`.
    pub values: Vec<Vec<Complex64>>,
}

impl FreqChannel {
    pub fn slice(&self, pair: usize, k: usize) -> &[Complex64] {
        let tx = pair / self.device_count;
        let len = self.antenna_count * self.pilots[tx].len();
        &self.values[pair][k * len..(k + 1) * len]
    }
}

fn check_antennas(scenario: &Scenario) -> Result<usize> {
    let l = scenario.devices[0].antenna_count;
    if scenario.devices.iter().any(|d| d.antenna_count != l) {
        return Err(Error::Config(
            "all devices must have the same antenna count".into(),
        ));
    }
    Ok(l)
}

pub fn synthesize_channel(scenario: &Scenario, clocks: &[ClockTrack]) -> Result<FreqChannel> {
    scenario.validate()?;
    let l = check_antennas(scenario)?;
    check_clocks(scenario, clocks)?;
    let kk = scenario.waveform.slow_time_count;
    let pilots: Vec<Vec<usize>> = (0..scenario.device_count())
        .map(|n| scenario.waveform.pilot_subcarriers(n))
        .collect();
    let values = (0..scenario.pair_count())
        .into_par_iter()
        .map(|pair| {
            let model = PairModel::new(scenario, clocks, pair)?;
            let len = l * model.freqs.len();
            let mut v = vec![Complex64::new(0.0, 0.0); kk * len];
            v.par_chunks_mut(len)
                .enumerate()
                .for_each(|(k, out)| model.slice(scenario, clocks, pair, k, out));
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FreqChannel {
        device_count: scenario.device_count(),
        slow_time_count: kk,
        antenna_count: l,
        pilots,
        values,
    })
}

fn check_clocks(scenario: &Scenario, clocks: &[ClockTrack]) -> Result<()> {
    if clocks.len() != scenario.device_count() {
        return Err(Error::LengthMismatch {
            expected: scenario.device_count(),
            found: clocks.len(),
        });
    }
    for c in clocks {
        if c.cfo.len() != scenario.waveform.slow_time_count {
            return Err(Error::LengthMismatch {
                expected: scenario.waveform.slow_time_count,
                found: c.cfo.len(),
            });
        }
    }
    Ok(())
}

/// Range of signed delay samples kept in a CIR cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayWindow {
    /// Signed index of the first kept sample; negative indices wrap around the period.
    pub start: i64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CirOptions {
    /// Zero-padding factor of the inverse DFT; the delay step is `1 / (oversample * B)`.
    pub oversample: usize,
    /// Delay samples to keep; `None` keeps the full period.
    pub window: Option<DelayWindow>,
}

impl Default for CirOptions {
    fn default() -> Self {
        Self {
            oversample: 2,
            window: None,
        }
    }
}

impl CirOptions {
    /// Window covering every delay from `min_delay` to `max_delay` seconds.
    pub fn with_delay_span(mut self, waveform: &Waveform, min_delay: f64, max_delay: f64) -> Self {
        let step = 1.0 / (self.oversample as f64 * waveform.bandwidth);
        let start = (min_delay / step).floor() as i64;
        let end = (max_delay / step).ceil() as i64;
        let period = self.oversample * waveform.subcarrier_count;
        let count = ((end - start + 1).max(1) as usize).min(period);
        self.window = Some(DelayWindow { start, count });
        self
    }
}

/// CIR tensor `[pair][k][antenna][delay]`.
///
/// Each pair carries its own delay origin: stored sample `j` of pair `p`
/// holds signed delay index `start[p] + j`. When the full period is stored
/// the delay axis is circular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CirCube {
    pub pair_count: usize,
    pub slow_time_count: usize,
    pub antenna_count: usize,
    pub delay_count: usize,
    /// Seconds between delay samples.
    pub delay_step: f64,
    /// Length of the underlying inverse DFT.
    pub period: usize,
    /// Pilot comb spacing in subcarriers (the device count).
    pub pilot_stride: usize,
    pub subcarrier_spacing: f64,
    pub start: Vec<i64>,
    /// Fractional sample position of each pair's delay origin, left over after
    /// re-referencing by a whole number of samples.
    pub origin: Vec<f64>,
    pub values: Vec<Complex64>,
}

impl CirCube {
    pub fn circular(&self) -> bool {
        self.delay_count == self.period
    }

    fn pair_len(&self) -> usize {
        self.slow_time_count * self.antenna_count * self.delay_count
    }

    pub fn pair_values(&self, pair: usize) -> &[Complex64] {
        let len = self.pair_len();
        &self.values[pair * len..(pair + 1) * len]
    }

    pub fn pair_values_mut(&mut self, pair: usize) -> &mut [Complex64] {
        let len = self.pair_len();
        &mut self.values[pair * len..(pair + 1) * len]
    }

    /// Delay profile of one antenna at one slow-time index.
    pub fn series(&self, pair: usize, k: usize, antenna: usize) -> &[Complex64] {
        let off = ((pair * self.slow_time_count + k) * self.antenna_count + antenna) * self.delay_count;
        &self.values[off..off + self.delay_count]
    }

    /// Storage position of signed delay index `s` relative to the pair origin.
    pub fn position(&self, pair: usize, s: i64) -> Option<usize> {
        let j = s - self.start[pair];
        if self.circular() {
            Some(j.rem_euclid(self.period as i64) as usize)
        } else if j >= 0 && (j as usize) < self.delay_count {
            Some(j as usize)
        } else {
            None
        }
    }

    /// Delay in seconds of stored sample `j` of `pair`.
    pub fn delay(&self, pair: usize, j: usize) -> f64 {
        let mut s = self.start[pair] + j as i64;
        if self.circular() {
            let p = self.period as i64;
            s = s.rem_euclid(p);
            if s >= p / 2 {
                s -= p;
            }
        }
        s as f64 * self.delay_step
    }

    /// Relative noise power at delay `t` (receiver time) left by linear
    /// interpolation of the pilot comb, 1 at zero delay.
    ///
    /// Each pilot spreads over its neighbours with triangular weights, so the
    /// noise seen at delay `t` is shaped by the Fejer kernel
    /// `sum_r (1 - |r|/N) exp(j 2 pi r df t)`.
    pub fn noise_envelope(&self, t: f64) -> f64 {
        let n = self.pilot_stride as i64;
        if n <= 1 {
            return 1.0;
        }
        let k: Complex64 = (-(n - 1)..n)
            .map(|r| {
                let w = 1.0 - (r.abs() as f64) / n as f64;
                Complex64::from_polar(w, 2.0 * PI * r as f64 * self.subcarrier_spacing * t)
            })
            .sum();
        k.norm_sqr() / (n * n) as f64
    }

    pub fn sample(&self, pair: usize, k: usize, antenna: usize, s: i64) -> Complex64 {
        match self.position(pair, s) {
            Some(j) => self.series(pair, k, antenna)[j],
            None => Complex64::new(0.0, 0.0),
        }
    }
}

/// Linear interpolation from the pilot comb to all `m` subcarriers with
/// constant extrapolation at the band edges.
pub fn interpolate_pilots(pilots: &[usize], values: &[Complex64], m: usize, out: &mut [Complex64]) {
    let first = pilots[0];
    let last = *pilots.last().expect("non-empty pilots");
    for v in out[..first].iter_mut() {
        *v = values[0];
    }
    for v in out[last..m].iter_mut() {
        *v = values[values.len() - 1];
    }
    for (w, v) in pilots.windows(2).zip(values.windows(2)) {
        let span = (w[1] - w[0]) as f64;
        for i in w[0]..w[1] {
            let t = (i - w[0]) as f64 / span;
            out[i] = v[0] + (v[1] - v[0]) * t;
        }
    }
}

fn validate_pilots(pilots: &[usize], m: usize, device: usize) -> Result<()> {
    if pilots.is_empty() {
        return Err(Error::MalformedPilots {
            device,
            reason: "empty pilot set".into(),
        });
    }
    if pilots.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::MalformedPilots {
            device,
            reason: "pilot indices must be strictly increasing".into(),
        });
    }
    if *pilots.last().unwrap() >= m {
        return Err(Error::MalformedPilots {
            device,
            reason: "pilot index beyond the subcarrier count".into(),
        });
    }
    Ok(())
}

/// Turns pilot-domain slices into windowed CIR slices.
struct Estimator {
    m: usize,
    period: usize,
    scale: f64,
    ifft: Arc<dyn Fft<f64>>,
    window: DelayWindow,
}

impl Estimator {
    fn new(waveform: &Waveform, opts: &CirOptions) -> Result<Self> {
        if opts.oversample == 0 {
            return Err(Error::Config("oversample must be at least 1".into()));
        }
        let m = waveform.subcarrier_count;
        let period = opts.oversample * m;
        let window = opts.window.unwrap_or(DelayWindow {
            start: 0,
            count: period,
        });
        if window.count == 0 || window.count > period {
            return Err(Error::Config(format!(
                "delay window of {} samples does not fit a period of {period}",
                window.count
            )));
        }
        Ok(Self {
            m,
            period,
            scale: 1.0 / (period as f64).sqrt(),
            ifft: FftPlanner::new().plan_fft_inverse(period),
            window,
        })
    }

    /// `freq`: `[antenna][pilot]`; `out`: `[antenna][delay]`.
    fn run(&self, pilots: &[usize], freq: &[Complex64], out: &mut [Complex64], work: &mut Work) {
        let np = pilots.len();
        let count = self.window.count;
        let half = (self.m / 2) as i64;
        for (row, dst) in freq.chunks_exact(np).zip(out.chunks_exact_mut(count)) {
            interpolate_pilots(pilots, row, self.m, &mut work.full);
            work.buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            for (i, v) in work.full.iter().enumerate() {
                let bin = (i as i64 - half).rem_euclid(self.period as i64) as usize;
                work.buf[bin] = *v;
            }
            self.ifft.process_with_scratch(&mut work.buf, &mut work.scratch);
            for (j, d) in dst.iter_mut().enumerate() {
                let s = (self.window.start + j as i64).rem_euclid(self.period as i64) as usize;
                *d = work.buf[s] * self.scale;
            }
        }
    }

    fn work(&self) -> Work {
        Work {
            full: vec![Complex64::new(0.0, 0.0); self.m],
            buf: vec![Complex64::new(0.0, 0.0); self.period],
            scratch: vec![Complex64::new(0.0, 0.0); self.ifft.get_inplace_scratch_len()],
        }
    }
}

struct Work {
    full: Vec<Complex64>,
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

fn empty_cube(device_count: usize, kk: usize, l: usize, waveform: &Waveform, opts: &CirOptions, est: &Estimator) -> CirCube {
    let pairs = device_count * device_count;
    CirCube {
        pair_count: pairs,
        slow_time_count: kk,
        antenna_count: l,
        delay_count: est.window.count,
        delay_step: 1.0 / (opts.oversample as f64 * waveform.bandwidth),
        period: est.period,
        pilot_stride: device_count,
        subcarrier_spacing: waveform.subcarrier_spacing(),
        start: vec![est.window.start; pairs],
        origin: vec![0.0; pairs],
        values: vec![Complex64::new(0.0, 0.0); pairs * kk * l * est.window.count],
    }
}

/// LS-interpolated inverse DFT of a pilot-domain channel.
pub fn estimate_cir(freq: &FreqChannel, waveform: &Waveform, opts: &CirOptions) -> Result<CirCube> {
    for (n, p) in freq.pilots.iter().enumerate() {
        validate_pilots(p, waveform.subcarrier_count, n)?;
    }
    let est = Estimator::new(waveform, opts)?;
    let (kk, l) = (freq.slow_time_count, freq.antenna_count);
    let mut cube = empty_cube(freq.device_count, kk, l, waveform, opts, &est);
    let slice_len = l * est.window.count;
    cube.values
        .par_chunks_mut(slice_len)
        .enumerate()
        .for_each_init(
            || est.work(),
            |work, (idx, out)| {
                let (pair, k) = (idx / kk, idx % kk);
                let tx = pair / freq.device_count;
                est.run(&freq.pilots[tx], freq.slice(pair, k), out, work);
            },
        );
    Ok(cube)
}

/// Synthesis and estimation fused per slice, without holding the pilot-domain
/// channel of the whole acquisition in memory.
pub fn simulate_cir(scenario: &Scenario, clocks: &[ClockTrack], opts: &CirOptions) -> Result<CirCube> {
    scenario.validate()?;
    let l = check_antennas(scenario)?;
    check_clocks(scenario, clocks)?;
    let w = &scenario.waveform;
    let est = Estimator::new(w, opts)?;
    let kk = w.slow_time_count;
    let models = (0..scenario.pair_count())
        .map(|p| PairModel::new(scenario, clocks, p))
        .collect::<Result<Vec<_>>>()?;
    let pilots: Vec<Vec<usize>> = (0..scenario.device_count())
        .map(|n| w.pilot_subcarriers(n))
        .collect();
    let mut cube = empty_cube(scenario.device_count(), kk, l, w, opts, &est);
    let slice_len = l * est.window.count;
    cube.values
        .par_chunks_mut(slice_len)
        .enumerate()
        .for_each_init(
            || (est.work(), Vec::new()),
            |(work, freq), (idx, out)| {
                let (pair, k) = (idx / kk, idx % kk);
                let model = &models[pair];
                freq.resize(l * model.freqs.len(), Complex64::new(0.0, 0.0));
                model.slice(scenario, clocks, pair, k, freq);
                est.run(&pilots[model.tx], freq, out, work);
            },
        );
    Ok(cube)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn waveform(n: usize, m: usize, k: usize) -> Waveform {
        Waveform {
            carrier_frequency: 26.5e9,
            bandwidth: 400e6,
            subcarrier_count: m,
            device_count: n,
            repetition_interval: 0.5e-3,
            slow_time_count: k,
            pilot_power: 1.0,
        }
    }

    fn scenario(devices: Vec<Vec2>, targets: Vec<Target>, m: usize, k: usize, l: usize) -> Scenario {
        let f0 = 26.5e9;
        Scenario {
            devices: devices
                .iter()
                .map(|&p| Device::half_wavelength(p, 0.0, l, f0))
                .collect(),
            targets,
            waveform: waveform(devices.len(), m, k),
            clock_params: ClockParams::ideal(),
            snr_db: None,
            include_los: false,
            los_model: LosModel::Isotropic,
            self_coupling_isolation_db: 40.0,
            beam_focus: Vec2::new(0.0, 5.0),
            tx_cfo_time_distortion: false,
            seed: 3,
        }
    }

    fn target(x: f64, y: f64, vx: f64, vy: f64) -> Target {
        Target {
            position: Vec2::new(x, y),
            velocity: Vec2::new(vx, vy),
            rcs: 1.0,
            scattering_phase: 0.7,
        }
    }

    fn wrap(a: f64) -> f64 {
        (a + PI).rem_euclid(2.0 * PI) - PI
    }

    #[test]
    fn pure_noise_variance() {
        let mut s = scenario(vec![Vec2::new(0.0, 0.0)], vec![], 1024, 16, 8, );
        s.snr_db = Some(10.0);
        let f = synthesize_channel(&s, &s.sample_clocks()).unwrap();
        let v = &f.values[0];
        assert!(v.len() >= 1 << 17);
        let var = v.iter().map(|c| c.norm_sqr()).sum::<f64>() / v.len() as f64;
        assert_relative_eq!(var, s.noise_variance(0, 0).unwrap(), max_relative = 0.05);
        assert_relative_eq!(var, 0.1, max_relative = 0.05);
    }

    #[test]
    fn static_target_phase_is_linear_in_frequency() {
        let s = scenario(vec![Vec2::new(-1.5, 0.0), Vec2::new(1.5, 0.0)], vec![target(1.0, 5.0, 0.0, 0.0)], 256, 2, 1);
        let f = synthesize_channel(&s, &s.sample_clocks()).unwrap();
        let tau = crate::geometry::tof(&s.devices[0], &s.devices[1], Vec2::new(1.0, 5.0), Vec2::ZERO, 0.0);
        let slope = -2.0 * PI * s.waveform.subcarrier_spacing() * 2.0 * tau;
        let row = f.slice(1, 0);
        for w in row.windows(2) {
            let d = (w[1] / w[0]).arg();
            assert!((wrap(d - slope)).abs() < 1e-9);
        }
    }

    #[test]
    fn moving_target_phase_advances_by_doppler() {
        let s = scenario(vec![Vec2::new(-1.5, 0.0), Vec2::new(1.5, 0.0)], vec![target(1.0, 5.0, 0.5, 3.0)], 64, 8, 1);
        let f = synthesize_channel(&s, &s.sample_clocks()).unwrap();
        for pair in 0..4 {
            let (n, m) = s.pair(pair);
            let fd = doppler_shift(&s.devices[n], &s.devices[m], Vec2::new(1.0, 5.0), Vec2::new(0.5, 3.0), s.carrier()).unwrap();
            let step = -2.0 * PI * fd * s.waveform.repetition_interval;
            for k in 1..8 {
                let d = (f.slice(pair, k)[0] / f.slice(pair, k - 1)[0]).arg();
                assert!(wrap(d - step).abs() < 1e-10, "pair {pair} k {k}");
            }
        }
    }

    #[test]
    fn on_grid_path_peaks_at_its_sample() {
        let w = waveform(1, 256, 1);
        let step = 1.0 / (2.0 * w.bandwidth);
        let tau = 17.0 * step;
        let pilots: Vec<usize> = (0..256).collect();
        let vals: Vec<Complex64> = pilots
            .iter()
            .map(|&i| Complex64::from_polar(1.0, -2.0 * PI * w.subcarrier_frequency(i) * tau))
            .collect();
        let f = FreqChannel {
            device_count: 1,
            slow_time_count: 1,
            antenna_count: 1,
            pilots: vec![pilots],
            values: vec![vals],
        };
        let cube = estimate_cir(&f, &w, &CirOptions::default()).unwrap();
        let h = cube.series(0, 0, 0);
        let (imax, vmax) = h
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .unwrap();
        assert_eq!(imax, 17);
        assert_relative_eq!(vmax.norm(), 256.0 / 512f64.sqrt(), max_relative = 1e-9);
        assert!(vmax.im.abs() < 1e-9 * vmax.norm());
        // Dirichlet kernel sidelobes: at 2 oversampled samples (one Nyquist sample) away the
        // kernel crosses zero.
        assert!(h[19].norm() < 1e-9 * vmax.norm() + 2.0 * PI / 256.0);
    }

    #[test]
    fn half_sample_path_splits_peak() {
        let w = waveform(1, 256, 1);
        let step = 1.0 / (2.0 * w.bandwidth);
        let tau = 10.5 * step;
        let pilots: Vec<usize> = (0..256).collect();
        let vals: Vec<Complex64> = pilots
            .iter()
            .map(|&i| Complex64::from_polar(1.0, -2.0 * PI * w.subcarrier_frequency(i) * tau))
            .collect();
        let f = FreqChannel {
            device_count: 1,
            slow_time_count: 1,
            antenna_count: 1,
            pilots: vec![pilots],
            values: vec![vals],
        };
        let cube = estimate_cir(&f, &w, &CirOptions::default()).unwrap();
        let h = cube.series(0, 0, 0);
        // Dense-grid oracle: |sum_i exp(j 2 pi f_i (t - tau))| at the two neighbours.
        let kernel = |t: f64| -> f64 {
            (0..256)
                .map(|i| Complex64::from_polar(1.0, 2.0 * PI * w.subcarrier_frequency(i) * (t - tau)))
                .sum::<Complex64>()
                .norm()
                / 512f64.sqrt()
        };
        assert_relative_eq!(h[10].norm(), kernel(10.0 * step), max_relative = 1e-9);
        assert_relative_eq!(h[11].norm(), kernel(11.0 * step), max_relative = 1e-9);
        assert_relative_eq!(h[10].norm(), h[11].norm(), max_relative = 1e-9);
        let imax = (0..h.len()).max_by(|&a, &b| h[a].norm().total_cmp(&h[b].norm())).unwrap();
        assert!((imax as f64 - 10.5).abs() <= 1.0);
    }

    #[test]
    fn parseval_holds_per_slice() {
        let mut s = scenario(
            vec![Vec2::new(-1.0, 0.0), Vec2::new(0.5, 0.0), Vec2::new(1.0, 0.0)],
            vec![target(0.3, 4.0, 1.0, -2.0)],
            240,
            3,
            3,
        );
        s.include_los = true;
        s.snr_db = Some(0.0);
        let f = synthesize_channel(&s, &s.sample_clocks()).unwrap();
        let cube = estimate_cir(&f, &s.waveform, &CirOptions { oversample: 3, window: None }).unwrap();
        let mut full = vec![Complex64::new(0.0, 0.0); 240];
        for pair in 0..9 {
            let tx = pair / 3;
            for k in 0..3 {
                for (l, row) in f.slice(pair, k).chunks_exact(f.pilots[tx].len()).enumerate() {
                    interpolate_pilots(&f.pilots[tx], row, 240, &mut full);
                    let ef: f64 = full.iter().map(|v| v.norm_sqr()).sum();
                    let et: f64 = cube.series(pair, k, l).iter().map(|v| v.norm_sqr()).sum();
                    assert_relative_eq!(et, ef, max_relative = 1e-9);
                }
            }
        }
    }

    #[test]
    fn single_device_interpolation_is_identity() {
        let pilots: Vec<usize> = (0..16).collect();
        let vals: Vec<Complex64> = (0..16).map(|i| Complex64::new(i as f64, -(i as f64))).collect();
        let mut out = vec![Complex64::new(0.0, 0.0); 16];
        interpolate_pilots(&pilots, &vals, 16, &mut out);
        assert_eq!(out, vals);
    }

    #[test]
    fn comb_interpolation_is_linear_with_flat_edges() {
        let pilots = vec![1usize, 4, 7];
        let vals = vec![Complex64::new(0.0, 0.0), Complex64::new(3.0, 3.0), Complex64::new(0.0, 6.0)];
        let mut out = vec![Complex64::new(9.0, 9.0); 9];
        interpolate_pilots(&pilots, &vals, 9, &mut out);
        assert_eq!(out[0], vals[0]);
        assert_eq!(out[2], Complex64::new(1.0, 1.0));
        assert_eq!(out[5], Complex64::new(2.0, 4.0));
        assert_eq!(out[8], vals[2]);
    }

    #[test]
    fn malformed_pilots_rejected() {
        let w = waveform(1, 8, 1);
        let f = FreqChannel {
            device_count: 1,
            slow_time_count: 1,
            antenna_count: 1,
            pilots: vec![vec![3, 2]],
            values: vec![vec![Complex64::new(1.0, 0.0); 2]],
        };
        assert!(matches!(
            estimate_cir(&f, &w, &CirOptions::default()),
            Err(Error::MalformedPilots { device: 0, .. })
        ));
    }

    #[test]
    fn fused_path_matches_two_stage_path() {
        let mut s = scenario(
            vec![Vec2::new(-1.0, 0.0), Vec2::new(1.0, 0.0)],
            vec![target(0.3, 4.0, 1.0, -2.0), target(-0.2, 5.0, 0.0, 1.0)],
            128,
            4,
            4,
        );
        s.include_los = true;
        s.snr_db = Some(5.0);
        s.clock_params = ClockParams::impaired(s.waveform.bandwidth, 9);
        let clocks = s.sample_clocks();
        let opts = CirOptions::default().with_delay_span(&s.waveform, -30e-9, 60e-9);
        let a = simulate_cir(&s, &clocks, &opts).unwrap();
        let b = estimate_cir(&synthesize_channel(&s, &clocks).unwrap(), &s.waveform, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn windowed_cube_matches_full_cube() {
        let s = scenario(vec![Vec2::new(-1.0, 0.0), Vec2::new(1.0, 0.0)], vec![target(0.3, 4.0, 0.0, 0.0)], 128, 2, 2);
        let clocks = s.sample_clocks();
        let full = simulate_cir(&s, &clocks, &CirOptions::default()).unwrap();
        let opts = CirOptions::default().with_delay_span(&s.waveform, -10e-9, 40e-9);
        let win = simulate_cir(&s, &clocks, &opts).unwrap();
        assert!(!win.circular() && full.circular());
        for s_idx in -8..32 {
            assert_eq!(full.sample(1, 1, 1, s_idx), win.sample(1, 1, 1, s_idx));
        }
        assert_eq!(win.sample(1, 1, 1, 10_000), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn los_peak_at_baseline_delay() {
        let mut s = scenario(vec![Vec2::new(-1.5, 0.0), Vec2::new(1.5, 0.0)], vec![target(1.0, 5.0, 0.0, 0.0)], 1024, 1, 4);
        s.include_los = true;
        let cube = simulate_cir(&s, &s.sample_clocks(), &CirOptions::default()).unwrap();
        let pair = s.pair_index(0, 1);
        let power: Vec<f64> = (0..cube.delay_count)
            .map(|j| (0..4).map(|l| cube.series(pair, 0, l)[j].norm_sqr()).sum())
            .collect();
        let jmax = (0..power.len()).max_by(|&a, &b| power[a].total_cmp(&power[b])).unwrap();
        let expected = 3.0 / SPEED_OF_LIGHT;
        assert!((cube.delay(pair, jmax) - expected).abs() <= cube.delay_step);
    }

    #[test]
    fn noise_floor_tracks_snr() {
        let mut s = scenario(vec![Vec2::new(0.0, 0.0)], vec![target(0.0, 5.0, 0.0, 0.0)], 256, 8, 4);
        let mut floors = Vec::new();
        for snr in [0.0, 10.0] {
            s.snr_db = Some(snr);
            s.targets[0].rcs = 1.0;
            let signal = synthesize_channel(&{ let mut c = s.clone(); c.snr_db = None; c }, &s.sample_clocks()).unwrap();
            let noisy = synthesize_channel(&s, &s.sample_clocks()).unwrap();
            let e: f64 = noisy.values[0]
                .iter()
                .zip(&signal.values[0])
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                / noisy.values[0].len() as f64;
            floors.push(e);
        }
        assert_relative_eq!(floors[0] / floors[1], 10.0, max_relative = 0.1);
        let rho = s.reference_amplitude(0, 0).unwrap();
        assert_relative_eq!(floors[0], rho * rho, max_relative = 0.1);
    }
}
