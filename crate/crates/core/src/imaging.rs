//! Back-projection imaging on LOS-referenced CIRs.
//!
//! For pair `(n, m)` and pixel `x` the back-projected value is
//! `a_m(x)^H h(dtau(x), k) exp(j 2 pi f0 dtau(x))`, where `dtau` is the
//! bistatic delay of `x` relative to the direct path and the CIR is read at
//! the nearest delay sample.
//!
//! [`Backprojector`] fuses the per-pair images with the reduction each stage
//! needs (pair sum, slow-time magnitude sum, Doppler filtering) so the full
//! `pairs x K x pixels` stack is never stored. Pixels are processed in
//! parallel by rows with a fixed per-pixel accumulation order, so results do
//! not depend on the worker count.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::channel::{simulate_cir, CirCube, CirOptions, Scenario};
use crate::clocks::ClockParams;
use crate::error::{Error, Result};
use crate::geometry::{los_tof, tx_beamformer, Target, Vec2, SPEED_OF_LIGHT};
use crate::sync::{compensate, synchronize, SyncConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub pixel_size: f64,
}

impl PixelGrid {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, pixel_size: f64) -> Result<Self> {
        let g = Self {
            x_min,
            x_max,
            y_min,
            y_max,
            pixel_size,
        };
        if !(pixel_size > 0.0 && pixel_size.is_finite()) {
            return Err(Error::Config("pixel size must be positive".into()));
        }
        if !(x_max > x_min && y_max > y_min) || !(x_min.is_finite() && x_max.is_finite() && y_min.is_finite() && y_max.is_finite()) {
            return Err(Error::Config("grid extents must be positive and finite".into()));
        }
        Ok(g)
    }

    /// Grid of `2 * half` extent per axis around `center`.
    pub fn centered(center: Vec2, half_x: f64, half_y: f64, pixel_size: f64) -> Result<Self> {
        Self::new(
            center.x - half_x,
            center.x + half_x,
            center.y - half_y,
            center.y + half_y,
            pixel_size,
        )
    }

    /// Grid with exactly `nx x ny` pixels whose middle is `center`. With odd
    /// counts `center` is a pixel centre.
    pub fn with_counts(center: Vec2, nx: usize, ny: usize, pixel_size: f64) -> Result<Self> {
        let hx = 0.5 * nx as f64 * pixel_size;
        let hy = 0.5 * ny as f64 * pixel_size;
        Self::new(center.x - hx, center.x + hx, center.y - hy, center.y + hy, pixel_size)
    }

    pub fn nx(&self) -> usize {
        (((self.x_max - self.x_min) / self.pixel_size) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn ny(&self) -> usize {
        (((self.y_max - self.y_min) / self.pixel_size) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn len(&self) -> usize {
        self.nx() * self.ny()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x(&self, ix: usize) -> f64 {
        self.x_min + (ix as f64 + 0.5) * self.pixel_size
    }

    pub fn y(&self, iy: usize) -> f64 {
        self.y_min + (iy as f64 + 0.5) * self.pixel_size
    }

    pub fn center(&self, ix: usize, iy: usize) -> Vec2 {
        Vec2::new(self.x(ix), self.y(iy))
    }

    pub fn point(&self, index: usize) -> Vec2 {
        let nx = self.nx();
        self.center(index % nx, index / nx)
    }

    /// Pixel containing `p`, if inside the grid.
    pub fn locate(&self, p: Vec2) -> Option<(usize, usize)> {
        let fx = (p.x - self.x_min) / self.pixel_size;
        let fy = (p.y - self.y_min) / self.pixel_size;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        (ix < self.nx() && iy < self.ny()).then_some((ix, iy))
    }

    pub fn mid(&self) -> Vec2 {
        Vec2::new(0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn corners(&self) -> [Vec2; 4] {
        [
            Vec2::new(self.x_min, self.y_min),
            Vec2::new(self.x_max, self.y_min),
            Vec2::new(self.x_min, self.y_max),
            Vec2::new(self.x_max, self.y_max),
        ]
    }

    pub fn same_as(&self, other: &PixelGrid) -> bool {
        self.nx() == other.nx()
            && self.ny() == other.ny()
            && (self.x_min - other.x_min).abs() < 1e-12
            && (self.y_min - other.y_min).abs() < 1e-12
            && (self.pixel_size - other.pixel_size).abs() < 1e-15
    }
}

/// Complex pixel values, row-major `[y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    pub grid: PixelGrid,
    pub values: Vec<Complex64>,
}

/// Real pixel values, row-major `[y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    pub grid: PixelGrid,
    pub values: Vec<f64>,
}

impl ComplexImage {
    pub fn zeros(grid: PixelGrid) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn magnitude(&self) -> RealImage {
        RealImage {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v.norm()).collect(),
        }
    }

    pub fn at(&self, ix: usize, iy: usize) -> Complex64 {
        self.values[iy * self.grid.nx() + ix]
    }
}

impl RealImage {
    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.grid.nx() + ix]
    }

    /// Index and value of the largest pixel; ties go to the lowest index.
    pub fn argmax(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &v) in self.values.iter().enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.argmax().1
    }

    /// Value at the pixel containing `p`.
    pub fn value_at(&self, p: Vec2) -> Option<f64> {
        self.grid.locate(p).map(|(ix, iy)| self.at(ix, iy))
    }

    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Pixelwise sum of per-pair images.
pub fn combine_smi(images: &[ComplexImage]) -> Result<ComplexImage> {
    let first = images
        .first()
        .ok_or_else(|| Error::Empty("no images to combine".into()))?;
    let mut out = first.clone();
    for img in &images[1..] {
        if !img.grid.same_as(&out.grid) {
            return Err(Error::GridMismatch("images do not share one grid".into()));
        }
        for (o, v) in out.values.iter_mut().zip(&img.values) {
            *o += v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    Coherent,
    Magnitude,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Integrated {
    Coherent(ComplexImage),
    Magnitude(RealImage),
}

/// Slow-time reduction: `sum_k I` or `sum_k |I|`.
pub fn integrate_slow_time(images: &[ComplexImage], mode: Integration) -> Result<Integrated> {
    let first = images
        .first()
        .ok_or_else(|| Error::Empty("empty slow-time stack".into()))?;
    if images.iter().any(|i| !i.grid.same_as(&first.grid)) {
        return Err(Error::GridMismatch("slow-time images do not share one grid".into()));
    }
    Ok(match mode {
        Integration::Coherent => Integrated::Coherent(combine_smi(images)?),
        Integration::Magnitude => {
            let mut values = vec![0.0; first.values.len()];
            for img in images {
                for (o, v) in values.iter_mut().zip(&img.values) {
                    *o += v.norm();
                }
            }
            Integrated::Magnitude(RealImage {
                grid: first.grid.clone(),
                values,
            })
        }
    })
}

/// How a pixel's delay is read off the sampled CIR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayInterpolation {
    Nearest,
    Linear,
    /// Keys cubic convolution over four samples, accurate to a few 1e-3 of
    /// the peak at 4x oversampling.
    #[default]
    Cubic,
}

/// Keys cubic convolution kernel with `a = -1/2`.
fn keys(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (1.5 * x - 2.5) * x * x + 1.0
    } else if x < 2.0 {
        ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0
    } else {
        0.0
    }
}

/// Per-pixel, per-pair back-projection weights.
struct PairTap {
    /// Storage positions and weights of the samples the pixel's delay reads.
    taps: [(Option<usize>, f64); 4],
    /// `exp(j 2 pi f0 dtau) * conj(a_m(x))`, one per antenna.
    coef: Vec<Complex64>,
}

struct Scratch {
    dist: Vec<f64>,
    weights: Vec<Vec<Complex64>>,
    /// Conjugate phase of each Tx beam gain towards the pixel.
    tx_phase: Vec<Complex64>,
    taps: Vec<PairTap>,
    acc_re: Vec<f64>,
    acc_im: Vec<f64>,
}

/// Fused back-projection over a sync-compensated CIR cube.
pub struct Backprojector<'a> {
    scenario: &'a Scenario,
    cube: &'a CirCube,
    /// Geometric LOS delay of each pair, zero for monostatic pairs.
    los: Vec<f64>,
    /// Per pair, `[delay][antenna][re(K) | im(K)]`.
    layout: Vec<Vec<f64>>,
    /// Tx beamformers, used to undo the pixel-dependent phase of the Tx beam gain.
    beams: Option<Vec<Vec<Complex64>>>,
    interpolation: DelayInterpolation,
    clipped: AtomicU64,
}

impl PairTap {
    fn is_empty(&self) -> bool {
        self.taps.iter().all(|t| t.0.is_none())
    }

    fn reads(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.taps.iter().filter_map(|&(p, w)| p.filter(|_| w != 0.0).map(|p| (p, w)))
    }
}

impl<'a> Backprojector<'a> {
    pub fn new(scenario: &'a Scenario, cube: &'a CirCube) -> Result<Self> {
        if cube.pair_count != scenario.pair_count() {
            return Err(Error::LengthMismatch {
                expected: scenario.pair_count(),
                found: cube.pair_count,
            });
        }
        if scenario.devices.iter().any(|d| d.antenna_count != cube.antenna_count) {
            return Err(Error::Config("antenna count differs between scenario and CIR".into()));
        }
        let los = (0..cube.pair_count)
            .map(|p| {
                let (n, m) = scenario.pair(p);
                if n == m {
                    0.0
                } else {
                    los_tof(&scenario.devices[n], &scenario.devices[m])
                }
            })
            .collect();
        let f0 = scenario.carrier();
        let beams = scenario
            .devices
            .iter()
            .map(|d| tx_beamformer(d, scenario.beam_focus, f0))
            .collect::<Result<Vec<_>>>()?;
        let (kk, l, nd) = (cube.slow_time_count, cube.antenna_count, cube.delay_count);
        let layout = (0..cube.pair_count)
            .into_par_iter()
            .map(|pair| {
                let mut v = vec![0.0; nd * l * 2 * kk];
                for k in 0..kk {
                    for a in 0..l {
                        for (j, h) in cube.series(pair, k, a).iter().enumerate() {
                            let base = (j * l + a) * 2 * kk;
                            v[base + k] = h.re;
                            v[base + kk + k] = h.im;
                        }
                    }
                }
                v
            })
            .collect();
        Ok(Self {
            scenario,
            cube,
            los,
            layout,
            beams: Some(beams),
            interpolation: DelayInterpolation::default(),
            clipped: AtomicU64::new(0),
        })
    }

    /// Skips the Tx beam-gain phase correction, as a plain receive-only matched filter would.
    pub fn without_tx_phase(mut self) -> Self {
        self.beams = None;
        self
    }

    pub fn with_interpolation(mut self, interpolation: DelayInterpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    pub fn slow_time_count(&self) -> usize {
        self.cube.slow_time_count
    }

    /// Pixel-pair evaluations that fell outside the CIR window so far.
    pub fn clipped(&self) -> u64 {
        self.clipped.load(Ordering::Relaxed)
    }

    fn scratch(&self) -> Scratch {
        let n = self.scenario.device_count();
        let l = self.cube.antenna_count;
        let kk = self.cube.slow_time_count;
        Scratch {
            dist: vec![0.0; n],
            weights: vec![vec![Complex64::new(0.0, 0.0); l]; n],
            tx_phase: vec![Complex64::new(1.0, 0.0); n],
            taps: (0..self.cube.pair_count)
                .map(|_| PairTap {
                    taps: [(None, 0.0); 4],
                    coef: vec![Complex64::new(0.0, 0.0); l],
                })
                .collect(),
            acc_re: vec![0.0; kk],
            acc_im: vec![0.0; kk],
        }
    }

    fn taps(&self, x: Vec2, s: &mut Scratch) {
        let f0 = self.scenario.carrier();
        let k0 = 2.0 * PI * f0 / SPEED_OF_LIGHT;
        for (n, dev) in self.scenario.devices.iter().enumerate() {
            let d = dev.position - x;
            let r = d.norm();
            s.dist[n] = r;
            let cos = if r > 0.0 { dev.axis().dot(d) / r } else { 0.0 };
            let step = Complex64::from_polar(1.0, k0 * dev.antenna_spacing * cos);
            let mut w = Complex64::new(1.0, 0.0);
            for v in s.weights[n].iter_mut() {
                *v = w;
                w *= step;
            }
            // The weights equal the Tx steering vector, so the beam gain is
            // `sum conj(w) b` and its conjugate `sum w conj(b)`.
            if let Some(beams) = &self.beams {
                let g: Complex64 = s.weights[n].iter().zip(&beams[n]).map(|(a, b)| a * b.conj()).sum();
                let mag = g.norm();
                s.tx_phase[n] = if mag > 0.0 { g / mag } else { Complex64::new(1.0, 0.0) };
            }
        }
        let mut clipped = 0;
        for (pair, tap) in s.taps.iter_mut().enumerate() {
            let (n, m) = self.scenario.pair(pair);
            let dtau = (s.dist[n] + s.dist[m]) / SPEED_OF_LIGHT - self.los[pair];
            let u = dtau / self.cube.delay_step + self.cube.origin[pair];
            let at = |j: i64, w: f64| (self.cube.position(pair, j), w);
            let j = u.floor();
            let w = u - j;
            let j = j as i64;
            tap.taps = match self.interpolation {
                DelayInterpolation::Nearest => [at(u.round() as i64, 1.0), (None, 0.0), (None, 0.0), (None, 0.0)],
                DelayInterpolation::Linear => [at(j, 1.0 - w), at(j + 1, w), (None, 0.0), (None, 0.0)],
                DelayInterpolation::Cubic => [
                    at(j - 1, keys(w + 1.0)),
                    at(j, keys(w)),
                    at(j + 1, keys(1.0 - w)),
                    at(j + 2, keys(2.0 - w)),
                ],
            };
            if tap.is_empty() {
                clipped += 1;
                continue;
            }
            let p = Complex64::from_polar(1.0, 2.0 * PI * f0 * dtau) * s.tx_phase[n];
            for (c, w) in tap.coef.iter_mut().zip(&s.weights[m]) {
                *c = p * w;
            }
        }
        if clipped > 0 {
            self.clipped.fetch_add(clipped, Ordering::Relaxed);
        }
    }

    /// Adds pair `pair`'s slow-time vector at the current taps into the accumulators.
    fn accumulate(&self, pair: usize, s: &mut Scratch) {
        let tap = &s.taps[pair];
        let kk = self.cube.slow_time_count;
        let l = self.cube.antenna_count;
        let (acc_re, acc_im) = (&mut s.acc_re[..], &mut s.acc_im[..]);
        for (j, w) in tap.reads() {
            let data = &self.layout[pair][j * l * 2 * kk..(j + 1) * l * 2 * kk];
            for (c, row) in tap.coef.iter().zip(data.chunks_exact(2 * kk)) {
                let (re, im) = row.split_at(kk);
                let (cr, ci) = (w * c.re, w * c.im);
                for k in 0..kk {
                    acc_re[k] += cr * re[k] - ci * im[k];
                    acc_im[k] += cr * im[k] + ci * re[k];
                }
            }
        }
    }

    fn clear(s: &mut Scratch) {
        s.acc_re.iter_mut().for_each(|v| *v = 0.0);
        s.acc_im.iter_mut().for_each(|v| *v = 0.0);
    }

    fn map_rows<T: Send + Clone + Default>(
        &self,
        grid: &PixelGrid,
        f: impl Fn(Vec2, &mut Scratch) -> T + Sync,
    ) -> Vec<T> {
        let nx = grid.nx();
        let mut out = vec![T::default(); grid.len()];
        out.par_chunks_mut(nx)
            .enumerate()
            .for_each_init(
                || self.scratch(),
                |s, (iy, row)| {
                    let y = grid.y(iy);
                    for (ix, o) in row.iter_mut().enumerate() {
                        *o = f(Vec2::new(grid.x(ix), y), s);
                    }
                },
            );
        out
    }

    /// Single-pair image at slow time `k`, optionally counter-rotating a Doppler shift.
    pub fn pair_image(&self, grid: &PixelGrid, pair: usize, k: usize, doppler: Option<f64>) -> ComplexImage {
        let rot = self.doppler_rotation(doppler, k);
        let kk = self.cube.slow_time_count;
        let values = self.map_rows(grid, |x, s| {
            self.taps(x, s);
            let tap = &s.taps[pair];
            let l = self.cube.antenna_count;
            let mut z = Complex64::new(0.0, 0.0);
            for (j, w) in tap.reads() {
                let data = &self.layout[pair][j * l * 2 * kk..(j + 1) * l * 2 * kk];
                for (c, row) in tap.coef.iter().zip(data.chunks_exact(2 * kk)) {
                    z += c * Complex64::new(row[k], row[kk + k]) * w;
                }
            }
            z * rot
        });
        ComplexImage {
            grid: grid.clone(),
            values,
        }
    }

    fn doppler_rotation(&self, doppler: Option<f64>, k: usize) -> Complex64 {
        match doppler {
            Some(f) => Complex64::from_polar(
                1.0,
                2.0 * PI * f * k as f64 * self.scenario.waveform.repetition_interval,
            ),
            None => Complex64::new(1.0, 0.0),
        }
    }

    /// Sum over pairs at slow time `k`.
    pub fn smi_image(&self, grid: &PixelGrid, k: usize) -> ComplexImage {
        let values = self.map_rows(grid, |x, s| {
            self.taps(x, s);
            Self::clear(s);
            for pair in 0..self.cube.pair_count {
                self.accumulate(pair, s);
            }
            Complex64::new(s.acc_re[k], s.acc_im[k])
        });
        ComplexImage {
            grid: grid.clone(),
            values,
        }
    }

    /// `sum_k |sum_pairs I_nm(x, k)|`.
    pub fn smi_magnitude(&self, grid: &PixelGrid) -> RealImage {
        let values = self.map_rows(grid, |x, s| {
            self.taps(x, s);
            Self::clear(s);
            for pair in 0..self.cube.pair_count {
                self.accumulate(pair, s);
            }
            s.acc_re
                .iter()
                .zip(&s.acc_im)
                .map(|(r, i)| r.hypot(*i))
                .sum()
        });
        RealImage {
            grid: grid.clone(),
            values,
        }
    }

    /// `sum_k sum_pairs I_nm(x, k)`, the coherent image of a static scene.
    pub fn smi_coherent(&self, grid: &PixelGrid) -> ComplexImage {
        let zero = vec![0.0; self.cube.pair_count];
        self.precompensated(grid, &zero)
    }

    /// `sum_k sum_pairs I_nm(x, k) exp(j 2 pi f_nm k T)` for one Doppler per pair.
    ///
    /// The slow-time sum is folded into the CIR before back-projection, so the
    /// cost is that of a single image.
    pub fn precompensated(&self, grid: &PixelGrid, doppler: &[f64]) -> ComplexImage {
        let kk = self.cube.slow_time_count;
        let l = self.cube.antenna_count;
        let t = self.scenario.waveform.repetition_interval;
        let filtered: Vec<Vec<Complex64>> = (0..self.cube.pair_count)
            .into_par_iter()
            .map(|pair| {
                let rot: Vec<Complex64> = (0..kk)
                    .map(|k| Complex64::from_polar(1.0, 2.0 * PI * doppler[pair] * k as f64 * t))
                    .collect();
                self.layout[pair]
                    .chunks_exact(2 * kk)
                    .map(|row| {
                        let (re, im) = row.split_at(kk);
                        let mut z = Complex64::new(0.0, 0.0);
                        for k in 0..kk {
                            z += Complex64::new(re[k], im[k]) * rot[k];
                        }
                        z
                    })
                    .collect()
            })
            .collect();
        let values = self.map_rows(grid, |x, s| {
            self.taps(x, s);
            let mut z = Complex64::new(0.0, 0.0);
            for (pair, tap) in s.taps.iter().enumerate() {
                for (j, w) in tap.reads() {
                    let g = &filtered[pair][j * l..(j + 1) * l];
                    for (c, v) in tap.coef.iter().zip(g) {
                        z += c * v * w;
                    }
                }
            }
            z
        });
        ComplexImage {
            grid: grid.clone(),
            values,
        }
    }

    /// Per-pair Doppler power spectra summed over the pixels of `aoi`.
    ///
    /// Bin `b` of the returned spectra corresponds to `axis[b]`; the kernel
    /// `exp(+j 2 pi nu k T)` puts a component `exp(-j 2 pi f_D k T)` at `+f_D`.
    pub fn doppler_spectra(&self, aoi: &PixelGrid, oversample: usize, window: SlowTimeWindow) -> DopplerSpectra {
        let kk = self.cube.slow_time_count;
        let taper = window.weights(kk);
        let nfft = kk * oversample.max(1);
        let pairs = self.cube.pair_count;
        let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_inverse(nfft);
        let nx = aoi.nx();
        let rows: Vec<Vec<f64>> = (0..aoi.ny())
            .into_par_iter()
            .map_init(
                || {
                    (
                        self.scratch(),
                        vec![Complex64::new(0.0, 0.0); nfft],
                        vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()],
                    )
                },
                |(s, buf, scratch), iy| {
                    let mut part = vec![0.0; pairs * nfft];
                    let y = aoi.y(iy);
                    for ix in 0..nx {
                        self.taps(Vec2::new(aoi.x(ix), y), s);
                        for pair in 0..pairs {
                            if s.taps[pair].is_empty() {
                                continue;
                            }
                            Self::clear(s);
                            self.accumulate(pair, s);
                            buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                            for k in 0..kk {
                                buf[k] = Complex64::new(s.acc_re[k], s.acc_im[k]) * taper[k];
                            }
                            fft.process_with_scratch(buf, scratch);
                            for (p, v) in part[pair * nfft..(pair + 1) * nfft].iter_mut().zip(buf.iter()) {
                                *p += v.norm_sqr();
                            }
                        }
                    }
                    part
                },
            )
            .collect();
        let mut total = vec![0.0; pairs * nfft];
        for part in &rows {
            for (t, p) in total.iter_mut().zip(part) {
                *t += p;
            }
        }
        DopplerSpectra::from_fft_bins(total, pairs, nfft, self.scenario.waveform.repetition_interval)
    }

    /// Slow-time stack of one pair's images.
    pub fn pair_stack(&self, grid: &PixelGrid, pair: usize) -> Vec<ComplexImage> {
        let kk = self.cube.slow_time_count;
        let stacks: Vec<Vec<Complex64>> = self.map_rows(grid, |x, s| {
            self.taps(x, s);
            Self::clear(s);
            self.accumulate(pair, s);
            (0..kk).map(|k| Complex64::new(s.acc_re[k], s.acc_im[k])).collect()
        });
        (0..kk)
            .map(|k| ComplexImage {
                grid: grid.clone(),
                values: stacks.iter().map(|v| v[k]).collect(),
            })
            .collect()
    }
}

/// Slow-time taper applied before the Doppler transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlowTimeWindow {
    Rectangular,
    /// Symmetric Hann; sidelobes at -31 dB keep noise-free sidelobes out of CFAR.
    #[default]
    Hann,
}

impl SlowTimeWindow {
    pub fn weights(self, k: usize) -> Vec<f64> {
        match self {
            Self::Rectangular => vec![1.0; k],
            Self::Hann if k > 1 => (0..k)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (k - 1) as f64).cos())
                .collect(),
            Self::Hann => vec![1.0; k],
        }
    }
}

/// Per-pair Doppler spectra on a centred frequency axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DopplerSpectra {
    /// Frequency of each bin, Hz, increasing from `-1/(2T)`.
    pub axis: Vec<f64>,
    /// Power per pair and bin.
    pub power: Vec<Vec<f64>>,
}

impl DopplerSpectra {
    /// Reorders raw inverse-FFT bins (bin `b` at `b / (nfft T)`, wrapped) onto a centred axis.
    pub fn from_fft_bins(raw: Vec<f64>, pairs: usize, nfft: usize, period: f64) -> Self {
        let half = nfft / 2;
        let axis = (0..nfft)
            .map(|i| (i as f64 - half as f64) / (nfft as f64 * period))
            .collect();
        let power = (0..pairs)
            .map(|p| {
                let row = &raw[p * nfft..(p + 1) * nfft];
                (0..nfft).map(|i| row[(i + nfft - half) % nfft]).collect()
            })
            .collect();
        Self { axis, power }
    }

    pub fn bin_width(&self) -> f64 {
        if self.axis.len() > 1 {
            self.axis[1] - self.axis[0]
        } else {
            0.0
        }
    }
}

/// Magnitude-normalized image of a unit point target and its mainlobe widths.
#[derive(Debug, Clone, PartialEq)]
pub struct Saf {
    /// Grid centred on the reference point.
    pub grid: PixelGrid,
    /// Complex values scaled so the peak magnitude is 1.
    pub values: Vec<Complex64>,
    pub reference: Vec2,
    pub rho_x: f64,
    pub rho_y: f64,
}

impl Saf {
    /// `|H|` at integer pixel offset `(dx, dy)` from the reference, 0 outside.
    pub fn magnitude_at_offset(&self, dx: i64, dy: i64) -> f64 {
        let (nx, ny) = (self.grid.nx() as i64, self.grid.ny() as i64);
        let (cx, cy) = (nx / 2 + dx, ny / 2 + dy);
        if cx < 0 || cy < 0 || cx >= nx || cy >= ny {
            0.0
        } else {
            self.values[(cy * nx + cx) as usize].norm()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafOptions {
    pub cir_oversample: usize,
    pub interpolation: DelayInterpolation,
    /// Include the direct path, so the LOS reference is estimated as in a real run.
    pub include_los: bool,
}

impl Default for SafOptions {
    fn default() -> Self {
        Self {
            cir_oversample: 4,
            interpolation: DelayInterpolation::default(),
            include_los: true,
        }
    }
}

/// Full width of the mainlobe through the centre of `values` where the
/// magnitude stays above `1/sqrt(2)` of the centre value, with linear
/// interpolation between samples.
pub fn mainlobe_width(values: &[f64], center: usize, step: f64) -> f64 {
    let peak = values[center];
    let level = peak / 2f64.sqrt();
    let crossing = |dir: i64| -> f64 {
        let mut i = center as i64;
        loop {
            let next = i + dir;
            if next < 0 || next as usize >= values.len() {
                return (i - center as i64).abs() as f64;
            }
            let (a, b) = (values[i as usize], values[next as usize]);
            if b < level {
                let frac = (a - level) / (a - b);
                return (i - center as i64).abs() as f64 + frac;
            }
            i = next;
        }
    };
    (crossing(-1) + crossing(1)) * step
}

/// Delay window covering every pixel of the given grids and the LOS of every
/// pair under the worst-case timing offsets.
pub fn cir_options_for(scenario: &Scenario, grids: &[&PixelGrid], oversample: usize) -> CirOptions {
    let step = 1.0 / (oversample as f64 * scenario.waveform.bandwidth);
    let guard = 24.0 * step;
    let mut max_tof: f64 = 0.0;
    for g in grids {
        for c in g.corners() {
            for a in &scenario.devices {
                for b in &scenario.devices {
                    max_tof = max_tof.max((c.distance(a.position) + c.distance(b.position)) / SPEED_OF_LIGHT);
                }
            }
        }
    }
    for a in &scenario.devices {
        for b in &scenario.devices {
            max_tof = max_tof.max(los_tof(a, b));
        }
    }
    let to = scenario.clock_params.to_max;
    CirOptions {
        oversample,
        window: None,
    }
    .with_delay_span(&scenario.waveform, -to - guard, max_tof + to + guard)
}

/// Numerically computed SAF: a noiseless, ideal-clock, static unit target at
/// `reference` pushed through synthesis, synchronization and back-projection
/// onto `grid`, summed over pairs.
pub fn compute_saf(template: &Scenario, grid: &PixelGrid, reference: Vec2, opts: &SafOptions) -> Result<Saf> {
    let mut s = template.clone();
    s.targets = vec![Target {
        position: reference,
        velocity: Vec2::ZERO,
        rcs: 1.0,
        scattering_phase: 0.0,
    }];
    s.waveform.slow_time_count = 1;
    s.clock_params = ClockParams::ideal();
    s.snr_db = None;
    s.include_los = opts.include_los;
    let cir_opts = cir_options_for(&s, &[grid], opts.cir_oversample);
    let cube = simulate_cir(&s, &s.sample_clocks(), &cir_opts)?;
    let cube = if opts.include_los {
        let sync = synchronize(&cube, &s, &SyncConfig::default())?;
        compensate(cube, &sync)?
    } else {
        let sync = crate::sync::geometric_reference(&cube, &s);
        compensate(cube, &sync)?
    };
    let bp = Backprojector::new(&s, &cube)?.with_interpolation(opts.interpolation);
    let img = bp.smi_image(grid, 0);
    let peak = img.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::DegenerateGeometry("SAF has no energy on the grid".into()));
    }
    let values: Vec<Complex64> = img.values.iter().map(|v| v / peak).collect();
    let (nx, ny) = (grid.nx(), grid.ny());
    let (cx, cy) = grid
        .locate(reference)
        .ok_or_else(|| Error::GridMismatch("reference point outside the SAF grid".into()))?;
    let row: Vec<f64> = (0..nx).map(|ix| values[cy * nx + ix].norm()).collect();
    let col: Vec<f64> = (0..ny).map(|iy| values[iy * nx + cx].norm()).collect();
    Ok(Saf {
        grid: grid.clone(),
        rho_x: mainlobe_width(&row, cx, grid.pixel_size),
        rho_y: mainlobe_width(&col, cy, grid.pixel_size),
        values,
        reference,
    })
}

/// SAF on a grid centred at `reference` with odd pixel counts, so that
/// integer pixel offsets of another grid with the same pixel size land on its
/// samples.
pub fn compute_saf_for_offsets(
    template: &Scenario,
    reference: Vec2,
    nx: usize,
    ny: usize,
    pixel_size: f64,
    opts: &SafOptions,
) -> Result<Saf> {
    let grid = PixelGrid::with_counts(reference, nx | 1, ny | 1, pixel_size)?;
    compute_saf(template, &grid, reference, opts)
}
