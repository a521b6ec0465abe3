//! Doppler peak detection over an area of interest and coarse localization by
//! iterative SAF subtraction.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::imaging::{ComplexImage, DopplerSpectra, PixelGrid, RealImage, Saf, SlowTimeWindow};

/// Rectangle `center +- half_extent` over which Doppler spectra are summed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaOfInterest {
    pub center: Vec2,
    pub half_x: f64,
    pub half_y: f64,
}

impl AreaOfInterest {
    pub fn new(center: Vec2, half_x: f64, half_y: f64) -> Result<Self> {
        if !(half_x > 0.0 && half_y > 0.0) || !center.is_finite() {
            return Err(Error::Config("area of interest needs positive extents".into()));
        }
        Ok(Self { center, half_x, half_y })
    }

    pub fn contains(&self, p: Vec2) -> bool {
        (p.x - self.center.x).abs() <= self.half_x && (p.y - self.center.y).abs() <= self.half_y
    }

    /// Pixel grid covering the area.
    pub fn grid(&self, pixel_size: f64) -> Result<PixelGrid> {
        PixelGrid::centered(self.center, self.half_x, self.half_y, pixel_size)
    }
}

/// Doppler spectrum of one pair's slow-time image stack, summed over the
/// pixels of `aoi`. Returns the spectrum on a centred axis.
pub fn doppler_spectrum(
    stack: &[ComplexImage],
    aoi: &AreaOfInterest,
    oversample: usize,
    window: SlowTimeWindow,
    period: f64,
) -> Result<DopplerSpectra> {
    let kk = stack.len();
    if kk < 2 {
        return Err(Error::Config("Doppler spectrum needs at least two slow-time images".into()));
    }
    let grid = &stack[0].grid;
    if stack.iter().any(|i| !i.grid.same_as(grid)) {
        return Err(Error::GridMismatch("slow-time images do not share one grid".into()));
    }
    let pixels: Vec<usize> = (0..grid.len()).filter(|&i| aoi.contains(grid.point(i))).collect();
    if pixels.is_empty() {
        return Err(Error::Empty("no pixels inside the area of interest".into()));
    }
    let taper = window.weights(kk);
    let nfft = kk * oversample.max(1);
    let fft = FftPlanner::new().plan_fft_inverse(nfft);
    let mut raw = vec![0.0; nfft];
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    for &i in &pixels {
        buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        for (k, img) in stack.iter().enumerate() {
            buf[k] = img.values[i] * taper[k];
        }
        fft.process(&mut buf);
        for (r, v) in raw.iter_mut().zip(&buf) {
            *r += v.norm_sqr();
        }
    }
    Ok(DopplerSpectra::from_fft_bins(raw, 1, nfft, period))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfarConfig {
    /// Guard cells per side, in native Doppler resolution cells.
    pub guard: usize,
    /// Training cells per side, in native resolution cells.
    pub training: usize,
    pub false_alarm_probability: f64,
    /// Peaks more than this many dB below the strongest one are dropped.
    pub relative_floor_db: Option<f64>,
    /// Ignore peaks within half a resolution cell of 0 Hz.
    pub exclude_zero: bool,
}

impl Default for CfarConfig {
    fn default() -> Self {
        Self {
            guard: 2,
            training: 8,
            false_alarm_probability: 1e-3,
            relative_floor_db: Some(20.0),
            exclude_zero: false,
        }
    }
}

impl CfarConfig {
    /// Cell-averaging scale factor for exponentially distributed cells.
    pub fn threshold_factor(&self) -> f64 {
        threshold_factor(self.training, self.false_alarm_probability)
    }

    /// Guard and training cells that fit in a circular spectrum of `cells`
    /// resolution cells without wrapping onto the cell under test.
    pub fn fitted(&self, cells: usize) -> (usize, usize) {
        let half = cells.saturating_sub(1) / 2;
        let guard = self.guard.min(half.saturating_sub(1));
        let training = self.training.min(half - guard).max(1);
        (guard, training)
    }
}

fn threshold_factor(training: usize, pfa: f64) -> f64 {
    let w = (2 * training) as f64;
    w * (pfa.powf(-1.0 / w) - 1.0)
}

/// Cells whose power exceeds the cell-averaging threshold. The spectrum is
/// circular; training and guard cells are spaced `stride` bins apart so that
/// on an oversampled axis they fall on distinct resolution cells.
pub fn cfar_mask(power: &[f64], cfg: &CfarConfig, stride: usize) -> Vec<bool> {
    let n = power.len() as i64;
    let stride = stride.max(1) as i64;
    let (guard, training) = cfg.fitted((n / stride) as usize);
    let alpha = threshold_factor(training, cfg.false_alarm_probability);
    (0..n)
        .map(|i| {
            let mut sum = 0.0;
            for c in (guard + 1)..=(guard + training) {
                let off = c as i64 * stride;
                sum += power[(i + off).rem_euclid(n) as usize] + power[(i - off).rem_euclid(n) as usize];
            }
            let mean = sum / (2 * training) as f64;
            power[i as usize] > alpha * mean
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DopplerPeak {
    pub frequency: f64,
    pub magnitude: f64,
}

/// CFAR peaks of a spectrum on `axis`, refined by a parabola through the
/// log-power of the three bins around each maximum and merged when closer
/// than `resolution`.
pub fn detect_peaks(power: &[f64], axis: &[f64], resolution: f64, cfg: &CfarConfig) -> Vec<DopplerPeak> {
    let n = power.len();
    if n < 3 || power.iter().all(|&p| p <= 0.0) {
        return Vec::new();
    }
    let bin = axis[1] - axis[0];
    let stride = ((resolution / bin).round() as usize).max(1);
    let mask = cfar_mask(power, cfg, stride);
    let max = power.iter().cloned().fold(0.0, f64::max);
    let floor = cfg.relative_floor_db.map_or(0.0, |db| max * 10f64.powf(-db / 10.0));
    let span = bin * n as f64;
    let mut peaks: Vec<DopplerPeak> = Vec::new();
    for i in 0..n {
        let (l, r) = (power[(i + n - 1) % n], power[(i + 1) % n]);
        let p = power[i];
        if !(mask[i] && p >= l && p > r && p > floor) {
            continue;
        }
        let delta = if l > 0.0 && r > 0.0 {
            let (a, b, c) = (l.ln(), p.ln(), r.ln());
            let den = a - 2.0 * b + c;
            if den < 0.0 {
                (0.5 * (a - c) / den).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        } else {
            0.0
        };
        let mut f = axis[i] + delta * bin;
        let lo = axis[0];
        f = lo + (f - lo).rem_euclid(span);
        if cfg.exclude_zero && f.abs() < 0.5 * resolution {
            continue;
        }
        peaks.push(DopplerPeak { frequency: f, magnitude: p });
    }
    merge_peaks(peaks, resolution, span)
}

/// Keeps the strongest of any peaks closer than `resolution` (circularly).
fn merge_peaks(mut peaks: Vec<DopplerPeak>, resolution: f64, span: f64) -> Vec<DopplerPeak> {
    peaks.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude).then(a.frequency.total_cmp(&b.frequency)));
    let mut kept: Vec<DopplerPeak> = Vec::new();
    for p in peaks {
        let close = kept.iter().any(|q| {
            let d = (p.frequency - q.frequency).rem_euclid(span);
            d.min(span - d) < resolution
        });
        if !close {
            kept.push(p);
        }
    }
    kept.sort_by(|a, b| a.frequency.total_cmp(&b.frequency));
    kept
}

/// Detected peaks of every pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DopplerPeakSet {
    pub peaks: Vec<Vec<DopplerPeak>>,
    pub count: usize,
    pub resolution: f64,
}

impl DopplerPeakSet {
    pub fn from_spectra(spectra: &DopplerSpectra, resolution: f64, cfg: &CfarConfig) -> Self {
        let peaks: Vec<Vec<DopplerPeak>> = spectra
            .power
            .iter()
            .map(|p| detect_peaks(p, &spectra.axis, resolution, cfg))
            .collect();
        let counts: Vec<usize> = peaks.iter().map(Vec::len).collect();
        Self {
            count: estimate_target_count(&counts),
            peaks,
            resolution,
        }
    }

    pub fn counts(&self) -> Vec<usize> {
        self.peaks.iter().map(Vec::len).collect()
    }
}

/// Most frequent count, ties resolved to the larger count.
pub fn estimate_target_count(counts: &[usize]) -> usize {
    let mut hist = BTreeMap::new();
    for &c in counts {
        *hist.entry(c).or_insert(0usize) += 1;
    }
    hist.into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)))
        .map_or(0, |(c, _)| c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseLocations {
    pub locations: Vec<Vec2>,
    /// Residual image value at each location when it was picked.
    pub magnitudes: Vec<f64>,
    /// Fewer than the requested number of peaks stood above the noise level.
    pub truncated: bool,
}

/// Iterative SAF subtraction on a non-negative magnitude image.
///
/// Each round takes the strongest residual pixel and subtracts the SAF
/// magnitude scaled to it, clamping at zero. Stops early once the residual
/// peak no longer exceeds the median of the input image.
pub fn coarse_localize(image: &RealImage, saf: &Saf, count: usize) -> Result<CoarseLocations> {
    let grid = &image.grid;
    if (grid.pixel_size - saf.grid.pixel_size).abs() > 1e-12 * grid.pixel_size {
        return Err(Error::GridMismatch("SAF pixel size differs from the image".into()));
    }
    let nx = grid.nx();
    let mut residual = image.values.clone();
    let noise = crate::sync::median(&image.values);
    let mut out = CoarseLocations {
        locations: Vec::with_capacity(count),
        magnitudes: Vec::with_capacity(count),
        truncated: false,
    };
    for _ in 0..count {
        let peak = RealImage {
            grid: grid.clone(),
            values: residual,
        };
        let (idx, value) = peak.argmax();
        residual = peak.values;
        if !(value > noise) || value <= 0.0 {
            out.truncated = true;
            log::warn!(
                "only {} of {} peaks stand above the image median",
                out.locations.len(),
                count
            );
            break;
        }
        let (px, py) = ((idx % nx) as i64, (idx / nx) as i64);
        for (i, r) in residual.iter_mut().enumerate() {
            let (ix, iy) = ((i % nx) as i64, (i / nx) as i64);
            let h = saf.magnitude_at_offset(ix - px, iy - py);
            if h > 0.0 {
                *r = (*r - value * h).max(0.0);
            }
        }
        out.locations.push(grid.point(idx));
        out.magnitudes.push(value);
    }
    Ok(out)
}
