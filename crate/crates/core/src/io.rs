//! Binary dumps with JSON sidecars, PNG rendering and CSV exports.
//!
//! Binary files are little-endian `f32`; complex values are interleaved
//! `(re, im)` pairs ("complex64").

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{CirCube, Scenario};
use crate::error::{Error, Result};
use crate::imaging::{ComplexImage, DopplerSpectra, PixelGrid, RealImage};

/// SHA-256 of the scenario's canonical JSON, hex encoded.
pub fn scenario_hash(scenario: &Scenario) -> Result<String> {
    let bytes = serde_json::to_vec(scenario)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Sidecar path: `name.bin` becomes `name.json`.
pub fn sidecar_path(data: &Path) -> PathBuf {
    data.with_extension("json")
}

fn write_f32(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Config(format!("{} is not a whole number of f32 values", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CirSidecar {
    /// `[pair, slow_time, antenna, delay]`, C order.
    pub shape: [usize; 4],
    pub dtype: String,
    pub delay_step_s: f64,
    /// Signed delay index of the first stored sample, per pair.
    pub start: Vec<i64>,
    /// Fractional sample position of each pair's delay origin.
    pub origin: Vec<f64>,
    pub period: usize,
    pub circular: bool,
    pub scenario_hash: String,
}

pub fn write_cir(path: &Path, cube: &CirCube, scenario: &Scenario) -> Result<CirSidecar> {
    write_f32(path, cube.values.iter().flat_map(|v| [v.re, v.im]))?;
    let meta = CirSidecar {
        shape: [cube.pair_count, cube.slow_time_count, cube.antenna_count, cube.delay_count],
        dtype: "complex64-le".into(),
        delay_step_s: cube.delay_step,
        start: cube.start.clone(),
        origin: cube.origin.clone(),
        period: cube.period,
        circular: cube.circular(),
        scenario_hash: scenario_hash(scenario)?,
    };
    write_json(&sidecar_path(path), &meta)?;
    Ok(meta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelType {
    /// `f32` magnitude.
    Magnitude,
    /// Interleaved `f32` real and imaginary parts.
    Complex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub nx: usize,
    pub ny: usize,
    pub x_min_m: f64,
    pub x_max_m: f64,
    pub y_min_m: f64,
    pub y_max_m: f64,
    pub pixel_size_m: f64,
    pub pixel_type: PixelType,
    /// Slow-time indices combined into the image, inclusive.
    pub k_range: [usize; 2],
    /// Factor the stored values were divided by (1 when unnormalized).
    pub normalization: f64,
    pub description: String,
    pub scenario_hash: String,
}

impl ImageSidecar {
    pub fn grid(&self) -> Result<PixelGrid> {
        PixelGrid::new(self.x_min_m, self.x_max_m, self.y_min_m, self.y_max_m, self.pixel_size_m)
    }
}

/// Everything about an exported image except the pixels.
#[derive(Debug, Clone)]
pub struct ImageMeta {
    pub k_range: [usize; 2],
    pub normalize: bool,
    pub description: String,
    pub scenario_hash: String,
}

fn sidecar(grid: &PixelGrid, pixel_type: PixelType, norm: f64, meta: &ImageMeta) -> ImageSidecar {
    ImageSidecar {
        nx: grid.nx(),
        ny: grid.ny(),
        x_min_m: grid.x_min,
        x_max_m: grid.x_max,
        y_min_m: grid.y_min,
        y_max_m: grid.y_max,
        pixel_size_m: grid.pixel_size,
        pixel_type,
        k_range: meta.k_range,
        normalization: norm,
        description: meta.description.clone(),
        scenario_hash: meta.scenario_hash.clone(),
    }
}

fn normalizer(peak: f64, normalize: bool) -> f64 {
    if normalize && peak > 0.0 {
        peak
    } else {
        1.0
    }
}

pub fn write_magnitude(path: &Path, image: &RealImage, meta: &ImageMeta) -> Result<ImageSidecar> {
    let norm = normalizer(image.max(), meta.normalize);
    write_f32(path, image.values.iter().map(|v| v / norm))?;
    let side = sidecar(&image.grid, PixelType::Magnitude, norm, meta);
    write_json(&sidecar_path(path), &side)?;
    Ok(side)
}

pub fn write_complex(path: &Path, image: &ComplexImage, meta: &ImageMeta) -> Result<ImageSidecar> {
    let peak = image.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let norm = normalizer(peak, meta.normalize);
    write_f32(path, image.values.iter().flat_map(|v| [v.re / norm, v.im / norm]))?;
    let side = sidecar(&image.grid, PixelType::Complex, norm, meta);
    write_json(&sidecar_path(path), &side)?;
    Ok(side)
}

/// Reads an exported image back as magnitudes, whatever its pixel type.
pub fn read_magnitude(path: &Path) -> Result<(RealImage, ImageSidecar)> {
    let side: ImageSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let grid = side.grid()?;
    if (grid.nx(), grid.ny()) != (side.nx, side.ny) {
        return Err(Error::GridMismatch("sidecar extents disagree with its pixel counts".into()));
    }
    let raw = read_f32(path)?;
    let values: Vec<f64> = match side.pixel_type {
        PixelType::Magnitude => raw.iter().map(|&v| v as f64).collect(),
        PixelType::Complex => raw
            .chunks_exact(2)
            .map(|c| Complex64::new(c[0] as f64, c[1] as f64).norm())
            .collect(),
    };
    if values.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            found: values.len(),
        });
    }
    Ok((RealImage { grid, values }, side))
}

/// Grayscale PNG of `20 log10(|v| / max)`, clipped at `floor_db` (negative).
/// The top row of the PNG is the largest `y`.
pub fn render_png(path: &Path, image: &RealImage, floor_db: f64) -> Result<()> {
    if !(floor_db < 0.0) {
        return Err(Error::Config("the dB floor must be negative".into()));
    }
    let (nx, ny) = (image.grid.nx(), image.grid.ny());
    let peak = image.max();
    let mut pixels = Vec::with_capacity(nx * ny);
    for iy in (0..ny).rev() {
        for ix in 0..nx {
            let v = image.at(ix, iy).abs();
            let db = if peak > 0.0 && v > 0.0 {
                20.0 * (v / peak).log10()
            } else {
                floor_db
            };
            let level = ((db.max(floor_db) - floor_db) / -floor_db * 255.0).round();
            pixels.push(level.clamp(0.0, 255.0) as u8);
        }
    }
    let buf = image::GrayImage::from_raw(nx as u32, ny as u32, pixels)
        .ok_or_else(|| Error::Image("pixel buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))
}

/// One row per frequency bin, one power column per pair, normalized to the
/// strongest bin of each pair.
pub fn spectra_csv(scenario: &Scenario, spectra: &DopplerSpectra) -> String {
    let mut out = String::from("frequency_hz");
    for p in 0..spectra.power.len() {
        let (n, m) = scenario.pair(p);
        out.push_str(&format!(",pair_{n}_{m}"));
    }
    out.push('\n');
    let peaks: Vec<f64> = spectra
        .power
        .iter()
        .map(|row| row.iter().cloned().fold(0.0, f64::max))
        .collect();
    for (b, f) in spectra.axis.iter().enumerate() {
        out.push_str(&format!("{f}"));
        for (row, peak) in spectra.power.iter().zip(&peaks) {
            let v = if *peak > 0.0 { row[b] / peak } else { 0.0 };
            out.push_str(&format!(",{v:.6e}"));
        }
        out.push('\n');
    }
    out
}
