//! Per-device clock errors: timing offset and an AR(1) carrier frequency offset track.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Waveform;
use crate::rng::{stream, StreamTag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockParams {
    /// Upper bound of the uniformly distributed timing offset, seconds.
    pub to_max: f64,
    /// Standard deviation of the initial normalized CFO and of the innovations.
    pub cfo_std: f64,
    pub ar_coefficient: f64,
    pub innovation_scale: f64,
    pub seed: u64,
}

impl ClockParams {
    /// Ideal clocks: no timing or frequency error.
    pub fn ideal() -> Self {
        Self {
            to_max: 0.0,
            cfo_std: 0.0,
            ar_coefficient: 0.99,
            innovation_scale: 0.01,
            seed: 0,
        }
    }

    /// TO up to ten delay samples, 100 ppm initial CFO, slow AR(1) drift.
    pub fn impaired(bandwidth: f64, seed: u64) -> Self {
        Self {
            to_max: 10.0 / bandwidth,
            cfo_std: 1e-4,
            ar_coefficient: 0.99,
            innovation_scale: 0.01,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.to_max >= 0.0 && self.to_max.is_finite()) {
            return Err(Error::Config("to_max must be non-negative".into()));
        }
        if !(self.cfo_std >= 0.0 && self.cfo_std.is_finite()) {
            return Err(Error::Config("cfo_std must be non-negative".into()));
        }
        if !(self.ar_coefficient.abs() < 1.0) {
            return Err(Error::Config("ar_coefficient must lie in (-1, 1)".into()));
        }
        if !self.innovation_scale.is_finite() {
            return Err(Error::Config("innovation_scale must be finite".into()));
        }
        Ok(())
    }

    pub fn is_ideal(&self) -> bool {
        self.to_max == 0.0 && self.cfo_std == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockTrack {
    /// Timing offset, seconds.
    pub to: f64,
    /// Normalized CFO per slow-time index.
    pub cfo: Vec<f64>,
}

impl ClockTrack {
    pub fn ideal(k: usize) -> Self {
        Self {
            to: 0.0,
            cfo: vec![0.0; k],
        }
    }
}

pub fn sample_clock(params: &ClockParams, k: usize, device_index: usize) -> ClockTrack {
    if params.is_ideal() {
        return ClockTrack::ideal(k);
    }
    let mut rng = stream(params.seed, StreamTag::Clock, device_index as u64, 0);
    let to = if params.to_max > 0.0 {
        rng.gen_range(0.0..=params.to_max)
    } else {
        0.0
    };
    let mut cfo = Vec::with_capacity(k);
    if params.cfo_std > 0.0 {
        let normal = Normal::new(0.0, params.cfo_std).expect("finite std");
        let mut beta = normal.sample(&mut rng);
        for i in 0..k {
            if i > 0 {
                beta = params.ar_coefficient * beta + params.innovation_scale * normal.sample(&mut rng);
            }
            cfo.push(beta);
        }
    } else {
        cfo.resize(k, 0.0);
    }
    ClockTrack { to, cfo }
}

pub fn sample_clocks(params: &ClockParams, k: usize, devices: usize) -> Vec<ClockTrack> {
    (0..devices).map(|n| sample_clock(params, k, n)).collect()
}

/// Differential clock errors of the pair (Tx `n`, Rx `m`).
#[derive(Debug, Clone, PartialEq)]
pub struct Differential {
    /// `alpha_n - alpha_m`, seconds.
    pub dto: f64,
    pub dcfo: Vec<f64>,
    /// Phase offset `2 pi f0 dto`, radians.
    pub po: f64,
}

pub fn differential(n: &ClockTrack, m: &ClockTrack, f0: f64) -> Result<Differential> {
    if n.cfo.len() != m.cfo.len() {
        return Err(Error::LengthMismatch {
            expected: n.cfo.len(),
            found: m.cfo.len(),
        });
    }
    let dto = n.to - m.to;
    Ok(Differential {
        dto,
        dcfo: n.cfo.iter().zip(&m.cfo).map(|(a, b)| a - b).collect(),
        po: 2.0 * PI * f0 * dto,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfoCheck {
    pub satisfied: bool,
    /// Largest `|f0 * dcfo|` over pairs and slow-time, Hz.
    pub worst_offset_hz: f64,
    pub worst_pair: (usize, usize),
    pub worst_k: usize,
    pub limit_hz: f64,
}

/// Checks that every differential CFO is far below the subcarrier spacing.
pub fn check_small_cfo(waveform: &Waveform, tracks: &[ClockTrack], margin: f64) -> CfoCheck {
    let mut worst = (0.0, (0, 0), 0);
    for (n, tn) in tracks.iter().enumerate() {
        for (m, tm) in tracks.iter().enumerate() {
            for (k, (a, b)) in tn.cfo.iter().zip(&tm.cfo).enumerate() {
                let off = (waveform.carrier_frequency * (a - b)).abs();
                if off > worst.0 {
                    worst = (off, (n, m), k);
                }
            }
        }
    }
    let limit_hz = margin * waveform.subcarrier_spacing();
    CfoCheck {
        satisfied: worst.0 < limit_hz,
        worst_offset_hz: worst.0,
        worst_pair: worst.1,
        worst_k: worst.2,
        limit_hz,
    }
}
