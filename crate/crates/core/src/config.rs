//! Scenario files: one JSON document with unit-suffixed keys, converted into
//! a [`Scenario`] and a [`PipelineConfig`].
//!
//! Angles are radians internally; `_deg` keys are accepted here only.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::association::AssociationConfig;
use crate::channel::{LosModel, Scenario};
use crate::clocks::ClockParams;
use crate::detection::{AreaOfInterest, CfarConfig};
use crate::error::{Error, Result};
use crate::geometry::{Device, Target, Vec2, Waveform, SPEED_OF_LIGHT};
use crate::imaging::{DelayInterpolation, SlowTimeWindow};
use crate::pipeline::montecarlo::{MonteCarloSpec, Randomization};
use crate::pipeline::{Method, PipelineConfig, SceneConfig};
use crate::sync::{LosSelection, SyncConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub seed: u64,
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub targets: Vec<TargetSpec>,
    pub waveform: WaveformSpec,
    #[serde(default)]
    pub clocks: ClockSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub grid: GridSpec,
    #[serde(default)]
    pub pipeline: PipelineSpec,
    #[serde(default)]
    pub montecarlo: Option<MonteCarloFileSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub position_m: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation_rad: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation_deg: Option<f64>,
    pub antenna_count: usize,
    /// Half a carrier wavelength when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub antenna_spacing_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub position_m: [f64; 2],
    #[serde(default)]
    pub velocity_mps: [f64; 2],
    #[serde(default = "one")]
    pub rcs_m2: f64,
    #[serde(default)]
    pub scattering_phase_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveformSpec {
    pub carrier_frequency_hz: f64,
    pub bandwidth_hz: f64,
    pub subcarrier_count: usize,
    pub repetition_interval_s: f64,
    pub slow_time_count: usize,
    #[serde(default = "one")]
    pub pilot_power_w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockPreset {
    Ideal,
    /// Timing offsets up to ten samples, 1e-4 CFO and AR(1) drift.
    #[default]
    Impaired,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockSpec {
    #[serde(default)]
    pub preset: ClockPreset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing_offset_max_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cfo_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ar_coefficient: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub innovation_scale: Option<f64>,
    /// Defaults to the scenario seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub tx_cfo_time_distortion: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Per-antenna SNR of target 0; noiseless when absent.
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default = "yes")]
    pub include_los: bool,
    #[serde(default)]
    pub los_model: LosModel,
    #[serde(default = "forty")]
    pub self_coupling_isolation_db: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            snr_db: None,
            include_los: true,
            los_model: LosModel::default(),
            self_coupling_isolation_db: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub center_m: [f64; 2],
    pub half_size_m: [f64; 2],
    pub pixel_size_m: f64,
    /// Area summed for the Doppler spectra; the scene when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aoi_center_m: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aoi_half_size_m: Option<[f64; 2]>,
    #[serde(default = "five_mm")]
    pub aoi_pixel_size_m: f64,
    /// Beam steering point of every device; the scene centre when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beam_focus_m: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    #[serde(default = "two")]
    pub iterations: usize,
    #[serde(default = "four")]
    pub doppler_oversample: usize,
    #[serde(default = "four")]
    pub cir_oversample: usize,
    #[serde(default)]
    pub delay_interpolation: DelayInterpolation,
    #[serde(default)]
    pub slow_time_window: SlowTimeWindow,
    #[serde(default)]
    pub cfar_guard: Option<usize>,
    #[serde(default)]
    pub cfar_training: Option<usize>,
    #[serde(default)]
    pub cfar_false_alarm_probability: Option<f64>,
    /// `null` disables the relative floor.
    #[serde(default = "cfar_floor")]
    pub cfar_relative_floor_db: Option<f64>,
    #[serde(default)]
    pub exclude_zero_doppler: bool,
    #[serde(default)]
    pub los_selection: LosSelection,
    #[serde(default = "six")]
    pub sync_threshold_db: f64,
    #[serde(default)]
    pub association_prefilter: bool,
    #[serde(default)]
    pub association_tuple_cap: Option<usize>,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all pipeline keys have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloFileSpec {
    #[serde(default = "twenty")]
    pub trials: usize,
    #[serde(default = "default_snrs")]
    pub snr_db: Vec<f64>,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_m: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_velocity_mps: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation_m: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_mps: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity_angle_rad: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rcs_ratio: Option<[f64; 2]>,
    #[serde(default = "default_bins")]
    pub distance_bins: Vec<f64>,
}

impl Default for MonteCarloFileSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all Monte Carlo keys have defaults")
    }
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn forty() -> f64 {
    40.0
}
fn five_mm() -> f64 {
    5e-3
}
fn two() -> usize {
    2
}
fn four() -> usize {
    4
}
fn six() -> f64 {
    6.0
}
fn twenty() -> usize {
    20
}
fn cfar_floor() -> Option<f64> {
    CfarConfig::default().relative_floor_db
}
fn default_snrs() -> Vec<f64> {
    vec![-5.0, 0.0, 5.0]
}
fn all_methods() -> Vec<Method> {
    vec![Method::Movisac, Method::Smi, Method::Isafs]
}
fn default_bins() -> Vec<f64> {
    // Separations are drawn up to three times the coarser resolution, about six
    // mean resolutions for typical layouts.
    vec![0.0, 1.0, 2.0, 3.0, 4.0, 6.0]
}

fn vec2(v: [f64; 2]) -> Vec2 {
    Vec2::new(v[0], v[1])
}

fn pair(v: [f64; 2]) -> (f64, f64) {
    (v[0], v[1])
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Replaces the scenario seed (and the clock seed unless set explicitly).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let w = &self.waveform;
        let waveform = Waveform {
            carrier_frequency: w.carrier_frequency_hz,
            bandwidth: w.bandwidth_hz,
            subcarrier_count: w.subcarrier_count,
            device_count: self.devices.len(),
            repetition_interval: w.repetition_interval_s,
            slow_time_count: w.slow_time_count,
            pilot_power: w.pilot_power_w,
        };
        let f0 = w.carrier_frequency_hz;
        let devices = self
            .devices
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let orientation = match (d.orientation_rad, d.orientation_deg) {
                    (Some(_), Some(_)) => {
                        return Err(Error::Config(format!(
                            "device {i}: give orientation_rad or orientation_deg, not both"
                        )))
                    }
                    (Some(r), None) => r,
                    (None, Some(g)) => g.to_radians(),
                    (None, None) => 0.0,
                };
                let spacing = d.antenna_spacing_m.unwrap_or(SPEED_OF_LIGHT / f0 / 2.0);
                Device::new(vec2(d.position_m), orientation, d.antenna_count, spacing)
                    .map_err(|e| Error::Config(format!("device {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let targets = self
            .targets
            .iter()
            .map(|t| Target {
                position: vec2(t.position_m),
                velocity: vec2(t.velocity_mps),
                rcs: t.rcs_m2,
                scattering_phase: t.scattering_phase_rad,
            })
            .collect();
        let c = &self.clocks;
        let base = match c.preset {
            ClockPreset::Ideal => ClockParams::ideal(),
            ClockPreset::Impaired => ClockParams::impaired(w.bandwidth_hz, 0),
        };
        let clock_params = ClockParams {
            to_max: c.timing_offset_max_s.unwrap_or(base.to_max),
            cfo_std: c.cfo_std.unwrap_or(base.cfo_std),
            ar_coefficient: c.ar_coefficient.unwrap_or(base.ar_coefficient),
            innovation_scale: c.innovation_scale.unwrap_or(base.innovation_scale),
            seed: c.seed.unwrap_or(self.seed),
        };
        let scenario = Scenario {
            devices,
            targets,
            waveform,
            clock_params,
            snr_db: self.noise.snr_db,
            include_los: self.noise.include_los,
            los_model: self.noise.los_model,
            self_coupling_isolation_db: self.noise.self_coupling_isolation_db,
            beam_focus: vec2(self.grid.beam_focus_m.unwrap_or(self.grid.center_m)),
            tx_cfo_time_distortion: c.tx_cfo_time_distortion,
            seed: self.seed,
        };
        scenario.validate().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })?;
        Ok(scenario)
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let g = &self.grid;
        let p = &self.pipeline;
        let mut cfg = PipelineConfig::new(SceneConfig {
            center: vec2(g.center_m),
            half_x: g.half_size_m[0],
            half_y: g.half_size_m[1],
            pixel_size: g.pixel_size_m,
        });
        cfg.aoi = match (g.aoi_center_m, g.aoi_half_size_m) {
            (None, None) => None,
            (center, half) => {
                let center = center.unwrap_or(g.center_m);
                let half = half.unwrap_or(g.half_size_m);
                Some(AreaOfInterest::new(vec2(center), half[0], half[1])?)
            }
        };
        cfg.aoi_pixel_size = g.aoi_pixel_size_m;
        cfg.iterations = p.iterations;
        cfg.doppler_oversample = p.doppler_oversample;
        cfg.cir_oversample = p.cir_oversample;
        cfg.delay_interpolation = p.delay_interpolation;
        cfg.slow_time_window = p.slow_time_window;
        let cfar = CfarConfig::default();
        cfg.cfar = CfarConfig {
            guard: p.cfar_guard.unwrap_or(cfar.guard),
            training: p.cfar_training.unwrap_or(cfar.training),
            false_alarm_probability: p.cfar_false_alarm_probability.unwrap_or(cfar.false_alarm_probability),
            relative_floor_db: p.cfar_relative_floor_db,
            exclude_zero: p.exclude_zero_doppler,
        };
        cfg.sync = SyncConfig {
            selection: p.los_selection,
            threshold_db: p.sync_threshold_db,
            ..SyncConfig::default()
        };
        cfg.association = AssociationConfig {
            prefilter: p.association_prefilter,
            tuple_cap: p.association_tuple_cap.unwrap_or(AssociationConfig::default().tuple_cap),
            ..AssociationConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn monte_carlo_spec(&self) -> MonteCarloSpec {
        let m = self.montecarlo.clone().unwrap_or_default();
        let d = Randomization::default();
        MonteCarloSpec {
            trials: m.trials,
            snr_db: m.snr_db,
            methods: m.methods,
            randomization: Randomization {
                anchor: m.anchor_m.map(vec2).unwrap_or(d.anchor),
                anchor_velocity: m.anchor_velocity_mps.map(vec2).unwrap_or(d.anchor_velocity),
                separation: m.separation_m.map(pair).or(d.separation),
                speed: m.speed_mps.map(pair).unwrap_or(d.speed),
                velocity_angle: m.velocity_angle_rad.map(pair).unwrap_or(d.velocity_angle),
                rcs_ratio: m.rcs_ratio.map(pair).unwrap_or(d.rcs_ratio),
                anchor_rcs: d.anchor_rcs,
            },
            distance_bins: m.distance_bins,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"{
        "seed": 7,
        "devices": [
            {"position_m": [-1.5, 0.0], "orientation_deg": 0.0, "antenna_count": 8},
            {"position_m": [1.5, 0.0], "orientation_rad": 0.0, "antenna_count": 8}
        ],
        "targets": [{"position_m": [1.0, 5.0], "velocity_mps": [0.0, 3.0]}],
        "waveform": {
            "carrier_frequency_hz": 26.5e9, "bandwidth_hz": 400e6, "subcarrier_count": 256,
            "repetition_interval_s": 0.5e-3, "slow_time_count": 16
        },
        "clocks": {"preset": "impaired"},
        "noise": {"snr_db": 0.0},
        "grid": {"center_m": [1.0, 5.0], "half_size_m": [0.1, 0.1], "pixel_size_m": 0.005}
    }"#;

    #[test]
    fn example_converts() {
        let file = ScenarioFile::from_json(EXAMPLE).unwrap();
        let s = file.scenario().unwrap();
        assert_eq!(s.device_count(), 2);
        assert_eq!(s.waveform.device_count, 2);
        assert!((s.devices[0].antenna_spacing - SPEED_OF_LIGHT / 26.5e9 / 2.0).abs() < 1e-15);
        assert_eq!(s.clock_params.seed, 7);
        assert_eq!(s.clock_params.to_max, 10.0 / 400e6);
        assert_eq!(s.beam_focus, Vec2::new(1.0, 5.0));
        let cfg = file.pipeline_config().unwrap();
        assert_eq!(cfg.cir_oversample, 4);
        assert_eq!(cfg.cfar, CfarConfig::default());
        assert!(cfg.aoi.is_none());
    }

    #[test]
    fn degrees_only_at_the_boundary() {
        let text = EXAMPLE.replace(r#""orientation_deg": 0.0"#, r#""orientation_deg": 90.0"#);
        let s = ScenarioFile::from_json(&text).unwrap().scenario().unwrap();
        assert!((s.devices[0].orientation - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        let both = EXAMPLE.replace(r#""orientation_rad": 0.0"#, r#""orientation_rad": 0.0, "orientation_deg": 0.0"#);
        assert!(matches!(ScenarioFile::from_json(&both).unwrap().scenario(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let typo = EXAMPLE.replace("bandwidth_hz", "bandwith_hz");
        assert!(matches!(ScenarioFile::from_json(&typo), Err(Error::Config(_))));
        let bad = EXAMPLE.replace(r#""subcarrier_count": 256"#, r#""subcarrier_count": 0"#);
        assert!(matches!(ScenarioFile::from_json(&bad).unwrap().scenario(), Err(Error::Config(_))));
        let bad_grid = EXAMPLE.replace(r#""pixel_size_m": 0.005"#, r#""pixel_size_m": -1.0"#);
        assert!(ScenarioFile::from_json(&bad_grid).unwrap().pipeline_config().is_err());
    }

    #[test]
    fn seed_override_reaches_clocks_and_round_trips() {
        let file = ScenarioFile::from_json(EXAMPLE).unwrap().with_seed(99);
        let s = file.scenario().unwrap();
        assert_eq!((s.seed, s.clock_params.seed), (99, 99));
        let again = ScenarioFile::from_json(&file.to_json().unwrap()).unwrap();
        assert_eq!(again, file);
        let mc = file.monte_carlo_spec();
        assert_eq!((mc.trials, mc.seed), (20, 99));
    }
}
