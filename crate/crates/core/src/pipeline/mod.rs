//! End-to-end processing: synthesis, synchronization, Doppler detection,
//! coarse localization, association and Doppler-compensated imaging, plus the
//! SMI and ISAFS baselines.

pub mod metrics;
pub mod montecarlo;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::association::{associate, velocity_resolution, AssociationConfig, AssociationResult, VelocityRegression};
use crate::channel::{simulate_cir, CirCube, Scenario};
use crate::detection::{coarse_localize, AreaOfInterest, CfarConfig, CoarseLocations, DopplerPeakSet};
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::imaging::{
    cir_options_for, compute_saf_for_offsets, Backprojector, ComplexImage, DopplerSpectra, PixelGrid, RealImage,
    DelayInterpolation, Saf, SafOptions, SlowTimeWindow,
};
use crate::sync::{compensate, synchronize, SyncConfig, SyncEstimate};
pub use metrics::{evaluate, Metrics};

/// Imaging area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub center: Vec2,
    pub half_x: f64,
    pub half_y: f64,
    pub pixel_size: f64,
}

impl SceneConfig {
    pub fn grid(&self) -> Result<PixelGrid> {
        PixelGrid::centered(self.center, self.half_x, self.half_y, self.pixel_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Passes through association, Doppler re-synthesis and imaging.
    pub iterations: usize,
    pub scene: SceneConfig,
    /// Area summed for the Doppler spectra; the scene when absent.
    pub aoi: Option<AreaOfInterest>,
    /// Pixel size of the low-resolution images behind the Doppler spectra.
    pub aoi_pixel_size: f64,
    pub doppler_oversample: usize,
    pub slow_time_window: SlowTimeWindow,
    pub cfar: CfarConfig,
    pub sync: SyncConfig,
    pub association: AssociationConfig,
    pub cir_oversample: usize,
    pub delay_interpolation: DelayInterpolation,
}

impl PipelineConfig {
    pub fn new(scene: SceneConfig) -> Self {
        Self {
            iterations: 2,
            scene,
            aoi: None,
            aoi_pixel_size: 5e-3,
            doppler_oversample: 4,
            slow_time_window: SlowTimeWindow::Hann,
            cfar: CfarConfig::default(),
            sync: SyncConfig::default(),
            association: AssociationConfig::default(),
            cir_oversample: 4,
            delay_interpolation: DelayInterpolation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("at least one association/imaging iteration is required".into()));
        }
        if self.doppler_oversample == 0 || self.cir_oversample == 0 {
            return Err(Error::Config("oversampling factors must be positive".into()));
        }
        if !(self.aoi_pixel_size > 0.0) {
            return Err(Error::Config("AoI pixel size must be positive".into()));
        }
        self.scene.grid()?;
        Ok(())
    }

    pub fn area_of_interest(&self) -> Result<AreaOfInterest> {
        match self.aoi {
            Some(a) => Ok(a),
            None => AreaOfInterest::new(self.scene.center, self.scene.half_x, self.scene.half_y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Movisac,
    Smi,
    Isafs,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Movisac => "movisac",
            Self::Smi => "smi",
            Self::Isafs => "isafs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub locations: Vec<Vec2>,
    pub velocities: Option<Vec<Vec2>>,
    pub velocity_resolutions: Option<Vec<Vec2>>,
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub target_count: usize,
    pub peaks: DopplerPeakSet,
    pub coarse: CoarseLocations,
    pub movisac: Option<MethodReport>,
    pub smi: Option<MethodReport>,
    pub isafs: Option<MethodReport>,
    /// Set when association failed; MovISAC then reports the coarse locations.
    pub association_error: Option<String>,
    /// Total assignment cost of the last association pass.
    pub association_cost: Option<f64>,
    pub timings: Vec<StageTiming>,
    #[serde(skip)]
    pub target_images: Vec<ComplexImage>,
    #[serde(skip)]
    pub smi_image: Option<RealImage>,
    #[serde(skip)]
    pub spectra: Option<DopplerSpectra>,
    #[serde(skip)]
    pub association: Option<AssociationResult>,
}

impl PipelineReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        match m {
            Method::Movisac => self.movisac.as_ref(),
            Method::Smi => self.smi.as_ref(),
            Method::Isafs => self.isafs.as_ref(),
        }
    }
}

struct Clock {
    timings: Vec<StageTiming>,
    last: Instant,
}

impl Clock {
    fn new() -> Self {
        Self {
            timings: Vec::new(),
            last: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: (now - self.last).as_secs_f64(),
        });
        self.last = now;
    }
}

/// Synthesized and synchronized CIRs for a scenario.
pub struct Synchronized {
    pub cube: CirCube,
    pub sync: SyncEstimate,
}

/// Synthesis and OTA synchronization with a delay window covering the scene.
pub fn synthesize_and_sync(scenario: &Scenario, config: &PipelineConfig) -> Result<Synchronized> {
    let scene = config.scene.grid()?;
    let aoi = config.area_of_interest()?.grid(config.aoi_pixel_size)?;
    let opts = cir_options_for(scenario, &[&scene, &aoi], config.cir_oversample);
    let cube = simulate_cir(scenario, &scenario.sample_clocks(), &opts).map_err(Error::at("synthesis"))?;
    let sync = synchronize(&cube, scenario, &config.sync).map_err(Error::at("sync"))?;
    let cube = compensate(cube, &sync).map_err(Error::at("sync"))?;
    Ok(Synchronized { cube, sync })
}

/// SAF at the scene centre, large enough that every pixel offset within the
/// scene lands on it.
pub fn scene_saf(scenario: &Scenario, config: &PipelineConfig) -> Result<Saf> {
    let grid = config.scene.grid()?;
    compute_saf_for_offsets(
        scenario,
        config.scene.center,
        2 * grid.nx() + 1,
        2 * grid.ny() + 1,
        config.scene.pixel_size,
        &SafOptions {
            cir_oversample: config.cir_oversample,
            interpolation: config.delay_interpolation,
            include_los: true,
        },
    )
    .map_err(Error::at("saf"))
}

/// Strongest `count` local maxima (8-neighbourhood) of a magnitude image.
pub fn strongest_peaks(image: &RealImage, count: usize) -> Vec<Vec2> {
    let (nx, ny) = (image.grid.nx(), image.grid.ny());
    let mut peaks: Vec<(f64, usize)> = Vec::new();
    for iy in 0..ny {
        for ix in 0..nx {
            let v = image.at(ix, iy);
            let mut is_max = v > 0.0;
            'scan: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (x, y) = (ix as i64 + dx, iy as i64 + dy);
                    if x < 0 || y < 0 || x >= nx as i64 || y >= ny as i64 {
                        continue;
                    }
                    let w = image.at(x as usize, y as usize);
                    // Ties go to the earlier pixel so plateaus yield one peak.
                    let earlier = (y as usize, x as usize) < (iy, ix);
                    if w > v || (w == v && earlier) {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if is_max {
                peaks.push((v, iy * nx + ix));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    peaks.iter().take(count).map(|&(_, i)| image.grid.point(i)).collect()
}

/// Fine Doppler shift of every pair for a location and velocity.
pub fn resynthesize_doppler(scenario: &Scenario, location: Vec2, velocity: Vec2) -> Result<Vec<f64>> {
    Ok(VelocityRegression::at(&scenario.devices, location, scenario.carrier())?.predict(velocity))
}

/// Runs MovISAC and the selected baselines on one scenario, sharing the
/// common front end. `saf` may be supplied to reuse one across runs.
pub fn run_all(scenario: &Scenario, config: &PipelineConfig, methods: &[Method], saf: Option<&Saf>) -> Result<PipelineReport> {
    scenario.validate()?;
    config.validate()?;
    let mut clock = Clock::new();
    let owned_saf;
    let saf = match saf {
        Some(s) => s,
        None => {
            owned_saf = scene_saf(scenario, config)?;
            clock.lap("saf");
            &owned_saf
        }
    };
    if (saf.grid.pixel_size - config.scene.pixel_size).abs() > 1e-12 {
        return Err(Error::GridMismatch("SAF pixel size differs from the scene".into()));
    }
    let synced = synthesize_and_sync(scenario, config)?;
    clock.lap("synthesis+sync");

    let bp = Backprojector::new(scenario, &synced.cube)
        .map_err(Error::at("imaging"))?
        .with_interpolation(config.delay_interpolation);
    let aoi_grid = config.area_of_interest()?.grid(config.aoi_pixel_size)?;
    let spectra = bp.doppler_spectra(&aoi_grid, config.doppler_oversample, config.slow_time_window);
    let resolution = scenario.waveform.doppler_resolution();
    let peaks = DopplerPeakSet::from_spectra(&spectra, resolution, &config.cfar);
    let count = peaks.count;
    clock.lap("doppler");

    let scene = config.scene.grid()?;
    let magnitude = bp.smi_magnitude(&scene);
    let coarse = coarse_localize(&magnitude, saf, count).map_err(Error::at("coarse"))?;
    clock.lap("coarse");
    if bp.clipped() > 0 {
        log::info!("{} pixel-pair delays fell outside the CIR window", bp.clipped());
    }

    let truth = &scenario.targets;
    let mut report = PipelineReport {
        target_count: count,
        peaks,
        coarse: coarse.clone(),
        movisac: None,
        smi: None,
        isafs: None,
        association_error: None,
        association_cost: None,
        timings: Vec::new(),
        target_images: Vec::new(),
        smi_image: None,
        spectra: Some(spectra),
        association: None,
    };

    if methods.contains(&Method::Smi) {
        let locations = strongest_peaks(&magnitude, count);
        report.smi = Some(MethodReport {
            method: Method::Smi,
            metrics: evaluate(truth, &locations, None, None)?,
            locations,
            velocities: None,
            velocity_resolutions: None,
        });
    }
    if methods.contains(&Method::Isafs) {
        report.isafs = Some(MethodReport {
            method: Method::Isafs,
            metrics: evaluate(truth, &coarse.locations, None, None)?,
            locations: coarse.locations.clone(),
            velocities: None,
            velocity_resolutions: None,
        });
    }

    if methods.contains(&Method::Movisac) && !coarse.locations.is_empty() {
        let mut locations = coarse.locations.clone();
        let mut velocities = Vec::new();
        let mut resolutions = Vec::new();
        let mut images = Vec::new();
        for _ in 0..config.iterations {
            let assoc = match associate(
                &report.peaks,
                &locations,
                &scenario.devices,
                scenario.carrier(),
                &config.association,
            ) {
                Ok(a) => a,
                Err(e) => {
                    log::warn!("association failed: {e}");
                    report.association_error = Some(e.to_string());
                    break;
                }
            };
            velocities = assoc.velocities.clone();
            resolutions = assoc.resolutions.clone();
            report.association_cost = Some(assoc.total_cost());
            images = Vec::with_capacity(locations.len());
            for q in 0..locations.len() {
                let doppler = resynthesize_doppler(scenario, locations[q], velocities[q])?;
                images.push(bp.precompensated(&scene, &doppler));
            }
            for (loc, img) in locations.iter_mut().zip(&images) {
                let (idx, _) = img.magnitude().argmax();
                *loc = scene.point(idx);
            }
            report.association = Some(assoc);
        }
        // The compensated images can move a target to where its Doppler tuple
        // actually focuses, so the velocities are refitted there.
        if report.association_error.is_none() {
            if let Some(assoc) = &report.association {
                for (q, &loc) in locations.iter().enumerate() {
                    let u = VelocityRegression::at(&scenario.devices, loc, scenario.carrier())?;
                    if let Some(v) = u.solve(&assoc.assigned_frequencies(q)) {
                        velocities[q] = v;
                        resolutions[q] =
                            velocity_resolution(loc, &scenario.devices, scenario.carrier(), report.peaks.resolution)?;
                    }
                }
            }
        }
        clock.lap("movisac");
        let have_velocity = report.association_error.is_none() || !velocities.is_empty();
        report.movisac = Some(MethodReport {
            method: Method::Movisac,
            metrics: evaluate(
                truth,
                &locations,
                have_velocity.then_some(velocities.as_slice()),
                have_velocity.then_some(resolutions.as_slice()),
            )?,
            locations,
            velocities: have_velocity.then_some(velocities),
            velocity_resolutions: have_velocity.then_some(resolutions),
        });
        report.target_images = images;
    } else if methods.contains(&Method::Movisac) {
        report.movisac = Some(MethodReport {
            method: Method::Movisac,
            locations: Vec::new(),
            velocities: Some(Vec::new()),
            velocity_resolutions: Some(Vec::new()),
            metrics: None,
        });
    }
    report.smi_image = Some(magnitude);
    report.timings = clock.timings;
    Ok(report)
}

pub fn run_movisac(scenario: &Scenario, config: &PipelineConfig) -> Result<PipelineReport> {
    run_all(scenario, config, &[Method::Movisac], None)
}

pub fn run_smi(scenario: &Scenario, config: &PipelineConfig) -> Result<PipelineReport> {
    run_all(scenario, config, &[Method::Smi], None)
}

pub fn run_isafs(scenario: &Scenario, config: &PipelineConfig) -> Result<PipelineReport> {
    run_all(scenario, config, &[Method::Isafs], None)
}
