use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use movisac::channel::{simulate_cir, CirCube, Scenario};
use movisac::config::ScenarioFile;
use movisac::imaging::{cir_options_for, compute_saf, Backprojector, SafOptions};
use movisac::io::{self, ImageMeta};
use movisac::parallel;
use movisac::pipeline::montecarlo::{monte_carlo, summary_csv};
use movisac::pipeline::{run_all, synthesize_and_sync, Method, PipelineConfig};
use movisac::sync::{compensate, geometric_reference, sync_report_csv, synchronize};
use movisac::Error;

/// Exit status for a scenario or command-line problem.
const EXIT_CONFIG: u8 = 2;
const EXIT_SYNC: u8 = 3;
const EXIT_ASSOCIATION: u8 = 4;

#[derive(Parser)]
#[command(name = "movisac", version, about = "Multistatic OFDM imaging of moving targets")]
struct Cli {
    /// Overrides the seed in the scenario file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Scene {
    /// Scenario file (JSON).
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesizes the CIR cube and writes it with a JSON sidecar.
    Simulate {
        #[command(flatten)]
        scene: Scene,
        #[arg(short, long)]
        out: PathBuf,
        /// Write the cube after LOS synchronization.
        #[arg(long)]
        synced: bool,
    },
    /// Per-pair LOS delay, phase and phase bound as CSV.
    SyncReport {
        #[command(flatten)]
        scene: Scene,
        /// Output file; stdout when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Back-projected images over the scene grid.
    Image {
        #[command(flatten)]
        scene: Scene,
        #[arg(short, long)]
        out: PathBuf,
        /// Single pair index `n * N + m` at slow time `--k` instead of the SMI.
        #[arg(long)]
        pair: Option<usize>,
        #[arg(long, default_value_t = 0)]
        k: usize,
        /// Compensate the known LOS geometry only, leaving clock errors in place.
        #[arg(long)]
        no_sync: bool,
        /// Store complex pixels instead of magnitudes (single-pair images only).
        #[arg(long)]
        complex: bool,
        /// Also render a PNG with this dB floor.
        #[arg(long, allow_hyphen_values = true)]
        png_floor_db: Option<f64>,
    },
    /// Spatial ambiguity function at the scene centre and its resolutions.
    Saf {
        #[command(flatten)]
        scene: Scene,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        png_floor_db: Option<f64>,
    },
    /// MovISAC and the baselines on one scenario.
    Pipeline {
        #[command(flatten)]
        scene: Scene,
        /// Output directory for the report, CSVs and images.
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values = ["movisac", "smi", "isafs"])]
        methods: Vec<String>,
    },
    /// Randomized two-target trials over several SNRs.
    Montecarlo {
        #[command(flatten)]
        scene: Scene,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snr_db: Option<Vec<f64>>,
    },
    /// Renders an exported image to PNG on a dB scale.
    Render {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = -40.0, allow_hyphen_values = true)]
        floor_db: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let workers = parallel::workers_from_env();
    match parallel::install(workers, || run(cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Json(_) | Error::GridMismatch(_) | Error::DegenerateGeometry(_) => EXIT_CONFIG,
        Error::SyncFailure { .. } => EXIT_SYNC,
        Error::AssociationInfeasible { .. } | Error::TupleCapExceeded { .. } => EXIT_ASSOCIATION,
        _ => 1,
    }
}

fn load(scene: &Scene, seed: Option<u64>) -> movisac::Result<(ScenarioFile, Scenario, PipelineConfig)> {
    let mut file = ScenarioFile::load(&scene.config)?;
    if let Some(seed) = seed {
        file = file.with_seed(seed);
    }
    let scenario = file.scenario()?;
    let config = file.pipeline_config()?;
    Ok((file, scenario, config))
}

fn raw_cube(scenario: &Scenario, config: &PipelineConfig) -> movisac::Result<CirCube> {
    let scene = config.scene.grid()?;
    let aoi = config.area_of_interest()?.grid(config.aoi_pixel_size)?;
    let opts = cir_options_for(scenario, &[&scene, &aoi], config.cir_oversample);
    simulate_cir(scenario, &scenario.sample_clocks(), &opts)
}

fn ensure_dir(dir: &Path) -> movisac::Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn parse_methods(names: &[String]) -> movisac::Result<Vec<Method>> {
    names
        .iter()
        .map(|n| match n.trim().to_ascii_lowercase().as_str() {
            "movisac" => Ok(Method::Movisac),
            "smi" => Ok(Method::Smi),
            "isafs" => Ok(Method::Isafs),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        })
        .collect()
}

fn run(cli: Cli) -> movisac::Result<ExitCode> {
    match cli.command {
        Command::Simulate { scene, out, synced } => {
            let (_, scenario, config) = load(&scene, cli.seed)?;
            let cube = if synced {
                synthesize_and_sync(&scenario, &config)?.cube
            } else {
                raw_cube(&scenario, &config)?
            };
            let meta = io::write_cir(&out, &cube, &scenario)?;
            println!("{}", serde_json::to_string_pretty(&meta)?);
        }
        Command::SyncReport { scene, out } => {
            let (_, scenario, config) = load(&scene, cli.seed)?;
            let cube = raw_cube(&scenario, &config)?;
            let sync = synchronize(&cube, &scenario, &config.sync)?;
            let csv = sync_report_csv(&scenario, &sync)?;
            match out {
                Some(path) => fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Image {
            scene,
            out,
            pair,
            k,
            no_sync,
            complex,
            png_floor_db,
        } => {
            let (_, scenario, config) = load(&scene, cli.seed)?;
            let cube = raw_cube(&scenario, &config)?;
            let sync = if no_sync {
                geometric_reference(&cube, &scenario)
            } else {
                synchronize(&cube, &scenario, &config.sync)?
            };
            let cube = compensate(cube, &sync)?;
            let bp = Backprojector::new(&scenario, &cube)?.with_interpolation(config.delay_interpolation);
            let grid = config.scene.grid()?;
            let hash = io::scenario_hash(&scenario)?;
            let kk = scenario.waveform.slow_time_count;
            let magnitude = match pair {
                Some(p) => {
                    if p >= scenario.pair_count() || k >= kk {
                        return Err(Error::Config(format!("pair {p} or slow time {k} out of range")));
                    }
                    let img = bp.pair_image(&grid, p, k, None);
                    let meta = ImageMeta {
                        k_range: [k, k],
                        normalize: false,
                        description: format!("pair {p} image at slow time {k}"),
                        scenario_hash: hash.clone(),
                    };
                    if complex {
                        io::write_complex(&out, &img, &meta)?;
                    } else {
                        io::write_magnitude(&out, &img.magnitude(), &meta)?;
                    }
                    img.magnitude()
                }
                None => {
                    if complex {
                        return Err(Error::Config("--complex needs --pair".into()));
                    }
                    let img = bp.smi_magnitude(&grid);
                    let meta = ImageMeta {
                        k_range: [0, kk - 1],
                        normalize: true,
                        description: "sum over slow time of |sum over pairs|".into(),
                        scenario_hash: hash,
                    };
                    io::write_magnitude(&out, &img, &meta)?;
                    img
                }
            };
            if bp.clipped() > 0 {
                log::warn!("{} pixel-pair delays fell outside the CIR window", bp.clipped());
            }
            if let Some(floor) = png_floor_db {
                io::render_png(&out.with_extension("png"), &magnitude, floor)?;
            }
        }
        Command::Saf {
            scene,
            out,
            png_floor_db,
        } => {
            let (_, scenario, config) = load(&scene, cli.seed)?;
            let grid = config.scene.grid()?;
            let opts = SafOptions {
                cir_oversample: config.cir_oversample,
                interpolation: config.delay_interpolation,
                ..SafOptions::default()
            };
            let saf = compute_saf(&scenario, &grid, config.scene.center, &opts)?;
            let img = movisac::imaging::ComplexImage {
                grid: saf.grid.clone(),
                values: saf.values.clone(),
            };
            let meta = ImageMeta {
                k_range: [0, 0],
                normalize: true,
                description: "spatial ambiguity function".into(),
                scenario_hash: io::scenario_hash(&scenario)?,
            };
            io::write_complex(&out, &img, &meta)?;
            if let Some(floor) = png_floor_db {
                io::render_png(&out.with_extension("png"), &img.magnitude(), floor)?;
            }
            println!(
                "{}",
                serde_json::json!({"rho_x_m": saf.rho_x, "rho_y_m": saf.rho_y})
            );
        }
        Command::Pipeline { scene, out, methods } => {
            let (_, scenario, config) = load(&scene, cli.seed)?;
            let methods = parse_methods(&methods)?;
            ensure_dir(&out)?;
            let report = run_all(&scenario, &config, &methods, None)?;
            fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            if let Some(spectra) = &report.spectra {
                fs::write(out.join("spectra.csv"), io::spectra_csv(&scenario, spectra))?;
            }
            if let Some(assoc) = &report.association {
                fs::write(out.join("association.csv"), assoc.table_csv(usize::MAX))?;
            }
            let hash = io::scenario_hash(&scenario)?;
            let kk = scenario.waveform.slow_time_count;
            if let Some(smi) = &report.smi_image {
                let meta = ImageMeta {
                    k_range: [0, kk - 1],
                    normalize: true,
                    description: "SMI magnitude".into(),
                    scenario_hash: hash.clone(),
                };
                io::write_magnitude(&out.join("smi.bin"), smi, &meta)?;
            }
            for (q, img) in report.target_images.iter().enumerate() {
                let meta = ImageMeta {
                    k_range: [0, kk - 1],
                    normalize: true,
                    description: format!("Doppler-compensated image of target {q}"),
                    scenario_hash: hash.clone(),
                };
                io::write_magnitude(&out.join(format!("target_{q}.bin")), &img.magnitude(), &meta)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(e) = &report.association_error {
                eprintln!("association failed: {e}");
                return Ok(ExitCode::from(EXIT_ASSOCIATION));
            }
        }
        Command::Montecarlo {
            scene,
            out,
            trials,
            snr_db,
        } => {
            let (file, scenario, config) = load(&scene, cli.seed)?;
            let mut spec = file.monte_carlo_spec();
            if let Some(t) = trials {
                spec.trials = t;
            }
            if let Some(s) = snr_db {
                spec.snr_db = s;
            }
            ensure_dir(&out)?;
            let result = monte_carlo(&scenario, &config, &spec)?;
            let summary = result.summary(&spec);
            fs::write(out.join("records.csv"), result.records_csv())?;
            fs::write(out.join("summary.csv"), summary_csv(&summary))?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Render { input, out, floor_db } => {
            let (img, _) = io::read_magnitude(&input)?;
            io::render_png(&out, &img, floor_db)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
