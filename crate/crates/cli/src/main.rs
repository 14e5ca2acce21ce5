//! Command-line surface for the segmentation pipeline.
//!
//! Set `PLANESEG_LOG` (e.g. `info`, `debug`) to control log verbosity.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use planeseg::cloud::{build_features, PointCloud};
use planeseg::config::RunConfig;
use planeseg::dataio;
use planeseg::error::Error;
use planeseg::projection::{project, PlaneKind, PlaneSetConfig};
use planeseg::train;

#[derive(Parser)]
#[command(name = "planeseg", version, about = "LiDAR semantic segmentation with point-plane projections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Project a scan onto a 2D grid and export it for inspection.
    Project {
        /// Scan file (16-byte x,y,z,remission records).
        scan: PathBuf,
        /// Projection plane: polar | xy | xz | yz | range.
        #[arg(long)]
        plane: String,
        /// Output file; .csv or .png by extension.
        #[arg(long)]
        out: PathBuf,
        /// Run configuration supplying grid geometry (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build an instance bank from a sequence directory and optionally
    /// write augmented copies of its scans.
    Augment {
        /// Sequence directory holding velodyne/*.bin and labels/*.label.
        sequence: PathBuf,
        /// Instance bank directory (created if missing).
        #[arg(long)]
        bank: PathBuf,
        /// When set, write pasted scans and labels here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run configuration (classes and paste policy).
        #[arg(long)]
        config: PathBuf,
    },
    /// Train per a run configuration.
    Train {
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the validation scenes.
    Eval {
        config: PathBuf,
        checkpoint: PathBuf,
        /// Write per-scene prediction label files into this directory.
        #[arg(long)]
        write_labels: Option<PathBuf>,
    },
    /// Run the finite-difference gradient verification suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Validate a run configuration and print a summary.
    CheckConfig {
        config: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Format { .. } | Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
        Error::EmptyInput(_) | Error::ShapeMismatch(_) => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PLANESEG_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Project {
            scan,
            plane,
            out,
            config,
        } => cmd_project(&scan, &plane, &out, config.as_deref()),
        Command::Augment {
            sequence,
            bank,
            out,
            config,
        } => cmd_augment(&sequence, &bank, out.as_deref(), &config),
        Command::Train { config } => cmd_train(&config),
        Command::Eval {
            config,
            checkpoint,
            write_labels,
        } => cmd_eval(&config, &checkpoint, write_labels.as_deref()),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::CheckConfig { config } => cmd_check_config(&config),
    }
}

fn cmd_project(
    scan: &Path,
    plane: &str,
    out: &Path,
    config: Option<&Path>,
) -> Result<(), Error> {
    let kind = PlaneKind::parse(plane)?;
    let planes = match config {
        Some(path) => RunConfig::load(path)?.plane_set(),
        None => {
            let bounds = planeseg::cloud::CropBounds {
                x_min: -50.0,
                x_max: 50.0,
                y_min: -50.0,
                y_max: 50.0,
                z_min: -3.0,
                z_max: 2.0,
            };
            PlaneSetConfig::from_crop_bounds(&bounds, 0.4)
        }
    };
    let cloud = dataio::read_scan(scan)?;
    if cloud.is_empty() {
        return Err(Error::empty("scan contains no points"));
    }
    let features = build_features::<f64>(&cloud)?;
    let grid = project(&features, &cloud, kind, &planes)?;
    match out.extension().and_then(|e| e.to_str()) {
        Some("csv") => write_grid_csv(out, &grid),
        Some("png") => write_grid_png(out, &grid),
        _ => Err(Error::arg("output extension must be .csv or .png")),
    }
}

fn write_grid_csv(out: &Path, grid: &planeseg::projection::PlaneGrid<f64>) -> Result<(), Error> {
    let mut text = String::from("row,col,occupancy,x,y,z,remission,range\n");
    let (h, w) = (grid.height(), grid.width());
    for row in 0..h {
        for col in 0..w {
            let cell = row * w + col;
            let occ = grid.occupancy[cell];
            if occ == 0 {
                continue;
            }
            let f = grid.cell_features(cell);
            text.push_str(&format!(
                "{row},{col},{occ},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                f[0], f[1], f[2], f[3], f[4]
            ));
        }
    }
    std::fs::write(out, text).map_err(|e| Error::io(out, e))
}

fn write_grid_png(out: &Path, grid: &planeseg::projection::PlaneGrid<f64>) -> Result<(), Error> {
    // Grayscale of the mean range channel, normalized over occupied cells.
    let (h, w) = (grid.height(), grid.width());
    let mut max_range = 0.0f64;
    for cell in 0..h * w {
        if grid.occupancy[cell] > 0 {
            max_range = max_range.max(grid.cell_features(cell)[4]);
        }
    }
    let mut img = image::GrayImage::new(w as u32, h as u32);
    if max_range > 0.0 {
        for row in 0..h {
            for col in 0..w {
                let cell = row * w + col;
                if grid.occupancy[cell] > 0 {
                    let v = (grid.cell_features(cell)[4] / max_range * 255.0).round() as u8;
                    img.put_pixel(col as u32, row as u32, image::Luma([v.max(1)]));
                }
            }
        }
    }
    img.save(out)
        .map_err(|e| Error::arg(format!("writing {}: {e}", out.display())))
}

fn cmd_augment(
    sequence: &Path,
    bank_dir: &Path,
    out: Option<&Path>,
    config: &Path,
) -> Result<(), Error> {
    let config = RunConfig::load(config)?;
    let class_map = config.class_map()?;
    let cutmix = config.cutmix_config();
    let scan_dir = sequence.join("velodyne");
    let label_dir = sequence.join("labels");
    let mut scans: Vec<PathBuf> = std::fs::read_dir(&scan_dir)
        .map_err(|e| Error::io(&scan_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    scans.sort();
    if scans.is_empty() {
        return Err(Error::empty(format!("no scans under {}", scan_dir.display())));
    }

    let mut bank = Vec::new();
    let mut clouds: Vec<(String, PointCloud)> = Vec::new();
    for scan in &scans {
        let stem = scan
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::arg("scan file name is not utf-8"))?
            .to_string();
        let label = label_dir.join(format!("{stem}.label"));
        let cloud = dataio::read_scan_with_labels(scan, &label, &class_map)?;
        bank.extend(planeseg::augment::extract_instances(&cloud, &cutmix, &stem)?);
        clouds.push((stem, cloud));
    }
    if bank.is_empty() {
        return Err(Error::empty(
            "no instances matched the configured rare classes",
        ));
    }
    planeseg::augment::save_bank(bank_dir, &bank)?;
    println!("saved {} instances to {}", bank.len(), bank_dir.display());

    if let Some(out) = out {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.run.seed);
        let scan_out = out.join("velodyne");
        let label_out = out.join("labels");
        std::fs::create_dir_all(&scan_out).map_err(|e| Error::io(&scan_out, e))?;
        std::fs::create_dir_all(&label_out).map_err(|e| Error::io(&label_out, e))?;
        let mut pasted_total = 0usize;
        for (stem, cloud) in &clouds {
            let result = planeseg::augment::paste_instances(cloud, &bank, &cutmix, &mut rng)?;
            pasted_total += result.pasted;
            dataio::write_scan(&scan_out.join(format!("{stem}.bin")), &result.cloud)?;
            let labels = result.cloud.labels.as_ref().expect("labeled scene");
            let raw: Result<Vec<u32>, Error> =
                labels.iter().map(|&l| class_map.unmap(l).map(u32::from)).collect();
            let raw = raw?;
            let ids = result.cloud.instance_ids.clone().unwrap_or_else(|| vec![0; raw.len()]);
            let packed: Vec<u32> = raw
                .iter()
                .zip(&ids)
                .map(|(&r, &i)| (i << 16) | (r & 0xffff))
                .collect();
            let mut bytes = Vec::with_capacity(packed.len() * 4);
            for v in packed {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let path = label_out.join(format!("{stem}.label"));
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        println!(
            "wrote {} augmented scans ({} pasted instances) to {}",
            clouds.len(),
            pasted_total,
            out.display()
        );
    }
    Ok(())
}

fn cmd_train(config: &Path) -> Result<(), Error> {
    let config = RunConfig::load(config)?;
    let report = train::train(&config)?;
    for row in &report.epochs {
        println!(
            "epoch {:>3}  loss {:>9.4}  lr {:>9.6}  val mIoU {:>7.4}",
            row.epoch, row.mean_loss, row.lr, row.val_miou
        );
    }
    println!(
        "best mIoU {:.4} at epoch {} -> {}",
        report.best_miou,
        report.best_epoch,
        report.checkpoint.display()
    );
    println!("log: {}", report.log_csv.display());
    Ok(())
}

fn cmd_eval(config: &Path, checkpoint: &Path, write_labels: Option<&Path>) -> Result<(), Error> {
    let config = RunConfig::load(config)?;
    let report = train::evaluate_checkpoint(&config, checkpoint, write_labels)?;
    let names = config.class_names();
    print!("{}", report.confusion.to_table(names.as_deref())?);
    let csv_path = config.run.out_dir.join("eval_metrics.csv");
    if let Some(parent) = csv_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&csv_path, report.confusion.to_csv(names.as_deref())?)
        .map_err(|e| Error::io(&csv_path, e))?;
    println!("metrics csv: {}", csv_path.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<(), Error> {
    let results = planeseg::gradcheck::full_suite(seed)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok " } else { "FAIL" };
        println!(
            "[{status}] {:<42} rel error {:>12.3e}  (tolerance {:.0e})",
            r.name, r.rel_error, r.tolerance
        );
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::numeric(format!(
            "{failed} gradient checks exceeded tolerance"
        )));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

fn cmd_check_config(path: &Path) -> Result<(), Error> {
    let config = RunConfig::load(path)?;
    let netcfg = config.network_config()?;
    let params = planeseg::network::init_params::<f32>(&netcfg, config.run.seed)?;
    println!("configuration ok: {}", path.display());
    println!("  data source    {:?}", config.data.source);
    println!("  precision      {:?}", config.run.precision);
    println!(
        "  network        L={} C={} K={} classes={} ({} parameters)",
        netcfg.layers,
        netcfg.channels,
        netcfg.k_neighbors,
        netcfg.num_classes,
        params.count()
    );
    for kind in PlaneKind::ALL {
        let (h, w) = netcfg.planes.grid_shape(kind);
        println!("  grid {:<9} {h} x {w}", kind.name());
    }
    println!(
        "  optimizer      peak_lr={} final_lr={} warmup={} epochs={} batch={}",
        config.optimizer.peak_lr,
        config.optimizer.final_lr,
        config.optimizer.warmup_epochs,
        config.optimizer.total_epochs,
        config.optimizer.batch_size
    );
    Ok(())
}
