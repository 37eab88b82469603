//! `voxgraph` command-line front end.
//!
//! Every command echoes its resolved settings on standard error before doing
//! any work. Exit status: 0 success, 1 usage or configuration error, 2 data
//! error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use voxgraph::data::dataset::{read_image, read_labels, read_manifest, write_case, write_labels, write_manifest, SEG_FILE};
use voxgraph::data::{generate_synthetic_case, pad_extents, synth_id, synth_seed, DiskDataset};
use voxgraph::inference::plan_tiles;
use voxgraph::metrics::{evaluate_case, missing_rows, summarize, to_csv, Hd95Variant, MetricsRow};
use voxgraph::tensor::Checkpoint;
use voxgraph::trainer::{load_model, runlog, segment, TrainConfig, Trainer, LAST_CHECKPOINT};
use voxgraph::verify::{self, CheckReport};
use voxgraph::{Error, Result};

#[derive(Parser)]
#[command(name = "voxgraph", version, about = "Graph cross attention U-Net for 3D brain tumour segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in the on-disk case layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        cases: usize,
        /// Cubic edge length: 16, 32 or 64.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on a dataset directory, writing checkpoints and the run log.
    Train {
        /// key=value configuration file; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Extra key=value overrides applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from the last checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score predicted label volumes against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Voxel spacing in mm as D,H,W; defaults to the ground-truth header.
        #[arg(long, value_delimiter = ',')]
        spacing: Option<Vec<f64>>,
        /// CSV destination; defaults to metrics.csv in the prediction directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Hd95Arg::Standard)]
        hd95: Hd95Arg,
    },
    /// Segment case directories or whole datasets with a trained checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Case directories (four modality files) or dataset roots with a manifest.
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
    },
    /// Finite-difference gradient checks in 64-bit arithmetic.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scope::All)]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Hd95Arg {
    Standard,
    PaperLiteral,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Ops,
    Gca,
    End2end,
    All,
}

fn banner(lines: &[(&str, String)]) {
    eprintln!("# resolved configuration");
    for (k, v) in lines {
        eprintln!("{}={}", k, v);
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn synth(out: &Path, cases: usize, size: usize, seed: u64, force: bool) -> Result<i32> {
    banner(&[
        ("out", out.display().to_string()),
        ("cases", cases.to_string()),
        ("size", size.to_string()),
        ("seed", seed.to_string()),
        ("force", force.to_string()),
    ]);
    if out.is_dir() && fs::read_dir(out)?.next().is_some() {
        if !force {
            return Err(usage(format!(
                "{} exists and is not empty; pass --force to replace it",
                out.display()
            )));
        }
        fs::remove_dir_all(out)?;
    }
    fs::create_dir_all(out)?;
    let mut ids = Vec::with_capacity(cases);
    for i in 0..cases {
        let case = generate_synthetic_case(&synth_id(i), synth_seed(seed, i), size, [1.0; 3])?;
        write_case(out, &case)?;
        ids.push(case.id);
    }
    write_manifest(out, &ids)?;
    eprintln!("wrote {} cases to {}", cases, out.display());
    Ok(0)
}

fn train(config: Option<&Path>, data: &Path, out: &Path, overrides: &[String], resume: bool) -> Result<i32> {
    let mut cfg = match config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {:?}", kv)))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    banner(&[("data", data.display().to_string()), ("out", out.display().to_string())]);
    eprint!("{}", cfg.to_kv());

    let dataset = DiskDataset::open(data)?;
    let last = out.join(LAST_CHECKPOINT);
    let mut trainer = if resume && last.exists() {
        let ckpt = Checkpoint::load(&last).map_err(|e| Error::File {
            path: last.clone(),
            message: e.to_string(),
        })?;
        let t = Trainer::resume(cfg, &ckpt)?;
        eprintln!("resuming after epoch {}", t.epochs_done());
        t
    } else {
        Trainer::new(cfg)?
    };
    println!("{}", runlog::RUNLOG_HEADER);
    let outcome = trainer.fit(&dataset, Some(out), |row| {
        if let Some(line) = runlog::to_csv(std::slice::from_ref(row)).lines().nth(1) {
            println!("{}", line);
        }
    })?;
    match outcome.best {
        Some((epoch, dice)) => eprintln!("best mean validation Dice {:.4} at epoch {}", dice, epoch),
        None => eprintln!("no validation epochs were run"),
    }
    Ok(0)
}

/// Prediction for `id`: `<pred>/<id>/seg.nii`, or `<pred>/<id>.nii`.
fn prediction_path(pred: &Path, id: &str) -> Option<PathBuf> {
    [pred.join(id).join(SEG_FILE), pred.join(format!("{}.nii", id))]
        .into_iter()
        .find(|p| p.is_file())
}

fn eval(pred: &Path, gt: &Path, spacing: Option<&[f64]>, out: Option<&Path>, hd95: Hd95Arg) -> Result<i32> {
    let spacing = match spacing {
        None => None,
        Some([d, h, w]) if [d, h, w].iter().all(|s| **s > 0.0 && s.is_finite()) => Some([*d, *h, *w]),
        Some(other) => return Err(usage(format!("--spacing needs three positive values, got {:?}", other))),
    };
    let variant = match hd95 {
        Hd95Arg::Standard => Hd95Variant::Standard,
        Hd95Arg::PaperLiteral => Hd95Variant::PaperLiteral,
    };
    let out = out.map_or_else(|| pred.join("metrics.csv"), Path::to_path_buf);
    banner(&[
        ("pred", pred.display().to_string()),
        ("gt", gt.display().to_string()),
        ("spacing", spacing.map_or("header".into(), |s| format!("{},{},{}", s[0], s[1], s[2]))),
        ("hd95", format!("{:?}", variant)),
        ("out", out.display().to_string()),
    ]);

    let ids = read_manifest(gt)?;
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut incomplete = 0;
    for id in &ids {
        let (truth, header_spacing) = read_labels(&gt.join(id).join(SEG_FILE))?;
        let Some(path) = prediction_path(pred, id) else {
            eprintln!("{}: no prediction found", id);
            incomplete += 1;
            rows.extend(missing_rows(id, None, "missing"));
            continue;
        };
        let (p, _) = read_labels(&path)?;
        if p.dims != truth.dims {
            eprintln!("{}: prediction {:?} vs ground truth {:?}", id, p.dims, truth.dims);
            incomplete += 1;
            rows.extend(missing_rows(id, None, "shape_mismatch"));
            continue;
        }
        rows.extend(evaluate_case(id, None, &p, &truth, spacing.unwrap_or(header_spacing), variant)?);
    }
    let csv = to_csv(&rows);
    print!("{}", csv);
    fs::write(&out, &csv)?;
    for (region, s) in summarize(&rows) {
        eprintln!(
            "{}: mean Dice {:.4}, mean HD95 {} over {} cases",
            region,
            s.dice,
            s.hd95.map_or("n/a".into(), |h| format!("{:.3}", h)),
            s.cases
        );
    }
    if incomplete > 0 {
        eprintln!("{} of {} cases had no usable prediction", incomplete, ids.len());
        return Ok(2);
    }
    Ok(0)
}

/// `(dataset root, case id)` pairs named by an `--in` path.
fn expand_input(path: &Path) -> Result<Vec<(PathBuf, String)>> {
    if path.join(voxgraph::data::dataset::MANIFEST).is_file() {
        return Ok(read_manifest(path)?
            .into_iter()
            .map(|id| (path.to_path_buf(), id))
            .collect());
    }
    let id = path.file_name().and_then(|n| n.to_str());
    match (path.parent(), id) {
        (Some(root), Some(id)) if path.is_dir() => Ok(vec![(root.to_path_buf(), id.to_string())]),
        _ => Err(Error::File {
            path: path.to_path_buf(),
            message: "not a case directory or dataset root".into(),
        }),
    }
}

fn infer(ckpt_path: &Path, inputs: &[PathBuf], out: &Path, overlap: f64) -> Result<i32> {
    let ckpt = Checkpoint::load(ckpt_path).map_err(|e| Error::File {
        path: ckpt_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (mut cfg, net, params) = load_model(&ckpt)?;
    cfg.infer_overlap = overlap;
    cfg.validate()?;
    banner(&[("ckpt", ckpt_path.display().to_string()), ("out", out.display().to_string())]);
    eprint!("{}", cfg.to_kv());

    let mut cases = Vec::new();
    for p in inputs {
        cases.extend(expand_input(p)?);
    }
    fs::create_dir_all(out)?;
    let mut ids = Vec::with_capacity(cases.len());
    for (root, id) in &cases {
        let (image, dims, spacing) = read_image(root, id)?;
        let tiles = plan_tiles(pad_extents(dims, cfg.roi()), cfg.roi(), cfg.infer_overlap)?
            .tiles()
            .len();
        let t = Instant::now();
        let labels = segment(&cfg, &net, &params, &image)?;
        let dir = out.join(id);
        fs::create_dir_all(&dir)?;
        write_labels(&dir.join(SEG_FILE), &labels, spacing)?;
        eprintln!(
            "{}: {:?}, {}, {} tumour voxels, {:.2}s",
            id,
            dims,
            if tiles == 1 { "single tile".to_string() } else { format!("{} tiles", tiles) },
            labels.data.iter().filter(|&&l| l != 0).count(),
            t.elapsed().as_secs_f64()
        );
        ids.push(id.clone());
    }
    write_manifest(out, &ids)?;
    Ok(0)
}

fn gradcheck(scope: Scope, seed: u64) -> Result<i32> {
    let name = match scope {
        Scope::Ops => "ops",
        Scope::Gca => "gca",
        Scope::End2end => "end2end",
        Scope::All => "all",
    };
    banner(&[
        ("scope", name.into()),
        ("seed", seed.to_string()),
        ("tolerance", verify::TOLERANCE.to_string()),
    ]);
    let t = Instant::now();
    let reports: Vec<CheckReport> = match scope {
        Scope::Ops => verify::check_ops(seed)?,
        Scope::Gca => verify::check_gca(seed)?,
        Scope::End2end => verify::check_end2end(seed)?,
        Scope::All => verify::check_all(seed)?,
    };
    let mut failed = 0;
    for r in &reports {
        println!(
            "{} {:.3e} {}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.max_relative_error,
            r.name
        );
        failed += usize::from(!r.passed());
    }
    println!(
        "{} of {} checks passed in {:.1}s",
        reports.len() - failed,
        reports.len(),
        t.elapsed().as_secs_f64()
    );
    Ok(if failed == 0 { 0 } else { 3 })
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth {
            out,
            cases,
            size,
            seed,
            force,
        } => synth(&out, cases, size, seed, force),
        Command::Train {
            config,
            data,
            out,
            overrides,
            resume,
        } => train(config.as_deref(), &data, &out, &overrides, resume),
        Command::Eval {
            pred,
            gt,
            spacing,
            out,
            hd95,
        } => eval(&pred, &gt, spacing.as_deref(), out.as_deref(), hd95),
        Command::Infer {
            ckpt,
            inputs,
            out,
            overlap,
        } => infer(&ckpt, &inputs, &out, overlap),
        Command::Gradcheck { scope, seed } => gradcheck(scope, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    voxgraph::tune_allocator();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
