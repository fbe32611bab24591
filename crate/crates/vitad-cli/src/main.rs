use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vitad::config::RunConfig;
use vitad::data::{generate_synthetic, load_image, load_layout, normalize, DatasetIndex};
use vitad::io::{export_anomaly_map, load_archive, sidecar_path, write_report, ReportFile};
use vitad::scoring::AnomalyMap;
use vitad::train::{evaluate, train, write_checkpoints, TestSet};
use vitad::Error;

/// Plain-ViT reconstruction for multi-class anomaly detection.
///
/// Any config key can also be given as a flag, e.g. `--train.lr 3e-4` or
/// `--model.patch_size=8`. Flags override the config file.
#[derive(Debug, Parser)]
#[command(name = "vitad", version)]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic multi-class dataset in MVTec layout.
    Synth {
        /// Number of texture classes.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        out: PathBuf,
    },
    /// Train fuser and decoder; writes checkpoints and a manifest.
    Train { data: PathBuf, out: PathBuf },
    /// Score a test split and write a per-class metric report.
    Eval {
        /// Checkpoint archive, or a training output directory.
        checkpoint: PathBuf,
        data: PathBuf,
        out: PathBuf,
        /// Use ground-truth masks as anomaly maps.
        #[arg(long)]
        oracle_masks: bool,
        /// Also write every anomaly map as a PGM.
        #[arg(long)]
        export_maps: bool,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Score one image; prints `score=<value>`.
    Infer {
        checkpoint: PathBuf,
        image: PathBuf,
        /// Output path without extension; `.pgm` and `.txt` are added.
        out_prefix: PathBuf,
    },
}

type Overrides = Vec<(String, String)>;

/// Splits `--section.key value` and `--section.key=value` pairs off argv.
fn extract_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Overrides), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.to_str().and_then(|s| s.strip_prefix("--")).filter(|s| s.contains('.')) else {
            rest.push(arg);
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .and_then(|v| v.into_string().ok())
                    .ok_or_else(|| format!("--{flag} needs a value"))?;
                (flag.to_string(), v)
            }
        };
        if !RunConfig::is_key(&key) {
            return Err(format!("unknown config key {key:?}"));
        }
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn resolve(base: Option<&Path>, file: Option<&Path>, overrides: &[(String, String)]) -> vitad::Result<RunConfig> {
    let mut cfg = RunConfig::toy();
    for path in base.into_iter().chain(file) {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Archive and the training config saved beside it.
fn checkpoint_paths(checkpoint: &Path) -> (PathBuf, Option<PathBuf>) {
    let (archive, dir) = if checkpoint.is_dir() {
        (checkpoint.join("best.vtad"), checkpoint.to_path_buf())
    } else {
        let dir = checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
        (checkpoint.to_path_buf(), dir)
    };
    let cfg = dir.join("config.txt");
    (archive, cfg.is_file().then_some(cfg))
}

fn load_index(data: &Path, cfg: &RunConfig) -> vitad::Result<DatasetIndex> {
    let mut index = load_layout(data)?;
    for w in &index.warnings {
        eprintln!("warning: {w}");
    }
    if !cfg.data.classes.is_empty() {
        index.restrict(&cfg.data.classes)?;
    }
    Ok(index)
}

fn run(cli: Cli, overrides: &[(String, String)]) -> vitad::Result<()> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::Synth { classes, seed, out } => {
            let mut cfg = resolve(None, file, overrides)?;
            if let Some(n) = classes {
                cfg.synth.num_classes = n;
            }
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            let summary = generate_synthetic(&cfg.synth, &out)?;
            println!("{summary}");
        }
        Command::Train { data, out } => {
            let cfg = resolve(None, file, overrides)?;
            println!("{}", cfg.train_summary());
            let index = load_index(&data, &cfg)?;
            let mut model = cfg.build_model()?;
            let mut test = if cfg.train.eval_points > 0 && index.test().next().is_some() {
                Some(TestSet::load(&index, cfg.model.vit.image_size, &cfg.data.norm)?)
            } else {
                None
            };
            let outcome = train(&mut model, &index, test.as_mut(), &cfg, &mut |p| println!("{p}"))?;
            write_checkpoints(&out, &model, &outcome)?;
            println!(
                "best epoch {} of {}; wrote {}",
                outcome.manifest.best_epoch,
                outcome.manifest.final_epoch,
                out.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            oracle_masks,
            export_maps,
            workers,
        } => {
            let (archive, saved) = checkpoint_paths(&checkpoint);
            let mut cfg = resolve(saved.as_deref(), file, overrides)?;
            cfg.eval.oracle_masks |= oracle_masks;
            if let Some(w) = workers {
                cfg.eval.workers = w.max(1);
            }
            let mut model = cfg.build_model()?;
            if !cfg.eval.oracle_masks {
                model.load_all(&load_archive(&archive)?)?;
            }
            let index = load_index(&data, &cfg)?;
            let mut test = TestSet::load(&index, cfg.model.vit.image_size, &cfg.data.norm)?;
            let ev = evaluate(&model, &mut test, &cfg.eval)?;
            for w in &ev.mean.warnings {
                eprintln!("warning: {w}");
            }
            fs::create_dir_all(&out).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
            let report = ReportFile {
                classes: ev.per_class.clone(),
                mean: ev.mean.clone(),
            };
            let path = out.join("report.csv");
            write_report(&report, &path)?;
            if export_maps {
                for (r, map) in test.records.iter().zip(&ev.maps) {
                    let dir = out.join("maps").join(&r.class).join(&r.defect_type);
                    fs::create_dir_all(&dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
                    let stem = r.image_path.file_stem().unwrap_or_default();
                    export_anomaly_map(map, &dir.join(stem).with_extension("pgm"))?;
                }
            }
            print!("{}", vitad::io::render_report_csv(&report));
        }
        Command::Infer {
            checkpoint,
            image,
            out_prefix,
        } => {
            let (archive, saved) = checkpoint_paths(&checkpoint);
            let cfg = resolve(saved.as_deref(), file, overrides)?;
            let mut model = cfg.build_model()?;
            model.load_all(&load_archive(&archive)?)?;
            let img = normalize(&load_image(&image, cfg.model.vit.image_size)?, &cfg.data.norm)?;
            let rec = model.forward(&img)?;
            let map = AnomalyMap::from_reconstruction(&rec, model.vit(), &cfg.eval.scoring)?;
            let pgm = sidecar_path(&out_prefix, "pgm");
            export_anomaly_map(&map, &pgm)?;
            println!("score={}", map.image_score);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match extract_overrides(std::env::args_os().collect()) {
        Ok(x) => x,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) | Error::Tensor(vitad::tensor::TensorError::NonFinite { .. }) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
