//! `pointfound`: synthesize data, pretrain, probe, ablate and visualize.

mod manifest;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pointfound::config::Config;
use pointfound::distill::{eval_view, read_checkpoint, train, write_checkpoint, Checkpoint};
use pointfound::encoder::Encoder;
use pointfound::modality::unify_features;
use pointfound::pcdata::{read_native, read_ply, write_native, Domain, PointCloud};
use pointfound::rng::PfRng;
use pointfound::synthbench::{ablate, evaluate, featurize_export, gen_indoor, gen_sample, item_seed, Ablation, Condition};
use pointfound::{Error, Result};

use manifest::Entry;

#[derive(Parser)]
#[command(name = "pointfound", version, about = "Multi-domain point-cloud pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic clouds and a manifest.
    Synth {
        /// object, indoor, outdoor or all.
        #[arg(long, value_parser = parse_domains)]
        domain: DomainSet,
        /// Clouds per domain.
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run teacher-student distillation on a manifest.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for `model.ckpt` and `metrics.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear probe of frozen features, one row per domain.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        drop_color: bool,
        #[arg(long)]
        drop_normal: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain and probe a toggled family of configurations.
    Ablate {
        /// grid, rope, blinding or object-aug.
        #[arg(long, value_parser = parse_ablation)]
        what: Ablation,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training metrics of every run.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write a cloud colored by the principal components of its features.
    Featurize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Native (`.upcf`) or PLY cloud.
        #[arg(long = "in")]
        input: PathBuf,
        /// PLY output.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the default configuration.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Debug)]
struct DomainSet(Vec<Domain>);

fn parse_domains(s: &str) -> std::result::Result<DomainSet, String> {
    if s == "all" {
        return Ok(DomainSet(Domain::ALL.to_vec()));
    }
    s.parse::<Domain>().map(|d| DomainSet(vec![d])).map_err(|e| e.to_string())
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => Config::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", p.display())),
            e => e,
        }),
    }
}

fn synth(domains: &[Domain], count: usize, seed: u64, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut entries = Vec::new();
    for &d in domains {
        for k in 0..count {
            let s = item_seed(seed, d, k, false);
            let stem = format!("{d}_{k:04}");
            let mut entry = Entry {
                path: format!("{stem}.upcf"),
                domain: d,
                seed: s,
                frames: Vec::new(),
                poses: None,
            };
            if d == Domain::Indoor {
                let scene = gen_indoor(s);
                write_native(&scene.cloud, out.join(&entry.path))?;
                for (j, f) in scene.frames.clouds.iter().enumerate() {
                    let name = format!("{stem}_f{j}.upcf");
                    write_native(f, out.join(&name))?;
                    entry.frames.push(name);
                }
                let poses = format!("{stem}_poses.csv");
                fs::write(out.join(&poses), manifest::render_poses(&scene.frames.poses)?)?;
                entry.poses = Some(poses);
            } else {
                write_native(&gen_sample(d, s).cloud, out.join(&entry.path))?;
            }
            entries.push(entry);
        }
    }
    fs::write(out.join("manifest.csv"), manifest::render(&entries)?)?;
    Ok(())
}

fn pretrain(config: Option<&Path>, data: &Path, steps: Option<usize>, seed: u64, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = steps {
        cfg.pretrain.train.steps = s;
    }
    cfg.validate()?;
    let (dir, entries) = manifest::load(data)?;
    let samples = entries.iter().map(|e| manifest::load_sample(&dir, e)).collect::<Result<Vec<_>>>()?;
    let mut metrics = Vec::new();
    let result = train(&samples, &cfg.pretrain, seed, &mut metrics);
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.csv"), &metrics)?;
    write_checkpoint(&Checkpoint::from_state(&result?.state), out.join("model.ckpt"))
}

fn probe(checkpoint: &Path, data: &Path, config: Option<&Path>, cond: Condition, seed: u64) -> Result<String> {
    let cfg = load_config(config)?;
    let ck = read_checkpoint(checkpoint)?;
    let enc = Encoder::new(ck.encoder.clone())?;
    let (dir, entries) = manifest::load(data)?;
    let clouds = entries
        .iter()
        .map(|e| {
            let pc = read_native(dir.join(&e.path))?;
            manifest::check_domain(e, pc.domain)?;
            Ok(pc)
        })
        .collect::<Result<Vec<_>>>()?;
    if clouds.is_empty() {
        return Err(Error::InvalidArgument("manifest lists no clouds".into()));
    }
    let ev = evaluate(&enc, ck.eval_params(), &clouds, &cfg.pretrain.grid, &cfg.probe, seed, cond)?;
    let mut out = String::from("domain,mIoU,mAcc,allAcc\n");
    for (d, r) in ev.domains {
        out.push_str(&format!("{d},{:.6},{:.6},{:.6}\n", r.miou, r.macc, r.all_acc));
    }
    Ok(out)
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => read_ply(path),
        _ => read_native(path),
    }
}

fn featurize(checkpoint: &Path, input: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let ck = read_checkpoint(checkpoint)?;
    let enc = Encoder::new(ck.encoder.clone())?;
    let (view, _) = eval_view(&read_cloud(input)?, &cfg.pretrain.grid)?;
    let geom = enc.geometry(&view.coords, view.native_grid, None::<&mut PfRng>)?;
    let features = enc.features(ck.eval_params(), unify_features(&view).view(), &geom)?;
    featurize_export(features.view(), &view, out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { domain, count, seed, out } => synth(&domain.0, count, seed, &out),
        Command::Pretrain {
            config,
            data,
            steps,
            seed,
            out,
        } => pretrain(config.as_deref(), &data, steps, seed, &out),
        Command::Probe {
            checkpoint,
            data,
            config,
            drop_color,
            drop_normal,
            seed,
        } => {
            let cond = Condition { drop_color, drop_normal };
            let report = probe(&checkpoint, &data, config.as_deref(), cond, seed)?;
            io::stdout().write_all(report.as_bytes())?;
            Ok(())
        }
        Command::Ablate { what, config, out, log } => {
            let cfg = load_config(config.as_deref())?;
            let mut sink: Box<dyn Write> = match &log {
                Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
                None => Box::new(io::sink()),
            };
            let csv = ablate(what, &cfg, &mut sink)?.to_csv();
            sink.flush()?;
            match out {
                Some(p) => fs::write(p, csv)?,
                None => io::stdout().write_all(csv.as_bytes())?,
            }
            Ok(())
        }
        Command::Featurize {
            checkpoint,
            input,
            out,
            config,
        } => featurize(&checkpoint, &input, &out, config.as_deref()),
        Command::InitConfig { out } => Ok(fs::write(out, Config::default().to_toml())?),
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("PF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("PF_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
