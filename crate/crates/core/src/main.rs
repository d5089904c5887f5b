use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use geolatent::eval::{
    global_inference, heldout_metrics, load_mask, local_inference, reconstruct_field, GlobalProtocolConfig, InputCondition,
    LocalProtocolConfig,
};
use geolatent::geo::GeoPoint;
use geolatent::model::checkpoint;
use geolatent::model::Model;
use geolatent::modality::{ModalityId, Registry};
use geolatent::run::{load_splits, write_synthetic, RunConfig, Splits, RUN_CONFIG_FILE, TRAIN_LOG_FILE};
use geolatent::train::{checkpoint_path, Trainer};
use geolatent::{Error, Result};

#[derive(Parser)]
#[command(name = "geolatent", version, about = "Train and evaluate a latent-bottleneck field model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the four synthetic modalities and their registry.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5000)]
        points: usize,
    },
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the step count in the config.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Run an evaluation protocol against a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        protocol: Protocol,
        /// Output directory for CSV tables; defaults to the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Target modality name; defaults to the first registered modality.
        #[arg(long)]
        modality: Option<String>,
        /// Local protocol reference point as `lat,lon`.
        #[arg(long, default_value = "20.6,79.0")]
        center: String,
        #[arg(long, value_delimiter = ',', default_value = "0,4,8,16,24")]
        neighbors: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        obs_counts: Vec<usize>,
        /// Number of sampling seeds for the global protocol.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, value_delimiter = ',', default_value = "none,single,all")]
        conditions: Vec<String>,
        /// Global protocol targets; defaults to every modality.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
        /// Training points per modality given as context in the heldout protocol.
        #[arg(long, default_value_t = 64)]
        context: usize,
    },
    /// Predict a modality on a regular lat/lon grid.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        modality: String,
        #[arg(long, default_value_t = 1.0)]
        resolution: f64,
        /// CSV path; the PGM image is written alongside.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        depth: f64,
    },
    /// Print config, registry and parameter counts of a checkpoint.
    Info {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Local,
    Global,
    Heldout,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Registry(_) | Error::Routing(_) | Error::Protocol(_) => 2,
        Error::Numeric(_) | Error::Tensor(_) | Error::Contract(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::GenData { out, seed, points } => gen_data(&out, seed, points),
        Cmd::Train { config, out, steps } => train(&config, &out, steps),
        Cmd::Eval {
            checkpoint,
            protocol,
            out,
            modality,
            center,
            neighbors,
            obs_counts,
            seeds,
            conditions,
            targets,
            context,
        } => {
            let args = EvalArgs {
                modality,
                center,
                neighbors,
                obs_counts,
                seeds,
                conditions,
                targets,
                context,
            };
            eval(&checkpoint, protocol, out.as_deref(), &args)
        }
        Cmd::Reconstruct {
            checkpoint,
            modality,
            resolution,
            out,
            mask,
            depth,
        } => reconstruct(&checkpoint, &modality, resolution, &out, mask.as_deref(), depth),
        Cmd::Info { checkpoint } => info(&checkpoint),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn gen_data(out: &Path, seed: u64, points: usize) -> Result<()> {
    let reg = write_synthetic(out, points, seed)?;
    println!("wrote {} modalities with {points} points each to {}", reg.len(), out.display());
    Ok(())
}

fn train(config: &Path, out: &Path, steps: Option<u64>) -> Result<()> {
    let mut run = RunConfig::load(config)?;
    if let Some(s) = steps {
        run.steps = s;
    }
    let registry = Registry::load(&run.registry_path())?;
    let model_cfg = run.model_config()?;
    run.train.adam.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    run.save(&out.join(RUN_CONFIG_FILE))?;

    let splits = load_splits(&run.data_dir, &registry, run.test_fraction, run.split_seed)?;
    let model = Model::new(model_cfg, registry, &geolatent::geo::HashEmbedding)?;
    let mut trainer = Trainer::new(model, run.train.clone())?;

    let log_path = out.join(TRAIN_LOG_FILE);
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let result = trainer.run(&splits.train, run.steps, Some(out), Some(&mut log));
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let losses = result?;
    match losses.last() {
        Some(l) => println!("trained {} steps, final loss {l:.6}", run.steps),
        None => println!("wrote initialized checkpoint"),
    }
    println!("checkpoint: {}", checkpoint_path(out, None).display());
    Ok(())
}

struct EvalArgs {
    modality: Option<String>,
    center: String,
    neighbors: Vec<usize>,
    obs_counts: Vec<usize>,
    seeds: u64,
    conditions: Vec<String>,
    targets: Vec<String>,
    context: usize,
}

/// Loads a checkpoint together with the data split recorded next to it.
fn load_for_eval(ckpt: &Path) -> Result<(Model, Splits)> {
    let dir = ckpt.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let run = RunConfig::load(&dir.join(RUN_CONFIG_FILE))?;
    let registry = Registry::load(&run.registry_path())?;
    let (model, _) = checkpoint::load(ckpt, Some(&registry))?;
    let splits = load_splits(&run.data_dir, &registry, run.test_fraction, run.split_seed)?;
    Ok((model, splits))
}

fn modality_id(reg: &Registry, name: &str) -> Result<ModalityId> {
    reg.id(name).map_err(|_| {
        let known: Vec<_> = reg.iter().map(|s| s.name.as_str()).collect();
        Error::Config(format!("unknown modality {name:?}; known: {}", known.join(", ")))
    })
}

fn parse_center(s: &str) -> Result<GeoPoint> {
    let bad = || Error::Config(format!("--center expects lat,lon, got {s:?}"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    let lat = a.trim().parse().map_err(|_| bad())?;
    let lon = b.trim().parse().map_err(|_| bad())?;
    Ok(GeoPoint::surface(lat, lon))
}

fn create_csv(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, e.into())
}

fn eval(ckpt: &Path, protocol: Protocol, out: Option<&Path>, a: &EvalArgs) -> Result<()> {
    let (model, splits) = load_for_eval(ckpt)?;
    let reg = model.registry().clone();
    let out = out.unwrap_or_else(|| ckpt.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")));
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let target = match &a.modality {
        Some(n) => modality_id(&reg, n)?,
        None => 0,
    };
    match protocol {
        Protocol::Local => {
            let cfg = LocalProtocolConfig::new(parse_center(&a.center)?, target, a.neighbors.clone());
            let rows = local_inference(&model, &cfg, &splits.test)?;
            let path = out.join("eval_local.csv");
            let mut w = create_csv(&path)?;
            w.write_record(["modality", "neighbors", "metric", "value"]).map_err(csv_err(&path))?;
            println!("local protocol, {} around {}", reg.get(target)?.name, a.center);
            for r in &rows {
                let metric = serde_json::to_value(r.metric)?;
                let metric = metric.as_str().unwrap_or_default();
                w.write_record([reg.get(target)?.name.as_str(), &r.neighbors.to_string(), metric, &r.value.to_string()])
                    .map_err(csv_err(&path))?;
                println!("  k={:<3} {metric} {:.4}", r.neighbors, r.value);
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Protocol::Global => {
            let conditions = a.conditions.iter().map(|c| c.parse()).collect::<Result<Vec<InputCondition>>>()?;
            let targets = if a.targets.is_empty() {
                (0..reg.len()).collect()
            } else {
                a.targets.iter().map(|t| modality_id(&reg, t)).collect::<Result<Vec<_>>>()?
            };
            let cfg = GlobalProtocolConfig {
                obs_counts: a.obs_counts.clone(),
                seeds: (0..a.seeds).collect(),
                conditions,
                targets,
            };
            let rows = global_inference(&model, &cfg, &splits.train, &splits.test)?;
            let path = out.join("eval_global.csv");
            let mut w = create_csv(&path)?;
            w.write_record(["target", "condition", "n_obs", "metric", "mean", "std_error"]).map_err(csv_err(&path))?;
            println!("global protocol over {} seeds", a.seeds);
            for r in &rows {
                let name = &reg.get(r.target)?.name;
                let cond = serde_json::to_value(r.condition)?;
                let cond = cond.as_str().unwrap_or_default();
                let metric = serde_json::to_value(r.metric)?;
                let metric = metric.as_str().unwrap_or_default();
                w.write_record([
                    name.as_str(),
                    cond,
                    &r.n_obs.to_string(),
                    metric,
                    &r.mean.to_string(),
                    &r.std_error.to_string(),
                ])
                .map_err(csv_err(&path))?;
                println!("  {name:<20} {cond:<15} n={:<3} {metric} {:.4} ± {:.4}", r.n_obs, r.mean, r.std_error);
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Protocol::Heldout => {
            let rows = heldout_metrics(&model, &splits.train, &splits.test, a.context, 0)?;
            let path = out.join("eval_heldout.csv");
            let mut w = create_csv(&path)?;
            w.write_record(["modality", "metric", "value", "n"]).map_err(csv_err(&path))?;
            println!("heldout test split, {} context points per modality", a.context);
            for r in &rows {
                let metric = serde_json::to_value(r.metric)?;
                let metric = metric.as_str().unwrap_or_default();
                w.write_record([r.name.as_str(), metric, &r.value.to_string(), &r.n.to_string()])
                    .map_err(csv_err(&path))?;
                println!("  {:<20} {metric} {:.4} (n={})", r.name, r.value, r.n);
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

fn reconstruct(ckpt: &Path, modality: &str, resolution: f64, out: &Path, mask: Option<&Path>, depth: f64) -> Result<()> {
    let (model, _) = checkpoint::load(ckpt, None)?;
    let id = modality_id(model.registry(), modality)?;
    let mask = match mask {
        Some(p) => load_mask(p)?,
        None => Vec::new(),
    };
    let grid = reconstruct_field(&model, id, resolution, depth, &[], &mask)?;
    let spec = model.registry().get(id)?;
    grid.write_csv(out, spec)?;
    let pgm = out.with_extension("pgm");
    grid.write_pgm(&pgm)?;
    println!("{}x{} grid written to {} and {}", grid.n_lat, grid.n_lon, out.display(), pgm.display());
    Ok(())
}

fn info(ckpt: &Path) -> Result<()> {
    let (model, state) = checkpoint::load(ckpt, None)?;
    println!("config: {}", serde_json::to_string_pretty(model.config())?);
    println!("modalities:");
    for (i, s) in model.registry().iter().enumerate() {
        println!("  {i}: {} ({:?})", s.name, s.task_kind);
    }
    if let Some(s) = state {
        println!("trained steps: {}", s.step);
    }
    let breakdown = model.parameter_breakdown();
    let total: usize = breakdown.iter().map(|(_, n)| n).sum();
    println!("parameters: {total}");
    for (name, n) in &breakdown {
        println!("  {name:<16} {n}");
    }
    Ok(())
}
