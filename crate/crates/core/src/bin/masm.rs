use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use masm::checkpoint::load_into;
use masm::data::{case_seed, gen_phantom, generate_dataset, read_volume, read_volumes, write_volume, PhantomSpec};
use masm::gradcheck::{gradcheck, GradcheckOptions};
use masm::inference::{evaluate, evaluate_masks, predict_mask, write_previews};
use masm::metrics::EvalReport;
use masm::model::{param_group, parameter_count};
use masm::tensor::Primitive;
use masm::train::{prepare, train};
use masm::{Error, Model, Result, RunConfig, Toggles};

#[derive(Parser)]
#[command(name = "masm", version, about = "Multi-modal 3D tumor segmentation on synthetic phantoms")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes seeded phantom cases and a manifest.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Trains on a data directory, or on freshly generated phantoms.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Scores a checkpoint, or stored masks, against labeled cases.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of mask volumes named by case id.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
    },
    /// Writes binary masks for one volume or a directory of volumes.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Also write mid-slice PGM previews.
        #[arg(long)]
        pgm: bool,
    },
    /// Finite-difference check of every parameter group and module toggle.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Prints the resolved config and parameter counts.
    Info,
}

fn load_config(common: &Common, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, fallback) {
        (Some(p), _) => RunConfig::from_file(p)?,
        (None, Some(p)) if p.exists() => RunConfig::from_file(p)?,
        _ => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

/// A checkpoint's sibling `config.txt` is used when no `--config` is given.
fn load_model(common: &Common, checkpoint: &Path) -> Result<Model> {
    let sibling = checkpoint.parent().map(|d| d.join("config.txt"));
    let cfg = load_config(common, sibling.as_deref())?;
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    load_into(checkpoint, &mut model.params)?;
    Ok(model)
}

fn write_report(dir: Option<&Path>, report: &EvalReport) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [("eval.txt", report.to_key_value()), ("eval.tsv", report.to_table())] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
    }
    print!("{}", report.to_key_value());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::GenData { count, size } => {
            let cfg = load_config(common, None)?;
            let dir = out_dir(common, "data");
            let entries = generate_dataset(
                &dir,
                count.unwrap_or(cfg.cases),
                size.unwrap_or(cfg.volume_size),
                cfg.seed,
                cfg.noise,
            )?;
            println!("wrote {} cases to {}", entries.len(), dir.display());
        }
        Command::Train { data } => {
            let cfg = load_config(common, None)?;
            let cases = match data {
                Some(dir) => read_volumes(dir)?,
                None => (0..cfg.cases)
                    .map(|i| {
                        gen_phantom(&PhantomSpec {
                            noise: cfg.noise,
                            ..PhantomSpec::new(case_seed(cfg.seed, i), cfg.volume_size)
                        })
                    })
                    .collect::<Result<_>>()?,
            };
            let dir = out_dir(common, "run");
            let outcome = train(&cfg, &prepare(&cases)?, Some(&dir))?;
            let log = &outcome.log;
            if let Some(f) = &log.final_loss {
                println!("final_loss={}", f.total);
            }
            match log.steps_to(masm::train::LOSS_TARGET) {
                Some(n) => println!("steps_to_target={n}"),
                None => println!("steps_to_target=none"),
            }
            if let Some(e) = &log.final_eval {
                print!("{}", e.to_key_value());
            }
            println!("wall_seconds={:.1}", log.wall.iter().sum::<f64>());
        }
        Command::Eval {
            data,
            checkpoint,
            predictions,
        } => {
            let cases = read_volumes(&data)?;
            let report = match (checkpoint, predictions) {
                (_, Some(dir)) => {
                    load_config(common, None)?;
                    evaluate_masks(&read_volumes(dir)?, &cases)?
                }
                (Some(ckpt), None) => evaluate(&load_model(common, &ckpt)?, &prepare(&cases)?)?,
                (None, None) => return Err(Error::Config("eval needs --checkpoint or --predictions".into())),
            };
            write_report(common.out.as_deref(), &report)?;
        }
        Command::Predict { checkpoint, input, pgm } => {
            let model = load_model(common, &checkpoint)?;
            let inputs = if input.is_dir() {
                read_volumes(&input)?
            } else {
                vec![read_volume(&input)?]
            };
            let dir = out_dir(common, "predictions");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for vol in prepare(&inputs)? {
                let mask = predict_mask(&model, &vol)?;
                let path = dir.join(format!("{}.mmv", vol.case_id));
                write_volume(&path, &mask)?;
                if pgm {
                    write_previews(&dir, &vol.case_id, mask.label.as_ref().unwrap())?;
                }
                println!("wrote {}", path.display());
            }
        }
        Command::Gradcheck { inject_fault } => {
            let cfg = load_config(common, None)?;
            let opts = GradcheckOptions {
                seed: cfg.seed,
                fault: inject_fault.map(|s| s.parse::<Primitive>()).transpose()?,
                ..GradcheckOptions::default()
            };
            let mut failing = Vec::new();
            for toggles in Toggles::ALL {
                let report = gradcheck(toggles, &opts)?;
                print!("{}", report.render());
                failing.extend(report.failing().iter().map(|g| format!("{}/{g}", toggles.label())));
            }
            if !failing.is_empty() {
                return Err(Error::Numeric(format!(
                    "gradcheck failed for: {}",
                    failing.join(", ")
                )));
            }
            println!("gradcheck passed");
        }
        Command::Info => {
            let cfg = load_config(common, None)?;
            print!("{}", cfg.to_text());
            let model = Model::new(cfg.model_config(), cfg.seed)?;
            let mut groups: BTreeMap<&str, usize> = BTreeMap::new();
            for (_, name, t) in model.params.iter() {
                *groups.entry(param_group(name)).or_default() += t.numel();
            }
            for (g, n) in groups {
                println!("params.{g} = {n}");
            }
            println!("params.total = {}", model.parameter_count());
            for t in Toggles::ALL {
                println!("params.config.{} = {}", t.label(), parameter_count(&cfg.backbone(), t)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MASM_LOG_LEVEL", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
