use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use gtnp::checkpoint::{load_checkpoint, save_graph, GraphMeta};
use gtnp::data::{load_dataset, prepare_from_manifest, save_dataset, synth_generate, SynthConfig};
use gtnp::error::ErrorClass;
use gtnp::experiment::{evaluate_state, run_experiment, write_trace_csvs, write_uncertainty, EpochsReport, ExperimentConfig};
use gtnp::report::Provenance;
use gtnp::train::initialize;
use gtnp::uncertainty::{global_record, GlobalRecord};
use gtnp::{Error, Result};

#[derive(Parser)]
#[command(name = "gtnp", version, about = "Graph-conditioned transfer neural process experiments")]
struct Cli {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and save the synthetic source and target datasets.
    Synth,
    /// Window raw signals listed in a manifest into datasets.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Pretrain the GCN and save both dependency graphs.
    PretrainGcn,
    /// Train GTNP and the baselines, then write every report.
    Train,
    /// Evaluate a checkpoint on a saved dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Local and global uncertainty report for a checkpoint.
    Uncertainty {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// CSV summaries of the KL and global-latent traces of a finished run.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    match &cli.out {
        Some(p) => Ok(p.clone()),
        None => Ok(load_config(cli)?.output_dir),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth => {
            let cfg = load_config(cli)?;
            let mut synth = cfg.data.synth.clone().unwrap_or_else(SynthConfig::default);
            if let Some(seed) = cli.seed {
                synth.seed = seed;
            }
            let prov = cfg.provenance();
            let (source, target) = synth_generate(&synth)?;
            save_dataset(&source, &cfg.output_dir.join("source"), Some(&prov))?;
            save_dataset(&target, &cfg.output_dir.join("target"), Some(&prov))?;
            info!("wrote {} and {} samples under {}", source.len(), target.len(), cfg.output_dir.display());
        }
        Command::Prepare { manifest } => {
            let out = out_dir(cli)?;
            let sets = prepare_from_manifest(manifest)?;
            for (name, ds) in &sets {
                save_dataset(ds, &out.join(name), None)?;
                info!("{name}: {} samples, {} classes", ds.len(), ds.class_count);
            }
        }
        Command::PretrainGcn => {
            let cfg = load_config(cli)?;
            let prov = cfg.provenance();
            let (mut source, mut target) = cfg.datasets()?;
            let mut train = cfg.train_config();
            train.schedule.pretrain_gcn = true;
            let (state, trace, on_reference) = initialize(&train, &mut source, &mut target)?;
            let out = &cfg.output_dir;
            for (name, r, ds) in [
                ("source", &state.source_ref, &source),
                ("target", &state.target_ref, &target),
            ] {
                let meta = GraphMeta {
                    node_ids: r.indices.iter().map(|&i| ds.samples[i].id).collect(),
                    labels: r.labels.clone(),
                };
                fs::create_dir_all(out)?;
                save_graph(&out.join(format!("gcn_{name}.bin")), &meta, &r.g, Some(&prov))?;
            }
            let doc = serde_json::json!({
                "provenance": prov,
                "gcn_on_reference": on_reference,
                "trace": trace,
            });
            write_json(&out.join("gcn_trace.json"), &doc)?;
        }
        Command::Train => {
            let cfg = load_config(cli)?;
            let outcome = run_experiment(&cfg, &cfg.output_dir)?;
            println!("{}", serde_json::to_string_pretty(&outcome.metrics.target_accuracy)?);
        }
        Command::Eval { checkpoint, dataset } => {
            let (state, prov) = load_checkpoint(checkpoint)?;
            let data = load_dataset(dataset)?;
            let (metrics, _) = evaluate_state(&state, &data)?;
            let doc = serde_json::json!({ "provenance": prov, "metrics": metrics });
            let text = serde_json::to_string_pretty(&doc)?;
            if let Some(out) = &cli.out {
                fs::create_dir_all(out)?;
                fs::write(out.join("eval_metrics.json"), &text)?;
            }
            println!("{text}");
        }
        Command::Uncertainty { checkpoint, dataset } => {
            let cfg = load_config(cli)?;
            let (state, prov) = load_checkpoint(checkpoint)?;
            let prov = prov.unwrap_or_else(|| Provenance::new(&state.config, state.config.seed));
            let data = load_dataset(dataset)?;
            let trace_path = checkpoint.with_file_name("epochs.json");
            let global: Vec<GlobalRecord> = if trace_path.exists() {
                let text = fs::read_to_string(&trace_path)?;
                serde_json::from_str::<EpochsReport>(&text)
                    .map_err(|e| Error::Data(format!("{}: {e}", trace_path.display())))?
                    .global
            } else {
                vec![global_record(&state.model, &state.store, state.epoch)]
            };
            fs::create_dir_all(&cfg.output_dir)?;
            write_uncertainty(&cfg.output_dir, &state, &data, &global, &cfg.uncertainty, &prov)?;
        }
        Command::Report => {
            let out = out_dir(cli)?;
            let path = out.join("epochs.json");
            let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let report: EpochsReport =
                serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            write_trace_csvs(&out, &report)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}
