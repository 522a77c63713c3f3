//! Command-line front end: dataset synthesis, poison generation, training,
//! evaluation, defenses, sweeps, cross-subject runs and plot-data export.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use poisonlab::datasets::{manifest_of, split_three_way, synth_generate, write_manifest, write_png_tree};
use poisonlab::harness::{
    dump_poisons, emit_plot_data, load_config, preset, run_cross_subject, run_experiment,
    run_sweep, synth_subject_pools, write_sweep_csv, write_sweep_json, PlotAxis, Preset,
    SweepConfig, SweepTable, PRESET_NAMES,
};
use poisonlab::keys::{generate_poisons, BackdoorSpec};
use poisonlab::rng::Stream;
use poisonlab::training::{init_model, save_model, train, write_history};
use poisonlab::{Error, Result};

#[derive(Parser)]
#[command(name = "poisonlab", about = "Backdoor data-poisoning laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset as a PNG tree.
    Synth {
        #[arg(long, default_value_t = 10)]
        labels: usize,
        #[arg(long, default_value_t = 130)]
        per_label: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (one subdirectory per label).
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate poisoning samples and write them as PNGs.
    Poison {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the configured dataset (pristine by default).
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Optional JSONL training history path.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Run the full attack pipeline and print the evaluation report.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory for report, manifest and model artifacts.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the attack with all configured defenses and print their reports.
    Defend {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Run a grid sweep from a sweep config or a named preset.
    Sweep {
        /// Sweep config JSON (base config + axes + seeds).
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Built-in preset name.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-out cross-subject runs over synthetic subjects.
    CrossSubject {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 5)]
        subjects: usize,
        #[arg(long, default_value_t = 20)]
        images_per_subject: usize,
        /// Comma-separated extra-poison counts.
        #[arg(long, value_delimiter = ',', default_value = "0,20,80")]
        m: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit per-series plot CSVs from a sweep table JSON.
    Report {
        /// Sweep table JSON produced by `sweep` or `cross-subject`.
        #[arg(long)]
        table: PathBuf,
        /// x axis: n, alpha_test or m.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            labels,
            per_label,
            height,
            width,
            channels,
            seed,
            out,
        } => {
            let ds = synth_generate(labels, per_label, (height, width, channels), &Stream::new(seed))?;
            write_png_tree(&ds, &out)?;
            write_manifest(&manifest_of(&ds), &out.join("manifest.json"))?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Poison { config, out } => {
            let cfg = load_config(&config.config)?;
            let stream = Stream::new(cfg.master_seed);
            let full = poisonlab::harness::load_dataset_for(&cfg, &stream)?;
            let split = split_three_way(
                &full,
                cfg.split.test_per_label,
                cfg.split.pool_per_label,
                &stream.derive("split", 0),
            )?;
            let key = poisonlab::harness::build_key_for(&cfg, &split.attacker_pool, &stream)?;
            let spec = BackdoorSpec::new(
                cfg.attack.strategy,
                key,
                cfg.attack.target_label,
                cfg.attack.alpha_train,
                cfg.attack.alpha_test,
                cfg.attack.n,
            )?;
            let poisons = generate_poisons(
                &spec,
                &split.attacker_pool.images(),
                &stream.derive("grid", 0).derive("poisons", 0),
            )?;
            dump_poisons(&poisons, &out)?;
            println!("wrote {} poisons to {}", poisons.len(), out.display());
        }
        Command::Train {
            config,
            out,
            history,
        } => {
            let cfg = load_config(&config.config)?;
            let stream = Stream::new(cfg.master_seed);
            let full = poisonlab::harness::load_dataset_for(&cfg, &stream)?;
            let split = split_three_way(
                &full,
                cfg.split.test_per_label,
                cfg.split.pool_per_label,
                &stream.derive("split", 0),
            )?;
            let init = init_model(&cfg.model, &stream.derive("model", 0))?;
            let (model, hist) = train(&init, (&split.train).into(), &split.test, &cfg.train)?;
            save_model(&model, &out)?;
            if let Some(hpath) = history {
                write_history(&hist, &hpath)?;
            }
            let last = hist.epochs.last();
            println!(
                "trained {} epochs, test accuracy {:.4}, saved to {}",
                hist.epochs.len(),
                last.map_or(0.0, |e| e.test_accuracy),
                out.display()
            );
        }
        Command::Evaluate { config, out } => {
            let mut cfg = load_config(&config.config)?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            let artifacts = run_experiment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&artifacts)?);
        }
        Command::Defend { config } => {
            let mut cfg = load_config(&config.config)?;
            if !cfg.defenses.audit && cfg.defenses.prune_eta.is_none() && !cfg.defenses.aux_pristine
            {
                cfg.defenses.audit = true;
                cfg.defenses.prune_eta = Some(0.05);
            }
            let artifacts = run_experiment(&cfg)?;
            let summary = serde_json::json!({
                "audit": artifacts.audit,
                "prune": artifacts.prune,
                "aux_pristine": artifacts.aux_pristine,
                "attack_success_rate": artifacts.report.attack_success_rate,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Sweep {
            config,
            preset: preset_name,
            seed,
            out,
        } => {
            let sweep: SweepConfig = match (config, preset_name) {
                (Some(path), None) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    serde_json::from_str(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                (None, Some(name)) => match preset(&name, seed)? {
                    Preset::Sweep(sw) => sw,
                    Preset::Single(cfg) => SweepConfig {
                        n_values: vec![cfg.attack.n],
                        alpha_train_values: vec![cfg.attack.alpha_train],
                        alpha_test_values: vec![cfg.attack.alpha_test],
                        seeds: vec![cfg.master_seed],
                        base: cfg,
                    },
                    Preset::CrossSubject { .. } => {
                        return Err(Error::Config(format!(
                            "preset is a cross-subject protocol; use the cross-subject command"
                        )))
                    }
                },
                _ => {
                    return Err(Error::Config(format!(
                        "provide exactly one of --config or --preset (presets: {PRESET_NAMES:?})"
                    )))
                }
            };
            let table = run_sweep(&sweep)?;
            write_table(&table, &out)?;
        }
        Command::CrossSubject {
            config,
            subjects,
            images_per_subject,
            m,
            out,
        } => {
            let cfg = load_config(&config.config)?;
            let pools = synth_subject_pools(&cfg, subjects, images_per_subject);
            let table = run_cross_subject(&cfg, &pools, &m)?;
            write_table(&table, &out)?;
        }
        Command::Report { table, axis, out } => {
            let text = std::fs::read_to_string(&table).map_err(|e| Error::io(&table, e))?;
            let parsed: SweepTable = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", table.display())))?;
            let files = emit_plot_data(&parsed, PlotAxis::parse(&axis)?, &out)?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn write_table(table: &SweepTable, out: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_sweep_csv(table, &out.join("sweep.csv"))?;
    write_sweep_json(table, &out.join("sweep.json"))?;
    println!("{} rows -> {}", table.rows.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = std::error::Error::source(s);
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
