// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kedit::config::{AlphaSetting, ExperimentConfig};
use kedit::pipeline::{EditOverrides, Lab};
use kedit::LabError;
use kedit_core::edit::{EditMode, TargetMode};

#[derive(Parser)]
#[command(name = "kedit", version, about = "Locate-then-edit knowledge editing lab")]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `paths.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the fact world.
    World,
    /// Train the model on the world.
    Train {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Causal tracing over the probe facts; selects windows and alpha.
    Trace {
        #[arg(long)]
        probes: Option<usize>,
    },
    /// Plan, apply and evaluate one edit batch.
    Edit {
        #[arg(long, value_parser = parse_mode)]
        mode: Option<EditMode>,
        /// A number in [0, 1] or "auto".
        #[arg(long)]
        alpha: Option<AlphaSetting>,
        #[arg(long)]
        t: Option<usize>,
        #[arg(long, value_parser = parse_target)]
        target: Option<TargetMode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-evaluate a saved edit cell.
    Eval {
        /// Cell directory; defaults to the cell the config describes.
        #[arg(long)]
        cell: Option<PathBuf>,
    },
    /// Grid of modes × alphas × batch sizes.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        ts: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
        modes: Option<Vec<EditMode>>,
    },
    /// Every stage in order: world, train, trace, edit, sweep.
    Run,
}

fn parse_mode(s: &str) -> Result<EditMode, String> {
    EditMode::from_name(s).ok_or_else(|| format!("unknown mode {s:?}; expected dual, mlp, attn or single"))
}

fn parse_target(s: &str) -> Result<TargetMode, String> {
    match s {
        "counterfact" => Ok(TargetMode::Counterfact),
        "identity" => Ok(TargetMode::Identity),
        _ => Err(format!("unknown target {s:?}; expected counterfact or identity")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let err = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.1}"))
}

fn run(cli: Cli) -> Result<(), LabError> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = cli.out {
        config.paths.out_dir = out;
    }
    match &cli.command {
        Command::Train { steps: Some(s) } => config.train.steps = *s,
        Command::Trace { probes: Some(n) } => config.trace.n_probes = *n,
        Command::Sweep { alphas, ts, modes } => {
            if let Some(a) = alphas {
                config.sweep.alphas = a.clone();
            }
            if let Some(t) = ts {
                config.sweep.ts = t.clone();
            }
            if let Some(m) = modes {
                config.sweep.modes = m.clone();
            }
        }
        _ => {}
    }
    let lab = Lab::new(config)?;

    match cli.command {
        Command::World => world(&lab),
        Command::Train { .. } => train(&lab),
        Command::Trace { .. } => trace(&lab),
        Command::Edit {
            mode,
            alpha,
            t,
            target,
            seed,
        } => edit(
            &lab,
            &EditOverrides {
                mode,
                alpha,
                t,
                target,
                seed,
            },
        ),
        Command::Eval { cell } => {
            let dir = match cell {
                Some(c) => c,
                None => {
                    let params = lab.load_checkpoint()?;
                    let trace = lab.load_trace(&params)?;
                    lab.layout
                        .cell(&lab.cell_spec(&EditOverrides::default(), trace.as_ref())?.id())
                }
            };
            let r = lab.eval(&dir)?;
            let m = &r.metrics;
            println!(
                "eval {}: edit_success {:.1} portability {} locality {:.1} fluency {:.3}",
                r.cell.id(),
                m.edit_success,
                fmt_opt(m.portability),
                m.locality,
                m.fluency
            );
            Ok(())
        }
        Command::Sweep { .. } => sweep(&lab),
        Command::Run => {
            world(&lab)?;
            train(&lab)?;
            trace(&lab)?;
            edit(&lab, &EditOverrides::default())?;
            sweep(&lab)
        }
    }
}

fn world(lab: &Lab) -> Result<(), LabError> {
    let w = lab.build_world()?;
    println!(
        "world: {} facts ({} edit candidates, {} locality) -> {}",
        w.facts.len(),
        w.splits.edit_candidates.len(),
        w.splits.locality.len(),
        lab.layout.world().display()
    );
    Ok(())
}

fn train(lab: &Lab) -> Result<(), LabError> {
    let s = lab.train()?;
    println!(
        "train: {} steps, recall {:.3} -> {}",
        s.steps,
        s.final_recall,
        lab.layout.checkpoint().display()
    );
    Ok(())
}

fn trace(lab: &Lab) -> Result<(), LabError> {
    let t = lab.trace()?;
    for w in &t.warnings {
        eprintln!("warning: {w}");
    }
    let s = &t.summary;
    println!(
        "trace: {} probes, P_clean {:.3}, S_mlp {:?}, S_attn {:?}, alpha {}, localization {:.2}",
        s.probes.len(),
        s.mean_p_clean,
        s.windows.mlp,
        s.windows.attn,
        s.alpha.map_or_else(|| "-".into(), |a| format!("{a:.4}")),
        t.localization_ratio
    );
    Ok(())
}

fn edit(lab: &Lab, o: &EditOverrides) -> Result<(), LabError> {
    let (r, _) = lab.edit(o)?;
    let m = &r.metrics;
    println!(
        "edit {}: edit_success {:.1} portability {} locality {:.1} fluency {:.3}",
        r.cell.id(),
        m.edit_success,
        fmt_opt(m.portability),
        m.locality,
        m.fluency
    );
    Ok(())
}

fn sweep(lab: &Lab) -> Result<(), LabError> {
    let s = &lab.config.sweep;
    let rows = lab.sweep(&s.modes, &s.alphas, &s.ts)?;
    let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
    println!(
        "sweep: {} cells ({failed} failed) -> {}",
        rows.len(),
        lab.layout.sweep_summary().display()
    );
    Ok(())
}
