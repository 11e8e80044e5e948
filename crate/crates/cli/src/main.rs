use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use dualtta::data::{gen_spurious_dataset, ScenarioKind, SpuriousDatasetConfig, StreamScenario};
use dualtta::experiment::{emit_reports, run_experiment, ExperimentConfig};
use dualtta::model::{build_reference_net, pretrain, save_checkpoint, PretrainConfig};
use dualtta::theory::{
    check_theorem1_monotonicity, check_theorem2_suite, simulate_margin_model, MarginModelConfig, Verdict,
};
use dualtta::tta::{dual_loss_fidelity, DualTtaConfig, Method};

/// Gradient check tolerance on the maximum relative error.
const GRAD_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "dualtta", version, about = "Dual-strategy test-time adaptation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference network on the source splits and save it.
    Pretrain {
        /// Experiment config; its dataset, pretrain and first seed are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream one scenario through one adapter starting from a checkpoint.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long, default_value = "mild")]
        scenario: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the methods × seeds grid and write results.json and results.csv.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo checks of the margin-model claims.
    Theory {
        #[arg(long, value_enum)]
        check: TheoryCheck,
        /// Monte Carlo trials per configuration; unused by the corollary check.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the JSON report.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Source model for the corollary check; pretrained on the fly if absent.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Finite-difference check of the dual loss through the reference network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TheoryCheck {
    T1,
    T2,
    Corollary,
}

enum Failure {
    /// Bad input, configuration or I/O.
    Contract(String),
    /// The computation ran but a checked property did not hold.
    Check(String),
}

impl From<dualtta::Error> for Failure {
    fn from(e: dualtta::Error) -> Self {
        Failure::Contract(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Contract(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Contract(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Failure::Contract(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn cmd_pretrain(config: Option<&Path>, out: &Path) -> Outcome {
    let cfg = load_config(config)?;
    let seed = cfg.seeds[0];
    let data = gen_spurious_dataset(&SpuriousDatasetConfig { seed, ..cfg.dataset.clone() })?;
    let init = build_reference_net(cfg.dataset.num_classes, cfg.dataset.channels, seed)?;
    let pcfg = PretrainConfig { seed, ..cfg.pretrain.clone() };
    let (model, report) = pretrain(&init, &data.source_train, &data.source_val, &pcfg)?;
    save_checkpoint(&model, out)?;
    println!(
        "pretrained seed {seed}: loss {:.4} -> {:.4}, val accuracy {:.4}; saved {}",
        report.initial_loss,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        report.val_accuracy,
        out.display()
    );
    Ok(())
}

fn run_and_emit(cfg: &ExperimentConfig, out: &Path) -> Outcome {
    let report = run_experiment(cfg)?;
    for r in &report.results {
        println!(
            "{} seed {} {}: avg {:.4} worst {:.4} f1 {:.4} adapt {:.1}% corr {:.1}%",
            r.method, r.seed, r.scenario, r.avg_acc, r.worst_group_acc, r.macro_f1, r.pct_adapt, r.pct_corr_adapt
        );
    }
    for w in &report.wilcoxon {
        match &w.result {
            Some(res) => println!(
                "wilcoxon vs {} over {} conditions: W {} p {:.4} ({})",
                w.baseline, w.conditions, res.w, res.p_two_sided, w.alternative
            ),
            None => println!("wilcoxon vs {}: {}", w.baseline, w.note.as_deref().unwrap_or("skipped")),
        }
    }
    let (json_path, csv_path) = emit_reports(&report, out)?;
    println!("wrote {} and {}", json_path.display(), csv_path.display());
    Ok(())
}

fn cmd_adapt(model: &Path, method: &str, scenario: &str, seed: u64, out: &Path) -> Outcome {
    let method: Method = method.parse()?;
    let kind: ScenarioKind = scenario.parse()?;
    let cfg = ExperimentConfig {
        methods: vec![method],
        scenarios: vec![StreamScenario::of_kind(kind)],
        seeds: vec![seed],
        checkpoint: Some(model.to_path_buf()),
        ..Default::default()
    };
    run_and_emit(&cfg, out)
}

fn cmd_theory(check: TheoryCheck, trials: Option<usize>, seed: u64, out: &Path, model: Option<&Path>) -> Outcome {
    match check {
        TheoryCheck::T1 => {
            let defaults = MarginModelConfig::default();
            let cfg = MarginModelConfig {
                trials: trials.unwrap_or(defaults.trials),
                seed,
                ..defaults
            };
            let records = simulate_margin_model(&cfg)?;
            let res = check_theorem1_monotonicity(&records)?;
            let path = write_json(out, "t1_report.json", &json!({ "config": cfg, "records": records, "spearman": res }))?;
            println!("spearman rho {:?} over {} points -> {:?}; wrote {}", res.rho, res.n, res.verdict, path.display());
            match res.verdict {
                Verdict::Pass => Ok(()),
                v => Err(Failure::Check(format!("monotonicity verdict {v:?}"))),
            }
        }
        TheoryCheck::T2 => {
            let summary = check_theorem2_suite(200, trials.unwrap_or(10_000), seed)?;
            let path = write_json(out, "bound_report.json", &json!(summary))?;
            println!("{}/{} configurations within bounds; wrote {}", summary.passed, summary.configurations, path.display());
            if summary.passed == summary.configurations {
                Ok(())
            } else {
                Err(Failure::Check("flip frequency outside the bounds".into()))
            }
        }
        TheoryCheck::Corollary => {
            let cfg = ExperimentConfig {
                methods: vec![Method::Dualtta],
                seeds: vec![seed],
                checkpoint: model.map(Path::to_path_buf),
                ..Default::default()
            };
            let report = run_experiment(&cfg)?;
            let c = report.results[0].corollary();
            let path = write_json(out, "corollary_report.json", &json!(c))?;
            println!(
                "|D+| {} acc {:?}, |D-| {} acc {:?} -> {:?}; wrote {}",
                c.n_plus, c.accuracy_plus, c.n_minus, c.accuracy_minus, c.verdict, path.display()
            );
            match c.verdict {
                Verdict::Pass => Ok(()),
                v => Err(Failure::Check(format!("separation verdict {v:?}"))),
            }
        }
    }
}

fn cmd_gradcheck(seed: u64) -> Outcome {
    let data = gen_spurious_dataset(&SpuriousDatasetConfig {
        n_train: 8,
        n_val: 8,
        n_test: 8,
        seed,
        ..Default::default()
    })?;
    let model = build_reference_net(2, 3, seed)?;
    let rep = dual_loss_fidelity(&model, &data.target_test.images, &DualTtaConfig::default(), seed, 1e-5)?;
    println!(
        "max relative error {:.3e} over {} scalars, |D+| {} |D-| {}",
        rep.max_rel_err, rep.scalars, rep.n_plus, rep.n_minus
    );
    if rep.max_rel_err < GRAD_TOL {
        Ok(())
    } else {
        Err(Failure::Check(format!("relative error above {GRAD_TOL:e}")))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Pretrain { config, out } => cmd_pretrain(config.as_deref(), out),
        Command::Adapt { model, method, scenario, seed, out } => cmd_adapt(model, method, scenario, *seed, out),
        Command::Bench { config, out } => load_config(config.as_deref()).and_then(|cfg| run_and_emit(&cfg, out)),
        Command::Theory { check, trials, seed, out, model } => {
            cmd_theory(*check, *trials, *seed, out, model.as_deref())
        }
        Command::Gradcheck { seed } => cmd_gradcheck(*seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Contract(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(2)
        }
    }
}
