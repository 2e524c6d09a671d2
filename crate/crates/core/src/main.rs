use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use globcert::attack::{pgd_variation, sampling_oracle, AttackConfig, InputBox};
use globcert::bnb::{self, BnBConfig};
use globcert::graph::Graph;
use globcert::io::{load_idx, load_model, save_model};
use globcert::lower::{lower, select_output};
use globcert::propagate::{certify, output_variation_bounds_per_channel, Verdict};
use globcert::train::{
    finite_diff_check, init_mlp, sgd_train, Dataset, EpochMetrics, RgrAgg, Split, TrainConfig,
};
use globcert::{Error, Result};

#[derive(Parser)]
#[command(
    name = "globcert",
    version,
    about = "Global robustness certification for ReLU networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decide (δ, ε)-global robustness; exits 1 when not certified.
    Certify {
        model: PathBuf,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        epsilon: f64,
        /// Include every ReLU's input-distance interval in the report.
        #[arg(long)]
        intervals: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print certified output-variation intervals per channel.
    Bound {
        model: PathBuf,
        #[arg(long)]
        delta: f64,
        #[command(flatten)]
        bnb: BnbArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train with the certified-width regularizer.
    Train(TrainArgs),
    /// Search for large output variations with PGD or random sampling.
    Attack {
        model: PathBuf,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 40)]
        steps: usize,
        #[arg(long, default_value_t = 3)]
        restarts: usize,
        /// Step as a fraction of δ.
        #[arg(long, default_value_t = 0.1)]
        step_size: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        data: DataArgs,
        /// Number of dataset points to attack from.
        #[arg(long, default_value_t = 100)]
        limit: usize,
        /// Without a dataset, draw this many uniform pairs instead.
        #[arg(long, default_value_t = 10000)]
        samples: usize,
        #[arg(long)]
        witness: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference regularizer gradients.
    Gradcheck {
        model: PathBuf,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Replace convolutions and max pooling by dense equivalents.
    Lower {
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a model.
    Inspect { model: PathBuf },
}

#[derive(Args)]
struct BnbArgs {
    /// Refine scalar channels by branch and bound.
    #[arg(long)]
    bnb: bool,
    #[arg(long, default_value_t = 16)]
    max_splits: usize,
    #[arg(long)]
    timeout_secs: Option<f64>,
    #[arg(long, default_value_t = 20)]
    beta_steps: usize,
    #[arg(long, default_value_t = 0.05)]
    beta_lr: f64,
    /// Per-channel history CSV (`time_s,splits,lo,hi`, prefixed by channel).
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Sum,
    Max,
}

#[derive(Args)]
struct TrainArgs {
    /// Starting model; alternatively `--arch`.
    #[arg(long, conflicts_with = "arch", required_unless_present = "arch")]
    model: Option<PathBuf>,
    /// Fresh MLP with dash-separated widths, e.g. 784-64-64-10.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    train_images: PathBuf,
    #[arg(long)]
    train_labels: PathBuf,
    #[arg(long, requires = "test_labels")]
    test_images: Option<PathBuf>,
    #[arg(long, requires = "test_images")]
    test_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    lambda_reg: f64,
    #[arg(long, default_value_t = 2.0 / 255.0)]
    delta: f64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    detach_intervals: bool,
    #[arg(long, value_enum, default_value = "sum")]
    rgr_agg: AggArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    print!("{text}");
    if let Some(p) = out {
        write(p, &text)?;
    }
    Ok(())
}

fn dataset(images: &Path, labels: &Path, split: Split, graph: &Graph) -> Result<Dataset> {
    load_idx(images, labels, split)?.with_input_shape(graph.input_shape())
}

fn bound(model: &Path, delta: f64, a: &BnbArgs, out: Option<&Path>) -> Result<ExitCode> {
    let g = load_model(model)?;
    let plain = output_variation_bounds_per_channel(&g, delta)?;
    if !a.bnb {
        let channels: Vec<_> = plain
            .iter()
            .map(|b| json!({"lo": b.lo, "hi": b.hi}))
            .collect();
        emit(&json!({"delta": delta, "channels": channels}), out)?;
        return Ok(ExitCode::SUCCESS);
    }
    let config = BnBConfig {
        max_splits: a.max_splits,
        timeout: a.timeout_secs.map(Duration::from_secs_f64),
        beta_steps: a.beta_steps,
        beta_lr: a.beta_lr,
        ..BnBConfig::default()
    };
    let mut channels = Vec::new();
    let mut csv = String::from("channel,time_s,splits,lo,hi\n");
    for c in 0..g.output_dim() {
        let scalar = if g.output_dim() == 1 {
            g.clone()
        } else {
            select_output(&g, c)?
        };
        let r = bnb::run(&scalar, delta, &config)?;
        for h in &r.history {
            csv.push_str(&format!(
                "{c},{},{},{},{}\n",
                h.time_s, h.splits, h.lo, h.hi
            ));
        }
        channels.push(json!({
            "lo": r.best.lo,
            "hi": r.best.hi,
            "splits": r.history.last().map_or(0, |h| h.splits),
            "domains_explored": r.domains_explored,
        }));
    }
    if let Some(p) = &a.history {
        write(p, &csv)?;
    }
    emit(&json!({"delta": delta, "channels": channels}), out)?;
    Ok(ExitCode::SUCCESS)
}

fn train(a: &TrainArgs) -> Result<ExitCode> {
    let g = match (&a.model, &a.arch) {
        (Some(p), _) => load_model(p)?,
        (None, Some(arch)) => {
            let dims = arch
                .split('-')
                .map(|d| d.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidArgument(format!("bad --arch `{arch}`: {e}")))?;
            init_mlp(&dims, a.seed)?
        }
        (None, None) => unreachable!("clap requires one of --model/--arch"),
    };
    let train = dataset(&a.train_images, &a.train_labels, Split::Train, &g)?;
    let test = match (&a.test_images, &a.test_labels) {
        (Some(i), Some(l)) => Some(dataset(i, l, Split::Test, &g)?),
        _ => None,
    };
    let config = TrainConfig {
        lambda_reg: a.lambda_reg,
        delta: a.delta,
        lr: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        detach_intervals: a.detach_intervals,
        agg: match a.rgr_agg {
            AggArg::Sum => RgrAgg::Sum,
            AggArg::Max => RgrAgg::Max,
        },
    };
    let (trained, metrics) = sgd_train(&g, &train, test.as_ref(), &config)?;
    save_model(&trained, &a.out)?;
    let mut csv = EpochMetrics::csv_header(trained.output_dim()) + "\n";
    for m in &metrics {
        csv.push_str(&m.csv_row());
        csv.push('\n');
    }
    match &a.metrics {
        Some(p) => write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn inspect(model: &Path) -> Result<ExitCode> {
    let g = load_model(model)?;
    println!(
        "nodes: {}  input: {}  output: {}  dtype: {:?}",
        g.len(),
        g.input_shape(),
        g.output_dim(),
        g.dtype()
    );
    let mut params = 0;
    for id in g.ids() {
        let n = g.node(id);
        let shape = g.shape(id).map_or("?".to_string(), |s| s.to_string());
        let inputs: Vec<String> = n.inputs.iter().map(|p| p.to_string()).collect();
        println!(
            "  {id:>5} {:<8} {:<16} {:<16} <- {}",
            n.kind.name(),
            n.name,
            shape,
            inputs.join(", ")
        );
        params += match &n.kind {
            globcert::graph::NodeKind::Linear { weight, bias, .. } => weight.numel() + bias.numel(),
            globcert::graph::NodeKind::Conv2d(c) => c.kernel.numel() + c.bias.numel(),
            _ => 0,
        };
    }
    println!("parameters: {params}");
    println!("lowered: {}", g.is_lowered());
    let report = g.validate();
    if report.is_empty() {
        println!("valid");
    } else {
        println!("invalid:\n{report}");
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Certify {
            model,
            delta,
            epsilon,
            intervals,
            out,
        } => {
            let g = load_model(&model)?;
            let report = certify(&g, delta, epsilon, intervals)?;
            emit(&serde_json::to_value(&report)?, out.as_deref())?;
            Ok(match report.verdict {
                Verdict::Robust => ExitCode::SUCCESS,
                Verdict::Unknown => ExitCode::from(1),
            })
        }
        Command::Bound {
            model,
            delta,
            bnb,
            out,
        } => bound(&model, delta, &bnb, out.as_deref()),
        Command::Train(a) => train(&a),
        Command::Attack {
            model,
            delta,
            steps,
            restarts,
            step_size,
            seed,
            data,
            limit,
            samples,
            witness,
            out,
        } => {
            let g = load_model(&model)?;
            let (method, result) = match (&data.images, &data.labels) {
                (Some(i), Some(l)) => {
                    let d = dataset(i, l, Split::Test, &g)?.head(limit);
                    let config = AttackConfig {
                        steps,
                        restarts,
                        step_size,
                        seed,
                    };
                    ("pgd", pgd_variation(&g, &d.inputs, delta, &config)?)
                }
                _ => (
                    "sampling",
                    sampling_oracle(&g, delta, samples, seed, InputBox::default())?,
                ),
            };
            if let Some(p) = &witness {
                write(
                    p,
                    &(serde_json::to_string_pretty(&result.witnesses)? + "\n"),
                )?;
            }
            emit(
                &json!({
                    "method": method,
                    "delta": delta,
                    "eps_under": result.eps_under,
                    "max_increase": result.max_increase,
                    "max_decrease": result.max_decrease,
                    "witness_file": witness,
                }),
                out.as_deref(),
            )?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            model,
            delta,
            tolerance,
        } => {
            let g = load_model(&model)?;
            let report = finite_diff_check(&g, delta, tolerance)?;
            emit(&serde_json::to_value(&report)?, None)?;
            Ok(if report.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Lower { model, out } => {
            let g = load_model(&model)?;
            g.ensure_valid()?;
            save_model(&lower(&g)?, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Inspect { model } => inspect(&model),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
