//! `cnpe` — experiment runner for the Causal-NoPE adjacency-pattern lab.
//!
//! Subcommands: gen-data, train, analyze, simulate, probe, report, and
//! reproduce (desk-scale tables/figures). Exit codes: 0 success,
//! 2 validation error, 1 runtime failure.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cnpe_core::analysis::{
    adjacency_score, cosine_sim_matrix, layer_adjacency_scores, score_distribution,
    variance_adjacency_score, variance_sequence, Direction,
};
use cnpe_core::error::Error;
use cnpe_core::model::{heads_for_dim, InitScheme, Model, ModelConfig, Variant};
use cnpe_core::probing::{
    build_probe_datasets, evaluate_probe, train_probe, ProbeConfig, ProbeFeature,
};
use cnpe_core::report::{
    layer_columns, render_heatmap_pgm, render_heatmap_svg, write_fixed_histogram_csv,
    write_histogram_csv, write_sim_matrix_csv, Manifest, ResultsTable,
};
use cnpe_core::simulation::{
    dot_product_gap_check, run_coefficient_simulation, SimulationSpec,
};
use cnpe_core::tasks::{
    build_dataset, build_splits, Dataset, TaskKind, TaskSpec, Vocab, ALL_DIGITS,
};
use cnpe_core::training::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "cnpe", version, about = "Causal-NoPE adjacency-pattern experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Base random seed for every stage of the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// key=value config file overriding subcommand options.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Load a checkpoint instead of initializing a fresh model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    /// causal_nope or noncausal_ape.
    #[arg(long, default_value = "causal_nope")]
    variant: String,
    /// Initialization mean for embeddings and query/key projections.
    #[arg(long, default_value_t = 0.0)]
    mu: f32,
    /// Initialization standard deviation for embeddings and query/key
    /// projections.
    #[arg(long, default_value_t = 0.02)]
    sigma: f32,
}

#[derive(Subcommand)]
enum Command {
    /// Generate task train/test splits plus the vocab file.
    GenData {
        #[command(flatten)]
        common: Common,
        /// addition, reversal, indexing or ordering.
        #[arg(long, default_value = "reversal")]
        task: String,
        /// desk or paper task sizes.
        #[arg(long, default_value = "desk")]
        scale: String,
        #[arg(long, default_value_t = 5000)]
        n_train: usize,
        #[arg(long, default_value_t = 5000)]
        n_test: usize,
    },
    /// Train a model on a task and save the checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "reversal")]
        task: String,
        #[arg(long, default_value_t = 5000)]
        n_train: usize,
        #[arg(long, default_value_t = 5000)]
        n_test: usize,
    },
    /// Adjacency-score tables, heatmaps and score histograms for a model.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "reversal")]
        task: String,
        #[arg(long, default_value_t = 64)]
        n_samples: usize,
    },
    /// Coefficient simulation sigma sweep plus the convex-weight gap check.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        #[arg(long, default_value_t = 10000)]
        trials: usize,
    },
    /// Position probes (embedding / variance / cos_to_last) per layer.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Probe a single layer; default probes every layer >= 1.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        /// Feature rows per split.
        #[arg(long, default_value_t = 1600)]
        n: usize,
        #[arg(long, default_value_t = 2000)]
        epochs: usize,
    },
    /// Regenerate rounded tables from full-precision files and summarize
    /// the artifacts in the output directory.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Rebuild a table or figure at desk scale (table1, table4, table5,
    /// table6, figure1, figure2).
    Reproduce {
        #[command(flatten)]
        common: Common,
        /// table1 | table4 | table5 | table6 | figure1 | figure2
        target: String,
        #[arg(long, default_value = "desk")]
        scale: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_)
        | Error::Format(_)
        | Error::ShapeMismatch { .. }
        | Error::TokenOutOfRange { .. }
        | Error::UnknownChar(_)
        | Error::SequenceTooLong { .. } => 2,
        Error::Diverged { .. } | Error::Io(_) => 1,
    }
}

type Result<T> = std::result::Result<T, Error>;

/// Optional key=value overrides from --config; unknown keys are rejected
/// against the allow-list each subcommand supplies.
fn load_overrides(path: &Option<PathBuf>, allowed: &[&str]) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    let Some(path) = path else {
        return Ok(map);
    };
    let text = fs::read_to_string(path)?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("{}: line {}: expected key=value", path.display(), lineno + 1))
        })?;
        let k = k.trim();
        if !allowed.contains(&k) {
            return Err(Error::Format(format!(
                "{}: unknown config key {k:?} (allowed: {})",
                path.display(),
                allowed.join(", ")
            )));
        }
        map.insert(k.to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse_override<T: std::str::FromStr>(
    map: &HashMap<String, String>,
    key: &str,
    current: T,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        None => Ok(current),
        Some(v) => v
            .parse()
            .map_err(|e| Error::Format(format!("config key {key}: {e}"))),
    }
}

fn parse_task(name: &str, scale: &str) -> Result<TaskSpec> {
    let kind = TaskKind::parse(name)?;
    match scale {
        "desk" => Ok(TaskSpec::desk(kind)),
        "paper" => Ok(TaskSpec::paper(kind)),
        other => Err(Error::InvalidArgument(format!(
            "unknown scale {other:?} (expected desk|paper)"
        ))),
    }
}

fn ensure_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn model_config_for(args: &ModelArgs, vocab: &Vocab, max_seq_len: usize) -> Result<ModelConfig> {
    let config = ModelConfig {
        n_layers: args.layers,
        d_model: args.dim,
        n_heads: heads_for_dim(args.dim),
        vocab_size: vocab.size(),
        max_seq_len,
        variant: Variant::parse(&args.variant)?,
        init: InitScheme {
            mu: args.mu,
            sigma: args.sigma,
        },
    };
    config.validate()?;
    Ok(config)
}

fn load_or_init_model(
    args: &ModelArgs,
    vocab: &Vocab,
    max_seq_len: usize,
    seed: u64,
) -> Result<Model> {
    match &args.checkpoint {
        Some(path) => Model::load(path),
        None => Model::init(model_config_for(args, vocab, max_seq_len)?, seed),
    }
}

/// Prompts from a freshly generated dataset, tokenized for analysis input.
fn analysis_inputs(
    spec: &TaskSpec,
    vocab: &Vocab,
    n: usize,
    seed: u64,
) -> Result<(Dataset, Vec<Vec<usize>>)> {
    let ds = build_dataset(spec, n, seed, &ALL_DIGITS)?;
    let seqs = ds
        .samples
        .iter()
        .map(|s| vocab.tokenize(&s.prompt))
        .collect::<Result<Vec<_>>>()?;
    Ok((ds, seqs))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            common,
            task,
            scale,
            n_train,
            n_test,
        } => {
            let ov = load_overrides(&common.config, &["task", "scale", "n_train", "n_test"])?;
            let task = ov.get("task").cloned().unwrap_or(task);
            let scale = ov.get("scale").cloned().unwrap_or(scale);
            let n_train = parse_override(&ov, "n_train", n_train)?;
            let n_test = parse_override(&ov, "n_test", n_test)?;
            let spec = parse_task(&task, &scale)?;
            ensure_out(&common.out)?;
            let vocab = Vocab::new();
            let (train_ds, test_ds) = build_splits(&spec, n_train, n_test, common.seed, &ALL_DIGITS)?;
            train_ds.write_file(&common.out.join("train.txt"))?;
            test_ds.write_file(&common.out.join("test.txt"))?;
            vocab.write_file(&common.out.join("vocab.txt"))?;
            let mut manifest = Manifest::new();
            manifest.push("command", "gen-data");
            manifest.push("task", spec.kind.as_str());
            manifest.push("max_operand", spec.max_operand.to_string());
            manifest.push("n_train", n_train.to_string());
            manifest.push("n_test", n_test.to_string());
            manifest.push_seeds(&[common.seed]);
            manifest.push_config_hash(&format!("{task} {scale} {n_train} {n_test}"));
            manifest.write(&common.out.join("manifest.txt"))?;
            println!(
                "wrote {} train / {} test samples to {}",
                train_ds.len(),
                test_ds.len(),
                common.out.display()
            );
            Ok(())
        }

        Command::Train {
            common,
            model,
            task,
            n_train,
            n_test,
        } => {
            let spec = parse_task(&task, "desk")?;
            ensure_out(&common.out)?;
            let vocab = Vocab::new();
            let mut cfg = TrainConfig {
                seed: common.seed,
                ..TrainConfig::default()
            };
            if let Some(path) = &common.config {
                cfg.apply_kv(&fs::read_to_string(path)?)?;
            }
            let (train_ds, test_ds) = build_splits(&spec, n_train, n_test, common.seed, &ALL_DIGITS)?;
            let mut m = load_or_init_model(&model, &vocab, spec.max_full_len() + 2, common.seed)?;
            let mut report = train(&mut m, &train_ds, &test_ds, &vocab, &cfg)?;
            let ckpt = common.out.join("model.cnpe");
            m.save(&ckpt)?;
            report.checkpoint = Some(ckpt.clone());
            report.write_csv(&common.out.join("train.csv"))?;
            let mut manifest = Manifest::new();
            manifest.push("command", "train");
            manifest.push("task", spec.kind.as_str());
            manifest.push("checkpoint", ckpt.display().to_string());
            manifest.push("steps_run", report.steps_run.to_string());
            manifest.push("final_accuracy", report.final_accuracy.to_string());
            manifest.push_seeds(&[common.seed]);
            manifest.push_config_hash(&format!("{cfg:?}"));
            manifest.write(&common.out.join("manifest.txt"))?;
            println!(
                "trained {} steps, accuracy {:.3}, checkpoint {}",
                report.steps_run,
                report.final_accuracy,
                ckpt.display()
            );
            Ok(())
        }

        Command::Analyze {
            common,
            model,
            task,
            n_samples,
        } => {
            let ov = load_overrides(&common.config, &["task", "n_samples"])?;
            let task = ov.get("task").cloned().unwrap_or(task);
            let n_samples = parse_override(&ov, "n_samples", n_samples)?;
            let spec = parse_task(&task, "desk")?;
            ensure_out(&common.out)?;
            let vocab = Vocab::new();
            let m = load_or_init_model(&model, &vocab, spec.max_full_len() + 2, common.seed)?;
            let (_, seqs) = analysis_inputs(&spec, &vocab, n_samples, common.seed)?;
            let scores = layer_adjacency_scores(&m, &seqs)?;
            let n_layers = m.config.n_layers;

            let mut table = ResultsTable::new(layer_columns(n_layers));
            let means: Vec<f64> = scores
                .iter()
                .map(|s| s.iter().sum::<f64>() / s.len() as f64)
                .collect();
            table.push_row(format!("{} ({})", spec.kind.as_str(), "cosine"), means)?;
            let var_means: Vec<f64> = {
                let mut per_layer = vec![0.0f64; n_layers + 1];
                for seq in &seqs {
                    let (_, acts) = m.forward(seq)?;
                    for (layer, act) in acts.per_layer.iter().enumerate() {
                        let v = variance_sequence(act)?;
                        per_layer[layer] +=
                            variance_adjacency_score(&v, true, Direction::Decreasing)?
                                .matrix_score;
                    }
                }
                per_layer.iter().map(|t| t / seqs.len() as f64).collect()
            };
            table.push_row(format!("{} ({})", spec.kind.as_str(), "variance"), var_means)?;
            table.write_csv(&common.out.join("adjacency.csv"))?;

            // heatmaps + per-layer score histograms from the first sample
            let (_, acts) = m.forward(&seqs[0])?;
            for (layer, act) in acts.per_layer.iter().enumerate() {
                let c = cosine_sim_matrix(act)?;
                let score = adjacency_score(&c, true)?.matrix_score;
                render_heatmap_pgm(&c, &common.out.join(format!("heatmap_layer{layer}.pgm")))?;
                render_heatmap_svg(
                    &c,
                    score,
                    &common.out.join(format!("heatmap_layer{layer}.svg")),
                )?;
                write_sim_matrix_csv(&c, &common.out.join(format!("sim_layer{layer}.csv")))?;
                let dist = score_distribution(&m, &seqs, layer, seqs.len())?;
                write_fixed_histogram_csv(
                    &dist.histogram,
                    0.0,
                    1.0,
                    &common.out.join(format!("scores_layer{layer}.csv")),
                )?;
            }

            let mut manifest = Manifest::new();
            manifest.push("command", "analyze");
            manifest.push("task", spec.kind.as_str());
            manifest.push("n_samples", n_samples.to_string());
            manifest.push("layers", n_layers.to_string());
            manifest.push_seeds(&[common.seed]);
            manifest.push_config_hash(&format!("{task} {n_samples} {:?}", m.config));
            manifest.write(&common.out.join("manifest.txt"))?;
            println!("analysis written to {}", common.out.display());
            Ok(())
        }

        Command::Simulate {
            common,
            dim,
            trials,
        } => {
            let ov = load_overrides(&common.config, &["dim", "trials"])?;
            let dim = parse_override(&ov, "dim", dim)?;
            let trials = parse_override(&ov, "trials", trials)?;
            ensure_out(&common.out)?;
            let spec = SimulationSpec {
                dim,
                trials,
                seed: common.seed,
                ..SimulationSpec::default()
            };
            let out = run_coefficient_simulation(&spec)?;
            let mut summary = String::from(
                "sigma,gap,mean,std,frac_positive\n",
            );
            for s in &out.per_sigma {
                for (name, gaps, stats) in [
                    ("ab_ac", &s.gap_ab_ac, &s.summary_ab_ac),
                    ("cb_ca", &s.gap_cb_ca, &s.summary_cb_ca),
                ] {
                    write_histogram_csv(
                        gaps,
                        60,
                        &common.out.join(format!("hist_sigma{}_{name}.csv", s.sigma)),
                    )?;
                    summary.push_str(&format!(
                        "{},{name},{},{},{}\n",
                        s.sigma, stats.mean, stats.std, stats.frac_positive
                    ));
                }
            }
            fs::write(common.out.join("sim_summary.csv"), summary)?;

            let (gap, n) = dot_product_gap_check(512, 4, 0, trials, common.seed)?;
            fs::write(
                common.out.join("gap_check.csv"),
                format!(
                    "dim,k,t,trials,mean,std,stderr,frac_positive\n512,4,0,{n},{},{},{},{}\n",
                    gap.mean,
                    gap.std,
                    gap.stderr(n),
                    gap.frac_positive
                ),
            )?;

            let mut manifest = Manifest::new();
            manifest.push("command", "simulate");
            manifest.push("dim", dim.to_string());
            manifest.push("trials", trials.to_string());
            manifest.push_seeds(&[common.seed]);
            manifest.push_config_hash(&format!("{spec:?}"));
            manifest.write(&common.out.join("manifest.txt"))?;
            println!("simulation written to {}", common.out.display());
            Ok(())
        }

        Command::Probe {
            common,
            model,
            layer,
            seq_len,
            n,
            epochs,
        } => {
            let ov = load_overrides(&common.config, &["seq_len", "n", "epochs", "layer"])?;
            let seq_len = parse_override(&ov, "seq_len", seq_len)?;
            let n = parse_override(&ov, "n", n)?;
            let epochs = parse_override(&ov, "epochs", epochs)?;
            let layer = match ov.get("layer") {
                Some(v) => Some(v.parse().map_err(|e| {
                    Error::Format(format!("config key layer: {e}"))
                })?),
                None => layer,
            };
            ensure_out(&common.out)?;
            let vocab = Vocab::new();
            let m = load_or_init_model(&model, &vocab, seq_len + 2, common.seed)?;
            if m.config.max_seq_len < seq_len {
                return Err(Error::SequenceTooLong {
                    len: seq_len,
                    max: m.config.max_seq_len,
                });
            }
            let layers: Vec<usize> = match layer {
                Some(l) => vec![l],
                None => (1..=m.config.n_layers).collect(),
            };
            let mut csv = String::from("layer,feature,pearson_r,nrmse\n");
            for &l in &layers {
                for feature in [
                    ProbeFeature::Embedding,
                    ProbeFeature::Variance,
                    ProbeFeature::CosToLast,
                ] {
                    let cfg = ProbeConfig {
                        seq_len,
                        n_train: n,
                        n_test: n,
                        max_epochs: epochs,
                        seed: common.seed,
                        ..ProbeConfig::new(feature, l)
                    };
                    let data = build_probe_datasets(&m, &vocab, &cfg)?;
                    let probe = train_probe(&data.x_train, &data.y_train, &cfg)?;
                    let report = evaluate_probe(&probe, &data.x_test, &data.y_test, seq_len)?;
                    csv.push_str(&format!(
                        "{l},{},{},{}\n",
                        feature.as_str(),
                        report.pearson_r,
                        report.nrmse
                    ));
                    let mut residuals = String::from("position,residual\n");
                    for (pos, rs) in report.per_position_residuals.iter().enumerate() {
                        for r in rs {
                            residuals.push_str(&format!("{pos},{r}\n"));
                        }
                    }
                    fs::write(
                        common
                            .out
                            .join(format!("residuals_layer{l}_{}.csv", feature.as_str())),
                        residuals,
                    )?;
                    println!(
                        "layer {l} {:<12} r={:+.3} nrmse={:.3}",
                        feature.as_str(),
                        report.pearson_r,
                        report.nrmse
                    );
                }
            }
            fs::write(common.out.join("probe.csv"), csv)?;
            let mut manifest = Manifest::new();
            manifest.push("command", "probe");
            manifest.push("seq_len", seq_len.to_string());
            manifest.push("n", n.to_string());
            manifest.push_seeds(&[common.seed]);
            manifest.push_config_hash(&format!("{seq_len} {n} {epochs} {:?}", m.config));
            manifest.write(&common.out.join("manifest.txt"))?;
            Ok(())
        }

        Command::Report { common } => {
            let dir = &common.out;
            if !dir.is_dir() {
                return Err(Error::InvalidArgument(format!(
                    "{} is not a directory",
                    dir.display()
                )));
            }
            let mut regenerated = Vec::new();
            let mut artifacts = Vec::new();
            for entry in fs::read_dir(dir)? {
                let path = entry?.path();
                let Some(name) = path.file_name().and_then(|s| s.to_str()) else {
                    continue;
                };
                artifacts.push(name.to_string());
                if let Some(stem) = name.strip_suffix("_full.csv") {
                    let table = ResultsTable::read_full_csv(&path)?;
                    table.write_csv(&dir.join(format!("{stem}.csv")))?;
                    regenerated.push(format!("{stem}.csv"));
                }
            }
            artifacts.sort();
            let mut md = String::from("# Run artifacts\n\n");
            for a in &artifacts {
                md.push_str(&format!("- {a}\n"));
            }
            if !regenerated.is_empty() {
                md.push_str("\nRegenerated from full-precision tables: ");
                md.push_str(&regenerated.join(", "));
                md.push('\n');
            }
            fs::write(dir.join("report.md"), md)?;
            println!(
                "report.md lists {} artifacts ({} tables regenerated)",
                artifacts.len(),
                regenerated.len()
            );
            Ok(())
        }

        Command::Reproduce {
            common,
            target,
            scale,
        } => {
            if scale != "desk" {
                return Err(Error::InvalidArgument(format!(
                    "only --scale desk is supported, got {scale:?}"
                )));
            }
            ensure_out(&common.out)?;
            reproduce(&target, &common)
        }
    }
}

fn desk_init_model(spec: &TaskSpec, vocab: &Vocab, init: InitScheme, seed: u64) -> Result<Model> {
    let config = ModelConfig {
        n_layers: 4,
        d_model: 128,
        n_heads: heads_for_dim(128),
        vocab_size: vocab.size(),
        max_seq_len: spec.max_full_len() + 2,
        variant: Variant::CausalNope,
        init,
    };
    Model::init(config, seed)
}

fn mean_layer_scores(model: &Model, seqs: &[Vec<usize>]) -> Result<Vec<f64>> {
    let scores = layer_adjacency_scores(model, seqs)?;
    Ok(scores
        .iter()
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect())
}

fn reproduce(target: &str, common: &Common) -> Result<()> {
    let vocab = Vocab::new();
    let n_samples = 64;
    let all_tasks = [
        TaskKind::Addition,
        TaskKind::Reversal,
        TaskKind::Indexing,
        TaskKind::Ordering,
    ];
    let mut manifest = Manifest::new();
    manifest.push("command", format!("reproduce {target}"));
    manifest.push_seeds(&[common.seed]);
    manifest.push_config_hash(&format!("{target} desk {n_samples}"));

    match target {
        // init-row adjacency scores for all four tasks
        "table1" => {
            let mut table = ResultsTable::new(layer_columns(4));
            for kind in all_tasks {
                let spec = TaskSpec::desk(kind);
                let model = desk_init_model(&spec, &vocab, InitScheme::default(), common.seed)?;
                let (_, seqs) = analysis_inputs(&spec, &vocab, n_samples, common.seed)?;
                table.push_row(
                    format!("{} init", spec.kind.as_str()),
                    mean_layer_scores(&model, &seqs)?,
                )?;
            }
            table.write_csv(&common.out.join("table1.csv"))?;
        }
        // init-mean sweep
        "table4" => {
            let spec = TaskSpec::desk(TaskKind::Reversal);
            let (_, seqs) = analysis_inputs(&spec, &vocab, n_samples, common.seed)?;
            let mut table = ResultsTable::new(layer_columns(4));
            for mu in [0.0f32, 8.0] {
                let init = InitScheme { mu, sigma: 0.02 };
                let model = desk_init_model(&spec, &vocab, init, common.seed)?;
                table.push_row(format!("mu={mu}"), mean_layer_scores(&model, &seqs)?)?;
            }
            table.write_csv(&common.out.join("table4.csv"))?;
        }
        // init-sigma sweep
        "table5" => {
            let spec = TaskSpec::desk(TaskKind::Reversal);
            let (_, seqs) = analysis_inputs(&spec, &vocab, n_samples, common.seed)?;
            let mut table = ResultsTable::new(layer_columns(4));
            for sigma in [0.002f32, 0.02, 0.2] {
                let init = InitScheme { mu: 0.0, sigma };
                let model = desk_init_model(&spec, &vocab, init, common.seed)?;
                table.push_row(format!("sigma={sigma}"), mean_layer_scores(&model, &seqs)?)?;
            }
            table.write_csv(&common.out.join("table5.csv"))?;
        }
        // variance-sequence adjacency scores at init
        "table6" => {
            let mut table = ResultsTable::new(layer_columns(4));
            for kind in all_tasks {
                let spec = TaskSpec::desk(kind);
                let model = desk_init_model(&spec, &vocab, InitScheme::default(), common.seed)?;
                let (_, seqs) = analysis_inputs(&spec, &vocab, n_samples, common.seed)?;
                let mut sums = vec![0.0f64; 5];
                for seq in &seqs {
                    let (_, acts) = model.forward(seq)?;
                    for (layer, act) in acts.per_layer.iter().enumerate() {
                        let v = variance_sequence(act)?;
                        sums[layer] +=
                            variance_adjacency_score(&v, true, Direction::Decreasing)?
                                .matrix_score;
                    }
                }
                let means = sums.iter().map(|t| t / seqs.len() as f64).collect();
                table.push_row(format!("{} init", spec.kind.as_str()), means)?;
            }
            table.write_csv(&common.out.join("table6.csv"))?;
        }
        // heatmaps of one sample per task with annotated scores
        "figure1" => {
            for kind in all_tasks {
                let spec = TaskSpec::desk(kind);
                let model = desk_init_model(&spec, &vocab, InitScheme::default(), common.seed)?;
                let (_, seqs) = analysis_inputs(&spec, &vocab, 1, common.seed)?;
                let (_, acts) = model.forward(&seqs[0])?;
                for (layer, act) in acts.per_layer.iter().enumerate() {
                    let c = cosine_sim_matrix(act)?;
                    let score = adjacency_score(&c, true)?.matrix_score;
                    let stem = format!("figure1_{}_layer{layer}", spec.kind.as_str());
                    render_heatmap_pgm(&c, &common.out.join(format!("{stem}.pgm")))?;
                    render_heatmap_svg(&c, score, &common.out.join(format!("{stem}.svg")))?;
                }
            }
        }
        // sigma-sweep gap histograms
        "figure2" => {
            let spec = SimulationSpec {
                seed: common.seed,
                ..SimulationSpec::default()
            };
            let out = run_coefficient_simulation(&spec)?;
            for s in &out.per_sigma {
                write_histogram_csv(
                    &s.gap_ab_ac,
                    60,
                    &common.out.join(format!("figure2_sigma{}_ab_ac.csv", s.sigma)),
                )?;
                write_histogram_csv(
                    &s.gap_cb_ca,
                    60,
                    &common.out.join(format!("figure2_sigma{}_cb_ca.csv", s.sigma)),
                )?;
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown reproduce target {other:?} \
                 (expected table1|table4|table5|table6|figure1|figure2)"
            )));
        }
    }
    manifest.write(&common.out.join("manifest.txt"))?;
    println!("{target} written to {}", common.out.display());
    Ok(())
}
