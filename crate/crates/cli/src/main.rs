//! `dcn`: command-line front end for deep clustering experiments.
//!
//! Exit codes: 0 on success, 1 on invalid input or configuration, 2 when
//! training diverges numerically.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dcn::autoenc::{read_params, write_params};
use dcn::config::{preset, ExperimentConfig};
use dcn::data::{load_dataset, read_labels, save_csv, write_labels, write_matrix, Dataset};
use dcn::dcn::{embed, initial_clustering, pretrain, TrainMode};
use dcn::experiment::{reproducibility_block, run_experiment};
use dcn::kmeans::{lloyd, write_assignments, write_centroids_csv, Init, LloydConfig};
use dcn::metrics::{score_with, NmiNorm};
use dcn::synth::{generate, GeneratorKind, GeneratorSpec};
use dcn::Error;

#[derive(Parser)]
#[command(name = "dcn", version, about = "Deep clustering: autoencoder + K-means trained jointly")]
struct Cli {
    /// Log progress (repeat for more detail); RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from latent Gaussian blobs.
    Synth(SynthArgs),
    /// Layer-wise pretraining only; writes params.dcnp.
    Pretrain(RunArgs),
    /// Full training run; writes report, summary, checkpoint, clustering and scatter.
    Train(RunArgs),
    /// Compare two label files.
    Eval(EvalArgs),
    /// Write the latent codes of a dataset under trained parameters.
    Embed(EmbedArgs),
    /// K-means on the raw features.
    Kmeans(KmeansArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Feature file: .dcnm, .csv, or IDX images.
    #[arg(long, conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Labels: one integer per line, or an IDX labels file for IDX images.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// The last CSV column holds labels.
    #[arg(long)]
    csv_labels: bool,
    /// Generate the data instead: sigsig, squared_sigmoid or tanh_sigmoid.
    #[arg(long)]
    synth: Option<GeneratorKind>,
    /// Seed of the generated data (defaults to the run seed).
    #[arg(long)]
    data_seed: Option<u64>,
    /// Keep only the first N samples of every class.
    #[arg(long)]
    per_class: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Config file of key=value lines (may itself name a preset).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<TrainMode>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "sigsig")]
    kind: GeneratorKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    #[arg(long, default_value_t = 2500)]
    per_cluster: usize,
    #[arg(long, default_value_t = 100)]
    ambient_dim: usize,
    #[arg(long, default_value_t = 10)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 4.0)]
    centroid_scale: f64,
    #[arg(long, default_value_t = 0.8)]
    noise_std: f64,
    /// Also write data.csv with labels in the last column.
    #[arg(long)]
    csv: bool,
    #[arg(long, default_value = "synth")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// sqrt or arithmetic
    #[arg(long, default_value = "sqrt")]
    nmi_norm: String,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; .csv writes text, anything else a DCNM matrix.
    #[arg(long, default_value = "latent.dcnm")]
    out: PathBuf,
}

#[derive(Args)]
struct KmeansArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 300)]
    max_iter: usize,
    #[arg(long, default_value = "kmeans")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_divergence() { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> dcn::Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Embed(a) => embed_cmd(a),
        Command::Kmeans(a) => kmeans(a),
    }
}

fn create_dir(dir: &Path) -> dcn::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> dcn::Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load(args: &DataArgs, run_seed: u64) -> dcn::Result<Dataset> {
    let ds = match (&args.data, args.synth) {
        (Some(path), _) => load_dataset(path, args.labels.as_deref(), args.csv_labels)?,
        (None, Some(kind)) => generate(&GeneratorSpec::new(kind, args.data_seed.unwrap_or(run_seed)))?.dataset,
        (None, None) => return Err(Error::InvalidArgument("pass --data PATH or --synth KIND".into())),
    };
    match args.per_class {
        Some(n) => ds.balanced_subset(n),
        None => Ok(ds),
    }
}

fn resolve_config(a: &RunArgs) -> dcn::Result<ExperimentConfig> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => ExperimentConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = a.mode {
        cfg.mode = mode;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pretrain_cmd(a: RunArgs) -> dcn::Result<()> {
    let cfg = resolve_config(&a)?;
    let ds = load(&a.data, cfg.seed)?;
    let params = pretrain(&ds, &cfg)?;
    let state = initial_clustering(&params, &ds, &cfg)?;
    create_dir(&a.out)?;
    write_params(a.out.join("params.dcnp"), &params)?;
    write_centroids_csv(a.out.join("centroids.csv"), &state.centroids)?;
    write_assignments(a.out.join("assignments.csv"), &state.assignments)?;
    let mut text = String::new();
    if let Some(y) = &ds.labels {
        let s = score_with(y, &state.assignments, cfg.nmi_norm)?;
        text.push_str(&format!("pretrained = nmi={:.6} ari={:.6} acc={:.6}\n\n", s.nmi, s.ari, s.acc));
        println!("nmi {:.4} ari {:.4} acc {:.4}", s.nmi, s.ari, s.acc);
    }
    text.push_str(&reproducibility_block(&cfg, &ds));
    write_text(&a.out.join("summary.txt"), &text)
}

fn train_cmd(a: RunArgs) -> dcn::Result<()> {
    let cfg = resolve_config(&a)?;
    let ds = load(&a.data, cfg.seed)?;
    let res = run_experiment(&cfg, &ds, &a.out)?;
    if let Some(s) = res.output.final_scores {
        println!("nmi {:.4} ari {:.4} acc {:.4}", s.nmi, s.ari, s.acc);
    }
    println!("collapse_indicator {:.4}", res.collapse);
    Ok(())
}

fn synth(a: SynthArgs) -> dcn::Result<()> {
    let spec = GeneratorSpec {
        clusters: a.clusters,
        per_cluster: a.per_cluster,
        ambient_dim: a.ambient_dim,
        hidden_dim: a.hidden_dim,
        centroid_scale: a.centroid_scale,
        noise_std: a.noise_std,
        ..GeneratorSpec::new(a.kind, a.seed)
    };
    let syn = generate(&spec)?;
    let ds = &syn.dataset;
    create_dir(&a.out)?;
    write_matrix(a.out.join("features.dcnm"), &ds.features)?;
    if let Some(h) = &ds.latent {
        write_matrix(a.out.join("latent.dcnm"), h)?;
    }
    write_labels(a.out.join("labels.txt"), ds.labels.as_deref().unwrap_or(&[]))?;
    if a.csv {
        save_csv(a.out.join("data.csv"), ds)?;
    }
    println!("{} samples x {} features -> {}", ds.len(), ds.dim(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> dcn::Result<()> {
    let norm = match a.nmi_norm.as_str() {
        "sqrt" => NmiNorm::Sqrt,
        "arithmetic" => NmiNorm::Arithmetic,
        other => return Err(Error::InvalidArgument(format!("unknown NMI normalization {other:?}"))),
    };
    let s = score_with(&read_labels(&a.truth)?, &read_labels(&a.pred)?, norm)?;
    println!("nmi {:?}\nari {:?}\nacc {:?}", s.nmi, s.ari, s.acc);
    Ok(())
}

fn embed_cmd(a: EmbedArgs) -> dcn::Result<()> {
    let ds = load(&a.data, a.seed.unwrap_or(0))?;
    let params = read_params(&a.params)?;
    let h = embed(&params, &ds)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    if a.out.extension().is_some_and(|e| e == "csv") {
        save_csv(&a.out, &Dataset::new(h, None, "latent")?)
    } else {
        write_matrix(&a.out, &h)
    }
}

fn kmeans(a: KmeansArgs) -> dcn::Result<()> {
    let ds = load(&a.data, a.seed)?;
    let cfg = LloydConfig {
        init: Init::KmeansPlusPlus,
        restarts: a.restarts,
        max_iter: a.max_iter,
        ..LloydConfig::new(a.k, a.seed)
    };
    let res = lloyd(&ds.features, &cfg)?;
    create_dir(&a.out)?;
    write_centroids_csv(a.out.join("centroids.csv"), &res.state.centroids)?;
    write_assignments(a.out.join("assignments.csv"), &res.state.assignments)?;
    println!("cost {:?} after {} iterations", res.cost, res.iterations);
    if let Some(y) = &ds.labels {
        let s = score_with(y, &res.state.assignments, NmiNorm::Sqrt)?;
        println!("nmi {:.4} ari {:.4} acc {:.4}", s.nmi, s.ari, s.acc);
    }
    Ok(())
}
