//! Pipeline CLI: one subcommand per stage, thin dispatch into the library.
//!
//! Exit codes: 0 success, 2 usage error, 3 missing/incompatible artifact,
//! 4 numerical failure. The default output directory comes from `--out` or
//! the `KNNKD_OUT` environment variable.

use clap::{Args, Parser, Subcommand};
use knnkd::corpus::{Split, SynthTaskSpec};
use knnkd::knn::{IndexKind, Metric, SearchConfig};
use knnkd::pipeline::{
    bench_decode_stage, bench_train_stage, build_datastore_stage, decode_stage, evaluate_stage,
    gen_synth_stage, knn_search_stage, resolve_out_dir, sweep_stage, train_stage,
    DecodeMode, DecodeStageConfig, TaskDir, TrainMode, TrainStageConfig,
};
use knnkd::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "knnkd",
    version,
    about = "Desk-scale nearest-neighbor distillation pipeline for a toy translation model"
)]
struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override (generator seed for gen-synth, model seed for training).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Run directory for artifacts (default: $KNNKD_OUT or ./knnkd-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic many-valid-targets task into OUT/data.
    GenSynth(GenSynthArgs),
    /// Train a model (cross-entropy or distilled) on OUT/data.
    Train(TrainArgs),
    /// Build the datastore from a checkpoint over the train split.
    BuildDatastore(BuildDatastoreArgs),
    /// Offline batch k-nearest search; writes the neighbor file.
    KnnSearch(KnnSearchArgs),
    /// Decode a split with the base or retrieve-and-interpolate decoder.
    Decode(DecodeArgs),
    /// Score hypotheses (BLEU) and run the overcorrection probe.
    Evaluate(EvaluateArgs),
    /// Throughput benchmarks (decode tokens/s or training updates/s).
    Bench(BenchArgs),
    /// Grid sweep over (k, tau): trains one distilled model per point.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    num_sources: Option<usize>,
    #[arg(long)]
    valid_targets: Option<usize>,
    #[arg(long)]
    source_len: Option<usize>,
    #[arg(long)]
    target_len: Option<usize>,
    /// Comma-separated train,valid,test fractions (must sum to 1).
    #[arg(long)]
    fracs: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// `ce` or `knn-kd`.
    #[arg(long, default_value = "ce")]
    mode: String,
    /// Task directory (default OUT/data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Neighbor file (required for knn-kd).
    #[arg(long)]
    neighbors: Option<PathBuf>,
    /// Fine-tune from this checkpoint instead of fresh initialization.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Checkpoint file name inside OUT (default `<mode>.ckpt`).
    #[arg(long)]
    ckpt_name: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
}

#[derive(Args)]
struct BuildDatastoreArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to extract keys with (default OUT/ce.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output datastore file (default OUT/train.ds).
    #[arg(long)]
    datastore: Option<PathBuf>,
}

#[derive(Args)]
struct KnnSearchArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    datastore: Option<PathBuf>,
    /// Output neighbor file (default OUT/train.knn).
    #[arg(long)]
    neighbors: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// `sq-l2` (default) or `l2`.
    #[arg(long)]
    metric: Option<String>,
}

#[derive(Args)]
struct DecodeArgs {
    /// `base` or `knn-mt`.
    #[arg(long, default_value = "base")]
    mode: String,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Datastore (required for knn-mt).
    #[arg(long)]
    datastore: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Output hypotheses file (default OUT/hyps-<mode>-<split>.tgt).
    #[arg(long)]
    hyps: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Hypotheses file (default OUT/hyps-base-<split>.tgt).
    #[arg(long)]
    hyps: Option<PathBuf>,
    /// Checkpoint for the overcorrection probe (test split only).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// `decode` or `train`.
    #[arg(long, default_value = "decode")]
    what: String,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Second checkpoint decoded for a speed-parity comparison.
    #[arg(long)]
    compare_checkpoint: Option<PathBuf>,
    /// Adding a datastore also benchmarks the knn-mt decoder.
    #[arg(long)]
    datastore: Option<PathBuf>,
    /// Neighbor file (train benches).
    #[arg(long)]
    neighbors: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Decode only the first N sentences of the split (decode benches).
    #[arg(long)]
    limit: Option<usize>,
    /// Optimizer updates per repetition (train benches).
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    neighbors: Option<PathBuf>,
    /// Comma-separated neighbor counts, e.g. `1,2,4,8,16,32,64`.
    #[arg(long, default_value = "1,2,4,8,16,32,64")]
    ks: String,
    /// Comma-separated temperatures, e.g. `0.01,1,100`.
    #[arg(long, default_value = "100")]
    taus: String,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Output table (default OUT/sweep.tsv).
    #[arg(long)]
    table: Option<PathBuf>,
}

/// Optional TOML config file mirroring the stage configs.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(default)]
struct FileConfig {
    gen: Option<SynthTaskSpec>,
    train: Option<TrainStageConfig>,
    knn: Option<SearchConfig>,
    decode: Option<DecodeStageConfig>,
}

fn load_config(path: Option<&PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|_| Error::MissingArtifact(p.clone()))?;
            toml::from_str(&text)
                .map_err(|e| Error::InvalidArgument(format!("bad config file: {e}")))
        }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<T>()
                .map_err(|_| Error::InvalidArgument(format!("bad {what} list entry '{x}'")))
        })
        .collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    let threads = cli.threads.unwrap_or_else(rayon::current_num_threads);
    let out = resolve_out_dir(cli.out.clone());
    std::fs::create_dir_all(&out)?;
    let file_cfg = load_config(cli.config.as_ref())?;
    let data_dir = |flag: &Option<PathBuf>| flag.clone().unwrap_or_else(|| out.join("data"));

    match cli.cmd {
        Cmd::GenSynth(a) => {
            let mut spec = file_cfg.gen.unwrap_or_default();
            if let Some(v) = a.num_sources {
                spec.num_sources = v;
            }
            if let Some(v) = a.valid_targets {
                spec.valid_targets_per_source = v;
            }
            if let Some(v) = a.source_len {
                spec.source_len = v;
            }
            if let Some(v) = a.target_len {
                spec.target_len = v;
            }
            if let Some(f) = &a.fracs {
                let xs: Vec<f64> = parse_list(f, "fraction")?;
                if xs.len() != 3 {
                    return Err(Error::InvalidArgument(
                        "--fracs needs exactly three values".into(),
                    ));
                }
                (spec.train_frac, spec.valid_frac, spec.test_frac) = (xs[0], xs[1], xs[2]);
            }
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let dir = out.join("data");
            gen_synth_stage(&spec, &dir)?;
            println!("generated task in {}", dir.display());
        }
        Cmd::Train(a) => {
            let mut cfg = file_cfg.train.unwrap_or_default();
            cfg.mode = TrainMode::parse(&a.mode)?;
            if let Some(v) = a.epochs {
                cfg.epochs = v;
            }
            if let Some(v) = a.batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = a.lr {
                cfg.optim.base_lr = v;
            }
            if let Some(v) = a.warmup {
                cfg.optim.warmup_steps = v;
            }
            if let Some(v) = a.alpha {
                cfg.alpha = v;
            }
            if let Some(v) = a.tau {
                cfg.tau = v;
            }
            if let Some(v) = a.k {
                cfg.k = v;
            }
            if let Some(v) = a.embed_dim {
                cfg.embed_dim = v;
            }
            if let Some(v) = a.hidden_dim {
                cfg.hidden_dim = v;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let task = TaskDir::open(&data_dir(&a.data))?;
            let name = a.ckpt_name.unwrap_or_else(|| {
                match cfg.mode {
                    TrainMode::Ce => "ce.ckpt",
                    TrainMode::KnnKd => "knnkd.ckpt",
                }
                .to_string()
            });
            let ckpt = out.join(name);
            let outcome = train_stage(&task, &cfg, a.neighbors.as_deref(), a.init_from.as_deref(), &ckpt)?;
            let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} steps, final loss {last:.4}, checkpoint {}",
                outcome.losses.len(),
                ckpt.display()
            );
        }
        Cmd::BuildDatastore(a) => {
            let task = TaskDir::open(&data_dir(&a.data))?;
            let ckpt = a.checkpoint.unwrap_or_else(|| out.join("ce.ckpt"));
            let ds_path = a.datastore.unwrap_or_else(|| out.join("train.ds"));
            let ds = build_datastore_stage(&task, &ckpt, &ds_path)?;
            println!(
                "datastore: {} entries of dim {} at {}",
                ds.count(),
                ds.dim(),
                ds_path.display()
            );
        }
        Cmd::KnnSearch(a) => {
            let task = TaskDir::open(&data_dir(&a.data))?;
            let ckpt = a.checkpoint.unwrap_or_else(|| out.join("ce.ckpt"));
            let ds_path = a.datastore.unwrap_or_else(|| out.join("train.ds"));
            let nb_path = a.neighbors.unwrap_or_else(|| out.join("train.knn"));
            let mut cfg = file_cfg.knn.unwrap_or_default();
            if let Some(k) = a.k {
                cfg.k = k;
            }
            if let Some(m) = &a.metric {
                cfg.metric = Metric::parse(m)?;
            }
            cfg.index = IndexKind::Exact;
            knn_search_stage(&task, &ckpt, &ds_path, &cfg, &nb_path)?;
            println!("neighbor file at {}", nb_path.display());
        }
        Cmd::Decode(a) => {
            let task = TaskDir::open(&data_dir(&a.data))?;
            let ckpt = a.checkpoint.unwrap_or_else(|| out.join("ce.ckpt"));
            let mut cfg = file_cfg.decode.unwrap_or_default();
            cfg.mode = DecodeMode::parse(&a.mode)?;
            cfg.split = a.split.clone();
            if let Some(v) = a.beam {
                cfg.beam_size = v;
            }
            if let Some(v) = a.max_len {
                cfg.max_len = v;
            }
            if let Some(v) = a.lambda {
                cfg.interp.lambda = v;
            }
            if let Some(v) = a.k {
                cfg.interp.k = v;
            }
            if let Some(v) = a.tau {
                cfg.interp.tau = v;
            }
            let hyps = a
                .hyps
                .unwrap_or_else(|| out.join(format!("hyps-{}-{}.tgt", a.mode, a.split)));
            let res = decode_stage(&task, &ckpt, &cfg, a.datastore.as_deref(), &hyps)?;
            println!(
                "decoded {} tokens ({} searches) into {}",
                res.tokens,
                res.searches,
                hyps.display()
            );
        }
        Cmd::Evaluate(a) => {
            let task = TaskDir::open(&data_dir(&a.data))?;
            let split = Split::parse(&a.split)?;
            let hyps = a
                .hyps
                .unwrap_or_else(|| out.join(format!("hyps-base-{}.tgt", a.split)));
            let report = evaluate_stage(&task, split, &hyps, a.checkpoint.as_deref())?;
            print!("{}", report.to_kv_text());
        }
        Cmd::Bench(a) => {
            let task = TaskDir::open(&data_dir(&a.data))?;
            match a.what.as_str() {
                "decode" => {
                    let ckpt = a.checkpoint.unwrap_or_else(|| out.join("ce.ckpt"));
                    let mut cfg = file_cfg.decode.unwrap_or_default();
                    cfg.split = a.split.clone();
                    if let Some(v) = a.beam {
                        cfg.beam_size = v;
                    }
                    if let Some(v) = a.max_len {
                        cfg.max_len = v;
                    }
                    if let Some(v) = a.lambda {
                        cfg.interp.lambda = v;
                    }
                    if let Some(v) = a.k {
                        cfg.interp.k = v;
                    }
                    if let Some(v) = a.tau {
                        cfg.interp.tau = v;
                    }
                    let report = bench_decode_stage(
                        &task,
                        &ckpt,
                        a.compare_checkpoint.as_deref(),
                        a.datastore.as_deref(),
                        &cfg,
                        a.reps,
                        a.limit,
                        threads,
                        &out,
                    )?;
                    print!("{}", report.to_kv_text());
                }
                "train" => {
                    let neighbors = a.neighbors.ok_or_else(|| {
                        Error::InvalidArgument("--what train requires --neighbors".into())
                    })?;
                    let mut cfg = file_cfg.train.unwrap_or_default();
                    if let Some(v) = a.epochs {
                        cfg.epochs = v;
                    }
                    if let Some(v) = a.batch_size {
                        cfg.batch_size = v;
                    }
                    if let Some(v) = a.embed_dim {
                        cfg.embed_dim = v;
                    }
                    if let Some(v) = a.hidden_dim {
                        cfg.hidden_dim = v;
                    }
                    if let Some(s) = cli.seed {
                        cfg.seed = s;
                    }
                    let report = bench_train_stage(
                        &task, &cfg, &neighbors, a.steps, a.reps, threads, &out,
                    )?;
                    print!("{}", report.to_kv_text());
                }
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown bench target '{other}' (expected 'decode' or 'train')"
                    )))
                }
            }
        }
        Cmd::Sweep(a) => {
            let task = TaskDir::open(&data_dir(&a.data))?;
            let neighbors = a.neighbors.unwrap_or_else(|| out.join("train.knn"));
            let mut cfg = file_cfg.train.unwrap_or_default();
            cfg.mode = TrainMode::KnnKd;
            if let Some(v) = a.epochs {
                cfg.epochs = v;
            }
            if let Some(v) = a.batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = a.alpha {
                cfg.alpha = v;
            }
            if let Some(v) = a.embed_dim {
                cfg.embed_dim = v;
            }
            if let Some(v) = a.hidden_dim {
                cfg.hidden_dim = v;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let ks: Vec<usize> = parse_list(&a.ks, "k")?;
            let taus: Vec<f64> = parse_list(&a.taus, "tau")?;
            let table = a.table.unwrap_or_else(|| out.join("sweep.tsv"));
            let decode_defaults = file_cfg.decode.unwrap_or_default();
            let beam = a.beam.unwrap_or(decode_defaults.beam_size);
            let max_len = a.max_len.unwrap_or(decode_defaults.max_len);
            let rows = sweep_stage(&task, &cfg, &neighbors, &ks, &taus, beam, max_len, &table)?;
            println!("k\ttau\tbleu");
            for r in &rows {
                println!("{}\t{}\t{:.4}", r.k, r.tau, r.bleu);
            }
        }
    }
    Ok(())
}
