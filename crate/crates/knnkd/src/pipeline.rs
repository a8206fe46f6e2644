//! Stage orchestration: each pipeline stage validates its upstream
//! artifacts, produces its outputs, and writes a run manifest recording the
//! resolved configuration plus content hashes of every input and output.
//!
//! Stage DAG:
//!
//! ```text
//! gen-synth -> train(ce) -> build-datastore -> knn-search -> train(knn-kd)
//!                                                         -> decode -> evaluate / bench
//! ```
//!
//! The `knnkd` binary maps these functions onto subcommands one to one.

use crate::corpus::{
    gen_synth, load_oracle, OracleRecord, ParallelCorpus, Split, SynthTaskSpec, Vocabulary,
};
use crate::datastore::Datastore;
use crate::distill::TeacherDistribution;
use crate::evalbench::{
    bench_decode, bench_train, bleu, overcorrection_probe, BleuReport, OvercorrectionReport,
    SessionFingerprint, ThroughputReport,
};
use crate::knn::{
    batch_search_training_set, write_neighbor_file, Metric, NeighborFile, SearchConfig,
};
use crate::knnmt::{knnmt_decode, InterpConfig, Retriever};
use crate::model::{train_epochs, AdamState, ModelConfig, ModelState, OptimConfig};
use crate::util::{file_fingerprint, file_sha256};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Environment variable selecting the default output directory.
pub const OUT_DIR_ENV: &str = "KNNKD_OUT";

pub fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var(OUT_DIR_ENV).ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("knnkd-out"))
}

/// Per-stage provenance record written next to each produced artifact.
#[derive(Debug, serde::Serialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub stage: String,
    pub unix_time: u64,
    pub config: serde_json::Value,
    /// Input path -> SHA-256 content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output path -> SHA-256 content hash.
    pub outputs: BTreeMap<String, String>,
}

fn hash_files(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        out.insert(p.display().to_string(), file_sha256(p)?);
    }
    Ok(out)
}

fn write_manifest<C: serde::Serialize>(
    dir: &Path,
    stage: &str,
    config: &C,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<PathBuf> {
    let manifest = RunManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        stage: stage.to_string(),
        unix_time: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        config: serde_json::to_value(config).expect("config serializes"),
        inputs: hash_files(inputs)?,
        outputs: hash_files(outputs)?,
    };
    let path = dir.join(format!("{stage}.manifest.json"));
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(path)
}

/// A generated task directory with its vocabularies loaded.
pub struct TaskDir {
    pub dir: PathBuf,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

impl TaskDir {
    pub fn open(dir: &Path) -> Result<TaskDir> {
        let src_vocab = Vocabulary::load(&dir.join("vocab.src.txt"))?;
        let tgt_vocab = Vocabulary::load(&dir.join("vocab.tgt.txt"))?;
        Ok(TaskDir {
            dir: dir.to_path_buf(),
            src_vocab,
            tgt_vocab,
        })
    }

    pub fn split_paths(&self, split: Split) -> (PathBuf, PathBuf) {
        (
            self.dir.join(format!("{}.src", split.name())),
            self.dir.join(format!("{}.tgt", split.name())),
        )
    }

    pub fn corpus(&self, split: Split) -> Result<ParallelCorpus> {
        let (src, tgt) = self.split_paths(split);
        ParallelCorpus::from_files(&src, &tgt, &self.src_vocab, &self.tgt_vocab)
    }

    pub fn source_lines(&self, split: Split) -> Result<Vec<String>> {
        let (src, _) = self.split_paths(split);
        let text = std::fs::read_to_string(&src)
            .map_err(|_| Error::MissingArtifact(src.clone()))?;
        Ok(text.lines().map(str::to_string).collect())
    }

    pub fn target_lines(&self, split: Split) -> Result<Vec<String>> {
        let (_, tgt) = self.split_paths(split);
        let text = std::fs::read_to_string(&tgt)
            .map_err(|_| Error::MissingArtifact(tgt.clone()))?;
        Ok(text.lines().map(str::to_string).collect())
    }

    pub fn oracle(&self) -> Result<Vec<OracleRecord>> {
        load_oracle(&self.dir.join("oracle.tsv"))
    }
}

/// Generate the synthetic task into `out_dir`.
pub fn gen_synth_stage(spec: &SynthTaskSpec, out_dir: &Path) -> Result<TaskDir> {
    let task = gen_synth(spec)?;
    task.write_to_dir(out_dir)?;
    let files: Vec<PathBuf> = [
        "train.src",
        "train.tgt",
        "valid.src",
        "valid.tgt",
        "test.src",
        "test.tgt",
        "vocab.src.txt",
        "vocab.tgt.txt",
        "oracle.tsv",
    ]
    .iter()
    .map(|f| out_dir.join(f))
    .collect();
    let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    write_manifest(out_dir, "gen-synth", spec, &[], &refs)?;
    TaskDir::open(out_dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TrainMode {
    Ce,
    KnnKd,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(TrainMode::Ce),
            "knn-kd" => Ok(TrainMode::KnnKd),
            other => Err(Error::InvalidArgument(format!(
                "unknown train mode '{other}' (expected 'ce' or 'knn-kd')"
            ))),
        }
    }
}

/// Everything a training run needs beyond the data directory.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainStageConfig {
    pub mode: TrainMode,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Distillation mixing weight (knn-kd mode).
    pub alpha: f64,
    /// Teacher temperature (knn-kd mode).
    pub tau: f64,
    /// Neighbors used per teacher; truncates the neighbor file's k.
    pub k: usize,
}

impl Default for TrainStageConfig {
    fn default() -> Self {
        TrainStageConfig {
            mode: TrainMode::Ce,
            embed_dim: 32,
            hidden_dim: 32,
            seed: 11,
            epochs: 40,
            batch_size: 8,
            optim: OptimConfig {
                base_lr: 3e-3,
                warmup_steps: 200,
                ..OptimConfig::default()
            },
            alpha: 0.5,
            tau: 100.0,
            k: 16,
        }
    }
}

/// Build per-sentence teacher distributions from a neighbor file, truncating
/// each record to the first `k` entries (valid because exact-search results
/// are prefix-stable in k).
pub fn teachers_from_neighbors(
    nf: &NeighborFile,
    corpus: &ParallelCorpus,
    k: usize,
    tau: f64,
) -> Result<Vec<Vec<TeacherDistribution>>> {
    if k < 1 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let k_use = k.min(nf.k);
    let grouped = nf.by_sentence(corpus)?;
    grouped
        .into_iter()
        .map(|sent| {
            sent.into_iter()
                .map(|rec| TeacherDistribution::from_neighbors(&rec[..k_use], tau))
                .collect()
        })
        .collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub losses: Vec<f64>,
}

/// Train a model on the task's train split and write a checkpoint.
///
/// knn-kd mode requires the neighbor file produced by `knn_search_stage`; the
/// teacher distributions are recomputed from it on the fly. By default the
/// model trains from fresh initialization (seeded); `init_from` instead
/// fine-tunes an existing checkpoint.
pub fn train_stage(
    task: &TaskDir,
    cfg: &TrainStageConfig,
    neighbors: Option<&Path>,
    init_from: Option<&Path>,
    out_ckpt: &Path,
) -> Result<TrainOutcome> {
    let corpus = task.corpus(Split::Train)?;
    let teachers = match (cfg.mode, neighbors) {
        (TrainMode::Ce, _) => None,
        (TrainMode::KnnKd, None) => {
            return Err(Error::InvalidArgument(
                "--mode knn-kd requires a neighbor file".into(),
            ))
        }
        (TrainMode::KnnKd, Some(path)) => {
            let nf = NeighborFile::load(path)?;
            Some(teachers_from_neighbors(&nf, &corpus, cfg.k, cfg.tau)?)
        }
    };

    let mut model = match init_from {
        Some(path) => {
            let m = ModelState::load(path)?;
            if m.config.src_vocab_size != corpus.src_vocab_size
                || m.config.tgt_vocab_size != corpus.tgt_vocab_size
            {
                return Err(Error::ArtifactMismatch(
                    "init checkpoint vocab sizes do not match the task".into(),
                ));
            }
            m
        }
        None => ModelState::init(ModelConfig {
            embed_dim: cfg.embed_dim,
            hidden_dim: cfg.hidden_dim,
            src_vocab_size: corpus.src_vocab_size,
            tgt_vocab_size: corpus.tgt_vocab_size,
            seed: cfg.seed,
        }),
    };

    let alpha = match cfg.mode {
        TrainMode::Ce => 0.0,
        TrainMode::KnnKd => cfg.alpha,
    };
    let mut opt = AdamState::new(model.params.len(), cfg.optim);
    let losses = train_epochs(
        &mut model,
        &corpus.pairs,
        teachers.as_deref(),
        alpha,
        cfg.epochs,
        cfg.batch_size,
        &mut opt,
    )?;
    model.save(out_ckpt)?;

    let stage = match cfg.mode {
        TrainMode::Ce => "train-ce",
        TrainMode::KnnKd => "train-knn-kd",
    };
    let (src, tgt) = task.split_paths(Split::Train);
    let mut inputs: Vec<&Path> = vec![&src, &tgt];
    if let Some(p) = neighbors {
        inputs.push(p);
    }
    if let Some(p) = init_from {
        inputs.push(p);
    }
    let dir = out_ckpt.parent().unwrap_or(Path::new(".")).to_path_buf();
    write_manifest(&dir, stage, cfg, &inputs, &[out_ckpt])?;
    Ok(TrainOutcome {
        checkpoint: out_ckpt.to_path_buf(),
        losses,
    })
}

/// Build the datastore from a checkpoint over the task's train split.
pub fn build_datastore_stage(
    task: &TaskDir,
    checkpoint: &Path,
    out: &Path,
) -> Result<Datastore> {
    let model = ModelState::load(checkpoint)?;
    let corpus = task.corpus(Split::Train)?;
    let fp = file_fingerprint(checkpoint)?;
    let ds = Datastore::build(&model, &corpus, fp)?;
    ds.save(out)?;
    let (src, tgt) = task.split_paths(Split::Train);
    let dir = out.parent().unwrap_or(Path::new(".")).to_path_buf();
    #[derive(serde::Serialize)]
    struct Cfg<'a> {
        checkpoint: &'a str,
        entries: usize,
        dim: usize,
    }
    write_manifest(
        &dir,
        "build-datastore",
        &Cfg {
            checkpoint: &checkpoint.display().to_string(),
            entries: ds.count(),
            dim: ds.dim(),
        },
        &[checkpoint, &src, &tgt],
        &[out],
    )?;
    Datastore::load(out)
}

/// Offline batch search over the train split; writes the neighbor file.
pub fn knn_search_stage(
    task: &TaskDir,
    checkpoint: &Path,
    datastore: &Path,
    cfg: &SearchConfig,
    out: &Path,
) -> Result<()> {
    let model = ModelState::load(checkpoint)?;
    let ds = Datastore::load(datastore)?;
    let corpus = task.corpus(Split::Train)?;
    let fp = file_fingerprint(checkpoint)?;
    let sets = batch_search_training_set(&ds, &model, &corpus, cfg, fp)?;
    write_neighbor_file(out, &sets, fp)?;
    let (src, tgt) = task.split_paths(Split::Train);
    let dir = out.parent().unwrap_or(Path::new(".")).to_path_buf();
    write_manifest(
        &dir,
        "knn-search",
        cfg,
        &[checkpoint, datastore, &src, &tgt],
        &[out],
    )?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DecodeMode {
    Base,
    KnnMt,
}

impl DecodeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(DecodeMode::Base),
            "knn-mt" => Ok(DecodeMode::KnnMt),
            other => Err(Error::InvalidArgument(format!(
                "unknown decode mode '{other}' (expected 'base' or 'knn-mt')"
            ))),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DecodeStageConfig {
    pub mode: DecodeMode,
    pub split: String,
    pub beam_size: usize,
    pub max_len: usize,
    pub interp: InterpConfig,
    pub metric: Metric,
}

impl Default for DecodeStageConfig {
    fn default() -> Self {
        DecodeStageConfig {
            mode: DecodeMode::Base,
            split: "test".into(),
            beam_size: 5,
            max_len: 24,
            interp: InterpConfig::default(),
            metric: Metric::SquaredL2,
        }
    }
}

#[derive(Debug)]
pub struct DecodeOutcome {
    pub hyps_path: PathBuf,
    pub tokens: usize,
    pub searches: u64,
}

/// Decode a split and write one hypothesis line per source line.
pub fn decode_stage(
    task: &TaskDir,
    checkpoint: &Path,
    cfg: &DecodeStageConfig,
    datastore: Option<&Path>,
    out: &Path,
) -> Result<DecodeOutcome> {
    let model = ModelState::load(checkpoint)?;
    let split = Split::parse(&cfg.split)?;
    let sources = task.source_lines(split)?;
    if sources.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let ds = match (cfg.mode, datastore) {
        (DecodeMode::Base, _) => None,
        (DecodeMode::KnnMt, None) => {
            return Err(Error::InvalidArgument(
                "--mode knn-mt requires a datastore".into(),
            ))
        }
        (DecodeMode::KnnMt, Some(path)) => Some(Datastore::load(path)?),
    };

    let mut lines = String::new();
    let mut tokens = 0usize;
    let mut searches = 0u64;
    for line in &sources {
        let src = task.src_vocab.encode(line);
        let decoded = match &ds {
            None => model.decode(&src, cfg.beam_size, cfg.max_len)?.tokens,
            Some(ds) => {
                let out = knnmt_decode(
                    &model,
                    Retriever::Exact(ds),
                    &src,
                    cfg.beam_size,
                    &cfg.interp,
                    cfg.metric,
                    cfg.max_len,
                )?;
                searches += out.searches;
                out.output.tokens
            }
        };
        tokens += decoded.len();
        writeln!(lines, "{}", task.tgt_vocab.decode(&decoded)).unwrap();
    }
    std::fs::write(out, lines)?;

    let (srcp, _) = task.split_paths(split);
    let mut inputs: Vec<&Path> = vec![checkpoint, &srcp];
    if let Some(p) = datastore {
        inputs.push(p);
    }
    let dir = out.parent().unwrap_or(Path::new(".")).to_path_buf();
    let stage = match cfg.mode {
        DecodeMode::Base => "decode-base",
        DecodeMode::KnnMt => "decode-knn-mt",
    };
    write_manifest(&dir, stage, cfg, &inputs, &[out])?;
    Ok(DecodeOutcome {
        hyps_path: out.to_path_buf(),
        tokens,
        searches,
    })
}

#[derive(Debug, serde::Serialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub split: String,
    pub bleu: BleuReport,
    pub overcorrection: Option<OvercorrectionReport>,
}

impl EvalReport {
    /// Line-oriented `key=value` rendering.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "format_version={}", self.format_version).unwrap();
        writeln!(s, "split={}", self.split).unwrap();
        writeln!(s, "bleu={:.4}", self.bleu.bleu).unwrap();
        for (i, p) in self.bleu.precisions.iter().enumerate() {
            writeln!(s, "precision{}={:.6}", i + 1, p).unwrap();
        }
        writeln!(s, "brevity_penalty={:.6}", self.bleu.brevity_penalty).unwrap();
        writeln!(s, "hyp_len={}", self.bleu.hyp_len).unwrap();
        writeln!(s, "ref_len={}", self.bleu.ref_len).unwrap();
        if let Some(oc) = &self.overcorrection {
            writeln!(s, "overcorrection_mean_mass={:.6}", oc.mean_mass).unwrap();
            writeln!(s, "overcorrection_contexts={}", oc.contexts).unwrap();
            writeln!(s, "overcorrection_contested={}", oc.contested_contexts).unwrap();
            writeln!(s, "overcorrection_min_mass={:.6}", oc.min_mass).unwrap();
            writeln!(s, "overcorrection_max_mass={:.6}", oc.max_mass).unwrap();
        }
        s
    }
}

/// Score hypotheses against the split references; when a checkpoint is given
/// and the split is `test`, also run the overcorrection probe against the
/// oracle sidecar. Writes `eval.report.txt` and `eval.report.json` next to
/// the hypotheses.
pub fn evaluate_stage(
    task: &TaskDir,
    split: Split,
    hyps_path: &Path,
    checkpoint: Option<&Path>,
) -> Result<EvalReport> {
    let hyp_text = std::fs::read_to_string(hyps_path)
        .map_err(|_| Error::MissingArtifact(hyps_path.to_path_buf()))?;
    let hyps: Vec<Vec<String>> = hyp_text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect();
    let refs: Vec<Vec<String>> = task
        .target_lines(split)?
        .iter()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect();
    let bleu_report = bleu(&hyps, &refs, 4)?;

    let overcorrection = match (checkpoint, split) {
        (Some(ckpt), Split::Test) => {
            let model = ModelState::load(ckpt)?;
            let corpus = task.corpus(Split::Test)?;
            let oracle = task.oracle()?;
            Some(overcorrection_probe(&model, &corpus, &oracle)?)
        }
        _ => None,
    };

    let report = EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        split: split.name().to_string(),
        bleu: bleu_report,
        overcorrection,
    };
    let dir = hyps_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    std::fs::write(dir.join("eval.report.txt"), report.to_kv_text())?;
    std::fs::write(
        dir.join("eval.report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let mut inputs: Vec<&Path> = vec![hyps_path];
    let (_, tgtp) = task.split_paths(split);
    inputs.push(&tgtp);
    let txt = dir.join("eval.report.txt");
    let json = dir.join("eval.report.json");
    write_manifest(&dir, "evaluate", &report.split, &inputs, &[&txt, &json])?;
    Ok(report)
}

#[derive(Debug, serde::Serialize)]
pub struct BenchReport {
    pub format_version: u32,
    pub runs: Vec<ThroughputReport>,
    /// (run name, baseline name, throughput ratio).
    pub ratios: Vec<(String, String, f64)>,
}

impl BenchReport {
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "format_version={}", self.format_version).unwrap();
        for r in &self.runs {
            if let Some(t) = r.tokens_per_second {
                writeln!(s, "{}.tokens_per_second={t:.2}", r.name).unwrap();
            }
            if let Some(u) = r.updates_per_second {
                writeln!(s, "{}.updates_per_second={u:.2}", r.name).unwrap();
            }
            writeln!(s, "{}.seconds={:.4}", r.name, r.seconds).unwrap();
            writeln!(s, "{}.threads={}", r.name, r.session.threads).unwrap();
        }
        for (a, b, ratio) in &self.ratios {
            writeln!(s, "ratio.{a}_vs_{b}={ratio:.4}").unwrap();
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("bench.report.txt"), self.to_kv_text())?;
        std::fs::write(
            dir.join("bench.report.json"),
            serde_json::to_string_pretty(self).expect("report serializes"),
        )?;
        Ok(())
    }
}

/// Decode-throughput comparison: the `base` checkpoint alone, optionally a
/// second checkpoint with the identical architecture, and optionally the
/// retrieve-and-interpolate decoder over a datastore. Inference batch is one
/// sentence; `limit` caps how many sentences each repetition decodes.
#[allow(clippy::too_many_arguments)]
pub fn bench_decode_stage(
    task: &TaskDir,
    checkpoint: &Path,
    compare_checkpoint: Option<&Path>,
    datastore: Option<&Path>,
    decode_cfg: &DecodeStageConfig,
    repetitions: usize,
    limit: Option<usize>,
    threads: usize,
    out_dir: &Path,
) -> Result<BenchReport> {
    let session = SessionFingerprint::current(threads);
    let split = Split::parse(&decode_cfg.split)?;
    let mut sources: Vec<Vec<u32>> = task
        .source_lines(split)?
        .iter()
        .map(|l| task.src_vocab.encode(l))
        .collect();
    if let Some(n) = limit {
        sources.truncate(n);
    }
    if sources.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut runs = Vec::new();
    let mut ratios = Vec::new();

    let base_model = ModelState::load(checkpoint)?;
    let decode_all = |model: &ModelState| -> Result<usize> {
        let mut tokens = 0;
        for src in &sources {
            tokens += model
                .decode(src, decode_cfg.beam_size, decode_cfg.max_len)?
                .tokens
                .len()
                + 1; // count the terminating step too
        }
        Ok(tokens)
    };
    let base = bench_decode(
        "base",
        || decode_all(&base_model),
        repetitions,
        session.clone(),
    )?;
    runs.push(base.clone());

    if let Some(ckpt_b) = compare_checkpoint {
        let model_b = ModelState::load(ckpt_b)?;
        let cmp = bench_decode(
            "compare",
            || decode_all(&model_b),
            repetitions,
            session.clone(),
        )?;
        ratios.push(("compare".into(), "base".into(), cmp.ratio_vs(&base)?));
        runs.push(cmp);
    }

    if let Some(ds_path) = datastore {
        let ds = Datastore::load(ds_path)?;
        let knnmt_all = || -> Result<usize> {
            let mut tokens = 0;
            for src in &sources {
                let out = knnmt_decode(
                    &base_model,
                    Retriever::Exact(&ds),
                    src,
                    decode_cfg.beam_size,
                    &decode_cfg.interp,
                    decode_cfg.metric,
                    decode_cfg.max_len,
                )?;
                tokens += out.output.tokens.len() + 1;
            }
            Ok(tokens)
        };
        let knnmt = bench_decode("knn-mt", knnmt_all, repetitions, session.clone())?;
        ratios.push(("knn-mt".into(), "base".into(), knnmt.ratio_vs(&base)?));
        runs.push(knnmt);
    }

    let report = BenchReport {
        format_version: REPORT_FORMAT_VERSION,
        runs,
        ratios,
    };
    std::fs::create_dir_all(out_dir)?;
    report.write(out_dir)?;
    Ok(report)
}

/// Training-throughput comparison between plain CE updates and distilled
/// updates on the same data (updates per second over `steps` updates).
#[allow(clippy::too_many_arguments)]
pub fn bench_train_stage(
    task: &TaskDir,
    train_cfg: &TrainStageConfig,
    neighbors: &Path,
    steps: usize,
    repetitions: usize,
    threads: usize,
    out_dir: &Path,
) -> Result<BenchReport> {
    let session = SessionFingerprint::current(threads);
    let corpus = task.corpus(Split::Train)?;
    let nf = NeighborFile::load(neighbors)?;
    let teachers = teachers_from_neighbors(&nf, &corpus, train_cfg.k, train_cfg.tau)?;

    let model_cfg = ModelConfig {
        embed_dim: train_cfg.embed_dim,
        hidden_dim: train_cfg.hidden_dim,
        src_vocab_size: corpus.src_vocab_size,
        tgt_vocab_size: corpus.tgt_vocab_size,
        seed: train_cfg.seed,
    };
    let epochs_for = |steps: usize| -> usize {
        let per_epoch = corpus.pairs.len().div_ceil(train_cfg.batch_size);
        steps.div_ceil(per_epoch).max(1)
    };
    let epochs = epochs_for(steps);

    let run = |use_teachers: bool| -> Result<usize> {
        let mut model = ModelState::init(model_cfg);
        let mut opt = AdamState::new(model.params.len(), train_cfg.optim);
        let losses = train_epochs(
            &mut model,
            &corpus.pairs,
            if use_teachers {
                Some(teachers.as_slice())
            } else {
                None
            },
            if use_teachers { train_cfg.alpha } else { 0.0 },
            epochs,
            train_cfg.batch_size,
            &mut opt,
        )?;
        Ok(losses.len())
    };

    let ce = bench_train("train-ce", || run(false), repetitions, session.clone())?;
    let kd = bench_train("train-knn-kd", || run(true), repetitions, session.clone())?;
    let ratio = kd.ratio_vs(&ce)?;
    let report = BenchReport {
        format_version: REPORT_FORMAT_VERSION,
        runs: vec![ce, kd],
        ratios: vec![("train-knn-kd".into(), "train-ce".into(), ratio)],
    };
    std::fs::create_dir_all(out_dir)?;
    report.write(out_dir)?;
    Ok(report)
}

/// One sweep grid point result.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub tau: f64,
    pub bleu: f64,
}

/// Train one distilled model per (k, tau) grid point and score it on the
/// validation split with beam search. Writes a TSV table (`k`, `tau`,
/// `bleu`), one row per grid point.
#[allow(clippy::too_many_arguments)]
pub fn sweep_stage(
    task: &TaskDir,
    train_cfg: &TrainStageConfig,
    neighbors: &Path,
    ks: &[usize],
    taus: &[f64],
    beam_size: usize,
    max_len: usize,
    out: &Path,
) -> Result<Vec<SweepRow>> {
    if ks.is_empty() || taus.is_empty() {
        return Err(Error::InvalidArgument("empty sweep grid".into()));
    }
    let corpus = task.corpus(Split::Train)?;
    let nf = NeighborFile::load(neighbors)?;
    let valid_src = task.source_lines(Split::Valid)?;
    let valid_refs: Vec<Vec<String>> = task
        .target_lines(Split::Valid)?
        .iter()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect();
    if valid_src.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut rows = Vec::new();
    for &k in ks {
        for &tau in taus {
            let teachers = teachers_from_neighbors(&nf, &corpus, k, tau)?;
            let mut model = ModelState::init(ModelConfig {
                embed_dim: train_cfg.embed_dim,
                hidden_dim: train_cfg.hidden_dim,
                src_vocab_size: corpus.src_vocab_size,
                tgt_vocab_size: corpus.tgt_vocab_size,
                seed: train_cfg.seed,
            });
            let mut opt = AdamState::new(model.params.len(), train_cfg.optim);
            train_epochs(
                &mut model,
                &corpus.pairs,
                Some(&teachers),
                train_cfg.alpha,
                train_cfg.epochs,
                train_cfg.batch_size,
                &mut opt,
            )?;
            let hyps: Vec<Vec<String>> = valid_src
                .iter()
                .map(|line| {
                    let src = task.src_vocab.encode(line);
                    let out = model.decode(&src, beam_size, max_len)?;
                    Ok(task
                        .tgt_vocab
                        .decode(&out.tokens)
                        .split_whitespace()
                        .map(str::to_string)
                        .collect())
                })
                .collect::<Result<_>>()?;
            let score = bleu(&hyps, &valid_refs, 4)?;
            rows.push(SweepRow {
                k,
                tau,
                bleu: score.bleu,
            });
        }
    }

    let mut table = String::from("k\ttau\tbleu\n");
    for row in &rows {
        writeln!(table, "{}\t{}\t{:.4}", row.k, row.tau, row.bleu).unwrap();
    }
    std::fs::write(out, table)?;
    let dir = out.parent().unwrap_or(Path::new(".")).to_path_buf();
    #[derive(serde::Serialize)]
    struct Cfg<'a> {
        ks: &'a [usize],
        taus: &'a [f64],
        train: &'a TrainStageConfig,
    }
    write_manifest(
        &dir,
        "sweep",
        &Cfg {
            ks,
            taus,
            train: train_cfg,
        },
        &[neighbors],
        &[out],
    )?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthTaskSpec {
        SynthTaskSpec {
            num_sources: 8,
            valid_targets_per_source: 6,
            source_len: 5,
            target_len: 8,
            seed: 3,
            ..SynthTaskSpec::default()
        }
    }

    fn fast_train() -> TrainStageConfig {
        TrainStageConfig {
            epochs: 2,
            embed_dim: 8,
            hidden_dim: 8,
            ..TrainStageConfig::default()
        }
    }

    #[test]
    fn pipeline_stages_chain_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let task = gen_synth_stage(&small_spec(), &data).unwrap();

        let ce_ckpt = dir.path().join("ce.ckpt");
        let out = train_stage(&task, &fast_train(), None, None, &ce_ckpt).unwrap();
        assert!(!out.losses.is_empty());
        assert!(ce_ckpt.exists());
        assert!(dir.path().join("train-ce.manifest.json").exists());

        let ds_path = dir.path().join("train.ds");
        let ds = build_datastore_stage(&task, &ce_ckpt, &ds_path).unwrap();
        let train_corpus = task.corpus(Split::Train).unwrap();
        assert_eq!(ds.count(), train_corpus.total_target_tokens());

        let nb_path = dir.path().join("train.knn");
        knn_search_stage(
            &task,
            &ce_ckpt,
            &ds_path,
            &SearchConfig {
                k: 4,
                ..Default::default()
            },
            &nb_path,
        )
        .unwrap();

        let kd_ckpt = dir.path().join("kd.ckpt");
        let kd_cfg = TrainStageConfig {
            mode: TrainMode::KnnKd,
            k: 4,
            ..fast_train()
        };
        train_stage(&task, &kd_cfg, Some(&nb_path), None, &kd_ckpt).unwrap();

        let hyps = dir.path().join("hyps.tgt");
        let dec = decode_stage(
            &task,
            &kd_ckpt,
            &DecodeStageConfig {
                beam_size: 2,
                max_len: 10,
                ..Default::default()
            },
            None,
            &hyps,
        )
        .unwrap();
        assert!(dec.tokens > 0);

        let report = evaluate_stage(&task, Split::Test, &hyps, Some(&kd_ckpt)).unwrap();
        assert!(report.overcorrection.is_some());
        assert!(dir.path().join("eval.report.txt").exists());
        assert!(dir.path().join("eval.report.json").exists());
    }

    #[test]
    fn knn_kd_without_neighbors_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let task = gen_synth_stage(&small_spec(), &data).unwrap();
        let cfg = TrainStageConfig {
            mode: TrainMode::KnnKd,
            ..fast_train()
        };
        let err = train_stage(&task, &cfg, None, None, &dir.path().join("x.ckpt"))
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn knn_mt_without_datastore_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let task = gen_synth_stage(&small_spec(), &data).unwrap();
        let ckpt = dir.path().join("ce.ckpt");
        train_stage(&task, &fast_train(), None, None, &ckpt).unwrap();
        let cfg = DecodeStageConfig {
            mode: DecodeMode::KnnMt,
            ..Default::default()
        };
        let err = decode_stage(&task, &ckpt, &cfg, None, &dir.path().join("h.tgt"))
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_upstream_artifact_is_artifact_error() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let task = gen_synth_stage(&small_spec(), &data).unwrap();
        let err = build_datastore_stage(
            &task,
            &dir.path().join("nope.ckpt"),
            &dir.path().join("x.ds"),
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn stage_outputs_reproduce_identical_checksums() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut hashes = Vec::new();
        for dir in [&dir_a, &dir_b] {
            let data = dir.path().join("data");
            let task = gen_synth_stage(&small_spec(), &data).unwrap();
            let ckpt = dir.path().join("ce.ckpt");
            train_stage(&task, &fast_train(), None, None, &ckpt).unwrap();
            let ds = dir.path().join("t.ds");
            build_datastore_stage(&task, &ckpt, &ds).unwrap();
            hashes.push((
                file_sha256(&data.join("train.tgt")).unwrap(),
                file_sha256(&ckpt).unwrap(),
                file_sha256(&ds).unwrap(),
            ));
        }
        assert_eq!(hashes[0], hashes[1]);
    }

    #[test]
    fn alpha_zero_knn_kd_equals_ce_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let task = gen_synth_stage(&small_spec(), &data).unwrap();

        let ce_ckpt = dir.path().join("ce.ckpt");
        train_stage(&task, &fast_train(), None, None, &ce_ckpt).unwrap();
        let ds_path = dir.path().join("t.ds");
        build_datastore_stage(&task, &ce_ckpt, &ds_path).unwrap();
        let nb_path = dir.path().join("t.knn");
        knn_search_stage(
            &task,
            &ce_ckpt,
            &ds_path,
            &SearchConfig {
                k: 4,
                ..Default::default()
            },
            &nb_path,
        )
        .unwrap();

        let kd_ckpt = dir.path().join("kd0.ckpt");
        let cfg = TrainStageConfig {
            mode: TrainMode::KnnKd,
            alpha: 0.0,
            k: 4,
            ..fast_train()
        };
        train_stage(&task, &cfg, Some(&nb_path), None, &kd_ckpt).unwrap();
        // Bitwise-identical parameter payloads (headers too: same config).
        assert_eq!(
            std::fs::read(&ce_ckpt).unwrap(),
            std::fs::read(&kd_ckpt).unwrap()
        );
    }

    #[test]
    fn sweep_emits_one_row_per_grid_point() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let task = gen_synth_stage(&small_spec(), &data).unwrap();
        let ckpt = dir.path().join("ce.ckpt");
        train_stage(&task, &fast_train(), None, None, &ckpt).unwrap();
        let ds = dir.path().join("t.ds");
        build_datastore_stage(&task, &ckpt, &ds).unwrap();
        let nb = dir.path().join("t.knn");
        knn_search_stage(
            &task,
            &ckpt,
            &ds,
            &SearchConfig {
                k: 8,
                ..Default::default()
            },
            &nb,
        )
        .unwrap();

        let out = dir.path().join("sweep.tsv");
        let rows = sweep_stage(
            &task,
            &TrainStageConfig {
                epochs: 1,
                embed_dim: 8,
                hidden_dim: 8,
                mode: TrainMode::KnnKd,
                ..TrainStageConfig::default()
            },
            &nb,
            &[1, 2, 4],
            &[1.0, 100.0],
            1,
            10,
            &out,
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        let text = std::fs::read_to_string(&out).unwrap();
        let body: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(body.len(), 6);
        let unique: std::collections::BTreeSet<&str> = body.iter().copied().collect();
        assert_eq!(unique.len(), 6);
    }
}
