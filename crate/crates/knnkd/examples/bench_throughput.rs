//! Throughput: decoding tokens/s with and without per-step retrieval, and
//! training updates/s with and without the distillation term.
//!
//! ```sh
//! cargo run --release --example bench_throughput
//! ```

use knnkd::corpus::{Split, SynthTaskSpec};
use knnkd::datastore::Datastore;
use knnkd::evalbench::{bench_decode, bench_train, SessionFingerprint};
use knnkd::knn::{IndexKind, Metric, NeighborFile, SearchConfig};
use knnkd::knnmt::{knnmt_decode, InterpConfig, Retriever};
use knnkd::model::{train_epochs, AdamState, ModelConfig, ModelState};
use knnkd::pipeline::{
    build_datastore_stage, gen_synth_stage, knn_search_stage, teachers_from_neighbors,
    train_stage, TrainStageConfig,
};

fn main() -> knnkd::Result<()> {
    let dir = std::env::temp_dir().join("knnkd-example-bench");
    std::fs::create_dir_all(&dir)?;
    // A deliberately larger task so the datastore scan has something to do.
    let task = gen_synth_stage(
        &SynthTaskSpec {
            num_sources: 600,
            seed: 2,
            ..SynthTaskSpec::default()
        },
        &dir.join("data"),
    )?;

    let cfg = TrainStageConfig {
        epochs: 6,
        ..TrainStageConfig::default()
    };
    let ckpt = dir.join("ce.ckpt");
    train_stage(&task, &cfg, None, None, &ckpt)?;
    let ds_path = dir.join("train.ds");
    build_datastore_stage(&task, &ckpt, &ds_path)?;
    knn_search_stage(
        &task,
        &ckpt,
        &ds_path,
        &SearchConfig {
            k: 12,
            metric: Metric::SquaredL2,
            index: IndexKind::Exact,
        },
        &dir.join("train.knn"),
    )?;

    let model = ModelState::load(&ckpt)?;
    let ds = Datastore::load(&ds_path)?;
    let session = SessionFingerprint::current(rayon::current_num_threads());
    let sources: Vec<Vec<u32>> = task
        .source_lines(Split::Test)?
        .iter()
        .take(10)
        .map(|l| task.src_vocab.encode(l))
        .collect();

    let base = bench_decode(
        "base",
        || {
            let mut toks = 0;
            for src in &sources {
                toks += model.decode(src, 5, 16)?.tokens.len() + 1;
            }
            Ok(toks)
        },
        5,
        session.clone(),
    )?;
    let icfg = InterpConfig {
        lambda: 0.5,
        k: 12,
        tau: 10.0,
    };
    let mixed = bench_decode(
        "knn-mt",
        || {
            let mut toks = 0;
            for src in &sources {
                let out = knnmt_decode(
                    &model,
                    Retriever::Exact(&ds),
                    src,
                    5,
                    &icfg,
                    Metric::SquaredL2,
                    16,
                )?;
                toks += out.output.tokens.len() + 1;
            }
            Ok(toks)
        },
        5,
        session.clone(),
    )?;
    println!(
        "decode: base {:>9.1} tokens/s | retrieval-interpolated {:>9.1} tokens/s ({:.2}x) over {} entries",
        base.tokens_per_second.unwrap(),
        mixed.tokens_per_second.unwrap(),
        mixed.ratio_vs(&base)?,
        ds.count()
    );

    // Training updates: the distillation term only touches the small
    // retrieved support per position, so updates/s stay near parity.
    let corpus = task.corpus(Split::Train)?;
    let nf = NeighborFile::load(&dir.join("train.knn"))?;
    let teachers = teachers_from_neighbors(&nf, &corpus, 12, 10.0)?;
    let run = |with_teachers: bool| -> knnkd::Result<usize> {
        let mut m = ModelState::init(ModelConfig {
            embed_dim: 32,
            hidden_dim: 32,
            src_vocab_size: corpus.src_vocab_size,
            tgt_vocab_size: corpus.tgt_vocab_size,
            seed: 4,
        });
        let mut opt = AdamState::new(m.params.len(), Default::default());
        let losses = train_epochs(
            &mut m,
            &corpus.pairs[..200],
            if with_teachers {
                Some(&teachers[..200])
            } else {
                None
            },
            if with_teachers { 0.5 } else { 0.0 },
            2,
            8,
            &mut opt,
        )?;
        Ok(losses.len())
    };
    let ce = bench_train("ce", || run(false), 5, session.clone())?;
    let kd = bench_train("kd", || run(true), 5, session)?;
    println!(
        "train:  plain {:>9.2} upd/s  | distilled {:>9.2} upd/s ({:.2}x)",
        ce.updates_per_second.unwrap(),
        kd.updates_per_second.unwrap(),
        kd.ratio_vs(&ce)?,
    );
    Ok(())
}
