//! Retrieve-and-interpolate decoding: per-step datastore search mixed into
//! the model's distribution, with the search counter that explains its cost.
//!
//! ```sh
//! cargo run --release --example knnmt_decode
//! ```

use knnkd::corpus::{Split, SynthTaskSpec};
use knnkd::knn::{IndexKind, Metric, SearchConfig};
use knnkd::knnmt::{knnmt_decode, InterpConfig, Retriever};
use knnkd::model::ModelState;
use knnkd::datastore::Datastore;
use knnkd::pipeline::{
    build_datastore_stage, gen_synth_stage, knn_search_stage, train_stage, TrainStageConfig,
};

fn main() -> knnkd::Result<()> {
    let dir = std::env::temp_dir().join("knnkd-example-knnmt");
    std::fs::create_dir_all(&dir)?;
    let task = gen_synth_stage(
        &SynthTaskSpec {
            num_sources: 16,
            seed: 3,
            ..SynthTaskSpec::default()
        },
        &dir.join("data"),
    )?;

    let cfg = TrainStageConfig {
        epochs: 300,
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
            k: 8,
            metric: Metric::SquaredL2,
            index: IndexKind::Exact,
        },
        &dir.join("train.knn"),
    )?;

    let model = ModelState::load(&ckpt)?;
    let ds = Datastore::load(&ds_path)?;
    let test = task.corpus(Split::Test)?;
    let src = &test.pairs[0].0;
    println!(
        "datastore: {} entries; decoding one test sentence, beam 5\n",
        ds.count()
    );

    for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let cfg = InterpConfig {
            lambda,
            k: 8,
            tau: 10.0,
        };
        let out = knnmt_decode(
            &model,
            Retriever::Exact(&ds),
            src,
            5,
            &cfg,
            Metric::SquaredL2,
            24,
        )?;
        println!(
            "lambda {lambda:>4}: {:>3} searches, score {:+.3}: {}",
            out.searches,
            out.output.score,
            task.tgt_vocab.decode(&out.output.tokens)
        );
    }
    println!(
        "\nlambda 0 skips retrieval entirely (0 searches) and reduces to the base decoder;"
    );
    println!("every other setting pays one datastore search per live beam per step.");
    Ok(())
}
