//! Every stage chained end to end, the way the `knnkd` binary runs them:
//! generate, warm-train, datastore, batch search, train both objectives,
//! decode, evaluate. Prints the per-stage artifacts and the final reports.
//!
//! ```sh
//! cargo run --release --example full_pipeline
//! ```

use knnkd::corpus::{Split, SynthTaskSpec};
use knnkd::knn::{IndexKind, Metric, SearchConfig};
use knnkd::pipeline::{
    build_datastore_stage, decode_stage, evaluate_stage, gen_synth_stage, knn_search_stage,
    train_stage, DecodeMode, DecodeStageConfig, TrainMode, TrainStageConfig,
};
use std::time::Instant;

fn main() -> knnkd::Result<()> {
    let t0 = Instant::now();
    let dir = std::env::temp_dir().join("knnkd-example-pipeline");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir)?;

    let step = |name: &str| println!("[{:>6.1}s] {name}", t0.elapsed().as_secs_f64());

    step("gen-synth");
    let task = gen_synth_stage(
        &SynthTaskSpec {
            num_sources: 24,
            seed: 1,
            ..SynthTaskSpec::default()
        },
        &dir.join("data"),
    )?;

    step("train warm retrieval model");
    let warm_ckpt = dir.join("warm.ckpt");
    train_stage(
        &task,
        &TrainStageConfig {
            embed_dim: 12,
            hidden_dim: 12,
            epochs: 400,
            ..TrainStageConfig::default()
        },
        None,
        None,
        &warm_ckpt,
    )?;

    step("build-datastore");
    let ds = dir.join("train.ds");
    let store = build_datastore_stage(&task, &warm_ckpt, &ds)?;
    println!("         {} entries of dim {}", store.count(), store.dim());

    step("knn-search");
    let nb = dir.join("train.knn");
    knn_search_stage(
        &task,
        &warm_ckpt,
        &ds,
        &SearchConfig {
            k: 16,
            metric: Metric::SquaredL2,
            index: IndexKind::Exact,
        },
        &nb,
    )?;

    let full = TrainStageConfig {
        epochs: 800,
        alpha: 0.5,
        tau: 1.0,
        k: 12,
        ..TrainStageConfig::default()
    };
    step("train cross-entropy model");
    let ce = dir.join("ce.ckpt");
    train_stage(&task, &full, None, None, &ce)?;
    step("train distilled model");
    let kd = dir.join("knnkd.ckpt");
    train_stage(
        &task,
        &TrainStageConfig {
            mode: TrainMode::KnnKd,
            ..full
        },
        Some(&nb),
        None,
        &kd,
    )?;

    step("decode + evaluate both models on the test split");
    for (name, ckpt) in [("ce", &ce), ("knnkd", &kd)] {
        let hyps = dir.join(format!("hyps-{name}.tgt"));
        decode_stage(
            &task,
            ckpt,
            &DecodeStageConfig {
                mode: DecodeMode::Base,
                beam_size: 5,
                ..DecodeStageConfig::default()
            },
            None,
            &hyps,
        )?;
        let report = evaluate_stage(&task, Split::Test, &hyps, Some(ckpt))?;
        let oc = report.overcorrection.as_ref().unwrap();
        println!(
            "         {name:>6}: BLEU {:.2}, mass on valid alternatives {:.4}",
            report.bleu.bleu, oc.mean_mass
        );
    }

    step("done");
    println!("\nartifacts and run manifests under {}", dir.display());
    for entry in std::fs::read_dir(&dir)? {
        let entry = entry?;
        if entry.path().is_file() {
            println!("  {}", entry.file_name().to_string_lossy());
        }
    }
    Ok(())
}
