//! Grid sweep over the teacher hyperparameters (k, tau): one distilled
//! training run per point, scored on the validation split.
//!
//! ```sh
//! cargo run --release --example sweep_grid
//! ```

use knnkd::corpus::SynthTaskSpec;
use knnkd::knn::{IndexKind, Metric, SearchConfig};
use knnkd::pipeline::{
    build_datastore_stage, gen_synth_stage, knn_search_stage, sweep_stage, train_stage,
    TrainMode, TrainStageConfig,
};

fn main() -> knnkd::Result<()> {
    let dir = std::env::temp_dir().join("knnkd-example-sweep");
    std::fs::create_dir_all(&dir)?;
    let task = gen_synth_stage(
        &SynthTaskSpec {
            num_sources: 24,
            seed: 1,
            ..SynthTaskSpec::default()
        },
        &dir.join("data"),
    )?;

    let warm = TrainStageConfig {
        embed_dim: 12,
        hidden_dim: 12,
        epochs: 400,
        ..TrainStageConfig::default()
    };
    let warm_ckpt = dir.join("warm.ckpt");
    train_stage(&task, &warm, None, None, &warm_ckpt)?;
    let ds = dir.join("train.ds");
    build_datastore_stage(&task, &warm_ckpt, &ds)?;
    let nb = dir.join("train.knn");
    // Search once with the largest k in the grid; smaller-k teachers reuse a
    // prefix of each record.
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

    let train = TrainStageConfig {
        mode: TrainMode::KnnKd,
        epochs: 300,
        alpha: 0.5,
        ..TrainStageConfig::default()
    };
    let rows = sweep_stage(
        &task,
        &train,
        &nb,
        &[1, 2, 4, 8, 16],
        &[0.01, 1.0, 100.0],
        5,
        24,
        &dir.join("sweep.tsv"),
    )?;

    println!("k \\ tau   0.01      1      100");
    for k in [1usize, 2, 4, 8, 16] {
        let cells: Vec<String> = rows
            .iter()
            .filter(|r| r.k == k)
            .map(|r| format!("{:6.2}", r.bleu))
            .collect();
        println!("{k:>2}      {}", cells.join("  "));
    }
    println!("\nvalidation BLEU per grid point; table at {}", dir.join("sweep.tsv").display());
    Ok(())
}
