//! Exact and inverted-file nearest-neighbor search over the datastore.
//!
//! ```sh
//! cargo run --example knn_search
//! ```

use knnkd::corpus::{gen_synth, Split, SynthTaskSpec};
use knnkd::datastore::{context_keys, Datastore};
use knnkd::knn::{
    batch_search_training_set, recall_at_k, search, IndexKind, IvfIndex, Metric, SearchConfig,
};
use knnkd::model::{ModelConfig, ModelState};

fn main() -> knnkd::Result<()> {
    let task = gen_synth(&SynthTaskSpec {
        num_sources: 16,
        seed: 7,
        ..SynthTaskSpec::default()
    })?;
    let train = task.encode_split(Split::Train)?;
    let model = ModelState::init(ModelConfig {
        embed_dim: 16,
        hidden_dim: 16,
        src_vocab_size: train.src_vocab_size,
        tgt_vocab_size: train.tgt_vocab_size,
        seed: 3,
    });
    let ds = Datastore::build(&model, &train, 42)?;
    println!("datastore: {} entries of dim {}", ds.count(), ds.dim());

    // Querying with a stored key returns the entry itself at distance zero.
    let (src, tgt) = &train.pairs[0];
    let keys = context_keys(&model, src, tgt)?;
    let cfg = SearchConfig {
        k: 5,
        metric: Metric::SquaredL2,
        index: IndexKind::Exact,
    };
    let ns = search(&ds, &keys[2], &cfg)?;
    println!("\nnearest 5 to the key of (sentence 0, position 2):");
    for n in &ns.entries {
        println!(
            "  entry {} distance {:.4} value {:?}",
            n.index,
            n.distance,
            task.tgt_vocab.token(n.value)
        );
    }

    // The offline batch search: every training context gets its neighbor
    // set, and self-retrieval guarantees a zero-distance own-token match.
    let sets = batch_search_training_set(&ds, &model, &train, &cfg, 42)?;
    let self_hits = sets
        .iter()
        .zip(train.pairs.iter().flat_map(|(_, t)| t.iter()))
        .filter(|(set, &&y)| set.entries.iter().any(|n| n.distance == 0.0 && n.value == y))
        .count();
    println!(
        "\nbatch search: {} records; self-retrieval holds at {}/{} positions",
        sets.len(),
        self_hits,
        sets.len()
    );

    // Inverted-file approximation: recall against exact results rises with
    // the number of probed clusters, reaching 1 when all are probed.
    let index = IvfIndex::build(&ds, 8, 1)?;
    let queries: Vec<Vec<f32>> = (0..40)
        .map(|i| ds.key(i * ds.count() / 40).to_vec())
        .collect();
    let exact: Vec<_> = queries
        .iter()
        .map(|q| search(&ds, q, &SearchConfig { k: 8, ..cfg }))
        .collect::<knnkd::Result<_>>()?;
    println!("\ninverted-file recall@8 vs probes (8 clusters):");
    for probes in [1, 2, 4, 8] {
        let approx: Vec<_> = queries
            .iter()
            .map(|q| index.search(&ds, q, 8, Metric::SquaredL2, probes))
            .collect::<knnkd::Result<_>>()?;
        println!("  probes {probes}: recall {:.3}", recall_at_k(&approx, &exact)?);
    }
    Ok(())
}
