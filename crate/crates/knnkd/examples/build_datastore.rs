//! Build the key-value datastore over the training set, persist it, and
//! memory-map it back.
//!
//! ```sh
//! cargo run --example build_datastore
//! ```

use knnkd::corpus::{gen_synth, Split, SynthTaskSpec};
use knnkd::datastore::{context_keys, Datastore};
use knnkd::model::{ModelConfig, ModelState};

fn main() -> knnkd::Result<()> {
    let task = gen_synth(&SynthTaskSpec {
        num_sources: 12,
        seed: 7,
        ..SynthTaskSpec::default()
    })?;
    let train = task.encode_split(Split::Train)?;

    // Any checkpoint works for extraction; training sharpens the keys but
    // the store's structure is the same.
    let model = ModelState::init(ModelConfig {
        embed_dim: 16,
        hidden_dim: 16,
        src_vocab_size: train.src_vocab_size,
        tgt_vocab_size: train.tgt_vocab_size,
        seed: 3,
    });

    let ds = Datastore::build(&model, &train, 0xfeed)?;
    println!(
        "built datastore: {} entries of dim {} ({} target tokens in corpus)",
        ds.count(),
        ds.dim(),
        train.total_target_tokens()
    );

    let path = std::env::temp_dir().join("knnkd-example.ds");
    ds.save(&path)?;
    let mapped = Datastore::load(&path)?;
    println!(
        "persisted {} bytes, reloaded via mmap: {} entries, fingerprint {:016x}",
        std::fs::metadata(&path)?.len(),
        mapped.count(),
        mapped.fingerprint()
    );

    // Every entry is exactly the model's hidden state at its provenance.
    let idx = mapped.count() / 2;
    let (sent, pos) = mapped.provenance(idx);
    let (src, tgt) = &train.pairs[sent as usize];
    let keys = context_keys(&model, src, tgt)?;
    assert_eq!(mapped.key(idx), keys[pos as usize].as_slice());
    println!(
        "entry {idx} reproduces the forward pass at sentence {sent}, position {pos}; value = {:?}",
        task.tgt_vocab.token(mapped.value(idx))
    );
    Ok(())
}
