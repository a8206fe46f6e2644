//! Generate the synthetic many-valid-targets task and inspect it.
//!
//! ```sh
//! cargo run --example gen_synth
//! ```

use knnkd::corpus::{gen_synth, SynthTaskSpec};

fn main() -> knnkd::Result<()> {
    let spec = SynthTaskSpec {
        num_sources: 12,
        valid_targets_per_source: 8,
        source_len: 6,
        target_len: 14,
        seed: 7,
        ..SynthTaskSpec::default()
    };
    let task = gen_synth(&spec)?;

    println!(
        "splits: train {} / valid {} / test {} pairs",
        task.train.len(),
        task.valid.len(),
        task.test.len()
    );
    println!(
        "vocabularies: {} source tokens, {} target tokens (ids 0..3 reserved)",
        task.src_vocab.size(),
        task.tgt_vocab.size()
    );

    println!("\nfirst train pairs (one source, several valid targets):");
    let probe_src = &task.train[0].0;
    for (s, t) in task.train.iter().filter(|(s, _)| s == probe_src).take(3) {
        println!("  {s}  =>  {t}");
    }

    // The oracle sidecar lists, per held-out context, every token that
    // validly continues it. Contexts with more than one entry are where a
    // single-reference loss punishes legitimate alternatives.
    let contested: Vec<_> = task.oracle.iter().filter(|r| r.tokens.len() > 1).collect();
    println!(
        "\noracle records: {} total, {} contested",
        task.oracle.len(),
        contested.len()
    );
    for rec in contested.iter().take(4) {
        let tokens: Vec<&str> = rec
            .tokens
            .iter()
            .map(|&t| task.tgt_vocab.token(t).unwrap())
            .collect();
        println!(
            "  test sentence {} position {}: valid next tokens {{{}}}",
            rec.sentence_idx,
            rec.position,
            tokens.join(", ")
        );
    }

    let dir = std::env::temp_dir().join("knnkd-example-gen");
    task.write_to_dir(&dir)?;
    println!("\ntask files written to {}", dir.display());
    Ok(())
}
