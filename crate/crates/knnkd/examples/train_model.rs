//! Train the toy encoder-decoder with plain cross-entropy and decode.
//!
//! ```sh
//! cargo run --example train_model
//! ```

use knnkd::corpus::{gen_synth, Split, SynthTaskSpec};
use knnkd::model::{train_epochs, AdamState, ModelConfig, ModelState, OptimConfig};

fn main() -> knnkd::Result<()> {
    let task = gen_synth(&SynthTaskSpec {
        num_sources: 12,
        seed: 7,
        ..SynthTaskSpec::default()
    })?;
    let train = task.encode_split(Split::Train)?;

    let mut model = ModelState::init(ModelConfig {
        embed_dim: 24,
        hidden_dim: 24,
        src_vocab_size: train.src_vocab_size,
        tgt_vocab_size: train.tgt_vocab_size,
        seed: 11,
    });
    let mut opt = AdamState::new(
        model.params.len(),
        OptimConfig {
            base_lr: 5e-3,
            warmup_steps: 200,
            ..OptimConfig::default()
        },
    );

    let losses = train_epochs(&mut model, &train.pairs, None, 0.0, 300, 8, &mut opt)?;
    println!("steps: {}", losses.len());
    for (i, chunk) in losses.chunks(losses.len() / 6).enumerate() {
        let mean: f64 = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("  loss over chunk {i}: {mean:.4}");
    }

    // Greedy and beam decoding of a couple of test sources.
    let test = task.split(Split::Test);
    for (src_line, ref_line) in test.iter().take(3) {
        let src = task.src_vocab.encode(src_line);
        let greedy = model.decode(&src, 1, 24)?;
        let beam = model.decode(&src, 5, 24)?;
        println!("\nsource: {src_line}");
        println!("  reference: {ref_line}");
        println!(
            "  greedy ({:.3}): {}",
            greedy.score,
            task.tgt_vocab.decode(&greedy.tokens)
        );
        println!(
            "  beam 5 ({:.3}): {}",
            beam.score,
            task.tgt_vocab.decode(&beam.tokens)
        );
    }
    Ok(())
}
