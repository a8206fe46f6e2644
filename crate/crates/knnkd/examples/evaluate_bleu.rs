//! Corpus BLEU and the overcorrection probe.
//!
//! ```sh
//! cargo run --example evaluate_bleu
//! ```

use knnkd::corpus::{gen_synth, OracleRecord, Split, SynthTaskSpec};
use knnkd::evalbench::{bleu, overcorrection_probe};
use knnkd::model::{ModelConfig, ModelState};

fn toks(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn main() -> knnkd::Result<()> {
    // Corpus BLEU: clipped n-gram precisions, geometric mean, brevity
    // penalty, no smoothing.
    let hyps = vec![toks("a b c d"), toks("the cat sat")];
    let refs = vec![toks("a b c d e"), toks("the cat sat")];
    let r = bleu(&hyps, &refs, 4)?;
    println!("BLEU {:.2}", r.bleu);
    println!(
        "  precisions {:?}, brevity penalty {:.4} (hyp {} vs ref {} tokens)",
        r.precisions
            .iter()
            .map(|p| format!("{p:.3}"))
            .collect::<Vec<_>>(),
        r.brevity_penalty,
        r.hyp_len,
        r.ref_len
    );

    let perfect = bleu(&refs, &refs, 4)?;
    println!("identical corpora score {:.1}", perfect.bleu);

    // The probe: average probability mass a model keeps on tokens that are
    // valid continuations of a held-out context but are not the reference.
    // A uniform model spreads 1/|V| everywhere, so two non-reference valid
    // tokens get 2/|V|.
    let task = gen_synth(&SynthTaskSpec {
        num_sources: 8,
        seed: 3,
        ..SynthTaskSpec::default()
    })?;
    let test = task.encode_split(Split::Test)?;
    let uniform = ModelState::zeros(ModelConfig {
        embed_dim: 8,
        hidden_dim: 8,
        src_vocab_size: test.src_vocab_size,
        tgt_vocab_size: test.tgt_vocab_size,
        seed: 0,
    });
    let reference_token = test.pairs[0].1[0];
    let oracle = vec![OracleRecord {
        sentence_idx: 0,
        position: 0,
        tokens: vec![reference_token, 10, 11],
    }];
    let probe = overcorrection_probe(&uniform, &test, &oracle)?;
    println!(
        "\nuniform model, oracle with 2 non-reference tokens, |V| = {}: mass {:.4} (= 2/|V|)",
        test.tgt_vocab_size, probe.mean_mass
    );

    // On the real sidecar the probe averages over every held-out context.
    let full = overcorrection_probe(&uniform, &test, &task.oracle)?;
    println!(
        "full sidecar: {:.4} mean mass over {} contexts ({} contested)",
        full.mean_mass, full.contexts, full.contested_contexts
    );
    Ok(())
}
