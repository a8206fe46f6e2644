//! Text ingestion, vocabularies, and the synthetic many-valid-targets task.
//!
//! Tokenization is whitespace-only. Out-of-vocabulary tokens always encode to
//! `UNK`; encoding never fails. The synthetic generator produces a translation
//! task in which every source sentence admits several valid targets, together
//! with an oracle sidecar listing, for each held-out context, the full set of
//! next tokens that are valid for it.

use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIALS: usize = 4;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bidirectional token/id map with the four reserved specials at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_ordered_tokens(corpus_tokens: Vec<String>) -> Self {
        let mut tokens = Vec::with_capacity(NUM_SPECIALS + corpus_tokens.len());
        tokens.extend(SPECIAL_TOKENS.iter().map(|s| s.to_string()));
        tokens.extend(corpus_tokens);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Build a vocabulary from whitespace-tokenized lines. Tokens occurring
    /// fewer than `min_count` times are dropped (they will encode to `UNK`).
    /// Ordering is frequency descending, ties broken lexicographically, which
    /// makes the result deterministic for a given input.
    pub fn build<'a, I>(lines: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if min_count < 1 {
            return Err(Error::InvalidArgument("min_count must be >= 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut saw_line = false;
        for line in lines {
            saw_line = true;
            for tok in line.split_whitespace() {
                if SPECIAL_TOKENS.contains(&tok) {
                    continue;
                }
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !saw_line || counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_ordered_tokens(
            kept.into_iter().map(|(t, _)| t.to_string()).collect(),
        ))
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Whitespace-split and map to ids; OOV maps to `UNK`. No BOS/EOS added.
    pub fn encode(&self, line: &str) -> Vec<u32> {
        line.split_whitespace()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Inverse of [`Vocabulary::encode`] for in-vocabulary ids.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.token(id).unwrap_or(SPECIAL_TOKENS[UNK as usize]));
        }
        out
    }

    /// Write the vocabulary file: one non-special token per line, in id order,
    /// so the token on 0-based line `n` has id `n + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for tok in &self.tokens[NUM_SPECIALS..] {
            writeln!(body, "{tok}").unwrap();
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        let tokens: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        Ok(Self::from_ordered_tokens(tokens))
    }
}

/// Aligned (source, target) id sequences. Targets are EOS-terminated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
}

impl ParallelCorpus {
    /// Encode aligned text lines. Appends EOS to every target sequence and
    /// validates the corpus invariants.
    pub fn from_lines(
        src_lines: &[String],
        tgt_lines: &[String],
        src_vocab: &Vocabulary,
        tgt_vocab: &Vocabulary,
    ) -> Result<Self> {
        if src_lines.len() != tgt_lines.len() {
            return Err(Error::InvalidArgument(format!(
                "source/target line counts differ: {} vs {}",
                src_lines.len(),
                tgt_lines.len()
            )));
        }
        let mut pairs = Vec::with_capacity(src_lines.len());
        for (i, (s, t)) in src_lines.iter().zip(tgt_lines).enumerate() {
            let src = src_vocab.encode(s);
            let mut tgt = tgt_vocab.encode(t);
            if src.is_empty() || tgt.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "empty sentence at line {i}"
                )));
            }
            tgt.push(EOS);
            pairs.push((src, tgt));
        }
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(ParallelCorpus {
            pairs,
            src_vocab_size: src_vocab.size(),
            tgt_vocab_size: tgt_vocab.size(),
        })
    }

    /// Read `.src`/`.tgt` aligned files and encode them.
    pub fn from_files(
        src_path: &Path,
        tgt_path: &Path,
        src_vocab: &Vocabulary,
        tgt_vocab: &Vocabulary,
    ) -> Result<Self> {
        let read = |p: &Path| -> Result<Vec<String>> {
            let text = std::fs::read_to_string(p)
                .map_err(|_| Error::MissingArtifact(p.to_path_buf()))?;
            Ok(text.lines().map(str::to_string).collect())
        };
        Self::from_lines(&read(src_path)?, &read(tgt_path)?, src_vocab, tgt_vocab)
    }

    /// Total number of target tokens (including the EOS terminators); this is
    /// the datastore entry count for this corpus.
    pub fn total_target_tokens(&self) -> usize {
        self.pairs.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Oracle sidecar record: at `position` of test sentence `sentence_idx`, the
/// set of target-vocabulary ids that validly continue the context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleRecord {
    pub sentence_idx: usize,
    pub position: usize,
    pub tokens: Vec<u32>,
}

/// Parameters of the synthetic many-valid-targets task.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthTaskSpec {
    pub num_sources: usize,
    /// Distinct reference targets per source across the whole corpus; >= 2.
    pub valid_targets_per_source: usize,
    pub source_len: usize,
    pub target_len: usize,
    pub seed: u64,
    pub train_frac: f64,
    pub valid_frac: f64,
    pub test_frac: f64,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        SynthTaskSpec {
            num_sources: 24,
            valid_targets_per_source: 8,
            source_len: 6,
            target_len: 10,
            seed: 1,
            train_frac: 0.7,
            valid_frac: 0.15,
            test_frac: 0.15,
        }
    }
}

impl SynthTaskSpec {
    fn validate(&self) -> Result<()> {
        if self.num_sources == 0 || self.source_len == 0 || self.target_len == 0 {
            return Err(Error::InvalidArgument(
                "num_sources, source_len and target_len must be positive".into(),
            ));
        }
        if self.valid_targets_per_source < 2 {
            return Err(Error::InvalidArgument(
                "valid_targets_per_source must be >= 2".into(),
            ));
        }
        let sum = self.train_frac + self.valid_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 || self.train_frac < 0.0 || self.valid_frac < 0.0 || self.test_frac < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be nonnegative and sum to 1 (got {sum})"
            )));
        }
        Ok(())
    }
}

/// A generated synthetic task: raw text per split, shared vocabularies, and
/// the oracle sidecar for the test split.
#[derive(Debug, Clone)]
pub struct SynthTask {
    pub spec: SynthTaskSpec,
    pub train: Vec<(String, String)>,
    pub valid: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub oracle: Vec<OracleRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split '{other}'"))),
        }
    }
}

impl SynthTask {
    pub fn split(&self, split: Split) -> &[(String, String)] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn encode_split(&self, split: Split) -> Result<ParallelCorpus> {
        let pairs = self.split(split);
        let src: Vec<String> = pairs.iter().map(|(s, _)| s.clone()).collect();
        let tgt: Vec<String> = pairs.iter().map(|(_, t)| t.clone()).collect();
        ParallelCorpus::from_lines(&src, &tgt, &self.src_vocab, &self.tgt_vocab)
    }

    /// Write the task to a directory: `{train,valid,test}.{src,tgt}`,
    /// `vocab.{src,tgt}.txt`, and `oracle.tsv`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (split, pairs) in [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
        ] {
            let mut src = String::new();
            let mut tgt = String::new();
            for (s, t) in pairs {
                writeln!(src, "{s}").unwrap();
                writeln!(tgt, "{t}").unwrap();
            }
            std::fs::write(dir.join(format!("{split}.src")), src)?;
            std::fs::write(dir.join(format!("{split}.tgt")), tgt)?;
        }
        self.src_vocab.save(&dir.join("vocab.src.txt"))?;
        self.tgt_vocab.save(&dir.join("vocab.tgt.txt"))?;
        std::fs::write(dir.join("oracle.tsv"), render_oracle(&self.oracle))?;
        Ok(())
    }
}

/// Serialize oracle records as `sentence_idx<TAB>position<TAB>id,id,...` lines.
pub fn render_oracle(records: &[OracleRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let ids: Vec<String> = r.tokens.iter().map(u32::to_string).collect();
        writeln!(out, "{}\t{}\t{}", r.sentence_idx, r.position, ids.join(",")).unwrap();
    }
    out
}

pub fn parse_oracle(text: &str) -> Result<Vec<OracleRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let bad = || Error::InvalidArgument(format!("malformed oracle record at line {lineno}"));
        let sentence_idx: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let position: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let tokens: Vec<u32> = parts
            .next()
            .ok_or_else(bad)?
            .split(',')
            .map(|t| t.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        records.push(OracleRecord {
            sentence_idx,
            position,
            tokens,
        });
    }
    Ok(records)
}

pub fn load_oracle(path: &Path) -> Result<Vec<OracleRecord>> {
    let text =
        std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    parse_oracle(&text)
}

/// Generate the synthetic task. Pure function of the spec.
///
/// Sources come in families of `g = max(2, valid_targets_per_source - 2)`
/// members that differ only in a member-marker token at the end of the
/// source sentence:
///
/// ```text
/// source:  f<fam> s<fam>_0 s<fam>_1 ... m<fam>_<j>
/// target:  w<fam>_0 c<fam>_0_x w<fam>_2 c<fam>_1_x ... d<fam>_t
/// ```
///
/// Target bodies share fillers (`w`) and per-slot choice pools (`c..._0` the
/// base token, `c..._1` the bumped token). Member `j`'s canonical body bumps
/// exactly one choice slot (slot `j mod n_slots`); everything else is the
/// family base. Because members differ on the target side at only that one
/// slot, the member marker is the sole feature separating sibling contexts
/// everywhere else, and hidden states for sibling contexts stay close until
/// late in training -- which is what lets nearest-neighbor retrieval surface
/// valid alternative continuations.
///
/// Per source, the `valid_targets_per_source` distinct references are:
/// two canonical-tail variants (both to train, satisfying the more-than-one-
/// valid-target-in-train requirement), one held-out canonical with a fresh
/// tail (to test; probed by the overcorrection report), up to
/// `n_slots - 1` single-bump "feeder" variants (to valid; they put a second
/// valid token into the oracle at each choice slot without ever being
/// trained on), and any remainder as extra tail variants split by the
/// configured fractions. Tails are family-synchronized so retrieval at the
/// tail-divergence position stays within each family's tail vocabulary.
pub fn gen_synth(spec: &SynthTaskSpec) -> Result<SynthTask> {
    spec.validate()?;
    let v = spec.valid_targets_per_source;
    let g = v.saturating_sub(2).max(2);
    let body_len = spec.target_len;
    let div_pos = body_len - 1;
    // Odd body positions before the tail carry choice slots.
    let slots: Vec<usize> = (0..div_pos).filter(|b| b % 2 == 1).collect();
    let n_slots = slots.len().min(g);
    // Variant budget: 2 canonical tails (train) + 1 test tail, then feeders,
    // then extra tails.
    let n_feeder = v.saturating_sub(3).min(n_slots.saturating_sub(1));
    let n_extra = v.saturating_sub(3) - n_feeder;
    let rest_test = ((n_extra as f64) * spec.test_frac).round() as usize;
    let rest_valid = ((n_extra as f64) * spec.valid_frac).round() as usize;

    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();

    for i in 0..spec.num_sources {
        let fam = i / g;
        let member = i % g;
        let own_slot = if n_slots > 0 { member % n_slots } else { 0 };

        let mut src = format!("f{fam}");
        for p in 0..spec.source_len.saturating_sub(2) {
            write!(src, " s{fam}_{p}").unwrap();
        }
        if spec.source_len >= 2 {
            write!(src, " m{fam}_{member}").unwrap();
        } else {
            src = format!("m{fam}_{member}");
        }

        // bumps: choice slots carrying the bumped pool token instead of the
        // family base token.
        let render = |bumps: &[usize], tail: usize| -> String {
            let mut toks = Vec::with_capacity(body_len);
            for b in 0..div_pos {
                if let Some(slot) = slots.iter().position(|&s| s == b) {
                    let x = usize::from(bumps.contains(&slot));
                    toks.push(format!("c{fam}_{slot}_{x}"));
                } else {
                    toks.push(format!("w{fam}_{b}"));
                }
            }
            toks.push(format!("d{fam}_{tail}"));
            toks.join(" ")
        };
        let canonical: Vec<usize> = if n_slots > 0 { vec![own_slot] } else { vec![] };

        // Two canonical-tail variants to train. Members alternate between
        // tail pairs {0, 1} and {1, 2}, so retrieval across siblings leans
        // toward the shared tail 1 while each member's own evidence stays an
        // even split.
        let lo = member % 2;
        train.push((src.clone(), render(&canonical, lo)));
        train.push((src.clone(), render(&canonical, lo + 1)));
        // Held-out canonical with a fresh tail to test.
        if v >= 3 {
            test.push((src.clone(), render(&canonical, if lo == 0 { 2 } else { 0 })));
        }
        // Feeders: bump one additional slot each; never trained. Their tail
        // is the family-shared one.
        for t in 0..n_feeder {
            let slot = (own_slot + 1 + t) % n_slots;
            let mut bumps = canonical.clone();
            bumps.push(slot);
            valid.push((src.clone(), render(&bumps, 1)));
        }
        // Extra tail variants beyond the core structure.
        for e in 0..n_extra {
            let pair = (src.clone(), render(&canonical, 3 + e));
            if e < rest_test {
                test.push(pair);
            } else if e < rest_test + rest_valid {
                valid.push(pair);
            } else {
                train.push(pair);
            }
        }
    }

    // Deterministic shuffle of each split so corpus order (and hence
    // datastore entry order) does not trivially follow source index.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    train.shuffle(&mut rng);
    valid.shuffle(&mut rng);
    test.shuffle(&mut rng);

    let all_pairs: Vec<&(String, String)> =
        train.iter().chain(valid.iter()).chain(test.iter()).collect();
    let src_vocab = Vocabulary::build(all_pairs.iter().map(|(s, _)| s.as_str()), 1)?;
    let tgt_vocab = Vocabulary::build(all_pairs.iter().map(|(_, t)| t.as_str()), 1)?;

    let oracle = build_oracle_by_scan(&all_pairs, &test, &src_vocab, &tgt_vocab);

    Ok(SynthTask {
        spec: spec.clone(),
        train,
        valid,
        test,
        src_vocab,
        tgt_vocab,
        oracle,
    })
}

/// Brute-force oracle: for every test-sentence position, the set of distinct
/// next tokens observed across all corpus references sharing the same
/// (source, target-prefix) context. Targets are treated as EOS-terminated.
fn build_oracle_by_scan(
    all_pairs: &[&(String, String)],
    test: &[(String, String)],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Vec<OracleRecord> {
    let mut by_context: BTreeMap<(Vec<u32>, Vec<u32>), BTreeSet<u32>> = BTreeMap::new();
    for (s, t) in all_pairs {
        let src = src_vocab.encode(s);
        let mut tgt = tgt_vocab.encode(t);
        tgt.push(EOS);
        for pos in 0..tgt.len() {
            by_context
                .entry((src.clone(), tgt[..pos].to_vec()))
                .or_default()
                .insert(tgt[pos]);
        }
    }
    let mut records = Vec::new();
    for (idx, (s, t)) in test.iter().enumerate() {
        let src = src_vocab.encode(s);
        let mut tgt = tgt_vocab.encode(t);
        tgt.push(EOS);
        for pos in 0..tgt.len() {
            let set = &by_context[&(src.clone(), tgt[..pos].to_vec())];
            records.push(OracleRecord {
                sentence_idx: idx,
                position: pos,
                tokens: set.iter().copied().collect(),
            });
        }
    }
    records
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_vocab_ordering_and_ids() {
        let v = Vocabulary::build(["a b", "a"], 1).unwrap();
        // Specials 0..4, then frequency desc / lexicographic: a (2), b (1).
        assert_eq!(v.size(), 6);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(v.token(0), Some("<pad>"));
        assert_eq!(v.token(3), Some("<unk>"));
    }

    #[test]
    fn build_vocab_min_count_threshold() {
        let v = Vocabulary::build(["a b", "a"], 2).unwrap();
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), None);
        assert_eq!(v.encode("a b"), vec![4, UNK]);
    }

    #[test]
    fn build_vocab_rejects_empty() {
        assert!(matches!(
            Vocabulary::build(std::iter::empty(), 1),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(Vocabulary::build(["", "  "], 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn build_vocab_deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let lines: Vec<String> = (0..1000)
            .map(|_| {
                use rand::Rng;
                let n = rng.gen_range(1..8);
                (0..n)
                    .map(|_| format!("t{}", rng.gen_range(0..50)))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let a = Vocabulary::build(lines.iter().map(String::as_str), 1).unwrap();
        let b = Vocabulary::build(lines.iter().map(String::as_str), 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_maps_oov_to_unk() {
        let v = Vocabulary::build(["a b", "a"], 1).unwrap();
        assert_eq!(v.encode("a b"), vec![4, 5]);
        assert_eq!(v.encode("a z"), vec![4, UNK]);
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocabulary::build(["a b", "a c"], 1).unwrap();
        for s in ["a b c", "c b a", "a"] {
            assert_eq!(v.decode(&v.encode(s)), s);
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocabulary::build(["x y z", "x y", "x"], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
        // Line number = id - 4.
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(v.id(first), Some(4));
    }

    #[test]
    fn gen_synth_deterministic() {
        let spec = SynthTaskSpec {
            seed: 1,
            ..Default::default()
        };
        let a = gen_synth(&spec).unwrap();
        let b = gen_synth(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.valid, b.valid);
        assert_eq!(a.test, b.test);
        assert_eq!(a.oracle, b.oracle);
    }

    #[test]
    fn gen_synth_distinct_targets_per_source() {
        for v in [2usize, 3, 5, 8] {
            let spec = SynthTaskSpec {
                num_sources: 8,
                valid_targets_per_source: v,
                ..Default::default()
            };
            let task = gen_synth(&spec).unwrap();
            let mut per_source: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
            for (s, t) in task
                .train
                .iter()
                .chain(task.valid.iter())
                .chain(task.test.iter())
            {
                per_source.entry(s.clone()).or_default().insert(t.clone());
            }
            assert_eq!(per_source.len(), 8);
            for (_, targets) in per_source {
                assert_eq!(targets.len(), v, "v={v}");
            }
        }
    }

    #[test]
    fn gen_synth_train_has_multiple_targets_per_source() {
        let task = gen_synth(&SynthTaskSpec::default()).unwrap();
        let mut per_source: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (s, t) in &task.train {
            per_source.entry(s.clone()).or_default().insert(t.clone());
        }
        assert_eq!(per_source.len(), task.spec.num_sources);
        for (_, targets) in per_source {
            assert!(targets.len() >= 2);
        }
    }

    #[test]
    fn gen_synth_rejects_single_target() {
        let spec = SynthTaskSpec {
            valid_targets_per_source: 1,
            ..Default::default()
        };
        assert!(matches!(gen_synth(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gen_synth_rejects_bad_fractions() {
        let spec = SynthTaskSpec {
            train_frac: 0.5,
            valid_frac: 0.2,
            test_frac: 0.2,
            ..Default::default()
        };
        assert!(matches!(gen_synth(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gen_synth_every_source_has_a_contested_position() {
        let task = gen_synth(&SynthTaskSpec::default()).unwrap();
        // Scan the whole corpus: each source must have >= 2 distinct next
        // tokens at at least one context.
        let all: Vec<&(String, String)> = task
            .train
            .iter()
            .chain(task.valid.iter())
            .chain(task.test.iter())
            .collect();
        let mut by_src: BTreeMap<&str, BTreeMap<Vec<&str>, BTreeSet<&str>>> = BTreeMap::new();
        for (s, t) in &all {
            let toks: Vec<&str> = t.split_whitespace().collect();
            for pos in 0..toks.len() {
                by_src
                    .entry(s.as_str())
                    .or_default()
                    .entry(toks[..pos].to_vec())
                    .or_default()
                    .insert(toks[pos]);
            }
        }
        for (src, contexts) in by_src {
            assert!(
                contexts.values().any(|set| set.len() >= 2),
                "source {src} has no contested position"
            );
        }
    }

    #[test]
    fn oracle_matches_independent_scan() {
        let task = gen_synth(&SynthTaskSpec {
            num_sources: 8,
            valid_targets_per_source: 6,
            ..Default::default()
        })
        .unwrap();
        // Re-derive the oracle with a separately-written scan over raw text.
        let all: Vec<(Vec<u32>, Vec<u32>)> = task
            .train
            .iter()
            .chain(task.valid.iter())
            .chain(task.test.iter())
            .map(|(s, t)| {
                let mut tgt = task.tgt_vocab.encode(t);
                tgt.push(EOS);
                (task.src_vocab.encode(s), tgt)
            })
            .collect();
        for rec in &task.oracle {
            let (s, t) = &task.test[rec.sentence_idx];
            let src = task.src_vocab.encode(s);
            let mut tgt = task.tgt_vocab.encode(t);
            tgt.push(EOS);
            let prefix = &tgt[..rec.position];
            let mut expect: BTreeSet<u32> = BTreeSet::new();
            for (os, ot) in &all {
                if *os == src && ot.len() > rec.position && &ot[..rec.position] == prefix {
                    expect.insert(ot[rec.position]);
                }
            }
            let got: BTreeSet<u32> = rec.tokens.iter().copied().collect();
            assert_eq!(got, expect);
            assert!(expect.contains(&tgt[rec.position]));
        }
        // At least one test record must be contested.
        assert!(task.oracle.iter().any(|r| r.tokens.len() >= 2));
    }

    #[test]
    fn oracle_text_round_trip() {
        let task = gen_synth(&SynthTaskSpec::default()).unwrap();
        let text = render_oracle(&task.oracle);
        let parsed = parse_oracle(&text).unwrap();
        assert_eq!(parsed, task.oracle);
    }

    #[test]
    fn corpus_encoding_appends_eos() {
        let v = Vocabulary::build(["a b"], 1).unwrap();
        let c = ParallelCorpus::from_lines(
            &["a b".into()],
            &["b a".into()],
            &v,
            &v,
        )
        .unwrap();
        assert_eq!(c.pairs[0].1.last(), Some(&EOS));
        assert_eq!(c.total_target_tokens(), 3);
    }
}
