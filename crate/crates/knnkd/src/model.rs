//! A toy autoregressive encoder-decoder in 64-bit floats.
//!
//! Single-layer tanh recurrent encoder and decoder with dot-product attention
//! over the encoder states. The attention-combined vector fed to the output
//! matrix is the per-step hidden state that doubles as the datastore key.
//! Everything runs in f64 with a fixed summation order, so forward passes,
//! gradients, and training runs are bit-reproducible.

use crate::corpus::{BOS, EOS, PAD};
use crate::distill::TeacherDistribution;
use crate::util::{LeReader, LeWriter};
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::ops::Range;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KNKD";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Probabilities below this floor are clamped before taking logs.
pub const LOG_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Also the datastore key dimensionality.
    pub hidden_dim: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        ModelConfig {
            embed_dim: 64,
            hidden_dim: 64,
            src_vocab_size,
            tgt_vocab_size,
            seed: 1,
        }
    }
}

/// Offsets of the parameter blocks inside the flat parameter vector.
/// The serialized checkpoint stores parameters in exactly this order.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub e_src: usize,  // src_vocab x embed
    pub e_tgt: usize,  // tgt_vocab x embed
    pub w_ex: usize,   // hidden x embed
    pub w_eh: usize,   // hidden x hidden
    pub b_e: usize,    // hidden
    pub w_dx: usize,   // hidden x embed
    pub w_dh: usize,   // hidden x hidden
    pub b_d: usize,    // hidden
    pub w_c: usize,    // hidden x 2*hidden
    pub b_c: usize,    // hidden
    pub out: usize,    // tgt_vocab x hidden
    pub total: usize,
}

impl Layout {
    pub fn of(cfg: &ModelConfig) -> Layout {
        let (e, h, s, t) = (
            cfg.embed_dim,
            cfg.hidden_dim,
            cfg.src_vocab_size,
            cfg.tgt_vocab_size,
        );
        let e_src = 0;
        let e_tgt = e_src + s * e;
        let w_ex = e_tgt + t * e;
        let w_eh = w_ex + h * e;
        let b_e = w_eh + h * h;
        let w_dx = b_e + h;
        let w_dh = w_dx + h * e;
        let b_d = w_dh + h * h;
        let w_c = b_d + h;
        let b_c = w_c + h * 2 * h;
        let out = b_c + h;
        let total = out + t * h;
        Layout {
            e_src,
            e_tgt,
            w_ex,
            w_eh,
            b_e,
            w_dx,
            w_dh,
            b_d,
            w_c,
            b_c,
            out,
            total,
        }
    }

    /// Named parameter groups, for the per-group gradient check.
    pub fn groups(&self) -> Vec<(&'static str, Range<usize>)> {
        vec![
            ("e_src", self.e_src..self.e_tgt),
            ("e_tgt", self.e_tgt..self.w_ex),
            ("w_ex", self.w_ex..self.w_eh),
            ("w_eh", self.w_eh..self.b_e),
            ("b_e", self.b_e..self.w_dx),
            ("w_dx", self.w_dx..self.w_dh),
            ("w_dh", self.w_dh..self.b_d),
            ("b_d", self.b_d..self.w_c),
            ("w_c", self.w_c..self.b_c),
            ("b_c", self.b_c..self.out),
            ("out", self.out..self.total),
        ]
    }
}

pub fn param_count(cfg: &ModelConfig) -> usize {
    Layout::of(cfg).total
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<f64>,
}

/// Everything cached by a teacher-forced pass that the backward pass needs.
pub struct ForwardCache {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
    /// Decoder input at each step: BOS, then the ground-truth prefix.
    pub dec_inputs: Vec<u32>,
    pub enc_states: Vec<Vec<f64>>,
    pub dec_states: Vec<Vec<f64>>,
    pub attn: Vec<Vec<f64>>,
    pub contexts: Vec<Vec<f64>>,
    /// Per-step combined hidden vector; this is the datastore key.
    pub hidden: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

struct StepTrace {
    s: Vec<f64>,
    attn: Vec<f64>,
    ctx: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn check_ids(ids: &[u32], size: usize) -> Result<()> {
    for &id in ids {
        if id as usize >= size {
            return Err(Error::TokenOutOfRange { id, size });
        }
    }
    Ok(())
}

impl ModelState {
    /// Uniform init in [-0.08, 0.08] from the config seed.
    pub fn init(config: ModelConfig) -> ModelState {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let total = param_count(&config);
        let params = (0..total).map(|_| rng.gen_range(-0.08..0.08)).collect();
        ModelState { config, params }
    }

    /// All-zero parameters (softmax outputs are uniform). Test helper.
    pub fn zeros(config: ModelConfig) -> ModelState {
        let total = param_count(&config);
        ModelState {
            config,
            params: vec![0.0; total],
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::of(&self.config)
    }

    fn emb(&self, base: usize, tok: u32) -> &[f64] {
        let e = self.config.embed_dim;
        let off = base + tok as usize * e;
        &self.params[off..off + e]
    }

    /// Run the encoder over a source sentence, returning one hidden state per
    /// source position.
    pub fn encode(&self, src: &[u32]) -> Result<Vec<Vec<f64>>> {
        if src.is_empty() {
            return Err(Error::InvalidArgument("empty source sentence".into()));
        }
        check_ids(src, self.config.src_vocab_size)?;
        let l = self.layout();
        let h = self.config.hidden_dim;
        let e = self.config.embed_dim;
        let mut states = Vec::with_capacity(src.len());
        let mut prev = vec![0.0; h];
        for &tok in src {
            let x = self.emb(l.e_src, tok);
            let mut g = vec![0.0; h];
            for r in 0..h {
                let mut acc = self.params[l.b_e + r];
                let wx = &self.params[l.w_ex + r * e..l.w_ex + (r + 1) * e];
                for j in 0..e {
                    acc += wx[j] * x[j];
                }
                let wh = &self.params[l.w_eh + r * h..l.w_eh + (r + 1) * h];
                for j in 0..h {
                    acc += wh[j] * prev[j];
                }
                g[r] = acc.tanh();
            }
            states.push(g.clone());
            prev = g;
        }
        Ok(states)
    }

    fn dec_step_trace(
        &self,
        enc: &[Vec<f64>],
        s_prev: &[f64],
        input: u32,
    ) -> Result<StepTrace> {
        check_ids(&[input], self.config.tgt_vocab_size)?;
        let l = self.layout();
        let h = self.config.hidden_dim;
        let e = self.config.embed_dim;
        let t = self.config.tgt_vocab_size;
        let x = self.emb(l.e_tgt, input);

        // Recurrent cell.
        let mut s = vec![0.0; h];
        for r in 0..h {
            let mut acc = self.params[l.b_d + r];
            let wx = &self.params[l.w_dx + r * e..l.w_dx + (r + 1) * e];
            for j in 0..e {
                acc += wx[j] * x[j];
            }
            let wh = &self.params[l.w_dh + r * h..l.w_dh + (r + 1) * h];
            for j in 0..h {
                acc += wh[j] * s_prev[j];
            }
            s[r] = acc.tanh();
        }

        // Dot-product attention over encoder states.
        let m = enc.len();
        let mut scores = vec![0.0; m];
        for (ti, et) in enc.iter().enumerate() {
            let mut acc = 0.0;
            for j in 0..h {
                acc += s[j] * et[j];
            }
            scores[ti] = acc;
        }
        let attn = softmax(&scores)?;
        let mut ctx = vec![0.0; h];
        for (ti, et) in enc.iter().enumerate() {
            let a = attn[ti];
            for j in 0..h {
                ctx[j] += a * et[j];
            }
        }

        // Combine recurrent state and context into the output-layer key.
        let mut hidden = vec![0.0; h];
        for r in 0..h {
            let mut acc = self.params[l.b_c + r];
            let wc = &self.params[l.w_c + r * 2 * h..l.w_c + (r + 1) * 2 * h];
            for j in 0..h {
                acc += wc[j] * s[j];
            }
            for j in 0..h {
                acc += wc[h + j] * ctx[j];
            }
            hidden[r] = acc.tanh();
        }

        let mut logits = vec![0.0; t];
        for r in 0..t {
            let o = &self.params[l.out + r * h..l.out + (r + 1) * h];
            let mut acc = 0.0;
            for j in 0..h {
                acc += o[j] * hidden[j];
            }
            logits[r] = acc;
        }

        Ok(StepTrace {
            s,
            attn,
            ctx,
            hidden,
            logits,
        })
    }

    /// One decoder step: consume `input` given the previous recurrent state,
    /// returning (new recurrent state, step hidden vector, logits row).
    pub fn dec_step(
        &self,
        enc: &[Vec<f64>],
        s_prev: &[f64],
        input: u32,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let tr = self.dec_step_trace(enc, s_prev, input)?;
        Ok((tr.s, tr.hidden, tr.logits))
    }

    /// Teacher-forced pass over an EOS-terminated target. Makes exactly
    /// `tgt.len()` decoder steps and emits as many logits rows; row `i`
    /// predicts `tgt[i]`.
    pub fn forward_teacher_forced(&self, src: &[u32], tgt: &[u32]) -> Result<ForwardCache> {
        if tgt.is_empty() {
            return Err(Error::InvalidArgument("empty target sentence".into()));
        }
        check_ids(tgt, self.config.tgt_vocab_size)?;
        let enc_states = self.encode(src)?;
        let n = tgt.len();
        let mut dec_inputs = Vec::with_capacity(n);
        dec_inputs.push(BOS);
        dec_inputs.extend_from_slice(&tgt[..n - 1]);

        let mut dec_states = Vec::with_capacity(n);
        let mut attn = Vec::with_capacity(n);
        let mut contexts = Vec::with_capacity(n);
        let mut hidden = Vec::with_capacity(n);
        let mut logits = Vec::with_capacity(n);
        let mut s_prev = enc_states.last().unwrap().clone();
        for &input in &dec_inputs {
            let tr = self.dec_step_trace(&enc_states, &s_prev, input)?;
            s_prev = tr.s.clone();
            dec_states.push(tr.s);
            attn.push(tr.attn);
            contexts.push(tr.ctx);
            hidden.push(tr.hidden);
            logits.push(tr.logits);
        }
        Ok(ForwardCache {
            src: src.to_vec(),
            tgt: tgt.to_vec(),
            dec_inputs,
            enc_states,
            dec_states,
            attn,
            contexts,
            hidden,
            logits,
        })
    }

    /// Single-step interface: encode the source, consume the whole target
    /// prefix (which must begin with BOS), and return the hidden vector and
    /// logits row for the next position.
    pub fn forward(&self, src: &[u32], y_prefix: &[u32]) -> Result<(Vec<f64>, Vec<f64>)> {
        if y_prefix.first() != Some(&BOS) {
            return Err(Error::InvalidArgument(
                "y_prefix must begin with BOS".into(),
            ));
        }
        check_ids(y_prefix, self.config.tgt_vocab_size)?;
        let enc = self.encode(src)?;
        let mut s = enc.last().unwrap().clone();
        let mut last = None;
        for &tok in y_prefix {
            let tr = self.dec_step_trace(&enc, &s, tok)?;
            s = tr.s.clone();
            last = Some((tr.hidden, tr.logits));
        }
        Ok(last.unwrap())
    }

    /// Backpropagate `d_logits` (one row per decoder step, any scaling already
    /// applied) through the cached pass, accumulating into `grads`.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &[Vec<f64>], grads: &mut [f64]) {
        let l = self.layout();
        let h = self.config.hidden_dim;
        let e = self.config.embed_dim;
        let t = self.config.tgt_vocab_size;
        let m = cache.enc_states.len();
        let n = cache.dec_states.len();
        assert_eq!(d_logits.len(), n);
        assert_eq!(grads.len(), l.total);

        let mut d_enc = vec![vec![0.0; h]; m];
        let mut d_s_carry = vec![0.0; h];

        for i in (0..n).rev() {
            let dz = &d_logits[i];
            let hid = &cache.hidden[i];
            let s = &cache.dec_states[i];
            let ctx = &cache.contexts[i];
            let attn = &cache.attn[i];

            // Output layer.
            let mut d_hidden = vec![0.0; h];
            for r in 0..t {
                let g = dz[r];
                if g == 0.0 {
                    continue;
                }
                let o_off = l.out + r * h;
                for j in 0..h {
                    grads[o_off + j] += g * hid[j];
                    d_hidden[j] += self.params[o_off + j] * g;
                }
            }

            // Combiner tanh.
            let mut d_gc = vec![0.0; h];
            for r in 0..h {
                d_gc[r] = d_hidden[r] * (1.0 - hid[r] * hid[r]);
            }
            let mut d_s = d_s_carry.clone();
            let mut d_ctx = vec![0.0; h];
            for r in 0..h {
                let g = d_gc[r];
                let wc_off = l.w_c + r * 2 * h;
                grads[l.b_c + r] += g;
                for j in 0..h {
                    grads[wc_off + j] += g * s[j];
                    d_s[j] += self.params[wc_off + j] * g;
                }
                for j in 0..h {
                    grads[wc_off + h + j] += g * ctx[j];
                    d_ctx[j] += self.params[wc_off + h + j] * g;
                }
            }

            // Attention: ctx = sum_t attn_t * enc_t, attn = softmax(scores),
            // scores_t = s . enc_t.
            let mut d_attn = vec![0.0; m];
            for (ti, et) in cache.enc_states.iter().enumerate() {
                let mut acc = 0.0;
                for j in 0..h {
                    acc += d_ctx[j] * et[j];
                    d_enc[ti][j] += attn[ti] * d_ctx[j];
                }
                d_attn[ti] = acc;
            }
            let dot: f64 = (0..m).map(|ti| attn[ti] * d_attn[ti]).sum();
            for (ti, et) in cache.enc_states.iter().enumerate() {
                let d_score = attn[ti] * (d_attn[ti] - dot);
                if d_score == 0.0 {
                    continue;
                }
                for j in 0..h {
                    d_s[j] += d_score * et[j];
                    d_enc[ti][j] += d_score * s[j];
                }
            }

            // Decoder recurrent cell.
            let s_prev: &[f64] = if i == 0 {
                cache.enc_states.last().unwrap()
            } else {
                &cache.dec_states[i - 1]
            };
            let x = self.emb(l.e_tgt, cache.dec_inputs[i]).to_vec();
            let mut d_gd = vec![0.0; h];
            for r in 0..h {
                d_gd[r] = d_s[r] * (1.0 - s[r] * s[r]);
            }
            let mut new_carry = vec![0.0; h];
            let emb_off = l.e_tgt + cache.dec_inputs[i] as usize * e;
            for r in 0..h {
                let g = d_gd[r];
                grads[l.b_d + r] += g;
                let wx_off = l.w_dx + r * e;
                for j in 0..e {
                    grads[wx_off + j] += g * x[j];
                    grads[emb_off + j] += self.params[wx_off + j] * g;
                }
                let wh_off = l.w_dh + r * h;
                for j in 0..h {
                    grads[wh_off + j] += g * s_prev[j];
                    new_carry[j] += self.params[wh_off + j] * g;
                }
            }
            d_s_carry = new_carry;
        }

        // The decoder's initial state is the last encoder state.
        for j in 0..h {
            d_enc[m - 1][j] += d_s_carry[j];
        }

        // Encoder backward.
        let mut d_e_carry = vec![0.0; h];
        for ti in (0..m).rev() {
            let et = &cache.enc_states[ti];
            let mut d_et = d_enc[ti].clone();
            for j in 0..h {
                d_et[j] += d_e_carry[j];
            }
            let mut d_ge = vec![0.0; h];
            for r in 0..h {
                d_ge[r] = d_et[r] * (1.0 - et[r] * et[r]);
            }
            let prev: Option<&Vec<f64>> = if ti == 0 {
                None
            } else {
                Some(&cache.enc_states[ti - 1])
            };
            let x = self.emb(l.e_src, cache.src[ti]).to_vec();
            let emb_off = l.e_src + cache.src[ti] as usize * e;
            let mut new_carry = vec![0.0; h];
            for r in 0..h {
                let g = d_ge[r];
                grads[l.b_e + r] += g;
                let wx_off = l.w_ex + r * e;
                for j in 0..e {
                    grads[wx_off + j] += g * x[j];
                    grads[emb_off + j] += self.params[wx_off + j] * g;
                }
                if let Some(p) = prev {
                    let wh_off = l.w_eh + r * h;
                    for j in 0..h {
                        grads[wh_off + j] += g * p[j];
                        new_carry[j] += self.params[wh_off + j] * g;
                    }
                }
            }
            d_e_carry = new_carry;
        }
    }

    /// Serialize to the checkpoint format: magic `KNKD`, then seven
    /// little-endian u32 words (version, embed, hidden, src vocab, tgt vocab,
    /// seed low, seed high), then the parameters as little-endian f64 in
    /// [`Layout`] order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = LeWriter::new();
        w.raw(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(self.config.embed_dim as u32);
        w.u32(self.config.hidden_dim as u32);
        w.u32(self.config.src_vocab_size as u32);
        w.u32(self.config.tgt_vocab_size as u32);
        w.u32((self.config.seed & 0xffff_ffff) as u32);
        w.u32((self.config.seed >> 32) as u32);
        for &p in &self.params {
            w.f64(p);
        }
        std::fs::write(path, w.bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelState> {
        let name = path.display().to_string();
        let bytes =
            std::fs::read(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        let mut r = LeReader::new(&bytes, &name);
        if r.raw(4)? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic(name));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                path: name,
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let embed_dim = r.u32()? as usize;
        let hidden_dim = r.u32()? as usize;
        let src_vocab_size = r.u32()? as usize;
        let tgt_vocab_size = r.u32()? as usize;
        let seed_lo = r.u32()? as u64;
        let seed_hi = r.u32()? as u64;
        let config = ModelConfig {
            embed_dim,
            hidden_dim,
            src_vocab_size,
            tgt_vocab_size,
            seed: seed_lo | (seed_hi << 32),
        };
        let total = param_count(&config);
        if r.remaining() != total * 8 {
            if r.remaining() < total * 8 {
                return Err(Error::Truncated(name));
            }
            return Err(Error::ArtifactMismatch(format!(
                "{name}: {} trailing bytes after parameters",
                r.remaining() - total * 8
            )));
        }
        let mut params = Vec::with_capacity(total);
        for _ in 0..total {
            params.push(r.f64()?);
        }
        Ok(ModelState { config, params })
    }

    /// Beam decode; `beam_size` 1 is greedy. Scoring is log-probability
    /// normalized by hypothesis length; decoding stops at EOS or `max_len`.
    pub fn decode(&self, src: &[u32], beam_size: usize, max_len: usize) -> Result<DecodeOutput> {
        let mut scorer = BaseScorer::new(self);
        beam_search(&mut scorer, src, beam_size, max_len)
    }
}

/// Numerically stable softmax (max-subtraction). Errors on non-finite input.
pub fn softmax(row: &[f64]) -> Result<Vec<f64>> {
    if row.is_empty() {
        return Err(Error::InvalidArgument("empty logits row".into()));
    }
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        if !v.is_finite() {
            return Err(Error::Numerical("non-finite logit".into()));
        }
        if v > max {
            max = v;
        }
    }
    let mut out: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

fn ln_clamped(p: f64) -> f64 {
    if p < LOG_FLOOR {
        log::warn!("probability {p:.3e} clamped to {LOG_FLOOR:.0e} before log");
        LOG_FLOOR.ln()
    } else {
        p.ln()
    }
}

/// Mean negative log-likelihood of the targets under the probability rows.
/// PAD positions are excluded from the mean.
pub fn ce_loss(rows: &[Vec<f64>], target: &[u32]) -> f64 {
    assert_eq!(rows.len(), target.len(), "rows/target misaligned");
    let mut sum = 0.0;
    let mut n = 0usize;
    for (row, &y) in rows.iter().zip(target) {
        if y == PAD {
            continue;
        }
        sum -= ln_clamped(row[y as usize]);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-step probability source for beam search. The recurrent state is the
/// decoder cell state; implementations may do arbitrary extra work per step
/// (the kNN-MT scorer runs a datastore search).
pub trait StepScorer {
    /// Encode the source and return the initial recurrent state.
    fn start(&mut self, src: &[u32]) -> Result<Vec<f64>>;
    /// Consume `input`, returning the new state and the probability row for
    /// the next token.
    fn step(&mut self, state: &[f64], input: u32) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Plain model scorer: softmax over the model logits.
pub struct BaseScorer<'a> {
    model: &'a ModelState,
    enc: Vec<Vec<f64>>,
}

impl<'a> BaseScorer<'a> {
    pub fn new(model: &'a ModelState) -> Self {
        BaseScorer {
            model,
            enc: Vec::new(),
        }
    }
}

impl StepScorer for BaseScorer<'_> {
    fn start(&mut self, src: &[u32]) -> Result<Vec<f64>> {
        self.enc = self.model.encode(src)?;
        Ok(self.enc.last().unwrap().clone())
    }

    fn step(&mut self, state: &[f64], input: u32) -> Result<(Vec<f64>, Vec<f64>)> {
        let (s, _hidden, logits) = self.model.dec_step(&self.enc, state, input)?;
        Ok((s, softmax(&logits)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// Decoded tokens, EOS stripped.
    pub tokens: Vec<u32>,
    /// Length-normalized log-probability of the winning hypothesis.
    pub score: f64,
}

#[derive(Clone)]
struct Hyp {
    state: Vec<f64>,
    tokens: Vec<u32>,
    sum_logp: f64,
    finished: bool,
}

impl Hyp {
    fn norm_score(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.sum_logp / self.tokens.len() as f64
        }
    }
}

/// Generic length-normalized beam search over any [`StepScorer`].
pub fn beam_search<S: StepScorer>(
    scorer: &mut S,
    src: &[u32],
    beam_size: usize,
    max_len: usize,
) -> Result<DecodeOutput> {
    if beam_size < 1 {
        return Err(Error::InvalidArgument("beam_size must be >= 1".into()));
    }
    if max_len < 1 {
        return Err(Error::InvalidArgument("max_len must be >= 1".into()));
    }
    let state0 = scorer.start(src)?;
    let mut beam = vec![Hyp {
        state: state0,
        tokens: Vec::new(),
        sum_logp: 0.0,
        finished: false,
    }];

    for _ in 0..max_len {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates: Vec<Hyp> = Vec::new();
        for hyp in &beam {
            if hyp.finished {
                candidates.push(hyp.clone());
                continue;
            }
            let input = hyp.tokens.last().copied().unwrap_or(BOS);
            let (state, probs) = scorer.step(&hyp.state, input)?;
            for (tok, &p) in probs.iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok as u32);
                candidates.push(Hyp {
                    state: state.clone(),
                    tokens,
                    // Scoring floor only; vanishing probabilities are normal
                    // for sharp models, so no warning here.
                    sum_logp: hyp.sum_logp + p.max(LOG_FLOOR).ln(),
                    finished: tok as u32 == EOS,
                });
            }
        }
        // Stable sort keeps candidate generation order on ties, which makes
        // decoding deterministic.
        candidates.sort_by(|a, b| b.norm_score().total_cmp(&a.norm_score()));
        candidates.truncate(beam_size);
        beam = candidates;
    }

    // The beam is sorted descending after every iteration.
    let best = beam.into_iter().next().unwrap();
    let mut tokens = best.tokens.clone();
    if tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    Ok(DecodeOutput {
        tokens,
        score: best.norm_score(),
    })
}

/// Optimizer hyperparameters: Adam with an inverse-sqrt learning-rate
/// schedule and linear warmup.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub warmup_init_lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 5e-4,
            warmup_steps: 200,
            warmup_init_lr: 1e-7,
            min_lr: 1e-9,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, step: u64) -> f64 {
        let lr = if self.warmup_steps > 0 && step <= self.warmup_steps {
            self.warmup_init_lr
                + (self.base_lr - self.warmup_init_lr) * step as f64 / self.warmup_steps as f64
        } else {
            self.base_lr * (self.warmup_steps.max(1) as f64 / step as f64).sqrt()
        };
        lr.max(self.min_lr)
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub cfg: OptimConfig,
}

impl AdamState {
    pub fn new(param_count: usize, cfg: OptimConfig) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            cfg,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    fn apply(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let lr = self.cfg.lr_at(self.t);
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
        }
    }
}

/// One training example: target must be EOS-terminated; `teachers`, when
/// present, holds one distribution per target position.
pub struct TrainExample<'a> {
    pub src: &'a [u32],
    pub tgt: &'a [u32],
    pub teachers: Option<&'a [TeacherDistribution]>,
}

/// Batch loss and its gradient with respect to every parameter.
///
/// The per-position target distribution is
/// `q = (1 - alpha) * onehot(y*) + alpha * teacher`; with no teacher the
/// one-hot alone is used, so `alpha = 0` (or `teachers = None`) is plain
/// cross-entropy. The loss is `-sum q ln p` averaged over the batch's
/// non-PAD positions and the logit gradient is `p - q` under the same
/// averaging.
pub fn loss_and_grads(
    model: &ModelState,
    batch: &[TrainExample],
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument("alpha must be in [0, 1]".into()));
    }
    let total = param_count(&model.config);
    let n_positions: usize = batch
        .iter()
        .map(|ex| ex.tgt.iter().filter(|&&y| y != PAD).count())
        .sum();
    if n_positions == 0 {
        return Err(Error::InvalidArgument("batch has no target tokens".into()));
    }
    let scale = 1.0 / n_positions as f64;

    let mut grads = vec![0.0; total];
    let mut loss_sum = 0.0;

    for ex in batch {
        if let Some(teachers) = ex.teachers {
            if teachers.len() != ex.tgt.len() {
                return Err(Error::InvalidArgument(format!(
                    "teacher count {} does not match target length {}",
                    teachers.len(),
                    ex.tgt.len()
                )));
            }
        }
        let cache = model.forward_teacher_forced(ex.src, ex.tgt)?;
        let mut d_logits = Vec::with_capacity(ex.tgt.len());
        for (i, &y) in ex.tgt.iter().enumerate() {
            let p = softmax(&cache.logits[i])?;
            if y == PAD {
                d_logits.push(vec![0.0; p.len()]);
                continue;
            }
            let mut row = p.clone();
            let teacher = ex.teachers.map(|ts| &ts[i]);
            let a = if teacher.is_some() { alpha } else { 0.0 };
            row[y as usize] -= 1.0 - a;
            let mut pos_loss = -(1.0 - a) * ln_clamped(p[y as usize]);
            if let Some(t) = teacher {
                for &(tok, pt) in t.support() {
                    row[tok as usize] -= a * pt;
                    pos_loss -= a * pt * ln_clamped(p[tok as usize]);
                }
            }
            for v in &mut row {
                *v *= scale;
            }
            loss_sum += pos_loss;
            d_logits.push(row);
        }
        model.backward(&cache, &d_logits, &mut grads);
    }

    Ok((loss_sum * scale, grads))
}

/// One optimizer update on a batch. Returns the batch loss. A non-finite
/// loss aborts the step with the model untouched.
pub fn train_step(
    model: &mut ModelState,
    batch: &[TrainExample],
    alpha: f64,
    opt: &mut AdamState,
) -> Result<f64> {
    let (loss, grads) = loss_and_grads(model, batch, alpha)?;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite training loss {loss}"
        )));
    }
    opt.apply(&mut model.params, &grads);
    Ok(loss)
}

/// Fixed-order epoch loop over a corpus. `teachers`, when given, is indexed
/// `[sentence][position]` and must align with the corpus. Returns the
/// per-step losses.
pub fn train_epochs(
    model: &mut ModelState,
    pairs: &[(Vec<u32>, Vec<u32>)],
    teachers: Option<&[Vec<TeacherDistribution>]>,
    alpha: f64,
    epochs: usize,
    batch_size: usize,
    opt: &mut AdamState,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if let Some(ts) = teachers {
        if ts.len() != pairs.len() {
            return Err(Error::InvalidArgument(
                "teacher sentences do not match corpus".into(),
            ));
        }
    }
    let mut losses = Vec::new();
    for _ in 0..epochs {
        for chunk_start in (0..pairs.len()).step_by(batch_size) {
            let chunk_end = (chunk_start + batch_size).min(pairs.len());
            let batch: Vec<TrainExample> = (chunk_start..chunk_end)
                .map(|i| TrainExample {
                    src: &pairs[i].0,
                    tgt: &pairs[i].1,
                    teachers: teachers.map(|ts| ts[i].as_slice()),
                })
                .collect();
            losses.push(train_step(model, &batch, alpha, opt)?);
        }
    }
    Ok(losses)
}
