//! Retrieve-and-interpolate decoding: at every step, search the datastore
//! with the current hidden state and mix the resulting kernel distribution
//! into the model's softmax with weight lambda.
//!
//! `lambda = 0` skips the search entirely and returns the model row bitwise,
//! so the whole decode path reduces to the plain decoder; `lambda = 1`
//! returns the retrieval distribution alone. Searches are counted so decode
//! cost (one search per live beam per step) is observable in benchmarks.

use crate::datastore::Datastore;
use crate::distill::TeacherDistribution;
use crate::knn::{search, IvfIndex, Metric, SearchConfig};
use crate::model::{beam_search, softmax, DecodeOutput, ModelState, StepScorer};
use crate::{Error, Result};

/// Interpolation parameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct InterpConfig {
    /// Mixing weight toward the retrieval distribution; [0, 1].
    pub lambda: f64,
    pub k: usize,
    pub tau: f64,
}

impl Default for InterpConfig {
    fn default() -> Self {
        InterpConfig {
            lambda: 0.5,
            k: 16,
            tau: 100.0,
        }
    }
}

impl InterpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument("lambda must be in [0, 1]".into()));
        }
        if self.k < 1 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument("tau must be > 0".into()));
        }
        Ok(())
    }
}

/// Retrieval backend for the per-step search.
pub enum Retriever<'a> {
    Exact(&'a Datastore),
    InvertedFile {
        datastore: &'a Datastore,
        index: &'a IvfIndex,
        num_probes: usize,
    },
}

impl Retriever<'_> {
    fn datastore(&self) -> &Datastore {
        match self {
            Retriever::Exact(ds) => ds,
            Retriever::InvertedFile { datastore, .. } => datastore,
        }
    }

    fn run(&self, query: &[f32], k: usize, metric: Metric) -> Result<crate::knn::NeighborSet> {
        match self {
            Retriever::Exact(ds) => search(
                ds,
                query,
                &SearchConfig {
                    k,
                    metric,
                    index: crate::knn::IndexKind::Exact,
                },
            ),
            Retriever::InvertedFile {
                datastore,
                index,
                num_probes,
            } => index.search(datastore, query, k, metric, *num_probes),
        }
    }
}

/// One interpolated step: `(1 - lambda) * p_model + lambda * p_knn`, where
/// `p_knn` comes from a fresh k-nearest search at this step's hidden state.
/// At `lambda = 0` the model row is returned bitwise and no search runs.
/// Returns the row and whether a search was performed.
pub fn knnmt_step(
    p_model: &[f64],
    step_hidden: &[f64],
    retriever: &Retriever,
    cfg: &InterpConfig,
    metric: Metric,
) -> Result<(Vec<f64>, bool)> {
    cfg.validate()?;
    let ds = retriever.datastore();
    if ds.count() == 0 {
        return Err(Error::InvalidArgument("empty datastore".into()));
    }
    if cfg.lambda == 0.0 {
        return Ok((p_model.to_vec(), false));
    }
    if step_hidden.len() != ds.dim() {
        return Err(Error::InvalidArgument(format!(
            "hidden dim {} does not match datastore dim {}",
            step_hidden.len(),
            ds.dim()
        )));
    }
    let query: Vec<f32> = step_hidden.iter().map(|&x| x as f32).collect();
    let ns = retriever.run(&query, cfg.k, metric)?;
    let teacher = TeacherDistribution::from_neighbors(&ns.distance_value_pairs(), cfg.tau)?;
    let lam = cfg.lambda;
    let mut out: Vec<f64> = p_model.iter().map(|&p| (1.0 - lam) * p).collect();
    for &(tok, p) in teacher.support() {
        out[tok as usize] += lam * p;
    }
    Ok((out, true))
}

/// Scorer that interpolates every expansion's probability row. Counts the
/// searches it performs.
pub struct KnnMtScorer<'a> {
    model: &'a ModelState,
    retriever: Retriever<'a>,
    cfg: InterpConfig,
    metric: Metric,
    enc: Vec<Vec<f64>>,
    searches: u64,
}

impl<'a> KnnMtScorer<'a> {
    pub fn new(
        model: &'a ModelState,
        retriever: Retriever<'a>,
        cfg: InterpConfig,
        metric: Metric,
    ) -> Result<Self> {
        cfg.validate()?;
        let ds = retriever.datastore();
        if ds.count() == 0 {
            return Err(Error::InvalidArgument("empty datastore".into()));
        }
        if cfg.lambda > 0.0 && ds.dim() != model.config.hidden_dim {
            return Err(Error::ArtifactMismatch(format!(
                "datastore dim {} does not match model hidden dim {}",
                ds.dim(),
                model.config.hidden_dim
            )));
        }
        Ok(KnnMtScorer {
            model,
            retriever,
            cfg,
            metric,
            enc: Vec::new(),
            searches: 0,
        })
    }

    pub fn searches(&self) -> u64 {
        self.searches
    }
}

impl StepScorer for KnnMtScorer<'_> {
    fn start(&mut self, src: &[u32]) -> Result<Vec<f64>> {
        self.enc = self.model.encode(src)?;
        Ok(self.enc.last().unwrap().clone())
    }

    fn step(&mut self, state: &[f64], input: u32) -> Result<(Vec<f64>, Vec<f64>)> {
        let (s, hidden, logits) = self.model.dec_step(&self.enc, state, input)?;
        let p_model = softmax(&logits)?;
        let (p, searched) =
            knnmt_step(&p_model, &hidden, &self.retriever, &self.cfg, self.metric)?;
        if searched {
            self.searches += 1;
        }
        Ok((s, p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnMtDecodeOutput {
    pub output: DecodeOutput,
    /// Number of datastore searches performed (one per live beam per step).
    pub searches: u64,
}

/// Beam decode with per-step retrieval interpolation.
pub fn knnmt_decode(
    model: &ModelState,
    retriever: Retriever,
    src: &[u32],
    beam_size: usize,
    cfg: &InterpConfig,
    metric: Metric,
    max_len: usize,
) -> Result<KnnMtDecodeOutput> {
    let mut scorer = KnnMtScorer::new(model, retriever, *cfg, metric)?;
    let output = beam_search(&mut scorer, src, beam_size, max_len)?;
    Ok(KnnMtDecodeOutput {
        output,
        searches: scorer.searches(),
    })
}
