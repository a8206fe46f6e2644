//! Nearest-neighbor search over the datastore.
//!
//! The exact searcher is a full scan with distances accumulated in f64 from
//! the stored f32 keys; ties break by ascending datastore index so results
//! (and everything trained from them) are bit-reproducible. Squared L2 is the
//! default metric; true L2 is a monotone transform of it, so both return the
//! same neighbor ordering and differ only in the reported distances.
//!
//! The optional inverted-file index trades recall for speed: Lloyd k-means
//! over the keys, then exact scans inside the probed clusters. Probing every
//! cluster degenerates to the exhaustive search.
//!
//! `batch_search_training_set` is the offline pass that queries every
//! training context against the datastore built from the same checkpoint and
//! writes the per-position neighbor file (`KNNB`).

use crate::corpus::ParallelCorpus;
use crate::datastore::{context_keys, Datastore};
use crate::model::ModelState;
use crate::util::{LeReader, LeWriter};
use crate::{Error, Result};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

pub const NEIGHBOR_MAGIC: &[u8; 4] = b"KNNB";
pub const NEIGHBOR_VERSION: u32 = 1;
/// magic + version + k + count + fingerprint + crc32.
const NEIGHBOR_HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Metric {
    SquaredL2,
    L2,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sq-l2" | "squared-l2" => Ok(Metric::SquaredL2),
            "l2" => Ok(Metric::L2),
            other => Err(Error::InvalidArgument(format!("unknown metric '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum IndexKind {
    Exact,
    InvertedFile {
        num_clusters: usize,
        num_probes: usize,
    },
}

/// Search parameters: neighbor count, metric, and index choice.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SearchConfig {
    pub k: usize,
    pub metric: Metric,
    pub index: IndexKind,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            k: 16,
            metric: Metric::SquaredL2,
            index: IndexKind::Exact,
        }
    }
}

/// One retrieved neighbor: datastore index, distance under the configured
/// metric (stored as f32), and the entry's token value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f32,
    pub value: u32,
}

/// Retrieved neighbors sorted by ascending (distance, datastore index).
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub entries: Vec<Neighbor>,
}

impl NeighborSet {
    /// `(distance, value)` pairs, the shape consumed by the teacher builder.
    pub fn distance_value_pairs(&self) -> Vec<(f32, u32)> {
        self.entries.iter().map(|n| (n.distance, n.value)).collect()
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    acc
}

/// Heap entry ordered by (squared distance, index); the heap keeps the k
/// smallest under that order.
struct HeapItem {
    sq: f64,
    index: usize,
}

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.sq == other.sq && self.index == other.index
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sq
            .total_cmp(&other.sq)
            .then(self.index.cmp(&other.index))
    }
}

fn validate_query(ds: &Datastore, query: &[f32]) -> Result<()> {
    if ds.count() == 0 {
        return Err(Error::InvalidArgument("empty datastore".into()));
    }
    if query.len() != ds.dim() {
        return Err(Error::InvalidArgument(format!(
            "query dim {} does not match datastore dim {}",
            query.len(),
            ds.dim()
        )));
    }
    Ok(())
}

fn top_k_from_candidates<I>(ds: &Datastore, query: &[f32], candidates: I, k: usize) -> Vec<Neighbor>
where
    I: Iterator<Item = usize>,
{
    let mut heap: BinaryHeap<HeapItem> = BinaryHeap::with_capacity(k + 1);
    for index in candidates {
        let sq = sq_dist(ds.key(index), query);
        heap.push(HeapItem { sq, index });
        if heap.len() > k {
            heap.pop();
        }
    }
    let mut items = heap.into_vec();
    items.sort_by(|a, b| a.sq.total_cmp(&b.sq).then(a.index.cmp(&b.index)));
    items
        .into_iter()
        .map(|it| Neighbor {
            index: it.index,
            distance: it.sq as f32,
            value: ds.value(it.index),
        })
        .collect()
}

fn finish_metric(mut entries: Vec<Neighbor>, metric: Metric) -> Vec<Neighbor> {
    if metric == Metric::L2 {
        for n in &mut entries {
            n.distance = (n.distance as f64).sqrt() as f32;
        }
    }
    entries
}

/// Exact k-nearest search: full scan, true top-k under the metric with the
/// documented tie-break. Returns `min(k, count)` entries.
pub fn search(ds: &Datastore, query: &[f32], cfg: &SearchConfig) -> Result<NeighborSet> {
    if cfg.k < 1 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    validate_query(ds, query)?;
    match cfg.index {
        IndexKind::Exact => {
            let entries = top_k_from_candidates(ds, query, 0..ds.count(), cfg.k);
            Ok(NeighborSet {
                entries: finish_metric(entries, cfg.metric),
            })
        }
        IndexKind::InvertedFile { .. } => Err(Error::InvalidArgument(
            "inverted-file search requires a built IvfIndex; use IvfIndex::search".into(),
        )),
    }
}

/// Inverted-file index: k-means centroids plus per-cluster entry lists.
pub struct IvfIndex {
    dim: usize,
    centroids: Vec<f32>,
    clusters: Vec<Vec<u32>>,
}

impl IvfIndex {
    /// Lloyd k-means (fixed 10 iterations) seeded deterministically.
    pub fn build(ds: &Datastore, num_clusters: usize, seed: u64) -> Result<IvfIndex> {
        if num_clusters < 1 || num_clusters > ds.count() {
            return Err(Error::InvalidArgument(format!(
                "num_clusters must be in [1, {}]",
                ds.count()
            )));
        }
        let dim = ds.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks = sample(&mut rng, ds.count(), num_clusters);
        let mut centroids: Vec<f64> = Vec::with_capacity(num_clusters * dim);
        for i in picks.iter() {
            centroids.extend(ds.key(i).iter().map(|&x| x as f64));
        }

        let mut assign = vec![0usize; ds.count()];
        for _ in 0..10 {
            for i in 0..ds.count() {
                let key = ds.key(i);
                let mut best = (f64::INFINITY, 0usize);
                for c in 0..num_clusters {
                    let cen = &centroids[c * dim..(c + 1) * dim];
                    let mut acc = 0.0;
                    for (x, y) in key.iter().zip(cen) {
                        let d = *x as f64 - y;
                        acc += d * d;
                    }
                    if acc < best.0 {
                        best = (acc, c);
                    }
                }
                assign[i] = best.1;
            }
            let mut sums = vec![0.0f64; num_clusters * dim];
            let mut counts = vec![0usize; num_clusters];
            for i in 0..ds.count() {
                let c = assign[i];
                counts[c] += 1;
                for (j, &x) in ds.key(i).iter().enumerate() {
                    sums[c * dim + j] += x as f64;
                }
            }
            for c in 0..num_clusters {
                if counts[c] > 0 {
                    for j in 0..dim {
                        centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                    }
                }
            }
        }

        let mut clusters = vec![Vec::new(); num_clusters];
        for (i, &c) in assign.iter().enumerate() {
            clusters[c].push(i as u32);
        }
        Ok(IvfIndex {
            dim,
            centroids: centroids.into_iter().map(|x| x as f32).collect(),
            clusters,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Scan the `num_probes` clusters whose centroids are nearest to the
    /// query, then exact-search within them.
    pub fn search(
        &self,
        ds: &Datastore,
        query: &[f32],
        k: usize,
        metric: Metric,
        num_probes: usize,
    ) -> Result<NeighborSet> {
        if k < 1 || num_probes < 1 {
            return Err(Error::InvalidArgument(
                "k and num_probes must be >= 1".into(),
            ));
        }
        validate_query(ds, query)?;
        if query.len() != self.dim {
            return Err(Error::InvalidArgument("query dim mismatch".into()));
        }
        let nc = self.clusters.len();
        let mut order: Vec<(f64, usize)> = (0..nc)
            .map(|c| {
                let cen = &self.centroids[c * self.dim..(c + 1) * self.dim];
                (sq_dist(cen, query), c)
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let probes = num_probes.min(nc);
        let candidates = order[..probes]
            .iter()
            .flat_map(|&(_, c)| self.clusters[c].iter().map(|&i| i as usize));
        let entries = top_k_from_candidates(ds, query, candidates, k);
        Ok(NeighborSet {
            entries: finish_metric(entries, metric),
        })
    }
}

/// Fraction of exact neighbor indices recovered by the approximate results,
/// averaged over aligned query lists.
pub fn recall_at_k(approx: &[NeighborSet], exact: &[NeighborSet]) -> Result<f64> {
    if approx.len() != exact.len() {
        return Err(Error::InvalidArgument(format!(
            "result lists differ in length: {} vs {}",
            approx.len(),
            exact.len()
        )));
    }
    if exact.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    let mut total = 0.0;
    for (a, e) in approx.iter().zip(exact) {
        let hits = e
            .entries
            .iter()
            .filter(|en| a.entries.iter().any(|an| an.index == en.index))
            .count();
        total += hits as f64 / e.entries.len() as f64;
    }
    Ok(total / exact.len() as f64)
}

/// In-memory neighbor records for the whole training set, with the file
/// metadata. Records follow datastore provenance order.
pub struct NeighborFile {
    pub k: usize,
    pub count: usize,
    pub fingerprint: u64,
    records: Vec<(f32, u32)>,
}

impl NeighborFile {
    pub fn record(&self, i: usize) -> &[(f32, u32)] {
        &self.records[i * self.k..(i + 1) * self.k]
    }

    /// Records grouped per corpus sentence, for training.
    pub fn by_sentence(&self, corpus: &ParallelCorpus) -> Result<Vec<Vec<&[(f32, u32)]>>> {
        if corpus.total_target_tokens() != self.count {
            return Err(Error::ArtifactMismatch(format!(
                "neighbor file has {} records but corpus has {} target tokens",
                self.count,
                corpus.total_target_tokens()
            )));
        }
        let mut out = Vec::with_capacity(corpus.pairs.len());
        let mut offset = 0;
        for (_, tgt) in &corpus.pairs {
            let mut sent = Vec::with_capacity(tgt.len());
            for pos in 0..tgt.len() {
                sent.push(self.record(offset + pos));
            }
            offset += tgt.len();
            out.push(sent);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<NeighborFile> {
        let name = path.display().to_string();
        let bytes =
            std::fs::read(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        let mut r = LeReader::new(&bytes, &name);
        if r.raw(4)? != NEIGHBOR_MAGIC {
            return Err(Error::BadMagic(name));
        }
        let version = r.u32()?;
        if version != NEIGHBOR_VERSION {
            return Err(Error::VersionMismatch {
                path: name,
                found: version,
                expected: NEIGHBOR_VERSION,
            });
        }
        let k = r.u32()? as usize;
        let count = r.u64()? as usize;
        let fingerprint = r.u64()?;
        let crc = r.u32()?;
        debug_assert_eq!(r.pos(), NEIGHBOR_HEADER_LEN);
        let expected = count * k * 8;
        if r.remaining() < expected {
            return Err(Error::Truncated(name));
        }
        if r.remaining() > expected {
            return Err(Error::ArtifactMismatch(format!(
                "{name}: {} trailing bytes",
                r.remaining() - expected
            )));
        }
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&bytes[NEIGHBOR_HEADER_LEN..]);
        if hasher.finalize() != crc {
            return Err(Error::ChecksumMismatch(name));
        }
        let mut records = Vec::with_capacity(count * k);
        for _ in 0..count * k {
            let d = r.f32()?;
            let v = r.u32()?;
            records.push((d, v));
        }
        Ok(NeighborFile {
            k,
            count,
            fingerprint,
            records,
        })
    }
}

/// Offline batch search (the preprocessing step before distillation): query
/// every training context against the datastore and return one NeighborSet
/// per position, in corpus order. The query's own entry is intentionally not
/// excluded; self-retrieval is what guarantees the ground-truth token appears
/// in every teacher's support.
pub fn batch_search_training_set(
    ds: &Datastore,
    model: &ModelState,
    corpus: &ParallelCorpus,
    cfg: &SearchConfig,
    checkpoint_fingerprint: u64,
) -> Result<Vec<NeighborSet>> {
    if ds.fingerprint() != checkpoint_fingerprint {
        return Err(Error::ArtifactMismatch(format!(
            "datastore was built with checkpoint {:016x}, got {:016x}",
            ds.fingerprint(),
            checkpoint_fingerprint
        )));
    }
    if ds.dim() != model.config.hidden_dim {
        return Err(Error::ArtifactMismatch(format!(
            "datastore dim {} does not match checkpoint hidden dim {}",
            ds.dim(),
            model.config.hidden_dim
        )));
    }
    // Queries are written in deterministic corpus order regardless of how the
    // per-sentence work is scheduled.
    let per_sentence: Vec<Vec<NeighborSet>> = corpus
        .pairs
        .par_iter()
        .map(|(src, tgt)| -> Result<Vec<NeighborSet>> {
            let keys = context_keys(model, src, tgt)?;
            keys.iter().map(|q| search(ds, q, cfg)).collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_sentence.into_iter().flatten().collect())
}

/// Write neighbor sets as a `KNNB` file. All sets must have the same length
/// (use `k <= datastore count`), which the batch search guarantees.
pub fn write_neighbor_file(
    path: &Path,
    sets: &[NeighborSet],
    checkpoint_fingerprint: u64,
) -> Result<()> {
    if sets.is_empty() {
        return Err(Error::InvalidArgument("no neighbor sets to write".into()));
    }
    let k = sets[0].entries.len();
    let mut payload = LeWriter::new();
    for set in sets {
        if set.entries.len() != k {
            return Err(Error::InvalidArgument(
                "neighbor sets have inconsistent k".into(),
            ));
        }
        for n in &set.entries {
            payload.f32(n.distance);
            payload.u32(n.value);
        }
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(payload.bytes());
    let crc = hasher.finalize();

    let mut w = LeWriter::new();
    w.raw(NEIGHBOR_MAGIC);
    w.u32(NEIGHBOR_VERSION);
    w.u32(k as u32);
    w.u64(sets.len() as u64);
    w.u64(checkpoint_fingerprint);
    w.u32(crc);
    debug_assert_eq!(w.len(), NEIGHBOR_HEADER_LEN);
    w.raw(payload.bytes());
    std::fs::write(path, w.bytes())?;
    Ok(())
}

/// Naive oracle: sort every entry by (distance, index) and take k. Lives here
/// so tests and the acceptance suite share one reference implementation;
/// it deliberately avoids the heap-based search path.
pub fn full_scan_oracle(ds: &Datastore, query: &[f32], k: usize, metric: Metric) -> NeighborSet {
    let mut all: Vec<(f64, usize)> = (0..ds.count())
        .map(|i| (sq_dist(ds.key(i), query), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    let entries = all
        .into_iter()
        .map(|(sq, index)| Neighbor {
            index,
            distance: match metric {
                Metric::SquaredL2 => sq as f32,
                Metric::L2 => sq.sqrt() as f32,
            },
            value: ds.value(index),
        })
        .collect();
    NeighborSet { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ParallelCorpus, Vocabulary};
    use crate::model::{ModelConfig, ModelState};
    use rand::Rng;

    /// Datastore with explicit 1-D keys.
    fn datastore_1d(keys: &[f32]) -> Datastore {
        datastore_nd(&keys.iter().map(|&k| vec![k]).collect::<Vec<_>>())
    }

    fn datastore_nd(keys: &[Vec<f32>]) -> Datastore {
        // Round-trip through the file format to exercise the mmap path too.
        let dim = keys[0].len();
        let mut flat = Vec::new();
        for k in keys {
            flat.extend_from_slice(k);
        }
        let values: Vec<u32> = (0..keys.len() as u32).map(|i| i % 13).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ds");
        let ds = crate::datastore::test_support::owned(dim, flat, values);
        ds.save(&path).unwrap();
        Datastore::load(&path).unwrap()
    }

    #[test]
    fn self_match_has_zero_distance() {
        let ds = datastore_1d(&[0.5, 1.5, -2.0]);
        let cfg = SearchConfig {
            k: 1,
            ..Default::default()
        };
        let ns = search(&ds, &[1.5], &cfg).unwrap();
        assert_eq!(ns.entries[0].index, 1);
        assert_eq!(ns.entries[0].distance, 0.0);
    }

    #[test]
    fn hand_case_with_tie_break() {
        // Keys {0, 1, 4}, query 2.5, k = 2, squared L2:
        // d = {6.25, 2.25, 2.25}; the tie breaks toward the lower index.
        let ds = datastore_1d(&[0.0, 1.0, 4.0]);
        let cfg = SearchConfig {
            k: 2,
            ..Default::default()
        };
        let ns = search(&ds, &[2.5], &cfg).unwrap();
        assert_eq!(ns.entries.len(), 2);
        assert_eq!(ns.entries[0].index, 1);
        assert_eq!(ns.entries[0].distance, 2.25);
        assert_eq!(ns.entries[1].index, 2);
        assert_eq!(ns.entries[1].distance, 2.25);
    }

    #[test]
    fn search_validates_inputs() {
        let ds = datastore_1d(&[0.0, 1.0]);
        let cfg = SearchConfig::default();
        assert!(search(&ds, &[0.0, 1.0], &cfg).is_err());
        assert!(search(
            &ds,
            &[0.0],
            &SearchConfig {
                k: 0,
                ..Default::default()
            }
        )
        .is_err());
    }

    fn random_keys(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect()
    }

    #[test]
    fn exact_matches_full_scan_oracle() {
        let keys = random_keys(500, 8, 21);
        let ds = datastore_nd(&keys);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cfg = SearchConfig {
            k: 17,
            ..Default::default()
        };
        for _ in 0..50 {
            let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let got = search(&ds, &q, &cfg).unwrap();
            let want = full_scan_oracle(&ds, &q, 17, Metric::SquaredL2);
            assert_eq!(
                got.entries.iter().map(|n| n.index).collect::<Vec<_>>(),
                want.entries.iter().map(|n| n.index).collect::<Vec<_>>()
            );
            assert_eq!(got, want);
        }
    }

    #[test]
    fn l2_and_squared_l2_order_identically() {
        let keys = random_keys(200, 6, 31);
        let ds = datastore_nd(&keys);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..20 {
            let q: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let sq = search(
                &ds,
                &q,
                &SearchConfig {
                    k: 9,
                    metric: Metric::SquaredL2,
                    index: IndexKind::Exact,
                },
            )
            .unwrap();
            let l2 = search(
                &ds,
                &q,
                &SearchConfig {
                    k: 9,
                    metric: Metric::L2,
                    index: IndexKind::Exact,
                },
            )
            .unwrap();
            let ids = |ns: &NeighborSet| ns.entries.iter().map(|n| n.index).collect::<Vec<_>>();
            assert_eq!(ids(&sq), ids(&l2));
            for (a, b) in sq.entries.iter().zip(&l2.entries) {
                assert!((b.distance as f64 - (a.distance as f64).sqrt()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn growing_k_preserves_prefix() {
        let keys = random_keys(300, 4, 41);
        let ds = datastore_nd(&keys);
        let q = vec![0.1f32, -0.2, 0.3, 0.0];
        let mut prev: Vec<usize> = Vec::new();
        for k in [1usize, 2, 4, 8, 16, 32] {
            let ns = search(
                &ds,
                &q,
                &SearchConfig {
                    k,
                    ..Default::default()
                },
            )
            .unwrap();
            let ids: Vec<usize> = ns.entries.iter().map(|n| n.index).collect();
            assert_eq!(&ids[..prev.len()], prev.as_slice());
            prev = ids;
        }
    }

    #[test]
    fn k_larger_than_datastore_returns_all() {
        let ds = datastore_1d(&[0.0, 1.0, 2.0]);
        let ns = search(
            &ds,
            &[0.9],
            &SearchConfig {
                k: 10,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(ns.entries.len(), 3);
    }

    #[test]
    fn recall_identity_and_disjoint() {
        let keys = random_keys(100, 4, 51);
        let ds = datastore_nd(&keys);
        let q = vec![0.0f32; 4];
        let cfg = SearchConfig {
            k: 5,
            ..Default::default()
        };
        let e = vec![search(&ds, &q, &cfg).unwrap()];
        assert_eq!(recall_at_k(&e, &e).unwrap(), 1.0);
        // Disjoint result sets recover nothing.
        let used: Vec<usize> = e[0].entries.iter().map(|n| n.index).collect();
        let disjoint = vec![NeighborSet {
            entries: (0..100)
                .filter(|i| !used.contains(i))
                .take(5)
                .map(|index| Neighbor {
                    index,
                    distance: 0.0,
                    value: 0,
                })
                .collect(),
        }];
        assert_eq!(recall_at_k(&disjoint, &e).unwrap(), 0.0);
        assert!(recall_at_k(&e, &[]).is_err());
    }

    #[test]
    fn ivf_full_probing_equals_exhaustive() {
        let keys = random_keys(400, 8, 61);
        let ds = datastore_nd(&keys);
        let index = IvfIndex::build(&ds, 8, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let cfg = SearchConfig {
            k: 12,
            ..Default::default()
        };
        let mut approx_sets = Vec::new();
        let mut exact_sets = Vec::new();
        for _ in 0..30 {
            let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let exact = search(&ds, &q, &cfg).unwrap();
            let probed_all = index
                .search(&ds, &q, 12, Metric::SquaredL2, index.num_clusters())
                .unwrap();
            assert_eq!(exact, probed_all);
            approx_sets.push(index.search(&ds, &q, 12, Metric::SquaredL2, 2).unwrap());
            exact_sets.push(exact);
        }
        let r = recall_at_k(&approx_sets, &exact_sets).unwrap();
        assert!(r > 0.2, "implausibly low recall {r}");
    }

    #[test]
    fn batch_search_self_retrieval_and_file_round_trip() {
        let v = Vocabulary::build(["a b c d e"], 1).unwrap();
        let corpus = ParallelCorpus::from_lines(
            &["a b".into(), "c d".into(), "e a".into()],
            &["b c".into(), "d e".into(), "a b c".into()],
            &v,
            &v,
        )
        .unwrap();
        let model = ModelState::init(ModelConfig {
            embed_dim: 5,
            hidden_dim: 6,
            src_vocab_size: v.size(),
            tgt_vocab_size: v.size(),
            seed: 17,
        });
        let ds = Datastore::build(&model, &corpus, 77).unwrap();
        let cfg = SearchConfig {
            k: 3,
            ..Default::default()
        };
        // Fingerprint mismatch is rejected.
        assert!(matches!(
            batch_search_training_set(&ds, &model, &corpus, &cfg, 78),
            Err(Error::ArtifactMismatch(_))
        ));
        let sets = batch_search_training_set(&ds, &model, &corpus, &cfg, 77).unwrap();
        assert_eq!(sets.len(), ds.count());

        // Every position has a zero-distance neighbor carrying its own token.
        let mut idx = 0;
        for (_, tgt) in &corpus.pairs {
            for &y in tgt {
                assert!(
                    sets[idx]
                        .entries
                        .iter()
                        .any(|n| n.distance == 0.0 && n.value == y),
                    "position {idx} lacks a zero-distance self match"
                );
                idx += 1;
            }
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.knn");
        write_neighbor_file(&path, &sets, 77).unwrap();
        let nf = NeighborFile::load(&path).unwrap();
        assert_eq!(nf.count, sets.len());
        assert_eq!(nf.k, 3);
        assert_eq!(nf.fingerprint, 77);
        for (i, set) in sets.iter().enumerate() {
            assert_eq!(nf.record(i), set.distance_value_pairs().as_slice());
        }
        let grouped = nf.by_sentence(&corpus).unwrap();
        assert_eq!(grouped.len(), corpus.pairs.len());
        assert_eq!(grouped[2].len(), corpus.pairs[2].1.len());

        // Corrupt a payload byte: checksum failure.
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            NeighborFile::load(&path),
            Err(Error::ChecksumMismatch(_))
        ));
    }

    #[test]
    fn k1_batch_search_is_self_match_on_duplicate_free_corpus() {
        let v = Vocabulary::build(["a b c d e f g h"], 1).unwrap();
        // Distinct sources and distinct targets so no two contexts coincide.
        let corpus = ParallelCorpus::from_lines(
            &["a b".into(), "c d".into(), "e f".into()],
            &["b a g".into(), "d c h".into(), "f e a b".into()],
            &v,
            &v,
        )
        .unwrap();
        let model = ModelState::init(ModelConfig {
            embed_dim: 5,
            hidden_dim: 8,
            src_vocab_size: v.size(),
            tgt_vocab_size: v.size(),
            seed: 23,
        });
        let ds = Datastore::build(&model, &corpus, 1).unwrap();
        let cfg = SearchConfig {
            k: 1,
            ..Default::default()
        };
        let sets = batch_search_training_set(&ds, &model, &corpus, &cfg, 1).unwrap();
        for (i, set) in sets.iter().enumerate() {
            assert_eq!(set.entries.len(), 1);
            assert_eq!(set.entries[0].index, i);
            assert_eq!(set.entries[0].distance, 0.0);
        }
    }
}
