//! The key-value datastore: one (hidden-state key, target token) entry per
//! training-set target position, in corpus order.
//!
//! Keys are the model's per-step hidden vectors cast to f32; the model
//! computes in f64 but retrieval-scale temperatures absorb the rounding.
//! EOS positions are stored like any other. Provenance (sentence, position)
//! is kept per entry so self-retrieval is testable.
//!
//! File format (`KNDS`): header, then three 8-byte-aligned blocks (keys as
//! row-major little-endian f32, values as u32, provenance as u32 pairs),
//! covered by a CRC-32 stored in the header. Loading memory-maps the file
//! and hands out zero-copy slices.

use crate::corpus::ParallelCorpus;
use crate::model::ModelState;
use crate::util::{align_up, LeReader, LeWriter};
use crate::{Error, Result};
use rayon::prelude::*;
use std::path::Path;

pub const DATASTORE_MAGIC: &[u8; 4] = b"KNDS";
pub const DATASTORE_VERSION: u32 = 1;
/// magic + version + dim + count + fingerprint + crc32; already 8-aligned.
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8 + 4;

enum Backing {
    Owned {
        keys: Vec<f32>,
        values: Vec<u32>,
        provenance: Vec<u32>,
    },
    Mapped {
        map: memmap2::Mmap,
        keys_off: usize,
        values_off: usize,
        prov_off: usize,
    },
}

/// Immutable datastore over `count` entries of dimension `dim`.
pub struct Datastore {
    dim: usize,
    count: usize,
    fingerprint: u64,
    backing: Backing,
}

impl std::fmt::Debug for Datastore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Datastore")
            .field("dim", &self.dim)
            .field("count", &self.count)
            .field("fingerprint", &format_args!("{:016x}", self.fingerprint))
            .finish_non_exhaustive()
    }
}

/// Per-position hidden-state keys for one sentence, exactly as the datastore
/// stores them. Shared by the datastore builder and the offline batch search
/// so that a training context's query is bit-identical to its stored key.
pub fn context_keys(model: &ModelState, src: &[u32], tgt: &[u32]) -> Result<Vec<Vec<f32>>> {
    let cache = model.forward_teacher_forced(src, tgt)?;
    Ok(cache
        .hidden
        .iter()
        .map(|h| h.iter().map(|&x| x as f32).collect())
        .collect())
}

impl Datastore {
    /// Run the model over the corpus and collect one entry per target token.
    /// Entries are appended sentence-major, position-minor. The checkpoint
    /// fingerprint is stored so downstream artifacts can be validated.
    pub fn build(
        model: &ModelState,
        corpus: &ParallelCorpus,
        checkpoint_fingerprint: u64,
    ) -> Result<Datastore> {
        if corpus.pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if corpus.src_vocab_size != model.config.src_vocab_size
            || corpus.tgt_vocab_size != model.config.tgt_vocab_size
        {
            return Err(Error::ArtifactMismatch(format!(
                "corpus vocab sizes ({}, {}) do not match checkpoint ({}, {})",
                corpus.src_vocab_size,
                corpus.tgt_vocab_size,
                model.config.src_vocab_size,
                model.config.tgt_vocab_size
            )));
        }
        let dim = model.config.hidden_dim;
        let per_sentence: Vec<Vec<Vec<f32>>> = corpus
            .pairs
            .par_iter()
            .map(|(src, tgt)| context_keys(model, src, tgt))
            .collect::<Result<_>>()?;

        let count = corpus.total_target_tokens();
        let mut keys = Vec::with_capacity(count * dim);
        let mut values = Vec::with_capacity(count);
        let mut provenance = Vec::with_capacity(count * 2);
        for (sent, ((_, tgt), sent_keys)) in
            corpus.pairs.iter().zip(&per_sentence).enumerate()
        {
            for (pos, key) in sent_keys.iter().enumerate() {
                keys.extend_from_slice(key);
                values.push(tgt[pos]);
                provenance.push(sent as u32);
                provenance.push(pos as u32);
            }
        }
        Ok(Datastore {
            dim,
            count,
            fingerprint: checkpoint_fingerprint,
            backing: Backing::Owned {
                keys,
                values,
                provenance,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Fingerprint of the checkpoint the keys were computed with.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// All keys as one contiguous row-major slice.
    pub fn keys_flat(&self) -> &[f32] {
        match &self.backing {
            Backing::Owned { keys, .. } => keys,
            Backing::Mapped { map, keys_off, .. } => {
                let bytes = &map[*keys_off..*keys_off + self.count * self.dim * 4];
                let (pre, mid, post) = unsafe { bytes.align_to::<f32>() };
                debug_assert!(pre.is_empty() && post.is_empty());
                mid
            }
        }
    }

    pub fn key(&self, idx: usize) -> &[f32] {
        &self.keys_flat()[idx * self.dim..(idx + 1) * self.dim]
    }

    fn values_slice(&self) -> &[u32] {
        match &self.backing {
            Backing::Owned { values, .. } => values,
            Backing::Mapped {
                map, values_off, ..
            } => {
                let bytes = &map[*values_off..*values_off + self.count * 4];
                let (pre, mid, post) = unsafe { bytes.align_to::<u32>() };
                debug_assert!(pre.is_empty() && post.is_empty());
                mid
            }
        }
    }

    fn prov_slice(&self) -> &[u32] {
        match &self.backing {
            Backing::Owned { provenance, .. } => provenance,
            Backing::Mapped { map, prov_off, .. } => {
                let bytes = &map[*prov_off..*prov_off + self.count * 8];
                let (pre, mid, post) = unsafe { bytes.align_to::<u32>() };
                debug_assert!(pre.is_empty() && post.is_empty());
                mid
            }
        }
    }

    pub fn value(&self, idx: usize) -> u32 {
        self.values_slice()[idx]
    }

    /// (sentence index, target position) the entry was extracted from.
    pub fn provenance(&self, idx: usize) -> (u32, u32) {
        let p = self.prov_slice();
        (p[idx * 2], p[idx * 2 + 1])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut payload = LeWriter::new();
        for &k in self.keys_flat() {
            payload.f32(k);
        }
        payload.pad_to(8);
        let values_rel = payload.len();
        for &v in self.values_slice() {
            payload.u32(v);
        }
        payload.pad_to(8);
        let prov_rel = payload.len();
        for &p in self.prov_slice() {
            payload.u32(p);
        }
        debug_assert_eq!(values_rel, align_up(self.count * self.dim * 4, 8));
        debug_assert_eq!(prov_rel, values_rel + align_up(self.count * 4, 8));

        let mut hasher = crc32fast::Hasher::new();
        hasher.update(payload.bytes());
        let crc = hasher.finalize();

        let mut w = LeWriter::new();
        w.raw(DATASTORE_MAGIC);
        w.u32(DATASTORE_VERSION);
        w.u32(self.dim as u32);
        w.u64(self.count as u64);
        w.u64(self.fingerprint);
        w.u32(crc);
        w.pad_to(8);
        debug_assert_eq!(w.len(), HEADER_LEN);
        w.raw(payload.bytes());
        std::fs::write(path, w.bytes())?;
        Ok(())
    }

    /// Memory-map a datastore file read-only, verifying magic, version,
    /// declared sizes, and the payload checksum.
    pub fn load(path: &Path) -> Result<Datastore> {
        let name = path.display().to_string();
        let file = std::fs::File::open(path)
            .map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        let map = unsafe { memmap2::Mmap::map(&file)? };

        let mut r = LeReader::new(&map, &name);
        if r.raw(4)? != DATASTORE_MAGIC {
            return Err(Error::BadMagic(name));
        }
        let version = r.u32()?;
        if version != DATASTORE_VERSION {
            return Err(Error::VersionMismatch {
                path: name,
                found: version,
                expected: DATASTORE_VERSION,
            });
        }
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let fingerprint = r.u64()?;
        let crc = r.u32()?;
        r.align_to(8)?;
        let keys_off = r.pos();
        debug_assert_eq!(keys_off, HEADER_LEN);
        if dim == 0 || count == 0 {
            return Err(Error::ArtifactMismatch(format!("{name}: empty datastore")));
        }

        let values_off = keys_off + align_up(count * dim * 4, 8);
        let prov_off = values_off + align_up(count * 4, 8);
        let expected_len = prov_off + count * 8;
        if map.len() < expected_len {
            return Err(Error::Truncated(name));
        }
        if map.len() > expected_len {
            return Err(Error::ArtifactMismatch(format!(
                "{name}: {} trailing bytes",
                map.len() - expected_len
            )));
        }

        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&map[keys_off..]);
        if hasher.finalize() != crc {
            return Err(Error::ChecksumMismatch(name));
        }

        Ok(Datastore {
            dim,
            count,
            fingerprint,
            backing: Backing::Mapped {
                map,
                keys_off,
                values_off,
                prov_off,
            },
        })
    }
}
