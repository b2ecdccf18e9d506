//! Mask specifications, packed token masks, and the global mask cache.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use lru::LruCache;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{TokenId, TokenSet};

pub const DEFAULT_CAPACITY: usize = 4096;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("token id {id} out of range for vocabulary size {size}")]
    OutOfRange { id: TokenId, size: usize },
    #[error("allow-mode mask spec has an empty id set")]
    EmptyAllow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Allow,
    Deny,
}

/// Context-free description of a mask: the listed ids are either the only
/// permitted tokens or the only forbidden ones.
#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub mode: MaskMode,
    ids: TokenSet,
    key_hash: u64,
}

impl MaskSpec {
    pub fn new(mode: MaskMode, ids: TokenSet) -> Self {
        let mut h = DefaultHasher::new();
        mode.hash(&mut h);
        ids.hash(&mut h);
        MaskSpec {
            mode,
            ids,
            key_hash: h.finish(),
        }
    }

    pub fn ids(&self) -> &TokenSet {
        &self.ids
    }

    pub fn key_hash(&self) -> u64 {
        self.key_hash
    }

    pub fn permitted(&self, vocab_size: usize) -> TokenSet {
        match self.mode {
            MaskMode::Allow => self.ids.clone(),
            MaskMode::Deny => self.ids.complement(vocab_size),
        }
    }

    pub fn permits(&self, id: TokenId, vocab_size: usize) -> bool {
        (id as usize) < vocab_size
            && match self.mode {
                MaskMode::Allow => self.ids.contains(id),
                MaskMode::Deny => !self.ids.contains(id),
            }
    }
}

impl PartialEq for MaskSpec {
    fn eq(&self, other: &Self) -> bool {
        self.key_hash == other.key_hash && self.mode == other.mode && self.ids == other.ids
    }
}

impl Eq for MaskSpec {}

impl Hash for MaskSpec {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.key_hash);
    }
}

/// Vocabulary-length bit vector, packed little-endian: token `i` is bit
/// `i % 8` of byte `i / 8`. Padding bits in the last byte are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    bytes: Vec<u8>,
    len: usize,
}

impl TokenMask {
    pub fn zeros(len: usize) -> Self {
        TokenMask {
            bytes: vec![0; len.div_ceil(8)],
            len,
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut m = TokenMask {
            bytes: vec![0xff; len.div_ceil(8)],
            len,
        };
        if !len.is_multiple_of(8) {
            *m.bytes.last_mut().unwrap() = (1u8 << (len % 8)) - 1;
        }
        m
    }

    /// Builds the mask for `spec` without any caching.
    pub fn from_spec(spec: &MaskSpec, len: usize) -> Result<Self, MaskError> {
        if let Some(id) = spec.ids.iter().find(|id| *id as usize >= len) {
            return Err(MaskError::OutOfRange { id, size: len });
        }
        Ok(match spec.mode {
            MaskMode::Allow => {
                if spec.ids.is_empty() {
                    return Err(MaskError::EmptyAllow);
                }
                let mut m = TokenMask::zeros(len);
                spec.ids.iter().for_each(|id| m.set(id, true));
                m
            }
            MaskMode::Deny => {
                let mut m = TokenMask::ones(len);
                spec.ids.iter().for_each(|id| m.set(id, false));
                m
            }
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, id: TokenId) -> bool {
        let i = id as usize;
        i < self.len && self.bytes[i / 8] & (1 << (i % 8)) != 0
    }

    pub fn set(&mut self, id: TokenId, on: bool) {
        let i = id as usize;
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        if on {
            self.bytes[i / 8] |= 1 << (i % 8);
        } else {
            self.bytes[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.len as TokenId).filter(|id| self.get(*id))
    }

    /// Packed export, `ceil(len / 8)` bytes.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn from_bytes(bytes: Vec<u8>, len: usize) -> Option<Self> {
        (bytes.len() == len.div_ceil(8)).then_some(TokenMask { bytes, len })
    }

    /// Bit string, token 0 first.
    pub fn to_bit_string(&self) -> String {
        (0..self.len as TokenId).map(|i| if self.get(i) { '1' } else { '0' }).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub hits: u64,
    pub misses: u64,
    pub constructions: u64,
    pub evictions: u64,
    pub entries: u64,
}

impl CacheCounters {
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }

    pub fn since(&self, earlier: &CacheCounters) -> CacheCounters {
        CacheCounters {
            hits: self.hits - earlier.hits,
            misses: self.misses - earlier.misses,
            constructions: self.constructions - earlier.constructions,
            evictions: self.evictions - earlier.evictions,
            entries: self.entries,
        }
    }
}

/// Process-wide LRU of materialized masks keyed only by spec content.
///
/// Construction happens outside the lock; two threads racing on the same
/// spec both build it and the second insert replaces an identical mask.
pub struct MaskCache {
    vocab_size: usize,
    entries: Mutex<LruCache<MaskSpec, Arc<TokenMask>>>,
    hits: AtomicU64,
    misses: AtomicU64,
    constructions: AtomicU64,
    evictions: AtomicU64,
}

impl MaskCache {
    pub fn new(vocab_size: usize) -> Self {
        Self::with_capacity(vocab_size, DEFAULT_CAPACITY)
    }

    pub fn with_capacity(vocab_size: usize, capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).unwrap();
        MaskCache {
            vocab_size,
            entries: Mutex::new(LruCache::new(cap)),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            constructions: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn materialize(&self, spec: &MaskSpec) -> Result<Arc<TokenMask>, MaskError> {
        if let Some(mask) = self.entries.lock().unwrap().get(spec) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(mask));
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let mask = Arc::new(TokenMask::from_spec(spec, self.vocab_size)?);
        self.constructions.fetch_add(1, Ordering::Relaxed);
        let mut entries = self.entries.lock().unwrap();
        if let Some((old_key, _)) = entries.push(spec.clone(), Arc::clone(&mask)) {
            if old_key != *spec {
                self.evictions.fetch_add(1, Ordering::Relaxed);
            }
        }
        Ok(mask)
    }

    pub fn report(&self) -> CacheCounters {
        CacheCounters {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            constructions: self.constructions.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            entries: self.entries.lock().unwrap().len() as u64,
        }
    }

    pub fn clear(&self) {
        self.entries.lock().unwrap().clear();
    }
}

impl std::fmt::Debug for MaskCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MaskCache")
            .field("vocab_size", &self.vocab_size)
            .field("counters", &self.report())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mode: MaskMode, ids: &[TokenId]) -> MaskSpec {
        MaskSpec::new(mode, ids.iter().copied().collect())
    }

    #[test]
    fn allow_and_deny_bits() {
        let cache = MaskCache::new(5);
        assert_eq!(cache.materialize(&spec(MaskMode::Allow, &[0, 1])).unwrap().to_bit_string(), "11000");
        assert_eq!(cache.materialize(&spec(MaskMode::Deny, &[4])).unwrap().to_bit_string(), "11110");
    }

    #[test]
    fn packed_layout_is_lsb_first() {
        let m = TokenMask::from_spec(&spec(MaskMode::Allow, &[5, 9]), 10).unwrap();
        assert_eq!(m.as_bytes(), &[0b0010_0000, 0b0000_0010]);
        let d = TokenMask::from_spec(&spec(MaskMode::Deny, &[]), 10).unwrap();
        assert_eq!(d.as_bytes(), &[0xff, 0b11]);
        assert_eq!(d.count_ones(), 10);
    }

    #[test]
    fn out_of_range_and_empty_allow() {
        let cache = MaskCache::new(5);
        assert_eq!(
            cache.materialize(&spec(MaskMode::Allow, &[7])),
            Err(MaskError::OutOfRange { id: 7, size: 5 })
        );
        assert_eq!(cache.materialize(&spec(MaskMode::Allow, &[])), Err(MaskError::EmptyAllow));
    }

    #[test]
    fn counters() {
        let cache = MaskCache::with_capacity(8, 2);
        assert_eq!(cache.report(), CacheCounters::default());
        for ids in [[0], [1]] {
            cache.materialize(&spec(MaskMode::Allow, &ids)).unwrap();
        }
        let r = cache.report();
        assert_eq!((r.misses, r.constructions, r.hits, r.evictions), (2, 2, 0, 0));
        cache.materialize(&spec(MaskMode::Allow, &[1])).unwrap();
        assert_eq!(cache.report().hits, 1);
        cache.materialize(&spec(MaskMode::Allow, &[2])).unwrap();
        let r = cache.report();
        assert_eq!((r.misses, r.evictions, r.entries), (3, 1, 2));
        // [0] was least recently used and is gone
        cache.materialize(&spec(MaskMode::Allow, &[0])).unwrap();
        assert_eq!(cache.report().misses, 4);
    }

    #[test]
    fn mode_is_part_of_key() {
        let cache = MaskCache::new(4);
        let a = cache.materialize(&spec(MaskMode::Allow, &[1])).unwrap();
        let d = cache.materialize(&spec(MaskMode::Deny, &[1])).unwrap();
        assert_ne!(a, d);
        assert_eq!(cache.report().misses, 2);
    }
}
