//! Hashing vocabulary, tf-idf word vectors, and the two-database similarity store.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{BinaryDescriptor, DESCRIPTOR_BITS};
use crate::lie::Vec2;
use crate::map::KeyFrameId;

use super::LoopError;

/// Raw word counts of one image.
pub type WordBag = BTreeMap<u32, u32>;

/// Sparse tf-idf weights, L1-normalized.
pub type WordVector = BTreeMap<u32, f64>;

pub const DEFAULT_VOCABULARY_BITS: u32 = 10;
pub const DEFAULT_VOCABULARY_SEED: u64 = 0x5eed_b0a7;

/// Maps descriptors to words with a fixed seeded projection: word bit `k` is
/// descriptor bit `bits[k]`, the positions drawn without replacement by a
/// seeded ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    bits: Vec<usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new(DEFAULT_VOCABULARY_BITS, DEFAULT_VOCABULARY_SEED)
    }
}

impl Vocabulary {
    /// A vocabulary of `2^bits` words, `bits` clamped to `1..=24`.
    pub fn new(bits: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits = sample(&mut rng, DESCRIPTOR_BITS, bits.clamp(1, 24) as usize).into_vec();
        Self { bits }
    }

    pub fn size(&self) -> usize {
        1 << self.bits.len()
    }

    pub fn word(&self, d: &BinaryDescriptor) -> u32 {
        self.bits
            .iter()
            .enumerate()
            .fold(0u32, |w, (k, &b)| if d.bit(b) { w | (1 << k) } else { w })
    }

    pub fn bag<'a>(&self, descriptors: impl IntoIterator<Item = &'a BinaryDescriptor>) -> WordBag {
        let mut bag = WordBag::new();
        for d in descriptors {
            *bag.entry(self.word(d)).or_insert(0) += 1;
        }
        bag
    }
}

/// Inverse document frequencies over the stored images of one feature type.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WordIndex {
    bags: BTreeMap<KeyFrameId, WordBag>,
    inverted: BTreeMap<u32, BTreeSet<KeyFrameId>>,
}

impl WordIndex {
    pub fn insert(&mut self, kf: KeyFrameId, bag: WordBag) {
        self.remove(kf);
        for w in bag.keys() {
            self.inverted.entry(*w).or_default().insert(kf);
        }
        self.bags.insert(kf, bag);
    }

    pub fn remove(&mut self, kf: KeyFrameId) {
        if let Some(old) = self.bags.remove(&kf) {
            for w in old.keys() {
                if let Some(set) = self.inverted.get_mut(w) {
                    set.remove(&kf);
                    if set.is_empty() {
                        self.inverted.remove(w);
                    }
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn bag(&self, kf: KeyFrameId) -> Option<&WordBag> {
        self.bags.get(&kf)
    }

    /// Smoothed idf `ln((1 + N) / (1 + n_w)) + 1`, positive for every word.
    pub fn idf(&self, word: u32) -> f64 {
        let n = self.bags.len() as f64;
        let nw = self.inverted.get(&word).map_or(0, BTreeSet::len) as f64;
        ((1.0 + n) / (1.0 + nw)).ln() + 1.0
    }

    pub fn word_vector(&self, bag: &WordBag) -> WordVector {
        word_vector(bag, |w| self.idf(w))
    }

    /// Keyframes sharing at least one word with `bag`.
    pub fn candidates(&self, bag: &WordBag) -> BTreeSet<KeyFrameId> {
        bag.keys().filter_map(|w| self.inverted.get(w)).flatten().copied().collect()
    }

    /// Checks that the inverted index agrees with the stored bags.
    pub fn is_consistent(&self) -> bool {
        let mut rebuilt: BTreeMap<u32, BTreeSet<KeyFrameId>> = BTreeMap::new();
        for (kf, bag) in &self.bags {
            for w in bag.keys() {
                rebuilt.entry(*w).or_default().insert(*kf);
            }
        }
        rebuilt == self.inverted
    }
}

/// tf-idf weighting of a bag followed by L1 normalization.
pub fn word_vector(bag: &WordBag, idf: impl Fn(u32) -> f64) -> WordVector {
    let total: u32 = bag.values().sum();
    if total == 0 {
        return WordVector::new();
    }
    let raw: WordVector = bag.iter().map(|(w, c)| (*w, *c as f64 / total as f64 * idf(*w))).collect();
    let norm: f64 = raw.values().sum();
    if norm <= 0.0 {
        return WordVector::new();
    }
    raw.into_iter().map(|(w, v)| (w, v / norm)).collect()
}

/// `1 − ½‖a − b‖₁`; zero when either vector is empty.
pub fn similarity(a: &WordVector, b: &WordVector) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut l1 = 0.0;
    for (w, va) in a {
        l1 += (va - b.get(w).copied().unwrap_or(0.0)).abs();
    }
    for (w, vb) in b {
        if !a.contains_key(w) {
            l1 += vb;
        }
    }
    (1.0 - 0.5 * l1).clamp(0.0, 1.0)
}

/// `sqrt(var_x + var_y)` with population variances.
pub fn dispersion(pixels: &[Vec2]) -> f64 {
    if pixels.len() < 2 {
        return 0.0;
    }
    let n = pixels.len() as f64;
    let mean = pixels.iter().sum::<Vec2>() / n;
    let var: f64 = pixels.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / n;
    var.sqrt()
}

/// Point and line similarities fused by feature strength and image dispersion.
pub fn fused_similarity(s_k: f64, s_l: f64, n_k: usize, n_l: usize, d_k: f64, d_l: f64) -> Result<f64, LoopError> {
    if n_k + n_l == 0 {
        return Err(LoopError::NoFeatures);
    }
    let nk = n_k as f64 / (n_k + n_l) as f64;
    let (dk, dl) = if d_k + d_l > 0.0 { (d_k / (d_k + d_l), d_l / (d_k + d_l)) } else { (0.5, 0.5) };
    Ok(0.5 * (nk + dk) * s_k + 0.5 * ((1.0 - nk) + dl) * s_l)
}

/// Per-keyframe summary kept for place recognition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub n_points: usize,
    pub n_lines: usize,
    pub point_dispersion: f64,
    pub line_dispersion: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimilarityDatabase {
    pub points: WordIndex,
    pub lines: WordIndex,
    pub summaries: BTreeMap<KeyFrameId, ImageSummary>,
}

impl SimilarityDatabase {
    pub fn insert(&mut self, kf: KeyFrameId, point_bag: WordBag, line_bag: WordBag, summary: ImageSummary) {
        self.points.insert(kf, point_bag);
        self.lines.insert(kf, line_bag);
        self.summaries.insert(kf, summary);
    }

    pub fn remove(&mut self, kf: KeyFrameId) {
        self.points.remove(kf);
        self.lines.remove(kf);
        self.summaries.remove(&kf);
    }

    pub fn len(&self) -> usize {
        self.summaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.summaries.is_empty()
    }

    pub fn keyframes(&self) -> impl Iterator<Item = KeyFrameId> + '_ {
        self.summaries.keys().copied()
    }

    /// Fused score between two stored keyframes, weighted by `query`'s feature statistics.
    pub fn score(&self, query: KeyFrameId, other: KeyFrameId) -> Result<f64, LoopError> {
        let q = self.summaries.get(&query).ok_or(LoopError::UnknownKeyFrame(query))?;
        let empty = WordBag::new();
        let pv = |kf| self.points.word_vector(self.points.bag(kf).unwrap_or(&empty));
        let lv = |kf| self.lines.word_vector(self.lines.bag(kf).unwrap_or(&empty));
        if !self.summaries.contains_key(&other) {
            return Err(LoopError::UnknownKeyFrame(other));
        }
        let s_k = similarity(&pv(query), &pv(other));
        let s_l = similarity(&lv(query), &lv(other));
        fused_similarity(s_k, s_l, q.n_points, q.n_lines, q.point_dispersion, q.line_dispersion)
    }
}
