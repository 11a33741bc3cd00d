//! Stereo observations, 256-bit binary descriptors, and the matching filters
//! applied to them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{Vec2, Vec3};

pub const DESCRIPTOR_BITS: usize = 256;
const WORDS: usize = DESCRIPTOR_BITS / 64;

/// Fixed-width binary descriptor compared by Hamming distance.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct BinaryDescriptor([u64; WORDS]);

impl BinaryDescriptor {
    pub fn from_words(words: [u64; WORDS]) -> Self {
        Self(words)
    }

    pub fn words(&self) -> &[u64; WORDS] {
        &self.0
    }

    pub fn distance(&self, other: &Self) -> u32 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| (a ^ b).count_ones()).sum()
    }

    pub fn bit(&self, index: usize) -> bool {
        (self.0[index / 64] >> (index % 64)) & 1 == 1
    }

    pub fn flip(&mut self, index: usize) {
        self.0[index / 64] ^= 1 << (index % 64);
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|w| format!("{w:016x}")).collect()
    }
}

impl fmt::Debug for BinaryDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryDescriptor({})", self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("descriptor must be 64 hex characters, got {0:?}")]
pub struct DescriptorParseError(pub String);

impl FromStr for BinaryDescriptor {
    type Err = DescriptorParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != DESCRIPTOR_BITS / 4 || !s.is_ascii() {
            return Err(DescriptorParseError(s.to_string()));
        }
        let mut words = [0u64; WORDS];
        for (i, w) in words.iter_mut().enumerate() {
            *w = u64::from_str_radix(&s[i * 16..(i + 1) * 16], 16)
                .map_err(|_| DescriptorParseError(s.to_string()))?;
        }
        Ok(Self(words))
    }
}

impl Serialize for BinaryDescriptor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for BinaryDescriptor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Stereo keypoint: left-image pixel plus disparity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointObservation {
    pub u: f64,
    pub v: f64,
    pub disparity: f64,
    pub descriptor: BinaryDescriptor,
    /// Ground-truth landmark id from the simulator. Only test oracles read it.
    pub landmark_hint: Option<u64>,
}

impl PointObservation {
    pub fn pixel(&self) -> Vec2 {
        Vec2::new(self.u, self.v)
    }
}

/// Stereo line segment: left-image endpoints and their disparities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineObservation {
    pub p: Vec2,
    pub q: Vec2,
    pub disp_p: f64,
    pub disp_q: f64,
    pub descriptor: BinaryDescriptor,
    pub landmark_hint: Option<u64>,
}

impl LineObservation {
    pub fn length(&self) -> f64 {
        (self.q - self.p).norm()
    }

    pub fn midpoint(&self) -> Vec2 {
        (self.p + self.q) * 0.5
    }

    /// Undirected orientation in `[0, π)`.
    pub fn orientation(&self) -> f64 {
        let d = self.q - self.p;
        d.y.atan2(d.x).rem_euclid(std::f64::consts::PI)
    }

    pub fn line_coeffs(&self) -> Result<Vec3, FeatureError> {
        infinite_line_coeffs(&self.p, &self.q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum FeatureError {
    #[error("segment endpoints coincide")]
    DegenerateSegment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: u32,
}

/// One-to-one correspondences between two feature lists.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchSet {
    matches: Vec<Match>,
}

impl MatchSet {
    pub fn new(mut matches: Vec<Match>) -> Self {
        matches.sort_by_key(|m| (m.index_a, m.index_b));
        Self { matches }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Match> {
        self.matches.iter()
    }

    pub fn as_slice(&self) -> &[Match] {
        &self.matches
    }

    pub fn swapped(&self) -> MatchSet {
        MatchSet::new(
            self.matches
                .iter()
                .map(|m| Match { index_a: m.index_b, index_b: m.index_a, distance: m.distance })
                .collect(),
        )
    }

    pub fn is_injective(&self) -> bool {
        let mut a: Vec<_> = self.matches.iter().map(|m| m.index_a).collect();
        let mut b: Vec<_> = self.matches.iter().map(|m| m.index_b).collect();
        a.sort_unstable();
        b.sort_unstable();
        let n = a.len();
        a.dedup();
        b.dedup();
        a.len() == n && b.len() == n
    }
}

impl<'a> IntoIterator for &'a MatchSet {
    type Item = &'a Match;
    type IntoIter = std::slice::Iter<'a, Match>;

    fn into_iter(self) -> Self::IntoIter {
        self.matches.iter()
    }
}

/// Default ratio between second-best and best descriptor distance.
pub const DEFAULT_MATCH_RATIO: f64 = 2.0;

#[derive(Clone, Copy)]
struct Nearest {
    index: usize,
    best: u32,
    second: u32,
}

impl Nearest {
    fn empty() -> Self {
        Self { index: usize::MAX, best: u32::MAX, second: u32::MAX }
    }

    fn offer(&mut self, index: usize, d: u32) {
        if d < self.best {
            self.second = self.best;
            self.best = d;
            self.index = index;
        } else if d < self.second {
            self.second = d;
        }
    }

    fn distinctive(&self, ratio: f64) -> bool {
        self.second == u32::MAX || (self.best as f64) * ratio < self.second as f64
    }
}

/// Mutual-best descriptor matching with a ratio test applied on both sides.
///
/// A pair `(i, j)` survives when `j` is the nearest neighbour of `i`, `i` is the
/// nearest neighbour of `j`, and on both sides `best · ratio < second_best`.
/// Running the test symmetrically makes the result independent of argument order.
pub fn match_descriptors(a: &[BinaryDescriptor], b: &[BinaryDescriptor], ratio: f64) -> MatchSet {
    if a.is_empty() || b.is_empty() {
        return MatchSet::default();
    }
    let mut rows = vec![Nearest::empty(); a.len()];
    let mut cols = vec![Nearest::empty(); b.len()];
    for (i, da) in a.iter().enumerate() {
        for (j, db) in b.iter().enumerate() {
            let d = da.distance(db);
            rows[i].offer(j, d);
            cols[j].offer(i, d);
        }
    }
    let matches = rows
        .iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let col = &cols[row.index];
            (col.index == i && row.distinctive(ratio) && col.distinctive(ratio))
                .then_some(Match { index_a: i, index_b: row.index, distance: row.best })
        })
        .collect();
    MatchSet::new(matches)
}

/// Tolerances of the geometric line-match filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFilter {
    /// Maximum orientation difference (radians).
    pub angle_tol: f64,
    /// Accepted length ratio is `[1 − length_tol, 1 / (1 − length_tol)]`.
    pub length_tol: f64,
    /// Maximum disparity difference of corresponding endpoints (pixels).
    pub disp_tol: f64,
}

impl Default for LineFilter {
    fn default() -> Self {
        Self { angle_tol: 10f64.to_radians(), length_tol: 0.25, disp_tol: 1.5 }
    }
}

impl LineFilter {
    pub fn accepts(&self, a: &LineObservation, b: &LineObservation) -> bool {
        let mut dtheta = (a.orientation() - b.orientation()).abs();
        dtheta = dtheta.min(std::f64::consts::PI - dtheta);
        if dtheta > self.angle_tol {
            return false;
        }
        let ratio = b.length() / a.length();
        let lo = 1.0 - self.length_tol;
        if !(ratio >= lo && ratio <= 1.0 / lo) {
            return false;
        }
        (a.disp_p - b.disp_p).abs() <= self.disp_tol && (a.disp_q - b.disp_q).abs() <= self.disp_tol
    }
}

/// Removes line matches whose segments disagree in orientation, length, or endpoint disparity.
pub fn filter_line_matches(
    matches: &MatchSet,
    obs_a: &[LineObservation],
    obs_b: &[LineObservation],
    filter: &LineFilter,
) -> MatchSet {
    MatchSet::new(
        matches
            .iter()
            .filter(|m| filter.accepts(&obs_a[m.index_a], &obs_b[m.index_b]))
            .copied()
            .collect(),
    )
}

/// Homogeneous line through two pixels, scaled so that `l₁² + l₂² = 1`.
///
/// With this scaling `l · (x, y, 1)` is the signed pixel distance to the line.
pub fn infinite_line_coeffs(p: &Vec2, q: &Vec2) -> Result<Vec3, FeatureError> {
    let l = Vec3::new(p.x, p.y, 1.0).cross(&Vec3::new(q.x, q.y, 1.0));
    let n = (l.x * l.x + l.y * l.y).sqrt();
    if !(n > 1e-12) {
        return Err(FeatureError::DegenerateSegment);
    }
    Ok(l / n)
}
