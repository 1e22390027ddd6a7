//! Frame-pair scoring, the perceptual admission band, and viewpoint
//! expansion.
//!
//! Pairs whose perceptual distance falls inside the admission band
//! (inclusive on both ends, [0.35, 0.65] by default) anchor multi-view
//! work items. An admitted pair grows to a 4- or 8-view set when a strict
//! majority of the supplied in-between frames validate the pair's QA
//! turns.
//!
//! The default backend is a model-free proxy: one minus the clamped
//! Pearson correlation of 8x8 mean-pooled luminance. Precomputed scores
//! and external validators plug in through [`PerceptualBackend`] and
//! [`ValidatorClient`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ViewError {
    #[error("image dimensions differ: {0}")]
    DimensionMismatch(String),
    #[error("image too small for 8x8 pooling: {width}x{height}")]
    TooSmall { width: u32, height: u32 },
    #[error("backend '{backend}' failed on pair ({a}, {b}): {reason}")]
    BackendFailure { backend: String, a: String, b: String, reason: String },
    #[error("no image data for frame {0}")]
    MissingImage(String),
    #[error("no precomputed score for pair ({a}, {b})")]
    MissingScore { a: String, b: String },
    #[error("validator failed on frame {frame}: {reason}")]
    ValidatorFailure { frame: String, reason: String },
    #[error("pair ({a}, {b}) is not admitted")]
    NotAdmitted { a: String, b: String },
    #[error("expected 0, 2 or 6 interpolated candidates, got {0}")]
    BadCandidateCount(usize),
    #[error("band [{low}, {high}] is not a subrange of [0, 1]")]
    BadBand { low: f64, high: f64 },
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
}

pub type FrameId = String;

/// Grayscale raster in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LumaImage {
    width: u32,
    height: u32,
    pixels: Vec<f64>,
}

impl LumaImage {
    pub fn new(width: u32, height: u32, pixels: Vec<f64>) -> Result<Self, ViewError> {
        if pixels.len() != (width as usize) * (height as usize) {
            return Err(ViewError::DimensionMismatch(format!(
                "{}x{} image with {} pixels",
                width,
                height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }
}

/// A frame identifier with optional pixel data. Backends that look scores
/// up by id do not need the pixels.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: FrameId,
    pub image: Option<LumaImage>,
}

impl Frame {
    pub fn with_image(id: impl Into<FrameId>, image: LumaImage) -> Self {
        Self { id: id.into(), image: Some(image) }
    }

    pub fn id_only(id: impl Into<FrameId>) -> Self {
        Self { id: id.into(), image: None }
    }
}

/// Inclusive perceptual-distance window admitting a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissionBand {
    pub low: f64,
    pub high: f64,
}

impl AdmissionBand {
    pub const DEFAULT_LOW: f64 = 0.35;
    pub const DEFAULT_HIGH: f64 = 0.65;

    pub fn new(low: f64, high: f64) -> Result<Self, ViewError> {
        if !(0.0..=1.0).contains(&low) || !(0.0..=1.0).contains(&high) || low > high {
            return Err(ViewError::BadBand { low, high });
        }
        Ok(Self { low, high })
    }

    /// Both endpoints inclusive.
    pub fn admits(&self, distance: f64) -> bool {
        self.low <= distance && distance <= self.high
    }
}

impl Default for AdmissionBand {
    fn default() -> Self {
        Self { low: Self::DEFAULT_LOW, high: Self::DEFAULT_HIGH }
    }
}

/// A scored unordered frame pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPair {
    pub ref_a: FrameId,
    pub ref_b: FrameId,
    pub distance: f64,
    pub admitted: bool,
}

/// A 2/4/8-view frame group with the votes that built it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSet {
    /// Anchors first, accepted candidates after, in supplied order.
    pub frames: Vec<FrameId>,
    pub anchor_pair: ViewPair,
    /// One vote per interpolated candidate, whether accepted or not.
    pub validation_votes: Vec<(FrameId, bool)>,
}

/// Perceptual distance in [0, 1] between two frames; 0 on identical
/// frames, symmetric.
pub trait PerceptualBackend {
    fn name(&self) -> &str;
    fn distance(&self, a: &Frame, b: &Frame) -> Result<f64, ViewError>;
}

/// Judges whether a QA pair holds on a frame group. The frame list is
/// `[anchor_a, anchor_b, candidate]` when called from expansion.
pub trait ValidatorClient {
    fn validate(&self, question: &str, answer: &str, frames: &[FrameId]) -> Result<bool, ViewError>;
}

/// One minus the clamped Pearson correlation of 8x8 mean-pooled
/// luminance. Deterministic and symmetric; needs no model weights.
pub fn proxy_distance(a: &LumaImage, b: &LumaImage) -> Result<f64, ViewError> {
    if a.width != b.width || a.height != b.height {
        return Err(ViewError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.width < 8 || a.height < 8 {
        return Err(ViewError::TooSmall { width: a.width, height: a.height });
    }
    let pa = pool_8x8(a);
    let pb = pool_8x8(b);
    if pa == pb {
        // exact zero on identical inputs, no correlation rounding
        return Ok(0.0);
    }
    // zero-variance sides that differ get no correlation credit
    let corr = pearson(&pa, &pb).unwrap_or(0.0);
    Ok((1.0 - corr.max(0.0)).clamp(0.0, 1.0))
}

/// Cell means over an 8x8 partition of the raster.
fn pool_8x8(img: &LumaImage) -> Vec<f64> {
    let (w, h) = (img.width as usize, img.height as usize);
    let mut out = Vec::with_capacity(64);
    for cy in 0..8 {
        let v0 = cy * h / 8;
        let v1 = (cy + 1) * h / 8;
        for cx in 0..8 {
            let u0 = cx * w / 8;
            let u1 = (cx + 1) * w / 8;
            let mut sum = 0.0;
            for v in v0..v1 {
                for u in u0..u1 {
                    sum += img.pixels[v * w + u];
                }
            }
            out.push(sum / ((v1 - v0) * (u1 - u0)) as f64);
        }
    }
    out
}

/// Sample Pearson correlation; None when either side has zero variance.
fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

/// The proxy distance as a [`PerceptualBackend`]; frames must carry
/// pixels.
#[derive(Debug, Default)]
pub struct ProxyBackend;

impl PerceptualBackend for ProxyBackend {
    fn name(&self) -> &str {
        "luma-correlation-proxy"
    }

    fn distance(&self, a: &Frame, b: &Frame) -> Result<f64, ViewError> {
        let ia = a.image.as_ref().ok_or_else(|| ViewError::MissingImage(a.id.clone()))?;
        let ib = b.image.as_ref().ok_or_else(|| ViewError::MissingImage(b.id.clone()))?;
        proxy_distance(ia, ib).map_err(|e| ViewError::BackendFailure {
            backend: self.name().into(),
            a: a.id.clone(),
            b: b.id.clone(),
            reason: e.to_string(),
        })
    }
}

/// Precomputed scores keyed by unordered frame pair.
#[derive(Debug, Clone, Default)]
pub struct FileBackend {
    scores: BTreeMap<(FrameId, FrameId), f64>,
}

impl FileBackend {
    pub fn new(triples: impl IntoIterator<Item = (FrameId, FrameId, f64)>) -> Self {
        let mut scores = BTreeMap::new();
        for (a, b, s) in triples {
            scores.insert(Self::key(&a, &b), s);
        }
        Self { scores }
    }

    fn key(a: &str, b: &str) -> (FrameId, FrameId) {
        if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        }
    }

    pub fn frame_ids(&self) -> Vec<FrameId> {
        let mut ids: Vec<FrameId> = self
            .scores
            .keys()
            .flat_map(|(a, b)| [a.clone(), b.clone()])
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

impl PerceptualBackend for FileBackend {
    fn name(&self) -> &str {
        "precomputed-scores"
    }

    fn distance(&self, a: &Frame, b: &Frame) -> Result<f64, ViewError> {
        if a.id == b.id {
            return Ok(0.0);
        }
        self.scores
            .get(&Self::key(&a.id, &b.id))
            .copied()
            .ok_or_else(|| ViewError::MissingScore { a: a.id.clone(), b: b.id.clone() })
    }
}

/// Scores all unordered frame pairs and flags each against the band.
pub fn score_pairs(
    frames: &[Frame],
    backend: &dyn PerceptualBackend,
    band: AdmissionBand,
) -> Result<Vec<ViewPair>, ViewError> {
    if frames.len() < 2 {
        return Err(ViewError::TooFewFrames(frames.len()));
    }
    let mut pairs = Vec::with_capacity(frames.len() * (frames.len() - 1) / 2);
    for i in 0..frames.len() {
        for j in i + 1..frames.len() {
            let distance = backend.distance(&frames[i], &frames[j])?;
            pairs.push(ViewPair {
                ref_a: frames[i].id.clone(),
                ref_b: frames[j].id.clone(),
                distance,
                admitted: band.admits(distance),
            });
        }
    }
    Ok(pairs)
}

/// Stand-in validator: a candidate passes when its perceptual distance to
/// both anchors stays below the threshold (0.65 by default). A proxy for
/// an external QA verifier, not a claim of equivalence; the QA text is
/// ignored.
pub struct DistanceValidator<'a> {
    backend: &'a dyn PerceptualBackend,
    frames: BTreeMap<FrameId, Frame>,
    pub threshold: f64,
}

impl<'a> DistanceValidator<'a> {
    pub const DEFAULT_THRESHOLD: f64 = 0.65;

    pub fn new(backend: &'a dyn PerceptualBackend, frames: impl IntoIterator<Item = Frame>) -> Self {
        let frames = frames.into_iter().map(|f| (f.id.clone(), f)).collect();
        Self { backend, frames, threshold: Self::DEFAULT_THRESHOLD }
    }

    fn frame(&self, id: &str) -> Result<&Frame, ViewError> {
        self.frames.get(id).ok_or_else(|| ViewError::MissingImage(id.to_string()))
    }
}

impl ValidatorClient for DistanceValidator<'_> {
    fn validate(
        &self,
        _question: &str,
        _answer: &str,
        frames: &[FrameId],
    ) -> Result<bool, ViewError> {
        let [a, b, candidate] = frames else {
            return Err(ViewError::ValidatorFailure {
                frame: frames.join(","),
                reason: "expected [anchor_a, anchor_b, candidate]".into(),
            });
        };
        let da = self.backend.distance(self.frame(a)?, self.frame(candidate)?)?;
        let db = self.backend.distance(self.frame(b)?, self.frame(candidate)?)?;
        Ok(da < self.threshold && db < self.threshold)
    }
}

/// Votes each interpolated candidate and grows the pair to a 4/8-view set
/// when strictly more than half the candidates validate every QA turn.
/// With no candidates the set stays 2-view.
pub fn expand_viewpoints(
    pair: &ViewPair,
    candidates: &[FrameId],
    qa_pairs: &[(String, String)],
    validator: &dyn ValidatorClient,
) -> Result<ViewSet, ViewError> {
    if !pair.admitted {
        return Err(ViewError::NotAdmitted { a: pair.ref_a.clone(), b: pair.ref_b.clone() });
    }
    if !matches!(candidates.len(), 0 | 2 | 6) {
        return Err(ViewError::BadCandidateCount(candidates.len()));
    }
    let mut votes = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let group = [pair.ref_a.clone(), pair.ref_b.clone(), candidate.clone()];
        let mut vote = true;
        if qa_pairs.is_empty() {
            vote = validator.validate("", "", &group)?;
        } else {
            for (q, a) in qa_pairs {
                if !validator.validate(q, a, &group)? {
                    vote = false;
                    break;
                }
            }
        }
        votes.push((candidate.clone(), vote));
    }
    let valid = votes.iter().filter(|(_, v)| *v).count();
    let mut frames = vec![pair.ref_a.clone(), pair.ref_b.clone()];
    if !candidates.is_empty() && valid * 2 > candidates.len() {
        frames.extend(candidates.iter().cloned());
    }
    Ok(ViewSet { frames, anchor_pair: pair.clone(), validation_votes: votes })
}
