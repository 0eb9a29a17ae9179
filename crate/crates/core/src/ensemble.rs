//! Bagging ensemble: turn continuous bag-level feature probabilities into one
//! discrete binary code per slide and scale.
//!
//! A bag's probability vector is first thresholded (strictly greater than the
//! label threshold `v`), then the slide's bags vote: a feature bit is set iff
//! strictly more than half of the bags set it, so an exact half split stays 0.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::codebook::{BinaryCode, Scale};
use crate::error::{DataError, EnsembleError};

/// Per-bag, per-scale feature probabilities produced by an embedding model
/// (or supplied by an external one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagPrediction {
    pub slide_id: String,
    pub scale: Scale,
    pub bag_id: u32,
    pub probs: Vec<f64>,
}

impl BagPrediction {
    /// Construct with validation: probabilities must be finite and in [0, 1].
    /// NaNs are rejected here rather than silently treated as 0.
    pub fn new(
        slide_id: String,
        scale: Scale,
        bag_id: u32,
        probs: Vec<f64>,
    ) -> Result<Self, EnsembleError> {
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(EnsembleError::InvalidProbability { index, value });
            }
        }
        Ok(BagPrediction { slide_id, scale, bag_id, probs })
    }
}

/// A slide's discrete feature codes, one per scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideCode {
    pub slide_id: String,
    codes: [BinaryCode; 3],
}

impl SlideCode {
    /// The three codes must cover scales 1, 2 and 3 exactly once, in order.
    pub fn new(slide_id: String, codes: [BinaryCode; 3]) -> Result<Self, EnsembleError> {
        for (axis, code) in codes.iter().enumerate() {
            if code.scale.axis() != axis {
                return Err(EnsembleError::MixedScales(
                    slide_id.clone(),
                    Scale::ALL[axis],
                    code.scale,
                ));
            }
        }
        Ok(SlideCode { slide_id, codes })
    }

    pub fn code(&self, scale: Scale) -> &BinaryCode {
        &self.codes[scale.axis()]
    }

    pub fn codes(&self) -> &[BinaryCode; 3] {
        &self.codes
    }
}

/// Label threshold per scale; defaults to 0.5 everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds([f64; 3]);

impl Thresholds {
    pub fn uniform(v: f64) -> Result<Self, EnsembleError> {
        check_threshold(v)?;
        Ok(Thresholds([v; 3]))
    }

    pub fn per_scale(values: [f64; 3]) -> Result<Self, EnsembleError> {
        for v in values {
            check_threshold(v)?;
        }
        Ok(Thresholds(values))
    }

    pub fn get(&self, scale: Scale) -> f64 {
        self.0[scale.axis()]
    }

    pub fn set(&mut self, scale: Scale, v: f64) -> Result<(), EnsembleError> {
        check_threshold(v)?;
        self.0[scale.axis()] = v;
        Ok(())
    }

    pub fn values(&self) -> [f64; 3] {
        self.0
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds([0.5; 3])
    }
}

fn check_threshold(v: f64) -> Result<(), EnsembleError> {
    if v.is_finite() && v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(EnsembleError::InvalidThreshold(v))
    }
}

/// Threshold one bag's probabilities: bit i is set iff `probs[i] > v`
/// (strictly — a probability equal to `v` yields 0).
pub fn binarize_bag(pred: &BagPrediction, v: f64) -> Result<BinaryCode, EnsembleError> {
    check_threshold(v)?;
    Ok(BinaryCode::new(
        pred.scale,
        pred.probs.iter().map(|&p| p > v).collect(),
    ))
}

/// Majority vote over one slide's bags at one scale: bit i is set iff the
/// number of bags whose probability exceeds `v` is strictly greater than
/// half the bag count. An exact tie at B/2 therefore yields 0.
pub fn vote_slide(preds: &[BagPrediction], v: f64) -> Result<BinaryCode, EnsembleError> {
    check_threshold(v)?;
    let first = preds.first().ok_or(EnsembleError::EmptyVote)?;
    for p in preds {
        if p.slide_id != first.slide_id {
            return Err(EnsembleError::MixedSlides(first.slide_id.clone(), p.slide_id.clone()));
        }
        if p.scale != first.scale {
            return Err(EnsembleError::MixedScales(first.slide_id.clone(), first.scale, p.scale));
        }
        if p.probs.len() != first.probs.len() {
            return Err(EnsembleError::RaggedProbs(first.probs.len(), p.probs.len()));
        }
    }

    let n_features = first.probs.len();
    let bag_count = preds.len();
    let bits = (0..n_features)
        .map(|i| {
            let passing = preds.iter().filter(|p| p.probs[i] > v).count();
            2 * passing > bag_count
        })
        .collect();
    Ok(BinaryCode::new(first.scale, bits))
}

/// Group bag predictions by slide, vote each scale, and return slide codes
/// sorted by slide id. Every slide must be covered at all three scales.
pub fn collect_slide_codes(
    preds: &[BagPrediction],
    thresholds: &Thresholds,
) -> Result<Vec<SlideCode>, EnsembleError> {
    let mut by_slide: BTreeMap<&str, [Vec<&BagPrediction>; 3]> = BTreeMap::new();
    for p in preds {
        by_slide.entry(&p.slide_id).or_default()[p.scale.axis()].push(p);
    }

    let mut out = Vec::with_capacity(by_slide.len());
    for (slide_id, per_scale) in by_slide {
        let mut codes = Vec::with_capacity(3);
        for (axis, bags) in per_scale.iter().enumerate() {
            let scale = Scale::ALL[axis];
            if bags.is_empty() {
                return Err(EnsembleError::MissingScale { slide_id: slide_id.to_owned(), scale });
            }
            let owned: Vec<BagPrediction> = bags.iter().map(|&b| b.clone()).collect();
            let code = vote_slide(&owned, thresholds.get(scale)).map_err(|source| {
                EnsembleError::Slide { slide_id: slide_id.to_owned(), source: Box::new(source) }
            })?;
            codes.push(code);
        }
        let codes: [BinaryCode; 3] = codes.try_into().expect("three scales");
        out.push(SlideCode::new(slide_id.to_owned(), codes)?);
    }
    Ok(out)
}

/// Read bag predictions from JSON lines (`{"slide_id","scale","bag_id","probs"}`).
/// This file is the plug-in point for an externally trained feature extractor.
pub fn read_bag_predictions<R: BufRead>(reader: R) -> Result<Vec<BagPrediction>, DataError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: BagPrediction = serde_json::from_str(&line)
            .map_err(|source| DataError::Json { line: idx + 1, source })?;
        let pred = BagPrediction::new(raw.slide_id, raw.scale, raw.bag_id, raw.probs)
            .map_err(|e| DataError::Invalid { line: idx + 1, msg: e.to_string() })?;
        out.push(pred);
    }
    Ok(out)
}

pub fn write_bag_predictions<W: Write>(
    mut writer: W,
    preds: &[BagPrediction],
) -> Result<(), DataError> {
    for p in preds {
        serde_json::to_writer(&mut writer, p)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
