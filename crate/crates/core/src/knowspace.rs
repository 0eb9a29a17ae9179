//! The 3D expert-knowledge space.
//!
//! A slide's three binary codes are converted to decimals and read as a
//! coordinate. Each subtype occupies the coordinates of its expanded
//! knowledge rows; the predicted subtype is the one whose nearest point
//! minimizes the Euclidean distance, unless a shortcut rule fires first.
//!
//! Distances are compared as exact integer squared distances so the argmin
//! never depends on floating-point rounding; the square root is taken only
//! for reporting.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, KnowledgePoint, Scale, ShortcutRule};
use crate::ensemble::SlideCode;
use crate::error::{CodebookError, DataError, KnowspaceError};

/// Classification outcome for one slide, carrying everything a diagnosis
/// report needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub slide_id: String,
    pub predicted: String,
    pub per_subtype_min_distance: BTreeMap<String, f64>,
    pub projected_coord: [u64; 3],
    pub per_scale_features: BTreeMap<u8, Vec<String>>,
    pub via_shortcut: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub shortcut_rule: Option<ShortcutRule>,
    pub tie: bool,
}

/// Project a slide's codes into the knowledge space: one decimal per scale.
pub fn project_slide(code: &SlideCode, cb: &Codebook) -> Result<[u64; 3], KnowspaceError> {
    let mut coord = [0u64; 3];
    for scale in Scale::ALL {
        let c = code.code(scale);
        let expected = cb.feature_count(scale);
        if c.bits.len() != expected {
            return Err(CodebookError::CodeLengthMismatch {
                scale: scale.number(),
                expected,
                got: c.bits.len(),
            }
            .into());
        }
        coord[scale.axis()] = cb.encode_code(c);
    }
    Ok(coord)
}

fn squared_distance(a: [u64; 3], b: [u64; 3]) -> u128 {
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| {
            let d = x.abs_diff(y) as u128;
            d * d
        })
        .sum()
}

/// Euclidean distance between two coordinates.
pub fn distance(a: [u64; 3], b: [u64; 3]) -> f64 {
    (squared_distance(a, b) as f64).sqrt()
}

struct Space<'a> {
    cb: &'a Codebook,
    points: Vec<(String, Vec<[u64; 3]>)>,
}

impl<'a> Space<'a> {
    fn new(cb: &'a Codebook) -> Result<Self, KnowspaceError> {
        let mut points = Vec::with_capacity(cb.subtypes().len());
        for subtype in cb.subtypes() {
            let coords = cb
                .expand_knowledge_points(subtype)?
                .into_iter()
                .map(|p| p.coord)
                .collect();
            points.push((subtype.clone(), coords));
        }
        Ok(Space { cb, points })
    }

    fn classify(&self, code: &SlideCode) -> Result<Diagnosis, KnowspaceError> {
        let coord = project_slide(code, self.cb)?;

        // Minimum squared distance per subtype, in canonical order.
        let mut minima: Vec<(&str, u128)> = Vec::with_capacity(self.points.len());
        for (subtype, coords) in &self.points {
            let min = coords
                .iter()
                .map(|&p| squared_distance(coord, p))
                .min()
                .expect("expansion yields at least one point");
            minima.push((subtype, min));
        }
        let (best_subtype, best) = minima
            .iter()
            .copied()
            .min_by_key(|&(_, d)| d)
            .expect("codebook has subtypes");
        let tie = minima.iter().filter(|&&(_, d)| d == best).count() >= 2;

        // A shortcut rule overrides the metric but the distances are still
        // reported for transparency.
        let mut predicted = best_subtype.to_owned();
        let mut via_shortcut = false;
        let mut fired_rule = None;
        for rule in self.cb.shortcut_rules() {
            let schema = self.cb.schema(rule.scale);
            let idx = schema
                .feature_index(&rule.feature)
                .expect("validated at parse time");
            if code.code(rule.scale).bits[idx] {
                predicted = rule.subtype.clone();
                via_shortcut = true;
                fired_rule = Some(rule.clone());
                break;
            }
        }

        let per_subtype_min_distance = minima
            .iter()
            .map(|&(s, d)| (s.to_owned(), (d as f64).sqrt()))
            .collect();
        let mut per_scale_features = BTreeMap::new();
        for scale in Scale::ALL {
            per_scale_features.insert(
                scale.number(),
                self.cb.present_features(code.code(scale)).map_err(KnowspaceError::from)?,
            );
        }

        Ok(Diagnosis {
            slide_id: code.slide_id.clone(),
            predicted,
            per_subtype_min_distance,
            projected_coord: coord,
            per_scale_features,
            via_shortcut,
            shortcut_rule: fired_rule,
            tie,
        })
    }
}

/// Classify one slide code against a codebook.
pub fn classify(code: &SlideCode, cb: &Codebook) -> Result<Diagnosis, KnowspaceError> {
    Space::new(cb)?.classify(code)
}

/// Classify many slide codes. The knowledge points are expanded once, so the
/// cost is linear in the number of slides; output order matches input order.
pub fn classify_batch(codes: &[SlideCode], cb: &Codebook) -> Result<Vec<Diagnosis>, KnowspaceError> {
    let space = Space::new(cb)?;
    codes
        .iter()
        .map(|code| {
            space.classify(code).map_err(|source| KnowspaceError::Slide {
                slide_id: code.slide_id.clone(),
                source: Box::new(source),
            })
        })
        .collect()
}

/// One row of the knowledge-space export: either an expanded knowledge point
/// or a classified slide.
#[derive(Debug, Clone, PartialEq)]
pub enum SpaceRow {
    Knowledge(KnowledgePoint),
    Prediction { diagnosis: Diagnosis, true_label: Option<String> },
}

/// Write the knowledge space and any classified slides as CSV for external
/// 3D plotting.
pub fn export_space<W: Write>(
    mut writer: W,
    cb: &Codebook,
    predictions: &[(Diagnosis, Option<String>)],
) -> Result<(), DataError> {
    writeln!(
        writer,
        "kind,slide_id,subtype,x,y,z,predicted,true_label,min_distance,via_shortcut"
    )?;
    for subtype in cb.subtypes() {
        for point in cb
            .expand_knowledge_points(subtype)
            .expect("subtype comes from the codebook")
        {
            writeln!(
                writer,
                "knowledge,,{},{},{},{},,,,",
                point.subtype, point.coord[0], point.coord[1], point.coord[2]
            )?;
        }
    }
    for (diag, true_label) in predictions {
        let min = diag
            .per_subtype_min_distance
            .get(&diag.predicted)
            .copied()
            .unwrap_or(f64::NAN);
        writeln!(
            writer,
            "prediction,{},,{},{},{},{},{},{},{}",
            diag.slide_id,
            diag.projected_coord[0],
            diag.projected_coord[1],
            diag.projected_coord[2],
            diag.predicted,
            true_label.as_deref().unwrap_or(""),
            min,
            diag.via_shortcut
        )?;
    }
    Ok(())
}

/// Read diagnoses back from JSON lines.
pub fn read_diagnoses<R: std::io::BufRead>(reader: R) -> Result<Vec<Diagnosis>, DataError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let diag: Diagnosis = serde_json::from_str(&line)
            .map_err(|source| DataError::Json { line: idx + 1, source })?;
        out.push(diag);
    }
    Ok(out)
}

/// Write diagnoses as JSON lines with a stable field order.
pub fn write_diagnoses<W: Write>(mut writer: W, diagnoses: &[Diagnosis]) -> Result<(), DataError> {
    for d in diagnoses {
        serde_json::to_writer(&mut writer, d)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
