//! Expert-knowledge codebooks.
//!
//! A codebook describes one disease: the named histological features observed
//! at each of the three magnification scales, and the binary feature
//! combinations ("knowledge rows") that experts associate with each subtype.
//! Codebooks are plain data files so new diseases need no code changes; see
//! [`parse_codebook`] for the format.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::CodebookError;

/// Magnification scale index, restricted to 1, 2 or 3 (10X / 20X / 40X).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Scale(u8);

impl Scale {
    pub const S1: Scale = Scale(1);
    pub const S2: Scale = Scale(2);
    pub const S3: Scale = Scale(3);
    pub const ALL: [Scale; 3] = [Scale::S1, Scale::S2, Scale::S3];

    pub fn new(value: u8) -> Result<Self, CodebookError> {
        if (1..=3).contains(&value) {
            Ok(Scale(value))
        } else {
            Err(CodebookError::InvalidScale(value))
        }
    }

    /// The raw 1-based scale number.
    pub fn number(self) -> u8 {
        self.0
    }

    /// Zero-based index for array storage.
    pub fn axis(self) -> usize {
        (self.0 - 1) as usize
    }
}

impl TryFrom<u8> for Scale {
    type Error = CodebookError;
    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Scale::new(value)
    }
}

impl From<Scale> for u8 {
    fn from(s: Scale) -> u8 {
        s.0
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which end of a written bit string carries the highest place value when the
/// code is read as an integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitOrder {
    /// Feature ID 1 (leftmost) is the most significant bit.
    MsbFirst,
    /// Feature ID 1 (leftmost) is the least significant bit.
    LsbFirst,
}

impl BitOrder {
    fn keyword(self) -> &'static str {
        match self {
            BitOrder::MsbFirst => "msb-first",
            BitOrder::LsbFirst => "lsb-first",
        }
    }
}

/// Ordered feature names for one scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchema {
    pub scale: Scale,
    pub feature_names: Vec<String>,
}

impl ScaleSchema {
    pub fn feature_count(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }
}

/// One expert-knowledge row: a binary feature combination a subtype may
/// present with at one scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeRow {
    pub subtype: String,
    pub scale: Scale,
    pub bits: Vec<bool>,
}

/// A binary feature vector at one scale, e.g. a thresholded prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCode {
    pub scale: Scale,
    pub bits: Vec<bool>,
}

impl BinaryCode {
    pub fn new(scale: Scale, bits: Vec<bool>) -> Self {
        BinaryCode { scale, bits }
    }

    /// Parse a `"0"`/`"1"` string, leftmost character first.
    pub fn from_bit_str(scale: Scale, s: &str) -> Result<Self, CodebookError> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(CodebookError::BadBitChar(other)),
            })
            .collect::<Result<Vec<bool>, _>>()?;
        Ok(BinaryCode { scale, bits })
    }

    pub fn bit_str(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// A deterministic override: when `feature` is present at `scale`, the slide
/// is assigned `subtype` without consulting the distance metric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShortcutRule {
    pub scale: Scale,
    pub feature: String,
    pub subtype: String,
}

/// One point in the 3D knowledge space: the decimal projection of one
/// knowledge-row triple of a subtype.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgePoint {
    pub subtype: String,
    pub coord: [u64; 3],
}

/// A parsed, fully validated expert-knowledge codebook.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codebook {
    disease: String,
    bit_order: BitOrder,
    subtypes: Vec<String>,
    schemas: [ScaleSchema; 3],
    rows: Vec<KnowledgeRow>,
    shortcuts: Vec<ShortcutRule>,
}

impl Codebook {
    /// Assemble and validate a codebook. Every invariant is checked here so a
    /// constructed `Codebook` is always safe to query.
    pub fn new(
        disease: String,
        bit_order: BitOrder,
        subtypes: Vec<String>,
        schemas: [ScaleSchema; 3],
        rows: Vec<KnowledgeRow>,
        shortcuts: Vec<ShortcutRule>,
    ) -> Result<Self, CodebookError> {
        if disease.is_empty() {
            return Err(CodebookError::MissingDisease);
        }
        if subtypes.len() < 2 {
            return Err(CodebookError::TooFewSubtypes(subtypes.len()));
        }
        let mut seen = HashSet::new();
        for s in &subtypes {
            if !seen.insert(s.clone()) {
                return Err(CodebookError::DuplicateSubtype(s.clone()));
            }
        }
        for (axis, schema) in schemas.iter().enumerate() {
            if schema.scale.axis() != axis {
                return Err(CodebookError::ScaleOutOfPlace(schema.scale.number()));
            }
            if schema.feature_names.is_empty() {
                return Err(CodebookError::EmptySchema(schema.scale.number()));
            }
            if schema.feature_names.len() > 32 {
                return Err(CodebookError::SchemaTooWide {
                    scale: schema.scale.number(),
                    count: schema.feature_names.len(),
                });
            }
            let mut names = HashSet::new();
            for name in &schema.feature_names {
                if !names.insert(name.clone()) {
                    return Err(CodebookError::DuplicateFeature {
                        scale: schema.scale.number(),
                        name: name.clone(),
                    });
                }
            }
        }
        let mut row_keys = HashSet::new();
        for (idx, row) in rows.iter().enumerate() {
            if !subtypes.contains(&row.subtype) {
                return Err(CodebookError::UnknownRowSubtype {
                    row: idx + 1,
                    subtype: row.subtype.clone(),
                });
            }
            let expected = schemas[row.scale.axis()].feature_count();
            if row.bits.len() != expected {
                return Err(CodebookError::RowLengthMismatch {
                    row: idx + 1,
                    subtype: row.subtype.clone(),
                    scale: row.scale.number(),
                    expected,
                    got: row.bits.len(),
                });
            }
            if !row_keys.insert((row.subtype.clone(), row.scale, row.bits.clone())) {
                return Err(CodebookError::DuplicateRow {
                    row: idx + 1,
                    subtype: row.subtype.clone(),
                    scale: row.scale.number(),
                    bits: BinaryCode::new(row.scale, row.bits.clone()).bit_str(),
                });
            }
        }
        for rule in &shortcuts {
            if !subtypes.contains(&rule.subtype) {
                return Err(CodebookError::UnknownShortcutSubtype(rule.subtype.clone()));
            }
            if schemas[rule.scale.axis()].feature_index(&rule.feature).is_none() {
                return Err(CodebookError::UnknownShortcutFeature {
                    scale: rule.scale.number(),
                    feature: rule.feature.clone(),
                });
            }
        }

        let cb = Codebook { disease, bit_order, subtypes, schemas, rows, shortcuts };
        cb.check_point_collisions()?;
        Ok(cb)
    }

    /// Distance-0 ties would make the nearest-subtype argmin ill-defined, so
    /// coordinate collisions between expanded points are rejected outright.
    fn check_point_collisions(&self) -> Result<(), CodebookError> {
        let mut seen: HashMap<[u64; 3], String> = HashMap::new();
        for subtype in &self.subtypes {
            for point in self.expand_knowledge_points(subtype)? {
                if let Some(prev) = seen.insert(point.coord, subtype.clone()) {
                    return Err(CodebookError::PointCollision {
                        coord: point.coord,
                        first: prev,
                        second: subtype.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn disease(&self) -> &str {
        &self.disease
    }

    pub fn bit_order(&self) -> BitOrder {
        self.bit_order
    }

    /// Subtype identifiers in canonical (file) order.
    pub fn subtypes(&self) -> &[String] {
        &self.subtypes
    }

    pub fn schema(&self, scale: Scale) -> &ScaleSchema {
        &self.schemas[scale.axis()]
    }

    pub fn feature_count(&self, scale: Scale) -> usize {
        self.schemas[scale.axis()].feature_count()
    }

    pub fn rows(&self) -> &[KnowledgeRow] {
        &self.rows
    }

    pub fn rows_for(&self, subtype: &str, scale: Scale) -> impl Iterator<Item = &KnowledgeRow> {
        let subtype = subtype.to_owned();
        self.rows
            .iter()
            .filter(move |r| r.scale == scale && r.subtype == subtype)
    }

    pub fn shortcut_rules(&self) -> &[ShortcutRule] {
        &self.shortcuts
    }

    /// Convert a binary code to its decimal value under the declared bit
    /// order. Pure and injective for codes of a fixed length.
    pub fn encode_code(&self, code: &BinaryCode) -> u64 {
        encode_bits(&code.bits, self.bit_order)
    }

    /// Feature names present (bit set) in `code`, in schema order.
    pub fn present_features(&self, code: &BinaryCode) -> Result<Vec<String>, CodebookError> {
        let schema = self.schema(code.scale);
        if code.bits.len() != schema.feature_count() {
            return Err(CodebookError::CodeLengthMismatch {
                scale: code.scale.number(),
                expected: schema.feature_count(),
                got: code.bits.len(),
            });
        }
        Ok(schema
            .feature_names
            .iter()
            .zip(&code.bits)
            .filter(|(_, &b)| b)
            .map(|(name, _)| name.clone())
            .collect())
    }

    /// Expand one subtype's knowledge rows into 3D points: the Cartesian
    /// product of its per-scale rows, scale 1 varying slowest. A scale with
    /// no rows contributes a single all-zero code on that axis.
    pub fn expand_knowledge_points(
        &self,
        subtype: &str,
    ) -> Result<Vec<KnowledgePoint>, CodebookError> {
        if !self.subtypes.contains(&subtype.to_owned()) {
            return Err(CodebookError::UnknownSubtype(subtype.to_owned()));
        }
        let per_scale: Vec<Vec<u64>> = Scale::ALL
            .iter()
            .map(|&scale| {
                let values: Vec<u64> = self
                    .rows_for(subtype, scale)
                    .map(|row| encode_bits(&row.bits, self.bit_order))
                    .collect();
                if values.is_empty() {
                    vec![0]
                } else {
                    values
                }
            })
            .collect();

        let mut points =
            Vec::with_capacity(per_scale[0].len() * per_scale[1].len() * per_scale[2].len());
        for &x in &per_scale[0] {
            for &y in &per_scale[1] {
                for &z in &per_scale[2] {
                    points.push(KnowledgePoint { subtype: subtype.to_owned(), coord: [x, y, z] });
                }
            }
        }
        Ok(points)
    }

    /// Render the codebook in the canonical file layout. `parse_codebook`
    /// of the result reproduces the codebook field for field.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("disease {}\n", self.disease));
        out.push_str(&format!("bit-order {}\n", self.bit_order.keyword()));
        out.push_str(&format!("subtypes {}\n", self.subtypes.join(" ")));
        for schema in &self.schemas {
            out.push_str(&format!(
                "scale {} {}\n",
                schema.scale.number(),
                schema.feature_names.join(" ")
            ));
        }
        for row in &self.rows {
            out.push_str(&format!(
                "row {} {} {}\n",
                row.subtype,
                row.scale.number(),
                BinaryCode::new(row.scale, row.bits.clone()).bit_str()
            ));
        }
        for rule in &self.shortcuts {
            out.push_str(&format!(
                "shortcut {} {} {}\n",
                rule.scale.number(),
                rule.feature,
                rule.subtype
            ));
        }
        out
    }
}

/// Decimal value of a bit vector under `order`.
pub fn encode_bits(bits: &[bool], order: BitOrder) -> u64 {
    let n = bits.len();
    bits.iter().enumerate().fold(0u64, |acc, (i, &b)| {
        if !b {
            return acc;
        }
        let shift = match order {
            BitOrder::MsbFirst => n - 1 - i,
            BitOrder::LsbFirst => i,
        };
        acc | (1u64 << shift)
    })
}

struct Tok<'a> {
    text: &'a str,
    line: usize,
    col: usize,
}

fn tokenize(line_no: usize, line: &str) -> Vec<Tok<'_>> {
    let mut toks = Vec::new();
    let mut rest = line;
    let mut offset = 0usize;
    loop {
        let trimmed = rest.trim_start();
        let skipped = rest.len() - trimmed.len();
        offset += skipped;
        if trimmed.is_empty() || trimmed.starts_with('#') {
            break;
        }
        let end = trimmed.find(char::is_whitespace).unwrap_or(trimmed.len());
        toks.push(Tok { text: &trimmed[..end], line: line_no, col: offset + 1 });
        rest = &trimmed[end..];
        offset += end;
    }
    toks
}

/// Parse a codebook file.
///
/// The format is line oriented; `#` starts a comment and blank lines are
/// ignored. Header lines (`disease`, `bit-order`, `subtypes`) come first,
/// followed by one `scale N <names...>` line per scale, any number of
/// `row <subtype> <scale> <bits>` lines, and optional
/// `shortcut <scale> <feature> <subtype>` lines.
pub fn parse_codebook(text: &str) -> Result<Codebook, CodebookError> {
    let mut disease: Option<String> = None;
    let mut bit_order: Option<BitOrder> = None;
    let mut subtypes: Option<Vec<String>> = None;
    let mut schemas: BTreeMap<u8, ScaleSchema> = BTreeMap::new();
    let mut rows: Vec<KnowledgeRow> = Vec::new();
    let mut shortcuts: Vec<ShortcutRule> = Vec::new();

    let syntax = |tok: &Tok<'_>, msg: String| CodebookError::Syntax {
        line: tok.line,
        col: tok.col,
        msg,
    };

    for (idx, raw) in text.lines().enumerate() {
        let toks = tokenize(idx + 1, raw);
        if toks.is_empty() {
            continue;
        }
        let kw = &toks[0];
        let args = &toks[1..];
        match kw.text {
            "disease" => {
                let [name] = args else {
                    return Err(syntax(kw, "disease expects exactly one name".into()));
                };
                disease = Some(name.text.to_owned());
            }
            "bit-order" => {
                let [ord] = args else {
                    return Err(syntax(kw, "bit-order expects one keyword".into()));
                };
                bit_order = Some(match ord.text {
                    "msb-first" => BitOrder::MsbFirst,
                    "lsb-first" => BitOrder::LsbFirst,
                    other => {
                        return Err(syntax(ord, format!("unknown bit order `{other}`")));
                    }
                });
            }
            "subtypes" => {
                if args.is_empty() {
                    return Err(syntax(kw, "subtypes expects at least one name".into()));
                }
                subtypes = Some(args.iter().map(|t| t.text.to_owned()).collect());
            }
            "scale" => {
                let Some((num, names)) = args.split_first() else {
                    return Err(syntax(kw, "scale expects a number and feature names".into()));
                };
                let n: u8 = num
                    .text
                    .parse()
                    .map_err(|_| syntax(num, format!("invalid scale number `{}`", num.text)))?;
                let scale = Scale::new(n)
                    .map_err(|_| syntax(num, format!("scale must be 1, 2 or 3, got {n}")))?;
                if names.is_empty() {
                    return Err(syntax(kw, format!("scale {n} lists no features")));
                }
                if schemas.contains_key(&n) {
                    return Err(syntax(num, format!("scale {n} declared twice")));
                }
                schemas.insert(
                    n,
                    ScaleSchema {
                        scale,
                        feature_names: names.iter().map(|t| t.text.to_owned()).collect(),
                    },
                );
            }
            "row" => {
                let [subtype, scale_tok, bits_tok] = args else {
                    return Err(syntax(kw, "row expects <subtype> <scale> <bits>".into()));
                };
                let n: u8 = scale_tok.text.parse().map_err(|_| {
                    syntax(scale_tok, format!("invalid scale number `{}`", scale_tok.text))
                })?;
                let scale = Scale::new(n)
                    .map_err(|_| syntax(scale_tok, format!("scale must be 1, 2 or 3, got {n}")))?;
                let code = BinaryCode::from_bit_str(scale, bits_tok.text).map_err(|_| {
                    syntax(bits_tok, format!("bit string `{}` may only contain 0/1", bits_tok.text))
                })?;
                rows.push(KnowledgeRow {
                    subtype: subtype.text.to_owned(),
                    scale,
                    bits: code.bits,
                });
            }
            "shortcut" => {
                let [scale_tok, feature, subtype] = args else {
                    return Err(syntax(kw, "shortcut expects <scale> <feature> <subtype>".into()));
                };
                let n: u8 = scale_tok.text.parse().map_err(|_| {
                    syntax(scale_tok, format!("invalid scale number `{}`", scale_tok.text))
                })?;
                let scale = Scale::new(n)
                    .map_err(|_| syntax(scale_tok, format!("scale must be 1, 2 or 3, got {n}")))?;
                shortcuts.push(ShortcutRule {
                    scale,
                    feature: feature.text.to_owned(),
                    subtype: subtype.text.to_owned(),
                });
            }
            other => {
                return Err(syntax(kw, format!("unknown directive `{other}`")));
            }
        }
    }

    let disease = disease.ok_or(CodebookError::MissingDisease)?;
    let bit_order = bit_order.ok_or(CodebookError::MissingBitOrder)?;
    let subtypes = subtypes.ok_or(CodebookError::MissingSubtypes)?;
    let schema_for = |n: u8| {
        schemas
            .get(&n)
            .cloned()
            .ok_or(CodebookError::MissingScale(n))
    };
    let schemas = [schema_for(1)?, schema_for(2)?, schema_for(3)?];

    Codebook::new(disease, bit_order, subtypes, schemas, rows, shortcuts)
}
