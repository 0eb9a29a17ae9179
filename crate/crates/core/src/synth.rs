//! Synthetic dataset generation.
//!
//! Every slide gets a ground-truth subtype and a knowledge-row triple drawn
//! uniformly from the codebook, bag probabilities jittered around the true
//! bits (optionally flipped across 0.5), and instance vectors in which the
//! true bits are linearly recoverable. Everything is a pure function of the
//! seed: per-slide generators are derived from (seed, subtype, index).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{BinaryCode, Codebook, Scale};
use crate::embednet::Bag;
use crate::ensemble::{BagPrediction, SlideCode};
use crate::error::{DataError, SynthError};

/// Strength of the per-feature signal added to instance vectors; the unit
/// noise around it leaves the bits linearly separable.
const FEATURE_SIGNAL: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub slides_per_subtype: usize,
    /// Optional per-subtype overrides for imbalanced datasets; subtypes not
    /// listed fall back to `slides_per_subtype`.
    pub subtype_slide_counts: Option<Vec<(String, usize)>>,
    pub bags_per_slide: usize,
    pub instances_per_bag: usize,
    pub instance_width: usize,
    /// Probability that an emitted bag probability is flipped across 0.5.
    pub flip_noise: f64,
    /// Spread of emitted probabilities around 0 or 1, in [0, 0.5).
    pub prob_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            slides_per_subtype: 50,
            subtype_slide_counts: None,
            bags_per_slide: 5,
            instances_per_bag: 8,
            instance_width: 32,
            flip_noise: 0.0,
            prob_jitter: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, cb: &Codebook) -> Result<(), SynthError> {
        if self.slides_per_subtype == 0 {
            return Err(SynthError::ZeroCount { field: "slides_per_subtype" });
        }
        if self.bags_per_slide == 0 {
            return Err(SynthError::ZeroCount { field: "bags_per_slide" });
        }
        if self.instances_per_bag == 0 {
            return Err(SynthError::ZeroCount { field: "instances_per_bag" });
        }
        if self.instance_width == 0 {
            return Err(SynthError::ZeroCount { field: "instance_width" });
        }
        if !(0.0..0.5).contains(&self.flip_noise) {
            return Err(SynthError::BadFlipNoise(self.flip_noise));
        }
        if !(0.0..0.5).contains(&self.prob_jitter) {
            return Err(SynthError::BadJitter(self.prob_jitter));
        }
        for scale in Scale::ALL {
            let features = cb.feature_count(scale);
            if self.instance_width < features {
                return Err(SynthError::WidthTooSmall {
                    width: self.instance_width,
                    scale: scale.number(),
                    features,
                });
            }
        }
        if let Some(counts) = &self.subtype_slide_counts {
            for (subtype, count) in counts {
                if !cb.subtypes().contains(subtype) {
                    return Err(SynthError::UnknownCountSubtype(subtype.clone()));
                }
                if *count == 0 {
                    return Err(SynthError::ZeroCount { field: "subtype_slide_counts" });
                }
            }
        }
        Ok(())
    }

    fn count_for(&self, subtype: &str) -> usize {
        self.subtype_slide_counts
            .as_ref()
            .and_then(|counts| {
                counts.iter().find(|(s, _)| s == subtype).map(|&(_, c)| c)
            })
            .unwrap_or(self.slides_per_subtype)
    }
}

/// One generated slide: ground truth plus its bags and bag probabilities
/// across all three scales.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSlide {
    pub slide_id: String,
    pub true_subtype: String,
    pub true_codes: SlideCode,
    pub bags: Vec<Bag>,
    pub bag_probs: Vec<BagPrediction>,
}

/// Train/test membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A generated slide together with its split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthEntry {
    pub slide: SynthSlide,
    pub split: Split,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn slide_seed(seed: u64, subtype_index: usize, slide_index: usize) -> u64 {
    let a = splitmix64(seed ^ 0x5afe_c0de);
    let b = splitmix64(a ^ (subtype_index as u64 + 1));
    splitmix64(b ^ (slide_index as u64 + 1))
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generate one slide for `subtype`, deterministic in (seed, subtype, index).
pub fn generate_slide(
    cb: &Codebook,
    subtype: &str,
    cfg: &SynthConfig,
    index: usize,
) -> Result<SynthSlide, SynthError> {
    cfg.validate(cb)?;
    let subtype_index = cb
        .subtypes()
        .iter()
        .position(|s| s == subtype)
        .ok_or_else(|| SynthError::Codebook(crate::error::CodebookError::UnknownSubtype(
            subtype.to_owned(),
        )))?;
    let mut rng = ChaCha8Rng::seed_from_u64(slide_seed(cfg.seed, subtype_index, index));
    let slide_id = format!("{subtype}-{index:04}");

    // Uniform knowledge-row triple; a scale without rows contributes zeros.
    let mut codes = Vec::with_capacity(3);
    for scale in Scale::ALL {
        let rows: Vec<&crate::codebook::KnowledgeRow> = cb.rows_for(subtype, scale).collect();
        let bits = if rows.is_empty() {
            vec![false; cb.feature_count(scale)]
        } else {
            rows[rng.random_range(0..rows.len())].bits.clone()
        };
        codes.push(BinaryCode::new(scale, bits));
    }
    let codes: [BinaryCode; 3] = codes.try_into().expect("three scales");
    let true_codes = SlideCode::new(slide_id.clone(), codes)
        .expect("codes are built in scale order");

    let mut bags = Vec::with_capacity(3 * cfg.bags_per_slide);
    let mut bag_probs = Vec::with_capacity(3 * cfg.bags_per_slide);
    for scale in Scale::ALL {
        let bits = &true_codes.code(scale).bits;
        for bag_id in 0..cfg.bags_per_slide {
            let instances: Vec<Vec<f64>> = (0..cfg.instances_per_bag)
                .map(|_| {
                    (0..cfg.instance_width)
                        .map(|j| {
                            let signal = if j < bits.len() && bits[j] { FEATURE_SIGNAL } else { 0.0 };
                            signal + standard_normal(&mut rng)
                        })
                        .collect()
                })
                .collect();
            let probs: Vec<f64> = bits
                .iter()
                .map(|&bit| {
                    let u: f64 = rng.random();
                    let mut p = if bit { 1.0 - cfg.prob_jitter * u } else { cfg.prob_jitter * u };
                    let flip: f64 = rng.random();
                    if flip < cfg.flip_noise {
                        p = 1.0 - p;
                    }
                    p
                })
                .collect();
            bags.push(
                Bag::new(slide_id.clone(), scale, bag_id as u32, instances, bits.clone())
                    .expect("generated bags are well formed"),
            );
            bag_probs.push(
                BagPrediction::new(slide_id.clone(), scale, bag_id as u32, probs)
                    .expect("generated probabilities lie in [0, 1]"),
            );
        }
    }

    Ok(SynthSlide { slide_id, true_subtype: subtype.to_owned(), true_codes, bags, bag_probs })
}

/// Per-subtype train counts for an 80/20 split: floor(0.8 * total) train
/// slides overall, allocated as floor(0.8 * n) per subtype with the leftover
/// going to the largest remainders in canonical subtype order.
fn train_counts(counts: &[usize]) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let total_train = ((4 * total) / 5).max(1);
    let mut base: Vec<usize> = counts.iter().map(|&n| (4 * n) / 5).collect();
    let mut leftover = total_train - base.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse((4 * counts[i]) % 5));
    for &i in &order {
        if leftover == 0 {
            break;
        }
        if base[i] < counts[i] {
            base[i] += 1;
            leftover -= 1;
        }
    }
    base
}

/// Generate the full dataset: `slides_per_subtype` slides per subtype (or
/// the per-subtype override), each with a deterministic split assignment.
pub fn generate_dataset(cb: &Codebook, cfg: &SynthConfig) -> Result<Vec<SynthEntry>, SynthError> {
    cfg.validate(cb)?;
    let counts: Vec<usize> = cb.subtypes().iter().map(|s| cfg.count_for(s)).collect();
    let trains = train_counts(&counts);
    let mut entries = Vec::with_capacity(counts.iter().sum());
    for (subtype_idx, subtype) in cb.subtypes().iter().enumerate() {
        for index in 0..counts[subtype_idx] {
            let slide = generate_slide(cb, subtype, cfg, index)?;
            let split = if index < trains[subtype_idx] { Split::Train } else { Split::Test };
            entries.push(SynthEntry { slide, split });
        }
    }
    Ok(entries)
}

/// Manifest line: slide identity, ground truth and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub slide_id: String,
    pub subtype: String,
    pub split: Split,
    /// Ground-truth bit strings keyed by scale number.
    pub true_codes: BTreeMap<u8, String>,
}

impl ManifestRecord {
    pub fn from_entry(entry: &SynthEntry) -> Self {
        let mut true_codes = BTreeMap::new();
        for scale in Scale::ALL {
            true_codes.insert(scale.number(), entry.slide.true_codes.code(scale).bit_str());
        }
        ManifestRecord {
            slide_id: entry.slide.slide_id.clone(),
            subtype: entry.slide.true_subtype.clone(),
            split: entry.split,
            true_codes,
        }
    }
}

pub fn write_manifest<W: Write>(
    mut writer: W,
    records: &[ManifestRecord],
) -> Result<(), DataError> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(reader: R) -> Result<Vec<ManifestRecord>, DataError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line)
            .map_err(|source| DataError::Json { line: idx + 1, source })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::parse_codebook;
    use crate::ensemble::{collect_slide_codes, Thresholds};
    use crate::knowspace::classify_batch;
    use proptest::prelude::*;

    const RCC_TEXT: &str =
        include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../codebooks/rcc.codebook"));
    const SC_TEXT: &str =
        include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../codebooks/sc.codebook"));

    fn rcc() -> Codebook {
        parse_codebook(RCC_TEXT).unwrap()
    }

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            slides_per_subtype: 4,
            bags_per_slide: 3,
            instances_per_bag: 2,
            instance_width: 12,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noiseless_probabilities_are_exactly_binary() {
        let cb = rcc();
        let slide = generate_slide(&cb, "KIRC", &small_cfg(), 0).unwrap();
        for pred in &slide.bag_probs {
            let bits = &slide.true_codes.code(pred.scale).bits;
            for (p, &bit) in pred.probs.iter().zip(bits) {
                assert_eq!(*p, if bit { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn noiseless_vote_recovers_true_codes() {
        let cb = rcc();
        let entries = generate_dataset(&cb, &small_cfg()).unwrap();
        for entry in &entries {
            let codes =
                collect_slide_codes(&entry.slide.bag_probs, &Thresholds::default()).unwrap();
            assert_eq!(codes.len(), 1);
            assert_eq!(codes[0], entry.slide.true_codes);
        }
    }

    #[test]
    fn noiseless_pipeline_classifies_perfectly() {
        let cb = rcc();
        let entries = generate_dataset(&cb, &small_cfg()).unwrap();
        let codes: Vec<_> = entries.iter().map(|e| e.slide.true_codes.clone()).collect();
        let diagnoses = classify_batch(&codes, &cb).unwrap();
        for (entry, diag) in entries.iter().zip(&diagnoses) {
            assert_eq!(diag.predicted, entry.slide.true_subtype);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cb = rcc();
        let cfg = SynthConfig { flip_noise: 0.2, prob_jitter: 0.3, ..small_cfg() };
        let a = generate_slide(&cb, "KIRP", &cfg, 3).unwrap();
        let b = generate_slide(&cb, "KIRP", &cfg, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ_only_in_content() {
        let cb = rcc();
        let cfg_a = SynthConfig { prob_jitter: 0.4, ..small_cfg() };
        let cfg_b = SynthConfig { seed: 1, ..cfg_a.clone() };
        let a = generate_dataset(&cb, &cfg_a).unwrap();
        let b = generate_dataset(&cb, &cfg_b).unwrap();
        assert_eq!(a.len(), b.len());
        let ids = |v: &[SynthEntry]| -> Vec<String> {
            v.iter().map(|e| e.slide.slide_id.clone()).collect::<Vec<_>>()
        };
        assert_eq!(ids(&a), ids(&b));
        assert_ne!(
            a.iter().flat_map(|e| &e.slide.bag_probs).collect::<Vec<_>>(),
            b.iter().flat_map(|e| &e.slide.bag_probs).collect::<Vec<_>>()
        );
    }

    #[test]
    fn dataset_counts_per_subtype() {
        let cb = rcc();
        let cfg = SynthConfig { slides_per_subtype: 50, ..small_cfg() };
        let entries = generate_dataset(&cb, &cfg).unwrap();
        assert_eq!(entries.len(), 150);
        for subtype in cb.subtypes() {
            let n = entries.iter().filter(|e| &e.slide.true_subtype == subtype).count();
            assert_eq!(n, 50);
        }
        let train = entries.iter().filter(|e| e.split == Split::Train).count();
        assert_eq!(train, 120);
    }

    #[test]
    fn single_slide_per_subtype_splits_two_one() {
        let cb = rcc();
        let cfg = SynthConfig { slides_per_subtype: 1, ..small_cfg() };
        let entries = generate_dataset(&cb, &cfg).unwrap();
        assert_eq!(entries.len(), 3);
        let train = entries.iter().filter(|e| e.split == Split::Train).count();
        let test = entries.iter().filter(|e| e.split == Split::Test).count();
        assert_eq!((train, test), (2, 1));
    }

    #[test]
    fn per_subtype_count_override() {
        let cb = parse_codebook(SC_TEXT).unwrap();
        let cfg = SynthConfig {
            subtype_slide_counts: Some(vec![
                ("BCC".into(), 6),
                ("SCC".into(), 5),
                ("BD".into(), 3),
            ]),
            ..small_cfg()
        };
        let entries = generate_dataset(&cb, &cfg).unwrap();
        assert_eq!(entries.len(), 14);
        let count = |s: &str| entries.iter().filter(|e| e.slide.true_subtype == s).count();
        assert_eq!((count("BCC"), count("SCC"), count("BD")), (6, 5, 3));
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let cb = rcc();
        let bad_width = SynthConfig { instance_width: 3, ..SynthConfig::default() };
        assert!(matches!(
            bad_width.validate(&cb),
            Err(SynthError::WidthTooSmall { .. })
        ));
        let bad_noise = SynthConfig { flip_noise: 0.5, ..SynthConfig::default() };
        assert!(matches!(bad_noise.validate(&cb), Err(SynthError::BadFlipNoise(_))));
        let bad_jitter = SynthConfig { prob_jitter: 0.7, ..SynthConfig::default() };
        assert!(matches!(bad_jitter.validate(&cb), Err(SynthError::BadJitter(_))));
        let zero = SynthConfig { bags_per_slide: 0, ..SynthConfig::default() };
        assert!(matches!(zero.validate(&cb), Err(SynthError::ZeroCount { .. })));
        assert!(matches!(
            generate_slide(&cb, "NOPE", &SynthConfig::default(), 0),
            Err(SynthError::Codebook(_))
        ));
    }

    #[test]
    fn manifest_roundtrip() {
        let cb = rcc();
        let entries = generate_dataset(&cb, &small_cfg()).unwrap();
        let records: Vec<_> = entries.iter().map(ManifestRecord::from_entry).collect();
        let mut buf = Vec::new();
        write_manifest(&mut buf, &records).unwrap();
        let back = read_manifest(&buf[..]).unwrap();
        assert_eq!(back, records);
        assert_eq!(back[0].true_codes[&1].len(), 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn datasets_are_reproducible(seed in 0u64..1000, jitter in 0.0..0.49f64, flip in 0.0..0.49f64) {
            let cb = rcc();
            let cfg = SynthConfig {
                seed,
                slides_per_subtype: 2,
                bags_per_slide: 2,
                instances_per_bag: 2,
                instance_width: 8,
                flip_noise: flip,
                prob_jitter: jitter,
                subtype_slide_counts: None,
            };
            let a = generate_dataset(&cb, &cfg).unwrap();
            let b = generate_dataset(&cb, &cfg).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn noiseless_closure_holds_for_any_seed_and_jitter(seed in 0u64..1000, jitter in 0.0..0.49f64) {
            // flip_noise = 0: even with jitter the vote at v = 0.5 must
            // recover the truth, because set bits stay above 0.5.
            let cb = rcc();
            let cfg = SynthConfig {
                seed,
                slides_per_subtype: 2,
                bags_per_slide: 3,
                instances_per_bag: 2,
                instance_width: 8,
                flip_noise: 0.0,
                prob_jitter: jitter,
                subtype_slide_counts: None,
            };
            let entries = generate_dataset(&cb, &cfg).unwrap();
            for entry in &entries {
                let codes = collect_slide_codes(&entry.slide.bag_probs, &Thresholds::default()).unwrap();
                prop_assert_eq!(&codes[0], &entry.slide.true_codes);
                let diag = classify_batch(std::slice::from_ref(&codes[0]), &cb).unwrap();
                prop_assert_eq!(&diag[0].predicted, &entry.slide.true_subtype);
            }
        }
    }
}
