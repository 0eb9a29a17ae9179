//! Slide subtype classification from multi-scale histological features.
//!
//! The pipeline has two halves. The data-driven half turns bags of instance
//! feature vectors into per-scale feature probabilities ([`embednet`]) and
//! aggregates them per slide with a thresholded majority vote ([`ensemble`]).
//! The knowledge-driven half reads each slide's three binary codes as a
//! coordinate in a 3D expert-knowledge space and assigns the subtype whose
//! knowledge points lie nearest ([`codebook`], [`knowspace`]). [`synth`]
//! generates seeded synthetic datasets for closed-loop testing and
//! [`metrics`] scores predictions.

pub mod codebook;
pub mod embednet;
pub mod ensemble;
pub mod error;
pub mod knowspace;
pub mod metrics;
pub mod synth;

pub use codebook::{parse_codebook, BinaryCode, BitOrder, Codebook, KnowledgePoint, Scale};
pub use embednet::{Bag, Checkpoint, ModelParams, TrainConfig};
pub use ensemble::{BagPrediction, SlideCode, Thresholds};
pub use knowspace::Diagnosis;
pub use metrics::{ConfusionMatrix, MetricReport};
pub use synth::{ManifestRecord, Split, SynthConfig, SynthSlide};
