//! Interpretable classification of temporal cardiac segmentation sequences.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`phantom`] renders synthetic cardiac cycles with known biomarkers and
//!   reads/writes the `CSQ1` dataset format.
//! - [`biomarkers`] measures volume curves, Savitzky-Golay smoothing, cycle
//!   landmarks, EF/PER/PFR/PAFR, wall-thickening variance and QC.
//! - [`model`] is the joint VAE/classifier with hand-written backprop,
//!   two-stage SGD training, the `CMDL` model format and evaluation metrics.
//! - [`cav`] builds concept sets, fits concept activation vectors and scores
//!   classifier sensitivity.
//! - [`interp`] walks the latent space along concept directions and projects
//!   latents with PCA.

pub mod biomarkers;
pub mod cav;
pub mod error;
pub mod interp;
pub mod model;
pub mod phantom;
pub mod rng;

pub use biomarkers::{BiomarkerSet, CycleLandmarks, VolumeCurve};
pub use cav::{ConceptSpec, ConceptVector, Layer, SensitivityReport};
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams, TrainConfig};
pub use phantom::{Dataset, LabelFrame, PhantomParams, SegSequence};

/// Number of label classes: background, LV blood pool, LV myocardium, RV.
pub const N_LABELS: usize = 4;
