//! Text-to-lip keypoint generation at desk scale.
//!
//! The pipeline maps speech audio to lip landmarks through a PCA lip-shape
//! space:
//!
//! - [`geometry`]: landmark ingestion, track repair and the canonical lip space
//! - [`lipspace`]: PCA fit, projection, reconstruction and mean adaptation
//! - [`audiofeat`]: WAV ingestion, log-Mel features and frame-locked MFCCs
//! - [`align`]: DTW, trajectory warping, duration mapping and WER
//! - [`seq2lip`]: the attention encoder-decoder and its training recipe
//! - [`ttslite`]: a controllable parametric phoneme synthesizer
//! - [`harness`]: synthetic corpora, evaluation and sweeps

pub mod align;
pub mod audiofeat;
pub mod error;
pub mod geometry;
pub mod harness;
mod linalg;
pub mod lipspace;
pub mod seq2lip;
pub mod trajectory;
pub mod ttslite;

pub use error::{Error, Result};
pub use geometry::{LandmarkFrame, LipVector40, Point2D, SimilarityTransform};
pub use lipspace::LipSpaceModel;
pub use seq2lip::{Seq2LipModel, TrainConfig};
pub use trajectory::Trajectory;
