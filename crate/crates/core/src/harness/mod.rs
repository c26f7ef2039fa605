//! Synthetic corpora, training drivers, evaluation and sweeps.

pub mod config;
pub mod corpus;
pub mod eval;
pub mod speaker;
pub mod sweep;

pub use config::PipelineConfig;
pub use corpus::{make_corpus, Corpus, CorpusConfig, Split, Utterance};
pub use eval::{end_to_end_eval, evaluate_mse, AlignmentMode, E2eConfig, EvalReport, MseSpace};
pub use speaker::SyntheticSpeaker;
pub use sweep::{data_fraction_sweep, SweepRow};

use crate::audiofeat::mel_features;
use crate::error::Result;
use crate::seq2lip::{
    self, EncoderCheckpoint, Hyper, LabeledUtterance, PretrainConfig, PretrainReport, Seq2LipModel, TrainConfig,
    TrainReport, TrainUtterance,
};

/// Model-ready utterances of one split.
pub fn train_utterances(corpus: &Corpus, split: Split, hyper: &Hyper) -> Result<Vec<TrainUtterance>> {
    corpus
        .split(split)
        .into_iter()
        .map(|u| {
            Ok(TrainUtterance {
                id: u.id.clone(),
                mel: mel_features(&u.audio, &hyper.mel)?,
                traj: u.traj.clone(),
                lipspace_ref: corpus.lipspace_fingerprint.clone(),
            })
        })
        .collect()
}

/// Mel frames labelled with the phoneme sounding at each frame centre.
pub fn labeled_utterances(
    corpus: &Corpus,
    split: Split,
    hyper: &Hyper,
    classes: &[String],
) -> Result<Vec<LabeledUtterance>> {
    corpus
        .split(split)
        .into_iter()
        .map(|u| {
            let mel = mel_features(&u.audio, &hyper.mel)?;
            let labels = corpus::frame_labels(&u.track, mel.num_frames(), mel.fps(), classes)?;
            Ok(LabeledUtterance { mel, labels })
        })
        .collect()
}

/// Train on the corpus' training split, selecting checkpoints on its validation split.
pub fn train_on_corpus(
    corpus: &Corpus,
    hyper: &Hyper,
    cfg: &TrainConfig,
    encoder: Option<&EncoderCheckpoint>,
) -> Result<(Seq2LipModel, TrainReport)> {
    let train = train_utterances(corpus, Split::Train, hyper)?;
    let val = train_utterances(corpus, Split::Validation, hyper)?;
    seq2lip::train(&train, &val, hyper, cfg, &corpus.lipspace_fingerprint, encoder)
}

/// Continue training `base` on another corpus (same lip space).
pub fn fine_tune_on_corpus(
    base: &Seq2LipModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<(Seq2LipModel, TrainReport)> {
    let train = train_utterances(corpus, Split::Train, &base.hyper)?;
    let val = train_utterances(corpus, Split::Validation, &base.hyper)?;
    seq2lip::fine_tune(base, &train, &val, cfg)
}

/// Framewise phoneme-classification pretraining on the corpus (held out on validation).
pub fn pretrain_on_corpus(
    corpus: &Corpus,
    hyper: &Hyper,
    cfg: &PretrainConfig,
) -> Result<(EncoderCheckpoint, PretrainReport)> {
    let classes = corpus.inventory.symbols();
    let train = labeled_utterances(corpus, Split::Train, hyper, &classes)?;
    let held = labeled_utterances(corpus, Split::Validation, hyper, &classes)?;
    seq2lip::pretrain_encoder(&train, &held, &classes, hyper, cfg)
}
