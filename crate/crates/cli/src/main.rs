//! `textlip`: command-line front end for the text-to-lip pipeline.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "textlip", version, about = "Speech and text to lip keypoints")]
pub struct Cli {
    /// Pipeline configuration (TOML or JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for every random step; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory for outputs.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render synthetic landmark tracks (JSON lines) of a speaker.
    GenLandmarks(GenLandmarks),
    /// Fit the PCA lip space on landmark tracks.
    FitPca(FitPca),
    /// Lip shapes along each principal component.
    SweepComponents(SweepComponents),
    /// Replace the lip-space mean with one estimated from new landmark tracks.
    Adapt(Adapt),
    /// Build a synthetic speech/lip corpus.
    MakeCorpus(MakeCorpus),
    /// Pretrain the audio encoder on framewise phoneme classification.
    PretrainEncoder(CorpusArg),
    /// Train the speech-to-lip model.
    Train(Train),
    /// Predict a lip trajectory for a WAV file.
    Infer(Infer),
    /// Score a model on recorded corpus audio.
    Eval(Eval),
    /// Text-to-lip evaluation through the synthesizer.
    E2eEval(E2eEval),
    /// Train on fractions of the training videos.
    DataSweep(DataSweep),
    /// Synthesize speech from a phoneme duration file.
    Synth(Synth),
    /// Align two recordings with DTW over frame-locked MFCCs.
    DtwAlign(DtwAlign),
    /// Word error rate between two transcripts.
    Wer(Wer),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SpeakerKind {
    Reference,
    Shifted,
}

#[derive(Args, Debug)]
pub struct GenLandmarks {
    #[arg(long, value_enum, default_value = "reference")]
    pub speaker: SpeakerKind,
    #[arg(long, default_value_t = 4)]
    pub videos: usize,
    #[arg(long, default_value_t = 60.0)]
    pub seconds: f64,
}

#[derive(Args, Debug)]
pub struct FitPca {
    /// Track files or directories of `.jsonl` tracks.
    #[arg(required = true)]
    pub tracks: Vec<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub components: usize,
}

#[derive(Args, Debug)]
pub struct SweepComponents {
    #[arg(long)]
    pub lipspace: PathBuf,
    /// Number of evenly spaced scales on [-1.5, 1.5].
    #[arg(long, default_value_t = 8)]
    pub count: usize,
}

#[derive(Args, Debug)]
pub struct Adapt {
    #[arg(long)]
    pub lipspace: PathBuf,
    /// Landmark tracks of the new speaker.
    #[arg(required = true)]
    pub tracks: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MakeCorpus {
    /// Overrides `corpus.minutes`.
    #[arg(long)]
    pub minutes: Option<f64>,
    #[arg(long, value_enum, default_value = "reference")]
    pub speaker: SpeakerKind,
    /// Use this lip space instead of fitting one for the speaker.
    #[arg(long)]
    pub lipspace: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CorpusArg {
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EncoderMode {
    Random,
    Pretrained,
    Frozen,
}

#[derive(Args, Debug)]
pub struct Train {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Pretrained encoder checkpoint.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub encoder_init: Option<EncoderMode>,
    /// Continue training this model instead of starting fresh.
    #[arg(long)]
    pub init_model: Option<PathBuf>,
    /// Keep this fraction of the training videos.
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct Infer {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub audio: PathBuf,
    /// Trim silence and peak-normalize before inference.
    #[arg(long)]
    pub trim: bool,
    /// Also write reconstructed 40-dim lips with this lip space.
    #[arg(long)]
    pub lipspace: Option<PathBuf>,
    /// Also write the log-Mel features as CSV.
    #[arg(long)]
    pub dump_features: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Args, Debug)]
pub struct Eval {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Lip space for 40-dim errors; defaults to `<corpus>/lipspace.json`.
    #[arg(long)]
    pub lipspace: Option<PathBuf>,
    /// Headline numbers pooled over frames instead of averaged over utterances.
    #[arg(long)]
    pub pooled: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Natural,
    PhoneDelta,
    Dtw,
}

#[derive(Args, Debug)]
pub struct E2eEval {
    #[command(flatten)]
    pub eval: Eval,
    #[arg(long, value_enum, default_value = "phone-delta")]
    pub mode: ModeArg,
}

#[derive(Args, Debug)]
pub struct DataSweep {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Comma-separated fractions; overrides `sweep_fractions`.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub lipspace: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Synth {
    /// Phoneme duration file (TSV: phoneme, duration_s, f0_hz).
    #[arg(long)]
    pub track: PathBuf,
    #[arg(long)]
    pub inventory: Option<PathBuf>,
    /// Multiplies every formant frequency.
    #[arg(long)]
    pub formant_scale: Option<f64>,
}

#[derive(Args, Debug)]
pub struct DtwAlign {
    /// Reference recording (defines the output timeline).
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    /// Trajectory timed like `query` to warp onto the reference.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    #[arg(long, default_value_t = 30.0)]
    pub fps: f64,
    #[arg(long, default_value_t = 40)]
    pub n_mfcc: usize,
    /// Sakoe-Chiba band half-width in frames.
    #[arg(long)]
    pub band: Option<usize>,
}

#[derive(Args, Debug)]
pub struct Wer {
    #[arg(long, conflicts_with = "reference_file", required_unless_present = "reference_file")]
    pub reference: Option<String>,
    #[arg(
        long,
        conflicts_with = "hypothesis_file",
        required_unless_present = "hypothesis_file"
    )]
    pub hypothesis: Option<String>,
    #[arg(long)]
    pub reference_file: Option<PathBuf>,
    #[arg(long)]
    pub hypothesis_file: Option<PathBuf>,
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<textlip_core::Error>())
        .map_or("runtime", |e| e.kind())
}

/// Context chain joined with ": ", skipping causes already quoted by their parent.
fn error_message(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = serde_json::json!({
                "status": "error",
                "kind": error_kind(&e),
                "message": error_message(&e),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
