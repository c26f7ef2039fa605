use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use textlip_core::align::{dtw_with, warp_trajectory, wer_str, DtwOptions, PhonemeTrack};
use textlip_core::audiofeat::{ingest_audio, mfcc_framelocked, trim_normalize, write_feature_csv, write_wav};
use textlip_core::geometry::{read_track, write_track, TrackRecord};
use textlip_core::harness::corpus::{fit_speaker_lipspace, lip_samples, synthetic_landmark_tracks};
use textlip_core::harness::eval::{end_to_end_eval, evaluate_natural};
use textlip_core::harness::sweep::{sweep_svg, write_sweep_csv};
use textlip_core::harness::{
    data_fraction_sweep, fine_tune_on_corpus, make_corpus, pretrain_on_corpus, train_on_corpus, AlignmentMode, Corpus,
    EvalReport, PipelineConfig, Split, SyntheticSpeaker,
};
use textlip_core::lipspace::{self, default_sweep_scales, estimate_mean, LipSpaceModel};
use textlip_core::seq2lip::{EncoderCheckpoint, EncoderInit, Seq2LipModel};
use textlip_core::trajectory::Trajectory;
use textlip_core::ttslite::{synthesize_voice, PhonemeInventory};

use crate::plot::component_sweep_svg;
use crate::{Cli, Command, EncoderMode, ModeArg, SpeakerKind, SplitArg};

const LIPSPACE_FILE: &str = "lipspace.json";

pub fn run(cli: &Cli) -> Result<Value> {
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let out = cli.out_dir.as_path();
    let summary = match &cli.command {
        Command::GenLandmarks(a) => gen_landmarks(&cfg, out, a)?,
        Command::FitPca(a) => fit_pca(out, a)?,
        Command::SweepComponents(a) => sweep_components(out, a)?,
        Command::Adapt(a) => adapt(out, a)?,
        Command::MakeCorpus(a) => make_corpus_cmd(&cfg, out, a)?,
        Command::PretrainEncoder(a) => pretrain(&cfg, out, &a.corpus)?,
        Command::Train(a) => train(&cfg, out, a)?,
        Command::Infer(a) => infer(out, a)?,
        Command::Eval(a) => eval(out, a, None, &cfg)?,
        Command::E2eEval(a) => eval(out, &a.eval, Some(a.mode), &cfg)?,
        Command::DataSweep(a) => data_sweep(&cfg, out, a)?,
        Command::Synth(a) => synth(&cfg, out, a)?,
        Command::DtwAlign(a) => dtw_align(out, a)?,
        Command::Wer(a) => wer(a)?,
    };
    let mut line = json!({"status": "ok", "command": command_name(&cli.command)});
    if let (Some(obj), Value::Object(extra)) = (line.as_object_mut(), summary) {
        obj.extend(extra);
    }
    Ok(line)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenLandmarks(_) => "gen-landmarks",
        Command::FitPca(_) => "fit-pca",
        Command::SweepComponents(_) => "sweep-components",
        Command::Adapt(_) => "adapt",
        Command::MakeCorpus(_) => "make-corpus",
        Command::PretrainEncoder(_) => "pretrain-encoder",
        Command::Train(_) => "train",
        Command::Infer(_) => "infer",
        Command::Eval(_) => "eval",
        Command::E2eEval(_) => "e2e-eval",
        Command::DataSweep(_) => "data-sweep",
        Command::Synth(_) => "synth",
        Command::DtwAlign(_) => "dtw-align",
        Command::Wer(_) => "wer",
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.pretrain.seed = seed;
        cfg.e2e.seed = seed;
    }
    Ok(cfg)
}

fn speaker(kind: SpeakerKind, cfg: &PipelineConfig) -> SyntheticSpeaker {
    match kind {
        SpeakerKind::Reference => SyntheticSpeaker::reference(),
        SpeakerKind::Shifted => SyntheticSpeaker::shifted(cfg.speaker_b.seed, cfg.speaker_b.magnitude),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Expand directories into their `.jsonl` files, sorted.
fn track_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        bail!(textlip_core::Error::Empty("no landmark track files".into()));
    }
    Ok(files)
}

fn read_tracks(inputs: &[PathBuf]) -> Result<Vec<Vec<TrackRecord>>> {
    track_files(inputs)?
        .iter()
        .map(|f| Ok(read_track(f).with_context(|| format!("reading {}", f.display()))?.0))
        .collect()
}

fn gen_landmarks(cfg: &PipelineConfig, out: &Path, a: &crate::GenLandmarks) -> Result<Value> {
    let tracks = synthetic_landmark_tracks(&speaker(a.speaker, cfg), cfg.seed, a.videos, a.seconds, cfg.corpus.fps)?;
    let dir = out.join("landmarks");
    std::fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for (i, t) in tracks.iter().enumerate() {
        let p = dir.join(format!("video_{i:03}.jsonl"));
        write_track(&p, t)?;
        files.push(path_str(&p));
    }
    Ok(json!({ "tracks": files }))
}

fn fit_pca(out: &Path, a: &crate::FitPca) -> Result<Value> {
    let samples = lip_samples(&read_tracks(&a.tracks)?)?;
    let (model, report) = lipspace::fit(&samples, a.components)?;
    let path = out.join(LIPSPACE_FILE);
    model.save(&path)?;
    let report_path = out.join("fit_report.json");
    write_json(
        &report_path,
        &json!({
            "samples": samples.len(),
            "eigenvalues": report.eigenvalues,
            "cumulative_ratio": report.cumulative_ratio,
            "reconstruction_energy": report.reconstruction_energy,
            "rank": report.rank,
        }),
    )?;
    Ok(json!({
        "lipspace": path_str(&path),
        "report": path_str(&report_path),
        "samples": samples.len(),
        "explained_variance": report.cumulative_ratio.last(),
    }))
}

fn sweep_components(out: &Path, a: &crate::SweepComponents) -> Result<Value> {
    let model = LipSpaceModel::load(&a.lipspace)?;
    let scales = default_sweep_scales(a.count);
    let mut csv = String::from("component,scale");
    for i in 1..=20 {
        csv.push_str(&format!(",x{i},y{i}"));
    }
    csv.push('\n');
    let mut shapes = Vec::with_capacity(model.k);
    for c in 0..model.k {
        let row = model.component_sweep(c, &scales)?;
        for (s, v) in scales.iter().zip(&row) {
            let vals: Vec<String> = v.0.iter().map(|x| x.to_string()).collect();
            csv.push_str(&format!("{},{s},{}\n", c + 1, vals.join(",")));
        }
        shapes.push(row);
    }
    let csv_path = out.join("component_sweep.csv");
    let svg_path = out.join("component_sweep.svg");
    std::fs::write(&csv_path, csv)?;
    std::fs::write(&svg_path, component_sweep_svg(&shapes, &scales))?;
    Ok(json!({ "csv": path_str(&csv_path), "svg": path_str(&svg_path), "scales": scales }))
}

fn adapt(out: &Path, a: &crate::Adapt) -> Result<Value> {
    let model = LipSpaceModel::load(&a.lipspace)?;
    let samples = lip_samples(&read_tracks(&a.tracks)?)?;
    let adapted = model.adapt_mean(&estimate_mean(&samples)?)?;
    let path = out.join("lipspace_adapted.json");
    adapted.save(&path)?;
    let shift = model
        .mean
        .iter()
        .zip(&adapted.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(json!({ "lipspace": path_str(&path), "frames": samples.len(), "mean_shift": shift }))
}

fn make_corpus_cmd(cfg: &PipelineConfig, out: &Path, a: &crate::MakeCorpus) -> Result<Value> {
    let mut corpus_cfg = cfg.corpus.clone();
    if let Some(m) = a.minutes {
        corpus_cfg.minutes = m;
    }
    let spk = speaker(a.speaker, cfg);
    let space = match &a.lipspace {
        Some(p) => LipSpaceModel::load(p)?,
        None => fit_speaker_lipspace(&spk, cfg.seed, cfg.lipspace_seconds)?.0,
    };
    let corpus = make_corpus(cfg.seed, &corpus_cfg, &spk, &PhonemeInventory::default(), &space)?;
    let dir = out.join("corpus");
    corpus.save(&dir)?;
    space.save(&dir.join(LIPSPACE_FILE))?;
    Ok(json!({
        "corpus": path_str(&dir),
        "utterances": corpus.utterances.len(),
        "seconds": corpus.total_seconds(),
        "fingerprint": corpus.fingerprint(),
    }))
}

fn pretrain(cfg: &PipelineConfig, out: &Path, corpus_dir: &Path) -> Result<Value> {
    let corpus = Corpus::load(corpus_dir)?;
    let (encoder, report) = pretrain_on_corpus(&corpus, &cfg.model, &cfg.pretrain)?;
    let path = out.join("encoder.json");
    encoder.save(&path)?;
    write_json(&out.join("pretrain_report.json"), &report)?;
    Ok(json!({
        "encoder": path_str(&path),
        "heldout_accuracy": report.heldout_accuracy,
        "chance_accuracy": report.chance_accuracy,
    }))
}

fn train(cfg: &PipelineConfig, out: &Path, a: &crate::Train) -> Result<Value> {
    let mut corpus = Corpus::load(&a.corpus)?;
    if let Some(f) = a.fraction {
        corpus = corpus.subsample_videos(f)?;
    }
    let mut tc = cfg.train.clone();
    match a.encoder_init {
        Some(EncoderMode::Random) => tc.encoder_init = EncoderInit::Random,
        Some(EncoderMode::Pretrained) => tc.encoder_init = EncoderInit::Pretrained,
        Some(EncoderMode::Frozen) => {
            tc.encoder_init = EncoderInit::Pretrained;
            tc.encoder_trainable = false;
        }
        None => {}
    }
    let encoder = a.encoder.as_deref().map(EncoderCheckpoint::load).transpose()?;
    if tc.encoder_init == EncoderInit::Pretrained && encoder.is_none() && a.init_model.is_none() {
        bail!(textlip_core::Error::Config(
            "pretrained encoder regime needs --encoder".into()
        ));
    }
    let (model, report) = match &a.init_model {
        Some(p) => fine_tune_on_corpus(&Seq2LipModel::load(p)?, &corpus, &tc)?,
        None => train_on_corpus(&corpus, &cfg.model, &tc, encoder.as_ref())?,
    };
    let path = out.join("model.json");
    model.save(&path)?;
    write_json(&out.join("train_report.json"), &report)?;
    Ok(json!({
        "model": path_str(&path),
        "final_val_mse": report.final_val_mse,
        "averaged_epochs": report.averaged_epochs,
    }))
}

fn infer(out: &Path, a: &crate::Infer) -> Result<Value> {
    let model = Seq2LipModel::load(&a.model)?;
    let mut clip = ingest_audio(&a.audio, model.hyper.sample_rate)?;
    if a.trim {
        clip = trim_normalize(&clip, -40.0)?;
    }
    let traj = model.infer(&clip)?;
    let stem = a.audio.file_stem().and_then(|s| s.to_str()).unwrap_or("audio");
    let path = out.join(format!("{stem}.csv"));
    traj.write_csv(&path)?;
    let mut summary = json!({ "trajectory": path_str(&path), "frames": traj.len() });
    if let Some(ls) = &a.lipspace {
        let lips = LipSpaceModel::load(ls)?.reconstruct_trajectory(&traj)?;
        let p = out.join(format!("{stem}_lips.csv"));
        lips.write_csv(&p)?;
        summary["lips"] = json!(path_str(&p));
    }
    if a.dump_features {
        let p = out.join(format!("{stem}_mel.csv"));
        write_feature_csv(&p, &model.features(&clip)?.frames)?;
        summary["features"] = json!(path_str(&p));
    }
    Ok(summary)
}

fn split(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Validation => Split::Validation,
        SplitArg::Test => Split::Test,
    }
}

fn corpus_lipspace(corpus_dir: &Path, explicit: Option<&Path>) -> Result<LipSpaceModel> {
    let p = explicit.map_or_else(|| corpus_dir.join(LIPSPACE_FILE), Path::to_path_buf);
    LipSpaceModel::load(&p).with_context(|| format!("loading lip space {}", p.display()))
}

fn eval(out: &Path, a: &crate::Eval, mode: Option<ModeArg>, cfg: &PipelineConfig) -> Result<Value> {
    let model = Seq2LipModel::load(&a.model)?;
    let corpus = Corpus::load(&a.corpus)?;
    let space = corpus_lipspace(&a.corpus, a.lipspace.as_deref())?;
    let utts = corpus.split(split(a.split));
    let (report, name): (EvalReport, String) = match mode {
        None => (
            evaluate_natural(&model, &utts, &space, &space)?,
            "eval_report.json".into(),
        ),
        Some(m) => {
            let (mode, tag) = match m {
                ModeArg::Natural => (AlignmentMode::None, "natural"),
                ModeArg::PhoneDelta => (AlignmentMode::PhoneDelta, "phone_delta"),
                ModeArg::Dtw => (AlignmentMode::Dtw, "dtw"),
            };
            let r = end_to_end_eval(&model, &utts, &corpus.inventory, &space, mode, &cfg.e2e)?;
            (r, format!("e2e_{tag}.json"))
        }
    };
    let path = out.join(name);
    write_json(&path, &report)?;
    log::info!(
        "per-utterance mean {:.6} / pooled {:.6} (8D), {:.6} / {:.6} (40D)",
        report.mse_8d,
        report.pooled_mse_8d,
        report.mse_40d,
        report.pooled_mse_40d
    );
    let (m8, m40) = if a.pooled {
        (report.pooled_mse_8d, report.pooled_mse_40d)
    } else {
        (report.mse_8d, report.mse_40d)
    };
    Ok(json!({
        "report": path_str(&path),
        "utterances": report.per_utterance.len(),
        "mse_8d": m8,
        "mse_40d": m40,
        "pooled": a.pooled,
    }))
}

fn data_sweep(cfg: &PipelineConfig, out: &Path, a: &crate::DataSweep) -> Result<Value> {
    let corpus = Corpus::load(&a.corpus)?;
    let space = corpus_lipspace(&a.corpus, a.lipspace.as_deref())?;
    let fractions = a.fractions.clone().unwrap_or_else(|| cfg.sweep_fractions.clone());
    let encoder = a.encoder.as_deref().map(EncoderCheckpoint::load).transpose()?;
    let rows = data_fraction_sweep(&corpus, &fractions, &cfg.model, &cfg.train, &space, encoder.as_ref())?;
    let csv = out.join("data_sweep.csv");
    let svg = out.join("data_sweep.svg");
    write_sweep_csv(&rows, &csv)?;
    std::fs::write(&svg, sweep_svg(&rows))?;
    Ok(json!({ "csv": path_str(&csv), "svg": path_str(&svg), "rows": rows }))
}

fn synth(cfg: &PipelineConfig, out: &Path, a: &crate::Synth) -> Result<Value> {
    let track = PhonemeTrack::read_tsv(&a.track)?;
    let inventory = match &a.inventory {
        Some(p) => PhonemeInventory::load(p)?,
        None => PhonemeInventory::default(),
    };
    let mut voice = cfg.corpus.voice;
    if let Some(s) = a.formant_scale {
        voice.formant_scale = s;
    }
    let clip = synthesize_voice(&track, &inventory, cfg.corpus.sample_rate, cfg.seed, &voice)?;
    let stem = a.track.file_stem().and_then(|s| s.to_str()).unwrap_or("synth");
    let path = out.join(format!("{stem}.wav"));
    write_wav(&path, &clip)?;
    Ok(json!({ "audio": path_str(&path), "seconds": clip.duration() }))
}

fn dtw_align(out: &Path, a: &crate::DtwAlign) -> Result<Value> {
    let reference = ingest_audio(&a.reference, textlip_core::audiofeat::SAMPLE_RATE)?;
    let query = ingest_audio(&a.query, textlip_core::audiofeat::SAMPLE_RATE)?;
    let ra = mfcc_framelocked(&reference, a.fps, a.n_mfcc)?;
    let qa = mfcc_framelocked(&query, a.fps, a.n_mfcc)?;
    let path = dtw_with(ra.frames.view(), qa.frames.view(), DtwOptions { band: a.band })?;
    let path_file = out.join("dtw_path.csv");
    let mut csv = String::from("reference,query\n");
    for (i, j) in &path.pairs {
        csv.push_str(&format!("{i},{j}\n"));
    }
    std::fs::write(&path_file, csv)?;
    let mut summary = json!({
        "path": path_str(&path_file),
        "total_cost": path.total_cost,
        "reference_frames": ra.num_frames(),
        "query_frames": qa.num_frames(),
    });
    if let Some(tp) = &a.trajectory {
        let traj = Trajectory::read_csv(tp, a.fps)?;
        if traj.len() != qa.num_frames() {
            bail!(textlip_core::Error::LengthMismatch {
                expected: qa.num_frames(),
                got: traj.len()
            });
        }
        let warped = warp_trajectory(&traj, &path)?;
        let p = out.join("warped.csv");
        warped.write_csv(&p)?;
        summary["warped"] = json!(path_str(&p));
    }
    Ok(summary)
}

fn read_text(inline: &Option<String>, file: &Option<PathBuf>) -> Result<String> {
    match (inline, file) {
        (Some(s), _) => Ok(s.clone()),
        (None, Some(p)) => Ok(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        (None, None) => bail!("missing transcript"),
    }
}

fn wer(a: &crate::Wer) -> Result<Value> {
    let r = read_text(&a.reference, &a.reference_file)?;
    let h = read_text(&a.hypothesis, &a.hypothesis_file)?;
    Ok(json!({ "wer": wer_str(&r, &h)? }))
}
