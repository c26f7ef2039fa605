//! Training-data fraction sweep with CSV and SVG output.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Split};
use super::eval::evaluate_natural;
use super::train_on_corpus;
use crate::error::{Error, Result};
use crate::lipspace::LipSpaceModel;
use crate::seq2lip::{EncoderCheckpoint, Hyper, TrainConfig};

pub const DEFAULT_FRACTIONS: [f64; 7] = [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub train_videos: usize,
    pub warmup_steps: usize,
    pub val_mse: f64,
    pub test_mse: f64,
}

/// Warm-up steps scaled linearly with the data fraction (at least one step).
pub fn scaled_warmup(warmup: usize, fraction: f64) -> usize {
    ((warmup as f64 * fraction).round() as usize).max(1)
}

/// Train one model per fraction of the training videos; validation and test
/// splits stay whole.
pub fn data_fraction_sweep(
    corpus: &Corpus,
    fractions: &[f64],
    hyper: &Hyper,
    cfg: &TrainConfig,
    space: &LipSpaceModel,
    encoder: Option<&EncoderCheckpoint>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
        }
        let sub = corpus.subsample_videos(fraction)?;
        let run_cfg = TrainConfig {
            warmup_steps: scaled_warmup(cfg.warmup_steps, fraction),
            ..cfg.clone()
        };
        let (model, report) = train_on_corpus(&sub, hyper, &run_cfg, encoder)?;
        let test = evaluate_natural(&model, &sub.split(Split::Test), space, space)?;
        log::info!(
            "fraction {fraction}: {} videos, val {:.5}, test {:.5}",
            sub.video_ids(Split::Train).len(),
            report.final_val_mse,
            test.mse_8d
        );
        rows.push(SweepRow {
            fraction,
            train_videos: sub.video_ids(Split::Train).len(),
            warmup_steps: run_cfg.warmup_steps,
            val_mse: report.final_val_mse,
            test_mse: test.mse_8d,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut s = String::from("fraction,train_videos,warmup_steps,val_mse,test_mse\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.fraction, r.train_videos, r.warmup_steps, r.val_mse, r.test_mse
        );
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Line chart of validation MSE against the data fraction (log2 x axis).
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let (w, h, m) = (480.0, 320.0, 50.0);
    let mut pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.fraction.log2(), r.val_mse)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (x0, x1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let y1 = pts.iter().fold(0.0f64, |a, p| a.max(p.1)) * 1.1;
    let sx = |x: f64| m + (x - x0) / (x1 - x0).max(1e-9) * (w - 2.0 * m);
    let sy = |y: f64| h - m - y / y1.max(1e-12) * (h - 2.0 * m);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/>"#,
        b = h - m,
        r = w - m
    );
    for &(x, _) in &pts {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(x),
            h - m + 15.0,
            fraction_label(x)
        );
    }
    for k in 0..=4 {
        let y = y1 * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{y:.3}</text>"#,
            m - 5.0,
            sy(y) + 4.0
        );
    }
    let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
    let _ = writeln!(
        svg,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        path.join(" ")
    );
    for &(x, y) in &pts {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"/>"#,
            sx(x),
            sy(y)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">fraction of training videos</text>"#,
        w / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">validation MSE</text>"#,
        h / 2.0,
        h / 2.0
    );
    svg.push_str("</svg>\n");
    svg
}

fn fraction_label(log2: f64) -> String {
    let k = (-log2).round() as i32;
    if k == 0 {
        "1".into()
    } else {
        format!("1/{}", 1u64 << k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_scales_linearly() {
        assert_eq!(scaled_warmup(5000, 0.5), 2500);
        assert_eq!(scaled_warmup(5000, 1.0), 5000);
        assert_eq!(scaled_warmup(5000, 1.0 / 64.0), 78);
        assert_eq!(scaled_warmup(10, 0.01), 1);
    }

    #[test]
    fn svg_has_one_point_per_row() {
        let rows: Vec<SweepRow> = DEFAULT_FRACTIONS
            .iter()
            .map(|&f| SweepRow {
                fraction: f,
                train_videos: 1,
                warmup_steps: 1,
                val_mse: 0.1 / f.sqrt(),
                test_mse: 0.0,
            })
            .collect();
        let svg = sweep_svg(&rows);
        assert_eq!(svg.matches("<circle").count(), rows.len());
        assert!(svg.contains("1/64"));
    }
}
