use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::rollout::EvalResult;
use crate::env::TaskId;
use crate::error::{CtError, Result};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const TABLE_FILE: &str = "normalized_table.csv";
pub const TABLE_PLOT: &str = "normalized_table.png";
pub const CURVE_DIR: &str = "curves";

/// Evaluation return after each evaluated finetuning epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub task: TaskId,
    pub method: String,
    pub points: Vec<(usize, f64)>,
}

/// An evaluation result labelled with the method that produced it
/// (`scratch`, `pretrained`, a variant name, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledResult {
    pub method: String,
    pub result: EvalResult,
}

fn csv_err(path: &Path, e: csv::Error) -> CtError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CtError::storage(path, io),
        other => CtError::Integrity(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_summary(path: &Path, results: &[EvalResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "task",
        "mode",
        "checkpoint_id",
        "seed",
        "n_episodes",
        "mean_return",
        "std_return",
        "normalized_mean",
    ])
    .map_err(|e| csv_err(path, e))?;
    for r in results {
        let mode = match r.mode {
            crate::model::PolicyHead::Bc => "bc",
            crate::model::PolicyHead::Rtg => "rtg",
        };
        w.write_record([
            r.task.name().to_string(),
            mode.to_string(),
            r.checkpoint_id.clone(),
            r.seed.to_string(),
            r.n_episodes.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.normalized_mean.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CtError::storage(path, e))
}

fn file_stem(task: TaskId, method: &str) -> String {
    format!("{}__{method}", task.name().replace('/', "_"))
}

pub fn curve_path(dir: &Path, task: TaskId, method: &str) -> PathBuf {
    dir.join(CURVE_DIR).join(format!("{}.png", file_stem(task, method)))
}

/// Writes `summary.csv`, one curve image per `(task, method)`, and the
/// per-method normalized-reward table with its bar chart.
pub fn emit_report(dir: &Path, results: &[LabelledResult], curves: &[Curve]) -> Result<()> {
    if results.is_empty() {
        return Err(CtError::Config("no results to report".into()));
    }
    fs::create_dir_all(dir.join(CURVE_DIR)).map_err(|e| CtError::storage(dir, e))?;
    let plain: Vec<EvalResult> = results.iter().map(|r| r.result.clone()).collect();
    write_summary(&dir.join(SUMMARY_FILE), &plain)?;

    for c in curves {
        let path = curve_path(dir, c.task, &c.method);
        line_plot(&c.points).save(&path).map_err(|e| image_err(&path, e))?;
    }

    let table = dir.join(TABLE_FILE);
    let mut w = csv::Writer::from_path(&table).map_err(|e| csv_err(&table, e))?;
    w.write_record(["task", "method", "normalized_mean"])
        .map_err(|e| csv_err(&table, e))?;
    for r in results {
        w.write_record([
            r.result.task.name(),
            &r.method,
            &r.result.normalized_mean.to_string(),
        ])
        .map_err(|e| csv_err(&table, e))?;
    }
    w.flush().map_err(|e| CtError::storage(&table, e))?;
    let bars: Vec<f64> = results.iter().map(|r| r.result.normalized_mean).collect();
    let path = dir.join(TABLE_PLOT);
    bar_plot(&bars).save(&path).map_err(|e| image_err(&path, e))
}

fn image_err(path: &Path, e: image::ImageError) -> CtError {
    match e {
        image::ImageError::IoError(io) => CtError::storage(path, io),
        other => CtError::Integrity(format!("{}: {other}", path.display())),
    }
}

const W: u32 = 320;
const H: u32 = 200;
const MARGIN: u32 = 20;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
const INK: Rgb<u8> = Rgb([31, 119, 180]);

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, BG);
    for x in MARGIN..W - MARGIN {
        img.put_pixel(x, H - MARGIN, AXIS);
    }
    for y in MARGIN..=H - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
    img
}

fn value_range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((0f64, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        (lo, lo + 1.0)
    } else {
        (lo, hi)
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64)) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        if (0..W as i64).contains(&x) && (0..H as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, INK);
        }
    }
}

/// Polyline of `(epoch, value)` points on a plain axis frame.
pub fn line_plot(points: &[(usize, f64)]) -> RgbImage {
    let mut img = canvas();
    if points.is_empty() {
        return img;
    }
    let (lo, hi) = value_range(points.iter().map(|p| p.1));
    let x_max = points.iter().map(|p| p.0).max().unwrap().max(1) as f64;
    let span_x = (W - 2 * MARGIN) as f64;
    let span_y = (H - 2 * MARGIN) as f64;
    let px = |(e, v): (usize, f64)| {
        (
            MARGIN as i64 + (e as f64 / x_max * span_x) as i64,
            (H - MARGIN) as i64 - ((v - lo) / (hi - lo) * span_y) as i64,
        )
    };
    for pair in points.windows(2) {
        draw_line(&mut img, px(pair[0]), px(pair[1]));
    }
    for &p in points {
        let (x, y) = px(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                draw_line(&mut img, (x + dx, y + dy), (x + dx, y + dy));
            }
        }
    }
    img
}

pub fn bar_plot(values: &[f64]) -> RgbImage {
    let mut img = canvas();
    if values.is_empty() {
        return img;
    }
    let (lo, hi) = value_range(values.iter().copied());
    let slot = (W - 2 * MARGIN) / values.len() as u32;
    let span_y = (H - 2 * MARGIN) as f64;
    let base = (H - MARGIN) as f64 + lo / (hi - lo) * span_y;
    for (i, &v) in values.iter().enumerate() {
        let top = (H - MARGIN) as f64 - (v - lo) / (hi - lo) * span_y;
        let (y0, y1) = if top < base { (top, base) } else { (base, top) };
        let x0 = MARGIN + 1 + i as u32 * slot + slot / 6;
        let x1 = (x0 + slot * 2 / 3).min(W - MARGIN);
        for x in x0..x1.max(x0 + 1) {
            for y in y0.round() as u32..(y1.round() as u32).min(H - MARGIN) {
                img.put_pixel(x, y, INK);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PolicyHead;

    fn result(task: TaskId, mean: f64) -> EvalResult {
        EvalResult {
            task,
            mode: PolicyHead::Bc,
            returns: vec![mean - 1.0, mean + 1.0],
            mean,
            std: 1.0,
            normalized_mean: mean / task.expert_score(),
            checkpoint_id: "00ff".into(),
            seed: 3,
            n_episodes: 2,
        }
    }

    #[test]
    fn summary_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(SUMMARY_FILE);
        write_summary(&path, &[result(TaskId::PendulumBalance, 12.5)]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let norm = 12.5 / TaskId::PendulumBalance.expert_score();
        assert_eq!(
            text,
            format!(
                "task,mode,checkpoint_id,seed,n_episodes,mean_return,std_return,normalized_mean\n\
                 pendulum/balance,bc,00ff,3,2,12.5,1,{norm}\n"
            )
        );
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let results = vec![
            LabelledResult { method: "scratch".into(), result: result(TaskId::TwolinkarmReach, 4.0) },
            LabelledResult { method: "smart".into(), result: result(TaskId::TwolinkarmReach, 6.0) },
        ];
        let curves = vec![Curve { task: TaskId::TwolinkarmReach, method: "smart".into(), points: vec![(1, 2.0), (2, 6.0)] }];
        emit_report(dir.path(), &results, &curves).unwrap();
        let table = fs::read_to_string(dir.path().join(TABLE_FILE)).unwrap();
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().nth(2).unwrap().starts_with("twolinkarm/reach,smart,"));
        let img = image::open(curve_path(dir.path(), TaskId::TwolinkarmReach, "smart")).unwrap();
        assert_eq!((img.width(), img.height()), (W, H));
        assert!(dir.path().join(TABLE_PLOT).exists());
        assert!(matches!(emit_report(dir.path(), &[], &[]), Err(CtError::Config(_))));
    }

    #[test]
    fn plots_mark_their_data() {
        let ink = |img: &RgbImage| img.pixels().filter(|p| **p == INK).count();
        assert_eq!(ink(&line_plot(&[])), 0);
        assert!(ink(&line_plot(&[(0, 1.0), (5, 3.0), (10, 2.0)])) > 0);
        let bars = bar_plot(&[0.2, -0.1, 0.5]);
        assert!(ink(&bars) > 0);
        // Equal values still get a valid range.
        assert!(ink(&bar_plot(&[1.0, 1.0])) > 0);
    }
}

