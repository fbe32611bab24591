use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{encode_pnm, RawImage};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, METRIC_NAMES};
use crate::scoring::AnomalyMap;

/// Path of the text or JSON file that accompanies `path`.
pub fn sidecar_path(path: &Path, extension: &str) -> PathBuf {
    path.with_extension(extension)
}

/// Writes the pixel map as a P5 image scaled from its own min and max to
/// 0..255, with a `.txt` sidecar holding the raw values.
pub fn export_anomaly_map(map: &AnomalyMap, path: &Path) -> Result<()> {
    let t = &map.pixel_map;
    let &[h, w] = t.shape() else {
        return Err(Error::Format(format!("anomaly map has shape {:?}", t.shape())));
    };
    if !t.all_finite() {
        return Err(Error::Numerical("refusing to export a non-finite anomaly map".into()));
    }
    let min = t.data().iter().copied().fold(f32::INFINITY, f32::min);
    let max = t.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = max - min;
    let scale = if range > 0.0 { 255.0 / range } else { 0.0 };
    let pixels = t
        .data()
        .iter()
        .map(|&v| ((v - min) * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = RawImage {
        channels: 1,
        height: h,
        width: w,
        pixels,
    };
    fs::write(path, encode_pnm(&img)?).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path, "txt");
    let text = format!(
        "min={min:e}\nmax={max:e}\nscale={scale:e}\nimage_score={:e}\n",
        map.image_score
    );
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

/// Values from an anomaly-map sidecar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapSidecar {
    pub min: f32,
    pub max: f32,
    pub scale: f32,
    pub image_score: f64,
}

pub fn read_map_sidecar(path: &Path) -> Result<MapSidecar> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let get = |key: &str| -> Result<&str> {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| Error::Format(format!("{}: missing {key}", path.display())))
    };
    let num = |key: &str| -> Result<f64> {
        get(key)?
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("{}: bad value for {key}", path.display())))
    };
    Ok(MapSidecar {
        min: num("min")? as f32,
        max: num("max")? as f32,
        scale: num("scale")? as f32,
        image_score: num("image_score")?,
    })
}

/// Per-class rows plus their mean, as written next to the CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub classes: Vec<(String, MetricReport)>,
    pub mean: MetricReport,
}

fn percent(v: Option<f64>) -> String {
    v.map(|v| format!("{:.1}", v * 100.0)).unwrap_or_default()
}

/// CSV with one row per class and a final `mean` row, values ×100 to one
/// decimal and absent metrics left empty.
pub fn render_report_csv(report: &ReportFile) -> String {
    let mut out = String::from("class");
    for name in METRIC_NAMES.iter().chain(&["mad"]) {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    let rows = report.classes.iter().map(|(c, r)| (c.as_str(), r)).chain([("mean", &report.mean)]);
    for (class, r) in rows {
        out.push_str(class);
        for v in r.values().into_iter().chain([r.mad]) {
            let _ = write!(out, ",{}", percent(v));
        }
        out.push('\n');
    }
    out
}

/// Writes the CSV at `path` and a full-precision JSON sidecar beside it.
pub fn write_report(report: &ReportFile, path: &Path) -> Result<()> {
    fs::write(path, render_report_csv(report)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path, "json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

pub fn read_report_sidecar(path: &Path) -> Result<ReportFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::decode_pnm;
    use crate::tensor::Tensor;

    fn map_of(data: Vec<f32>, h: usize, w: usize, score: f64) -> AnomalyMap {
        AnomalyMap {
            pixel_map: Tensor::new([h, w], data).unwrap(),
            image_score: score,
            stage_maps: Vec::new(),
        }
    }

    #[test]
    fn constant_map_exports_constant_image() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        export_anomaly_map(&map_of(vec![0.7; 12], 3, 4, 0.7), &p).unwrap();
        let img = decode_pnm(&fs::read(&p).unwrap()).unwrap();
        assert!(img.pixels.iter().all(|&v| v == img.pixels[0]));
        let side = read_map_sidecar(&sidecar_path(&p, "txt")).unwrap();
        assert_eq!(side.min, side.max);
        assert_eq!(side.image_score, 0.7);
    }

    #[test]
    fn mask_pattern_survives_threshold_and_argmax() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let mask: Vec<bool> = (0..64).map(|i| i % 7 == 0 || i == 30).collect();
        let mut data: Vec<f32> = mask.iter().map(|&m| if m { 1.3 } else { 0.2 }).collect();
        data[30] = 1.9;
        export_anomaly_map(&map_of(data, 8, 8, 1.1), &p).unwrap();
        let img = decode_pnm(&fs::read(&p).unwrap()).unwrap();
        let thresholded: Vec<bool> = img.pixels.iter().map(|&v| v > 127).collect();
        assert_eq!(thresholded, mask);
        let argmax = img.pixels.iter().enumerate().max_by_key(|(_, &v)| v).unwrap().0;
        assert_eq!(argmax, 30);
    }

    #[test]
    fn report_rows_and_empty_cells() {
        let vitad = MetricReport {
            image_auroc: Some(0.983),
            image_ap: Some(0.994),
            image_f1max: Some(0.973),
            pixel_auroc: Some(0.977),
            pixel_ap: Some(0.553),
            pixel_f1max: Some(0.587),
            pixel_aupro: Some(0.914),
            mad: Some((0.983 + 0.994 + 0.973 + 0.977 + 0.553 + 0.587 + 0.914) / 7.0),
            ..Default::default()
        };
        let file = ReportFile {
            classes: vec![("bottle".into(), vitad.clone())],
            mean: vitad.clone(),
        };
        let csv = render_report_csv(&file);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2], "mean,98.3,99.4,97.3,97.7,55.3,58.7,91.4,85.4");
        assert_eq!(lines[1].trim_start_matches("bottle"), lines[2].trim_start_matches("mean"));

        let mut partial = vitad;
        partial.pixel_aupro = None;
        let csv = render_report_csv(&ReportFile {
            classes: vec![],
            mean: partial,
        });
        assert!(csv.lines().nth(1).unwrap().contains("58.7,,"));
    }

    #[test]
    fn sidecar_matches_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.csv");
        let r = MetricReport {
            image_auroc: Some(0.91234),
            pixel_auroc: Some(0.5),
            mad: Some(0.70617),
            ..Default::default()
        };
        let file = ReportFile {
            classes: vec![("a".into(), r.clone())],
            mean: r,
        };
        write_report(&file, &p).unwrap();
        let back = read_report_sidecar(&sidecar_path(&p, "json")).unwrap();
        assert_eq!(back, file);
        let csv = fs::read_to_string(&p).unwrap();
        let row: Vec<&str> = csv.lines().nth(2).unwrap().split(',').collect();
        for (cell, v) in row[1..].iter().zip(back.mean.values().into_iter().chain([back.mean.mad])) {
            assert_eq!(*cell, percent(v));
        }
    }
}
