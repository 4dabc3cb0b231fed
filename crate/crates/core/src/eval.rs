//! Pose-error metrics, report files and heatmap export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::decoder::{export_maps, LikelihoodMaps, PoseEstimate};
use crate::error::{Error, Result};
use crate::geometry::{cos_sin_deg, AerialTile, Pose};
use crate::pnm::{quantize, Pnm};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [1.0, 3.0, 5.0];
pub const REPORT_FILE: &str = "report.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const TABLE_FILE: &str = "report.txt";
pub const SAMPLES_HEADER: &str =
    "sample_id,pred_x,pred_y,pred_theta,gt_x,gt_y,gt_theta,confidence,loc_error,ori_error,lat_error,lon_error";

/// Per-sample errors.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRow {
    pub id: String,
    pub pred: Pose,
    pub gt: Pose,
    pub confidence: f64,
    pub loc_error: f64,
    pub ori_error: f64,
    /// Error across the true heading.
    pub lat_error: f64,
    /// Error along the true heading.
    pub lon_error: f64,
}

impl SampleRow {
    pub fn new(id: impl Into<String>, pred: Pose, gt: Pose, confidence: f64) -> Self {
        let (lat_error, lon_error) = lateral_longitudinal(&pred, &gt);
        SampleRow {
            id: id.into(),
            loc_error: (pred.x - gt.x).hypot(pred.y - gt.y),
            ori_error: orientation_error(pred.theta, gt.theta),
            lat_error,
            lon_error,
            pred,
            gt,
            confidence,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub thresholds_m: Vec<f64>,
    pub thresholds_deg: Vec<f64>,
    pub mean_loc_error: f64,
    pub mean_ori_error: f64,
    pub mean_lat_error: f64,
    pub mean_lon_error: f64,
    /// Aligned with `thresholds_m`.
    pub recall_loc: Vec<f64>,
    pub recall_lat: Vec<f64>,
    pub recall_lon: Vec<f64>,
    /// Aligned with `thresholds_deg`.
    pub recall_ori: Vec<f64>,
    pub rows: Vec<SampleRow>,
}

/// Absolute circular difference in degrees, in `[0, 180]`.
pub fn orientation_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Error vector expressed in the ground-truth heading frame, as absolute
/// `(lateral, longitudinal)` components.
pub fn lateral_longitudinal(pred: &Pose, gt: &Pose) -> (f64, f64) {
    let (c, s) = cos_sin_deg(gt.theta);
    let (dx, dy) = (pred.x - gt.x, pred.y - gt.y);
    ((-s * dx + c * dy).abs(), (c * dx + s * dy).abs())
}

/// Fraction of `errors` at or below `threshold`.
pub fn recall(errors: &[f64], threshold: f64) -> f64 {
    errors.iter().filter(|&&e| e <= threshold).count() as f64 / errors.len() as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_thresholds(t: &[f64]) -> Result<()> {
    if t.is_empty() || t.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("thresholds must be finite, non-negative and increasing, got {t:?}")));
    }
    Ok(())
}

pub fn compute_metrics(
    estimates: &[PoseEstimate],
    ground_truths: &[Pose],
    thresholds_m: &[f64],
    thresholds_deg: &[f64],
) -> Result<EvalReport> {
    if estimates.len() != ground_truths.len() {
        return Err(Error::shape("ground-truth poses", estimates.len(), ground_truths.len()));
    }
    let rows = estimates
        .iter()
        .zip(ground_truths)
        .enumerate()
        .map(|(i, (e, gt))| SampleRow::new(format!("{i}"), e.pose, *gt, e.confidence))
        .collect();
    report_from_rows(rows, thresholds_m, thresholds_deg)
}

pub fn report_from_rows(rows: Vec<SampleRow>, thresholds_m: &[f64], thresholds_deg: &[f64]) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::invalid("cannot compute metrics over zero samples"));
    }
    check_thresholds(thresholds_m)?;
    check_thresholds(thresholds_deg)?;
    let col = |f: fn(&SampleRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let (loc, ori, lat, lon) = (
        col(|r| r.loc_error),
        col(|r| r.ori_error),
        col(|r| r.lat_error),
        col(|r| r.lon_error),
    );
    let recalls = |e: &[f64], t: &[f64]| t.iter().map(|&t| recall(e, t)).collect::<Vec<f64>>();
    Ok(EvalReport {
        thresholds_m: thresholds_m.to_vec(),
        thresholds_deg: thresholds_deg.to_vec(),
        mean_loc_error: mean(&loc),
        mean_ori_error: mean(&ori),
        mean_lat_error: mean(&lat),
        mean_lon_error: mean(&lon),
        recall_loc: recalls(&loc, thresholds_m),
        recall_lat: recalls(&lat, thresholds_m),
        recall_lon: recalls(&lon, thresholds_m),
        recall_ori: recalls(&ori, thresholds_deg),
        rows,
    })
}

impl EvalReport {
    /// Renames rows in order.
    pub fn with_ids<S: AsRef<str>>(mut self, ids: &[S]) -> Result<Self> {
        if ids.len() != self.rows.len() {
            return Err(Error::shape("sample ids", self.rows.len(), ids.len()));
        }
        for (r, id) in self.rows.iter_mut().zip(ids) {
            r.id = id.as_ref().to_string();
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Per-sample CSV. Values use the shortest exact decimal form.
    pub fn samples_csv(&self) -> String {
        let mut s = format!("{SAMPLES_HEADER}\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.id,
                r.pred.x,
                r.pred.y,
                r.pred.theta,
                r.gt.x,
                r.gt.y,
                r.gt.theta,
                r.confidence,
                r.loc_error,
                r.ori_error,
                r.lat_error,
                r.lon_error
            )
            .expect("write to string");
        }
        s
    }

    /// Inverse of [`samples_csv`](Self::samples_csv); summary statistics are
    /// recomputed from the rows.
    pub fn parse_samples_csv(text: &str, thresholds_m: &[f64], thresholds_deg: &[f64]) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == SAMPLES_HEADER => {}
            _ => return Err(Error::invalid(format!("samples CSV must start with {SAMPLES_HEADER:?}"))),
        }
        let mut rows = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 12 {
                return Err(Error::invalid(format!("line {}: expected 12 fields, got {}", n + 1, f.len())));
            }
            let v = f[1..]
                .iter()
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::invalid(format!("line {}: bad number {x:?}", n + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(SampleRow {
                id: f[0].to_string(),
                pred: Pose::new(v[0], v[1], v[2])?,
                gt: Pose::new(v[3], v[4], v[5])?,
                confidence: v[6],
                loc_error: v[7],
                ori_error: v[8],
                lat_error: v[9],
                lon_error: v[10],
            });
        }
        report_from_rows(rows, thresholds_m, thresholds_deg)
    }

    /// Column names of [`summary_values`](Self::summary_values).
    pub fn summary_columns(&self) -> Vec<String> {
        let mut c: Vec<String> = ["samples", "mean_loc_error", "mean_ori_error", "mean_lat_error", "mean_lon_error"]
            .map(String::from)
            .to_vec();
        for (name, unit, t) in [
            ("recall_loc", "m", &self.thresholds_m),
            ("recall_lat", "m", &self.thresholds_m),
            ("recall_lon", "m", &self.thresholds_m),
            ("recall_ori", "deg", &self.thresholds_deg),
        ] {
            c.extend(t.iter().map(|t| format!("{name}@{t}{unit}")));
        }
        c
    }

    pub fn summary_values(&self) -> Vec<f64> {
        let mut v = vec![
            self.rows.len() as f64,
            self.mean_loc_error,
            self.mean_ori_error,
            self.mean_lat_error,
            self.mean_lon_error,
        ];
        for r in [&self.recall_loc, &self.recall_lat, &self.recall_lon, &self.recall_ori] {
            v.extend_from_slice(r);
        }
        v
    }

    /// Two-line CSV: header and values.
    pub fn summary_csv(&self) -> String {
        let vals: Vec<String> = self.summary_values().iter().map(|v| v.to_string()).collect();
        format!("{}\n{}\n", self.summary_columns().join(","), vals.join(","))
    }

    /// Fixed-width table with position error split into lateral and
    /// longitudinal recall, followed by Euclidean and orientation recall.
    pub fn text_table(&self, label: &str) -> String {
        let pct = |v: &[f64]| v.iter().map(|x| format!("{:>7.2}", 100.0 * x)).collect::<String>();
        let heads = |t: &[f64], u: &str| t.iter().map(|t| format!("{:>7}", format!("{t}{u}"))).collect::<String>();
        let mut s = String::new();
        let w = label.len().max(6);
        writeln!(
            s,
            "{:<w$} | {:>17} | {:^w3$} | {:^w3$} | {:^w3$} | {:^w4$}",
            "run",
            "loc / ori error",
            "lat R@Xm",
            "long R@Xm",
            "R@Xm",
            "ori R@X°",
            w3 = 7 * self.thresholds_m.len(),
            w4 = 7 * self.thresholds_deg.len(),
        )
        .unwrap();
        writeln!(
            s,
            "{:<w$} | {:>17} | {} | {} | {} | {}",
            "",
            "(m / deg)",
            heads(&self.thresholds_m, "m"),
            heads(&self.thresholds_m, "m"),
            heads(&self.thresholds_m, "m"),
            heads(&self.thresholds_deg, "°"),
        )
        .unwrap();
        writeln!(
            s,
            "{:<w$} | {:>17} | {} | {} | {} | {}",
            label,
            format!("{:.2} / {:.2}", self.mean_loc_error, self.mean_ori_error),
            pct(&self.recall_lat),
            pct(&self.recall_lon),
            pct(&self.recall_loc),
            pct(&self.recall_ori),
        )
        .unwrap();
        s
    }

    /// Writes [`REPORT_FILE`], [`SAMPLES_FILE`] and [`TABLE_FILE`] into `dir`.
    pub fn write(&self, dir: &Path, label: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = Vec::new();
        for (name, text) in [
            (REPORT_FILE, self.summary_csv()),
            (SAMPLES_FILE, self.samples_csv()),
            (TABLE_FILE, self.text_table(label)),
        ] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            out.push(p);
        }
        Ok(out)
    }
}

/// Tile blended half and half with the max-normalized location map.
pub fn overlay(maps: &LikelihoodMaps, tile: &AerialTile) -> Result<Pnm> {
    if (tile.height, tile.width) != (maps.height, maps.width) {
        return Err(Error::invalid(format!(
            "tile is {}×{} but the maps are {}×{}",
            tile.height, tile.width, maps.height, maps.width
        )));
    }
    let max = maps.loc.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut data = Vec::with_capacity(tile.values.len());
    for (i, &m) in maps.loc.iter().enumerate() {
        for c in 0..3 {
            let t = tile.values[3 * i + c] as f64;
            data.push(quantize(0.5 * t + 0.5 * m * scale, 255));
        }
    }
    Ok(Pnm {
        width: tile.width,
        height: tile.height,
        channels: 3,
        maxval: 255,
        data,
    })
}

/// Writes `{id}_loc.pgm`, `{id}_ori{k}.pgm` for the argmax bin `k`, and
/// `{id}_overlay.ppm` into `dir`.
pub fn export_heatmap(maps: &LikelihoodMaps, tile: &AerialTile, dir: &Path, id: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let est = crate::decoder::extract_pose_argmax(maps, tile.pixels_per_meter);
    let mut written = export_maps(maps, dir, id, &[est.bin])?;
    let p = dir.join(format!("{id}_overlay.ppm"));
    overlay(maps, tile)?.write(&p)?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(x: f64, y: f64, theta: f64) -> PoseEstimate {
        PoseEstimate {
            pose: Pose::new(x, y, theta).unwrap(),
            confidence: 0.5,
            cell: (0, 0),
            bin: 0,
            loc_map: Vec::new(),
            ori_slice: Vec::new(),
        }
    }

    #[test]
    fn perfect_predictions() {
        let gts = [Pose::new(1.0, 2.0, 3.0).unwrap(), Pose::new(4.0, 5.0, 359.0).unwrap()];
        let es: Vec<_> = gts.iter().map(|p| est(p.x, p.y, p.theta)).collect();
        let r = compute_metrics(&es, &gts, &DEFAULT_THRESHOLDS, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.mean_loc_error, 0.0);
        assert_eq!(r.mean_ori_error, 0.0);
        assert!(r.recall_loc.iter().chain(&r.recall_ori).all(|&v| v == 1.0));
    }

    #[test]
    fn counts_and_wrap() {
        let gt = Pose::new(10.0, 10.0, 1.0).unwrap();
        let es = [est(10.5, 10.0, 359.0), est(10.0, 12.0, 1.0), est(16.0, 10.0, 1.0)];
        let r = compute_metrics(&es, &[gt; 3], &DEFAULT_THRESHOLDS, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.recall_loc, vec![1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(r.rows[0].ori_error, 2.0);
    }

    #[test]
    fn lateral_is_across_heading() {
        let gt = Pose::new(0.0, 0.0, 90.0).unwrap();
        let (lat, lon) = lateral_longitudinal(&Pose::new(2.0, 0.0, 0.0).unwrap(), &gt);
        assert!((lat - 2.0).abs() < 1e-12 && lon.abs() < 1e-12);
    }

    #[test]
    fn empty_is_rejected() {
        assert!(compute_metrics(&[], &[], &DEFAULT_THRESHOLDS, &DEFAULT_THRESHOLDS).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let gt = Pose::new(3.25, 7.0, 12.5).unwrap();
        let es = [est(1.0 / 3.0, 9.1, 200.0), est(3.0, 7.0, 13.0)];
        let r = compute_metrics(&es, &[gt; 2], &DEFAULT_THRESHOLDS, &DEFAULT_THRESHOLDS)
            .unwrap()
            .with_ids(&["a", "b"])
            .unwrap();
        let back = EvalReport::parse_samples_csv(&r.samples_csv(), &DEFAULT_THRESHOLDS, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.summary_columns().len(), r.summary_values().len());
    }
}
