mod common;

use std::fs;
use std::path::Path;

use proptest::prelude::*;
use rand::Rng;
use xmodal::cli::{ablation_header, parse_ablation, run_cli, ABLATION, ABLATION_FILE, ABLATION_THRESHOLDS};
use xmodal::decoder::{LikelihoodMaps, PoseEstimate};
use xmodal::eval::*;
use xmodal::geometry::{AerialTile, Pose};
use xmodal::model::ModelConfig;
use xmodal::pnm::Pnm;
use xmodal::trainer::TrainConfig;

fn est(pose: Pose) -> PoseEstimate {
    PoseEstimate {
        pose,
        confidence: 0.5,
        cell: (0, 0),
        bin: 0,
        loc_map: Vec::new(),
        ori_slice: Vec::new(),
    }
}

fn count_within(errors: &[f64], t: f64) -> usize {
    let mut n = 0;
    for e in errors {
        if *e <= t {
            n += 1;
        }
    }
    n
}

#[test]
fn metrics_match_brute_force_recount() {
    let mut rng = common::rng(11);
    let tm = [0.5, 1.0, 3.0, 5.0, 10.0];
    let td = [1.0, 5.0, 30.0];
    for _ in 0..1000 {
        let n = rng.random_range(1..20);
        let mut es = Vec::new();
        let mut gts = Vec::new();
        let (mut loc, mut ori) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let gt = Pose::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0), rng.random_range(0.0..360.0))
                .unwrap();
            let p = Pose::new(
                gt.x + rng.random_range(-8.0..8.0),
                gt.y + rng.random_range(-8.0..8.0),
                rng.random_range(0.0..360.0),
            )
            .unwrap();
            loc.push(((p.x - gt.x).powi(2) + (p.y - gt.y).powi(2)).sqrt());
            let mut d = (p.theta - gt.theta).abs();
            if d > 180.0 {
                d = 360.0 - d;
            }
            ori.push(d);
            es.push(est(p));
            gts.push(gt);
        }
        let r = compute_metrics(&es, &gts, &tm, &td).unwrap();
        for (i, t) in tm.iter().enumerate() {
            assert_eq!(r.recall_loc[i], count_within(&loc, *t) as f64 / n as f64);
        }
        for (i, t) in td.iter().enumerate() {
            // Orientation errors straddling a threshold by a rounding error are
            // recounted against the implementation's own value.
            let own: Vec<f64> = r.rows.iter().map(|row| row.ori_error).collect();
            assert!(own.iter().zip(&ori).all(|(a, b)| (a - b).abs() < 1e-9));
            assert_eq!(r.recall_ori[i], count_within(&own, *t) as f64 / n as f64);
        }
        let ml = loc.iter().sum::<f64>() / n as f64;
        let mo = ori.iter().sum::<f64>() / n as f64;
        assert!((r.mean_loc_error - ml).abs() < 1e-12);
        assert!((r.mean_ori_error - mo).abs() < 1e-9);
    }
}

#[test]
fn recall_worked_example() {
    let gt = Pose::new(20.0, 20.0, 0.0).unwrap();
    let es = [
        est(Pose::new(20.5, 20.0, 0.0).unwrap()),
        est(Pose::new(20.0, 22.0, 0.0).unwrap()),
        est(Pose::new(26.0, 20.0, 0.0).unwrap()),
    ];
    let r = compute_metrics(&es, &[gt; 3], &[1.0, 3.0, 5.0], &[1.0]).unwrap();
    assert_eq!(r.recall_loc, vec![1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
    assert_eq!(orientation_error(359.0, 1.0), 2.0);
    assert_eq!(orientation_error(1.0, 359.0), 2.0);
    assert_eq!(orientation_error(0.0, 180.0), 180.0);
}

#[test]
fn bad_inputs_are_rejected() {
    let p = Pose::new(1.0, 1.0, 0.0).unwrap();
    assert!(compute_metrics(&[est(p)], &[p, p], &DEFAULT_THRESHOLDS, &DEFAULT_THRESHOLDS).is_err());
    assert!(compute_metrics(&[], &[], &DEFAULT_THRESHOLDS, &DEFAULT_THRESHOLDS).is_err());
    assert!(compute_metrics(&[est(p)], &[p], &[3.0, 1.0], &DEFAULT_THRESHOLDS).is_err());
}

fn pose_strategy() -> impl Strategy<Value = Pose> {
    (0.0..100.0f64, 0.0..100.0f64, 0.0..360.0f64).prop_map(|(x, y, t)| Pose::new(x, y, t).unwrap())
}

proptest! {
    #[test]
    fn recall_is_monotone_in_threshold(errs in prop::collection::vec(0.0..20.0f64, 1..40), a in 0.0..20.0f64, b in 0.0..20.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(recall(&errs, lo) <= recall(&errs, hi));
    }

    #[test]
    fn samples_csv_round_trips(pairs in prop::collection::vec((pose_strategy(), pose_strategy(), 0.0..1.0f64), 1..10)) {
        let rows: Vec<SampleRow> = pairs
            .iter()
            .enumerate()
            .map(|(i, (p, g, c))| SampleRow::new(format!("s{i:03}"), *p, *g, *c))
            .collect();
        let r = report_from_rows(rows, &DEFAULT_THRESHOLDS, &DEFAULT_THRESHOLDS).unwrap();
        let back = EvalReport::parse_samples_csv(&r.samples_csv(), &DEFAULT_THRESHOLDS, &DEFAULT_THRESHOLDS).unwrap();
        prop_assert_eq!(back, r);
    }

    #[test]
    fn lateral_and_longitudinal_split_the_distance(p in pose_strategy(), g in pose_strategy()) {
        let row = SampleRow::new("x", p, g, 0.0);
        prop_assert!((row.lat_error.hypot(row.lon_error) - row.loc_error).abs() < 1e-9);
        prop_assert!(row.ori_error <= 180.0);
    }
}

fn grey_tile(n: usize, v: f32) -> AerialTile {
    AerialTile::new(n, n, 1.0, vec![v; n * n * 3]).unwrap()
}

fn maps_with_loc(n: usize, loc: Vec<f64>) -> LikelihoodMaps {
    let bins = 4;
    LikelihoodMaps::new(n, n, bins, loc, vec![1.0 / bins as f64; bins * n * n], 0.5).unwrap()
}

#[test]
fn one_hot_overlay_is_brightest_at_the_hot_cell() {
    let n = 8;
    let mut loc = vec![0.0; n * n];
    loc[3 * n + 5] = 1.0;
    let img = overlay(&maps_with_loc(n, loc), &grey_tile(n, 0.2)).unwrap();
    let lum = |r: usize, c: usize| (0..3).map(|ch| img.data[(r * n + c) * 3 + ch] as u32).sum::<u32>();
    for r in 0..n {
        for c in 0..n {
            if (r, c) != (3, 5) {
                assert!(lum(r, c) < lum(3, 5));
            }
        }
    }
    assert_eq!(img.data[(3 * n + 5) * 3], (0.6f64 * 255.0).round() as u16);
    assert_eq!(img.data[0], (0.1f64 * 255.0).round() as u16);
}

#[test]
fn uniform_overlay_is_tile_blended_with_constant() {
    let n = 8;
    let mut rng = common::rng(5);
    let values: Vec<f32> = (0..n * n * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let tile = AerialTile::new(n, n, 1.0, values.clone()).unwrap();
    let img = overlay(&maps_with_loc(n, vec![1.0 / (n * n) as f64; n * n]), &tile).unwrap();
    for (q, t) in img.data.iter().zip(&values) {
        assert_eq!(*q, ((0.5 * *t as f64 + 0.5) * 255.0).round() as u16);
    }
    assert!(overlay(&maps_with_loc(n, vec![1.0 / 64.0; 64]), &grey_tile(4, 0.0)).is_err());
}

#[test]
fn exported_heatmaps_round_trip() {
    let n = 8;
    let mut rng = common::rng(9);
    let raw: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let loc: Vec<f64> = raw.iter().map(|v| v / s).collect();
    let maps = maps_with_loc(n, loc.clone());
    let dir = tempfile::tempdir().unwrap();
    let written = export_heatmap(&maps, &grey_tile(n, 0.5), dir.path(), "abc").unwrap();
    assert_eq!(written.len(), 3);
    assert!(written.iter().all(|p| p.exists()));
    let pgm = Pnm::read(&dir.path().join("abc_loc.pgm")).unwrap();
    assert_eq!((pgm.width, pgm.height, pgm.channels, pgm.maxval), (n, n, 1, 65535));
    let max = loc.iter().cloned().fold(0.0, f64::max);
    for (q, v) in pgm.data.iter().zip(&loc) {
        assert!((*q as f64 / 65535.0 - v / max).abs() <= 1.0 / 65535.0);
    }
    let ppm = Pnm::read(&dir.path().join("abc_overlay.ppm")).unwrap();
    assert_eq!((ppm.channels, ppm.maxval), (3, 255));
}

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["xmodal".to_string(), "--deterministic".into()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run_cli(argv)
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn gen(dir: &Path, seed: &str, count: &str, tile: &str) {
    let code = cli(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        seed,
        "--count",
        count,
        "--tile-size",
        tile,
    ]);
    assert_eq!(code, 0);
}

#[test]
fn gen_data_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen(a.path(), "7", "3", "64");
    gen(b.path(), "7", "3", "64");
    let ta = tree(a.path());
    assert_eq!(ta.len(), 1 + 3 * 4);
    assert_eq!(ta, tree(b.path()));
    let c = tempfile::tempdir().unwrap();
    gen(c.path(), "8", "3", "64");
    assert_ne!(ta, tree(c.path()));
}

#[test]
fn ground_truth_evaluation_is_perfect() {
    let data = tempfile::tempdir().unwrap();
    gen(data.path(), "1", "4", "64");
    let out = tempfile::tempdir().unwrap();
    let code = cli(&[
        "eval",
        "--force-ground-truth",
        "--dataset",
        data.path().to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(out.path().join(SAMPLES_FILE)).unwrap();
    let r = EvalReport::parse_samples_csv(&text, &DEFAULT_THRESHOLDS, &DEFAULT_THRESHOLDS).unwrap();
    assert_eq!(r.len(), 4);
    assert!(r.recall_loc.iter().chain(&r.recall_ori).all(|&v| v == 1.0));
    assert_eq!(r.mean_loc_error, 0.0);
    assert!(out.path().join(REPORT_FILE).exists() && out.path().join(TABLE_FILE).exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let m = missing.to_str().unwrap();
    let o = tmp.path().to_str().unwrap();
    assert_eq!(cli(&["no-such-command"]), 2);
    assert_eq!(cli(&["gen-data"]), 2);
    assert_eq!(cli(&["gen-data", "--out", o, "--tile-size", "48"]), 2);
    assert_eq!(cli(&["eval", "--dataset", m, "--out", o]), 2);
    assert_eq!(cli(&["eval", "--force-ground-truth", "--dataset", m, "--out", o]), 2);
    assert_eq!(cli(&["train", "--dataset", m, "--out", o]), 2);
    assert_eq!(cli(&["gradcheck", "--module", "nonsense"]), 2);
}

#[test]
fn tiny_ablation_writes_complete_rows() {
    let data = tempfile::tempdir().unwrap();
    gen(data.path(), "3", "4", "32");
    let cfg = TrainConfig {
        model: ModelConfig {
            tile_size: 32,
            bins: 8,
            feature_dim: 8,
            heads: 2,
            rel_pos_window: 1,
            stem_channels: [4, 4],
            stage_channels: [4, 6, 8],
            decoder_widths: [8, 6, 4, 4, 4],
            embed_dim: 8,
            embed_hidden: 8,
            ..ModelConfig::default()
        },
        epochs: 1,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let cfg_path = data.path().join("tiny.cfg");
    fs::write(&cfg_path, cfg.to_text()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let code = cli(&[
        "ablate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--dataset",
        data.path().to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
        "--val-count",
        "2",
    ]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(out.path().join(ABLATION_FILE)).unwrap();
    let (header, rows) = parse_ablation(&text).unwrap();
    assert_eq!(header[0], "variant");
    assert_eq!(rows.len(), ABLATION.len());
    for ((name, vals), v) in rows.iter().zip(ABLATION) {
        assert_eq!(name, v.name);
        assert_eq!(vals.len(), header.len() - 1);
        assert!(vals[6..].iter().all(|x| x.parse::<f64>().unwrap().is_finite()));
    }
    let m = ABLATION_THRESHOLDS.len();
    assert_eq!(header.len(), 7 + 5 + 4 * m);
    assert!(header.join(",").starts_with(&ablation_header(&[])));
    assert!(parse_ablation(&format!("{}\nfull,1\n", header.join(","))).is_err());
}
