//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a checked criterion fails.
//!
//! Criteria 7 to 9 need hours of single-core training at full scale. They run
//! in full only with `XMODAL_FULL_ACCEPTANCE=1`; otherwise 8 and 9 run on a
//! reduced fixture and 7 is reported as not run. `XMODAL_ACCEPTANCE_ONLY=7,9`
//! restricts the run to the listed criteria.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use common::{rng, Map};
use rand::Rng;
use xmodal::cli::{parse_ablation, run_cli, ABLATION, ABLATION_FILE};
use xmodal::decoder::{extract_pose_argmax, LikelihoodMaps, PoseEstimate};
use xmodal::encoders::{fft_log_magnitude_planes, FeatureMap};
use xmodal::eval::compute_metrics;
use xmodal::fusion::{attention_weights, cross_attention, AttentionConfig, CrossAttention};
use xmodal::geometry::{bin_center, project_to_bev, BevSpec, PointCloud, Pose};
use xmodal::gradcheck::{gradient_check, GradCheckOptions, GradModule};
use xmodal::model::ModelConfig;
use xmodal::objectives::{huber_regression_loss, infonce_loss, kl_divergence_loss, Embedding, KL_EPS};
use xmodal::params::ParamStore;
use xmodal::synthdata::{generate_scenes, sample_id, Sample, SceneSpec};
use xmodal::trainer::{mean_errors, prepare, BatchItem, Prepared, TrainConfig, Trainer, CHECKPOINT_FILE, TRAIN_LOG_FILE};

const FULL_ENV: &str = "XMODAL_FULL_ACCEPTANCE";
const ONLY_ENV: &str = "XMODAL_ACCEPTANCE_ONLY";

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn full() -> bool {
    std::env::var(FULL_ENV).is_ok_and(|v| v == "1")
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn planes(m: &Map) -> Vec<f32> {
    let v: Vec<f32> = m.v.iter().map(|&x| x as f32).collect();
    fft_log_magnitude_planes::<f32>(&v, m.c, m.h, m.w)
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn fft_invariance() -> Outcome {
    let n = 16;
    let h = n / 2;
    let mut r = rng(1);
    let (mut shift, mut half, mut quarter) = (0.0f32, 0.0f32, 0.0f32);
    for _ in 0..200 {
        let m = Map::random(&mut r, 1, n, n);
        let a = planes(&m);
        let (di, dj) = (r.random_range(0..n), r.random_range(0..n));
        let mut s = m.clone();
        let mut rot2 = m.clone();
        let mut rot1 = m.clone();
        for i in 0..n {
            for j in 0..n {
                s.v[((i + di) % n) * n + (j + dj) % n] = m.v[i * n + j];
                rot2.v[(n - 1 - i) * n + n - 1 - j] = m.v[i * n + j];
                rot1.v[i * n + j] = m.v[j * n + n - 1 - i];
            }
        }
        shift = shift.max(max_diff(&a, &planes(&s)));
        half = half.max(max_diff(&a, &planes(&rot2)));
        let b = planes(&rot1);
        for u in 0..n {
            for v in 0..n {
                let got = b[((u + h) % n) * n + (v + h) % n];
                let want = a[((v + h) % n) * n + (n - u + h) % n];
                quarter = quarter.max((got - want).abs());
            }
        }
    }
    check(
        shift <= 1e-5 && half <= 1e-5 && quarter <= 1e-5,
        format!("200 planes, max deviation shift {shift:.1e}, half turn {half:.1e}, quarter turn {quarter:.1e}"),
    )
}

fn attention_normalization() -> Outcome {
    let mut r = rng(2);
    let (mut row_err, mut shift_err) = (0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let heads = [1, 2, 4][r.random_range(0..3)];
        let d = heads * r.random_range(1..4);
        let (h, w) = (r.random_range(1..5), r.random_range(1..5));
        let cfg = AttentionConfig {
            heads,
            rel_pos_window: r.random_range(0..4),
            ..AttentionConfig::new(d)
        };
        let mut store = ParamStore::new();
        let att = CrossAttention::new(&mut store, "att", &cfg, &mut rng(seed)).unwrap();
        common::perturb(&mut store, &mut r, 0.5);
        let q = FeatureMap::new(Map::random(&mut r, d, h, w).tensor()).unwrap();
        let c = FeatureMap::new(Map::random(&mut r, d, h, w).tensor()).unwrap();
        for head in attention_weights(&q, &c, &att, &store).unwrap() {
            for row in head.chunks(h * w) {
                row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let before = cross_attention(&q, &c, &att, &store).unwrap();
        let k: f64 = r.random_range(-10.0..10.0);
        store.get_mut(att.rel_pos).data_mut().iter_mut().for_each(|v| *v += k);
        let after = cross_attention(&q, &c, &att, &store).unwrap();
        shift_err = shift_err.max(before.tensor().max_abs_diff(after.tensor()));
    }
    check(
        row_err <= 1e-6 && shift_err <= 1e-5,
        format!("100 fixtures, row-sum error {row_err:.1e}, score-shift change {shift_err:.1e}"),
    )
}

fn closed_forms() -> Outcome {
    let p = [0.1, 0.2, 0.3, 0.4];
    let identity = kl_divergence_loss(&p, &p, KL_EPS).unwrap().abs();
    let ln2 = (kl_divergence_loss(&[0.5, 0.5], &[1.0, 0.0], KL_EPS).unwrap() - 2f64.ln()).abs();
    let mut nce = 0.0f64;
    for b in [2, 4, 8] {
        let same: Vec<Embedding> = (0..b).map(|_| Embedding::new(vec![0.6, 0.8]).unwrap()).collect();
        nce = nce.max((infonce_loss(&same, &same, 0.07, b).unwrap() - (b as f64).ln()).abs());
    }
    let hub = (huber_regression_loss([0.5, 0.0], [0.0, 0.0], 1.0) - 0.125)
        .abs()
        .max((huber_regression_loss([2.0, 0.0], [0.0, 0.0], 1.0) - 1.5).abs());
    check(
        identity <= 1e-9 && ln2 <= 1e-6 && nce <= 1e-5 && hub <= 1e-12,
        format!("KL identity {identity:.1e}, ln 2 error {ln2:.1e}, ln B error {nce:.1e}, Huber error {hub:.1e}"),
    )
}

fn gradient_checks() -> Outcome {
    let opts = GradCheckOptions::default();
    let mut worst = (0.0f64, String::new());
    let mut coords = usize::MAX;
    for m in GradModule::ALL {
        let rep = gradient_check(m, 0, &opts).unwrap();
        coords = coords.min(rep.coords);
        if rep.max_rel_error >= worst.0 {
            worst = (rep.max_rel_error, rep.module.clone());
        }
    }
    let fault = gradient_check(GradModule::Full, 0, &GradCheckOptions { corrupt: true, ..opts })
        .unwrap()
        .max_rel_error;
    check(
        worst.0 < xmodal::cli::GRADCHECK_TOLERANCE && coords >= 200 && fault > 1e-2,
        format!(
            "{} modules, min {coords} coords, worst {:.2e} ({}), injected fault {fault:.2e}",
            GradModule::ALL.len(),
            worst.0,
            worst.1
        ),
    )
}

fn random_maps(r: &mut impl Rng) -> LikelihoodMaps {
    let (h, w, bins) = (r.random_range(1..16), r.random_range(1..16), r.random_range(2..12));
    let loc: Vec<f64> = (0..h * w).map(|_| r.random_range(1..8) as f64).collect();
    let s: f64 = loc.iter().sum();
    let mut ori = vec![0.0; bins * h * w];
    for p in 0..h * w {
        let col: Vec<f64> = (0..bins).map(|_| r.random_range(1..5) as f64).collect();
        let cs: f64 = col.iter().sum();
        for k in 0..bins {
            ori[k * h * w + p] = col[k] / cs;
        }
    }
    LikelihoodMaps::new(h, w, bins, loc.iter().map(|v| v / s).collect(), ori, 0.5).unwrap()
}

fn argmax_scan(m: &LikelihoodMaps) -> ((usize, usize), usize) {
    let mut best = (0, 0);
    for r in 0..m.height {
        for c in 0..m.width {
            if m.loc[r * m.width + c] > m.loc[best.0 * m.width + best.1] {
                best = (r, c);
            }
        }
    }
    let mut bin = 0;
    for k in 1..m.bins {
        let at = |k: usize| m.ori[(k * m.height + best.0) * m.width + best.1];
        if at(k) > at(bin) {
            bin = k;
        }
    }
    (best, bin)
}

fn bev_scan(points: &[[f64; 3]], s: &BevSpec) -> Vec<f32> {
    let mut out = vec![0.0f32; s.grid_h * s.grid_w];
    for p in points {
        if p[2] < s.z_min || p[2] > s.z_max {
            continue;
        }
        let col = (p[0] / s.cell_size).floor() + (s.grid_w / 2) as f64;
        let row = (p[1] / s.cell_size).floor() + (s.grid_h / 2) as f64;
        if col >= 0.0 && row >= 0.0 && (col as usize) < s.grid_w && (row as usize) < s.grid_h {
            out[row as usize * s.grid_w + col as usize] = 1.0;
        }
    }
    out
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng(5);
    let mut argmax_bad = 0;
    for _ in 0..100 {
        let m = random_maps(&mut r);
        let (cell, bin) = argmax_scan(&m);
        let e = extract_pose_argmax(&m, 1.0);
        let pose_ok = e.pose.x == cell.1 as f64 + 0.5
            && e.pose.y == cell.0 as f64 + 0.5
            && e.pose.theta == bin_center(bin, m.bins);
        if (e.cell, e.bin) != (cell, bin) || !pose_ok {
            argmax_bad += 1;
        }
    }

    let tm = [0.5, 1.0, 2.0, 3.0, 5.0, 10.0];
    let td = [1.0, 2.0, 5.0, 10.0, 30.0];
    let (mut metric_bad, mut mean_err) = (0, 0.0f64);
    for _ in 0..1000 {
        let n = r.random_range(1..30);
        let (mut es, mut gts, mut loc, mut ori) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let gt = Pose::new(r.random_range(0.0..64.0), r.random_range(0.0..64.0), r.random_range(0..360) as f64).unwrap();
            let p = Pose::new(
                gt.x + r.random_range(-6.0..6.0),
                gt.y + r.random_range(-6.0..6.0),
                r.random_range(0..360) as f64,
            )
            .unwrap();
            loc.push(((p.x - gt.x).powi(2) + (p.y - gt.y).powi(2)).sqrt());
            let d = (p.theta - gt.theta).abs();
            ori.push(if d > 180.0 { 360.0 - d } else { d });
            es.push(PoseEstimate {
                pose: p,
                confidence: 0.0,
                cell: (0, 0),
                bin: 0,
                loc_map: Vec::new(),
                ori_slice: Vec::new(),
            });
            gts.push(gt);
        }
        let rep = compute_metrics(&es, &gts, &tm, &td).unwrap();
        let frac = |e: &[f64], t: f64| e.iter().filter(|&&v| v <= t).count() as f64 / n as f64;
        let recalls_ok = tm.iter().enumerate().all(|(i, &t)| rep.recall_loc[i] == frac(&loc, t))
            && td.iter().enumerate().all(|(i, &t)| rep.recall_ori[i] == frac(&ori, t));
        if !recalls_ok {
            metric_bad += 1;
        }
        mean_err = mean_err
            .max((rep.mean_loc_error - loc.iter().sum::<f64>() / n as f64).abs())
            .max((rep.mean_ori_error - ori.iter().sum::<f64>() / n as f64).abs());
    }

    let mut bev_bad = 0;
    for k in 0..100 {
        let size = [16, 32, 64][k % 3];
        let s = BevSpec {
            grid_h: size,
            grid_w: size,
            cell_size: r.random_range(0.25..2.0),
            z_min: 0.3,
            z_max: 3.0,
        };
        let extent = size as f64 * s.cell_size * 0.7;
        let pts: Vec<[f64; 3]> = (0..r.random_range(0..300))
            .map(|_| [r.random_range(-extent..extent), r.random_range(-extent..extent), r.random_range(-0.5..4.0)])
            .collect();
        if project_to_bev(&PointCloud::new(pts.clone()), &s).unwrap().values != bev_scan(&pts, &s) {
            bev_bad += 1;
        }
    }
    check(
        argmax_bad == 0 && metric_bad == 0 && mean_err <= 1e-12 && bev_bad == 0,
        format!(
            "mismatches: argmax {argmax_bad}/100, recalls {metric_bad}/1000, BEV {bev_bad}/100; mean error {mean_err:.1e}"
        ),
    )
}

fn scenes(spec: &SceneSpec, seed: u64, n: usize) -> Vec<Prepared> {
    let samples: Vec<Sample> = generate_scenes(spec, seed, 0, n)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, s)| Sample::from_scene(sample_id(i), s))
        .collect();
    prepare(&samples).unwrap()
}

fn overfit_one_sample() -> Outcome {
    let data = scenes(&SceneSpec::default(), 0, 1);
    let cfg = TrainConfig {
        augment: false,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg).unwrap();
    let items = vec![BatchItem::plain(&data[0], &t.cfg).unwrap()];
    let first = t.step(&items).unwrap().total;
    let mut last = first;
    for _ in 1..200 {
        last = t.step(&items).unwrap().total;
    }
    let drop = 1.0 - last / first;
    check(
        drop >= 0.9,
        format!("total loss {first:.3} -> {last:.3} over 200 steps ({:.1}% reduction)", 100.0 * drop),
    )
}

fn criterion7_data() -> (Vec<Prepared>, Vec<Prepared>) {
    let mut data = scenes(&SceneSpec::default(), 0, 576);
    let val = data.split_off(512);
    (data, val)
}

fn end_to_end() -> Outcome {
    if !full() {
        return Outcome::NotRun(format!(
            "512/64-scene, 50-epoch run is opt-in ({FULL_ENV}=1); see README for the recorded result"
        ));
    }
    let (train, val) = criterion7_data();
    let mut t = Trainer::new(TrainConfig::default()).unwrap();
    let epochs = t.fit(&train, Some(&val), None).unwrap();
    let first = epochs[0].val.unwrap().total;
    let last = epochs.last().unwrap();
    let ev = t.evaluate(&val).unwrap();
    let (loc, ori) = mean_errors(&ev.estimates, &val);
    let ratio = last.val.unwrap().total / first;
    check(
        loc <= 3.0 && ori <= 10.0 && ratio <= 0.5,
        format!("val loc {loc:.2} m, ori {ori:.2} deg, final/epoch-1 val loss {ratio:.3}"),
    )
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
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
        epochs: 2,
        batch_size: 4,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["xmodal".to_string(), "--deterministic".into()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run_cli(argv)
}

fn ablation_harness() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let d = data.to_str().unwrap();
    let (scale, gen_args, val_count, cfg_args): (&str, Vec<&str>, &str, Vec<String>) = if full() {
        ("full", vec!["--count", "576"], "64", Vec::new())
    } else {
        let cfg_path = tmp.path().join("tiny.cfg");
        fs::write(&cfg_path, tiny_config().to_text()).unwrap();
        let cfg_arg = cfg_path.to_str().unwrap().to_string();
        ("reduced", vec!["--count", "12", "--tile-size", "32"], "4", vec!["--config".into(), cfg_arg])
    };
    let mut args = vec!["gen-data", "--out", d, "--seed", "0"];
    args.extend(gen_args);
    if cli(&args) != 0 {
        return Outcome::Fail("gen-data failed".into());
    }
    let run = |name: &str| -> Option<String> {
        let out = tmp.path().join(name);
        let mut a = vec!["ablate", "--dataset", d, "--out", out.to_str().unwrap(), "--val-count", val_count];
        a.extend(cfg_args.iter().map(|s| s.as_str()));
        (cli(&a) == 0).then(|| fs::read_to_string(out.join(ABLATION_FILE)).unwrap())
    };
    let (Some(a), Some(b)) = (run("a"), run("b")) else {
        return Outcome::Fail(format!("{scale}: ablate exited with an error"));
    };
    let Ok((header, rows)) = parse_ablation(&a) else {
        return Outcome::Fail(format!("{scale}: incomplete ablation rows"));
    };
    let names_ok = rows.len() == ABLATION.len() && rows.iter().zip(ABLATION).all(|((n, _), v)| n == v.name);
    let loc_col = header.iter().position(|h| h == "mean_loc_error").unwrap() - 1;
    let full_loc: f64 = rows[0].1[loc_col].parse().unwrap();
    let worse = rows[1..].iter().filter(|(_, v)| v[loc_col].parse::<f64>().unwrap() >= full_loc).count();
    check(
        names_ok && a == b,
        format!(
            "{scale}: {} complete rows, reruns identical: {}; {worse}/{} ablations no better than full model (reported only)",
            rows.len(),
            a == b,
            rows.len() - 1
        ),
    )
}

fn determinism() -> Outcome {
    let (scale, cfg, train, val) = if full() {
        let (t, v) = criterion7_data();
        ("full", TrainConfig::default(), t, v)
    } else {
        let spec = SceneSpec {
            tile_size: 32,
            ..SceneSpec::default()
        };
        let mut d = scenes(&spec, 0, 12);
        let v = d.split_off(8);
        ("reduced", tiny_config(), d, v)
    };
    let run = |dir: &Path| {
        let mut t = Trainer::new(cfg.clone()).unwrap();
        single_threaded(|| t.fit(&train, Some(&val), Some(dir))).unwrap();
        (
            fs::read(dir.join(TRAIN_LOG_FILE)).unwrap(),
            fs::read(dir.join(CHECKPOINT_FILE)).unwrap(),
        )
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (run(a.path()), run(b.path()));
    check(
        ra == rb,
        format!(
            "{scale}: train log {} bytes and checkpoint {} bytes, identical: {}",
            ra.0.len(),
            ra.1.len(),
            ra == rb
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var(ONLY_ENV)
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "FFT invariance", fft_invariance),
        (2, "attention normalization", attention_normalization),
        (3, "closed-form losses", closed_forms),
        (4, "gradient checks", gradient_checks),
        (5, "oracle equivalence", oracle_equivalence),
        (6, "overfit one sample", overfit_one_sample),
        (7, "synthetic end-to-end", end_to_end),
        (8, "ablation harness", ablation_harness),
        (9, "determinism", determinism),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Outcome::Pass(d) => println!("PASS criterion {n} ({name}): {d} [{secs:.1}s]"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {d} [{secs:.1}s]");
            }
            Outcome::NotRun(d) => println!("FAIL criterion {n} ({name}): not run, {d}"),
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
