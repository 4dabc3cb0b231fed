//! Adam, the batched training step, the epoch loop and checkpoints.
//!
//! A batch is processed in three phases: per-sample forward graphs are built
//! in parallel over the shared frozen parameters, the contrastive term is
//! evaluated over the whole batch, and each graph is then back-propagated
//! with its share of the loss. Per-sample gradients are summed in sample
//! order, so results do not depend on the number of worker threads.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::decoder::{read_estimate, PoseEstimate};
use crate::error::{Error, Result};
use crate::geometry::{augment_tile, project_to_bev, AerialTile, AugmentParams, BevSpec, Pose, TargetDistributions};
use crate::graph::{Graph, KlOrder};
use crate::model::{parse_bool, parse_value, Model, ModelConfig, ModelInput, ModelVars};
use crate::objectives::{infonce, sample_loss, LossBreakdown, LossWeights, SampleLoss, SampleTarget};
use crate::params::{ParamGrads, ParamStore};
use crate::rng::{self, streams};
use crate::synthdata::Sample;
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const TRAIN_LOG_HEADER: &str = "step,loss_total,loss_loc,loss_ori,loss_reg,loss_contrastive,loss_conf";

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Bias-corrected Adam update. Nothing is modified when a gradient is not
/// finite.
pub fn adam_step(params: &mut ParamStore, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
    if grads.grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape("parameter tensors", params.len(), grads.grads.len()));
    }
    for id in params.ids() {
        let g = grads.get(id);
        if g.shape() != params.get(id).shape() {
            return Err(Error::invalid(format!(
                "gradient for {} has shape {:?}, parameter has {:?}",
                params.name(id),
                g.shape(),
                params.get(id).shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                location: params.name(id).to_string(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for id in params.ids() {
        let i = id.index();
        let g = grads.get(id).data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for k in 0..p.len() {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Rounds every parameter to the nearest 32-bit float.
pub fn round_to_f32(params: &mut ParamStore) {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// 32 or 64.
    pub precision: u32,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub sigma_loc: f64,
    pub sigma_ori: f64,
    pub augment: bool,
    pub max_rot: f64,
    pub rot_prob: f64,
    pub jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            epochs: 50,
            batch_size: 8,
            seed: 0,
            precision: 64,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            sigma_loc: 2.0,
            sigma_ori: 2.0,
            augment: true,
            max_rot: 60.0,
            rot_prob: 0.7,
            jitter: 0.1,
        }
    }
}

impl TrainConfig {
    /// Applies one setting; unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if self.model.set(key, v)? {
            return Ok(());
        }
        let w = &mut self.weights;
        match key {
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "precision" => self.precision = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "beta1" => self.beta1 = parse_value(key, v)?,
            "beta2" => self.beta2 = parse_value(key, v)?,
            "adam_eps" => self.adam_eps = parse_value(key, v)?,
            "sigma_loc" => self.sigma_loc = parse_value(key, v)?,
            "sigma_ori" => self.sigma_ori = parse_value(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "max_rot" => self.max_rot = parse_value(key, v)?,
            "rot_prob" => self.rot_prob = parse_value(key, v)?,
            "jitter" => self.jitter = parse_value(key, v)?,
            "lambda1" => w.lambda1 = parse_value(key, v)?,
            "lambda2" => w.lambda2 = parse_value(key, v)?,
            "tau" => w.tau = parse_value(key, v)?,
            "conf_weight" => w.conf_weight = parse_value(key, v)?,
            "hard_k" => w.hard_k = parse_value(key, v)?,
            "use_reg" => w.use_reg = parse_bool(key, v)?,
            "use_contrastive" => w.use_contrastive = parse_bool(key, v)?,
            "symmetric_infonce" => w.symmetric = parse_bool(key, v)?,
            "kl_order" => {
                w.kl_order = match v.trim() {
                    "target" => KlOrder::TargetWeighted,
                    "pred" => KlOrder::PredWeighted,
                    _ => return Err(Error::invalid(format!("kl_order must be target or pred, got {v:?}"))),
                }
            }
            "huber_delta" => w.huber_delta = parse_value(key, v)?,
            "soft_temperature" => w.soft_temperature = parse_value(key, v)?,
            "conf_radius" => w.conf_radius = parse_value(key, v)?,
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: i + 1,
                    message: format!("expected `key = value`, got {line:?}"),
                });
            };
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Config {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { line, message } => Error::format(path, format!("line {line}: {message}")),
            other => Error::format(path, other.to_string()),
        })
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = self.model.to_map();
        let w = &self.weights;
        let entries: [(&str, String); 26] = [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", self.precision.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("sigma_loc", self.sigma_loc.to_string()),
            ("sigma_ori", self.sigma_ori.to_string()),
            ("augment", self.augment.to_string()),
            ("max_rot", self.max_rot.to_string()),
            ("rot_prob", self.rot_prob.to_string()),
            ("jitter", self.jitter.to_string()),
            ("lambda1", w.lambda1.to_string()),
            ("lambda2", w.lambda2.to_string()),
            ("tau", w.tau.to_string()),
            ("conf_weight", w.conf_weight.to_string()),
            ("hard_k", w.hard_k.to_string()),
            ("use_reg", w.use_reg.to_string()),
            ("use_contrastive", w.use_contrastive.to_string()),
            ("symmetric_infonce", w.symmetric.to_string()),
            (
                "kl_order",
                match w.kl_order {
                    KlOrder::TargetWeighted => "target".into(),
                    KlOrder::PredWeighted => "pred".into(),
                },
            ),
            ("huber_delta", w.huber_delta.to_string()),
            ("soft_temperature", w.soft_temperature.to_string()),
            ("conf_radius", w.conf_radius.to_string()),
        ];
        for (k, v) in entries {
            m.insert(k.into(), v);
        }
        m
    }

    /// Every setting as `key = value` text accepted by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        self.to_map().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.precision != 32 && self.precision != 64 {
            return Err(Error::invalid(format!("precision must be 32 or 64, got {}", self.precision)));
        }
        if !(self.lr >= 0.0) || !(self.sigma_loc > 0.0) || !(self.sigma_ori > 0.0) {
            return Err(Error::invalid("lr must be non-negative and target spreads positive"));
        }
        if !(0.0..=180.0).contains(&self.max_rot) || !(0.0..=1.0).contains(&self.rot_prob) || !(0.0..=1.0).contains(&self.jitter) {
            return Err(Error::invalid("augmentation needs max_rot in [0, 180], rot_prob and jitter in [0, 1]"));
        }
        self.model.validate()?;
        self.weights.validate()
    }

    fn augment_params(&self, seed: u64) -> AugmentParams {
        if self.augment {
            AugmentParams {
                seed,
                max_rot: self.max_rot,
                rot_prob: self.rot_prob,
                jitter_strength: self.jitter,
            }
        } else {
            AugmentParams::identity(seed)
        }
    }
}

/// A sample with its BEV raster precomputed; map augmentation leaves the
/// ego-centred scan untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub tile: AerialTile,
    pub pose: Pose,
    pub bev: Tensor,
}

pub fn prepare(samples: &[Sample]) -> Result<Vec<Prepared>> {
    samples
        .par_iter()
        .map(|s| {
            let spec = BevSpec {
                grid_h: s.tile.height,
                grid_w: s.tile.width,
                cell_size: s.cell_size,
                z_min: s.z_min,
                z_max: s.z_max,
            };
            Ok(Prepared {
                id: s.id.clone(),
                tile: s.tile.clone(),
                pose: s.pose,
                bev: project_to_bev(&s.cloud, &spec)?.to_tensor(),
            })
        })
        .collect()
}

/// One network input with its supervision.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub id: String,
    pub input: ModelInput,
    pub pose: Pose,
    pub targets: TargetDistributions,
}

impl BatchItem {
    pub fn new(p: &Prepared, tile: &AerialTile, pose: Pose, cfg: &TrainConfig) -> Result<Self> {
        Ok(BatchItem {
            id: p.id.clone(),
            input: ModelInput {
                aerial: tile.to_tensor(),
                bev: p.bev.clone(),
                pixels_per_meter: tile.pixels_per_meter,
            },
            pose,
            targets: TargetDistributions::new(&pose, tile, cfg.model.bins, cfg.sigma_loc, cfg.sigma_ori)?,
        })
    }

    pub fn plain(p: &Prepared, cfg: &TrainConfig) -> Result<Self> {
        Self::new(p, &p.tile, p.pose, cfg)
    }
}

struct Forward<'p> {
    graph: Graph<'p>,
    vars: ModelVars,
    loss: SampleLoss,
}

/// Batch objective, optional parameter gradients, and per-sample estimates.
pub struct BatchResult {
    pub loss: LossBreakdown,
    pub grads: Option<ParamGrads>,
    pub estimates: Vec<PoseEstimate>,
}

pub fn run_batch(
    model: &Model,
    params: &ParamStore,
    items: &[BatchItem],
    weights: &LossWeights,
    with_grads: bool,
) -> Result<BatchResult> {
    if items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let b = items.len();
    let forwards: Vec<Forward> = items
        .par_iter()
        .map(|it| {
            let mut graph = Graph::new(params);
            let vars = model.forward(&mut graph, &it.input)?;
            let target = SampleTarget {
                dists: &it.targets,
                pose: &it.pose,
                pixels_per_meter: it.input.pixels_per_meter,
            };
            let loss = sample_loss(&mut graph, &vars.decoder, &target, weights)?;
            if !loss.breakdown.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss".into(),
                    location: format!("sample {}", it.id),
                });
            }
            Ok(Forward { graph, vars, loss })
        })
        .collect::<Result<_>>()?;

    let mut loss = LossBreakdown::default();
    for f in &forwards {
        loss.add(&f.loss.breakdown);
    }
    loss.scale(1.0 / b as f64);
    let cw = weights.contrastive_weight();
    let contrastive = if weights.use_contrastive {
        let za: Vec<Vec<f64>> = forwards.iter().map(|f| f.graph.value(f.vars.z_aerial).data().to_vec()).collect();
        let zb: Vec<Vec<f64>> = forwards.iter().map(|f| f.graph.value(f.vars.z_bev).data().to_vec()).collect();
        let c = infonce(&za, &zb, weights.tau, weights.hard_k, weights.symmetric)?;
        if !c.loss.is_finite() {
            return Err(Error::NonFinite {
                what: "contrastive loss".into(),
                location: format!("batch starting at sample {}", items[0].id),
            });
        }
        Some(c)
    } else {
        None
    };
    loss.contrastive = contrastive.as_ref().map_or(0.0, |c| c.loss);
    loss.total = loss.weighted_total(weights);

    let grads = if with_grads {
        let per_sample: Vec<ParamGrads> = forwards
            .par_iter()
            .enumerate()
            .map(|(i, f)| {
                let mut seeds = vec![(f.loss.total, Tensor::scalar(1.0 / b as f64))];
                if let Some(c) = &contrastive {
                    if cw != 0.0 {
                        let scaled = |g: &[f64]| Tensor::from_fn(&[g.len()], |k| cw * g[k]);
                        seeds.push((f.vars.z_aerial, scaled(&c.grad_a[i])));
                        seeds.push((f.vars.z_bev, scaled(&c.grad_b[i])));
                    }
                }
                f.graph.backward_seeded(&seeds).param_grads(&f.graph)
            })
            .collect();
        let mut total = ParamGrads::zeros_like(params);
        for g in &per_sample {
            total.accumulate(g);
        }
        Some(total)
    } else {
        None
    };

    let estimates = forwards
        .iter()
        .zip(items)
        .map(|(f, it)| {
            let (_, h, w) = it.input.aerial.dims3()?;
            read_estimate(&f.graph, &f.vars.decoder, model.cfg.bins, it.input.pixels_per_meter, h, w)
        })
        .collect::<Result<_>>()?;
    Ok(BatchResult { loss, grads, estimates })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: LossBreakdown,
}

pub fn format_train_log(rows: &[LogRow]) -> String {
    let mut s = format!("{TRAIN_LOG_HEADER}\n");
    for r in rows {
        let l = &r.loss;
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.step, l.total, l.loc, l.ori, l.reg, l.contrastive, l.conf);
    }
    s
}

/// Mean losses and pose errors over an evaluation set.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub estimates: Vec<PoseEstimate>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
    pub val_loc_error: Option<f64>,
    pub val_ori_error: Option<f64>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub params: ParamStore,
    pub adam: AdamState,
    pub log: Vec<LogRow>,
    pub epochs: Vec<EpochSummary>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, mut params) = Model::new(cfg.model.clone())?;
        if cfg.precision == 32 {
            round_to_f32(&mut params);
        }
        Ok(Self::from_parts(cfg, model, params))
    }

    pub fn from_parts(cfg: TrainConfig, model: Model, params: ParamStore) -> Self {
        let mut adam = AdamState::new(&params, cfg.lr);
        adam.beta1 = cfg.beta1;
        adam.beta2 = cfg.beta2;
        adam.eps = cfg.adam_eps;
        Trainer {
            cfg,
            model,
            params,
            adam,
            log: Vec::new(),
            epochs: Vec::new(),
        }
    }

    /// One optimizer step on `items`.
    pub fn step(&mut self, items: &[BatchItem]) -> Result<LossBreakdown> {
        let r = run_batch(&self.model, &self.params, items, &self.cfg.weights, true)?;
        let grads = r.grads.expect("requested gradients");
        adam_step(&mut self.params, &grads, &mut self.adam)?;
        if self.cfg.precision == 32 {
            round_to_f32(&mut self.params);
        }
        self.log.push(LogRow {
            step: self.adam.t,
            loss: r.loss,
        });
        Ok(r.loss)
    }

    /// Shuffled, augmented pass over `data`; returns the mean step losses.
    pub fn train_epoch(&mut self, data: &[Prepared], epoch: usize) -> Result<LossBreakdown> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let epoch_seed = rng::derive_seed(self.cfg.seed, epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(epoch_seed, streams::SHUFFLE));
        let mut mean = LossBreakdown::default();
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let items = chunk
                .par_iter()
                .map(|&i| {
                    let p = &data[i];
                    let aug = self.cfg.augment_params(rng::derive_seed(epoch_seed, i as u64));
                    let (tile, pose) = augment_tile(&p.tile, &p.pose, &aug)?;
                    BatchItem::new(p, &tile, pose, &self.cfg)
                })
                .collect::<Result<Vec<_>>>()?;
            let l = self.step(&items)?;
            mean.add(&l);
            steps += 1;
        }
        mean.scale(1.0 / steps as f64);
        Ok(mean)
    }

    /// Loss and estimates over `data` in order, without augmentation.
    pub fn evaluate(&self, data: &[Prepared]) -> Result<Evaluation> {
        evaluate(&self.model, &self.params, data, &self.cfg)
    }

    /// Runs `cfg.epochs` epochs, evaluating on `val` after each, and writes
    /// the logs and final checkpoint under `out` when given.
    pub fn fit(&mut self, train: &[Prepared], val: Option<&[Prepared]>, out: Option<&Path>) -> Result<Vec<EpochSummary>> {
        for epoch in 1..=self.cfg.epochs {
            let train_loss = self.train_epoch(train, epoch)?;
            let mut summary = EpochSummary {
                epoch,
                train: train_loss,
                val: None,
                val_loc_error: None,
                val_ori_error: None,
            };
            if let Some(val) = val.filter(|v| !v.is_empty()) {
                let ev = self.evaluate(val)?;
                let (loc, ori) = mean_errors(&ev.estimates, val);
                summary.val = Some(ev.loss);
                summary.val_loc_error = Some(loc);
                summary.val_ori_error = Some(ori);
            }
            self.epochs.push(summary);
            if let Some(dir) = out {
                self.write_logs(dir)?;
            }
        }
        if let Some(dir) = out {
            self.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
        }
        Ok(self.epochs.clone())
    }

    pub fn write_logs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(TRAIN_LOG_FILE);
        fs::write(&p, format_train_log(&self.log)).map_err(|e| Error::io(&p, e))?;
        let mut s = String::from("epoch,train_total,val_total,val_loc,val_ori,val_reg,val_contrastive,val_conf,val_loc_error_m,val_ori_error_deg\n");
        for e in &self.epochs {
            let v = e.val.unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                e.epoch,
                e.train.total,
                v.total,
                v.loc,
                v.ori,
                v.reg,
                v.contrastive,
                v.conf,
                e.val_loc_error.unwrap_or(f64::NAN),
                e.val_ori_error.unwrap_or(f64::NAN)
            );
        }
        let p = dir.join(EPOCH_LOG_FILE);
        fs::write(&p, s).map_err(|e| Error::io(&p, e))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.params.save(path, &self.cfg.to_map())
    }
}

/// Loads a checkpoint written by [`Trainer::save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, Model, ParamStore)> {
    let (store, map) = ParamStore::load(path)?;
    let (model, params) = Model::from_checkpoint(store, &map)?;
    let mut cfg = TrainConfig {
        model: model.cfg.clone(),
        ..TrainConfig::default()
    };
    for (k, v) in &map {
        if !ModelConfig::KEYS.contains(&k.as_str()) {
            cfg.set(k, v).map_err(|e| Error::format(path, e.to_string()))?;
        }
    }
    Ok((cfg, model, params))
}

pub fn evaluate(model: &Model, params: &ParamStore, data: &[Prepared], cfg: &TrainConfig) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut loss = LossBreakdown::default();
    let mut estimates = Vec::with_capacity(data.len());
    for chunk in data.chunks(cfg.batch_size) {
        let items = chunk.iter().map(|p| BatchItem::plain(p, cfg)).collect::<Result<Vec<_>>>()?;
        let r = run_batch(model, params, &items, &cfg.weights, false)?;
        let mut l = r.loss;
        l.scale(chunk.len() as f64);
        loss.add(&l);
        estimates.extend(r.estimates);
    }
    loss.scale(1.0 / data.len() as f64);
    Ok(Evaluation { loss, estimates })
}

/// Mean Euclidean (meters) and circular (degrees) errors.
pub fn mean_errors(estimates: &[PoseEstimate], data: &[Prepared]) -> (f64, f64) {
    let n = estimates.len().max(1) as f64;
    let mut loc = 0.0;
    let mut ori = 0.0;
    for (e, p) in estimates.iter().zip(data) {
        loc += (e.pose.x - p.pose.x).hypot(e.pose.y - p.pose.y);
        let d = (e.pose.theta - p.pose.theta).rem_euclid(360.0);
        ori += d.min(360.0 - d);
    }
    (loc / n, ori / n)
}

/// Paths written by a training run under `out`.
pub fn run_outputs(out: &Path) -> [PathBuf; 3] {
    [out.join(CHECKPOINT_FILE), out.join(TRAIN_LOG_FILE), out.join(EPOCH_LOG_FILE)]
}
