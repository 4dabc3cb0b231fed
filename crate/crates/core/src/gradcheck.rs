//! Central finite-difference verification of the analytic gradients.
//!
//! Every fixture is a scalar function of some parameters and inputs. The
//! harness samples coordinates, perturbs each by `±h`, and compares the
//! difference quotient with the back-propagated gradient using
//! `|a − n| / max(|a|, |n|, floor)`, with the floor from [`noise_floor`].

use rand::seq::index;
use rand::Rng;

use crate::decoder::{Decoder, DecoderConfig, DecoderMode, DecoderVars};
use crate::encoders::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::fusion::{AttentionConfig, Fusion, FusionMode};
use crate::geometry::{AerialTile, Pose, TargetDistributions};
use crate::graph::{Graph, KlOrder, Var};
use crate::layers::Linear;
use crate::model::{Model, ModelConfig};
use crate::objectives::{infonce, LossWeights, ProjectionHead, BCE_EPS, KL_EPS};
use crate::params::{ParamGrads, ParamStore};
use crate::rng::{self, streams};
use crate::synthdata::{generate_scenes, Sample, SceneSpec};
use crate::tensor::Tensor;
use crate::trainer::{prepare, run_batch, BatchItem, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradModule {
    Toy,
    AerialEncoder,
    BevEncoder,
    Fusion,
    FusionConcat,
    Decoder,
    RegressionDecoder,
    Projection,
    LossLoc,
    LossOri,
    LossReg,
    LossConf,
    LossRegression,
    InfoNce,
    Full,
}

impl GradModule {
    pub const ALL: [GradModule; 15] = [
        GradModule::Toy,
        GradModule::AerialEncoder,
        GradModule::BevEncoder,
        GradModule::Fusion,
        GradModule::FusionConcat,
        GradModule::Decoder,
        GradModule::RegressionDecoder,
        GradModule::Projection,
        GradModule::LossLoc,
        GradModule::LossOri,
        GradModule::LossReg,
        GradModule::LossConf,
        GradModule::LossRegression,
        GradModule::InfoNce,
        GradModule::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradModule::Toy => "toy",
            GradModule::AerialEncoder => "aerial_encoder",
            GradModule::BevEncoder => "bev_encoder",
            GradModule::Fusion => "fusion",
            GradModule::FusionConcat => "fusion_concat",
            GradModule::Decoder => "decoder",
            GradModule::RegressionDecoder => "regression_decoder",
            GradModule::Projection => "projection",
            GradModule::LossLoc => "loss_loc",
            GradModule::LossOri => "loss_ori",
            GradModule::LossReg => "loss_reg",
            GradModule::LossConf => "loss_conf",
            GradModule::LossRegression => "loss_regression",
            GradModule::InfoNce => "loss_contrastive",
            GradModule::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Vec<GradModule>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        Self::ALL
            .iter()
            .find(|m| m.name() == s)
            .map(|m| vec![*m])
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
                Error::invalid(format!("unknown module {s:?}; expected all or one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub samples: usize,
    pub h: f64,
    /// Distorts the analytic gradient to exercise fault detection.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            samples: 200,
            h: 1e-5,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub module: String,
    pub coords: usize,
    /// Function value at the base point.
    pub value: f64,
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: String,
}

/// Analytic gradients with respect to parameters and inputs.
pub struct Grads {
    pub params: ParamGrads,
    pub inputs: Vec<Tensor>,
}

type EvalFn = dyn Fn(&ParamStore, &[Tensor], bool) -> Result<(f64, Option<Grads>)>;

struct Fixture {
    store: ParamStore,
    inputs: Vec<Tensor>,
    eval: Box<EvalFn>,
}

/// Scalarization weights bounded away from zero with mixed signs.
fn weights_for(n: usize) -> Tensor {
    Tensor::from_fn(&[n], |i| {
        let s = if i % 3 == 1 { -1.0 } else { 1.0 };
        s * (0.5 + 0.5 * (i as f64 * 1.37).cos().abs())
    })
}

/// Wraps a graph builder as a fixture: each returned node is reduced against
/// fixed weights and the results summed.
fn graph_fixture<F>(store: ParamStore, inputs: Vec<Tensor>, build: F) -> Fixture
where
    F: Fn(&mut Graph, &[Var]) -> Result<Vec<Var>> + 'static,
{
    let eval = move |store: &ParamStore, inputs: &[Tensor], want: bool| -> Result<(f64, Option<Grads>)> {
        let mut g = Graph::new(store);
        let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let outs = build(&mut g, &leaves)?;
        let mut total: Option<Var> = None;
        for o in outs {
            let n = g.value(o).len();
            let s = g.dot_const(o, weights_for(n))?;
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
        let total = total.ok_or_else(|| Error::invalid("fixture produced no outputs"))?;
        let value = g.value(total).item();
        if !want {
            return Ok((value, None));
        }
        let grads = g.backward(total);
        let inputs = leaves
            .iter()
            .map(|&v| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        Ok((
            value,
            Some(Grads {
                params: grads.param_grads(&g),
                inputs,
            }),
        ))
    };
    Fixture {
        store,
        inputs,
        eval: Box::new(eval),
    }
}

fn random_tensor(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Replaces every parameter with uniform noise so zero-initialized tensors
/// are exercised away from zero.
fn randomize(store: &mut ParamStore, r: &mut impl Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += r.random_range(-scale..scale);
        }
    }
}

fn small_backbone(in_channels: usize, fourier: bool) -> BackboneConfig {
    BackboneConfig {
        stem_channels: [4, 4],
        stage_channels: [4, 6, 8],
        use_fourier: fourier,
        ..BackboneConfig::new(in_channels, 8)
    }
}

fn target_fixture(h: usize, w: usize, bins: usize, pose: Pose) -> Result<TargetDistributions> {
    let tile = AerialTile::new(h, w, 1.0, vec![0.0f32; h * w * 3])?;
    TargetDistributions::new(&pose, &tile, bins, 2.0, 1.5)
}

fn build_fixture(module: GradModule, seed: u64) -> Result<Fixture> {
    let mut r = rng::stream(seed, streams::GRADCHECK);
    let mut store = ParamStore::new();
    Ok(match module {
        GradModule::Toy => {
            let lin = Linear::new(&mut store, "toy", 20, 10, &mut r);
            randomize(&mut store, &mut r, 1.0);
            let x = Tensor::from_fn(&[20], |i| if i % 2 == 0 { 1.0 } else { -1.0 } * r.random_range(0.5..1.5));
            graph_fixture(store, vec![x], move |g, v| Ok(vec![lin.forward(g, v[0])?]))
        }
        GradModule::AerialEncoder | GradModule::BevEncoder => {
            let bev = module == GradModule::BevEncoder;
            let c = if bev { 1 } else { 3 };
            let bb = Backbone::new(&mut store, "enc", small_backbone(c, bev), &mut r)?;
            randomize(&mut store, &mut r, 0.05);
            let x = random_tensor(&mut r, &[c, 64, 64], 0.0, 1.0);
            graph_fixture(store, vec![x], move |g, v| {
                let out = bb.forward(g, v[0])?;
                Ok(vec![out.features])
            })
        }
        GradModule::Fusion | GradModule::FusionConcat => {
            let cfg = AttentionConfig {
                rel_pos_window: 1,
                fusion_mode: if module == GradModule::Fusion {
                    FusionMode::CrossAttn
                } else {
                    FusionMode::Concat
                },
                ..AttentionConfig::new(8)
            };
            let fusion = Fusion::new(&mut store, "fusion", cfg, &mut r)?;
            randomize(&mut store, &mut r, 0.3);
            let a = random_tensor(&mut r, &[8, 2, 2], -1.0, 1.0);
            let b = random_tensor(&mut r, &[8, 2, 2], -1.0, 1.0);
            graph_fixture(store, vec![a, b], move |g, v| Ok(vec![fusion.forward(g, v[0], v[1])?]))
        }
        GradModule::Decoder | GradModule::RegressionDecoder => {
            let cfg = DecoderConfig {
                widths: [6, 6, 4, 4, 4],
                mode: if module == GradModule::Decoder {
                    DecoderMode::Likelihood
                } else {
                    DecoderMode::Regression
                },
                ..DecoderConfig::new(8, [4, 4, 4, 6], 6)
            };
            let dec = Decoder::new(&mut store, "dec", cfg, &mut r)?;
            randomize(&mut store, &mut r, 0.2);
            let inputs = vec![
                random_tensor(&mut r, &[8, 1, 1], -1.0, 1.0),
                random_tensor(&mut r, &[4, 16, 16], -1.0, 1.0),
                random_tensor(&mut r, &[4, 8, 8], -1.0, 1.0),
                random_tensor(&mut r, &[4, 4, 4], -1.0, 1.0),
                random_tensor(&mut r, &[6, 2, 2], -1.0, 1.0),
                random_tensor(&mut r, &[3, 32, 32], 0.0, 1.0),
            ];
            graph_fixture(store, inputs, move |g, v| {
                match dec.forward(g, v[0], [v[1], v[2], v[3], v[4]], v[5], 1.0)? {
                    DecoderVars::Likelihood { loc, ori, conf } => {
                        // Log-probabilities keep the tiny map entries visible.
                        let l = g.reshape(loc, &[32 * 32])?;
                        let ls = g.scale(l, 500.0);
                        // A sparse subset of the per-pixel bin distributions.
                        let mask = g.input(Tensor::from_fn(&[6, 32, 32], |i| if i % 37 == 0 { 1.0 } else { 0.0 }));
                        let ori = g.mul(ori, mask)?;
                        Ok(vec![ls, ori, conf])
                    }
                    DecoderVars::Regression { xy, dir, conf } => Ok(vec![xy, dir, conf]),
                }
            })
        }
        GradModule::Projection => {
            let head = ProjectionHead::new(&mut store, "proj", 8, 12, 6, &mut r);
            randomize(&mut store, &mut r, 0.3);
            let x = random_tensor(&mut r, &[8, 2, 2], -1.0, 1.0);
            graph_fixture(store, vec![x], move |g, v| Ok(vec![head.forward(g, v[0])?]))
        }
        GradModule::LossLoc | GradModule::LossReg => {
            let logits = random_tensor(&mut r, &[16, 16], -2.0, 2.0);
            let t = target_fixture(16, 16, 6, Pose::new(5.5, 9.5, 30.0)?)?;
            let loc_t = Tensor::new(&[256], t.loc_target.clone())?;
            let reg = module == GradModule::LossReg;
            graph_fixture(store, vec![logits], move |g, v| {
                let flat = g.reshape(v[0], &[256])?;
                let p = g.softmax(flat, 0)?;
                if reg {
                    let p = g.reshape(p, &[16, 16])?;
                    let far = g.soft_argmax(p, 1.0, 1.0)?;
                    let far = g.huber(far, [2.25, 13.0], 1.0)?;
                    let near = g.soft_argmax(p, 0.5, 1.0)?;
                    let near = g.huber(near, [8.2, 7.6], 1.0)?;
                    Ok(vec![far, near])
                } else {
                    let a = g.kl(p, loc_t.clone(), KL_EPS, KlOrder::TargetWeighted)?;
                    let b = g.kl(p, loc_t.clone(), KL_EPS, KlOrder::PredWeighted)?;
                    Ok(vec![a, b])
                }
            })
        }
        GradModule::LossOri => {
            let logits = random_tensor(&mut r, &[12, 8, 8], -2.0, 2.0);
            let t = target_fixture(8, 8, 12, Pose::new(3.5, 6.5, 100.0)?)?;
            let (row, col) = t.cell;
            let ori_t = Tensor::new(&[12], t.ori_target.clone())?;
            graph_fixture(store, vec![logits], move |g, v| {
                let p = g.softmax(v[0], 0)?;
                let c = g.select_column(p, row, col)?;
                Ok(vec![g.kl(c, ori_t.clone(), KL_EPS, KlOrder::TargetWeighted)?])
            })
        }
        GradModule::LossConf => {
            let z: Vec<Tensor> = (0..200).map(|_| random_tensor(&mut r, &[1], -4.0, 4.0)).collect();
            graph_fixture(store, z, move |g, v| {
                Ok(v.iter()
                    .enumerate()
                    .map(|(i, &z)| {
                        let p = g.sigmoid(z);
                        g.bce(p, (i % 2) as f64, BCE_EPS)
                    })
                    .collect())
            })
        }
        GradModule::LossRegression => {
            // Alternating position and direction inputs; positions straddle
            // both Huber branches.
            let inputs: Vec<Tensor> = (0..100)
                .flat_map(|_| [random_tensor(&mut r, &[2], 14.0, 18.0), random_tensor(&mut r, &[1, 2], -1.0, 1.0)])
                .collect();
            graph_fixture(store, inputs, move |g, v| {
                let mut out = Vec::new();
                for pair in v.chunks(2) {
                    out.push(g.huber(pair[0], [16.0, 15.5], 1.0)?);
                    let u = g.l2_normalize(pair[1]);
                    out.push(g.sq_dist(u, Tensor::new(&[1, 2], vec![0.6, 0.8])?)?);
                }
                Ok(out)
            })
        }
        GradModule::InfoNce => infonce_fixture(&mut r),
        GradModule::Full => full_fixture(seed)?,
    })
}

/// Raw vectors are L2-normalized row by row, then fed to the batch loss
/// whose gradient is seeded back through the graph.
fn infonce_fixture(r: &mut impl Rng) -> Fixture {
    let (b, d) = (8, 16);
    let inputs: Vec<Tensor> = (0..2 * b).map(|_| random_tensor(r, &[d], -1.0, 1.0)).collect();
    let eval = move |store: &ParamStore, inputs: &[Tensor], want: bool| -> Result<(f64, Option<Grads>)> {
        let mut g = Graph::new(store);
        let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let units: Vec<Var> = leaves.iter().map(|&v| g.l2_normalize(v)).collect();
        let rows = |range: std::ops::Range<usize>| -> Vec<Vec<f64>> {
            range.map(|i| g.value(units[i]).data().to_vec()).collect()
        };
        let (za, zb) = (rows(0..b), rows(b..2 * b));
        let c = infonce(&za, &zb, 0.3, 3, true)?;
        if !want {
            return Ok((c.loss, None));
        }
        let seeds: Vec<(Var, Tensor)> = (0..2 * b)
            .map(|i| {
                let gvec = if i < b { &c.grad_a[i] } else { &c.grad_b[i - b] };
                (units[i], Tensor::new(&[d], gvec.clone()).expect("length d"))
            })
            .collect();
        let grads = g.backward_seeded(&seeds);
        let inputs = leaves.iter().map(|&v| grads.wrt(v).cloned().expect("leaf gradient")).collect();
        Ok((
            c.loss,
            Some(Grads {
                params: grads.param_grads(&g),
                inputs,
            }),
        ))
    };
    Fixture {
        store: ParamStore::new(),
        inputs: Vec::new(),
        eval: Box::new(eval),
    }
    .with_inputs(inputs)
}

impl Fixture {
    fn with_inputs(mut self, inputs: Vec<Tensor>) -> Self {
        self.inputs = inputs;
        self
    }
}

/// Tiny end-to-end model on a batch of two generated scenes, including the
/// contrastive term.
fn full_fixture(seed: u64) -> Result<Fixture> {
    let model_cfg = ModelConfig {
        tile_size: 64,
        bins: 6,
        feature_dim: 8,
        heads: 4,
        rel_pos_window: 2,
        stem_channels: [4, 4],
        stage_channels: [4, 6, 8],
        decoder_widths: [6, 6, 4, 4, 4],
        embed_dim: 8,
        embed_hidden: 8,
        init_seed: seed,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        model: model_cfg.clone(),
        weights: LossWeights {
            tau: 0.5,
            hard_k: 1,
            ..LossWeights::default()
        },
        ..TrainConfig::default()
    };
    let (model, mut store) = Model::new(model_cfg)?;
    let mut r = rng::stream(seed, streams::GRADCHECK);
    randomize(&mut store, &mut r, 0.05);
    let scenes = generate_scenes(&SceneSpec::default(), seed, 0, 2)?;
    let samples: Vec<Sample> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| Sample::from_scene(format!("g{i}"), s))
        .collect();
    let items: Vec<BatchItem> = prepare(&samples)?
        .iter()
        .map(|p| BatchItem::plain(p, &cfg))
        .collect::<Result<_>>()?;
    let weights = cfg.weights.clone();
    let eval = move |store: &ParamStore, _: &[Tensor], want: bool| -> Result<(f64, Option<Grads>)> {
        let res = run_batch(&model, store, &items, &weights, want)?;
        Ok((
            res.loss.total,
            res.grads.map(|params| Grads {
                params,
                inputs: Vec::new(),
            }),
        ))
    };
    Ok(Fixture {
        store,
        inputs: Vec::new(),
        eval: Box::new(eval),
    })
}

#[derive(Clone, Copy)]
enum Coord {
    Param(usize, usize),
    Input(usize, usize),
}

pub fn gradient_check(module: GradModule, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut fx = build_fixture(module, seed)?;
    let (value, grads) = (fx.eval)(&fx.store, &fx.inputs, true)?;
    let floor = noise_floor(value, opts.h);
    let grads = grads.expect("gradients requested");

    let mut coords = Vec::new();
    for id in fx.store.ids() {
        coords.extend((0..fx.store.get(id).len()).map(|k| Coord::Param(id.index(), k)));
    }
    for (j, t) in fx.inputs.iter().enumerate() {
        coords.extend((0..t.len()).map(|k| Coord::Input(j, k)));
    }
    let mut r = rng::stream(seed ^ 0x5eed, streams::GRADCHECK);
    let picked: Vec<usize> = if coords.len() <= opts.samples {
        (0..coords.len()).collect()
    } else {
        let mut v = index::sample(&mut r, coords.len(), opts.samples).into_vec();
        v.sort_unstable();
        v
    };

    let ids: Vec<_> = fx.store.ids().collect();
    let mut worst = (0.0f64, String::new());
    for &ci in &picked {
        let (analytic, label) = match coords[ci] {
            Coord::Param(p, k) => (grads.params.grads[p].data()[k], format!("{}[{k}]", fx.store.name(ids[p]))),
            Coord::Input(j, k) => (grads.inputs[j].data()[k], format!("input{j}[{k}]")),
        };
        let analytic = if opts.corrupt { 1.5 * analytic + 1e-3 } else { analytic };
        let mut eval_at = |delta: f64| -> Result<f64> {
            let slot = match coords[ci] {
                Coord::Param(p, k) => &mut fx.store.get_mut(ids[p]).data_mut()[k],
                Coord::Input(j, k) => &mut fx.inputs[j].data_mut()[k],
            };
            let orig = *slot;
            *slot = orig + delta;
            let out = (fx.eval)(&fx.store, &fx.inputs, false);
            let slot = match coords[ci] {
                Coord::Param(p, k) => &mut fx.store.get_mut(ids[p]).data_mut()[k],
                Coord::Input(j, k) => &mut fx.inputs[j].data_mut()[k],
            };
            *slot = orig;
            Ok(out?.0)
        };
        let numeric = (eval_at(opts.h)? - eval_at(-opts.h)?) / (2.0 * opts.h);
        let rel = relative_error(analytic, numeric, floor);
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, format!("{label}: analytic {analytic:e}, numeric {numeric:e}"));
        }
    }
    Ok(GradCheckReport {
        module: module.name().to_string(),
        coords: picked.len(),
        value,
        max_rel_error: worst.0,
        worst: worst.1,
    })
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for [`relative_error`]. A central difference cannot
/// resolve slopes much below `ε·|f| / h`. Below the floor the comparison is
/// absolute and tolerates about a hundred ulps of roundoff in `f`.
pub fn noise_floor(value: f64, h: f64) -> f64 {
    (1e6 * f64::EPSILON * value.abs().max(1.0) / h).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_head_is_exact() {
        let r = gradient_check(GradModule::Toy, 1, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.coords, 200);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let opts = GradCheckOptions {
            corrupt: true,
            ..GradCheckOptions::default()
        };
        let r = gradient_check(GradModule::Toy, 1, &opts).unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
    }

    #[test]
    fn selector_parsing() {
        assert_eq!(GradModule::parse("all").unwrap().len(), 15);
        assert_eq!(GradModule::parse("fusion").unwrap(), vec![GradModule::Fusion]);
        assert!(GradModule::parse("nope").is_err());
    }
}
