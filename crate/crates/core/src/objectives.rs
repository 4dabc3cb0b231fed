//! Loss terms, the contrastive projection heads and the weighted objective.

use rand::Rng;

use crate::decoder::{extract_pose_argmax, DecoderVars, LikelihoodMaps};
use crate::encoders::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::{cos_sin_deg, Pose, TargetDistributions};
use crate::graph::{self, Graph, KlOrder, Var};
use crate::layers::{Linear, VecNorm};
use crate::params::ParamStore;
use crate::tensor::{self, Tensor};

pub const KL_EPS: f64 = 1e-9;
pub const BCE_EPS: f64 = 1e-9;
pub const DEFAULT_EMBED_DIM: usize = 64;

/// A unit-length embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        let norm = tensor::dot(&z, &z).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(format!("embedding norm is {norm}, expected 1")));
        }
        Ok(Embedding(z))
    }

    /// Scales `z` to unit length.
    pub fn normalized(z: Vec<f64>) -> Result<Self> {
        let norm = tensor::dot(&z, &z).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::invalid("cannot normalize a zero or non-finite vector"));
        }
        Ok(Embedding(z.iter().map(|v| v / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub conf_weight: f64,
    /// Negatives kept per row; the effective count is `min(hard_k, B - 1)`.
    pub hard_k: usize,
    pub use_reg: bool,
    pub use_contrastive: bool,
    /// Average both retrieval directions instead of aerial→BEV only.
    pub symmetric: bool,
    pub kl_order: KlOrder,
    pub huber_delta: f64,
    pub soft_temperature: f64,
    /// Location error (meters) under which a prediction counts as reliable.
    pub conf_radius: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 2.0,
            lambda2: 0.1,
            tau: 0.07,
            conf_weight: 0.1,
            hard_k: 8,
            use_reg: true,
            use_contrastive: true,
            symmetric: true,
            kl_order: KlOrder::TargetWeighted,
            huber_delta: 1.0,
            soft_temperature: 1.0,
            conf_radius: 3.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("conf_weight", self.conf_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.huber_delta > 0.0) || !(self.soft_temperature > 0.0) {
            return Err(Error::invalid("huber_delta and soft_temperature must be positive"));
        }
        Ok(())
    }

    fn reg_weight(&self) -> f64 {
        if self.use_reg { self.lambda1 } else { 0.0 }
    }

    pub fn contrastive_weight(&self) -> f64 {
        if self.use_contrastive { self.lambda2 } else { 0.0 }
    }
}

/// Unweighted loss terms plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub loc: f64,
    pub ori: f64,
    pub reg: f64,
    pub contrastive: f64,
    pub conf: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.loc + self.ori + w.reg_weight() * self.reg + w.contrastive_weight() * self.contrastive + w.conf_weight * self.conf
    }

    pub fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.loc += o.loc;
        self.ori += o.ori;
        self.reg += o.reg;
        self.contrastive += o.contrastive;
        self.conf += o.conf;
    }

    pub fn scale(&mut self, s: f64) {
        self.total *= s;
        self.loc *= s;
        self.ori *= s;
        self.reg *= s;
        self.contrastive *= s;
        self.conf *= s;
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.loc, self.ori, self.reg, self.contrastive, self.conf]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Pool → affine → layer norm → SiLU → affine → unit length.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    first: Linear,
    norm: VecNorm,
    second: Linear,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        ProjectionHead {
            first: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, rng),
            norm: VecNorm::new(store, &format!("{name}.norm"), hidden),
            second: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let m = g.spatial_mean(features)?;
        let h = self.first.forward(g, m)?;
        let h = self.norm.forward(g, h)?;
        let h = g.silu(h);
        let z = self.second.forward(g, h)?;
        Ok(g.l2_normalize(z))
    }
}

pub fn project_embedding(features: &FeatureMap, head: &ProjectionHead, params: &ParamStore) -> Result<Embedding> {
    let mut g = Graph::new(params);
    let x = g.input(features.tensor().clone());
    let z = head.forward(&mut g, x)?;
    Embedding::new(g.value(z).data().to_vec())
}

/// InfoNCE value with gradients with respect to both embedding batches.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_a: Vec<Vec<f64>>,
    pub grad_b: Vec<Vec<f64>>,
}

/// Contrastive loss over a batch of paired embeddings, restricted to the
/// `hard_k` most similar negatives per row.
pub fn infonce_loss(za: &[Embedding], zb: &[Embedding], tau: f64, hard_k: usize) -> Result<f64> {
    Ok(infonce(&raw(za), &raw(zb), tau, hard_k, true)?.loss)
}

fn raw(z: &[Embedding]) -> Vec<Vec<f64>> {
    z.iter().map(|e| e.0.clone()).collect()
}

/// Core InfoNCE on plain vectors. Rows must have unit norm.
pub fn infonce(za: &[Vec<f64>], zb: &[Vec<f64>], tau: f64, hard_k: usize, symmetric: bool) -> Result<InfoNce> {
    let b = za.len();
    if b == 0 || zb.len() != b {
        return Err(Error::invalid(format!(
            "contrastive batches must be non-empty and equal in size ({} vs {})",
            za.len(),
            zb.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    let d = za[0].len();
    for (i, z) in za.iter().chain(zb).enumerate() {
        if z.len() != d {
            return Err(Error::shape("embedding length", d, z.len()));
        }
        let n = tensor::dot(z, z).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(format!("embedding {i} has norm {n}, expected 1")));
        }
    }
    let sim: Vec<Vec<f64>> = za.iter().map(|a| zb.iter().map(|bb| tensor::dot(a, bb)).collect()).collect();
    let mut out = InfoNce {
        loss: 0.0,
        grad_a: vec![vec![0.0; d]; b],
        grad_b: vec![vec![0.0; d]; b],
    };
    let directions = if symmetric { 2 } else { 1 };
    let scale = 1.0 / (b * directions) as f64;
    let k = hard_k.min(b - 1);
    for dir in 0..directions {
        for i in 0..b {
            // Row i of the similarity matrix in this direction.
            let row: Vec<f64> = (0..b).map(|j| if dir == 0 { sim[i][j] } else { sim[j][i] }).collect();
            let mut negatives: Vec<usize> = (0..b).filter(|&j| j != i).collect();
            negatives.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
            let mut set = vec![i];
            set.extend_from_slice(&negatives[..k]);
            let logits: Vec<f64> = set.iter().map(|&j| row[j] / tau).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            out.loss += scale * (m + z.ln() - logits[0]);
            for (slot, &j) in set.iter().enumerate() {
                let p = (logits[slot] - m).exp() / z;
                let coef = scale * (p - if slot == 0 { 1.0 } else { 0.0 }) / tau;
                // Logit i→j is r_i · c_j / τ.
                let (gr, gc) = if dir == 0 {
                    (&mut out.grad_a, &mut out.grad_b)
                } else {
                    (&mut out.grad_b, &mut out.grad_a)
                };
                let (ri, cj) = if dir == 0 { (&za[i], &zb[j]) } else { (&zb[i], &za[j]) };
                gr[i].iter_mut().zip(cj).for_each(|(g, v)| *g += coef * v);
                gc[j].iter_mut().zip(ri).for_each(|(g, v)| *g += coef * v);
            }
        }
    }
    Ok(out)
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-5 {
        return Err(Error::invalid(format!("{what} sums to {s}, expected 1")));
    }
    Ok(())
}

/// `Σ target · (log(target + ε) − log(pred + ε))`.
pub fn kl_divergence_loss(pred: &[f64], target: &[f64], epsilon: f64) -> Result<f64> {
    kl_divergence_ordered(pred, target, epsilon, KlOrder::TargetWeighted)
}

pub fn kl_divergence_ordered(pred: &[f64], target: &[f64], epsilon: f64, order: KlOrder) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("distribution length", target.len(), pred.len()));
    }
    check_distribution(pred, "prediction")?;
    check_distribution(target, "target")?;
    Ok(graph::kl_value(pred, target, epsilon, order))
}

/// Per-coordinate Huber penalty summed over x and y.
pub fn huber_regression_loss(pred: [f64; 2], gt: [f64; 2], delta: f64) -> f64 {
    graph::huber_value(pred[0] - gt[0], delta) + graph::huber_value(pred[1] - gt[1], delta)
}

pub fn bce_loss(p: f64, label: f64) -> f64 {
    graph::bce_value(p, label, BCE_EPS)
}

/// Ground truth for one sample.
#[derive(Clone, Debug)]
pub struct SampleTarget<'a> {
    pub dists: &'a TargetDistributions,
    pub pose: &'a Pose,
    pub pixels_per_meter: f64,
}

/// Per-sample terms built on the graph; contrastive is handled batch-wide.
pub struct SampleLoss {
    /// Weighted sum of every term except the contrastive one.
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Builds the per-sample objective on `g` for decoder outputs `vars`.
pub fn sample_loss(g: &mut Graph, vars: &DecoderVars, target: &SampleTarget, w: &LossWeights) -> Result<SampleLoss> {
    let gt = [target.pose.x, target.pose.y];
    let cell = 1.0 / target.pixels_per_meter;
    let (loc, ori, reg, error) = match *vars {
        DecoderVars::Likelihood { loc, ori, .. } => {
            let l_loc = g.kl(loc, Tensor::new(&[target.dists.loc_target.len()], target.dists.loc_target.clone())?, KL_EPS, w.kl_order)?;
            let (r, c) = target.dists.cell;
            let col = g.select_column(ori, r, c)?;
            let ori_t = Tensor::new(&[target.dists.bins], target.dists.ori_target.clone())?;
            let l_ori = g.kl(col, ori_t, KL_EPS, w.kl_order)?;
            let l_reg = if w.use_reg {
                let xy = g.soft_argmax(loc, w.soft_temperature, cell)?;
                Some(g.huber(xy, gt, w.huber_delta)?)
            } else {
                None
            };
            let maps = LikelihoodMaps {
                height: target.dists.height,
                width: target.dists.width,
                bins: target.dists.bins,
                loc: g.value(loc).data().to_vec(),
                ori: Vec::new(),
                confidence: 0.0,
            };
            let p = argmax_position(&maps.loc, maps.width, target.pixels_per_meter);
            (l_loc, l_ori, l_reg, ((p[0] - gt[0]).powi(2) + (p[1] - gt[1]).powi(2)).sqrt())
        }
        DecoderVars::Regression { xy, dir, .. } => {
            let l_loc = g.huber(xy, gt, w.huber_delta)?;
            let (c, s) = cos_sin_deg(target.pose.theta);
            let l_ori = g.sq_dist(dir, Tensor::new(&[1, 2], vec![c, s])?)?;
            let p = g.value(xy).data();
            (l_loc, l_ori, None, ((p[0] - gt[0]).powi(2) + (p[1] - gt[1]).powi(2)).sqrt())
        }
    };
    let label = if error <= w.conf_radius { 1.0 } else { 0.0 };
    let conf = g.bce(vars.conf(), label, BCE_EPS);

    let mut total = g.add(loc, ori)?;
    if let Some(reg) = reg {
        let r = g.scale(reg, w.lambda1);
        total = g.add(total, r)?;
    }
    let c = g.scale(conf, w.conf_weight);
    total = g.add(total, c)?;

    let breakdown = LossBreakdown {
        total: g.value(total).item(),
        loc: g.value(loc).item(),
        ori: g.value(ori).item(),
        reg: reg.map_or(0.0, |r| g.value(r).item()),
        contrastive: 0.0,
        conf: g.value(conf).item(),
    };
    Ok(SampleLoss { total, breakdown })
}

fn argmax_position(loc: &[f64], width: usize, pixels_per_meter: f64) -> [f64; 2] {
    let mut best = 0;
    for (i, &v) in loc.iter().enumerate() {
        if v > loc[best] {
            best = i;
        }
    }
    [
        ((best % width) as f64 + 0.5) / pixels_per_meter,
        ((best / width) as f64 + 0.5) / pixels_per_meter,
    ]
}

/// Batch-mean objective evaluated directly on likelihood maps.
pub fn total_loss(
    maps: &[LikelihoodMaps],
    targets: &[SampleTarget],
    embeddings: Option<(&[Embedding], &[Embedding])>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    w.validate()?;
    if maps.is_empty() || maps.len() != targets.len() {
        return Err(Error::invalid(format!(
            "need one target per prediction ({} maps, {} targets)",
            maps.len(),
            targets.len()
        )));
    }
    let mut sum = LossBreakdown::default();
    for (m, t) in maps.iter().zip(targets) {
        let d = t.dists;
        if (m.height, m.width, m.bins) != (d.height, d.width, d.bins) {
            return Err(Error::invalid("prediction and target sizes differ"));
        }
        let loc = kl_divergence_ordered(&m.loc, &d.loc_target, KL_EPS, w.kl_order)?;
        let col = m.ori_column(d.cell.0, d.cell.1);
        let ori = kl_divergence_ordered(&col, &d.ori_target, KL_EPS, w.kl_order)?;
        let gt = [t.pose.x, t.pose.y];
        let reg = if w.use_reg {
            let xy = graph::soft_argmax_values(&m.loc, m.height, m.width, w.soft_temperature, 1.0 / t.pixels_per_meter);
            huber_regression_loss(xy, gt, w.huber_delta)
        } else {
            0.0
        };
        let est = extract_pose_argmax(m, t.pixels_per_meter);
        let err = ((est.pose.x - gt[0]).powi(2) + (est.pose.y - gt[1]).powi(2)).sqrt();
        let conf = bce_loss(m.confidence, if err <= w.conf_radius { 1.0 } else { 0.0 });
        sum.add(&LossBreakdown {
            total: 0.0,
            loc,
            ori,
            reg,
            contrastive: 0.0,
            conf,
        });
    }
    sum.scale(1.0 / maps.len() as f64);
    if w.use_contrastive {
        if let Some((za, zb)) = embeddings {
            sum.contrastive = infonce(&raw(za), &raw(zb), w.tau, w.hard_k, w.symmetric)?.loss;
        }
    }
    sum.total = sum.weighted_total(w);
    Ok(sum)
}
