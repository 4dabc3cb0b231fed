//! Multi-head cross attention between the aerial and BEV feature grids and
//! the fusion head that merges both modalities.

use rand::Rng;

use crate::encoders::FeatureMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Conv;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    CrossAttn,
    Concat,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::CrossAttn => "cross_attn",
            FusionMode::Concat => "concat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cross_attn" => Ok(FusionMode::CrossAttn),
            "concat" => Ok(FusionMode::Concat),
            _ => Err(Error::invalid(format!("unknown fusion mode {s:?} (cross_attn | concat)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub rel_pos_window: usize,
    pub fusion_mode: FusionMode,
    /// Feed the BEV-query direction into the fusion head as well.
    pub bidirectional: bool,
}

impl AttentionConfig {
    pub fn new(dim: usize) -> Self {
        AttentionConfig {
            dim,
            heads: 4,
            rel_pos_window: 7,
            fusion_mode: FusionMode::CrossAttn,
            bidirectional: true,
        }
    }

    pub fn d_k(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "feature dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// One attention direction: projections plus the relative-position bias.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: (ParamId, ParamId),
    pub k: (ParamId, ParamId),
    pub v: (ParamId, ParamId),
    pub o: (ParamId, ParamId),
    /// `[heads, 2w + 1, 2w + 1]`, zero-initialized.
    pub rel_pos: ParamId,
    heads: usize,
    window: usize,
}

/// Result of an attention pass with the per-head weights kept for inspection.
pub struct AttentionOutput {
    pub output: Var,
    /// One `[N, N]` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let mut proj = |tag: &str, rng: &mut _| {
            (
                store.add_uniform(format!("{name}.{tag}.w"), &[d, d], d, rng),
                store.add_zeros(format!("{name}.{tag}.b"), &[d]),
            )
        };
        let q = proj("q", rng);
        let k = proj("k", rng);
        let v = proj("v", rng);
        let o = proj("o", rng);
        let side = 2 * cfg.rel_pos_window + 1;
        let rel_pos = store.add_zeros(format!("{name}.rel_pos"), &[cfg.heads, side, side]);
        Ok(CrossAttention {
            q,
            k,
            v,
            o,
            rel_pos,
            heads: cfg.heads,
            window: cfg.rel_pos_window,
        })
    }

    /// Flat table index of the clamped offset between two grid positions.
    fn bias_index(&self, head: usize, (qr, qc): (usize, usize), (kr, kc): (usize, usize)) -> usize {
        let w = self.window as isize;
        let side = 2 * self.window + 1;
        let di = (qr as isize - kr as isize).clamp(-w, w) + w;
        let dj = (qc as isize - kc as isize).clamp(-w, w) + w;
        (head * side + di as usize) * side + dj as usize
    }

    fn project(g: &mut Graph, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (g.param(w), g.param(b));
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    /// Queries from `query`, keys and values from `context`; both `[D, h, w]`.
    pub fn forward(&self, g: &mut Graph, query: Var, context: Var) -> Result<AttentionOutput> {
        let (d, h, w) = g.value(query).dims3()?;
        let (dc, hc, wc) = g.value(context).dims3()?;
        if dc != d {
            return Err(Error::shape("context channels", d, dc));
        }
        if hc != h {
            return Err(Error::shape("context height", h, hc));
        }
        if wc != w {
            return Err(Error::shape("context width", w, wc));
        }
        let wq = g.param(self.q.0);
        let dq = g.shape(wq)[0];
        if dq != d {
            return Err(Error::shape("query channels", dq, d));
        }
        let n = h * w;
        let dk = d / self.heads;

        let tokens = |g: &mut Graph, x: Var| -> Result<Var> {
            let flat = g.reshape(x, &[d, n])?;
            g.transpose(flat)
        };
        let xq = tokens(g, query)?;
        let xc = tokens(g, context)?;
        let q = Self::project(g, xq, self.q)?;
        let k = Self::project(g, xc, self.k)?;
        let v = Self::project(g, xc, self.v)?;
        let table = g.param(self.rel_pos);

        let pos = |t: usize| (t / w, t % w);
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = g.slice_cols(q, head * dk, dk)?;
            let kh = g.slice_cols(k, head * dk, dk)?;
            let vh = g.slice_cols(v, head * dk, dk)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, 1.0 / (dk as f64).sqrt());
            let idx = (0..n * n).map(|i| self.bias_index(head, pos(i / n), pos(i % n))).collect();
            let bias = g.gather(table, idx, &[n, n])?;
            let s = g.add(s, bias)?;
            let a = g.softmax(s, 1)?;
            heads.push(g.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = g.concat_cols(&heads)?;
        let out = Self::project(g, cat, self.o)?;
        let out = g.transpose(out)?;
        let output = g.reshape(out, &[d, h, w])?;
        Ok(AttentionOutput { output, weights })
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub cfg: AttentionConfig,
    pub a2b: Option<CrossAttention>,
    pub b2a: Option<CrossAttention>,
    pub proj: Conv,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str, cfg: AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let cross = cfg.fusion_mode == FusionMode::CrossAttn;
        let a2b = cross
            .then(|| CrossAttention::new(store, &format!("{name}.a2b"), &cfg, rng))
            .transpose()?;
        let b2a = (cross && cfg.bidirectional)
            .then(|| CrossAttention::new(store, &format!("{name}.b2a"), &cfg, rng))
            .transpose()?;
        let blocks = match (cross, cfg.bidirectional) {
            (false, _) => 2,
            (true, false) => 2,
            (true, true) => 4,
        };
        let proj = Conv::new(store, &format!("{name}.proj"), blocks * cfg.dim, cfg.dim, 1, rng);
        Ok(Fusion { cfg, a2b, b2a, proj })
    }

    /// Concatenates `[aerial, a2b, bev, b2a]` (or `[aerial, bev]` in concat
    /// mode, `[aerial, a2b]` when one-directional) and projects to `D`.
    pub fn forward(&self, g: &mut Graph, aerial: Var, bev: Var) -> Result<Var> {
        if g.shape(aerial) != g.shape(bev) {
            return Err(Error::invalid(format!(
                "aerial features {:?} and BEV features {:?} differ in shape",
                g.shape(aerial),
                g.shape(bev)
            )));
        }
        let blocks = match (&self.a2b, &self.b2a) {
            (None, _) => vec![aerial, bev],
            (Some(a2b), None) => vec![aerial, a2b.forward(g, aerial, bev)?.output],
            (Some(a2b), Some(b2a)) => {
                let ab = a2b.forward(g, aerial, bev)?.output;
                let ba = b2a.forward(g, bev, aerial)?.output;
                vec![aerial, ab, bev, ba]
            }
        };
        let cat = g.concat(&blocks)?;
        let y = self.proj.forward(g, cat)?;
        Ok(g.silu(y))
    }
}

/// Evaluates one attention direction on frozen parameters.
pub fn cross_attention(
    query: &FeatureMap,
    context: &FeatureMap,
    attn: &CrossAttention,
    params: &ParamStore,
) -> Result<FeatureMap> {
    let mut g = Graph::new(params);
    let q = g.input(query.tensor().clone());
    let c = g.input(context.tensor().clone());
    let out = attn.forward(&mut g, q, c)?;
    FeatureMap::new(g.value(out.output).clone())
}

/// Per-head attention matrices, each row-major `N × N`.
pub fn attention_weights(
    query: &FeatureMap,
    context: &FeatureMap,
    attn: &CrossAttention,
    params: &ParamStore,
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new(params);
    let q = g.input(query.tensor().clone());
    let c = g.input(context.tensor().clone());
    let out = attn.forward(&mut g, q, c)?;
    Ok(out.weights.iter().map(|&a| g.value(a).data().to_vec()).collect())
}

pub fn fuse_features(aerial: &FeatureMap, bev: &FeatureMap, fusion: &Fusion, params: &ParamStore) -> Result<FeatureMap> {
    let mut g = Graph::new(params);
    let a = g.input(aerial.tensor().clone());
    let b = g.input(bev.tensor().clone());
    let out = fusion.forward(&mut g, a, b)?;
    FeatureMap::new(g.value(out).clone())
}
