//! Convolutional backbones for the aerial tile and the BEV grid.
//!
//! Five stride-2 residual stages take the input to 1/2, 1/4, 1/8, 1/16 and
//! 1/32 resolution. The last three scales feed the multi-scale fusion; the
//! result is refined with spatial then channel gating. The BEV branch can
//! additionally append the log-amplitude spectrum of its features.

use rand::Rng;
use rustfft::num_traits::Float;
use rustfft::FftNum;

use crate::error::{Error, Result};
use crate::fourier;
use crate::graph::{Graph, Var};
use crate::layers::{Conv, Linear, Norm};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Total downsampling factor of a backbone.
pub const TOTAL_STRIDE: usize = 32;

/// A `C × h × w` feature tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims3()?;
        Ok(FeatureMap(t))
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureMap(Tensor::zeros(&[c, h, w]))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn at(&self, c: usize, r: usize, col: usize) -> f64 {
        self.0.data()[(c * self.height() + r) * self.width() + col]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Channels of the two stride-2 stages that reach 1/4 resolution.
    pub stem_channels: [usize; 2],
    /// Channels of the 1/8, 1/16 and 1/32 stages.
    pub stage_channels: [usize; 3],
    pub feature_dim: usize,
    pub use_multiscale: bool,
    pub use_fourier: bool,
    pub use_refine_attention: bool,
}

impl BackboneConfig {
    pub fn new(in_channels: usize, feature_dim: usize) -> Self {
        BackboneConfig {
            in_channels,
            stem_channels: [8, 12],
            stage_channels: [16, 32, 64],
            feature_dim,
            use_multiscale: true,
            use_fourier: false,
            use_refine_attention: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0
            || self.in_channels == 0
            || self.stage_channels.contains(&0)
            || self.stem_channels.contains(&0)
        {
            return Err(Error::invalid("backbone channel counts must be positive"));
        }
        Ok(())
    }

    fn stage_widths(&self) -> [usize; 5] {
        let [a, b] = self.stem_channels;
        let [c, d, e] = self.stage_channels;
        [a, b, c, d, e]
    }
}

/// `conv3×3 → norm → act → conv3×3 → + → avgpool 2`.
#[derive(Clone, Debug)]
pub struct ResStage {
    conv1: Conv,
    norm: Norm,
    conv2: Conv,
}

impl ResStage {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        ResStage {
            conv1: Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, rng),
            norm: Norm::new(store, &format!("{name}.norm"), cout),
            conv2: Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let a = self.norm.forward(g, h)?;
        let a = g.silu(a);
        let r = self.conv2.forward(g, a)?;
        let y = g.add(h, r)?;
        g.avg_pool(y, 2)
    }
}

/// Spatial gate from channel statistics, then channel gate from spatial means.
#[derive(Clone, Debug)]
pub struct RefineAttention {
    spatial: Conv,
    squeeze: Linear,
    excite: Linear,
}

impl RefineAttention {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        let hidden = (d / 4).max(1);
        RefineAttention {
            spatial: Conv::new(store, &format!("{name}.spatial"), 2, 1, 3, rng),
            squeeze: Linear::new(store, &format!("{name}.squeeze"), d, hidden, rng),
            excite: Linear::new(store, &format!("{name}.excite"), hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let stats = g.channel_stats(x)?;
        let s = self.spatial.forward(g, stats)?;
        let gate = g.sigmoid(s);
        let x = g.mul(x, gate)?;

        let d = g.shape(x)[0];
        let m = g.spatial_mean(x)?;
        let z = self.squeeze.forward(g, m)?;
        let z = g.silu(z);
        let z = self.excite.forward(g, z)?;
        let gate = g.sigmoid(z);
        let gate = g.reshape(gate, &[d, 1, 1])?;
        g.mul(x, gate)
    }
}

/// Output of a backbone pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `D × H/32 × W/32` features.
    pub features: Var,
    /// Stage outputs at 1/2, 1/4, 1/8, 1/16 and 1/32.
    pub scales: [Var; 5],
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    stages: Vec<ResStage>,
    fuse: Conv,
    refine: Option<RefineAttention>,
    fourier_proj: Option<Conv>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, cfg: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.stage_widths();
        let mut cin = cfg.in_channels;
        let mut stages = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            stages.push(ResStage::new(store, &format!("{name}.stage{i}"), cin, w, rng));
            cin = w;
        }
        let fuse_in = if cfg.use_multiscale {
            cfg.stage_channels.iter().sum()
        } else {
            cfg.stage_channels[2]
        };
        let fuse = Conv::new(store, &format!("{name}.fuse"), fuse_in, cfg.feature_dim, 1, rng);
        let refine = cfg
            .use_refine_attention
            .then(|| RefineAttention::new(store, &format!("{name}.refine"), cfg.feature_dim, rng));
        let fourier_proj = cfg.use_fourier.then(|| {
            Conv::new(store, &format!("{name}.fourier"), 2 * cfg.feature_dim, cfg.feature_dim, 1, rng)
        });
        Ok(Backbone {
            cfg,
            stages,
            fuse,
            refine,
            fourier_proj,
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [c, h, w] = shape else {
            return Err(Error::invalid(format!("encoder input must be [C, H, W], got {shape:?}")));
        };
        if *c != self.cfg.in_channels {
            return Err(Error::shape("input channels", self.cfg.in_channels, *c));
        }
        if *h == 0 || h % TOTAL_STRIDE != 0 {
            return Err(Error::shape("input height (multiple of 32)", h.next_multiple_of(32).max(32), *h));
        }
        if *w == 0 || w % TOTAL_STRIDE != 0 {
            return Err(Error::shape("input width (multiple of 32)", w.next_multiple_of(32).max(32), *w));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<EncoderOutput> {
        self.check_input(g.shape(input))?;
        let mut x = input;
        let mut scales = Vec::with_capacity(5);
        for stage in &self.stages {
            x = stage.forward(g, x)?;
            scales.push(x);
        }
        let scales: [Var; 5] = scales.try_into().expect("five stages");
        let mut f = if self.cfg.use_multiscale {
            multiscale_fuse(g, scales[2], scales[3], scales[4], &self.fuse)?
        } else {
            self.fuse.forward(g, scales[4])?
        };
        if let Some(refine) = &self.refine {
            f = refine.forward(g, f)?;
        }
        if let Some(proj) = &self.fourier_proj {
            let spec = g.fft_log_magnitude(f)?;
            let both = g.concat(&[f, spec])?;
            let p = proj.forward(g, both)?;
            f = g.silu(p);
        }
        Ok(EncoderOutput { features: f, scales })
    }
}

/// Pools the 1/8 and 1/16 maps to the 1/32 grid, concatenates all three and
/// projects to `D` channels with a 1×1 convolution.
pub fn multiscale_fuse(g: &mut Graph, s8: Var, s16: Var, s32: Var, proj: &Conv) -> Result<Var> {
    let (_, h32, w32) = g.value(s32).dims3()?;
    let (_, h16, w16) = g.value(s16).dims3()?;
    let (_, h8, w8) = g.value(s8).dims3()?;
    if h16 != 2 * h32 || h8 != 4 * h32 {
        return Err(Error::shape("multiscale height ratio (4:2:1)", 4 * h32, h8.max(2 * h16)));
    }
    if w16 != 2 * w32 || w8 != 4 * w32 {
        return Err(Error::shape("multiscale width ratio (4:2:1)", 4 * w32, w8.max(2 * w16)));
    }
    let p8 = g.avg_pool(s8, 4)?;
    let p16 = g.avg_pool(s16, 2)?;
    let cat = g.concat(&[p8, p16, s32])?;
    proj.forward(g, cat)
}

/// Runs a backbone on a single input outside any training graph.
pub fn encode(input: &Tensor, backbone: &Backbone, params: &ParamStore) -> Result<FeatureMap> {
    let mut g = Graph::new(params);
    let x = g.input(input.clone());
    let out = backbone.forward(&mut g, x)?;
    FeatureMap::new(g.value(out.features).clone())
}

/// Per-channel centred `log(1 + |DFT|)`; output shape equals input shape.
pub fn fft_log_magnitude(features: &FeatureMap) -> FeatureMap {
    let (c, h, w) = (features.channels(), features.height(), features.width());
    let out = fft_log_magnitude_planes(features.tensor().data(), c, h, w);
    FeatureMap(Tensor::new(&[c, h, w], out).expect("same size"))
}

/// [`fft_log_magnitude`] over raw `c × h × w` planes at any float precision.
pub fn fft_log_magnitude_planes<T: FftNum + Float>(values: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    assert_eq!(values.len(), c * h * w, "plane stack size");
    values
        .chunks_exact(h * w)
        .flat_map(|plane| fourier::log_magnitude_plane(plane, h, w))
        .collect()
}
