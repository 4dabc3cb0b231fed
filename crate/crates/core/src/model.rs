//! The full localization network: two encoders, fusion, decoder and the
//! contrastive projection heads, all sharing one parameter store.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::decoder::{Decoder, DecoderConfig, DecoderMode, DecoderVars};
use crate::encoders::{Backbone, BackboneConfig, TOTAL_STRIDE};
use crate::error::{Error, Result};
use crate::fusion::{AttentionConfig, Fusion, FusionMode};
use crate::geometry::{project_to_bev, AerialTile, BevSpec, PointCloud};
use crate::graph::{Graph, Var};
use crate::objectives::{ProjectionHead, DEFAULT_EMBED_DIM};
use crate::params::ParamStore;
use crate::rng::{self, streams};
use crate::tensor::Tensor;

/// Architecture switches and sizes. Every field round-trips through
/// [`ModelConfig::to_map`] so checkpoints rebuild the same network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub tile_size: usize,
    pub bins: usize,
    pub feature_dim: usize,
    pub heads: usize,
    pub rel_pos_window: usize,
    pub fusion_mode: FusionMode,
    pub bidirectional: bool,
    pub use_multiscale: bool,
    pub use_fourier: bool,
    pub use_refine_attention: bool,
    pub decoder: DecoderMode,
    pub stem_channels: [usize; 2],
    pub stage_channels: [usize; 3],
    pub decoder_widths: [usize; 5],
    pub embed_dim: usize,
    pub embed_hidden: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tile_size: 64,
            bins: 36,
            feature_dim: 32,
            heads: 4,
            rel_pos_window: 7,
            fusion_mode: FusionMode::CrossAttn,
            bidirectional: true,
            use_multiscale: true,
            use_fourier: true,
            use_refine_attention: true,
            decoder: DecoderMode::Likelihood,
            stem_channels: [8, 12],
            stage_channels: [16, 32, 64],
            decoder_widths: [32, 24, 16, 12, 8],
            embed_dim: DEFAULT_EMBED_DIM,
            embed_hidden: 64,
            init_seed: 0,
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {v:?} for {key}")))
}

pub(crate) fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("bad boolean {v:?} for {key}"))),
    }
}

pub(crate) fn parse_list<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = v
        .split(',')
        .map(|s| parse_value(key, s))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::invalid(format!("{key} needs {N} comma-separated values, got {v:?}")))
}

impl ModelConfig {
    pub const KEYS: [&'static str; 17] = [
        "tile_size",
        "bins",
        "feature_dim",
        "heads",
        "rel_pos_window",
        "fusion_mode",
        "bidirectional",
        "use_multiscale",
        "use_fourier",
        "use_refine_attention",
        "decoder",
        "stem_channels",
        "stage_channels",
        "decoder_widths",
        "embed_dim",
        "embed_hidden",
        "init_seed",
    ];

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("tile_size", self.tile_size.to_string());
        put("bins", self.bins.to_string());
        put("feature_dim", self.feature_dim.to_string());
        put("heads", self.heads.to_string());
        put("rel_pos_window", self.rel_pos_window.to_string());
        put("fusion_mode", self.fusion_mode.as_str().into());
        put("bidirectional", self.bidirectional.to_string());
        put("use_multiscale", self.use_multiscale.to_string());
        put("use_fourier", self.use_fourier.to_string());
        put("use_refine_attention", self.use_refine_attention.to_string());
        put("decoder", self.decoder.as_str().into());
        put("stem_channels", join(&self.stem_channels));
        put("stage_channels", join(&self.stage_channels));
        put("decoder_widths", join(&self.decoder_widths));
        put("embed_dim", self.embed_dim.to_string());
        put("embed_hidden", self.embed_hidden.to_string());
        put("init_seed", self.init_seed.to_string());
        m
    }

    /// Applies one `key = value` setting; returns `false` for keys this
    /// config does not own.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "tile_size" => self.tile_size = parse_value(key, v)?,
            "bins" => self.bins = parse_value(key, v)?,
            "feature_dim" => self.feature_dim = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "rel_pos_window" => self.rel_pos_window = parse_value(key, v)?,
            "fusion_mode" => self.fusion_mode = FusionMode::parse(v.trim())?,
            "bidirectional" => self.bidirectional = parse_bool(key, v)?,
            "use_multiscale" => self.use_multiscale = parse_bool(key, v)?,
            "use_fourier" => self.use_fourier = parse_bool(key, v)?,
            "use_refine_attention" => self.use_refine_attention = parse_bool(key, v)?,
            "decoder" => self.decoder = DecoderMode::parse(v.trim())?,
            "stem_channels" => self.stem_channels = parse_list(key, v)?,
            "stage_channels" => self.stage_channels = parse_list(key, v)?,
            "decoder_widths" => self.decoder_widths = parse_list(key, v)?,
            "embed_dim" => self.embed_dim = parse_value(key, v)?,
            "embed_hidden" => self.embed_hidden = parse_value(key, v)?,
            "init_seed" => self.init_seed = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for key in Self::KEYS {
            let v = m
                .get(key)
                .ok_or_else(|| Error::invalid(format!("checkpoint config lacks {key}")))?;
            cfg.set(key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 || self.tile_size % TOTAL_STRIDE != 0 {
            return Err(Error::invalid(format!(
                "tile_size must be a positive multiple of {TOTAL_STRIDE}, got {}",
                self.tile_size
            )));
        }
        if self.bins < 2 {
            return Err(Error::invalid("bins must be at least 2"));
        }
        if self.embed_dim == 0 || self.embed_hidden == 0 {
            return Err(Error::invalid("embedding sizes must be positive"));
        }
        self.attention().validate()?;
        self.bev_backbone().validate()
    }

    fn aerial_backbone(&self) -> BackboneConfig {
        BackboneConfig {
            stem_channels: self.stem_channels,
            stage_channels: self.stage_channels,
            ..BackboneConfig::new(3, self.feature_dim)
        }
    }

    fn bev_backbone(&self) -> BackboneConfig {
        BackboneConfig {
            stem_channels: self.stem_channels,
            stage_channels: self.stage_channels,
            use_multiscale: self.use_multiscale,
            use_fourier: self.use_fourier,
            use_refine_attention: self.use_refine_attention,
            ..BackboneConfig::new(1, self.feature_dim)
        }
    }

    fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            heads: self.heads,
            rel_pos_window: self.rel_pos_window,
            fusion_mode: self.fusion_mode,
            bidirectional: self.bidirectional,
            ..AttentionConfig::new(self.feature_dim)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub aerial: Backbone,
    pub bev: Backbone,
    pub fusion: Fusion,
    pub decoder: Decoder,
    pub proj_aerial: ProjectionHead,
    pub proj_bev: ProjectionHead,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub decoder: DecoderVars,
    pub z_aerial: Var,
    pub z_bev: Var,
}

/// Network inputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `[3, H, W]`.
    pub aerial: Tensor,
    /// `[1, H, W]`.
    pub bev: Tensor,
    pub pixels_per_meter: f64,
}

impl ModelInput {
    pub fn new(tile: &AerialTile, cloud: &PointCloud) -> Result<Self> {
        if tile.height != tile.width {
            return Err(Error::invalid(format!("tile must be square, got {}×{}", tile.height, tile.width)));
        }
        let grid = project_to_bev(cloud, &BevSpec::for_tile(tile.height, tile.pixels_per_meter))?;
        Ok(ModelInput {
            aerial: tile.to_tensor(),
            bev: grid.to_tensor(),
            pixels_per_meter: tile.pixels_per_meter,
        })
    }
}

impl Model {
    /// Builds the network and registers freshly initialized parameters.
    pub fn new(cfg: ModelConfig) -> Result<(Model, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Model::build(cfg, &mut store)?;
        Ok((model, store))
    }

    pub fn build(cfg: ModelConfig, store: &mut ParamStore) -> Result<Model> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.init_seed, streams::INIT);
        let aerial = Backbone::new(store, "aerial", cfg.aerial_backbone(), &mut r)?;
        let bev = Backbone::new(store, "bev", cfg.bev_backbone(), &mut r)?;
        let fusion = Fusion::new(store, "fusion", cfg.attention(), &mut r)?;
        let [a, b] = cfg.stem_channels;
        let [c, d, _] = cfg.stage_channels;
        let dec_cfg = DecoderConfig {
            widths: cfg.decoder_widths,
            mode: cfg.decoder,
            ..DecoderConfig::new(cfg.feature_dim, [a, b, c, d], cfg.bins)
        };
        let decoder = Decoder::new(store, "decoder", dec_cfg, &mut r)?;
        let proj_aerial = ProjectionHead::new(store, "proj_aerial", cfg.feature_dim, cfg.embed_hidden, cfg.embed_dim, &mut r);
        let proj_bev = ProjectionHead::new(store, "proj_bev", cfg.feature_dim, cfg.embed_hidden, cfg.embed_dim, &mut r);
        Ok(Model {
            cfg,
            aerial,
            bev,
            fusion,
            decoder,
            proj_aerial,
            proj_bev,
        })
    }

    /// Rebuilds a model from checkpoint contents, checking that every tensor
    /// matches the architecture.
    pub fn from_checkpoint(store: ParamStore, config: &BTreeMap<String, String>) -> Result<(Model, ParamStore)> {
        let cfg = ModelConfig::from_map(config)?;
        let (model, mut fresh) = Model::new(cfg)?;
        if fresh.len() != store.len() {
            return Err(Error::invalid(format!(
                "checkpoint holds {} tensors, the configured model has {}",
                store.len(),
                fresh.len()
            )));
        }
        fresh.load_values(&store)?;
        Ok((model, fresh))
    }

    pub fn forward(&self, g: &mut Graph, input: &ModelInput) -> Result<ModelVars> {
        let s = self.cfg.tile_size;
        if input.aerial.shape() != [3, s, s] {
            return Err(Error::invalid(format!(
                "aerial input {:?} does not match tile_size {s}",
                input.aerial.shape()
            )));
        }
        let tile = g.input(input.aerial.clone());
        let bev_in = g.input(input.bev.clone());
        let a = self.aerial.forward(g, tile)?;
        let b = self.bev.forward(g, bev_in)?;
        let fused = self.fusion.forward(g, a.features, b.features)?;
        let skips = [a.scales[0], a.scales[1], a.scales[2], a.scales[3]];
        let decoder = self.decoder.forward(g, fused, skips, tile, 1.0 / input.pixels_per_meter)?;
        let z_aerial = self.proj_aerial.forward(g, a.features)?;
        let z_bev = self.proj_bev.forward(g, b.features)?;
        Ok(ModelVars {
            decoder,
            z_aerial,
            z_bev,
        })
    }
}
