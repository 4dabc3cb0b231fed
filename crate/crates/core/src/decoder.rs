//! U-Net likelihood decoder, the direct-regression alternative, and pose
//! extraction from likelihood maps.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::encoders::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::{bin_center, normalize_degrees, orientation_bin, Pose};
use crate::graph::{self, Graph, Var};
use crate::layers::{Conv, Linear};
use crate::params::ParamStore;
use crate::pnm::{quantize, Pnm};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderMode {
    Likelihood,
    Regression,
}

impl DecoderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoderMode::Likelihood => "likelihood",
            DecoderMode::Regression => "regression",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "likelihood" => Ok(DecoderMode::Likelihood),
            "regression" => Ok(DecoderMode::Regression),
            _ => Err(Error::invalid(format!("unknown decoder mode {s:?} (likelihood | regression)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub feature_dim: usize,
    /// Channels of the encoder stages feeding the 1/16, 1/8, 1/4 and 1/2 skips.
    pub skip_channels: [usize; 4],
    pub tile_channels: usize,
    /// Output channels of the 1/16, 1/8, 1/4, 1/2 and 1/1 blocks.
    pub widths: [usize; 5],
    pub bins: usize,
    pub conf_hidden: usize,
    pub mode: DecoderMode,
}

impl DecoderConfig {
    pub fn new(feature_dim: usize, skip_channels: [usize; 4], bins: usize) -> Self {
        DecoderConfig {
            feature_dim,
            skip_channels,
            tile_channels: 3,
            widths: [32, 24, 16, 12, 8],
            bins,
            conf_hidden: 16,
            mode: DecoderMode::Likelihood,
        }
    }
}

/// Location map, orientation map and confidence of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodMaps {
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    /// Row-major `H × W`, sums to one.
    pub loc: Vec<f64>,
    /// `K × H × W`; every column over `K` sums to one.
    pub ori: Vec<f64>,
    pub confidence: f64,
}

impl LikelihoodMaps {
    pub fn new(height: usize, width: usize, bins: usize, loc: Vec<f64>, ori: Vec<f64>, confidence: f64) -> Result<Self> {
        let n = height * width;
        if n == 0 || bins == 0 {
            return Err(Error::invalid("likelihood maps need H, W, K > 0"));
        }
        if loc.len() != n {
            return Err(Error::shape("location map cells", n, loc.len()));
        }
        if ori.len() != bins * n {
            return Err(Error::shape("orientation map cells", bins * n, ori.len()));
        }
        if loc.iter().chain(&ori).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("likelihood maps must be finite and non-negative"));
        }
        let total: f64 = loc.iter().sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(format!("location map sums to {total}, expected 1")));
        }
        for p in 0..n {
            let s: f64 = (0..bins).map(|k| ori[k * n + p]).sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(format!("orientation column {p} sums to {s}, expected 1")));
            }
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::invalid(format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(LikelihoodMaps {
            height,
            width,
            bins,
            loc,
            ori,
            confidence,
        })
    }

    /// One-hot maps at `cell` and `bin`, used for regression outputs and fixtures.
    pub fn delta(height: usize, width: usize, bins: usize, cell: (usize, usize), bin: usize, confidence: f64) -> Self {
        let n = height * width;
        let p = cell.0 * width + cell.1;
        let mut loc = vec![0.0; n];
        loc[p] = 1.0;
        let mut ori = vec![1.0 / bins as f64; bins * n];
        for k in 0..bins {
            ori[k * n + p] = if k == bin { 1.0 } else { 0.0 };
        }
        LikelihoodMaps {
            height,
            width,
            bins,
            loc,
            ori,
            confidence,
        }
    }

    pub fn ori_column(&self, row: usize, col: usize) -> Vec<f64> {
        let n = self.height * self.width;
        (0..self.bins).map(|k| self.ori[k * n + row * self.width + col]).collect()
    }

    pub fn ori_slice(&self, bin: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.ori[bin * n..(bin + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub confidence: f64,
    pub cell: (usize, usize),
    pub bin: usize,
    pub loc_map: Vec<f64>,
    pub ori_slice: Vec<f64>,
}

/// Graph outputs of one decoder pass.
#[derive(Clone, Copy, Debug)]
pub enum DecoderVars {
    Likelihood {
        /// `[H, W]`.
        loc: Var,
        /// `[K, H, W]`.
        ori: Var,
        /// `[1]`.
        conf: Var,
    },
    Regression {
        /// `[2]` position in meters.
        xy: Var,
        /// `[1, 2]` unit `(cos θ, sin θ)`.
        dir: Var,
        conf: Var,
    },
}

impl DecoderVars {
    pub fn conf(&self) -> Var {
        match *self {
            DecoderVars::Likelihood { conf, .. } | DecoderVars::Regression { conf, .. } => conf,
        }
    }
}

#[derive(Clone, Debug)]
struct ConfidenceHead {
    hidden: Linear,
    out: Linear,
}

impl ConfidenceHead {
    fn forward(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        let m = g.spatial_mean(fused)?;
        let h = self.hidden.forward(g, m)?;
        let h = g.silu(h);
        let z = self.out.forward(g, h)?;
        Ok(g.sigmoid(z))
    }
}

#[derive(Clone, Debug)]
enum Heads {
    Likelihood { blocks: Vec<Conv>, loc: Conv, ori: Conv },
    Regression { hidden: Linear, out: Linear },
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    heads: Heads,
    conf: ConfidenceHead,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.bins < 2 {
            return Err(Error::invalid(format!("orientation bins must be at least 2, got {}", cfg.bins)));
        }
        let heads = match cfg.mode {
            DecoderMode::Likelihood => {
                let mut cin = cfg.feature_dim;
                let skips = [
                    cfg.skip_channels[3],
                    cfg.skip_channels[2],
                    cfg.skip_channels[1],
                    cfg.skip_channels[0],
                    cfg.tile_channels,
                ];
                let mut blocks = Vec::new();
                for (i, (&w, &s)) in cfg.widths.iter().zip(&skips).enumerate() {
                    blocks.push(Conv::new(store, &format!("{name}.up{i}"), cin + s, w, 3, rng));
                    cin = w;
                }
                Heads::Likelihood {
                    blocks,
                    loc: Conv::new(store, &format!("{name}.loc"), cin, 1, 1, rng),
                    ori: Conv::new(store, &format!("{name}.ori"), cin, cfg.bins, 1, rng),
                }
            }
            DecoderMode::Regression => Heads::Regression {
                hidden: Linear::new(store, &format!("{name}.reg_hidden"), cfg.feature_dim, cfg.conf_hidden, rng),
                out: Linear::new(store, &format!("{name}.reg_out"), cfg.conf_hidden, 4, rng),
            },
        };
        let conf = ConfidenceHead {
            hidden: Linear::new(store, &format!("{name}.conf_hidden"), cfg.feature_dim, cfg.conf_hidden, rng),
            out: Linear::new(store, &format!("{name}.conf_out"), cfg.conf_hidden, 1, rng),
        };
        Ok(Decoder { cfg, heads, conf })
    }

    /// `skips` holds the encoder outputs at 1/2, 1/4, 1/8 and 1/16; `tile` is
    /// the full-resolution input; `cell` is meters per output pixel.
    pub fn forward(&self, g: &mut Graph, fused: Var, skips: [Var; 4], tile: Var, cell: f64) -> Result<DecoderVars> {
        let conf = self.conf.forward(g, fused)?;
        let (_, th, tw) = g.value(tile).dims3()?;
        match &self.heads {
            Heads::Likelihood { blocks, loc, ori } => {
                let mut x = fused;
                let levels = [skips[3], skips[2], skips[1], skips[0], tile];
                for (block, skip) in blocks.iter().zip(levels) {
                    let up = g.upsample2(x)?;
                    let (_, uh, uw) = g.value(up).dims3()?;
                    let (_, sh, sw) = g.value(skip).dims3()?;
                    if (uh, uw) != (sh, sw) {
                        return Err(Error::invalid(format!(
                            "skip feature is {sh}×{sw} but the upsampled map is {uh}×{uw}"
                        )));
                    }
                    let cat = g.concat(&[up, skip])?;
                    let y = block.forward(g, cat)?;
                    x = g.silu(y);
                }
                let l = loc.forward(g, x)?;
                let l = g.reshape(l, &[th * tw])?;
                let l = g.softmax(l, 0)?;
                let loc = g.reshape(l, &[th, tw])?;
                let o = ori.forward(g, x)?;
                let ori = g.softmax(o, 0)?;
                Ok(DecoderVars::Likelihood { loc, ori, conf })
            }
            Heads::Regression { hidden, out } => {
                let m = g.spatial_mean(fused)?;
                let h = hidden.forward(g, m)?;
                let h = g.silu(h);
                let z = out.forward(g, h)?;
                let z = g.reshape(z, &[1, 4])?;
                let p = g.slice_cols(z, 0, 2)?;
                let p = g.sigmoid(p);
                let extent = g.input(Tensor::new(&[2], vec![tw as f64 * cell, th as f64 * cell])?);
                let xy = g.mul(p, extent)?;
                let xy = g.reshape(xy, &[2])?;
                let d = g.slice_cols(z, 2, 2)?;
                let dir = g.l2_normalize(d);
                Ok(DecoderVars::Regression { xy, dir, conf })
            }
        }
    }
}

/// Reads decoder outputs off a finished graph.
pub fn read_maps(g: &Graph, vars: &DecoderVars, bins: usize) -> Result<LikelihoodMaps> {
    match *vars {
        DecoderVars::Likelihood { loc, ori, conf } => {
            let (h, w) = match *g.shape(loc) {
                [h, w] => (h, w),
                _ => return Err(Error::invalid("location map must be [H, W]")),
            };
            LikelihoodMaps::new(
                h,
                w,
                bins,
                g.value(loc).data().to_vec(),
                g.value(ori).data().to_vec(),
                g.value(conf).item(),
            )
        }
        DecoderVars::Regression { .. } => Err(Error::invalid("a regression decoder produces no likelihood maps")),
    }
}

/// Pose estimate from a finished graph, either by argmax or from the
/// regression head. `height`/`width` are the tile size in pixels.
pub fn read_estimate(
    g: &Graph,
    vars: &DecoderVars,
    bins: usize,
    pixels_per_meter: f64,
    height: usize,
    width: usize,
) -> Result<PoseEstimate> {
    match *vars {
        DecoderVars::Likelihood { .. } => {
            let maps = read_maps(g, vars, bins)?;
            Ok(extract_pose_argmax(&maps, pixels_per_meter))
        }
        DecoderVars::Regression { xy, dir, conf } => {
            let p = g.value(xy).data();
            let d = g.value(dir).data();
            let theta = normalize_degrees(d[1].atan2(d[0]).to_degrees());
            let pose = Pose::new(p[0], p[1], theta)?;
            let cell = pose.pixel(pixels_per_meter, height, width).unwrap_or((
                ((p[1] * pixels_per_meter) as usize).min(height - 1),
                ((p[0] * pixels_per_meter) as usize).min(width - 1),
            ));
            let bin = orientation_bin(theta, bins);
            let maps = LikelihoodMaps::delta(height, width, bins, cell, bin, g.value(conf).item());
            Ok(PoseEstimate {
                pose,
                confidence: maps.confidence,
                cell,
                bin,
                ori_slice: maps.ori_column(cell.0, cell.1),
                loc_map: maps.loc,
            })
        }
    }
}

/// Runs the likelihood decoder on frozen parameters.
pub fn decode_likelihoods(
    fused: &FeatureMap,
    skips: &[FeatureMap; 4],
    tile: &Tensor,
    decoder: &Decoder,
    params: &ParamStore,
) -> Result<LikelihoodMaps> {
    let mut g = Graph::new(params);
    let f = g.input(fused.tensor().clone());
    let s = skips.clone().map(|m| g.input(m.into_tensor()));
    let t = g.input(tile.clone());
    let vars = decoder.forward(&mut g, f, s, t, 1.0)?;
    read_maps(&g, &vars, decoder.cfg.bins)
}

/// Maximum-likelihood cell (row-major first on ties), then the best bin at
/// that cell (lowest index on ties).
pub fn extract_pose_argmax(maps: &LikelihoodMaps, pixels_per_meter: f64) -> PoseEstimate {
    let p = argmax_first(&maps.loc);
    let cell = (p / maps.width, p % maps.width);
    let column = maps.ori_column(cell.0, cell.1);
    let bin = argmax_first(&column);
    let x = (cell.1 as f64 + 0.5) / pixels_per_meter;
    let y = (cell.0 as f64 + 0.5) / pixels_per_meter;
    PoseEstimate {
        pose: Pose::new(x, y, bin_center(bin, maps.bins)).expect("finite cell centre"),
        confidence: maps.confidence,
        cell,
        bin,
        loc_map: maps.loc.clone(),
        ori_slice: column,
    }
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Expected `(col, row)` position, in cell units, under `loc` sharpened by
/// `1 / temperature`. Cell `(r, c)` sits at `(c, r)`.
pub fn soft_argmax(loc: &[f64], height: usize, width: usize, temperature: f64) -> Result<(f64, f64)> {
    if loc.len() != height * width {
        return Err(Error::shape("soft-argmax map cells", height * width, loc.len()));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let [x, y] = graph::soft_argmax_values(loc, height, width, temperature, 1.0);
    Ok((x - 0.5, y - 0.5))
}

/// Writes `{id}_loc.pgm` and one `{id}_ori{bin}.pgm` per requested bin as
/// 16-bit images scaled by `65535 / max`.
pub fn export_maps(maps: &LikelihoodMaps, dir: &Path, id: &str, bins: &[usize]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let loc_path = dir.join(format!("{id}_loc.pgm"));
    scaled_pgm(&maps.loc, maps.height, maps.width).write(&loc_path)?;
    written.push(loc_path);
    for &b in bins {
        if b >= maps.bins {
            return Err(Error::invalid(format!("bin {b} out of range for K = {}", maps.bins)));
        }
        let path = dir.join(format!("{id}_ori{b}.pgm"));
        scaled_pgm(maps.ori_slice(b), maps.height, maps.width).write(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// 16-bit grey image of `values / max`.
pub fn scaled_pgm(values: &[f64], height: usize, width: usize) -> Pnm {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    Pnm {
        width,
        height,
        channels: 1,
        maxval: 65535,
        data: values.iter().map(|&v| quantize(v * scale, 65535)).collect(),
    }
}
