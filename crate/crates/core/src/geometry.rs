//! Coordinate conventions, BEV rasterization, supervision targets and
//! aerial-tile augmentation.
//!
//! Tile frame: `x` grows with the column index and `y` with the row index,
//! both in meters; pixel `(row, col)` covers
//! `[col, col + 1) × [row, row + 1)` divided by `pixels_per_meter`.
//! Headings are degrees in `[0, 360)`, measured from `+x` towards `+y`.
//! The sensor frame uses the same handedness with `+x` along the heading,
//! so a sensor point `p` sits at `pose + R(θ)·p` in the tile frame.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

/// Vehicle pose in the aerial-tile frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Wraps degrees into `[0, 360)`.
pub fn normalize_degrees(theta: f64) -> f64 {
    let t = theta.rem_euclid(360.0);
    if t >= 360.0 {
        0.0
    } else {
        t
    }
}

/// Exact `(cos, sin)` for multiples of 90°, `f64::cos/sin` otherwise.
pub fn cos_sin_deg(deg: f64) -> (f64, f64) {
    let q = deg / 90.0;
    if q == q.round() {
        match (q as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = deg.to_radians();
        (r.cos(), r.sin())
    }
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && theta.is_finite()) {
            return Err(Error::NonFinite {
                what: "coordinate".into(),
                location: "pose".into(),
            });
        }
        Ok(Pose {
            x,
            y,
            theta: normalize_degrees(theta),
        })
    }

    /// Pixel `(row, col)` containing the pose, if inside a `height × width` tile.
    pub fn pixel(&self, pixels_per_meter: f64, height: usize, width: usize) -> Option<(usize, usize)> {
        let c = (self.x * pixels_per_meter).floor();
        let r = (self.y * pixels_per_meter).floor();
        if c < 0.0 || r < 0.0 || c >= width as f64 || r >= height as f64 {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        match self.points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            Some(i) => Err(Error::NonFinite {
                what: "coordinate".into(),
                location: format!("point {i} of the cloud"),
            }),
            None => Ok(()),
        }
    }
}

/// Single-channel occupancy raster centred on the sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    pub height: usize,
    pub width: usize,
    pub cell_size: f64,
    pub values: Vec<f32>,
}

impl BevGrid {
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn occupied(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }

    /// `[1, H, W]` network input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[1, self.height, self.width], |i| self.values[i] as f64)
    }
}

/// Three-channel overhead raster; `values` is row-major `H × W × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct AerialTile {
    pub height: usize,
    pub width: usize,
    pub pixels_per_meter: f64,
    pub values: Vec<f32>,
}

impl AerialTile {
    pub fn new(height: usize, width: usize, pixels_per_meter: f64, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width * 3 {
            return Err(Error::shape("tile values", height * width * 3, values.len()));
        }
        if !(pixels_per_meter > 0.0) {
            return Err(Error::invalid("pixels_per_meter must be positive"));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("tile value {v} outside [0, 1]")));
        }
        Ok(AerialTile {
            height,
            width,
            pixels_per_meter,
            values,
        })
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.values[(row * self.width + col) * 3 + ch]
    }

    /// Planar `[3, H, W]` network input.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[3, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            self.values[p * 3 + ch] as f64
        })
    }

    pub fn width_m(&self) -> f64 {
        self.width as f64 / self.pixels_per_meter
    }

    pub fn height_m(&self) -> f64 {
        self.height as f64 / self.pixels_per_meter
    }
}

/// Rasterization parameters for [`project_to_bev`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub cell_size: f64,
    pub z_min: f64,
    pub z_max: f64,
}

pub const DEFAULT_Z_RANGE: (f64, f64) = (0.3, 3.0);

impl BevSpec {
    /// Grid matching a tile so one BEV cell spans one aerial pixel.
    pub fn for_tile(size: usize, pixels_per_meter: f64) -> Self {
        BevSpec {
            grid_h: size,
            grid_w: size,
            cell_size: 1.0 / pixels_per_meter,
            z_min: DEFAULT_Z_RANGE.0,
            z_max: DEFAULT_Z_RANGE.1,
        }
    }
}

/// Binary-occupancy BEV raster of `cloud`. The sensor origin sits at cell
/// `(grid_h / 2, grid_w / 2)`; sensor `+x` runs along columns and `+y`
/// along rows.
pub fn project_to_bev(cloud: &PointCloud, spec: &BevSpec) -> Result<BevGrid> {
    if spec.grid_h == 0 || spec.grid_w == 0 {
        return Err(Error::invalid("BEV grid dimensions must be positive"));
    }
    if !(spec.cell_size > 0.0) {
        return Err(Error::invalid("BEV cell size must be positive"));
    }
    if !(spec.z_min < spec.z_max) {
        return Err(Error::invalid("BEV z range must satisfy z_min < z_max"));
    }
    cloud.validate()?;
    let mut values = vec![0.0f32; spec.grid_h * spec.grid_w];
    let (half_h, half_w) = ((spec.grid_h / 2) as f64, (spec.grid_w / 2) as f64);
    for p in &cloud.points {
        if p[2] < spec.z_min || p[2] > spec.z_max {
            continue;
        }
        let col = (p[0] / spec.cell_size + half_w).floor();
        let row = (p[1] / spec.cell_size + half_h).floor();
        if col < 0.0 || row < 0.0 || col >= spec.grid_w as f64 || row >= spec.grid_h as f64 {
            continue;
        }
        values[row as usize * spec.grid_w + col as usize] = 1.0;
    }
    Ok(BevGrid {
        height: spec.grid_h,
        width: spec.grid_w,
        cell_size: spec.cell_size,
        values,
    })
}

/// Smallest location-target spread, in pixels.
pub const MIN_SIGMA_LOC: f64 = 0.2;

/// Supervision distributions for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetDistributions {
    pub height: usize,
    pub width: usize,
    pub loc_target: Vec<f64>,
    pub bins: usize,
    pub ori_target: Vec<f64>,
    /// Pixel `(row, col)` of the true position.
    pub cell: (usize, usize),
}

impl TargetDistributions {
    pub fn new(pose: &Pose, tile: &AerialTile, bins: usize, sigma_loc: f64, sigma_ori: f64) -> Result<Self> {
        let loc_target = make_location_target(pose, tile, sigma_loc)?;
        let ori_target = make_orientation_target(pose.theta, bins, sigma_ori)?;
        let cell = pose
            .pixel(tile.pixels_per_meter, tile.height, tile.width)
            .expect("checked by make_location_target");
        Ok(TargetDistributions {
            height: tile.height,
            width: tile.width,
            loc_target,
            bins,
            ori_target,
            cell,
        })
    }
}

/// Isotropic Gaussian over the tile's pixel lattice, centred on the pixel
/// containing the true position, normalized to sum to one.
pub fn make_location_target(pose: &Pose, tile: &AerialTile, sigma_loc: f64) -> Result<Vec<f64>> {
    if !(sigma_loc > 0.0) {
        return Err(Error::invalid("sigma_loc must be positive"));
    }
    let (r0, c0) = pose
        .pixel(tile.pixels_per_meter, tile.height, tile.width)
        .ok_or_else(|| {
            Error::invalid(format!(
                "pose ({}, {}) lies outside the {}×{} tile",
                pose.x, pose.y, tile.height, tile.width
            ))
        })?;
    let sigma = sigma_loc.max(MIN_SIGMA_LOC);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut t: Vec<f64> = (0..tile.height * tile.width)
        .map(|i| {
            let dr = (i / tile.width) as f64 - r0 as f64;
            let dc = (i % tile.width) as f64 - c0 as f64;
            (-(dr * dr + dc * dc) * inv).exp()
        })
        .collect();
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    Ok(t)
}

/// Bin holding heading `theta` when the circle is split into `bins` equal sectors.
pub fn orientation_bin(theta: f64, bins: usize) -> usize {
    let b = (normalize_degrees(theta) * bins as f64 / 360.0 + 1e-9).floor() as usize;
    b % bins
}

/// Centre angle of an orientation bin, in degrees.
pub fn bin_center(bin: usize, bins: usize) -> f64 {
    (bin as f64 + 0.5) * 360.0 / bins as f64
}

/// Wrapped Gaussian over `bins` orientation bins centred on the heading's bin.
pub fn make_orientation_target(theta: f64, bins: usize, sigma_ori: f64) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::invalid("orientation target needs at least 2 bins"));
    }
    if !(sigma_ori > 0.0) || !theta.is_finite() {
        return Err(Error::invalid("sigma_ori must be positive and theta finite"));
    }
    let center = orientation_bin(theta, bins) as i64;
    let k = bins as i64;
    let wraps = (6.0 * sigma_ori / bins as f64).ceil() as i64 + 1;
    let inv = 1.0 / (2.0 * sigma_ori * sigma_ori);
    let mut t: Vec<f64> = (0..k)
        .map(|b| {
            // Offsets on the circle, folded into (-K/2, K/2] before wrapping so
            // every bin sees the same set of images.
            let d = (b - center).rem_euclid(k);
            (-wraps..=wraps)
                .map(|m| {
                    let off = (d + m * k) as f64;
                    (-off * off * inv).exp()
                })
                .sum::<f64>()
        })
        .collect();
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub seed: u64,
    pub max_rot: f64,
    pub rot_prob: f64,
    pub jitter_strength: f64,
}

impl AugmentParams {
    pub fn identity(seed: u64) -> Self {
        AugmentParams {
            seed,
            max_rot: 0.0,
            rot_prob: 0.0,
            jitter_strength: 0.0,
        }
    }
}

/// Rotates the tile about its centre by `deg` (bilinear, zero fill) and maps
/// the pose through the same transform. Returns `None` when the rotated
/// position leaves the tile.
pub fn rotate_tile(tile: &AerialTile, pose: &Pose, deg: f64) -> Option<(AerialTile, Pose)> {
    let (h, w) = (tile.height, tile.width);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (cos, sin) = cos_sin_deg(deg);
    let ppm = tile.pixels_per_meter;
    let (px, py) = (pose.x * ppm - cx, pose.y * ppm - cy);
    let new_pose = Pose {
        x: (cx + cos * px - sin * py) / ppm,
        y: (cy + sin * px + cos * py) / ppm,
        theta: normalize_degrees(pose.theta + deg),
    };
    new_pose.pixel(ppm, h, w)?;

    let mut values = vec![0.0f32; h * w * 3];
    for r in 0..h {
        for c in 0..w {
            let (qx, qy) = (c as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
            // Source position under the inverse rotation, in pixel-centre units.
            let sx = cx + cos * qx + sin * qy - 0.5;
            let sy = cy - sin * qx + cos * qy - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            for ch in 0..3 {
                let mut acc = 0.0f64;
                for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                    for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                        let wgt = wx * wy;
                        if wgt == 0.0 {
                            continue;
                        }
                        let (yy, xx) = (y0 + dy, x0 + dx);
                        if yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64 {
                            acc += wgt * tile.at(yy as usize, xx as usize, ch) as f64;
                        }
                    }
                }
                values[(r * w + c) * 3 + ch] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Some((
        AerialTile {
            height: h,
            width: w,
            pixels_per_meter: ppm,
            values,
        },
        new_pose,
    ))
}

/// Random rotation (with probability `rot_prob`, angle uniform in
/// `±max_rot`) followed by per-channel multiplicative jitter. A rotation
/// that would carry the vehicle off the tile is skipped.
pub fn augment_tile(tile: &AerialTile, pose: &Pose, params: &AugmentParams) -> Result<(AerialTile, Pose)> {
    if !(0.0..=180.0).contains(&params.max_rot) {
        return Err(Error::invalid("max_rot must lie in [0, 180]"));
    }
    if !(0.0..=1.0).contains(&params.rot_prob) {
        return Err(Error::invalid("rot_prob must lie in [0, 1]"));
    }
    let mut rng = rng::stream(params.seed, streams::AUGMENT);
    let do_rotate = rng.random::<f64>() < params.rot_prob;
    let angle = (2.0 * rng.random::<f64>() - 1.0) * params.max_rot;
    let jitter: [f64; 3] =
        std::array::from_fn(|_| 1.0 + params.jitter_strength * (2.0 * rng.random::<f64>() - 1.0));

    let (mut out, new_pose) = if do_rotate {
        rotate_tile(tile, pose, angle).unwrap_or_else(|| (tile.clone(), *pose))
    } else {
        (tile.clone(), *pose)
    };
    if params.jitter_strength != 0.0 {
        for (i, v) in out.values.iter_mut().enumerate() {
            *v = ((*v as f64) * jitter[i % 3]).clamp(0.0, 1.0) as f32;
        }
    }
    Ok((out, new_pose))
}
