//! Procedural scenes: rectangular buildings and straight roads rendered to an
//! aerial tile, a pose sampled on a road, and a 2D LiDAR scan ray-cast from it.
//!
//! Layout, texture, pose and LiDAR draws use separate ChaCha8 streams of the
//! scene seed (see [`crate::rng`]), so changing the ray count leaves the
//! layout untouched.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{cos_sin_deg, AerialTile, Pose, PointCloud, DEFAULT_Z_RANGE};
use crate::pnm::Pnm;
use crate::rng::{self, streams};

const ROAD_RGB: [f64; 3] = [0.22, 0.22, 0.25];
const BUILDING_RGB: [f64; 3] = [0.55, 0.50, 0.46];
const GROUND_RGB: [f64; 3] = [0.78, 0.84, 0.66];
const TEXTURE_AMPLITUDE: f64 = 0.04;
const MAX_POSE_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub tile_size: usize,
    pub pixels_per_meter: f64,
    pub n_buildings: usize,
    pub n_roads: usize,
    pub lidar_rays: usize,
    pub lidar_range: f64,
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            tile_size: 64,
            pixels_per_meter: 1.0,
            n_buildings: 8,
            n_roads: 3,
            lidar_rays: 360,
            lidar_range: 30.0,
            noise_sigma: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 || self.tile_size % 32 != 0 {
            return Err(Error::invalid(format!(
                "tile_size must be a positive multiple of 32, got {}",
                self.tile_size
            )));
        }
        if !(self.pixels_per_meter > 0.0) || !(self.lidar_range > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid(
                "pixels_per_meter and lidar_range must be positive, noise_sigma non-negative",
            ));
        }
        if self.lidar_rays == 0 {
            return Err(Error::invalid("lidar_rays must be at least 1"));
        }
        Ok(())
    }
}

/// Row-major binary raster at tile resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            cells: vec![false; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    /// Out-of-bounds cells read as free.
    pub fn get_signed(&self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width && self.get(row as usize, col as usize)
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub tile: AerialTile,
    pub obstacles: Mask,
    pub roads: Mask,
    pub gt_pose: Pose,
    pub cloud: PointCloud,
}

/// Oriented rectangle in pixel units.
struct Rect {
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
    cos: f64,
    sin: f64,
}

impl Rect {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        u.abs() <= self.half_w && v.abs() <= self.half_h
    }
}

/// Straight strip of half-width `half` through `(px, py)` along `(dx, dy)`.
struct Strip {
    px: f64,
    py: f64,
    dx: f64,
    dy: f64,
    half: f64,
}

impl Strip {
    fn contains(&self, x: f64, y: f64) -> bool {
        ((x - self.px) * self.dy - (y - self.py) * self.dx).abs() <= self.half
    }
}

fn random_angle(r: &mut impl Rng) -> f64 {
    if r.random_bool(0.5) {
        [0.0, 90.0][r.random_range(0..2)]
    } else {
        r.random_range(0.0..180.0)
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let n = spec.tile_size;
    let size = n as f64;
    let mut layout = rng::stream(spec.seed, streams::LAYOUT);

    let mut buildings = Vec::with_capacity(spec.n_buildings);
    for _ in 0..spec.n_buildings {
        let (c, s) = cos_sin_deg(random_angle(&mut layout));
        buildings.push((
            Rect {
                cx: layout.random_range(0.0..size),
                cy: layout.random_range(0.0..size),
                half_w: layout.random_range(2.5..size / 7.0),
                half_h: layout.random_range(2.5..size / 7.0),
                cos: c,
                sin: s,
            },
            layout.random_range(-0.08..0.08),
        ));
    }
    let mut roads = Vec::with_capacity(spec.n_roads);
    for _ in 0..spec.n_roads {
        let (c, s) = cos_sin_deg(random_angle(&mut layout));
        roads.push(Strip {
            px: layout.random_range(0.15 * size..0.85 * size),
            py: layout.random_range(0.15 * size..0.85 * size),
            dx: c,
            dy: s,
            half: layout.random_range(2.0..3.5),
        });
    }

    let mut texture = rng::stream(spec.seed, streams::TEXTURE);
    let mut obstacles = Mask::empty(n, n);
    let mut road_mask = Mask::empty(n, n);
    let mut values = Vec::with_capacity(n * n * 3);
    for row in 0..n {
        for col in 0..n {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let on_road = roads.iter().any(|r| r.contains(x, y));
            let building = if on_road {
                None
            } else {
                buildings.iter().find(|(b, _)| b.contains(x, y))
            };
            let (base, shade) = match (on_road, building) {
                (true, _) => (ROAD_RGB, 0.0),
                (false, Some((_, shade))) => (BUILDING_RGB, *shade),
                (false, None) => (GROUND_RGB, 0.0),
            };
            road_mask.cells[row * n + col] = on_road;
            obstacles.cells[row * n + col] = building.is_some();
            for b in base {
                let v = b + shade + texture.random_range(-TEXTURE_AMPLITUDE..TEXTURE_AMPLITUDE);
                values.push(quantize_u8(v));
            }
        }
    }
    let tile = AerialTile::new(n, n, spec.pixels_per_meter, values)?;

    let mut pose_rng = rng::stream(spec.seed, streams::POSE);
    let mut gt_pose = None;
    for _ in 0..MAX_POSE_ATTEMPTS {
        let (row, col) = (pose_rng.random_range(0..n), pose_rng.random_range(0..n));
        let theta: f64 = pose_rng.random_range(0.0..360.0);
        let ok = !obstacles.get(row, col) && (spec.n_roads == 0 || road_mask.get(row, col));
        if ok {
            let x = (col as f64 + 0.5) / spec.pixels_per_meter;
            let y = (row as f64 + 0.5) / spec.pixels_per_meter;
            gt_pose = Some(Pose::new(x, y, theta)?);
            break;
        }
    }
    let gt_pose = gt_pose.ok_or_else(|| {
        Error::Generation(format!(
            "no free road cell found after {MAX_POSE_ATTEMPTS} attempts (seed {})",
            spec.seed
        ))
    })?;

    let cloud = simulate_lidar(
        &obstacles,
        spec.pixels_per_meter,
        &gt_pose,
        spec.lidar_rays,
        spec.lidar_range,
        spec.noise_sigma,
        spec.seed,
    )?;
    Ok(Scene {
        spec: spec.clone(),
        tile,
        obstacles,
        roads: road_mask,
        gt_pose,
        cloud,
    })
}

/// Rounds to the nearest 8-bit level so image files reproduce the tile exactly.
fn quantize_u8(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
}

/// Distance in pixels to the first occupied cell along a ray, by grid
/// traversal from `(sx, sy)` in direction `(dx, dy)`.
pub fn cast_ray(map: &Mask, sx: f64, sy: f64, dx: f64, dy: f64, max_t: f64) -> Option<f64> {
    let (mut cx, mut cy) = (sx.floor() as i64, sy.floor() as i64);
    let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_y: i64 = if dy > 0.0 { 1 } else { -1 };
    let next_boundary = |c: i64, s: f64, d: f64, step: i64| {
        if d == 0.0 {
            f64::INFINITY
        } else {
            let edge = if step > 0 { (c + 1) as f64 } else { c as f64 };
            (edge - s) / d
        }
    };
    let mut t_x = next_boundary(cx, sx, dx, step_x);
    let mut t_y = next_boundary(cy, sy, dy, step_y);
    let dt_x = if dx == 0.0 { f64::INFINITY } else { 1.0 / dx.abs() };
    let dt_y = if dy == 0.0 { f64::INFINITY } else { 1.0 / dy.abs() };
    let (h, w) = (map.height as i64, map.width as i64);
    loop {
        let t = if t_x < t_y {
            cx += step_x;
            let t = t_x;
            t_x += dt_x;
            t
        } else {
            cy += step_y;
            let t = t_y;
            t_y += dt_y;
            t
        };
        if t > max_t || cx < 0 || cy < 0 || cx >= w || cy >= h {
            return None;
        }
        if map.get(cy as usize, cx as usize) {
            return Some(t);
        }
    }
}

/// Equiangular 2D scan from `pose`; hits become sensor-frame points with
/// range noise and a random height in `[0.5, 2.5]` m.
pub fn simulate_lidar(
    obstacles: &Mask,
    pixels_per_meter: f64,
    pose: &Pose,
    rays: usize,
    max_range: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<PointCloud> {
    if rays == 0 {
        return Err(Error::invalid("rays must be at least 1"));
    }
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut r = rng::stream(seed, streams::LIDAR);
    let (sx, sy) = (pose.x * pixels_per_meter, pose.y * pixels_per_meter);
    let mut points = Vec::new();
    for i in 0..rays {
        let alpha = i as f64 * 360.0 / rays as f64;
        let (dx, dy) = cos_sin_deg(pose.theta + alpha);
        let Some(t) = cast_ray(obstacles, sx, sy, dx, dy, max_range * pixels_per_meter) else {
            continue;
        };
        let mut range = t / pixels_per_meter;
        if noise_sigma > 0.0 {
            range += noise.sample(&mut r);
        }
        let z = r.random_range(0.5..2.5);
        let (ca, sa) = cos_sin_deg(alpha);
        points.push([range * ca, range * sa, z]);
    }
    Ok(PointCloud::new(points))
}

/// Scenes for indices `start..start + count`, each seeded by
/// `derive_seed(seed, index)`.
pub fn generate_scenes(base: &SceneSpec, seed: u64, start: usize, count: usize) -> Result<Vec<Scene>> {
    (start..start + count)
        .into_par_iter()
        .map(|i| {
            let spec = SceneSpec {
                seed: rng::derive_seed(seed, i as u64),
                ..base.clone()
            };
            generate_scene(&spec)
        })
        .collect()
}

/// One dataset entry as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub seed: u64,
    pub tile: AerialTile,
    pub cloud: PointCloud,
    pub pose: Pose,
    pub cell_size: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Sample {
    pub fn from_scene(id: impl Into<String>, scene: &Scene) -> Self {
        Sample {
            id: id.into(),
            seed: scene.spec.seed,
            tile: scene.tile.clone(),
            cloud: scene.cloud.clone(),
            pose: scene.gt_pose,
            cell_size: 1.0 / scene.spec.pixels_per_meter,
            z_min: DEFAULT_Z_RANGE.0,
            z_max: DEFAULT_Z_RANGE.1,
        }
    }
}

pub const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "sample_id,seed,tile_size,pixels_per_meter";
const META_HEADER: &str = "pixels_per_meter,cell_size,z_min,z_max";

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Writes samples `s{start:05}…` under `root` with a root manifest.
pub fn write_dataset(scenes: &[Scene], root: &Path, start: usize) -> Result<PathBuf> {
    let samples: Vec<Sample> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| Sample::from_scene(sample_id(start + i), s))
        .collect();
    write_samples(&samples, root)
}

pub fn write_samples(samples: &[Sample], root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for s in samples {
        let dir = root.join(&s.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let t = &s.tile;
        Pnm {
            width: t.width,
            height: t.height,
            channels: 3,
            maxval: 255,
            data: t.values.iter().map(|&v| (v * 255.0).round() as u16).collect(),
        }
        .write(&dir.join("aerial.ppm"))?;
        let mut xyz = String::with_capacity(s.cloud.len() * 48);
        for p in &s.cloud.points {
            let _ = writeln!(xyz, "{:.8e} {:.8e} {:.8e}", p[0], p[1], p[2]);
        }
        write_text(&dir.join("cloud.xyz"), &xyz)?;
        write_text(
            &dir.join("pose.csv"),
            &format!("{:.8e},{:.8e},{:.8e}\n", s.pose.x, s.pose.y, s.pose.theta),
        )?;
        write_text(
            &dir.join("meta.csv"),
            &format!(
                "{META_HEADER}\n{},{},{},{}\n",
                t.pixels_per_meter, s.cell_size, s.z_min, s.z_max
            ),
        )?;
        let _ = writeln!(manifest, "{},{},{},{}", s.id, s.seed, t.width, t.pixels_per_meter);
    }
    let path = root.join(MANIFEST);
    write_text(&path, &manifest)?;
    Ok(path)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_fields<const N: usize>(path: &Path, line: &str, sep: char) -> Result<[f64; N]> {
    let vals: Vec<f64> = line
        .split(sep)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::format(path, format!("bad number {s:?}")))
        })
        .collect::<Result<_>>()?;
    vals.try_into()
        .map_err(|v: Vec<f64>| Error::format(path, format!("expected {N} fields, found {}", v.len())))
}

pub fn read_sample(root: &Path, id: &str, seed: u64) -> Result<Sample> {
    let dir = root.join(id);
    let meta_path = dir.join("meta.csv");
    let meta = read_text(&meta_path)?;
    let line = meta
        .lines()
        .find(|l| !l.trim().is_empty() && !l.starts_with("pixels_per_meter"))
        .ok_or_else(|| Error::format(&meta_path, "missing values row"))?;
    let [ppm, cell_size, z_min, z_max] = parse_fields::<4>(&meta_path, line, ',')?;

    let img_path = dir.join("aerial.ppm");
    let img = Pnm::read(&img_path)?;
    if img.channels != 3 {
        return Err(Error::format(&img_path, "aerial image must have 3 channels"));
    }
    let scale = img.maxval as f32;
    let values = img.data.iter().map(|&v| v as f32 / scale).collect();
    let tile = AerialTile::new(img.height, img.width, ppm, values).map_err(|e| Error::format(&img_path, e.to_string()))?;

    let cloud_path = dir.join("cloud.xyz");
    let mut points = Vec::new();
    for line in read_text(&cloud_path)?.lines().filter(|l| !l.trim().is_empty()) {
        points.push(parse_fields::<3>(&cloud_path, line, ' ')?);
    }
    let cloud = PointCloud::new(points);
    cloud.validate().map_err(|e| Error::format(&cloud_path, e.to_string()))?;

    let pose_path = dir.join("pose.csv");
    let text = read_text(&pose_path)?;
    let [x, y, theta] = parse_fields::<3>(&pose_path, text.trim(), ',')?;
    let pose = Pose::new(x, y, theta).map_err(|e| Error::format(&pose_path, e.to_string()))?;
    Ok(Sample {
        id: id.to_string(),
        seed,
        tile,
        cloud,
        pose,
        cell_size,
        z_min,
        z_max,
    })
}

/// Reads every sample listed in `root/manifest.csv`, in manifest order.
pub fn read_dataset(root: &Path) -> Result<Vec<Sample>> {
    let path = root.join(MANIFEST);
    let text = read_text(&path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == MANIFEST_HEADER => {}
        _ => return Err(Error::format(&path, format!("expected header {MANIFEST_HEADER:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let fields: Vec<&str> = l.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::format(&path, format!("bad manifest row {l:?}")));
            }
            let seed = fields[1]
                .trim()
                .parse()
                .map_err(|_| Error::format(&path, format!("bad seed in row {l:?}")))?;
            read_sample(root, fields[0].trim(), seed)
        })
        .collect()
}
