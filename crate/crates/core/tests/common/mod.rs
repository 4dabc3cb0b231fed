//! Direct loop implementations used as independent references.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodal::params::ParamStore;
use xmodal::tensor::Tensor;

/// A `[C, H, W]` array.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn new(c: usize, h: usize, w: usize, v: Vec<f64>) -> Self {
        assert_eq!(v.len(), c * h * w);
        Map { c, h, w, v }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (c, h, w) = t.dims3().unwrap();
        Map::new(c, h, w, t.data().to_vec())
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(&[self.c, self.h, self.w], self.v.clone()).unwrap()
    }

    pub fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        self.v[(c * self.h + i) * self.w + j]
    }

    pub fn random(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Self {
        Map::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn param<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    let id = store.id_of(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get(id).data()
}

/// Adds uniform noise to every parameter so zero-initialized tensors matter.
pub fn perturb(store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn map_values(m: &Map, f: impl Fn(f64) -> f64) -> Map {
    Map::new(m.c, m.h, m.w, m.v.iter().map(|&x| f(x)).collect())
}

/// Six nested loops, zero padding `k / 2`.
pub fn conv(x: &Map, w: &[f64], b: &[f64], cout: usize, k: usize) -> Map {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; cout * x.h * x.w];
    for o in 0..cout {
        for i in 0..x.h {
            for j in 0..x.w {
                let mut s = b[o];
                for c in 0..x.c {
                    for di in 0..k {
                        for dj in 0..k {
                            let (ii, jj) = (i as isize + di as isize - pad, j as isize + dj as isize - pad);
                            if ii < 0 || jj < 0 || ii >= x.h as isize || jj >= x.w as isize {
                                continue;
                            }
                            s += w[((o * x.c + c) * k + di) * k + dj] * x.at(c, ii as usize, jj as usize);
                        }
                    }
                }
                out[(o * x.h + i) * x.w + j] = s;
            }
        }
    }
    Map::new(cout, x.h, x.w, out)
}

pub fn conv_named(store: &ParamStore, name: &str, x: &Map) -> Map {
    let b = param(store, &format!("{name}.b"));
    let w = param(store, &format!("{name}.w"));
    let k = ((w.len() / (b.len() * x.c)) as f64).sqrt().round() as usize;
    conv(x, w, b, b.len(), k)
}

pub fn instance_norm(x: &Map, gamma: &[f64], beta: &[f64]) -> Map {
    let n = (x.h * x.w) as f64;
    let mut out = x.v.clone();
    for c in 0..x.c {
        let plane = &x.v[c * x.h * x.w..(c + 1) * x.h * x.w];
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for (o, v) in out[c * x.h * x.w..(c + 1) * x.h * x.w].iter_mut().zip(plane) {
            *o = gamma[c] * (v - mean) / (var + 1e-5).sqrt() + beta[c];
        }
    }
    Map::new(x.c, x.h, x.w, out)
}

pub fn avg_pool(x: &Map, k: usize) -> Map {
    let (h, w) = (x.h / k, x.w / k);
    let mut out = vec![0.0; x.c * h * w];
    for c in 0..x.c {
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        s += x.at(c, i * k + a, j * k + b);
                    }
                }
                out[(c * h + i) * w + j] = s / (k * k) as f64;
            }
        }
    }
    Map::new(x.c, h, w, out)
}

pub fn upsample(x: &Map) -> Map {
    let (h, w) = (2 * x.h, 2 * x.w);
    let mut out = vec![0.0; x.c * h * w];
    for c in 0..x.c {
        for i in 0..h {
            for j in 0..w {
                out[(c * h + i) * w + j] = x.at(c, i / 2, j / 2);
            }
        }
    }
    Map::new(x.c, h, w, out)
}

pub fn concat(maps: &[&Map]) -> Map {
    let (h, w) = (maps[0].h, maps[0].w);
    let mut v = Vec::new();
    let mut c = 0;
    for m in maps {
        assert_eq!((m.h, m.w), (h, w));
        v.extend_from_slice(&m.v);
        c += m.c;
    }
    Map::new(c, h, w, v)
}

pub fn add(a: &Map, b: &Map) -> Map {
    Map::new(a.c, a.h, a.w, a.v.iter().zip(&b.v).map(|(x, y)| x + y).collect())
}

pub fn spatial_mean(x: &Map) -> Vec<f64> {
    (0..x.c)
        .map(|c| x.v[c * x.h * x.w..(c + 1) * x.h * x.w].iter().sum::<f64>() / (x.h * x.w) as f64)
        .collect()
}

/// `W · x + b` with `W` row-major `[out, in]`.
pub fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    (0..b.len())
        .map(|o| b[o] + (0..x.len()).map(|i| w[o * x.len() + i] * x[i]).sum::<f64>())
        .collect()
}

pub fn linear_named(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    linear(x, param(store, &format!("{name}.w")), param(store, &format!("{name}.b")))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Direct `O(n⁴)` DFT magnitude, `log(1 + |·|)`, zero frequency at `(h/2, w/2)`.
pub fn log_spectrum(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let a = -2.0 * std::f64::consts::PI * ((u * i) as f64 / h as f64 + (v * j) as f64 / w as f64);
                    re += plane[i * w + j] * a.cos();
                    im += plane[i * w + j] * a.sin();
                }
            }
            out[((u + h / 2) % h) * w + (v + w / 2) % w] = (1.0 + re.hypot(im)).ln();
        }
    }
    out
}

pub fn res_stage(store: &ParamStore, name: &str, x: &Map) -> Map {
    let h = conv_named(store, &format!("{name}.conv1"), x);
    let a = instance_norm(
        &h,
        param(store, &format!("{name}.norm.gamma")),
        param(store, &format!("{name}.norm.beta")),
    );
    let a = map_values(&a, silu);
    let r = conv_named(store, &format!("{name}.conv2"), &a);
    avg_pool(&add(&h, &r), 2)
}

pub fn refine(store: &ParamStore, name: &str, x: &Map) -> Map {
    let n = x.h * x.w;
    let mut stats = vec![0.0; 2 * n];
    for p in 0..n {
        let vals: Vec<f64> = (0..x.c).map(|c| x.v[c * n + p]).collect();
        let mean = vals.iter().sum::<f64>() / x.c as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.c as f64;
        stats[p] = mean;
        stats[n + p] = (var + 1e-5).sqrt();
    }
    let gate = conv_named(store, &format!("{name}.spatial"), &Map::new(2, x.h, x.w, stats));
    let mut y = x.clone();
    for c in 0..x.c {
        for p in 0..n {
            y.v[c * n + p] *= sigmoid(gate.v[p]);
        }
    }
    let m = spatial_mean(&y);
    let z: Vec<f64> = linear_named(store, &format!("{name}.squeeze"), &m).into_iter().map(silu).collect();
    let g: Vec<f64> = linear_named(store, &format!("{name}.excite"), &z).into_iter().map(sigmoid).collect();
    for c in 0..x.c {
        for p in 0..n {
            y.v[c * n + p] *= g[c];
        }
    }
    y
}

/// Reference backbone: returns the final features and the five stage outputs.
pub fn backbone(
    store: &ParamStore,
    name: &str,
    multiscale: bool,
    refine_on: bool,
    fourier: bool,
    x: &Map,
) -> (Map, Vec<Map>) {
    let mut scales = Vec::new();
    let mut cur = x.clone();
    for i in 0..5 {
        cur = res_stage(store, &format!("{name}.stage{i}"), &cur);
        scales.push(cur.clone());
    }
    let fuse = format!("{name}.fuse");
    let mut f = if multiscale {
        multiscale_fuse(store, &fuse, &scales[2], &scales[3], &scales[4])
    } else {
        conv_named(store, &fuse, &scales[4])
    };
    if refine_on {
        f = refine(store, &format!("{name}.refine"), &f);
    }
    if fourier {
        let mut spec = f.clone();
        for c in 0..f.c {
            let n = f.h * f.w;
            spec.v[c * n..(c + 1) * n].copy_from_slice(&log_spectrum(&f.v[c * n..(c + 1) * n], f.h, f.w));
        }
        let p = conv_named(store, &format!("{name}.fourier"), &concat(&[&f, &spec]));
        f = map_values(&p, silu);
    }
    (f, scales)
}

pub fn multiscale_fuse(store: &ParamStore, name: &str, s8: &Map, s16: &Map, s32: &Map) -> Map {
    let p8 = avg_pool(s8, 4);
    let p16 = avg_pool(s16, 2);
    conv_named(store, name, &concat(&[&p8, &p16, s32]))
}

/// Explicit-loop multi-head attention with a clamped relative-offset bias.
pub fn attention(store: &ParamStore, name: &str, heads: usize, window: usize, q: &Map, ctx: &Map) -> Map {
    let (d, n, w) = (q.c, q.h * q.w, q.w);
    let dk = d / heads;
    let token = |m: &Map, t: usize| -> Vec<f64> { (0..d).map(|c| m.v[c * n + t]).collect() };
    // Projection weights are applied as x · W with W stored [in, out].
    let proj = |tag: &str, x: &[f64]| -> Vec<f64> {
        let wm = param(store, &format!("{name}.{tag}.w"));
        let b = param(store, &format!("{name}.{tag}.b"));
        (0..d).map(|o| b[o] + (0..d).map(|i| x[i] * wm[i * d + o]).sum::<f64>()).collect()
    };
    let qs: Vec<Vec<f64>> = (0..n).map(|t| proj("q", &token(q, t))).collect();
    let ks: Vec<Vec<f64>> = (0..n).map(|t| proj("k", &token(ctx, t))).collect();
    let vs: Vec<Vec<f64>> = (0..n).map(|t| proj("v", &token(ctx, t))).collect();
    let table = param(store, &format!("{name}.rel_pos"));
    let side = 2 * window + 1;
    let wi = window as isize;
    let mut out = vec![0.0; d * n];
    for i in 0..n {
        let mut cat = vec![0.0; d];
        for hd in 0..heads {
            let mut scores = Vec::with_capacity(n);
            for j in 0..n {
                let mut s = 0.0;
                for c in 0..dk {
                    s += qs[i][hd * dk + c] * ks[j][hd * dk + c];
                }
                let di = ((i / w) as isize - (j / w) as isize).clamp(-wi, wi) + wi;
                let dj = ((i % w) as isize - (j % w) as isize).clamp(-wi, wi) + wi;
                scores.push(s / (dk as f64).sqrt() + table[(hd * side + di as usize) * side + dj as usize]);
            }
            let a = softmax(&scores);
            for c in 0..dk {
                cat[hd * dk + c] = (0..n).map(|j| a[j] * vs[j][hd * dk + c]).sum();
            }
        }
        let o = proj("o", &cat);
        for c in 0..d {
            out[c * n + i] = o[c];
        }
    }
    Map::new(d, q.h, q.w, out)
}

/// Full bidirectional fusion: `[aerial, a2b, bev, b2a]` → 1×1 conv → SiLU.
pub fn fusion(store: &ParamStore, name: &str, heads: usize, window: usize, a: &Map, b: &Map) -> Map {
    let ab = attention(store, &format!("{name}.a2b"), heads, window, a, b);
    let ba = attention(store, &format!("{name}.b2a"), heads, window, b, a);
    let p = conv_named(store, &format!("{name}.proj"), &concat(&[a, &ab, b, &ba]));
    map_values(&p, silu)
}

/// Reference likelihood decoder returning `(loc, ori, confidence)`.
pub fn decoder(store: &ParamStore, name: &str, fused: &Map, skips: &[Map; 4], tile: &Map) -> (Vec<f64>, Vec<f64>, f64) {
    let m = spatial_mean(fused);
    let h: Vec<f64> = linear_named(store, &format!("{name}.conf_hidden"), &m).into_iter().map(silu).collect();
    let conf = sigmoid(linear_named(store, &format!("{name}.conf_out"), &h)[0]);
    let levels = [&skips[3], &skips[2], &skips[1], &skips[0], tile];
    let mut x = fused.clone();
    for (i, skip) in levels.iter().enumerate() {
        let up = upsample(&x);
        let y = conv_named(store, &format!("{name}.up{i}"), &concat(&[&up, skip]));
        x = map_values(&y, silu);
    }
    let loc = softmax(&conv_named(store, &format!("{name}.loc"), &x).v);
    let o = conv_named(store, &format!("{name}.ori"), &x);
    let n = o.h * o.w;
    let mut ori = vec![0.0; o.v.len()];
    for p in 0..n {
        let col: Vec<f64> = (0..o.c).map(|k| o.v[k * n + p]).collect();
        for (k, v) in softmax(&col).into_iter().enumerate() {
            ori[k * n + p] = v;
        }
    }
    (loc, ori, conf)
}

/// Reference projection head.
pub fn projection(store: &ParamStore, name: &str, x: &Map) -> Vec<f64> {
    let m = spatial_mean(x);
    let h = linear_named(store, &format!("{name}.fc1"), &m);
    let n = h.len() as f64;
    let mean = h.iter().sum::<f64>() / n;
    let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let gamma = param(store, &format!("{name}.norm.gamma"));
    let beta = param(store, &format!("{name}.norm.beta"));
    let h: Vec<f64> = (0..h.len())
        .map(|i| silu(gamma[i] * (h[i] - mean) / (var + 1e-5).sqrt() + beta[i]))
        .collect();
    let z = linear_named(store, &format!("{name}.fc2"), &h);
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    z.iter().map(|v| v / norm).collect()
}
