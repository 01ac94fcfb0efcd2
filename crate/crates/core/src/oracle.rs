//! Straight-line reference implementations.
//!
//! Everything here works on plain `f64` vectors with explicit loops and reads
//! parameters only through `Tensor::data`. Nothing calls back into the
//! tensor ops, scan, encoder, geometry or reuse code it is used to check.

use crate::config::{ModelConfig, OrderPolicy, ScoreDirection, ScoreMetric};
use crate::pipeline::Model;
use crate::ssm::SsmParams;
use crate::tensor::Tensor;
use crate::vim::BlockParams;

pub type Rows = Vec<Vec<f64>>;

fn w(t: &Tensor, i: usize, j: usize) -> f64 {
    let cols = t.dims()[t.rank() - 1];
    t.data()[i * cols + j] as f64
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0f64;
            for kk in 0..k {
                s += a[i * k + kk] as f64 * b[kk * n + j] as f64;
            }
            out[i * n + j] = s as f32;
        }
    }
    out
}

fn project(x: &[f64], m: &Tensor) -> Vec<f64> {
    let cols = m.dims()[1];
    (0..cols).map(|j| (0..x.len()).map(|i| x[i] * w(m, i, j)).sum()).collect()
}

/// One scan direction over `x` visiting tokens in `order`; output aligned to
/// token index.
fn scan_direction(x: &Rows, p: &SsmParams, order: &[usize]) -> Rows {
    let inner = p.a.dims()[0];
    let state = p.a.dims()[1];
    let mut h = vec![vec![0f64; state]; inner];
    let mut y = vec![vec![0f64; inner]; x.len()];
    for &t in order {
        let delta: Vec<f64> = project(&x[t], &p.delta_proj).into_iter().map(softplus).collect();
        let b = project(&x[t], &p.b_proj);
        let c = project(&x[t], &p.c_proj);
        for d in 0..inner {
            for n in 0..state {
                let a = w(&p.a, d, n);
                let a_bar = (delta[d] * a).exp();
                let b_bar = if a == 0.0 { delta[d] * b[n] } else { (a_bar - 1.0) / a * b[n] };
                h[d][n] = a_bar * h[d][n] + b_bar * x[t][d];
                y[t][d] += c[n] * h[d][n];
            }
        }
    }
    y
}

/// Scalar expansion of one bidirectional block. Returns `(out, y_fwd, y_bwd)`.
pub fn block(seq: &Rows, p: &BlockParams) -> (Rows, Rows, Rows) {
    let inner = p.out_proj.dims()[0];
    let len = seq.len();
    let xz: Rows = seq.iter().map(|t| project(t, &p.in_proj)).collect();
    let x: Rows = xz.iter().map(|r| r[..inner].to_vec()).collect();
    let z: Rows = xz.iter().map(|r| r[inner..].to_vec()).collect();

    let fwd_order: Vec<usize> = (0..len).collect();
    let bwd_order: Vec<usize> = (0..len).rev().collect();
    let y_f = scan_direction(&x, &p.fwd, &fwd_order);
    let y_b = scan_direction(&x, &p.bwd, &bwd_order);

    let mut out = seq.clone();
    for t in 0..len {
        let gf: Vec<f64> = project(&z[t], &p.gate_fwd).into_iter().map(sigmoid).collect();
        let gb: Vec<f64> = project(&z[t], &p.gate_bwd).into_iter().map(sigmoid).collect();
        let mixed: Vec<f64> = (0..inner).map(|d| y_f[t][d] * gf[d] + y_b[t][d] * gb[d]).collect();
        let proj = project(&mixed, &p.out_proj);
        for (o, v) in out[t].iter_mut().zip(proj) {
            *o += v;
        }
    }
    (out, y_f, y_b)
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Pixel at `(ch, y, x)` of an image after `pool` rounds of 2×2 averaging.
fn pixel(image: &Tensor, ch: usize, y: usize, x: usize, pooled: bool) -> f64 {
    let (h, wd) = (image.dims()[1], image.dims()[2]);
    let at = |yy: usize, xx: usize| image.data()[ch * h * wd + yy * wd + xx] as f64;
    if pooled {
        (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)) / 4.0
    } else {
        at(y, x)
    }
}

/// Patch tokens on the coarse grid (pooled) or the fine grid, row-major.
pub fn embed(image: &Tensor, cfg: &ModelConfig, patch_embed: &Tensor, pooled: bool) -> Rows {
    let p = cfg.fine_patch;
    let side = if pooled { cfg.coarse_side() } else { cfg.fine_side() };
    let mut tokens = Vec::new();
    for gi in 0..side {
        for gj in 0..side {
            let mut flat = Vec::new();
            for ch in 0..cfg.in_channels {
                for y in 0..p {
                    for x in 0..p {
                        flat.push(pixel(image, ch, gi * p + y, gj * p + x, pooled));
                    }
                }
            }
            tokens.push(project(&flat, patch_embed));
        }
    }
    tokens
}

pub struct Trace {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub tokens: Rows,
    pub cls_index: usize,
    pub acts: Vec<(Rows, Rows)>,
}

fn run_blocks(mut seq: Rows, model: &Model) -> (Rows, Vec<(Rows, Rows)>) {
    let mut acts = Vec::new();
    for b in &model.params.blocks {
        let (out, yf, yb) = block(&seq, b);
        seq = out;
        acts.push((yf, yb));
    }
    (seq, acts)
}

fn head(cls: &[f64], model: &Model) -> Vec<f64> {
    let mut logits = project(cls, &model.params.head_w);
    for (l, b) in logits.iter_mut().zip(model.params.head_b.data()) {
        *l += *b as f64;
    }
    logits
}

/// Single-resolution pass: coarse (pooled) or full fine grid with CLS in
/// the middle and positional rows taken by sequence position.
pub fn single_scale(image: &Tensor, model: &Model, coarse: bool) -> Trace {
    let cfg = &model.config;
    let tokens = embed(image, cfg, &model.params.patch_embed, coarse);
    let m = tokens.len();
    let mid = m / 2;
    let cls: Vec<f64> = model.params.cls.data().iter().map(|&v| v as f64).collect();
    let mut seq: Rows = tokens[..mid].to_vec();
    seq.push(cls);
    seq.extend_from_slice(&tokens[mid..]);
    let pos = if coarse { &model.params.pos_coarse } else { &model.params.pos_fine };
    for (p, row) in seq.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += w(pos, p, j);
        }
    }
    let (out, acts) = run_blocks(seq, model);
    let logits = head(&out[mid], model);
    Trace {
        probs: softmax(&logits),
        logits,
        tokens: out,
        cls_index: mid,
        acts,
    }
}

/// Fine stage for the default configuration (mean direction, softplus max,
/// shallow-to-deep EMA, CLS in the middle of the important block).
pub fn fine_stage(image: &Tensor, model: &Model, coarse: &Trace, alpha: f64) -> Trace {
    let cfg = &model.config;
    assert_eq!(cfg.score_direction, ScoreDirection::Mean);
    assert_eq!(cfg.score_metric, ScoreMetric::SoftplusMax);
    assert_eq!(cfg.order_policy, OrderPolicy::ClsMiddleOfImportant);
    let n_c = cfg.num_coarse();
    let h1 = cfg.coarse_side();
    let h2 = 2 * h1;

    // Layer scores folded shallow to deep.
    let mut layers = cfg.participating_layers();
    layers.sort();
    let score = |l: usize| -> Vec<f64> {
        let (yf, yb) = &coarse.acts[l];
        (0..yf.len())
            .map(|t| {
                (0..yf[t].len())
                    .map(|d| softplus(0.5 * (yf[t][d] + yb[t][d])))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    };
    let mut ema = score(layers[0]);
    for &l in &layers[1..] {
        let cur = score(l);
        for (e, c) in ema.iter_mut().zip(cur) {
            *e = cfg.beta * *e + (1.0 - cfg.beta) * c;
        }
    }
    let scores: Vec<f64> = ema
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != coarse.cls_index)
        .map(|(_, v)| *v as f32 as f64)
        .collect();

    let k = (alpha * n_c as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut ranked: Vec<usize> = (0..n_c).collect();
    ranked.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut imp = ranked[..k].to_vec();
    let mut unimp = ranked[k..].to_vec();
    imp.sort();
    unimp.sort();

    let fine_tokens = embed(image, cfg, &model.params.patch_embed, false);
    let mut fine_idx = Vec::new();
    for &i in &imp {
        let (r, c) = (i / h1, i % h1);
        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            fine_idx.push((2 * r + dr) * h2 + 2 * c + dc);
        }
    }
    fine_idx.sort();

    // Reuse features per coarse patch.
    let reuse: Rows = if cfg.reuse_enabled {
        (0..n_c)
            .map(|i| {
                let pos = if i < coarse.cls_index { i } else { i + 1 };
                let r = &model.params.reuse;
                let mut hidden = project(&coarse.tokens[pos], &r.w0);
                for (hv, b) in hidden.iter_mut().zip(r.b0.data()) {
                    *hv = gelu(*hv + *b as f64);
                }
                let mut out = project(&hidden, &r.w1);
                for (o, b) in out.iter_mut().zip(r.b1.data()) {
                    *o += *b as f64;
                }
                out
            })
            .collect()
    } else {
        vec![vec![0.0; cfg.dim]; n_c]
    };

    let n_f = 4 * n_c;
    let pos_fine = |j: usize| if j < n_f / 2 { j } else { j + 1 };
    let pos_coarse = |i: usize| if i < n_c / 2 { i } else { i + 1 };

    let mut seq: Rows = Vec::new();
    let m = fine_idx.len() / 2;
    let cls_index = m;
    for (slot, &f) in fine_idx.iter().enumerate() {
        if slot == m {
            seq.push(cls_with_pos(model, n_f / 2));
        }
        let parent = (f / h2 / 2) * h1 + (f % h2) / 2;
        let mut t = fine_tokens[f].clone();
        for j in 0..cfg.dim {
            t[j] += reuse[parent][j];
            t[j] += w(&model.params.pos_fine, pos_fine(f), j);
        }
        seq.push(t);
    }
    for &i in &unimp {
        let src = if i < coarse.cls_index { i } else { i + 1 };
        let mut t = coarse.tokens[src].clone();
        for j in 0..cfg.dim {
            t[j] += w(&model.params.pos_coarse, pos_coarse(i), j);
        }
        seq.push(t);
    }

    let (out, acts) = run_blocks(seq, model);
    let logits = head(&out[cls_index], model);
    Trace {
        probs: softmax(&logits),
        logits,
        tokens: out,
        cls_index,
        acts,
    }
}

fn cls_with_pos(model: &Model, row: usize) -> Vec<f64> {
    let d = model.config.dim;
    (0..d)
        .map(|j| model.params.cls.data()[j] as f64 + w(&model.params.pos_fine, row, j))
        .collect()
}

/// The four fine indices of coarse cell `i` from 2-D coordinates.
pub fn fine_children(i: usize, h1: usize) -> [usize; 4] {
    let (r, c) = (i / h1, i % h1);
    let h2 = 2 * h1;
    [2 * r * h2 + 2 * c, 2 * r * h2 + 2 * c + 1, (2 * r + 1) * h2 + 2 * c, (2 * r + 1) * h2 + 2 * c + 1]
}

pub fn max_abs(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - *y as f64).abs()).fold(0.0, f64::max)
}

pub fn rows_from(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
}
