//! Double-precision reference forward pass over dequantized weights.

#![allow(dead_code)]

use emoe::approx::gelu_reference;
use emoe::model::{BlockKind, Image, ModelWeights, LN_EPS};

pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

fn tensor(w: &ModelWeights, name: &str) -> Vec<f64> {
    w.get(name).unwrap().to_f64_vec()
}

fn linear(x: &Mat, w: &ModelWeights, prefix: &str) -> Mat {
    let wt = w.get(&format!("{prefix}.weight")).unwrap();
    let (out, inp) = (wt.shape()[0], wt.shape()[1]);
    assert_eq!(inp, x.cols);
    let wv = wt.to_f64_vec();
    let b = tensor(w, &format!("{prefix}.bias"));
    let mut data = Vec::with_capacity(x.rows * out);
    for t in 0..x.rows {
        let xr = x.row(t);
        for i in 0..out {
            let row = &wv[i * inp..(i + 1) * inp];
            data.push(row.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() + b[i]);
        }
    }
    Mat { rows: x.rows, cols: out, data }
}

fn add(a: &Mat, b: &Mat) -> Mat {
    Mat { rows: a.rows, cols: a.cols, data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect() }
}

fn layer_norm(x: &Mat, w: &ModelWeights, prefix: &str) -> Mat {
    let g = tensor(w, &format!("{prefix}.gamma"));
    let b = tensor(w, &format!("{prefix}.beta"));
    let d = x.cols as f64;
    let mut data = Vec::with_capacity(x.data.len());
    for t in 0..x.rows {
        let r = x.row(t);
        let mean = r.iter().sum::<f64>() / d;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        data.extend(r.iter().enumerate().map(|(c, v)| (v - mean) * inv * g[c] + b[c]));
    }
    Mat { rows: x.rows, cols: x.cols, data }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn attention(x: &Mat, w: &ModelWeights, b: usize, heads: usize, scale: bool) -> Mat {
    let p = |n: &str| format!("blocks.{b}.attn.{n}");
    let (q, k, v) = (linear(x, w, &p("q")), linear(x, w, &p("k")), linear(x, w, &p("v")));
    let (n, d) = (x.rows, x.cols);
    let dh = d / heads;
    let factor = if scale { 1.0 / (dh as f64).sqrt() } else { 1.0 };
    let mut concat = vec![0.0; n * d];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| q.row(i)[cols.clone()].iter().zip(&k.row(j)[cols.clone()]).map(|(a, b)| a * b).sum::<f64>() * factor)
                .collect();
            let probs = softmax(&scores);
            for c in cols.clone() {
                concat[i * d + c] = (0..n).map(|j| probs[j] * v.row(j)[c]).sum();
            }
        }
    }
    linear(&Mat { rows: n, cols: d, data: concat }, w, &p("o"))
}

fn mlp(x: &Mat, w: &ModelWeights, prefix: &str) -> Mat {
    let mut h = linear(x, w, &format!("{prefix}.fc1"));
    h.data.iter_mut().for_each(|v| *v = gelu_reference(*v));
    linear(&h, w, &format!("{prefix}.fc2"))
}

fn moe(x: &Mat, w: &ModelWeights, b: usize, task: usize) -> Mat {
    let cfg = w.config();
    let logits = linear(x, w, &format!("blocks.{b}.gates.{task}"));
    let mut out = vec![0.0; x.rows * x.cols];
    for t in 0..x.rows {
        let l = logits.row(t);
        let mut order: Vec<usize> = (0..l.len()).collect();
        order.sort_by(|&a, &c| l[c].partial_cmp(&l[a]).unwrap().then(a.cmp(&c)));
        order.truncate(cfg.top_k);
        let weights = softmax(&order.iter().map(|&e| l[e]).collect::<Vec<_>>());
        let token = Mat { rows: 1, cols: x.cols, data: x.row(t).to_vec() };
        for (&e, g) in order.iter().zip(weights) {
            let y = mlp(&token, w, &format!("blocks.{b}.experts.{e}"));
            for c in 0..x.cols {
                out[t * x.cols + c] += g * y.data[c];
            }
        }
    }
    Mat { rows: x.rows, cols: x.cols, data: out }
}

/// Backbone features in double precision.
pub fn reference_forward(w: &ModelWeights, image: &Image, task: usize) -> Mat {
    let cfg = w.config();
    let ps = cfg.patch_size;
    let (pr, pc) = (image.height / ps, image.width / ps);
    let mut patches = Vec::with_capacity(image.pixels.len());
    for r in 0..pr {
        for c in 0..pc {
            for y in 0..ps {
                let s = (r * ps + y) * image.width + c * ps;
                patches.extend_from_slice(&image.pixels[s..s + ps]);
            }
        }
    }
    let patches = Mat { rows: pr * pc, cols: ps * ps, data: patches };
    let pos = Mat { rows: pr * pc, cols: cfg.d, data: tensor(w, "pos_embed") };
    let mut x = add(&linear(&patches, w, "patch_embed"), &pos);
    for b in 0..cfg.n_blocks {
        let h = layer_norm(&x, w, &format!("blocks.{b}.norm1"));
        x = add(&x, &attention(&h, w, b, cfg.n_heads, cfg.scale_scores));
        let h = layer_norm(&x, w, &format!("blocks.{b}.norm2"));
        let f = match cfg.block_kind(b) {
            BlockKind::Vit => mlp(&h, w, &format!("blocks.{b}.mlp")),
            BlockKind::Moe => moe(&h, w, b, task),
        };
        x = add(&x, &f);
    }
    layer_norm(&x, w, "norm")
}

pub fn mean_abs_deviation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}
