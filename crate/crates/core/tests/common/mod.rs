//! Independent oracles shared by the integration and acceptance tests.
//! The index loops are deliberate: they mirror the formulas term by term.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use udsaudit::tinylm::{
    masked_nll_grad, CaptureRequest, ModelConfig, PatchLocation, TrainSequence, Transformer,
};

type Mat = Vec<Vec<f64>>;

fn tensor(m: &Transformer<f64>, name: &str, rows: usize, cols: usize) -> Mat {
    let flat = m.tensor(name).unwrap();
    (0..rows).map(|r| flat[r * cols..(r + 1) * cols].to_vec()).collect()
}

fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for (xi, row) in x.iter().zip(w) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(g).map(|(v, gi)| v * s * gi).collect()
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh())
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Straight-line forward pass: per-layer `(a, m, h)` states and final
/// log-softmax rows.
pub struct Reference {
    pub attn: Vec<Mat>,
    pub mid: Vec<Mat>,
    pub out: Vec<Mat>,
    pub log_probs: Mat,
}

pub fn reference_forward(model: &Transformer<f64>, tokens: &[u32]) -> Reference {
    let c = model.config().clone();
    let (d, v, f, nh) = (c.d_model, c.vocab_size, c.d_ff, c.n_heads);
    let dh = d / nh;
    let te = tensor(model, "tok_emb", v, d);
    let pe = tensor(model, "pos_emb", c.max_seq_len, d);
    let mut h: Mat = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| add(&te[t as usize], &pe[p]))
        .collect();
    let (mut attn, mut mid, mut out) = (vec![], vec![], vec![]);
    for l in 0..c.n_layers {
        let name = |s: &str| format!("blocks.{l}.{s}");
        let g1 = model.tensor(&name("attn_norm")).unwrap().to_vec();
        let g2 = model.tensor(&name("mlp_norm")).unwrap().to_vec();
        let (wq, wk, wv, wo) = (
            tensor(model, &name("wq"), d, d),
            tensor(model, &name("wk"), d, d),
            tensor(model, &name("wv"), d, d),
            tensor(model, &name("wo"), d, d),
        );
        let w_in = tensor(model, &name("w_in"), d, f);
        let w_out = tensor(model, &name("w_out"), f, d);
        let n1: Mat = h.iter().map(|x| rms(x, &g1)).collect();
        let q: Mat = n1.iter().map(|x| vecmat(x, &wq)).collect();
        let k: Mat = n1.iter().map(|x| vecmat(x, &wk)).collect();
        let vv: Mat = n1.iter().map(|x| vecmat(x, &wv)).collect();
        let mut a = Vec::new();
        for i in 0..tokens.len() {
            let mut ctx = vec![0.0; d];
            for hd in 0..nh {
                let r = hd * dh..(hd + 1) * dh;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        q[i][r.clone()]
                            .iter()
                            .zip(&k[j][r.clone()])
                            .map(|(x, y)| x * y)
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let p = (s - mx).exp() / z;
                    for e in r.clone() {
                        ctx[e] += p * vv[j][e];
                    }
                }
            }
            a.push(vecmat(&ctx, &wo));
        }
        let m: Mat = h.iter().zip(&a).map(|(x, y)| add(x, y)).collect();
        let hn: Mat = m
            .iter()
            .map(|x| {
                let u: Vec<f64> = vecmat(&rms(x, &g2), &w_in).into_iter().map(gelu).collect();
                add(x, &vecmat(&u, &w_out))
            })
            .collect();
        attn.push(a);
        mid.push(m);
        out.push(hn.clone());
        h = hn;
    }
    let gf = model.tensor("final_norm").unwrap().to_vec();
    let un = tensor(model, "unembed", d, v);
    let bias = model.tensor("unembed_bias").unwrap().to_vec();
    let log_probs = h
        .iter()
        .map(|x| {
            let logits = add(&vecmat(&rms(x, &gf), &un), &bias);
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
            logits.iter().map(|z| z - lse).collect()
        })
        .collect();
    Reference {
        attn,
        mid,
        out,
        log_probs,
    }
}

/// Parameter groups used by the gradient check.
pub fn param_groups(model: &Transformer<f64>) -> Vec<(&'static str, Vec<usize>)> {
    let mut groups: Vec<(&'static str, Vec<usize>)> = vec![
        ("embeddings", vec![]),
        ("attention", vec![]),
        ("mlp", vec![]),
        ("norms", vec![]),
        ("unembedding", vec![]),
    ];
    for t in &model.layout().tensors {
        let g = if t.name.ends_with("emb") {
            0
        } else if t.name.ends_with("wq") || t.name.ends_with("wk") || t.name.ends_with("wv") || t.name.ends_with("wo") {
            1
        } else if t.name.ends_with("w_in") || t.name.ends_with("w_out") {
            2
        } else if t.name.ends_with("norm") {
            3
        } else {
            4
        };
        groups[g].1.extend(t.range());
    }
    groups
}

pub struct GradCheck {
    pub group: &'static str,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Central finite differences (h = 1e-4) against the analytic gradient of
/// the summed masked NLL, on `per_group` random parameters of every group.
pub fn finite_difference_check(seed: u64, per_group: usize) -> Vec<GradCheck> {
    let cfg = ModelConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 12,
        seed,
    };
    let model = Transformer::<f32>::new(cfg).unwrap().cast::<f64>();
    let tokens: Vec<u32> = vec![1, 5, 9, 3, 14, 7, 2, 11, 6, 15, 0, 8];
    let seq = TrainSequence {
        target_mask: (0..tokens.len()).map(|i| i > 0).collect(),
        tokens,
    };
    let (_, _, analytic) = masked_nll_grad(&model, &seq).unwrap();
    let loss_at = |m: &Transformer<f64>| masked_nll_grad(m, &seq).unwrap().0;
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    param_groups(&model)
        .into_iter()
        .map(|(group, idx)| {
            let n = per_group.min(idx.len());
            let mut worst = 0.0f64;
            for pick in sample(&mut rng, idx.len(), n) {
                let i = idx[pick];
                let mut plus = model.clone();
                plus.params_mut()[i] += h;
                let mut minus = model.clone();
                minus.params_mut()[i] -= h;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let a = analytic[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
            GradCheck {
                group,
                checked: n,
                max_rel_err: worst,
            }
        })
        .collect()
}

/// Largest log-prob change from patching every (layer, location, position)
/// with the model's own captured state.
pub fn identity_patch_max_dev(model: &Transformer<f32>, tokens: &[u32]) -> f64 {
    let base = model.forward(tokens).unwrap();
    let layers: Vec<usize> = (0..model.n_layers()).collect();
    let mut worst = 0.0f64;
    for loc in PatchLocation::ALL {
        for pos in 0..tokens.len() {
            let req = CaptureRequest::new(layers.clone(), vec![pos], loc);
            let cap = model.forward_with_capture(tokens, &req).unwrap();
            for li in 0..layers.len() {
                let patched = model.forward_with_patch(tokens, &[cap.to_patch(li)]).unwrap();
                for (a, b) in base.data.iter().zip(&patched.data) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    worst
}

/// Pairwise-count AUC: P(pos > neg) + 0.5 P(tie).
pub fn brute_force_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for p in pos {
        for n in neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Full-table LCS length.
pub fn lcs_table(a: &[u32], b: &[u32]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

fn centered_gram(h: &[f64], d: usize) -> Mat {
    let n = h.len() / d;
    let k: Mat = (0..n)
        .map(|i| (0..n).map(|j| (0..d).map(|c| h[i * d + c] * h[j * d + c]).sum()).collect())
        .collect();
    let row: Vec<f64> = k.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let all = row.iter().sum::<f64>() / n as f64;
    (0..n)
        .map(|i| (0..n).map(|j| k[i][j] - row[i] - row[j] + all).collect())
        .collect()
}

fn frob_dot(a: &Mat, b: &Mat) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| x * y).sum()
}

/// Linear CKA through centred Gram matrices (HSIC form).
pub fn gram_cka(h1: &[f64], d1: usize, h2: &[f64], d2: usize) -> f64 {
    let (k, l) = (centered_gram(h1, d1), centered_gram(h2, d2));
    frob_dot(&k, &l) / (frob_dot(&k, &k) * frob_dot(&l, &l)).sqrt()
}

/// Ranks by counting smaller and equal values.
pub fn counting_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let less = x.iter().filter(|w| *w < v).count() as f64;
            let eq = x.iter().filter(|w| *w == v).count() as f64;
            less + (eq + 1.0) / 2.0
        })
        .collect()
}

pub fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Haar-random `d×d` orthogonal matrix (row-major) from Gram-Schmidt on
/// Gaussian rows.
pub fn random_orthogonal(d: usize, seed: u64) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Mat = (0..d)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for i in 0..d {
        for k in 0..i {
            let dot: f64 = (0..d).map(|j| q[i][j] * q[k][j]).sum();
            for j in 0..d {
                q[i][j] -= dot * q[k][j];
            }
        }
        let n = q[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        q[i].iter_mut().for_each(|x| *x /= n);
    }
    q.into_iter().flatten().collect()
}

/// The wrapped model with its residual stream expressed in a rotated basis
/// at `layers`: captured states there come back as `h·R`.
pub struct Rotated<'a> {
    pub model: &'a Transformer<f32>,
    pub rotation: Vec<f64>,
    pub layers: Vec<usize>,
}

impl udsaudit::tinylm::StateSource for Rotated<'_> {
    fn model_config(&self) -> &ModelConfig {
        self.model.config()
    }

    fn source_hash(&self) -> u64 {
        self.model.param_hash() ^ 0x726f74
    }

    fn capture(
        &self,
        tokens: &[u32],
        request: &CaptureRequest,
    ) -> udsaudit::Result<udsaudit::tinylm::CaptureResult> {
        let d = self.model.config().d_model;
        let mut cap = self.model.forward_with_capture(tokens, request)?;
        for (li, l) in request.layers.iter().enumerate() {
            if !self.layers.contains(l) {
                continue;
            }
            for row in cap.layer_states_mut(li).chunks_mut(d) {
                let x: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                for (j, out) in row.iter_mut().enumerate() {
                    *out = (0..d).map(|i| x[i] * self.rotation[i * d + j]).sum::<f64>() as f32;
                }
            }
        }
        Ok(cap)
    }
}
