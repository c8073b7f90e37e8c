use serde::{Deserialize, Serialize};

use super::ops::{self, dot, gelu, log_softmax_row, matmul, rmsnorm};
use super::{PatchLocation, Real, TokenId, Transformer};
use crate::error::{Error, Result};

/// Which hidden states to read out of a forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureRequest {
    pub layers: Vec<usize>,
    pub positions: Vec<usize>,
    pub location: PatchLocation,
}

impl CaptureRequest {
    pub fn new(layers: Vec<usize>, positions: Vec<usize>, location: PatchLocation) -> Self {
        Self {
            layers,
            positions,
            location,
        }
    }
}

/// Captured states, laid out `[layer][position][d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureResult<F: Real = f32> {
    pub layers: Vec<usize>,
    pub positions: Vec<usize>,
    pub location: PatchLocation,
    pub d_model: usize,
    pub data: Vec<F>,
}

impl<F: Real> CaptureResult<F> {
    /// States of the `li`-th requested layer, `[|positions| × d_model]`.
    pub fn layer_states(&self, li: usize) -> &[F] {
        let n = self.positions.len() * self.d_model;
        &self.data[li * n..(li + 1) * n]
    }

    pub fn layer_states_mut(&mut self, li: usize) -> &mut [F] {
        let n = self.positions.len() * self.d_model;
        &mut self.data[li * n..(li + 1) * n]
    }

    pub fn state(&self, li: usize, pi: usize) -> &[F] {
        let d = self.d_model;
        let base = (li * self.positions.len() + pi) * d;
        &self.data[base..base + d]
    }

    /// Patch that re-injects the `li`-th captured layer at the same site.
    pub fn to_patch(&self, li: usize) -> PatchSpec<F> {
        PatchSpec {
            layer: self.layers[li],
            positions: self.positions.clone(),
            location: self.location,
            states: self.layer_states(li).to_vec(),
        }
    }
}

/// Replacement states injected at one `(layer, location)` site.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSpec<F: Real = f32> {
    pub layer: usize,
    pub positions: Vec<usize>,
    pub location: PatchLocation,
    /// `[|positions| × d_model]`
    pub states: Vec<F>,
}

/// Per-position log-softmax rows; row `p` predicts token `p + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbTable {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl LogProbTable {
    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.vocab..(p + 1) * self.vocab]
    }

    pub fn get(&self, p: usize, token: TokenId) -> f64 {
        self.data[p * self.vocab + token as usize]
    }

    /// Greedy prediction at row `p`; lowest id wins ties.
    pub fn argmax(&self, p: usize) -> TokenId {
        let row = self.row(p);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best as TokenId
    }
}

pub(crate) struct LayerTrace<F> {
    pub h_in: Vec<F>,
    pub n1: Vec<F>,
    pub inv1: Vec<F>,
    pub q: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
    /// `[head][query][key]`, zero above the diagonal.
    pub probs: Vec<F>,
    pub ctx: Vec<F>,
    pub m: Vec<F>,
    pub n2: Vec<F>,
    pub inv2: Vec<F>,
    pub u: Vec<F>,
    pub g: Vec<F>,
    pub h_out: Vec<F>,
}

/// Activations kept for the backward pass.
pub struct ForwardTrace<F: Real> {
    pub(crate) tokens: Vec<TokenId>,
    pub(crate) layers: Vec<LayerTrace<F>>,
    pub(crate) nf: Vec<F>,
    pub(crate) inv_f: Vec<F>,
    /// Present when the pass ran through the unembedding.
    pub log_probs: Option<LogProbTable>,
}

impl<F: Real> ForwardTrace<F> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Block output `h_l` for every position, `[T × d_model]`.
    pub fn layer_output(&self, layer: usize) -> &[F] {
        &self.layers[layer].h_out
    }
}

struct RunOutput<F: Real> {
    log_probs: Option<LogProbTable>,
    capture: Option<CaptureResult<F>>,
    trace: Option<ForwardTrace<F>>,
}

impl<F: Real> Transformer<F> {
    /// Teacher-forced log-probabilities for every position.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<LogProbTable> {
        Ok(self.run(tokens, &[], None, false, None)?.log_probs.unwrap())
    }

    /// Hidden states at the requested sites. Stops after the deepest
    /// requested layer.
    pub fn forward_with_capture(
        &self,
        tokens: &[TokenId],
        request: &CaptureRequest,
    ) -> Result<CaptureResult<F>> {
        let deepest = request.layers.iter().copied().max().unwrap_or(0);
        Ok(self
            .run(tokens, &[], Some(request), false, Some(deepest))?
            .capture
            .unwrap())
    }

    /// Forward pass with hidden states overwritten at the given sites.
    pub fn forward_with_patch(
        &self,
        tokens: &[TokenId],
        patches: &[PatchSpec<F>],
    ) -> Result<LogProbTable> {
        Ok(self.run(tokens, patches, None, false, None)?.log_probs.unwrap())
    }

    /// Patched forward that also captures; the capture sees patched values.
    pub fn forward_hooked(
        &self,
        tokens: &[TokenId],
        patches: &[PatchSpec<F>],
        request: &CaptureRequest,
    ) -> Result<(LogProbTable, CaptureResult<F>)> {
        let out = self.run(tokens, patches, Some(request), false, None)?;
        Ok((out.log_probs.unwrap(), out.capture.unwrap()))
    }

    /// Forward pass keeping every activation for [`Transformer::backward`].
    /// With `stop_after = Some(l)` the pass ends at block `l` and no
    /// log-probabilities are produced.
    pub fn forward_trace(
        &self,
        tokens: &[TokenId],
        stop_after: Option<usize>,
    ) -> Result<ForwardTrace<F>> {
        Ok(self.run(tokens, &[], None, true, stop_after)?.trace.unwrap())
    }

    /// Final norm + unembedding applied to arbitrary residual states
    /// `[rows × d_model]` (the logit-lens readout).
    pub fn decode_states(&self, states: &[F]) -> Result<LogProbTable> {
        let d = self.config.d_model;
        if !states.len().is_multiple_of(d) {
            return Err(Error::input("state buffer is not a multiple of d_model"));
        }
        let rows = states.len() / d;
        let (nf, _) = rmsnorm(states, self.final_norm(), rows, d);
        self.unembed_rows(&nf, rows)
    }

    fn final_norm(&self) -> &[F] {
        let lo = self.layout.final_norm;
        &self.params[lo..lo + self.config.d_model]
    }

    fn unembed_rows(&self, nf: &[F], rows: usize) -> Result<LogProbTable> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let u = &self.params[self.layout.unembed..self.layout.unembed + d * v];
        let b = &self.params[self.layout.unembed_bias..self.layout.unembed_bias + v];
        let mut logits = matmul(nf, u, rows, d, v);
        for r in 0..rows {
            for (x, &bv) in logits[r * v..(r + 1) * v].iter_mut().zip(b) {
                *x += bv;
            }
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerics {
                step: 0,
                what: "non-finite logits".into(),
            });
        }
        let mut data = Vec::with_capacity(rows * v);
        for r in 0..rows {
            data.extend(log_softmax_row(&logits[r * v..(r + 1) * v]));
        }
        Ok(LogProbTable {
            rows,
            vocab: v,
            data,
        })
    }

    fn validate_patches(&self, t: usize, patches: &[PatchSpec<F>]) -> Result<()> {
        let d = self.config.d_model;
        let mut seen = Vec::new();
        for p in patches {
            if p.layer >= self.config.n_layers {
                return Err(Error::input(format!(
                    "patch layer {} out of range for {} layers",
                    p.layer, self.config.n_layers
                )));
            }
            if seen.contains(&(p.layer, p.location)) {
                return Err(Error::input(format!(
                    "duplicate patch at layer {} location {}",
                    p.layer, p.location
                )));
            }
            seen.push((p.layer, p.location));
            if p.positions.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::input("patch positions must be strictly increasing"));
            }
            if p.positions.last().is_some_and(|&last| last >= t) {
                return Err(Error::input("patch position beyond sequence length"));
            }
            if p.states.len() != p.positions.len() * d {
                return Err(Error::input(format!(
                    "patch states hold {} values, expected {}",
                    p.states.len(),
                    p.positions.len() * d
                )));
            }
            if p.states.iter().any(|x| !x.is_finite()) {
                return Err(Error::input("patch states contain non-finite values"));
            }
        }
        Ok(())
    }

    fn run(
        &self,
        tokens: &[TokenId],
        patches: &[PatchSpec<F>],
        capture: Option<&CaptureRequest>,
        keep_trace: bool,
        stop_after: Option<usize>,
    ) -> Result<RunOutput<F>> {
        self.check_tokens(tokens)?;
        let t = tokens.len();
        let cfg = &self.config;
        let (d, ff, nh, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.d_head());
        self.validate_patches(t, patches)?;
        if let Some(req) = capture {
            if let Some(&l) = req.layers.iter().find(|&&l| l >= cfg.n_layers) {
                return Err(Error::input(format!(
                    "capture layer {l} out of range for {} layers",
                    cfg.n_layers
                )));
            }
            if let Some(&p) = req.positions.iter().find(|&&p| p >= t) {
                return Err(Error::input(format!(
                    "capture position {p} beyond sequence length {t}"
                )));
            }
        }
        let last_layer = stop_after.unwrap_or(cfg.n_layers - 1).min(cfg.n_layers - 1);

        let mut cap_data = capture.map(|req| {
            vec![F::zero(); req.layers.len() * req.positions.len() * d]
        });
        let mut record = |layer: usize, loc: PatchLocation, buf: &[F]| {
            if let (Some(req), Some(data)) = (capture, cap_data.as_mut()) {
                if req.location != loc {
                    return;
                }
                let np = req.positions.len();
                for (li, _) in req.layers.iter().enumerate().filter(|(_, &l)| l == layer) {
                    for (pi, &pos) in req.positions.iter().enumerate() {
                        let dst = (li * np + pi) * d;
                        data[dst..dst + d].copy_from_slice(&buf[pos * d..(pos + 1) * d]);
                    }
                }
            }
        };
        let apply = |layer: usize, loc: PatchLocation, buf: &mut [F]| {
            for p in patches.iter().filter(|p| p.layer == layer && p.location == loc) {
                for (i, &pos) in p.positions.iter().enumerate() {
                    buf[pos * d..(pos + 1) * d].copy_from_slice(&p.states[i * d..(i + 1) * d]);
                }
            }
        };

        let lay = &self.layout;
        let prm = &self.params;
        let mut h = vec![F::zero(); t * d];
        for (p, &tok) in tokens.iter().enumerate() {
            let te = &prm[lay.tok_emb + tok as usize * d..lay.tok_emb + (tok as usize + 1) * d];
            let pe = &prm[lay.pos_emb + p * d..lay.pos_emb + (p + 1) * d];
            for j in 0..d {
                h[p * d + j] = te[j] + pe[j];
            }
        }

        let scale = F::one() / F::from(dh).unwrap().sqrt();
        let mut traces = Vec::new();
        for l in 0..=last_layer {
            let b = lay.blocks[l];
            let h_in = h;
            let (n1, inv1) = rmsnorm(&h_in, &prm[b.attn_norm..b.attn_norm + d], t, d);
            let q = matmul(&n1, &prm[b.wq..b.wq + d * d], t, d, d);
            let k = matmul(&n1, &prm[b.wk..b.wk + d * d], t, d, d);
            let v = matmul(&n1, &prm[b.wv..b.wv + d * d], t, d, d);
            let mut probs = vec![F::zero(); nh * t * t];
            let mut ctx = vec![F::zero(); t * d];
            for hd in 0..nh {
                let c0 = hd * dh;
                for i in 0..t {
                    let qi = &q[i * d + c0..i * d + c0 + dh];
                    let row = &mut probs[(hd * t + i) * t..(hd * t + i + 1) * t];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let s = dot(qi, &k[j * d + c0..j * d + c0 + dh]) * scale;
                        row[j] = s;
                        max = max.max(s.to_f64().unwrap());
                    }
                    let mut sum = 0.0f64;
                    for x in row.iter_mut().take(i + 1) {
                        let e = (x.to_f64().unwrap() - max).exp();
                        sum += e;
                        *x = F::from(e).unwrap();
                    }
                    let inv = F::from(1.0 / sum).unwrap();
                    for x in row.iter_mut().take(i + 1) {
                        *x *= inv;
                    }
                    let out = &mut ctx[i * d + c0..i * d + c0 + dh];
                    for j in 0..=i {
                        let pij = row[j];
                        let vj = &v[j * d + c0..j * d + c0 + dh];
                        for (o, &vv) in out.iter_mut().zip(vj) {
                            *o += pij * vv;
                        }
                    }
                }
            }
            let mut a = matmul(&ctx, &prm[b.wo..b.wo + d * d], t, d, d);
            apply(l, PatchLocation::AttnOut, &mut a);
            record(l, PatchLocation::AttnOut, &a);

            let mut m: Vec<F> = h_in.iter().zip(&a).map(|(&x, &y)| x + y).collect();
            apply(l, PatchLocation::PostAttnResidual, &mut m);
            record(l, PatchLocation::PostAttnResidual, &m);

            let (n2, inv2) = rmsnorm(&m, &prm[b.mlp_norm..b.mlp_norm + d], t, d);
            let u = matmul(&n2, &prm[b.w_in..b.w_in + d * ff], t, d, ff);
            let g: Vec<F> = u.iter().map(|&x| gelu(x)).collect();
            let f = matmul(&g, &prm[b.w_out..b.w_out + ff * d], t, ff, d);
            let mut h_out: Vec<F> = m.iter().zip(&f).map(|(&x, &y)| x + y).collect();
            apply(l, PatchLocation::LayerOutput, &mut h_out);
            record(l, PatchLocation::LayerOutput, &h_out);

            h = h_out.clone();
            if keep_trace {
                traces.push(LayerTrace {
                    h_in,
                    n1,
                    inv1,
                    q,
                    k,
                    v,
                    probs,
                    ctx,
                    m,
                    n2,
                    inv2,
                    u,
                    g,
                    h_out,
                });
            }
        }

        if h.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerics {
                step: 0,
                what: "non-finite hidden state".into(),
            });
        }

        let capture_out = capture.map(|req| CaptureResult {
            layers: req.layers.clone(),
            positions: req.positions.clone(),
            location: req.location,
            d_model: d,
            data: cap_data.take().unwrap(),
        });

        let ran_all = last_layer + 1 == cfg.n_layers;
        let (mut nf, mut inv_f, mut log_probs) = (Vec::new(), Vec::new(), None);
        if ran_all {
            let (n, inv) = ops::rmsnorm(&h, self.final_norm(), t, d);
            log_probs = Some(self.unembed_rows(&n, t)?);
            nf = n;
            inv_f = inv;
        }

        let trace = keep_trace.then(|| ForwardTrace {
            tokens: tokens.to_vec(),
            layers: traces,
            nf,
            inv_f,
            log_probs: log_probs.clone(),
        });
        Ok(RunOutput {
            log_probs,
            capture: capture_out,
            trace,
        })
    }
}
