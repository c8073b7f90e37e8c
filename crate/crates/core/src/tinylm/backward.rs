use super::forward::ForwardTrace;
use super::ops::{dot, gelu_grad, matmul_at_acc, matmul_bt, rmsnorm_backward};
use super::{Real, Transformer};

impl<F: Real> Transformer<F> {
    /// Reverse-mode gradient of a scalar loss with respect to every parameter.
    ///
    /// `dlogits` is the loss gradient w.r.t. the pre-softmax logits
    /// `[T × vocab]` (requires a trace that ran through the unembedding);
    /// `dhidden` adds gradients w.r.t. block outputs `h_l`, each `[T × d_model]`.
    pub fn backward(
        &self,
        trace: &ForwardTrace<F>,
        dlogits: Option<&[F]>,
        dhidden: &[(usize, Vec<F>)],
    ) -> Vec<F> {
        let cfg = &self.config;
        let lay = &self.layout;
        let prm = &self.params;
        let (d, ff, v, nh, dh) = (
            cfg.d_model,
            cfg.d_ff,
            cfg.vocab_size,
            cfg.n_heads,
            cfg.d_head(),
        );
        let t = trace.tokens.len();
        let mut grad = vec![F::zero(); lay.total];
        let mut dh_cur = vec![F::zero(); t * d];

        if let Some(dl) = dlogits {
            assert!(
                !trace.nf.is_empty(),
                "logit gradient needs a trace through the unembedding"
            );
            let (u0, b0) = (lay.unembed, lay.unembed_bias);
            matmul_at_acc(&trace.nf, dl, &mut grad[u0..u0 + d * v], t, d, v);
            for r in 0..t {
                for (gb, &x) in grad[b0..b0 + v].iter_mut().zip(&dl[r * v..(r + 1) * v]) {
                    *gb += x;
                }
            }
            let dnf = matmul_bt(dl, &prm[u0..u0 + d * v], t, d, v);
            let h_last = &trace.layers.last().unwrap().h_out;
            let fnorm = lay.final_norm;
            dh_cur = rmsnorm_backward(
                &dnf,
                h_last,
                &prm[fnorm..fnorm + d],
                &trace.inv_f,
                &mut grad[fnorm..fnorm + d],
                t,
                d,
            );
        }

        let scale = F::one() / F::from(dh).unwrap().sqrt();
        for l in (0..trace.layers.len()).rev() {
            let lt = &trace.layers[l];
            let b = lay.blocks[l];
            for (_, g) in dhidden.iter().filter(|(hl, _)| *hl == l) {
                for (a, &x) in dh_cur.iter_mut().zip(g) {
                    *a += x;
                }
            }

            // MLP: h_out = m + gelu(n2 W_in) W_out
            matmul_at_acc(&lt.g, &dh_cur, &mut grad[b.w_out..b.w_out + ff * d], t, ff, d);
            let dg = matmul_bt(&dh_cur, &prm[b.w_out..b.w_out + ff * d], t, ff, d);
            let du: Vec<F> = dg
                .iter()
                .zip(&lt.u)
                .map(|(&g, &u)| g * gelu_grad(u))
                .collect();
            matmul_at_acc(&lt.n2, &du, &mut grad[b.w_in..b.w_in + d * ff], t, d, ff);
            let dn2 = matmul_bt(&du, &prm[b.w_in..b.w_in + d * ff], t, d, ff);
            let dm_norm = rmsnorm_backward(
                &dn2,
                &lt.m,
                &prm[b.mlp_norm..b.mlp_norm + d],
                &lt.inv2,
                &mut grad[b.mlp_norm..b.mlp_norm + d],
                t,
                d,
            );
            let dm: Vec<F> = dh_cur.iter().zip(&dm_norm).map(|(&a, &b)| a + b).collect();

            // Attention: m = h_in + (ctx W_o)
            matmul_at_acc(&lt.ctx, &dm, &mut grad[b.wo..b.wo + d * d], t, d, d);
            let dctx = matmul_bt(&dm, &prm[b.wo..b.wo + d * d], t, d, d);
            let mut dq = vec![F::zero(); t * d];
            let mut dk = vec![F::zero(); t * d];
            let mut dv = vec![F::zero(); t * d];
            let mut dp = vec![F::zero(); t];
            for hd in 0..nh {
                let c0 = hd * dh;
                for i in 0..t {
                    let probs = &lt.probs[(hd * t + i) * t..(hd * t + i + 1) * t];
                    let dci = &dctx[i * d + c0..i * d + c0 + dh];
                    let mut weighted = F::zero();
                    for j in 0..=i {
                        dp[j] = dot(dci, &lt.v[j * d + c0..j * d + c0 + dh]);
                        weighted += probs[j] * dp[j];
                        let pij = probs[j];
                        for (x, &g) in dv[j * d + c0..j * d + c0 + dh].iter_mut().zip(dci) {
                            *x += pij * g;
                        }
                    }
                    for j in 0..=i {
                        let ds = probs[j] * (dp[j] - weighted) * scale;
                        if ds == F::zero() {
                            continue;
                        }
                        for c in 0..dh {
                            dq[i * d + c0 + c] += ds * lt.k[j * d + c0 + c];
                            dk[j * d + c0 + c] += ds * lt.q[i * d + c0 + c];
                        }
                    }
                }
            }
            matmul_at_acc(&lt.n1, &dq, &mut grad[b.wq..b.wq + d * d], t, d, d);
            matmul_at_acc(&lt.n1, &dk, &mut grad[b.wk..b.wk + d * d], t, d, d);
            matmul_at_acc(&lt.n1, &dv, &mut grad[b.wv..b.wv + d * d], t, d, d);
            let mut dn1 = matmul_bt(&dq, &prm[b.wq..b.wq + d * d], t, d, d);
            for (src, w) in [(&dk, b.wk), (&dv, b.wv)] {
                let part = matmul_bt(src, &prm[w..w + d * d], t, d, d);
                for (a, x) in dn1.iter_mut().zip(part) {
                    *a += x;
                }
            }
            let dh_norm = rmsnorm_backward(
                &dn1,
                &lt.h_in,
                &prm[b.attn_norm..b.attn_norm + d],
                &lt.inv1,
                &mut grad[b.attn_norm..b.attn_norm + d],
                t,
                d,
            );
            dh_cur = dm.iter().zip(&dh_norm).map(|(&a, &b)| a + b).collect();
        }

        for (p, &tok) in trace.tokens.iter().enumerate() {
            let te = lay.tok_emb + tok as usize * d;
            let pe = lay.pos_emb + p * d;
            for j in 0..d {
                let g = dh_cur[p * d + j];
                grad[te + j] += g;
                grad[pe + j] += g;
            }
        }
        grad
    }
}
