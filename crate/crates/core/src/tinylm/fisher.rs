use rayon::prelude::*;

use super::train::{masked_nll_grad, TrainSequence};
use super::ToyTransformer;
use crate::error::{Error, Result};

/// Diagonal Fisher: per-parameter mean over examples of the squared gradient
/// of the example's mean masked NLL.
pub fn grad_fisher(model: &ToyTransformer, data: &[TrainSequence]) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::input("Fisher needs a non-empty dataset"));
    }
    let grads: Vec<Vec<f32>> = data
        .par_iter()
        .map(|s| masked_nll_grad(model, s).map(|(_, c, g)| scale(g, c)))
        .collect::<Result<_>>()?;
    let mut f = vec![0.0f64; model.params().len()];
    for (step, g) in grads.iter().enumerate() {
        for (acc, gi) in f.iter_mut().zip(g) {
            let gi = *gi as f64;
            if !gi.is_finite() {
                return Err(Error::Numerics {
                    step,
                    what: "non-finite gradient in Fisher".into(),
                });
            }
            *acc += gi * gi;
        }
    }
    let n = data.len() as f64;
    f.iter_mut().for_each(|x| *x /= n);
    Ok(f)
}

fn scale(mut g: Vec<f32>, count: usize) -> Vec<f32> {
    if count > 1 {
        let inv = 1.0 / count as f32;
        g.iter_mut().for_each(|x| *x *= inv);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::ModelConfig;

    fn model() -> ToyTransformer {
        ToyTransformer::new(ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            seed: 3,
        })
        .unwrap()
    }

    fn seq(tokens: Vec<u32>) -> TrainSequence {
        let n = tokens.len();
        TrainSequence {
            tokens,
            target_mask: (0..n).map(|i| i > 0).collect(),
        }
    }

    #[test]
    fn single_example_is_squared_gradient() {
        let m = model();
        let s = seq(vec![1, 4, 7, 2]);
        let f = grad_fisher(&m, std::slice::from_ref(&s)).unwrap();
        let (_, c, g) = masked_nll_grad(&m, &s).unwrap();
        for (fi, gi) in f.iter().zip(&g) {
            let gi = *gi as f64 / c as f64;
            assert!((fi - gi * gi).abs() <= 1e-12 + 1e-6 * fi.abs());
        }
    }

    #[test]
    fn unused_embeddings_have_zero_fisher() {
        let m = model();
        let f = grad_fisher(&m, &[seq(vec![1, 2, 3])]).unwrap();
        // Token 9 never appears, so its embedding row gets no gradient.
        let spec = m.layout().tensor("tok_emb").unwrap();
        let d = m.config().d_model;
        let row = spec.offset + 9 * d;
        assert!(f[row..row + d].iter().all(|&x| x == 0.0));
        assert!(f.iter().all(|&x| x >= 0.0 && x.is_finite()));
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(grad_fisher(&model(), &[]).is_err());
    }
}
