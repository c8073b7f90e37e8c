use super::{ToyTransformer, Transformer};
use crate::error::{Error, Result};

/// Snap `values` to the symmetric uniform grid with `2^bits - 1` levels over
/// `[-max|w|, +max|w|]`. An all-zero tensor is returned unchanged.
pub fn quantize_tensor(values: &mut [f32], bits: u32) -> Result<()> {
    check_bits(bits)?;
    let max = values.iter().fold(0.0f64, |m, v| m.max((*v as f64).abs()));
    if max == 0.0 {
        return Ok(());
    }
    let half = ((1u64 << (bits - 1)) - 1) as f64;
    let step = max / half;
    for v in values.iter_mut() {
        let k = (*v as f64 / step).round().clamp(-half, half);
        *v = (k * step) as f32;
    }
    Ok(())
}

/// Quantize every tensor of the model independently.
pub fn quantize_weights(model: &ToyTransformer, bits: u32) -> Result<ToyTransformer> {
    check_bits(bits)?;
    let mut params = model.params().to_vec();
    for spec in &model.layout().tensors {
        quantize_tensor(&mut params[spec.range()], bits)?;
    }
    Transformer::from_params(model.config().clone(), params)
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=16).contains(&bits) {
        return Err(Error::input(format!("bits {bits} outside [2, 16]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn zero_tensor_unchanged() {
        let mut v = vec![0.0f32; 5];
        quantize_tensor(&mut v, 4).unwrap();
        assert_eq!(v, vec![0.0; 5]);
    }

    #[test]
    fn two_bit_grid() {
        let mut v = vec![-1.0f32, -0.3, 0.2, 1.0];
        quantize_tensor(&mut v, 2).unwrap();
        assert_eq!(v, vec![-1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn bits_out_of_range() {
        let mut v = vec![1.0f32];
        assert!(quantize_tensor(&mut v, 1).is_err());
        assert!(quantize_tensor(&mut v, 17).is_err());
    }

    #[test]
    fn sixteen_bit_error_bound() {
        let m = ToyTransformer::new(ModelConfig::default()).unwrap();
        let q = quantize_weights(&m, 16).unwrap();
        for spec in &m.layout().tensors {
            let w = &m.params()[spec.range()];
            let max = w.iter().fold(0.0f64, |a, v| a.max((*v as f64).abs()));
            let bound = max * 2.0 / 65535.0;
            for (a, b) in w.iter().zip(&q.params()[spec.range()]) {
                assert!(((*a as f64) - (*b as f64)).abs() <= bound + 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn idempotent(v in prop::collection::vec(-10.0f32..10.0, 1..64), bits in 2u32..=16) {
            let mut once = v.clone();
            quantize_tensor(&mut once, bits).unwrap();
            let mut twice = once.clone();
            quantize_tensor(&mut twice, bits).unwrap();
            prop_assert_eq!(
                once.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                twice.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
