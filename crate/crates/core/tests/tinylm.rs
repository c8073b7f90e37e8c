#![allow(clippy::needless_range_loop)]

mod common;

use common::{finite_difference_check, identity_patch_max_dev, reference_forward};
use udsaudit::tinylm::{
    train, CaptureRequest, ModelConfig, PatchLocation, PatchSpec, ToyTransformer, TrainConfig,
    TrainSequence, Transformer,
};

fn oracle_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        d_model: 32,
        n_layers: 4,
        n_heads: 4,
        d_ff: 128,
        max_seq_len: 16,
        seed: 42,
    }
}

const TOKENS: [u32; 8] = [3, 17, 42, 5, 63, 0, 29, 11];

#[test]
fn forward_matches_reference_oracle() {
    let model = ToyTransformer::new(oracle_config()).unwrap();
    let reference = reference_forward(&model.cast::<f64>(), &TOKENS);
    let lp = model.forward(&TOKENS).unwrap();
    let mut worst = 0.0f64;
    for (p, row) in reference.log_probs.iter().enumerate() {
        for (tok, &want) in row.iter().enumerate() {
            worst = worst.max((lp.get(p, tok as u32) - want).abs());
        }
    }
    assert!(worst <= 1e-5, "max deviation {worst}");
}

#[test]
fn captured_states_match_reference_at_every_site() {
    let model = ToyTransformer::new(oracle_config()).unwrap();
    let reference = reference_forward(&model.cast::<f64>(), &TOKENS);
    let layers: Vec<usize> = (0..4).collect();
    let positions: Vec<usize> = (0..TOKENS.len()).collect();
    for loc in PatchLocation::ALL {
        let want = match loc {
            PatchLocation::AttnOut => &reference.attn,
            PatchLocation::PostAttnResidual => &reference.mid,
            PatchLocation::LayerOutput => &reference.out,
        };
        let cap = model
            .forward_with_capture(&TOKENS, &CaptureRequest::new(layers.clone(), positions.clone(), loc))
            .unwrap();
        for l in 0..4 {
            for p in 0..TOKENS.len() {
                for (a, b) in cap.state(l, p).iter().zip(&want[l][p]) {
                    assert!((*a as f64 - b).abs() <= 1e-5, "{loc} layer {l} pos {p}");
                }
            }
        }
    }
}

#[test]
fn layer_algebra_holds() {
    let model = ToyTransformer::new(oracle_config()).unwrap();
    let layers: Vec<usize> = (0..4).collect();
    let positions: Vec<usize> = (0..TOKENS.len()).collect();
    let cap = |loc| {
        model
            .forward_with_capture(&TOKENS, &CaptureRequest::new(layers.clone(), positions.clone(), loc))
            .unwrap()
    };
    let (a, m, h) = (
        cap(PatchLocation::AttnOut),
        cap(PatchLocation::PostAttnResidual),
        cap(PatchLocation::LayerOutput),
    );
    let trace = model.forward_trace(&TOKENS, None).unwrap();
    let d = 32;
    for l in 1..4 {
        for p in 0..TOKENS.len() {
            for j in 0..d {
                let h_prev = h.state(l - 1, p)[j];
                assert!((m.state(l, p)[j] - (h_prev + a.state(l, p)[j])).abs() <= 1e-6);
            }
            assert_eq!(h.state(l, p), &trace.layer_output(l)[p * d..(p + 1) * d]);
        }
    }
}

#[test]
fn identity_patching_is_exact_everywhere() {
    let model = ToyTransformer::new(oracle_config()).unwrap();
    let dev = identity_patch_max_dev(&model, &TOKENS);
    assert!(dev <= 1e-6, "identity patch deviation {dev}");
}

#[test]
fn zero_weight_model_captures_only_embeddings() {
    let cfg = oracle_config();
    let mut params = vec![0.0f32; ToyTransformer::new(cfg.clone()).unwrap().params().len()];
    let base = ToyTransformer::from_params(cfg.clone(), params.clone()).unwrap();
    let tok = base.layout().tensor("tok_emb").unwrap().offset;
    for (i, p) in params[tok..tok + 64 * 32].iter_mut().enumerate() {
        *p = (i % 7) as f32 * 0.1;
    }
    let model = ToyTransformer::from_params(cfg, params).unwrap();
    let cap = model
        .forward_with_capture(&TOKENS, &CaptureRequest::new(vec![0, 3], vec![2], PatchLocation::LayerOutput))
        .unwrap();
    let emb = &model.tensor("tok_emb").unwrap()[42 * 32..43 * 32];
    assert_eq!(cap.state(0, 0), emb);
    assert_eq!(cap.state(1, 0), emb);
}

#[test]
fn last_layer_patch_transfers_donor_output() {
    let donor = ToyTransformer::new(oracle_config()).unwrap();
    let host = ToyTransformer::new(ModelConfig {
        seed: 7,
        ..oracle_config()
    })
    .unwrap();
    let positions: Vec<usize> = (0..TOKENS.len()).collect();
    let cap = donor
        .forward_with_capture(&TOKENS, &CaptureRequest::new(vec![3], positions.clone(), PatchLocation::LayerOutput))
        .unwrap();
    // Only the final norm and unembedding differ downstream of the patch.
    let mut donor_head = host.clone();
    for name in ["final_norm", "unembed", "unembed_bias"] {
        donor_head
            .tensor_mut(name)
            .unwrap()
            .copy_from_slice(donor.tensor(name).unwrap());
    }
    let patch = PatchSpec {
        layer: 3,
        positions,
        location: PatchLocation::LayerOutput,
        states: cap.data.clone(),
    };
    let patched = donor_head.forward_with_patch(&TOKENS, &[patch]).unwrap();
    let want = donor.forward(&TOKENS).unwrap();
    for (a, b) in patched.data.iter().zip(&want.data) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn gradients_match_finite_differences() {
    for check in finite_difference_check(42, 20) {
        assert!(check.checked >= 20, "{} checked {}", check.group, check.checked);
        assert!(
            check.max_rel_err < 1e-3,
            "{}: max relative error {}",
            check.group,
            check.max_rel_err
        );
    }
}

#[test]
fn repeated_sequence_is_memorised() {
    let model = ToyTransformer::new(ModelConfig::default()).unwrap();
    let tokens: Vec<u32> = vec![1, 40, 41, 12, 3, 130, 131, 132, 2];
    let seq = TrainSequence {
        target_mask: (0..tokens.len()).map(|i| i > 0).collect(),
        tokens,
    };
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 1,
        grad_accum: 1,
        ..TrainConfig::default()
    };
    let (trained, trace) = train(&model, std::slice::from_ref(&seq), &cfg).unwrap();
    assert_eq!(trace.steps, 200);
    let (loss, count, _) = udsaudit::tinylm::masked_nll_grad(&trained, &seq).unwrap();
    let per_token = loss / count as f64;
    assert!(per_token < 0.05, "final loss {per_token}");
}

#[test]
fn f64_and_f32_paths_agree() {
    let model = ToyTransformer::new(oracle_config()).unwrap();
    let wide: Transformer<f64> = model.cast();
    let a = model.forward(&TOKENS).unwrap();
    let b = wide.forward(&TOKENS).unwrap();
    for (x, y) in a.data.iter().zip(&b.data) {
        assert!((x - y).abs() <= 1e-5);
    }
}
