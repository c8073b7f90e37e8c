use std::sync::OnceLock;

use udsaudit::corpus::{generate_synthetic_corpus, CorpusCounts, CorpusSplits, IdkVariant};
use udsaudit::outmetrics::generate_greedy;
use udsaudit::tinylm::{ModelConfig, ToyTransformer, TrainConfig};
use udsaudit::unlearners::{
    grad_diff, idk_nll, npo, npo_forget_loss_grad, rmu, rmu_update_ranges, train_references, Method,
    References, UnlearnConfig,
};
use udsaudit::Error;

struct Setup {
    splits: CorpusSplits,
    refs: References,
    idk: IdkVariant,
}

fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| {
        let model = ModelConfig {
            d_model: 32,
            n_layers: 3,
            n_heads: 2,
            d_ff: 64,
            ..ModelConfig::default()
        };
        let counts = CorpusCounts {
            n_retain: 24,
            n_forget: 12,
            n_holdout_nonmember: 6,
            n_holdout_real: 4,
            n_holdout_world: 4,
        };
        let splits = generate_synthetic_corpus(3, &counts, model.vocab_size).unwrap();
        let train = TrainConfig {
            epochs: 30,
            grad_accum: 1,
            ..TrainConfig::default()
        };
        let refs = train_references(&splits, &model, &train).unwrap();
        let idk = IdkVariant::for_forget(&splits.forget, 3);
        Setup { splits, refs, idk }
    })
}

fn max_abs_diff(a: &ToyTransformer, b: &ToyTransformer) -> f64 {
    a.params()
        .iter()
        .zip(b.params())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

#[test]
fn zero_epochs_leave_every_method_unchanged() {
    let s = setup();
    let full = &s.refs.full;
    let (f, r) = (&s.splits.forget, &s.splits.retain);
    let gd = UnlearnConfig::new(Method::GradDiff, 1e-3, 0, 0.0, 0);
    assert_eq!(grad_diff(full, f, r, &gd).unwrap().0.params(), full.params());
    let idk = UnlearnConfig::new(Method::IdkNll, 1e-3, 0, 1.0, 0);
    assert_eq!(idk_nll(full, f, &s.idk, r, &idk).unwrap().0.params(), full.params());
}

#[test]
fn degenerate_refusal_is_rejected() {
    let s = setup();
    let mut idk = s.idk.clone();
    let e = &s.splits.forget[0];
    idk.refusals.insert(e.id.clone(), e.entity_tokens.clone());
    let cfg = UnlearnConfig::new(Method::IdkNll, 1e-3, 1, 1.0, 0);
    let err = idk_nll(&s.refs.full, &s.splits.forget, &idk, &s.splits.retain, &cfg).unwrap_err();
    assert!(matches!(err, Error::Input(_)), "{err}");
}

#[test]
fn idk_outputs_begin_with_the_refusal() {
    let s = setup();
    let cfg = UnlearnConfig::new(Method::IdkNll, 3e-3, 40, 1.0, 0);
    let (m, _) = idk_nll(&s.refs.full, &s.splits.forget, &s.idk, &s.splits.retain, &cfg).unwrap();
    let hits = s
        .splits
        .forget
        .iter()
        .filter(|e| {
            let refusal = s.idk.refusal(&e.id).unwrap();
            let out = generate_greedy(&m, &e.prompt_tokens, refusal.len(), Some(&e.prefix_tokens)).unwrap();
            out.starts_with(refusal)
        })
        .count();
    let rate = hits as f64 / s.splits.forget.len() as f64;
    assert!(rate >= 0.8, "refusal rate {rate}");
}

#[test]
fn npo_loss_at_reference_is_two_log_two_over_beta() {
    let s = setup();
    for beta in [0.1, 0.5, 2.0] {
        let (loss, _) = npo_forget_loss_grad(&s.refs.full, &s.refs.full, &s.splits.forget[0], beta).unwrap();
        let expect = 2.0 / beta * std::f64::consts::LN_2;
        assert!((loss - expect).abs() <= 1e-9 * expect, "{loss} vs {expect}");
    }
}

#[test]
fn npo_gradient_matches_finite_differences() {
    let s = setup();
    let beta = 0.5;
    let reference = &s.refs.full;
    let ex = &s.splits.forget[1];
    let (_, g) = npo_forget_loss_grad(reference, reference, ex, beta).unwrap();
    // the largest coordinates, where f32 rounding in the loss is negligible
    let mut idx: Vec<usize> = (0..g.len()).collect();
    idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
    let h = 2e-3f32;
    let mut worst = 0.0f64;
    for &i in idx.iter().take(16) {
        let mut plus = reference.clone();
        plus.params_mut()[i] += h;
        let mut minus = reference.clone();
        minus.params_mut()[i] -= h;
        let lp = npo_forget_loss_grad(&plus, reference, ex, beta).unwrap().0;
        let lm = npo_forget_loss_grad(&minus, reference, ex, beta).unwrap().0;
        let step = (plus.params()[i] as f64 - minus.params()[i] as f64) / 2.0;
        let fd = (lp - lm) / (2.0 * step);
        let an = g[i] as f64;
        worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()));
    }
    assert!(worst <= 1e-3, "max relative error {worst}");
}

#[test]
fn npo_lowers_forget_likelihood() {
    let s = setup();
    let cfg = UnlearnConfig {
        beta: Some(0.5),
        ..UnlearnConfig::new(Method::Npo, 1e-3, 3, 1.0, 0)
    };
    let (m, trace) = npo(&s.refs.full, &s.splits.forget, &s.splits.retain, &cfg).unwrap();
    assert!(!trace.step_loss.is_empty());
    let ex = &s.splits.forget[0];
    let (after, _) = npo_forget_loss_grad(&m, &s.refs.full, ex, 0.5).unwrap();
    // the loss falls below its reference value once the log-ratio turns negative
    assert!(after < 4.0 * std::f64::consts::LN_2, "{after}");
}

fn rmu_cfg(lr: f64, epochs: usize, alpha: f64, layer: usize) -> UnlearnConfig {
    UnlearnConfig {
        rmu_layer: Some(layer),
        rmu_scale: Some(8.0),
        ..UnlearnConfig::new(Method::Rmu, lr, epochs, alpha, 0)
    }
}

#[test]
fn rmu_only_touches_its_blocks() {
    let s = setup();
    let full = &s.refs.full;
    let (m, _) = rmu(full, &s.splits.forget, &s.splits.retain, &rmu_cfg(5e-3, 2, 1.0, 1)).unwrap();
    let ranges = rmu_update_ranges(full, 1);
    let mut inside = 0usize;
    for (i, (a, b)) in full.params().iter().zip(m.params()).enumerate() {
        if ranges.iter().any(|r| r.contains(&i)) {
            inside += usize::from(a.to_bits() != b.to_bits());
        } else {
            assert_eq!(a.to_bits(), b.to_bits(), "param {i} outside the updated blocks moved");
        }
    }
    assert!(inside > 0);
}

#[test]
fn rmu_layer_out_of_range_is_an_input_error() {
    let s = setup();
    let err = rmu(&s.refs.full, &s.splits.forget, &s.splits.retain, &rmu_cfg(1e-3, 1, 1.0, 3)).unwrap_err();
    assert!(matches!(err, Error::Input(_)), "{err}");
}

#[test]
fn rmu_anchor_dominates_in_the_large_alpha_limit() {
    let s = setup();
    let full = &s.refs.full;
    let (m, _) = rmu(full, &s.splits.forget, &s.splits.retain, &rmu_cfg(1e-4, 2, 1e6, 2)).unwrap();
    let dev = max_abs_diff(full, &m);
    assert!(dev <= 1e-3, "max parameter deviation {dev}");
}
