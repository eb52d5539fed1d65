mod common;

use candle_core::Tensor;

use common::{seeded_tensor, values, CPU, FD_REL_TOL};
use dapled::backbone::{PromptPreset, PromptSet, StubBackbone};
use dapled::config::Config;
use dapled::losses::{charbonnier, total_loss, CharbonnierForm, LossReport, LossWeights};

fn scalar(t: Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

#[test]
fn charbonnier_closed_forms() {
    let a = seeded_tensor(1, &[1, 3, 4, 4], 0.0, 1.0);
    assert!((scalar(charbonnier(&a, &a, 1e-3, CharbonnierForm::PerElementMean).unwrap()) - 1e-3).abs() < 1e-15);
    let r = Tensor::new(&[3.0f64, 4.0], &CPU).unwrap().reshape((1, 1, 1, 2)).unwrap();
    let t = Tensor::zeros((1, 1, 1, 2), candle_core::DType::F64, &CPU).unwrap();
    assert_eq!(scalar(charbonnier(&r, &t, 0.0, CharbonnierForm::GlobalNorm).unwrap()), 5.0);
}

#[test]
fn charbonnier_matches_a_scalar_loop() {
    let eps = 1e-3;
    for seed in [2, 3, 4] {
        let a = seeded_tensor(seed, &[2, 3, 4, 4], 0.0, 1.0);
        let b = seeded_tensor(seed + 10, &[2, 3, 4, 4], 0.0, 1.0);
        let (av, bv) = (values(&a), values(&b));
        let per_element: f64 =
            av.iter().zip(&bv).map(|(x, y)| ((x - y).powi(2) + eps * eps).sqrt()).sum::<f64>() / av.len() as f64;
        let global: f64 = (0..2)
            .map(|n| {
                let s: f64 = (0..48).map(|i| (av[n * 48 + i] - bv[n * 48 + i]).powi(2)).sum();
                (s + eps * eps).sqrt()
            })
            .sum::<f64>()
            / 2.0;
        let got_pe = scalar(charbonnier(&a, &b, eps, CharbonnierForm::PerElementMean).unwrap());
        let got_gn = scalar(charbonnier(&a, &b, eps, CharbonnierForm::GlobalNorm).unwrap());
        assert!((got_pe - per_element).abs() < 1e-7);
        assert!((got_gn - global).abs() < 1e-7);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    for (name, err) in common::loss_gradient_errors() {
        assert!(err < FD_REL_TOL, "{name}: relative error {err}");
    }
}

#[test]
fn weighted_total() {
    let w = LossWeights::default();
    let r = LossReport::from_components(1.0, 2.0, 3.0, &w).unwrap();
    assert!((r.total - 1.23).abs() < 1e-12);
    let r = LossReport::from_components(1.0, 2.0, 3.0, &w.rec_only()).unwrap();
    assert_eq!(r.total, 1.0);

    let stub = StubBackbone::new(0, 16).unwrap();
    let prompts = PromptSet::from_preset(PromptPreset::Joint).embeddings(&stub).unwrap();
    let a = seeded_tensor(5, &[1, 3, 8, 8], 0.0, 1.0);
    let b = seeded_tensor(6, &[1, 3, 8, 8], 0.0, 1.0);
    let terms = total_loss(&a, &b, &prompts, &w.rec_only(), &stub).unwrap();
    assert_eq!(scalar(terms.total), terms.report.rec);
}

#[test]
fn default_weights_appear_in_the_config_dump() {
    let dump = Config::default().dump();
    assert!(dump.contains("lambda_identity = 0.1\n"));
    assert!(dump.contains("lambda_clip = 0.01\n"));
}
