mod common;

use candle_core::{DType, Tensor};
use proptest::prelude::*;

use common::{seeded_image, seeded_tensor, seeded_vec, values, CPU};
use dapled::backbone::{encode_image_patches, PatchEmbeddingGrid, PromptPreset, PromptSet, StubBackbone};
use dapled::config::Config;
use dapled::fusion::{apply_weights, build_pyramid, compute_raw_heatmap, normalize_heatmap, HeatmapGrid};

#[test]
fn self_similar_patches_give_an_all_ones_grid() {
    let e = [0.3f32, -0.4, 0.5, 0.1];
    let grid = PatchEmbeddingGrid::new(16, 16, 4, e.repeat(256)).unwrap();
    let p = Tensor::new(&[e], &CPU).unwrap();
    let h = compute_raw_heatmap(&grid, &p).unwrap();
    assert_eq!((h.rows, h.cols, h.prompts), (16, 16, 1));
    assert!(h.values.iter().all(|&v| (v - 1.0).abs() < 1e-6));
}

#[test]
fn orthogonal_prompt_gives_an_all_zero_grid() {
    let grid = PatchEmbeddingGrid::new(16, 16, 2, [1.0f32, 0.0].repeat(256)).unwrap();
    let p = Tensor::new(&[[0.0f32, 3.0]], &CPU).unwrap();
    assert!(compute_raw_heatmap(&grid, &p).unwrap().values.iter().all(|&v| v == 0.0));
}

#[test]
fn stub_heatmap_matches_a_double_loop() {
    let stub = StubBackbone::new(0, 64).unwrap();
    let img = seeded_image(9, 64, 64);
    let patches = encode_image_patches(&stub, &img).unwrap();
    let prompts = PromptSet::from_preset(PromptPreset::Joint).embeddings(&stub).unwrap();
    let t: Vec<f32> = prompts.flatten_all().unwrap().to_vec1().unwrap();
    let got = Config::default().cross_fusion().unwrap().raw_heatmap(&img).unwrap();
    for i in 0..16 {
        for j in 0..16 {
            let a = patches.patch(i, j);
            let dot: f64 = a.iter().zip(&t).map(|(x, y)| *x as f64 * *y as f64).sum();
            let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = t.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((got.get(i, j, 0) as f64 - dot / (na * nb)).abs() < 1e-6);
        }
    }
}

#[test]
fn similarity_grid_oracle() {
    for seed in [1, 2, 3] {
        assert!(common::patch_similarity_error(seed) < common::ORACLE_TOL);
    }
}

#[test]
fn sigmoid_normalisation_closed_forms() {
    let raw = HeatmapGrid::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
    let n = normalize_heatmap(&raw, 10.0).unwrap();
    assert_eq!(n.normalized.values[0], 0.5);
    assert!((n.normalized.values[1] as f64 - 0.9999546).abs() < 1e-7);
}

proptest! {
    #[test]
    fn normalisation_is_monotone(a in -1.0f32..1.0, d in 0.001f32..1.0) {
        let raw = HeatmapGrid::new(1, 2, 1, vec![a, a + d]).unwrap();
        let n = normalize_heatmap(&raw, 10.0).unwrap();
        prop_assert!(n.normalized.values[0] < n.normalized.values[1]);
    }

    #[test]
    fn apply_weights_is_an_elementwise_product(seed in 0u64..1000) {
        prop_assert!(common::apply_weights_error(seed) == 0.0);
    }
}

#[test]
fn pyramid_sizes_halve_from_256() {
    let raw = HeatmapGrid::new(16, 16, 1, seeded_vec(5, 256, -1.0, 1.0).iter().map(|&v| v as f32).collect()).unwrap();
    let pyr = build_pyramid(&normalize_heatmap(&raw, 10.0).unwrap(), 256, 256).unwrap();
    let sizes: Vec<(usize, usize)> = pyr.levels().iter().map(|l| (l.height(), l.width())).collect();
    assert_eq!(sizes, vec![(256, 256), (128, 128), (64, 64), (32, 32)]);
    let m0 = pyr.level(0).map.mean();
    assert!((pyr.level(1).map.mean() - m0).abs() < common::POOL_MEAN_TOL);
}

#[test]
fn heatmap_contract_holds() {
    common::heatmap_contract().expect_pass();
}

#[test]
fn unit_and_zero_weights() {
    let f = seeded_tensor(6, &[1, 4, 3, 5], -1.0, 1.0);
    let ones = Tensor::ones((1, 1, 3, 5), DType::F64, &CPU).unwrap();
    let zeros = Tensor::zeros((1, 1, 3, 5), DType::F64, &CPU).unwrap();
    assert_eq!(values(&apply_weights(&f, &ones).unwrap()), values(&f));
    assert!(values(&apply_weights(&f, &zeros).unwrap()).iter().all(|&v| v == 0.0));
}
