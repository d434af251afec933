use ncd_core::net::{batch_logits, decentralize, extract_features, ModelConfig, NcdModel, RowBank, FEATURE_DIM};
use ncd_core::pack;
use ncd_core::problem::{matrixize, replace_negatives, DonorPool, ProblemView, CONTEXT_ROWS, ROWS};
use ncd_core::synth::{generate_all, generate_one, GeneratorConfig, Raster, CONTEXT_PANELS};
use ncd_core::tensor::{Float, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn row_images(problem_seed: u64) -> (Vec<Raster>, Tensor) {
    let p = generate_one(problem_seed, 0, &GeneratorConfig::default()).unwrap();
    let refs: Vec<&Raster> = p.panels.iter().collect();
    let mut bank = RowBank::new(32);
    bank.push_matrix(&refs, &matrixize(0, 16).unwrap()).unwrap();
    (p.panels, bank.into_tensor().unwrap())
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let stride = t.numel() / t.shape()[0];
    let data = perm.iter().flat_map(|&i| t.data()[i * stride..(i + 1) * stride].iter().copied()).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn extraction_is_permutation_equivariant(seed in 0u64..1000, model_seed in 0u64..100, perm in Just((0..ROWS).collect::<Vec<_>>()).prop_shuffle()) {
        let model = NcdModel::init(model_seed, ModelConfig::default());
        let (_, rows) = row_images(seed);
        let f = extract_features(&model, &rows).unwrap();
        let fp = extract_features(&model, &permute_rows(&rows, &perm)).unwrap();
        prop_assert_eq!(fp, permute_rows(&f, &perm));
    }

    #[test]
    fn duplicate_rows_get_identical_features(seed in 0u64..1000) {
        let model = NcdModel::init(seed, ModelConfig::default());
        let (_, rows) = row_images(seed);
        let dup = permute_rows(&rows, &[3; ROWS]);
        let f = extract_features(&model, &dup).unwrap();
        let first = &f.data()[..FEATURE_DIM];
        prop_assert!(f.data().chunks(FEATURE_DIM).all(|r| r == first));
    }

    #[test]
    fn centering_cancels_context_rows_and_ignores_translation(
        raw in prop::collection::vec(-5.0f64..5.0, ROWS * 8),
        shift in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let t = Tensor::new(vec![ROWS, 8], raw.iter().map(|&v| v as Float).collect()).unwrap();
        let f = decentralize(&t).unwrap();
        for i in 0..8 {
            prop_assert!((f.centered.data()[i] + f.centered.data()[8 + i]).abs() < 1e-5);
            prop_assert!((f.raw.data()[i] - f.centroid[i] - f.centered.data()[i]).abs() < 1e-5);
        }
        let moved: Vec<Float> = raw.iter().enumerate().map(|(i, &v)| (v + shift[i % 8]) as Float).collect();
        let g = decentralize(&Tensor::new(vec![ROWS, 8], moved).unwrap()).unwrap();
        for (a, b) in f.centered.data().iter().zip(g.centered.data()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn changing_one_candidate_changes_only_its_row(seed in 0u64..1000, m in 0usize..8, donor in 0usize..8) {
        let model = NcdModel::init(seed, ModelConfig::default());
        let a = generate_one(seed, 0, &GeneratorConfig::default()).unwrap();
        let b = generate_one(seed, 1, &GeneratorConfig::default()).unwrap();
        let mut panels = a.panels.clone();
        prop_assume!(panels[CONTEXT_PANELS + m] != b.panels[CONTEXT_PANELS + donor]);
        panels[CONTEXT_PANELS + m] = b.panels[CONTEXT_PANELS + donor].clone();
        let before = batch_logits(&model, &[a.unlabeled()]).unwrap()[0];
        let after = batch_logits(&model, &[ProblemView::new(0, &panels)]).unwrap()[0];
        for j in 0..ROWS {
            if j == CONTEXT_ROWS + m {
                continue;
            }
            prop_assert_eq!(before[j].to_bits(), after[j].to_bits(), "row {}", j);
        }
    }

    #[test]
    fn context_logits_sum_to_twice_the_bias(seed in 0u64..1000) {
        let model = NcdModel::init(seed, ModelConfig::default());
        let mut model = model;
        model.params.tensors[7] = Tensor::new(vec![1], vec![0.37]).unwrap();
        let p = generate_one(seed, 5, &GeneratorConfig::default()).unwrap();
        let l = batch_logits(&model, &[p.unlabeled()]).unwrap()[0];
        prop_assert!((l[0] + l[1] - 0.74).abs() < 1e-5);
    }

    #[test]
    fn replacement_keeps_context_and_uses_foreign_donors(seed in 0u64..10_000, k in 0usize..=8) {
        let problems = generate_all(seed, 4, &GeneratorConfig::default()).unwrap();
        let views: Vec<ProblemView> = problems.iter().map(|p| p.unlabeled()).collect();
        let pool = DonorPool::new(&views);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (panels, rec) = replace_negatives(views[1], k, &pool, &mut rng).unwrap();
        prop_assert_eq!(rec.replaced_slots.len(), k);
        prop_assert!(rec.replaced_slots.windows(2).all(|w| w[0] < w[1]));
        for (got, want) in panels.iter().zip(&problems[1].panels[..CONTEXT_PANELS]) {
            prop_assert!(std::ptr::eq(*got, want));
        }
        for (slot, &(donor, donor_slot)) in rec.replaced_slots.iter().zip(&rec.donors) {
            prop_assert_ne!(donor, problems[1].problem_id);
            let donor_problem = problems.iter().find(|p| p.problem_id == donor).unwrap();
            prop_assert!(std::ptr::eq(panels[CONTEXT_PANELS + slot], &donor_problem.panels[CONTEXT_PANELS + donor_slot]));
        }
        for slot in (0..8).filter(|s| !rec.replaced_slots.contains(s)) {
            prop_assert!(std::ptr::eq(panels[CONTEXT_PANELS + slot], &problems[1].panels[CONTEXT_PANELS + slot]));
        }
    }

    #[test]
    fn pack_round_trips(seed in 0u64..1000, count in 1usize..6, size in prop::sample::select(vec![32u16, 64])) {
        let cfg = GeneratorConfig { panel_size: size, id_offset: seed * 100, ..GeneratorConfig::default() };
        let problems = generate_all(seed, count, &cfg).unwrap();
        let back = pack::from_bytes(&pack::to_bytes(&problems, size).unwrap()).unwrap();
        for (a, b) in problems.iter().zip(&back) {
            prop_assert_eq!(a.problem_id, b.problem_id);
            prop_assert_eq!(a.answer_index, b.answer_index);
            prop_assert_eq!(a.rules, b.rules);
            prop_assert_eq!(&a.panels, &b.panels);
        }
    }
}

#[test]
fn inference_is_repeatable_bit_for_bit() {
    let problems = generate_all(9, 5, &GeneratorConfig::default()).unwrap();
    let views: Vec<ProblemView> = problems.iter().map(|p| p.unlabeled()).collect();
    let model = NcdModel::init(3, ModelConfig::default());
    assert_eq!(batch_logits(&model, &views).unwrap(), batch_logits(&model, &views).unwrap());
}

#[test]
fn features_are_sixty_four_wide_at_every_panel_size() {
    let model = NcdModel::init(0, ModelConfig::default());
    for size in [32u16, 64, 96] {
        let p = generate_one(1, 0, &GeneratorConfig { panel_size: size, ..GeneratorConfig::default() }).unwrap();
        let refs: Vec<&Raster> = p.panels.iter().collect();
        let mut bank = RowBank::new(size);
        bank.push_matrix(&refs, &matrixize(0, 16).unwrap()).unwrap();
        let f = extract_features(&model, &bank.into_tensor().unwrap()).unwrap();
        assert_eq!(f.shape(), &[ROWS, FEATURE_DIM]);
    }
}

#[test]
fn fused_logits_are_twice_the_row_logits_for_a_transpose_symmetric_problem() {
    // Panel (r,c) depends on r+c only, so rows and columns coincide.
    let p = generate_one(4, 0, &GeneratorConfig::default()).unwrap();
    let mut panels = p.panels.clone();
    for r in 0..3 {
        for c in 0..3 {
            if r * 3 + c < 8 {
                panels[r * 3 + c] = p.panels[(r + c).min(7)].clone();
            }
        }
    }
    let row_model = NcdModel::init(2, ModelConfig { fuse_columns: false, ..ModelConfig::default() });
    let fused_model = NcdModel { config: ModelConfig { fuse_columns: true, ..row_model.config }, ..row_model.clone() };
    let view = ProblemView::new(0, &panels);
    let rows = batch_logits(&row_model, &[view]).unwrap()[0];
    let fused = batch_logits(&fused_model, &[view]).unwrap()[0];
    for (r, f) in rows.iter().zip(&fused) {
        assert!((2.0 * r - f).abs() < 1e-5, "{r} vs {f}");
    }
}
