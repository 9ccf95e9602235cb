//! End-to-end training behavior on small synthetic data: determinism,
//! variant equivalences, and gradient routing with trained weights.

use std::collections::BTreeSet;

use dcmi_core::data::{generate_synthetic, split, SyntheticSpec};
use dcmi_core::model::{BatchSample, ForwardOptions};
use dcmi_core::train::{run_seeds, train, TrainConfig, Variant, VariantModel};

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        domain_sizes: vec![120, 80],
        positive_rate: vec![0.5, 0.5],
        sentiment_tokens: 8,
        domain_tokens: 6,
        noise_tokens: 10,
        sentiment_per_sample: 3,
        domain_per_sample: 2,
        noise_per_sample: 3,
        similarity_groups: vec![vec![0, 1]],
        inverted_domains: BTreeSet::new(),
        seed,
    }
}

fn small_config(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        variant,
        lambda1: 1.0,
        lambda2: 1.0,
        learning_rate: 5e-3,
        epochs: 3,
        batch_size: 32,
        seed,
        drs: false,
        dim: 16,
        emb_dim: 16,
        dropout: 0.2,
        vocab_max: 200,
        ..TrainConfig::default()
    }
}

#[test]
fn training_produces_finite_losses_and_defined_metrics() {
    let ds = generate_synthetic(&small_spec(3)).unwrap();
    let (tr, va, te) = split(&ds, (0.8, 0.1, 0.1), 5).unwrap();
    let outcome = train(&small_config(Variant::Dcmi, 7), &tr, &va, &te).unwrap();
    let report = &outcome.report;
    assert_eq!(report.epoch_losses.len(), 3);
    for epoch in &report.epoch_losses {
        assert!(epoch.supervised.is_finite());
        assert!(epoch.domain.unwrap().is_finite());
        assert!(epoch.contrastive.unwrap().is_finite());
    }
    assert!(report.test.macro_auc.is_some());
    assert!(report.test.micro_auc.is_some());
    assert!(report.best_epoch < 3);
}

#[test]
fn training_is_bit_deterministic_for_a_fixed_seed() {
    let ds = generate_synthetic(&small_spec(11)).unwrap();
    let (tr, va, te) = split(&ds, (0.8, 0.1, 0.1), 2).unwrap();
    let cfg = small_config(Variant::Dcmi, 13);
    let a = train(&cfg, &tr, &va, &te).unwrap();
    let b = train(&cfg, &tr, &va, &te).unwrap();
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
    let bits = |t: &[f64]| t.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
    assert_eq!(bits(&a.batch_supervised_trace), bits(&b.batch_supervised_trace));
}

#[test]
fn pinned_mask_dcmi_with_zero_lambdas_reproduces_d_al_exactly() {
    let ds = generate_synthetic(&small_spec(21)).unwrap();
    let (tr, va, te) = split(&ds, (0.8, 0.1, 0.1), 4).unwrap();

    let mut dcmi_cfg = small_config(Variant::Dcmi, 17);
    dcmi_cfg.lambda1 = 0.0;
    dcmi_cfg.lambda2 = 0.0;
    dcmi_cfg.pin_masks = true;
    let dal_cfg = TrainConfig {
        variant: Variant::DAl,
        ..dcmi_cfg.clone()
    };

    let dcmi = train(&dcmi_cfg, &tr, &va, &te).unwrap();
    let dal = train(&dal_cfg, &tr, &va, &te).unwrap();
    assert_eq!(
        dcmi.batch_supervised_trace.len(),
        dal.batch_supervised_trace.len()
    );
    for (a, b) in dcmi
        .batch_supervised_trace
        .iter()
        .zip(&dal.batch_supervised_trace)
    {
        assert_eq!(a.to_bits(), b.to_bits(), "per-batch L_sup traces diverged");
    }
}

#[test]
fn baselines_have_no_domain_embedding_parameters() {
    let ds = generate_synthetic(&small_spec(31)).unwrap();
    let (tr, va, te) = split(&ds, (0.8, 0.1, 0.1), 6).unwrap();
    for variant in [Variant::DAl, Variant::Mtl] {
        let outcome = train(&small_config(variant, 23), &tr, &va, &te).unwrap();
        let store = outcome.model.store();
        for id in store.ids() {
            assert!(
                !store.name(id).starts_with("domain"),
                "{} has domain parameters",
                variant.name()
            );
        }
    }
}

#[test]
fn routing_holds_with_trained_weights() {
    let ds = generate_synthetic(&small_spec(41)).unwrap();
    let (tr, va, te) = split(&ds, (0.8, 0.1, 0.1), 8).unwrap();
    let outcome = train(&small_config(Variant::Dcmi, 29), &tr, &va, &te).unwrap();
    let VariantModel::Dcmi(model) = &outcome.model else {
        panic!("expected a dcmi model");
    };

    let tokens: Vec<Vec<u32>> = vec![vec![1, 2, 3], vec![4, 5]];
    let batch = vec![
        BatchSample { tokens: &tokens[0], label: 0, domain: 0 },
        BatchSample { tokens: &tokens[1], label: 1, domain: 1 },
    ];
    let mut rng = rand::SeedableRng::seed_from_u64(0);
    let comp = model
        .batch_graph(&batch, 0.3, 1.0, 1.0, ForwardOptions::default(), &mut rng)
        .unwrap();

    let zero_in = |grads: &dcmi_core::autodiff::Gradients, ids: &[dcmi_core::autodiff::ParamId]| {
        ids.iter().all(|&id| {
            grads
                .get(id)
                .is_none_or(|g| g.iter().all(|&x| x == 0.0))
        })
    };
    let g_dom = comp.graph.backward(comp.domain).unwrap();
    assert!(zero_in(&g_dom, &model.groups.body));
    assert!(zero_in(&g_dom, &model.groups.supervised_head));
    assert!(zero_in(&g_dom, &model.groups.domain_embeddings));
    let g_con = comp.graph.backward(comp.contrastive).unwrap();
    assert!(zero_in(&g_con, &model.groups.supervised_head));
    assert!(zero_in(&g_con, &model.groups.domain_head));
    let g_sup = comp.graph.backward(comp.supervised).unwrap();
    assert!(zero_in(&g_sup, &model.groups.domain_head));
}

#[test]
fn run_seeds_aggregates_with_sample_std_conventions() {
    let ds = generate_synthetic(&small_spec(51)).unwrap();
    let (tr, va, te) = split(&ds, (0.8, 0.1, 0.1), 10).unwrap();
    let cfg = small_config(Variant::DAl, 37);
    let (agg, outcomes) = run_seeds(&cfg, &tr, &va, &te, 1).unwrap();
    assert_eq!(outcomes.len(), 1);
    assert_eq!(agg.macro_std, Some(0.0));
    assert!(!agg.partial);

    let (agg3, outcomes3) = run_seeds(&cfg, &tr, &va, &te, 3).unwrap();
    assert_eq!(outcomes3.len(), 3);
    let seeds: BTreeSet<u64> = agg3.seeds.iter().map(|s| s.seed).collect();
    assert_eq!(seeds.len(), 3, "derived seeds must be distinct");
    assert!(agg3.macro_mean.is_some());
}
