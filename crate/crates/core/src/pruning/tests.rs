use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{param_count, EmbeddingModel, ModelConfig, EOS};

fn toy(hidden: usize, mlp: usize, layers: usize) -> EmbeddingModel<f32> {
    EmbeddingModel::init(ModelConfig::toy(hidden, mlp, layers, 2, 1, 4), 5).unwrap()
}

fn calib(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<u32>> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..10);
            let mut t: Vec<u32> = (0..len).map(|_| rng.gen_range(0..256)).collect();
            t.push(EOS);
            t
        })
        .collect()
}

#[test]
fn top_k_of_example_norms() {
    assert_eq!(top_k_indices(&[3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0], 4), vec![2, 4, 5, 7]);
    assert_eq!(top_k_indices(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
    assert_eq!(top_k_indices(&[0.0, 2.0, 0.0], 3), vec![0, 1, 2]);
}

#[test]
fn constant_column_norm_is_abs_v_sqrt_t() {
    // zero-layer model: hidden channels read the embedding rows directly
    let mut m = EmbeddingModel::<f64>::init(ModelConfig::toy(4, 8, 0, 2, 1, 2), 1).unwrap();
    for r in 0..m.config.vocab_size {
        m.embed_tokens.data_mut()[r * 4] = -1.5;
        m.embed_tokens.data_mut()[r * 4 + 3] = 0.0;
    }
    let cal = vec![vec![1, 2, EOS], vec![7, EOS]];
    let n = collect_activation_norms(&m, &cal).unwrap();
    assert!((n.hidden_norms[0] - 1.5 * 5f64.sqrt()).abs() < 1e-12);
    assert_eq!(n.hidden_norms[3], 0.0);
    assert!(!top_k_indices(&n.hidden_norms, 3).contains(&3));
    assert!(collect_activation_norms(&m, &[]).is_err());
}

#[test]
fn norms_match_store_everything_oracle() {
    let m = toy(12, 16, 2).cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cal = calib(&mut rng, 6);
    let got = collect_activation_norms(&m, &cal).unwrap();

    let mut hidden_rows: Vec<Vec<f64>> = Vec::new();
    let mut mlp_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 2];
    for t in &cal {
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let trace = m.forward_graph(&mut g, &p, t).unwrap();
        for &o in &trace.block_outputs {
            let v = g.value(o);
            hidden_rows.extend((0..v.rows()).map(|r| v.row(r).to_vec()));
        }
        for (l, &a) in trace.mlp_acts.iter().enumerate() {
            let v = g.value(a);
            mlp_rows[l].extend((0..v.rows()).map(|r| v.row(r).to_vec()));
        }
    }
    for c in 0..12 {
        let want = hidden_rows.iter().map(|r| r[c] * r[c]).sum::<f64>().sqrt();
        assert!((got.hidden_norms[c] - want).abs() <= 1e-12 * want.max(1.0));
    }
    for l in 0..2 {
        for j in 0..16 {
            let want = mlp_rows[l].iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt();
            assert!((got.mlp_norms[l][j] - want).abs() <= 1e-12 * want.max(1.0));
        }
    }
    assert!(got.layer_deltas.iter().all(|d| d.is_finite() && *d >= 0.0));
}

#[test]
fn no_op_prune_is_identity() {
    let m = toy(8, 16, 2);
    let (p, report) = prune_model(&m, &PruneSpec::new(8, 16, 2, vec![])).unwrap();
    assert_eq!(p, m);
    assert!(report.norms.is_none());
    assert_eq!(report.kept_hidden, (0..8).collect::<Vec<_>>());
}

#[test]
fn prune_validation() {
    let m = toy(8, 16, 2);
    assert!(prune_model(&m, &PruneSpec::new(9, 16, 2, vec![])).is_err());
    assert!(prune_model(&m, &PruneSpec::new(8, 17, 2, vec![])).is_err());
    assert!(prune_model(&m, &PruneSpec::new(8, 16, 3, vec![])).is_err());
    assert!(prune_model(&m, &PruneSpec::new(4, 16, 2, vec![])).is_err());
}

#[test]
fn pruned_config_and_param_count() {
    let m = toy(16, 32, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (p, report) = prune_model(&m, &PruneSpec::new(8, 12, 2, calib(&mut rng, 4))).unwrap();
    assert_eq!((p.config.hidden_size, p.config.mlp_intermediate_size, p.config.num_layers), (8, 12, 2));
    assert_eq!(p.allocated_params() as u64, param_count(&p.config).total);
    assert_eq!(report.kept_layers, vec![0, 1]);
    assert_eq!(report.kept_mlp.len(), 2);
    let norms = report.norms.as_ref().unwrap();
    assert_eq!(report.kept_hidden, top_k_indices(&norms.hidden_norms, 8));
}

#[test]
fn table1_base_prunes_to_330m_shape() {
    let path = format!("{}/../../configs/table1/", env!("CARGO_MANIFEST_DIR"));
    let load = |n: &str| -> ModelConfig { serde_json::from_slice(&std::fs::read(format!("{path}{n}.json")).unwrap()).unwrap() };
    let (base, small) = (load("0.6B"), load("330M"));
    // allocation-free: slicing arithmetic on the config alone
    let cfg = ModelConfig {
        hidden_size: 896,
        mlp_intermediate_size: 2560,
        num_layers: 16,
        ..base.clone()
    };
    assert_eq!(cfg, small);
    assert_eq!(param_count(&cfg), param_count(&small));

    // same reduction ratios on a scaled-down copy run through prune_model
    let mut scaled = base.clone();
    scaled.hidden_size = 32;
    scaled.mlp_intermediate_size = 96;
    scaled.num_layers = 7;
    scaled.vocab_size = 258;
    scaled.head_dim = 4;
    scaled.num_heads = 4;
    scaled.num_kv_heads = 2;
    let m = EmbeddingModel::<f32>::init(scaled, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (p, _) = prune_model(&m, &PruneSpec::new(28, 80, 4, calib(&mut rng, 3))).unwrap();
    assert_eq!(p.config.num_heads, 4);
    assert_eq!(p.config.head_dim, 4);
    assert_eq!(p.allocated_params() as u64, param_count(&p.config).total);
}

#[test]
fn oracle_with_full_indices_is_original_forward() {
    let m = toy(8, 16, 2);
    let tokens = vec![3, 9, 27, EOS];
    let full = sliced_forward_oracle(&m, &(0..8).collect::<Vec<_>>(), &vec![(0..16).collect(); 2], 2, &tokens).unwrap();
    assert_eq!(full, m.forward_hidden(&tokens).unwrap());
}

#[test]
fn oracle_single_layer_equals_truncated_depth() {
    let m = toy(8, 16, 3);
    let tokens = vec![1, 2, 3, EOS];
    let one = sliced_forward_oracle(&m, &(0..8).collect::<Vec<_>>(), &[(0..16).collect()], 1, &tokens).unwrap();
    let mut shallow = m.clone();
    shallow.layers.truncate(1);
    shallow.config.num_layers = 1;
    assert_eq!(one, shallow.forward_hidden(&tokens).unwrap());
}

#[test]
fn norm_change_strategy_keeps_ordered_layers() {
    let m = toy(8, 16, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut spec = PruneSpec::new(8, 16, 2, calib(&mut rng, 3));
    spec.layer_strategy = LayerStrategy::NormChange;
    let (p, report) = prune_model(&m, &spec).unwrap();
    let norms = report.norms.unwrap();
    assert_eq!(report.kept_layers, top_k_indices(&norms.layer_deltas, 2));
    let tokens = vec![5, 6, EOS];
    let want = sliced_forward(&m, &(0..8).collect::<Vec<_>>(), &vec![(0..16).collect(); 2], &report.kept_layers, &tokens).unwrap();
    assert_eq!(p.forward_hidden(&tokens).unwrap(), want);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn pruned_forward_equals_oracle_bitwise(seed in 0u64..1000, th in 1usize..=12, tm in 1usize..=20, tl in 0usize..=3) {
        let m = EmbeddingModel::<f32>::init(ModelConfig::toy(12, 20, 3, 2, 1, 4), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = PruneSpec::new(th, tm, tl, calib(&mut rng, 3));
        let (p, report) = prune_model(&m, &spec).unwrap();
        let tokens = calib(&mut rng, 1).remove(0);
        let oracle = sliced_forward_oracle(&m, &report.kept_hidden, &report.kept_mlp, tl, &tokens).unwrap();
        prop_assert_eq!(p.forward_hidden(&tokens).unwrap(), oracle);
    }
}
