use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{Batch, CanonicalSample, Format, Stage};
use crate::model::{EmbeddingModel, ModelConfig};
use crate::numerics::{grad_check, grad_check_coords, Graph, Tensor};

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn random_units(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    random_rows(rng, n, d).into_iter().map(unit).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-query InfoNCE written out over explicit candidate lists.
fn info_nce_oracle(q: &[Vec<f64>], p: &[Vec<f64>], negs: &[Vec<Vec<f64>>], tau: f64, in_batch: bool) -> f64 {
    let mut total = 0.0;
    for i in 0..q.len() {
        let mut sims = vec![dot(&q[i], &p[i]) / tau];
        if in_batch {
            sims.extend((0..q.len()).filter(|&j| j != i).map(|j| dot(&q[i], &p[j]) / tau));
        }
        sims.extend(negs[i].iter().map(|n| dot(&q[i], n) / tau));
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + sims.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        total += lse - sims[0];
    }
    total / q.len() as f64
}

#[test]
fn truncate_full_is_identity_and_345() {
    let v = unit(vec![1.0, 2.0, 3.0]);
    assert_eq!(truncate_and_renorm(&v, 3).unwrap(), v);
    let t = truncate_and_renorm(&[3.0f64, 4.0, 0.0, 0.0], 2).unwrap();
    assert!((t[0] - 0.6).abs() < 1e-12 && (t[1] - 0.8).abs() < 1e-12);
    assert!(truncate_and_renorm(&v, 0).is_err());
    assert!(truncate_and_renorm(&v, 4).is_err());
}

proptest! {
    #[test]
    fn truncation_is_unit_and_proportional(v in prop::collection::vec(-10.0f64..10.0, 2..40), frac in 0.0f64..1.0) {
        let d = 1 + ((v.len() - 1) as f64 * frac) as usize;
        prop_assume!(v[..d].iter().any(|x| x.abs() > 1e-3));
        let t = truncate_and_renorm(&v, d).unwrap();
        let n: f64 = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-6);
        let scale = v[..d].iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in t.iter().zip(&v[..d]) {
            prop_assert!((a * scale - b).abs() < 1e-9);
        }
    }
}

#[test]
fn equal_similarities_give_log_c() {
    let e = unit(vec![1.0, 2.0, -1.0, 0.5]);
    for c in [2usize, 8, 64] {
        // one query, positive plus c-1 explicit negatives, all identical
        let loss = info_nce(std::slice::from_ref(&e), std::slice::from_ref(&e), &[vec![e.clone(); c - 1]], 0.05, false).unwrap();
        assert!((loss - (c as f64).ln()).abs() < 1e-5, "C={c}: {loss}");
        // in-batch: B queries with B-1 borrowed positives each
        let loss = info_nce(&vec![e.clone(); c], &vec![e.clone(); c], &vec![vec![]; c], 0.05, true).unwrap();
        assert!((loss - (c as f64).ln()).abs() < 1e-5, "in-batch C={c}: {loss}");
    }
}

#[test]
fn saturated_single_negative() {
    let q = vec![1.0, 0.0];
    let loss = info_nce(std::slice::from_ref(&q), std::slice::from_ref(&q), &[vec![vec![-1.0, 0.0]]], 0.05, false).unwrap();
    assert!((loss - (1.0f64 + (-40.0f64).exp()).ln()).abs() < 1e-15);
    assert!(loss < 1e-15);
}

#[test]
fn two_by_two_matches_log_softmax() {
    let s: [[f64; 2]; 2] = [[0.9, 0.1], [0.2, 0.8]];
    let q0 = vec![0.9, 0.1, (1.0f64 - 0.81 - 0.01).sqrt(), 0.0];
    let q1 = vec![0.2, 0.8, 0.0, (1.0f64 - 0.04 - 0.64).sqrt()];
    let p0 = vec![1.0, 0.0, 0.0, 0.0];
    let p1 = vec![0.0, 1.0, 0.0, 0.0];
    let loss = info_nce(&[q0, q1], &[p0, p1], &[vec![], vec![]], 1.0, true).unwrap();
    let brute: f64 = (0..2)
        .map(|i| -s[i][i] + (s[i][0].exp() + s[i][1].exp()).ln())
        .sum::<f64>()
        / 2.0;
    assert!((loss - brute).abs() < 1e-12, "{loss} vs {brute}");
}

#[test]
fn info_nce_matches_candidate_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..20 {
        let b = rng.gen_range(2..6);
        let q = random_units(&mut rng, b, 12);
        let p = random_units(&mut rng, b, 12);
        let negs: Vec<Vec<Vec<f64>>> = (0..b).map(|_| {
            let k = rng.gen_range(0..3);
            random_units(&mut rng, k, 12)
        }).collect();
        let in_batch = trial % 2 == 0 || negs.iter().any(|n| n.is_empty());
        let got = info_nce(&q, &p, &negs, 0.1, in_batch).unwrap();
        let want = info_nce_oracle(&q, &p, &negs, 0.1, in_batch);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn info_nce_rejects_bad_inputs() {
    let e = vec![1.0, 0.0];
    assert!(info_nce(&[vec![2.0, 0.0]], std::slice::from_ref(&e), &[vec![e.clone()]], 0.05, false).is_err());
    assert!(info_nce(std::slice::from_ref(&e), std::slice::from_ref(&e), &[vec![]], 0.05, false).is_err());
    assert!(info_nce(std::slice::from_ref(&e), std::slice::from_ref(&e), &[vec![]], 0.05, true).is_err());
}

#[test]
fn loss_ignores_order_of_negatives() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = random_units(&mut rng, 3, 8);
    let p = random_units(&mut rng, 3, 8);
    let negs: Vec<Vec<Vec<f64>>> = (0..3).map(|_| random_units(&mut rng, 4, 8)).collect();
    let mut shuffled = negs.clone();
    for n in &mut shuffled {
        n.reverse();
        n.swap(0, 2);
    }
    let a = info_nce(&q, &p, &negs, 0.05, true).unwrap();
    let b = info_nce(&q, &p, &shuffled, 0.05, true).unwrap();
    assert!((a - b).abs() < 1e-12);
}

fn cfg(dims: Vec<usize>) -> LossConfig {
    LossConfig {
        temperature: 0.05,
        mrl_weights: vec![1.0; dims.len()],
        mrl_dims: dims,
        distill_weight: 1.0,
    }
}

#[test]
fn default_mrl_dims_are_powers_of_two_then_hidden() {
    assert_eq!(default_mrl_dims(64), vec![8, 16, 32, 64]);
    assert_eq!(default_mrl_dims(48), vec![8, 16, 32, 48]);
    assert_eq!(default_mrl_dims(8), vec![8]);
    assert!(LossConfig::for_hidden(32).validate(32).is_ok());
    assert!(cfg(vec![16, 8]).validate(16).is_err());
    assert!(cfg(vec![4, 16]).validate(16).is_err());
    assert!(cfg(vec![8, 16]).validate(32).is_err());
}

#[test]
fn matryoshka_with_full_dim_only_is_plain_info_nce() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raw_q = random_rows(&mut rng, 4, 16);
    let raw_p = random_rows(&mut rng, 4, 16);
    let raw_n: Vec<Vec<Vec<f64>>> = (0..4).map(|_| random_rows(&mut rng, 1, 16)).collect();
    let m = matryoshka_info_nce(&raw_q, &raw_p, &raw_n, &cfg(vec![16]), true).unwrap();
    let units = |rows: &[Vec<f64>]| rows.iter().map(|r| truncate_and_renorm(r, 16).unwrap()).collect::<Vec<_>>();
    let un: Vec<Vec<Vec<f64>>> = raw_n.iter().map(|l| units(l)).collect();
    let plain = info_nce(&units(&raw_q), &units(&raw_p), &un, 0.05, true).unwrap();
    assert!((m - plain).abs() < 1e-12);
}

#[test]
fn matryoshka_identical_embeddings_give_log_c() {
    let e: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
    let loss = matryoshka_info_nce(&vec![e.clone(); 3], &vec![e.clone(); 3], &vec![vec![e.clone()]; 3], &cfg(vec![8, 32]), true).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-5);
}

#[test]
fn matryoshka_is_weighted_mean_of_truncations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let raw_q = random_rows(&mut rng, 3, 32);
    let raw_p = random_rows(&mut rng, 3, 32);
    let raw_n: Vec<Vec<Vec<f64>>> = (0..3).map(|_| random_rows(&mut rng, 2, 32)).collect();
    let c = LossConfig {
        mrl_weights: vec![1.0, 2.0, 0.5],
        ..cfg(vec![8, 16, 32])
    };
    let got = matryoshka_info_nce(&raw_q, &raw_p, &raw_n, &c, false).unwrap();
    let mut want = 0.0;
    for (&d, &w) in c.mrl_dims.iter().zip(&c.mrl_weights) {
        let t = |rows: &[Vec<f64>]| rows.iter().map(|r| truncate_and_renorm(r, d).unwrap()).collect::<Vec<_>>();
        let tn: Vec<Vec<Vec<f64>>> = raw_n.iter().map(|l| t(l)).collect();
        want += w * info_nce_oracle(&t(&raw_q), &t(&raw_p), &tn, 0.05, false);
    }
    want /= 3.5;
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}

#[test]
fn distill_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let teacher = random_units(&mut rng, 5, 24);
    let student: Vec<Vec<f64>> = teacher.iter().map(|t| truncate_and_renorm(t, 16).unwrap()).collect();
    assert!(distill_loss(&student, &teacher).unwrap().abs() < 1e-15);

    let d = 10;
    let mut u = vec![0.0; d];
    let mut v = vec![0.0; d];
    u[0] = 1.0;
    v[3] = 1.0;
    let l = distill_loss(&[u], &[v]).unwrap();
    assert!((l - 2.0 / d as f64).abs() < 1e-15);

    let student = random_units(&mut rng, 5, 16);
    let got = distill_loss(&student, &teacher).unwrap();
    let mut want = 0.0;
    for (s, t) in student.iter().zip(&teacher) {
        let t = truncate_and_renorm(t, 16).unwrap();
        for k in 0..16 {
            want += (s[k] - t[k]).powi(2);
        }
    }
    want /= (5 * 16) as f64;
    assert!((got - want).abs() < 1e-6);
    assert!(got > 0.0);

    let small = random_units(&mut rng, 5, 8);
    assert!(distill_loss(&student, &small).is_err());
}

#[test]
fn adamw_pure_decay() {
    let mut p = Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let before = p.clone();
    let mut st = OptimizerState::new(AdamWConfig::default(), [&p]);
    adamw_step(&mut [&mut p], &[Tensor::zeros(vec![3])], &mut st, 0.1).unwrap();
    for (a, b) in p.data().iter().zip(before.data()) {
        assert!((a - b * (1.0 - 0.001)).abs() < 1e-15);
    }
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let mut p = Tensor::<f64>::scalar(0.0);
    let c = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut st = OptimizerState::new(c, [&p]);
    adamw_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut st, 1.0).unwrap();
    assert!((p.item() + 1.0 / (1.0 + 1e-8)).abs() < 1e-12);
    assert_eq!(st.step, 1);
}

#[test]
fn adamw_rejects_shape_mismatch_and_is_deterministic() {
    let mut p = Tensor::<f32>::zeros(vec![2, 2]);
    let mut st = OptimizerState::new(AdamWConfig::default(), [&p]);
    assert!(adamw_step(&mut [&mut p], &[Tensor::zeros(vec![4])], &mut st, 0.1).is_err());

    let run = || {
        let mut p = Tensor::<f32>::new(vec![4], vec![0.3, -0.1, 0.7, 0.0]).unwrap();
        let mut st = OptimizerState::new(AdamWConfig::default(), [&p]);
        for k in 0..10 {
            let g = Tensor::new(vec![4], (0..4).map(|i| ((i + k) as f32).sin()).collect()).unwrap();
            adamw_step(&mut [&mut p], &[g], &mut st, 0.01).unwrap();
        }
        (p, st)
    };
    assert_eq!(run(), run());
}

#[test]
fn info_nce_gradient_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let raw: Vec<f64> = (0..4 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let point = Tensor::new(vec![4, 8], raw).unwrap();
    let report = grad_check(
        |g, x| {
            let n = g.l2_normalize_rows(x)?;
            let q = g.select_rows(n, &[0, 1])?;
            let p = g.select_rows(n, &[2, 3])?;
            info_nce_graph(g, q, p, None, &[], 0.5, true)
        },
        &point,
        1e-3,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

fn toy_model() -> EmbeddingModel<f64> {
    EmbeddingModel::init(ModelConfig::toy(16, 32, 2, 2, 1, 8), 11).unwrap()
}

fn toy_tokens(model: &EmbeddingModel<f64>, texts: &[&str]) -> Vec<Vec<u32>> {
    texts.iter().map(|t| model.tokenizer().tokenize(t)).collect()
}

fn single_graph_grads(
    model: &EmbeddingModel<f64>,
    tokens: &[Vec<u32>],
    layout: &BatchLayout,
    cfg: &LossConfig,
    teacher: Option<&Tensor<f64>>,
) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let rows: Vec<_> = tokens.iter().map(|t| model.eos_state_graph(&mut g, &params, t).unwrap()).collect();
    let raw = g.concat_rows(&rows).unwrap();
    let nodes = batch_loss_graph(&mut g, raw, layout, cfg, true, teacher).unwrap();
    let grads = g.backward(nodes.total).unwrap();
    let out = params.ids().iter().map(|&id| grads.get(id).unwrap().clone()).collect();
    (g.value(nodes.total).item(), out)
}

#[test]
fn split_backward_matches_single_graph() {
    let model = toy_model();
    let tokens = toy_tokens(&model, &["cat", "dog", "a cat", "a dog", "fish"]);
    let layout = BatchLayout {
        queries: 2,
        neg_owner: vec![1],
    };
    let c = cfg(vec![8, 16]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let teacher = Tensor::from_rows(&random_units(&mut rng, 5, 16)).unwrap();
    for t in [None, Some(&teacher)] {
        let (parts, split) = batch_loss_and_grads(&model, &tokens, &layout, &c, true, t).unwrap();
        let (total, whole) = single_graph_grads(&model, &tokens, &layout, &c, t);
        assert!((parts.total - total).abs() < 1e-12);
        for (a, b) in split.iter().zip(&whole) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }
}

#[test]
fn full_loss_passes_grad_check_on_model_weights() {
    let model = toy_model();
    let tokens = toy_tokens(&model, &["ab", "cd", "abc", "cde", "xy"]);
    let layout = BatchLayout {
        queries: 2,
        neg_owner: vec![0],
    };
    let c = cfg(vec![8, 16]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let teacher = Tensor::from_rows(&random_units(&mut rng, 5, 16)).unwrap();
    // one matrix of each kind in the second layer
    for slot in [1 + 11 + 1, 1 + 11 + 4, 1 + 11 + 10] {
        let point = model.tensors()[slot].clone();
        let coords: Vec<usize> = (0..point.numel()).step_by(7).collect();
        let report = grad_check_coords(
            |g, x| {
                let mut params = model.bind_owned(g);
                params.replace(slot, x);
                let rows = tokens
                    .iter()
                    .map(|t| model.eos_state_graph(g, &params, t))
                    .collect::<crate::Result<Vec<_>>>()?;
                let raw = g.concat_rows(&rows)?;
                Ok(batch_loss_graph(g, raw, &layout, &c, true, Some(&teacher))?.total)
            },
            &point,
            &coords,
            1e-3,
        )
        .unwrap();
        assert!(report.passed, "slot {slot}: {report:?}");
    }
}

fn retrieval_sample(i: usize) -> CanonicalSample {
    let words = ["apple", "brick", "cloud", "delta", "ember", "frost", "grape", "harbor"];
    let a = words[i % 8];
    let b = words[(i / 8) % 8];
    CanonicalSample {
        format: Format::Retrieval,
        query: format!("{a} {b}"),
        positive: format!("{b} and {a} doc {i}"),
        negatives: vec![],
        source: "toy".into(),
        task_type: "retrieval".into(),
        symmetric: false,
        instruction: Some("Retrieve".into()),
    }
}

fn toy_batches(n: usize, bs: usize) -> Vec<Batch> {
    let samples: Vec<CanonicalSample> = (0..n).map(retrieval_sample).collect();
    samples
        .chunks(bs)
        .map(|c| Batch {
            samples: c.to_vec(),
            stage: Stage::One,
        })
        .collect()
}

fn plan(epochs: usize, lr: f64, hidden: usize) -> StagePlan {
    StagePlan {
        stage: Stage::One,
        learning_rate: lr,
        epochs,
        batch_size: 8,
        teacher: None,
        loss: LossConfig {
            temperature: 0.1,
            ..LossConfig::for_hidden(hidden)
        },
        seed: 7,
        adamw: AdamWConfig::default(),
        doc_instruction_prob: 0.3,
    }
}

fn small_student() -> EmbeddingModel<f32> {
    EmbeddingModel::init(ModelConfig::toy(16, 32, 1, 2, 1, 8), 3).unwrap()
}

#[test]
fn training_overfits_toy_retrieval_set() {
    let batches = toy_batches(64, 8);
    let out = train_stage(small_student(), &batches, &plan(25, 3e-3, 16), None, None).unwrap();
    assert_eq!(out.metrics.len(), 200);
    let first: f64 = out.metrics[..8].iter().map(|m| m.total_loss).sum::<f64>() / 8.0;
    let last: f64 = out.metrics[192..].iter().map(|m| m.total_loss).sum::<f64>() / 8.0;
    assert!(last < 0.1 * first, "initial {first}, final {last}");
    assert_eq!(out.metrics.last().unwrap().step, 200);
}

#[test]
fn training_is_deterministic() {
    let batches = toy_batches(16, 4);
    let a = train_stage(small_student(), &batches, &plan(2, 1e-3, 16), None, None).unwrap();
    let b = train_stage(small_student(), &batches, &plan(2, 1e-3, 16), None, None).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.model, b.model);
    assert!(a.metrics.iter().all(|m| m.distill_loss == 0.0 && m.total_loss == m.contrastive_loss));
}

#[test]
fn zero_distill_weight_matches_no_teacher() {
    let batches = toy_batches(12, 4);
    let teacher = EmbeddingModel::init(ModelConfig::toy(32, 32, 1, 2, 1, 8), 9).unwrap();
    let mut with = plan(1, 1e-3, 16);
    with.teacher = Some("teacher".into());
    with.loss.distill_weight = 0.0;
    let a = train_stage(small_student(), &batches, &with, Some(&teacher), None).unwrap();
    let b = train_stage(small_student(), &batches, &plan(1, 1e-3, 16), None, None).unwrap();
    assert_eq!(a.model, b.model);
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!(x.total_loss, y.total_loss);
        assert!(x.distill_loss > 0.0);
    }
}

#[test]
fn stage_validation() {
    let batches = toy_batches(8, 4);
    let small_teacher = EmbeddingModel::init(ModelConfig::toy(8, 16, 1, 2, 1, 4), 1).unwrap();
    let mut p = plan(1, 1e-3, 16);
    assert!(train_stage(small_student(), &batches, &p, Some(&small_teacher), None).is_err());
    p.teacher = Some("t".into());
    assert!(train_stage(small_student(), &batches, &p, None, None).is_err());
    assert!(train_stage(small_student(), &batches, &p, Some(&small_teacher), None).is_err());

    let mut clustering = toy_batches(4, 4);
    for s in &mut clustering[0].samples {
        s.format = Format::Clustering;
        s.negatives = vec!["other".into()];
    }
    assert!(train_stage(small_student(), &clustering, &plan(1, 1e-3, 16), None, None).is_err());
    let mut stage2 = plan(1, 1e-3, 16);
    stage2.stage = Stage::Two;
    assert!(train_stage(small_student(), &clustering, &stage2, None, None).is_ok());
}

#[test]
fn non_finite_weights_abort_with_step() {
    let mut model = small_student();
    model.layers[0].wq.data_mut()[0] = f32::NAN;
    let err = train_stage(model, &toy_batches(8, 4), &plan(1, 1e-3, 16), None, None).err().unwrap();
    assert!(matches!(err, crate::Error::NonFiniteLoss { step: 1 }), "{err}");
}

#[test]
fn resumed_training_continues_step_count() {
    let batches = toy_batches(8, 4);
    let a = train_stage(small_student(), &batches, &plan(1, 1e-3, 16), None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_optimizer(&a.optimizer, dir.path()).unwrap();
    let restored = load_optimizer(dir.path(), a.model.tensors()).unwrap();
    assert_eq!(restored, a.optimizer);
    let b = train_stage(a.model, &batches, &plan(1, 1e-3, 16), None, Some(restored)).unwrap();
    assert_eq!(b.metrics.iter().map(|m| m.step).collect::<Vec<_>>(), vec![3, 4]);
}
