use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::data::{generate, Dataset, SyntheticSpec};
use crate::kernel::bases_of;
use crate::nystrom::fit_nystrom;
use crate::uncertainty::logit;

fn dataset() -> (Dataset, Dataset) {
    generate(&SyntheticSpec {
        num_classes: 3,
        per_class: 10,
        dims: vec![5, 6, 7],
        rank: 2,
        noise: 0.2,
        seed: 11,
    })
    .unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        p: 2,
        pivots: 6,
        epochs: 4,
        batch_size: 8,
        refresh_every: 2,
        ..TrainConfig::default()
    }
}

fn trained(cfg: &TrainConfig) -> (UktlModel, TrainHistory, Dataset, Dataset) {
    let (train_set, test_set) = dataset();
    let (model, hist) = train(&train_set.tensors, &train_set.labels, cfg).unwrap();
    (model, hist, train_set, test_set)
}

/// Gives every trainable parameter a random value so no gradient vanishes.
fn randomize(model: &mut UktlModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = model.params();
    for v in p.iter_mut() {
        *v += 0.5 * rng.sample::<f64, _>(StandardNormal);
    }
    model.set_params(&p).unwrap();
}

/// Literal pipeline: explicit projectors, explicit sigmoid, explicit loops.
fn scalar_logits(model: &UktlModel, t: &Tensor) -> Vec<f64> {
    let weighted = |tuple: &SubspaceTuple, sig: &[Vec<f64>]| -> Vec<Vec<Vec<f64>>> {
        tuple
            .iter()
            .zip(sig)
            .map(|(s, sg)| {
                let b = s.basis();
                (0..b.rows())
                    .map(|i| (0..b.cols()).map(|k| b.get(i, k) / sg[k].sqrt()).collect())
                    .collect()
            })
            .collect()
    };
    let tuple = crate::subspace::tensor_subspaces(t, &model.orders).unwrap();
    let (lo, hi) = (model.msn.sigma_min, model.msn.sigma_max);
    let sig: Vec<Vec<f64>> = tuple
        .iter()
        .enumerate()
        .map(|(m, s)| {
            let sv = s.singular_values();
            let norm = sv.iter().map(|v| v * v).sum::<f64>().sqrt();
            let feats: Vec<f64> = sv.iter().map(|v| v / norm).collect();
            let br = &model.msn.branches[m];
            (0..br.bias.len())
                .map(|k| {
                    let mut z = br.bias[k];
                    for (f, x) in feats.iter().enumerate() {
                        z += br.weights.get(k, f) * x;
                    }
                    lo + (hi - lo) / (1.0 + (-z).exp())
                })
                .collect()
        })
        .collect();
    let a = weighted(&tuple, &sig);
    let cfg = model.kernel_config();
    let mut kvals = Vec::new();
    for (z, zsig) in model.pivots.iter().zip(&model.pivot_sigmas) {
        let zt = crate::subspace::tensor_subspaces(z, &model.orders).unwrap();
        let b = weighted(&zt, zsig);
        let mut factors = Vec::new();
        for m in 0..a.len() {
            let n = a[m].len();
            let mut d = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let pa: f64 = (0..a[m][i].len()).map(|k| a[m][i][k] * a[m][j][k]).sum();
                    let pb: f64 = (0..b[m][i].len()).map(|k| b[m][i][k] * b[m][j][k]).sum();
                    d += (pa - pb) * (pa - pb);
                }
            }
            factors.push((-d / (2.0 * cfg.bandwidth * cfg.bandwidth)).exp());
        }
        let sum: f64 = factors.iter().sum();
        let prod: f64 = factors.iter().product();
        kvals.push(match cfg.combine {
            Combine::Sum => sum,
            Combine::Product => prod,
            Combine::SumProduct => cfg.mu * sum + (1.0 - cfg.mu) * prod,
        });
    }
    let c = kvals.len();
    let mean = model.map.feature_mean.as_ref().unwrap();
    let g: Vec<f64> = (0..c)
        .map(|col| (0..c).map(|j| kvals[j] * model.map.p_inv.get(j, col)).sum::<f64>() - mean[col])
        .collect();
    (0..model.num_classes())
        .map(|cl| model.classifier.bias[cl] + (0..c).map(|j| model.classifier.weights.get(cl, j) * g[j]).sum::<f64>())
        .collect()
}

#[test]
fn zero_classifier_gives_uniform_loss() {
    let cfg = TrainConfig {
        epochs: 0,
        beta: 0.0,
        ..small_config()
    };
    let (model, _, train_set, _) = trained(&cfg);
    let logits = model.forward(&train_set.tensors[0]).unwrap();
    assert_eq!(logits, vec![0.0; 3]);
    let loss = model.loss(&train_set.tensors[..5], &train_set.labels[..5]).unwrap();
    assert!((loss - 3f64.ln()).abs() < 1e-15);
}

#[test]
fn forward_matches_scalar_oracle() {
    let (mut model, _, _, test_set) = trained(&small_config());
    randomize(&mut model, 1);
    for t in &test_set.tensors[..3] {
        let got = model.forward(t).unwrap();
        let want = scalar_logits(&model, t);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-10, "{g} vs {w}");
        }
    }
    let a = model.forward(&test_set.tensors[0]).unwrap();
    let b = model.forward(&test_set.tensors[0].clone()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn cached_path_matches_forward() {
    let (mut model, _, train_set, _) = trained(&small_config());
    randomize(&mut model, 2);
    let cache = TrainingCache::new(&model, &train_set.tensors, &train_set.labels).unwrap();
    for i in 0..train_set.len() {
        let a = cache.logits(&model, i).unwrap();
        let b = model.forward(&train_set.tensors[i]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-10);
        }
    }
    let batch: Vec<usize> = (0..6).collect();
    let (loss, _) = cache.loss_and_grad(&model, &batch).unwrap();
    let direct = model.loss(&train_set.tensors[..6], &train_set.labels[..6]).unwrap();
    assert!((loss - direct).abs() <= 1e-10);
}

#[test]
fn loss_matches_scalar_oracle() {
    let (mut model, _, train_set, _) = trained(&small_config());
    randomize(&mut model, 3);
    let n = 4;
    let mut ce = 0.0;
    let mut sigmas = Vec::new();
    for i in 0..n {
        let logits = scalar_logits(&model, &train_set.tensors[i]);
        let target = model.class_index(train_set.labels[i]).unwrap();
        let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        ce += lse - logits[target];
        sigmas.push(model.sigmas(&train_set.tensors[i]).unwrap());
    }
    ce /= n as f64;
    let mut pen = 0.0;
    for i in 0..n {
        for m in 0..3 {
            for k in 0..2 {
                let total: f64 = (0..n).map(|j| sigmas[j][m][k] + 1.0).sum();
                pen += ((sigmas[i][m][k] + 1.0) / total).ln();
            }
        }
    }
    let want = ce + model.config.beta * pen;
    let got = model.loss(&train_set.tensors[..n], &train_set.labels[..n]).unwrap();
    assert!((got - want).abs() <= 1e-10, "{got} vs {want}");

    let single = model.loss(&train_set.tensors[..1], &train_set.labels[..1]).unwrap();
    let logits = model.forward(&train_set.tensors[0]).unwrap();
    let target = model.class_index(train_set.labels[0]).unwrap();
    assert!((single - cross_entropy(&logits, target)).abs() < 1e-15);
}

#[test]
fn loss_errors() {
    let (model, _, train_set, _) = trained(&TrainConfig {
        epochs: 0,
        ..small_config()
    });
    assert!(matches!(
        model.loss(&train_set.tensors[..1], &[7]),
        Err(UktlError::UnknownLabel(7))
    ));
    assert!(model.loss(&[], &[]).is_err());
    assert!(model.evaluate(&[], &[]).is_err());
    let wrong = Tensor::zeros(vec![5, 6]).unwrap();
    assert!(matches!(model.forward(&wrong), Err(UktlError::DimensionMismatch(_))));
}

#[test]
fn gradients_match_finite_differences() {
    for combine in [Combine::SumProduct, Combine::Sum, Combine::Product] {
        let cfg = TrainConfig {
            combine,
            learn_bandwidth: true,
            ..small_config()
        };
        let (mut model, _, train_set, _) = trained(&cfg);
        randomize(&mut model, 4);
        let report = grad_check(&model, &train_set.tensors[..4], &train_set.labels[..4], 1e-5).unwrap();
        assert!(report.max_rel_err <= 1e-4, "{combine}: {:?}", report.groups);
        let names: Vec<_> = report.groups.iter().map(|(g, _)| *g).collect();
        if combine == Combine::SumProduct {
            assert!(names.contains(&ParamGroup::Mu));
        } else {
            assert!(!names.contains(&ParamGroup::Mu));
        }
    }
}

#[test]
fn classifier_gradient_is_tight() {
    let cfg = TrainConfig {
        freeze_msn: true,
        learn_mu: false,
        ..small_config()
    };
    let (mut model, _, train_set, _) = trained(&cfg);
    randomize(&mut model, 5);
    let report = grad_check(&model, &train_set.tensors[..3], &train_set.labels[..3], 1e-5).unwrap();
    assert_eq!(report.groups.len(), 1);
    assert!(report.max_rel_err <= 1e-6, "{}", report.max_rel_err);
}

#[test]
fn mu_stays_in_unit_interval() {
    let cfg = TrainConfig {
        learning_rate: 5.0,
        ..small_config()
    };
    let (train_set, _) = dataset();
    let mut seen = Vec::new();
    let (model, _) = train_with_log(&train_set.tensors, &train_set.labels, &cfg, |s| seen.push(s.mu)).unwrap();
    assert!(seen.iter().all(|m| (0.0..=1.0).contains(m)));
    assert!((0.0..=1.0).contains(&model.mu()));
}

#[test]
fn convex_head_loss_is_nonincreasing() {
    let cfg = TrainConfig {
        beta: 0.0,
        freeze_msn: true,
        learn_mu: false,
        momentum: 0.0,
        learning_rate: 0.05,
        weight_decay: 0.0,
        batch_size: 1000,
        epochs: 25,
        refresh_every: 1000,
        ..small_config()
    };
    let (_, hist, _, _) = trained(&cfg);
    for w in hist.epochs.windows(2) {
        assert!(w[1].loss <= w[0].loss + 1e-6, "{} -> {}", w[0].loss, w[1].loss);
    }
}

#[test]
fn unit_uncertainty_reduces_to_plain_kernel() {
    let (mut model, _, train_set, test_set) = trained(&small_config());
    randomize(&mut model, 6);
    let (lo, hi) = (model.msn.sigma_min, model.msn.sigma_max);
    for br in &mut model.msn.branches {
        br.weights.as_mut_slice().fill(0.0);
        br.bias.fill(logit((1.0 - lo) / (hi - lo)));
    }
    let train_tuples = model.subspaces_of(&train_set.tensors).unwrap();
    let pivot_tuples = model.subspaces_of(&model.pivots).unwrap();
    model.refresh(&pivot_tuples, &train_tuples).unwrap();

    let plain = |tuples: &[SubspaceTuple]| tuples.iter().map(bases_of).collect::<Vec<_>>();
    let mut map = fit_nystrom(plain(&pivot_tuples), model.kernel_config(), model.config.clamp_eps).unwrap();
    map.embed_fit(&plain(&train_tuples)).unwrap();
    let g = map.embed_apply(&plain(&model.subspaces_of(&test_set.tensors).unwrap())).unwrap();
    let logits = model.logits(&test_set.tensors).unwrap();
    for i in 0..test_set.len() {
        let want = model.classifier.logits(g.row(i));
        for (a, b) in logits.row(i).iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let cfg = small_config();
    let (a, hist_a, _, test_set) = trained(&cfg);
    let (b, hist_b, _, _) = trained(&cfg);
    assert_eq!(hist_a, hist_b);
    let json = a.to_json().unwrap();
    assert_eq!(json, b.to_json().unwrap());

    let loaded = UktlModel::from_json(&json).unwrap();
    assert_eq!(loaded, a);
    assert_eq!(loaded.logits(&test_set.tensors).unwrap(), a.logits(&test_set.tensors).unwrap());
    assert_eq!(loaded.to_json().unwrap(), json);

    let bad = json.replace(CHECKPOINT_FORMAT, "other");
    assert!(UktlModel::from_json(&bad).is_err());
}

#[test]
fn predictions_are_pointwise() {
    let (model, _, _, test_set) = trained(&small_config());
    let preds = model.predict(&test_set.tensors).unwrap();
    let mut rev = test_set.tensors.clone();
    rev.reverse();
    let mut back = model.predict(&rev).unwrap();
    back.reverse();
    assert_eq!(preds, back);
    assert!(preds.iter().all(|p| p.confidence > 0.0 && p.confidence <= 1.0));
    assert!(model.predict(&[]).unwrap().is_empty());
}

#[test]
fn learns_the_small_problem() {
    let cfg = TrainConfig {
        epochs: 20,
        ..small_config()
    };
    let (model, hist, train_set, test_set) = trained(&cfg);
    assert!(hist.epochs.last().unwrap().train_accuracy >= 0.9);
    assert!(model.evaluate(&train_set.tensors, &train_set.labels).unwrap() >= 0.9);
    assert!(model.evaluate(&test_set.tensors, &test_set.labels).unwrap() >= 0.8);
}

#[test]
fn param_vector_round_trips() {
    let (mut model, _, _, _) = trained(&small_config());
    let p = model.params();
    let groups = model.param_groups();
    assert_eq!(groups.last().unwrap().1.end, p.len());
    assert_eq!(model.decay_mask().len(), p.len());
    model.set_params(&p).unwrap();
    assert_eq!(model.params(), p);
    assert!(model.set_params(&p[1..]).is_err());
}

#[test]
fn config_validation_and_schedule() {
    let cfg = TrainConfig::default();
    assert!(cfg.validate().is_ok());
    assert_eq!(cfg.learning_rate_at(0), 0.1);
    assert!((cfg.learning_rate_at(40) - 0.01).abs() < 1e-15);
    assert!((cfg.learning_rate_at(55) - 0.001).abs() < 1e-15);
    assert!(TrainConfig { mu: 1.0, ..cfg.clone() }.validate().is_err());
    assert!(TrainConfig { mu: 1.0, learn_mu: false, ..cfg.clone() }.validate().is_ok());
    assert!(TrainConfig { momentum: 1.0, ..cfg.clone() }.validate().is_err());
    assert!(TrainConfig { sigma_max: 0.05, ..cfg.clone() }.validate().is_err());
    let err = serde_json::from_str::<TrainConfig>(r#"{"learning_rate":0.1,"bogus":1}"#);
    assert!(err.is_err());
    let partial: TrainConfig = serde_json::from_str(r#"{"epochs":3}"#).unwrap();
    assert_eq!(partial.epochs, 3);
    assert_eq!(partial.batch_size, 32);
}

#[test]
fn training_rejects_bad_inputs() {
    let (train_set, _) = dataset();
    let one_class = vec![0; train_set.len()];
    assert!(train(&train_set.tensors, &one_class, &small_config()).is_err());
    let too_many = TrainConfig {
        pivots: 1000,
        ..small_config()
    };
    assert!(train(&train_set.tensors, &train_set.labels, &too_many).is_err());
    assert!(train(&train_set.tensors, &train_set.labels[1..], &small_config()).is_err());
}
