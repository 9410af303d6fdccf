use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{TrainConfig, TrainingCache, UktlModel};
use crate::error::{Result, UktlError};
use crate::pivot::{soft_kmeans, SoftKMeansConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// 0-based.
    pub epoch: usize,
    /// Mean of the pre-update batch losses.
    pub loss: f64,
    /// Training accuracy after the epoch's updates.
    pub train_accuracy: f64,
    pub learning_rate: f64,
    pub mu: f64,
    pub refreshed: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

pub fn train(tensors: &[Tensor], labels: &[usize], config: &TrainConfig) -> Result<(UktlModel, TrainHistory)> {
    train_with_log(tensors, labels, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_log(
    tensors: &[Tensor],
    labels: &[usize],
    config: &TrainConfig,
    mut log: impl FnMut(&EpochStats),
) -> Result<(UktlModel, TrainHistory)> {
    config.validate()?;
    if tensors.is_empty() {
        return Err(UktlError::Empty("training set is empty".into()));
    }
    if tensors.len() != labels.len() {
        return Err(UktlError::DimensionMismatch(format!(
            "{} tensors but {} labels",
            tensors.len(),
            labels.len()
        )));
    }
    for t in tensors {
        tensors[0].check_same_dims(t)?;
    }
    if config.pivots > tensors.len() {
        return Err(UktlError::InvalidArgument(format!(
            "{} pivots requested from {} training samples",
            config.pivots,
            tensors.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // The clustering sees only the raw tensors, so re-running it at a refresh
    // would return the same pivots; it runs once.
    let kcfg = SoftKMeansConfig {
        clusters: config.pivots,
        temperature: config.temperature,
        max_iter: config.kmeans_max_iter,
        tol: 1e-9,
        seed: config.seed,
    };
    let pivots = soft_kmeans(tensors, &kcfg)?.pivots;
    let mut model = UktlModel::initialize(config.clone(), tensors, labels, pivots, &mut rng)?;
    let pivot_tuples = model.subspaces_of(&model.pivots)?;
    let mut cache = TrainingCache::new(&model, tensors, labels)?;

    let mut params = model.params();
    let decay = model.decay_mask();
    let mut velocity = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..tensors.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let (loss, grad) = cache.loss_and_grad(&model, batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(UktlError::Diverged { epoch, loss });
            }
            loss_sum += loss;
            batches += 1;
            for i in 0..params.len() {
                let mut g = grad[i];
                if decay[i] {
                    g += config.weight_decay * params[i];
                }
                velocity[i] = config.momentum * velocity[i] + g;
                params[i] -= lr * velocity[i];
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(UktlError::Diverged { epoch, loss });
            }
            model.set_params(&params)?;
        }

        let refreshed = (epoch + 1) % config.refresh_every == 0 && epoch + 1 < config.epochs;
        if refreshed {
            model.refresh(&pivot_tuples, cache.tuples())?;
            cache.refresh_pivots(&model)?;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / batches as f64,
            train_accuracy: cache.accuracy(&model)?,
            learning_rate: lr,
            mu: model.mu(),
            refreshed,
        };
        log(&stats);
        history.epochs.push(stats);
    }
    Ok((model, history))
}
