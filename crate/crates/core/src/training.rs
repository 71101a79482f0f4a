//! Loss, decoupled-weight-decay optimizer, stratified splits, and the
//! per-fold training loop with tri-criterion early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TensorId};
use crate::data::PreparedPatient;
use crate::error::{Error, Result};
use crate::metrics::eval_metrics;
use crate::model::{forward, ForwardMode, ModelConfig, ModelParams};
use crate::seeding::mix_seed;

/// Threshold below which a metric change counts as "no change" for early
/// stopping.
pub const IMPROVEMENT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub folds: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            max_epochs: 200,
            patience: 15,
            folds: 5,
            holdout_fraction: 0.2,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout fraction must be in [0, 1), got {}",
                self.holdout_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1/beta2 must be in [0, 1)".into()));
        }
        if self.epsilon <= 0.0 || self.weight_decay < 0.0 || self.max_epochs < 1 {
            return Err(Error::Config(
                "epsilon must be positive, weight_decay non-negative, max_epochs >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// `-log softmax(logits)[label]`, differentiable through the logits.
pub fn cross_entropy(tape: &mut Tape, logits: TensorId, label: usize) -> Result<TensorId> {
    let shape = tape.shape(logits).to_vec();
    let classes = match shape.as_slice() {
        [c] => *c,
        _ => {
            return Err(Error::Shape(format!(
                "cross_entropy expects rank-1 logits, got {shape:?}"
            )))
        }
    };
    if label >= classes {
        return Err(Error::Config(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    let ls = tape.log_softmax(logits, 0)?;
    let mut onehot = vec![0.0; classes];
    onehot[label] = 1.0;
    let oh = tape.leaf(onehot, vec![classes])?;
    let picked = tape.mul(ls, oh)?;
    let s = tape.sum_all(picked);
    Ok(tape.scale(s, -1.0))
}

/// Softmax over raw logit values (plain data, no tape).
pub fn class_probabilities(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn cross_entropy_value(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(params: &ModelParams) -> Self {
        let m = params
            .tensors
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        let v = params
            .tensors
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        AdamWState { m, v }
    }
}

/// One decoupled-weight-decay update:
/// `theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta`
/// with bias-corrected moments at step `t >= 1`.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut AdamWState,
    t: u64,
    config: &TrainConfig,
) -> Result<()> {
    if t < 1 {
        return Err(Error::Config("optimizer step index starts at 1".into()));
    }
    if grads.len() != params.tensors.len() {
        return Err(Error::Shape(format!(
            "{} gradient tensors for {} parameter tensors",
            grads.len(),
            params.tensors.len()
        )));
    }
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    for (i, tensor) in params.tensors.iter_mut().enumerate() {
        if grads[i].len() != tensor.data.len() {
            return Err(Error::Shape(format!(
                "gradient size mismatch on {}",
                tensor.name
            )));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..tensor.data.len() {
            let g = grads[i][k];
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g;
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            let theta = tensor.data[k];
            tensor.data[k] = theta
                - config.lr * (m_hat / (v_hat.sqrt() + config.epsilon))
                - config.lr * config.weight_decay * theta;
        }
    }
    Ok(())
}

/// Holdout test indices plus per-fold train/validation assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    pub holdout: Vec<usize>,
    pub folds: Vec<Fold>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Label-stratified split: a holdout fraction is carved off per class, the
/// remainder is divided into `folds` validation chunks per class.
pub fn stratified_split(
    labels: &[usize],
    folds: usize,
    holdout_fraction: f64,
    seed: u64,
) -> Result<FoldPlan> {
    if folds < 2 {
        return Err(Error::Config("folds must be at least 2".into()));
    }
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::Config(format!(
            "holdout fraction must be in [0, 1), got {holdout_fraction}"
        )));
    }
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "stratified split needs at least 2 classes, found {}",
            classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut holdout = Vec::new();
    let mut fold_val: Vec<Vec<usize>> = vec![Vec::new(); folds];
    for class in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let n_hold = (holdout_fraction * members.len() as f64).round() as usize;
        let remaining = members.len() - n_hold;
        if remaining < folds {
            return Err(Error::Config(format!(
                "class {class} has {remaining} members after holdout, fewer than {folds} folds"
            )));
        }
        holdout.extend(members.drain(..n_hold));
        // Chunk the remainder; the first `remaining % folds` chunks get one extra.
        let base = remaining / folds;
        let extra = remaining % folds;
        let mut cursor = 0;
        for (f, chunk) in fold_val.iter_mut().enumerate() {
            let size = base + usize::from(f < extra);
            chunk.extend_from_slice(&members[cursor..cursor + size]);
            cursor += size;
        }
    }
    holdout.sort_unstable();
    let all_train: std::collections::BTreeSet<usize> =
        (0..labels.len()).filter(|i| !holdout.contains(i)).collect();
    let fold_plans = fold_val
        .into_iter()
        .map(|mut val| {
            val.sort_unstable();
            let val_set: std::collections::BTreeSet<usize> = val.iter().copied().collect();
            let train: Vec<usize> = all_train
                .iter()
                .copied()
                .filter(|i| !val_set.contains(i))
                .collect();
            Fold { train, val }
        })
        .collect();
    Ok(FoldPlan {
        holdout,
        folds: fold_plans,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug)]
pub struct TrainedFold {
    pub params: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Evaluation of fixed parameters on a patient subset.
#[derive(Debug, Clone)]
pub struct SplitEval {
    pub loss: f64,
    pub accuracy: f64,
    /// Class-1 probability per patient (binary models).
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
}

pub fn evaluate(
    params: &ModelParams,
    patients: &[PreparedPatient],
    indices: &[usize],
    config: &ModelConfig,
) -> Result<SplitEval> {
    if indices.is_empty() {
        return Err(Error::Config("evaluation over an empty split".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut scores = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let p = &patients[i];
        let fwd = forward(params, &p.graph, p.pe.as_ref(), config, ForwardMode::Eval)?;
        let logits = fwd.tape.data(fwd.logits);
        loss += cross_entropy_value(logits, p.label);
        let probs = class_probabilities(logits);
        let pred = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        correct += usize::from(pred == p.label);
        scores.push(probs.get(1).copied().unwrap_or(0.0));
        labels.push(p.label);
    }
    Ok(SplitEval {
        loss: loss / indices.len() as f64,
        accuracy: correct as f64 / indices.len() as f64,
        scores,
        labels,
    })
}

/// Trains one fold: seeded shuffles, one optimizer step per patient, epoch
/// validation, parameters kept at the best validation accuracy (earlier
/// epoch wins ties), and early stopping once none of loss, accuracy, or AUC
/// improves beyond [`IMPROVEMENT_EPS`] for `patience` epochs.
pub fn train_fold(
    patients: &[PreparedPatient],
    fold: &Fold,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    init_seed: u64,
) -> Result<TrainedFold> {
    train_config.validate()?;
    if fold.train.is_empty() || fold.val.is_empty() {
        return Err(Error::Config(
            "train and validation splits must be non-empty".into(),
        ));
    }
    let mut params = ModelParams::init(model_config, init_seed)?;
    let mut state = AdamWState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(init_seed, 1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(init_seed, 2));

    let mut history = Vec::new();
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_loss = f64::INFINITY;
    let mut best_auc = f64::NEG_INFINITY;
    let mut stale_epochs = 0usize;
    let mut step_t = 0u64;

    for epoch in 1..=train_config.max_epochs {
        let mut order = fold.train.clone();
        order.shuffle(&mut shuffle_rng);
        let mut train_loss = 0.0;
        for &i in &order {
            let p = &patients[i];
            // Mid-forward non-finite values are divergence, reported with
            // the epoch; other errors keep their kind.
            let diverged = |e: Error| match e {
                Error::Domain(reason) => Error::Training { epoch, reason },
                other => other,
            };
            let mut fwd = forward(
                &params,
                &p.graph,
                p.pe.as_ref(),
                model_config,
                ForwardMode::Train {
                    rng: &mut dropout_rng,
                },
            )
            .map_err(diverged)?;
            let loss = cross_entropy(&mut fwd.tape, fwd.logits, p.label).map_err(diverged)?;
            let loss_value = fwd.tape.scalar_value(loss);
            if !loss_value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("non-finite loss {loss_value} on patient {}", p.id),
                });
            }
            train_loss += loss_value;
            let grads = fwd.tape.backward(loss)?;
            let grad_vecs: Vec<Vec<f64>> = fwd
                .bound
                .ids
                .iter()
                .map(|id| {
                    grads
                        .get(*id)
                        .expect("parameter leaf requires grad")
                        .to_vec()
                })
                .collect();
            step_t += 1;
            adamw_step(&mut params, &grad_vecs, &mut state, step_t, train_config)?;
        }
        train_loss /= fold.train.len() as f64;

        let val = evaluate(&params, patients, &fold.val, model_config)?;
        if !val.loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: format!("non-finite validation loss {}", val.loss),
            });
        }
        let val_auc = if model_config.num_classes == 2 {
            eval_metrics(&val.scores, &val.labels)?.auc
        } else {
            None
        };
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
            val_auc,
        });

        if val.accuracy > best_acc {
            best_params = params.clone();
            best_epoch = epoch;
        }

        let mut improved = false;
        if val.loss < best_loss - IMPROVEMENT_EPS {
            improved = true;
        }
        if val.accuracy > best_acc + IMPROVEMENT_EPS {
            improved = true;
        }
        if let Some(auc) = val_auc {
            if auc > best_auc + IMPROVEMENT_EPS {
                improved = true;
            }
            best_auc = best_auc.max(auc);
        }
        best_loss = best_loss.min(val.loss);
        best_acc = best_acc.max(val.accuracy);

        if improved {
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= train_config.patience {
                break;
            }
        }
    }

    Ok(TrainedFold {
        params: best_params,
        best_epoch,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_patient_graph, PatchRecord};
    use rand::Rng;

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![0.0, 0.0], vec![2]).unwrap();
        let loss = cross_entropy(&mut tape, logits, 0).unwrap();
        assert!((tape.scalar_value(loss) - 2.0f64.ln()).abs() < 1e-12);

        let confident = tape.leaf(vec![100.0, 0.0], vec![2]).unwrap();
        let loss = cross_entropy(&mut tape, confident, 0).unwrap();
        assert!(tape.scalar_value(loss) < 1e-10);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = vec![0.4, -1.2, 0.9];
        let mut tape = Tape::new();
        let l = tape.leaf_grad(logits.clone(), vec![3]).unwrap();
        let loss = cross_entropy(&mut tape, l, 2).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(l).unwrap();
        let probs = class_probabilities(&logits);
        for k in 0..3 {
            let want = probs[k] - if k == 2 { 1.0 } else { 0.0 };
            assert!((g[k] - want).abs() < 1e-12, "{} vs {want}", g[k]);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![0.0, 0.0], vec![2]).unwrap();
        assert!(cross_entropy(&mut tape, logits, 2).is_err());
    }

    fn scalar_params(theta: f64) -> ModelParams {
        ModelParams {
            tensors: vec![crate::model::NamedTensor {
                name: "w".into(),
                shape: vec![1],
                data: vec![theta],
            }],
        }
    }

    fn trace_config() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adamw_single_step_worked_example() {
        let mut params = scalar_params(1.0);
        let mut state = AdamWState::new(&params);
        adamw_step(&mut params, &[vec![1.0]], &mut state, 1, &trace_config()).unwrap();
        assert!((params.tensors[0].data[0] - 0.998990000001).abs() < 1e-12);
    }

    #[test]
    fn adamw_matches_ten_step_scalar_trace() {
        // Independent scalar recurrence, gradients alternating +1/-1.
        let cfg = trace_config();
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=10 {
            let g = if t % 2 == 1 { 1.0 } else { -1.0 };
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t));
            let v_hat = v / (1.0 - cfg.beta2.powi(t));
            theta = theta
                - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.epsilon))
                - cfg.lr * cfg.weight_decay * theta;
            expected.push(theta);
        }
        assert!((expected[0] - 0.998990000001).abs() < 1e-15);
        assert!((expected[9] - 0.9983547317953149).abs() < 1e-15);

        let mut params = scalar_params(1.0);
        let mut state = AdamWState::new(&params);
        for t in 1..=10u64 {
            let g = if t % 2 == 1 { 1.0 } else { -1.0 };
            adamw_step(&mut params, &[vec![g]], &mut state, t, &cfg).unwrap();
            assert!(
                (params.tensors[0].data[0] - expected[(t - 1) as usize]).abs() < 1e-12,
                "step {t}"
            );
        }
    }

    #[test]
    fn adamw_without_decay_is_plain_adam() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..trace_config()
        };
        let mut params = scalar_params(1.0);
        let mut state = AdamWState::new(&params);
        for t in 1..=10u64 {
            let g = if t % 2 == 1 { 1.0 } else { -1.0 };
            adamw_step(&mut params, &[vec![g]], &mut state, t, &cfg).unwrap();
        }
        assert!((params.tensors[0].data[0] - 0.9984546084336097).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_gradient_behaviour() {
        // No signal, no decay: parameter untouched.
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..trace_config()
        };
        let mut params = scalar_params(0.7);
        let mut state = AdamWState::new(&params);
        for t in 1..=5u64 {
            adamw_step(&mut params, &[vec![0.0]], &mut state, t, &cfg).unwrap();
        }
        assert_eq!(params.tensors[0].data[0], 0.7);

        // No signal with decay: pure multiplicative shrinkage per step.
        let cfg = trace_config();
        let mut params = scalar_params(0.7);
        let mut state = AdamWState::new(&params);
        adamw_step(&mut params, &[vec![0.0]], &mut state, 1, &cfg).unwrap();
        assert!(
            (params.tensors[0].data[0] - 0.7 * (1.0 - cfg.lr * cfg.weight_decay)).abs() < 1e-15
        );
    }

    #[test]
    fn adamw_rejects_step_zero() {
        let mut params = scalar_params(1.0);
        let mut state = AdamWState::new(&params);
        assert!(adamw_step(&mut params, &[vec![1.0]], &mut state, 0, &trace_config()).is_err());
    }

    #[test]
    fn stratified_split_balanced_example() {
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let plan = stratified_split(&labels, 5, 0.2, 7).unwrap();
        assert_eq!(plan.holdout.len(), 4);
        let hold_pos = plan.holdout.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!(hold_pos, 2);
        for fold in &plan.folds {
            // 8 per class over 5 folds: chunks of 2,2,2,1,1 per class.
            let per_class: Vec<usize> = (0..2)
                .map(|c| fold.val.iter().filter(|&&i| labels[i] == c).count())
                .collect();
            assert!(
                per_class.iter().all(|n| *n == 1 || *n == 2),
                "{per_class:?}"
            );
            assert_eq!(fold.train.len() + fold.val.len(), 16);
        }
        // Each non-holdout index appears in exactly one validation fold.
        let mut seen = std::collections::BTreeSet::new();
        for fold in &plan.folds {
            for &i in &fold.val {
                assert!(seen.insert(i));
                assert!(!plan.holdout.contains(&i));
            }
        }
        assert_eq!(seen.len(), 16);
    }

    #[test]
    fn stratified_split_rejects_single_class() {
        let labels = vec![1usize; 10];
        assert!(matches!(
            stratified_split(&labels, 5, 0.2, 7),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stratified_split_rejects_tiny_class() {
        let mut labels = vec![0usize; 20];
        labels.extend_from_slice(&[1, 1, 1]);
        assert!(matches!(
            stratified_split(&labels, 5, 0.2, 7),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stratified_split_seed_changes_assignment_not_sizes() {
        let labels: Vec<usize> = (0..30).map(|i| usize::from(i % 3 == 0)).collect();
        let a = stratified_split(&labels, 5, 0.2, 1).unwrap();
        let b = stratified_split(&labels, 5, 0.2, 2).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.holdout.len(), b.holdout.len());
        for (fa, fb) in a.folds.iter().zip(&b.folds) {
            assert_eq!(fa.val.len(), fb.val.len());
        }
        assert_eq!(a, stratified_split(&labels, 5, 0.2, 1).unwrap());
    }

    #[test]
    fn stratified_proportions_within_one_sample() {
        let labels: Vec<usize> = (0..37).map(|i| usize::from(i % 5 < 2)).collect();
        let plan = stratified_split(&labels, 4, 0.2, 3).unwrap();
        let global_p = labels.iter().filter(|l| **l == 1).count() as f64 / labels.len() as f64;
        let check = |idx: &[usize]| {
            let pos = idx.iter().filter(|&&i| labels[i] == 1).count() as f64;
            assert!((pos - idx.len() as f64 * global_p).abs() <= 1.0 + 1e-9);
        };
        check(&plan.holdout);
        for fold in &plan.folds {
            check(&fold.val);
        }
    }

    pub(crate) fn toy_patients(n_per_class: usize, shift: f64, seed: u64) -> Vec<PreparedPatient> {
        let mut out = Vec::new();
        for label in 0..2usize {
            for i in 0..n_per_class {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(seed, (label * n_per_class + i) as u64));
                let recs: Vec<PatchRecord> = (0..4)
                    .map(|k| PatchRecord {
                        patient_id: format!("c{label}p{i}"),
                        slide_id: "s0".into(),
                        stain: "S0".into(),
                        stack_index: 0,
                        x: (k % 2) as f64,
                        y: (k / 2) as f64,
                        feature: (0..3)
                            .map(|_| rng.random_range(-0.5..0.5) + shift * label as f64)
                            .collect(),
                    })
                    .collect();
                let graph = build_patient_graph(&recs, 2).unwrap();
                out.push(PreparedPatient {
                    id: format!("c{label}p{i}"),
                    label,
                    graph,
                    pe: None,
                });
            }
        }
        out
    }

    fn toy_model_config() -> ModelConfig {
        ModelConfig {
            layers: 1,
            hidden_dim: 4,
            pe_dim: 0,
            pool_ratio: 1.0,
            gat_heads: 2,
            mhsa_heads: 2,
            dropout: 0.0,
            num_classes: 2,
            knn_k: 2,
            seed: 0,
            input_dim: 3,
            leaky_slope: 0.2,
        }
    }

    #[test]
    fn separable_toy_reaches_perfect_validation() {
        let patients = toy_patients(6, 3.0, 11);
        let fold = Fold {
            train: (0..4).chain(6..10).collect(),
            val: vec![4, 5, 10, 11],
        };
        let cfg = TrainConfig {
            max_epochs: 50,
            ..TrainConfig::default()
        };
        let trained = train_fold(&patients, &fold, &toy_model_config(), &cfg, 1).unwrap();
        let best = trained
            .history
            .iter()
            .map(|h| h.val_accuracy)
            .fold(0.0, f64::max);
        assert_eq!(best, 1.0, "history: {:?}", trained.history.last());
        assert!(trained.history.len() <= 50);
    }

    #[test]
    fn patience_one_with_frozen_learning_stops_at_epoch_two() {
        // A learning rate below the improvement threshold freezes every
        // metric, so epoch 2 triggers the stop.
        let patients = toy_patients(3, 1.0, 5);
        let fold = Fold {
            train: vec![0, 1, 3, 4],
            val: vec![2, 5],
        };
        let cfg = TrainConfig {
            lr: 1e-30,
            patience: 1,
            max_epochs: 50,
            ..TrainConfig::default()
        };
        let trained = train_fold(&patients, &fold, &toy_model_config(), &cfg, 1).unwrap();
        assert_eq!(trained.history.len(), 2);
    }

    #[test]
    fn training_is_reproducible() {
        let patients = toy_patients(4, 2.0, 9);
        let fold = Fold {
            train: vec![0, 1, 2, 4, 5, 6],
            val: vec![3, 7],
        };
        let cfg = TrainConfig {
            max_epochs: 8,
            ..TrainConfig::default()
        };
        let mcfg = ModelConfig {
            dropout: 0.2,
            ..toy_model_config()
        };
        let a = train_fold(&patients, &fold, &mcfg, &cfg, 4).unwrap();
        let b = train_fold(&patients, &fold, &mcfg, &cfg, 4).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn divergence_reports_training_error_with_epoch() {
        // An absurd learning rate overflows the parameters within an epoch.
        let patients = toy_patients(3, 1.0, 5);
        let fold = Fold {
            train: vec![0, 1, 3, 4],
            val: vec![2, 5],
        };
        let cfg = TrainConfig {
            lr: 1e280,
            max_epochs: 10,
            ..TrainConfig::default()
        };
        match train_fold(&patients, &fold, &toy_model_config(), &cfg, 1) {
            Err(Error::Training { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn best_params_come_from_best_accuracy_epoch() {
        let patients = toy_patients(5, 2.5, 21);
        let fold = Fold {
            train: (0..3).chain(5..8).collect(),
            val: vec![3, 4, 8, 9],
        };
        let cfg = TrainConfig {
            max_epochs: 20,
            ..TrainConfig::default()
        };
        let trained = train_fold(&patients, &fold, &toy_model_config(), &cfg, 2).unwrap();
        let best_acc = trained
            .history
            .iter()
            .map(|h| h.val_accuracy)
            .fold(0.0, f64::max);
        let first_best = trained
            .history
            .iter()
            .find(|h| h.val_accuracy == best_acc)
            .unwrap();
        assert_eq!(trained.best_epoch, first_best.epoch);
    }
}
