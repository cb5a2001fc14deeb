//! Training and evaluation harness for the synthetic tasks.
//!
//! Loss is cross-entropy on the final token only. Defaults follow the
//! synthetic-task recipe: AdamW at lr 5e-4 with weight decay 0.1, 200
//! epochs over 5000 examples, batch size 32.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Phase};
use crate::optim::AdamW;
use crate::rng::{Rng, Stream};
use crate::tape::Tape;
use crate::tasks::{Dataset, Example, TaskSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHparams {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainHparams {
    fn default() -> Self {
        TrainHparams {
            lr: 5e-4,
            weight_decay: 0.1,
            epochs: 200,
            batch_size: 32,
        }
    }
}

/// Everything needed to reproduce a run, plus its outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainReportConfig,
    pub per_epoch_loss: Vec<f64>,
    pub test_accuracy: f64,
    pub seed: u64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReportConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub hparams: TrainHparams,
}

fn batch_tokens(examples: &[Example], idxs: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let n = examples[idxs[0]].tokens.len();
    let mut tokens = Vec::with_capacity(idxs.len() * n);
    let mut targets = Vec::with_capacity(idxs.len());
    for &i in idxs {
        debug_assert_eq!(examples[i].tokens.len(), n);
        tokens.extend_from_slice(&examples[i].tokens);
        targets.push(examples[i].target);
    }
    (tokens, targets)
}

/// Trains in place; deterministic given (model seed, data seed, `seed`).
pub fn train(model: &mut Model, data: &Dataset, hparams: &TrainHparams, seed: u64) -> Result<TrainReport> {
    if data.train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let start = std::time::Instant::now();
    let mut opt = AdamW::new(hparams.lr, hparams.weight_decay);
    let shuffle_root = Rng::new(seed, Stream::Shuffle);
    let dropout_root = Rng::new(seed, Stream::Dropout);
    let mut per_epoch_loss = Vec::with_capacity(hparams.epochs);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..hparams.epochs {
        let mut shuffle_rng = shuffle_root.substream(epoch as u64);
        shuffle_rng.shuffle(&mut order);
        let mut dropout_rng = dropout_root.substream(epoch as u64);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(hparams.batch_size) {
            let (tokens, targets) = batch_tokens(&data.train, chunk);
            let mut tape = Tape::new();
            let bind = model.bind(&mut tape);
            let logits = model.forward(
                &mut tape,
                &bind,
                &tokens,
                chunk.len(),
                &mut Phase::Train(&mut dropout_rng),
                None,
            )?;
            let loss = tape.cross_entropy_last_token(logits, &targets)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {loss_val} at epoch {epoch} batch {batches}; aborting (check \
                     learning rate and kernel stability)"
                )));
            }
            epoch_loss += loss_val;
            batches += 1.0;
            let mut grads = tape.backward(loss)?;
            let grad_tensors: Vec<_> = bind.iter().map(|&id| grads.take(id)).collect();
            opt.step(&mut model.params.params, &grad_tensors)?;
        }
        per_epoch_loss.push(epoch_loss / batches);
    }

    let test_accuracy = eval_last_token(model, &data.test)?;
    Ok(TrainReport {
        config: TrainReportConfig {
            model: model.config.clone(),
            task: data.spec,
            hparams: hparams.clone(),
        },
        per_epoch_loss,
        test_accuracy,
        seed,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Accuracy of the final-token prediction over a set of examples. SSM
/// kernels are materialized once per distinct length (inference cache).
pub fn eval_last_token(model: &Model, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let n = examples[0].tokens.len();
    if examples.iter().any(|e| e.tokens.len() != n) {
        return Err(Error::Config("evaluation set mixes sequence lengths".into()));
    }
    let cache = model.kernel_cache(n)?;
    eval_with(examples, |tokens, batch| {
        model.predict_last(tokens, batch, Some(&cache))
    })
}

/// Accuracy under an arbitrary batched predictor (tokens, batch) ->
/// last-token predictions; the model path above and test stubs share it.
pub fn eval_with(
    examples: &[Example],
    mut predict: impl FnMut(&[usize], usize) -> Result<Vec<usize>>,
) -> Result<f64> {
    let idxs: Vec<usize> = (0..examples.len()).collect();
    let mut correct = 0usize;
    for chunk in idxs.chunks(64) {
        let (tokens, targets) = batch_tokens(examples, chunk);
        let preds = predict(&tokens, chunk.len())?;
        if preds.len() != targets.len() {
            return Err(Error::Config("predictor returned a short batch".into()));
        }
        correct += preds.iter().zip(&targets).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, LayerKind, ModelConfig};
    use crate::tasks::{generate, TaskKind, TaskSpec};

    fn tiny_run(kind: LayerKind, epochs: usize) -> (TrainReport, Model, Dataset) {
        let mut spec = TaskSpec::defaults(TaskKind::InductionHead, 0);
        spec.seq_len = 8;
        spec.vocab_size = 6;
        spec.n_train = 64;
        spec.n_test = 32;
        let data = generate(&spec).unwrap();
        let cfg = ModelConfig {
            layers: vec![kind; 2],
            d: 8,
            heads: if kind == LayerKind::H3 { 8 } else { 2 },
            m: 4,
            mlp_dim: 16,
            vocab: spec.vocab_size,
            max_len: spec.tokens_per_example(),
            embed_dropout: 0.1,
            resid_dropout: 0.0,
            learnable_shift_b: false,
            diag_shared_c: false,
        };
        let mut model = build_model(&cfg, 1).unwrap();
        let hp = TrainHparams {
            epochs,
            ..TrainHparams::default()
        };
        let report = train(&mut model, &data, &hp, 1).unwrap();
        (report, model, data)
    }

    #[test]
    fn loss_decreases_on_a_tiny_task() {
        let (report, _, _) = tiny_run(LayerKind::H3, 12);
        assert_eq!(report.per_epoch_loss.len(), 12);
        assert!(
            report.per_epoch_loss[11] < report.per_epoch_loss[0],
            "loss did not decrease: {:?}",
            report.per_epoch_loss
        );
        assert!(report.wall_time_s > 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        let (a, _, _) = tiny_run(LayerKind::H3, 3);
        let (b, _, _) = tiny_run(LayerKind::H3, 3);
        assert_eq!(a.per_epoch_loss, b.per_epoch_loss);
        assert_eq!(a.test_accuracy, b.test_accuracy);
    }

    #[test]
    fn untrained_accuracy_is_near_chance() {
        let spec = TaskSpec::defaults(TaskKind::InductionHead, 3);
        let data = generate(&spec).unwrap();
        let cfg = ModelConfig::two_layer(LayerKind::H3, spec.vocab_size, spec.tokens_per_example());
        let model = build_model(&cfg, 3).unwrap();
        let acc = eval_last_token(&model, &data.test).unwrap();
        assert!(
            (acc - spec.chance_level()).abs() <= 0.05,
            "untrained accuracy {acc} vs chance {}",
            spec.chance_level()
        );
    }

    #[test]
    fn stub_predictors_bound_the_accuracy_scale() {
        let spec = TaskSpec::defaults(TaskKind::AssociativeRecall, 5);
        let data = generate(&spec).unwrap();
        // a perfect memorizer scores 1.0
        let n = data.test[0].tokens.len();
        let targets: Vec<usize> = data.test.iter().map(|e| e.target).collect();
        let mut cursor = 0usize;
        let acc = eval_with(&data.test, |tokens, batch| {
            assert_eq!(tokens.len(), batch * n);
            let out = targets[cursor..cursor + batch].to_vec();
            cursor += batch;
            Ok(out)
        })
        .unwrap();
        assert_eq!(acc, 1.0);
        // a uniform guesser sits near the computed chance level (0.2 here:
        // 5 values)
        let mut rng = crate::rng::Rng::new(99, crate::rng::Stream::Bench);
        let acc = eval_with(&data.test, |_, batch| {
            Ok((0..batch)
                .map(|_| spec.vocab_size / 2 + rng.below(spec.vocab_size / 2))
                .collect())
        })
        .unwrap();
        assert!(
            (acc - spec.chance_level()).abs() < 0.08,
            "uniform stub accuracy {acc} vs chance {}",
            spec.chance_level()
        );
    }

    #[test]
    fn mixed_length_eval_set_is_rejected() {
        let spec = TaskSpec::defaults(TaskKind::InductionHead, 0);
        let data = generate(&spec).unwrap();
        let cfg = ModelConfig::two_layer(LayerKind::H3, spec.vocab_size, 40);
        let model = build_model(&cfg, 0).unwrap();
        let mut mixed = data.test.clone();
        mixed[0].tokens.push(0);
        assert!(eval_last_token(&model, &mixed).is_err());
    }
}
