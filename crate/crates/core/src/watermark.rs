//! Watermark embedding: the sequential (order-loss) watermark and the
//! backdoor (trigger-poisoning) baseline.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::loss::{self, Objective, PromptGrads};
use crate::model::{ClassToken, ClassVocabulary, DualEncoderModel, PromptParams};
use crate::rank::{rank_permutation, PermutationRecord};

/// Configuration for sequential watermark embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapConfig {
    /// Margin between consecutive verification-class logits.
    pub epsilon: f64,
    /// Trade-off weight on the order loss.
    pub lambda: f64,
    /// Ordered verification-class tokens (the watermark key).
    pub verification_classes: Vec<String>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Std of Gaussian input jitter drawn fresh each epoch. The order
    /// constraint must hold for inputs the embedder never saw, so the
    /// margin is enforced over a neighborhood of each shot rather than
    /// at the shots alone.
    pub augment_std: f64,
    /// Weight on the feature-retention penalty that ties prompted
    /// features to the zero-prompt backbone features, confining the
    /// order-induced warp to the verification-token region.
    pub retain: f64,
    pub seed: u64,
}

impl Default for SwapConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            lambda: 4.0,
            verification_classes: (1..=4).map(|i| format!("Target {i}")).collect(),
            epochs: 1500,
            learning_rate: 0.1,
            batch_size: 1024,
            augment_std: 1.0,
            retain: 3.0,
            seed: 0,
        }
    }
}

impl SwapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be > 0".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be >= 0".into()));
        }
        if self.verification_classes.len() < 2 {
            return Err(Error::InvalidConfig(
                "need at least 2 verification classes".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if !(self.augment_std >= 0.0 && self.augment_std.is_finite()) {
            return Err(Error::InvalidConfig("augment_std must be finite and >= 0".into()));
        }
        if !(self.retain >= 0.0 && self.retain.is_finite()) {
            return Err(Error::InvalidConfig("retain must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Configuration for the backdoor watermark baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct BwapConfig {
    pub trigger_pattern: Array1<f64>,
    /// Blend mask, entries in [0, 1].
    pub trigger_mask: Array1<f64>,
    pub target_class: String,
    /// Fraction of training samples replaced by poisoned versions.
    pub poison_rate: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl BwapConfig {
    /// Coordinate-patch trigger: the last four input coordinates are
    /// overwritten with a constant.
    pub fn default_for(input_dim: usize) -> Self {
        let mut mask = Array1::zeros(input_dim);
        for i in input_dim.saturating_sub(4)..input_dim {
            mask[i] = 1.0;
        }
        Self {
            // far outside the natural coordinate range, so the patch is
            // unambiguous against clean inputs
            trigger_pattern: Array1::from_elem(input_dim, 6.0),
            trigger_mask: mask,
            target_class: "Target".to_string(),
            poison_rate: 0.2,
            epochs: 6000,
            learning_rate: 0.2,
            batch_size: 1024,
            seed: 0,
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.trigger_pattern.len() != input_dim || self.trigger_mask.len() != input_dim {
            return Err(Error::DimensionMismatch {
                expected: input_dim,
                got: self.trigger_pattern.len().max(self.trigger_mask.len()),
            });
        }
        if self.trigger_mask.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::InvalidConfig("trigger mask entries must lie in [0,1]".into()));
        }
        if !(self.poison_rate > 0.0 && self.poison_rate <= 1.0) {
            return Err(Error::InvalidConfig("poison_rate must lie in (0,1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One epoch of training telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub functionality_loss: f64,
    pub order_loss: f64,
    pub total_loss: f64,
    /// Accuracy on the training labels (clean accuracy for the backdoor
    /// trainer).
    pub accuracy: f64,
    /// Fraction of training samples carrying the watermark (exact
    /// ordering for the sequential mark, trigger hit rate for the
    /// backdoor mark).
    pub watermark_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub converged: bool,
    /// Fraction of training samples with a fully satisfied order
    /// constraint (or trigger) after the final epoch.
    pub final_watermark_rate: f64,
}

impl TrainingLog {
    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for rec in &self.epochs {
            writeln!(f, "{}", serde_json::to_string(rec)?)?;
        }
        Ok(())
    }
}

/// Mean cross-entropy of the zero-shot prediction over the original
/// classes only.
pub fn functionality_loss(
    model: &DualEncoderModel,
    prompts: &PromptParams,
    batch: &[LabeledSample],
    original_classes: &[ClassToken],
) -> Result<f64> {
    let obj = Objective::functionality_only(original_classes.to_vec());
    Ok(loss::evaluate(model, prompts, batch, &obj)?.functionality)
}

/// Mean hinge loss over consecutive verification-class logit gaps.
pub fn order_loss(
    model: &DualEncoderModel,
    prompts: &PromptParams,
    batch: &[LabeledSample],
    verification_classes: &[ClassToken],
    epsilon: f64,
) -> Result<f64> {
    if verification_classes.len() < 2 {
        return Err(Error::InvalidArgument(
            "order loss needs at least 2 verification classes".into(),
        ));
    }
    let obj = Objective {
        label_classes: Vec::new(),
        verification_classes: verification_classes.to_vec(),
        ce_weight: 0.0,
        order_weight: 1.0,
        retain_weight: 0.0,
        retain_reference: None,
        margin: epsilon,
    };
    Ok(loss::evaluate(model, prompts, batch, &obj)?.order)
}

fn swap_objective(
    original_classes: &[ClassToken],
    verification_classes: &[ClassToken],
    config: &SwapConfig,
) -> Objective {
    Objective {
        label_classes: original_classes.to_vec(),
        verification_classes: verification_classes.to_vec(),
        ce_weight: 1.0,
        order_weight: config.lambda,
        retain_weight: config.retain,
        retain_reference: None,
        margin: config.epsilon,
    }
}

/// The embedding objective: functionality + lambda * order.
pub fn total_loss(
    model: &DualEncoderModel,
    prompts: &PromptParams,
    batch: &[LabeledSample],
    original_classes: &[ClassToken],
    verification_classes: &[ClassToken],
    config: &SwapConfig,
) -> Result<f64> {
    let obj = swap_objective(original_classes, verification_classes, config);
    Ok(loss::evaluate(model, prompts, batch, &obj)?.total)
}

/// Analytic gradient of [`total_loss`] w.r.t. the prompts.
pub fn total_loss_gradient(
    model: &DualEncoderModel,
    prompts: &PromptParams,
    batch: &[LabeledSample],
    original_classes: &[ClassToken],
    verification_classes: &[ClassToken],
    config: &SwapConfig,
) -> Result<PromptGrads> {
    let obj = swap_objective(original_classes, verification_classes, config);
    let (_, grads) = loss::evaluate_with_grad(model, prompts, batch, &obj)?;
    Ok(grads)
}

/// Resolve an ordered list of token names against the vocabulary,
/// deriving embeddings for names the vocabulary does not carry (the
/// model is zero-shot over arbitrary tokens).
pub fn resolve_tokens(
    model: &DualEncoderModel,
    vocab: &ClassVocabulary,
    names: &[String],
) -> Vec<ClassToken> {
    // derive fallbacks from the full name list so a claimed set keeps
    // its shared anchor regardless of vocabulary coverage
    let derived = crate::model::verification_token_set(
        model,
        &vocab.original,
        names,
        crate::model::VERIFICATION_TOKEN_SPREAD,
    );
    names
        .iter()
        .zip(derived)
        .map(|(name, fallback)| match vocab.get(name) {
            Ok(tok) => tok.clone(),
            Err(_) => fallback,
        })
        .collect()
}

/// Plain seeded mini-batch gradient descent on the prompts. The frozen
/// backbone is untouched by construction: only prompt arrays update.
pub(crate) fn descend<F>(
    model: &DualEncoderModel,
    initial: &PromptParams,
    data: &[LabeledSample],
    objective: &Objective,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    augment_std: f64,
    seed: u64,
    mut on_epoch: F,
) -> Result<PromptParams>
where
    F: FnMut(usize, &PromptParams) -> Result<()>,
{
    let mut prompts = initial.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(batch_size.min(data.len().max(1))) {
            let batch: Vec<LabeledSample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let eval = |batch: &[LabeledSample], obj: &Objective| {
                let (terms, grads) =
                    loss::evaluate_with_grad(model, &prompts, batch, obj).map_err(|e| match e {
                        Error::NonFinite { .. } => {
                            Error::Diverged(format!("non-finite loss at epoch {epoch}"))
                        }
                        other => other,
                    })?;
                if !terms.total.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss {} at epoch {epoch}",
                        terms.total
                    )));
                }
                Ok(grads)
            };
            let jittered = augment_std > 0.0 && objective.order_weight > 0.0;
            let mut grads = if jittered {
                // classification gradient on the clean batch so the jitter
                // cannot wash out class structure
                eval(&batch, &objective.without_order())?
            } else {
                eval(&batch, objective)?
            };
            if jittered {
                let mut noisy = batch.clone();
                for sample in &mut noisy {
                    for v in sample.x.iter_mut() {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        *v += augment_std * noise;
                    }
                }
                // jitter the retention anchors too: the text tower must
                // stay faithful around unseen class embeddings, not just
                // at the training tokens
                let mut order_obj = objective.order_only();
                for token in &mut order_obj.label_classes {
                    for v in token.embedding.iter_mut() {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        *v += augment_std * noise;
                    }
                }
                let order_grads = eval(&noisy, &order_obj)?;
                grads.visual = &grads.visual + &order_grads.visual;
                grads.text = &grads.text + &order_grads.text;
            }
            prompts.visual = &prompts.visual - &(&grads.visual * learning_rate);
            prompts.text = &prompts.text - &(&grads.text * learning_rate);
        }
        on_epoch(epoch, &prompts)?;
    }
    Ok(prompts)
}

/// Fraction of samples whose verification-class logits carry the exact
/// registered (ascending) ordering.
pub fn sequence_match_rate(
    model: &DualEncoderModel,
    prompts: &PromptParams,
    samples: &[LabeledSample],
    verification_classes: &[ClassToken],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set".into()));
    }
    let reference = PermutationRecord::identity(verification_classes.len());
    let mut hits = 0usize;
    for s in samples {
        let logits = model.similarity_logits(prompts, &s.x, verification_classes)?;
        if rank_permutation(&logits.values)? == reference {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

fn top1_accuracy(
    model: &DualEncoderModel,
    prompts: &PromptParams,
    samples: &[LabeledSample],
    classes: &[ClassToken],
) -> Result<f64> {
    let mut correct = 0usize;
    for s in samples {
        let p = model.predict(prompts, &s.x, classes)?;
        if p.argmax() == s.y {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

/// Embed the sequential watermark by gradient descent on the combined
/// objective. Returns the watermarked prompts and the per-epoch log;
/// `log.converged` records whether the order constraint holds on at
/// least 95% of the training samples.
pub fn embed_swap(
    model: &DualEncoderModel,
    initial: &PromptParams,
    train: &[LabeledSample],
    vocab: &ClassVocabulary,
    config: &SwapConfig,
) -> Result<(PromptParams, TrainingLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let verification = resolve_tokens(model, vocab, &config.verification_classes);
    let mut objective = swap_objective(&vocab.original, &verification, config);
    // retention pulls toward the starting model: the plain backbone for a
    // fresh embedding, the inherited prompts when training continues from
    // an existing model (e.g. an overwriting adversary)
    if initial.visual.iter().chain(initial.text.iter()).any(|&v| v != 0.0) {
        objective.retain_reference = Some(initial.clone());
    }

    let mut log = TrainingLog::default();
    let prompts = {
        let mut records = Vec::with_capacity(config.epochs);
        let result = descend(
            model,
            initial,
            train,
            &objective,
            config.epochs,
            config.learning_rate,
            config.batch_size,
            config.augment_std,
            config.seed,
            |epoch, prompts| {
                // telemetry every 10th epoch: a full-dataset evaluation
                // per epoch would dominate the embedding cost
                if epoch % 10 != 0 && epoch + 1 != config.epochs {
                    return Ok(());
                }
                let terms = loss::evaluate(model, prompts, train, &objective)?;
                records.push(EpochRecord {
                    epoch,
                    functionality_loss: terms.functionality,
                    order_loss: terms.order,
                    total_loss: terms.total,
                    accuracy: top1_accuracy(model, prompts, train, &vocab.original)?,
                    watermark_rate: sequence_match_rate(model, prompts, train, &verification)?,
                });
                Ok(())
            },
        )?;
        log.epochs = records;
        result
    };

    log.final_watermark_rate = order_satisfied_fraction(
        model,
        &prompts,
        train,
        &verification,
        config.epsilon,
    )?;
    log.converged = log.final_watermark_rate >= 0.95;
    Ok((prompts, log))
}

/// Fraction of samples whose every consecutive verification logit gap
/// meets the margin (per-sample order loss exactly zero).
pub fn order_satisfied_fraction(
    model: &DualEncoderModel,
    prompts: &PromptParams,
    samples: &[LabeledSample],
    verification_classes: &[ClassToken],
    epsilon: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set".into()));
    }
    let mut hits = 0usize;
    for s in samples {
        let logits = model.similarity_logits(prompts, &s.x, verification_classes)?;
        if crate::loss::order_loss_from_logits(&logits.values, epsilon) == 0.0 {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Elementwise trigger blend: (1 - mask) * x + mask * pattern.
pub fn apply_trigger(x: &Array1<f64>, config: &BwapConfig) -> Result<Array1<f64>> {
    if x.len() != config.trigger_pattern.len() || x.len() != config.trigger_mask.len() {
        return Err(Error::DimensionMismatch {
            expected: config.trigger_pattern.len(),
            got: x.len(),
        });
    }
    Ok((&(1.0 - &config.trigger_mask) * x) + &(&config.trigger_mask * &config.trigger_pattern))
}

/// Replace a seeded `poison_rate` fraction of the training set with
/// triggered samples relabeled to `target_label`.
pub fn make_poisoned_dataset(
    train: &[LabeledSample],
    config: &BwapConfig,
    target_label: usize,
) -> Result<Vec<LabeledSample>> {
    if !(config.poison_rate > 0.0) {
        return Err(Error::InvalidArgument("poison_rate must be > 0".into()));
    }
    if config.poison_rate > 1.0 {
        return Err(Error::InvalidArgument("poison_rate must be <= 1".into()));
    }
    let count = (config.poison_rate * train.len() as f64).round() as usize;
    let mut indices: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    indices.shuffle(&mut rng);
    let poisoned: std::collections::HashSet<usize> = indices[..count].iter().cloned().collect();
    train
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if poisoned.contains(&i) {
                Ok(LabeledSample {
                    x: apply_trigger(&s.x, config)?,
                    y: target_label,
                })
            } else {
                Ok(s.clone())
            }
        })
        .collect()
}

/// Fraction of triggered samples classified as the target class when the
/// candidate set spans original classes plus the target.
pub fn trigger_success_rate(
    model: &DualEncoderModel,
    prompts: &PromptParams,
    samples: &[LabeledSample],
    classes_with_target: &[ClassToken],
    config: &BwapConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set".into()));
    }
    let target = classes_with_target.len() - 1;
    let mut hits = 0usize;
    for s in samples {
        let triggered = apply_trigger(&s.x, config)?;
        let p = model.predict(prompts, &triggered, classes_with_target)?;
        if p.argmax() == target {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Embed the backdoor watermark: cross-entropy descent on a poisoned
/// mixture where the softmax spans the original classes plus the target
/// class.
pub fn embed_bwap(
    model: &DualEncoderModel,
    initial: &PromptParams,
    train: &[LabeledSample],
    vocab: &ClassVocabulary,
    config: &BwapConfig,
) -> Result<(PromptParams, TrainingLog)> {
    config.validate(model.config.input_dim)?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let target_token = crate::model::verification_token_set(
        model,
        &vocab.original,
        std::slice::from_ref(&config.target_class),
        crate::model::VERIFICATION_TOKEN_SPREAD,
    )
    .pop()
    .expect("one token");
    let mut classes = vocab.original.clone();
    classes.push(target_token);
    let target_label = classes.len() - 1;
    let mixed = make_poisoned_dataset(train, config, target_label)?;
    let objective = Objective::functionality_only(classes.clone());

    let mut records = Vec::with_capacity(config.epochs);
    let prompts = descend(
        model,
        initial,
        &mixed,
        &objective,
        config.epochs,
        config.learning_rate,
        config.batch_size,
        0.0,
        config.seed,
        |epoch, prompts| {
            if epoch % 10 != 0 && epoch + 1 != config.epochs {
                return Ok(());
            }
            let terms = loss::evaluate(model, prompts, &mixed, &objective)?;
            records.push(EpochRecord {
                epoch,
                functionality_loss: terms.functionality,
                order_loss: 0.0,
                total_loss: terms.total,
                accuracy: top1_accuracy(model, prompts, train, &classes)?,
                watermark_rate: trigger_success_rate(model, prompts, train, &classes, config)?,
            });
            Ok(())
        },
    )?;

    let final_rate = trigger_success_rate(model, &prompts, train, &classes, config)?;
    Ok((
        prompts,
        TrainingLog {
            epochs: records,
            converged: final_rate >= 0.95,
            final_watermark_rate: final_rate,
        },
    ))
}
