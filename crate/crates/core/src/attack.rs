//! The adversary suite: watermark removal (fine-tuning, pruning,
//! overwriting, unlearning) and false-claim attacks (signed-gradient
//! sample crafting against one or two reference models).

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::loss::{self, Objective};
use crate::model::{ClassToken, ClassVocabulary, DualEncoderModel, PromptParams};
use crate::watermark::{self, SwapConfig, TrainingLog};

/// Metrics snapshot taken before or after an attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub wsr: f64,
    pub acc_base: f64,
    pub acc_novel: f64,
    pub p_value: f64,
}

/// One attack run, serialized alongside the audit reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub attack: String,
    /// Attack-specific parameters, flat key -> value.
    pub parameters: serde_json::Value,
    pub seed: u64,
    pub pre: AttackMetrics,
    pub post: AttackMetrics,
    /// Attack success rate on each reference model (false claims only).
    pub reference_asr: Vec<f64>,
    /// Attack success rate on the victim model (false claims only).
    pub victim_asr: Option<f64>,
}

/// Signed-gradient attack configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    /// Perturbation budget under the l-infinity norm.
    pub epsilon_inf: f64,
    pub step_size: f64,
    pub steps: usize,
    pub targeted: bool,
    /// Valid input range; every crafted sample is clipped into it.
    pub input_min: f64,
    pub input_max: f64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            // the false claimant controls the audit inputs outright, so
            // the budget is generous relative to the data scale
            epsilon_inf: 4.0,
            step_size: 0.25,
            steps: 100,
            targeted: false,
            // wide enough for the offset-cone data: coordinates reach
            // mean_offset * max|u0_i| plus mean and cluster noise
            input_min: -12.0,
            input_max: 12.0,
        }
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon_inf < 0.0 {
            return Err(Error::InvalidConfig("epsilon_inf must be >= 0".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.step_size < 0.0 {
            return Err(Error::InvalidConfig("step_size must be >= 0".into()));
        }
        if !(self.input_min < self.input_max) {
            return Err(Error::InvalidConfig("input_min must be < input_max".into()));
        }
        Ok(())
    }
}

/// What the crafted samples should do to a reference model.
#[derive(Debug, Clone)]
pub enum PgdObjective {
    /// Untargeted misclassification: ascend the cross-entropy over the
    /// given label classes.
    Misclassify { classes: Vec<ClassToken> },
    /// Watermark imprinting: descend the hinge order loss so the
    /// verification-class logits take the adversary's registered
    /// ascending ordering.
    ImprintSequence {
        verification: Vec<ClassToken>,
        margin: f64,
    },
}

impl PgdObjective {
    fn to_objective(&self) -> Objective {
        match self {
            PgdObjective::Misclassify { classes } => Objective::functionality_only(classes.clone()),
            PgdObjective::ImprintSequence { verification, margin } => Objective {
                label_classes: Vec::new(),
                verification_classes: verification.clone(),
                ce_weight: 0.0,
                order_weight: 1.0,
                retain_weight: 0.0,
                retain_reference: None,
                margin: *margin,
            },
        }
    }

    /// Ascent for misclassification, descent for sequence imprinting.
    fn step_sign(&self) -> f64 {
        match self {
            PgdObjective::Misclassify { .. } => 1.0,
            PgdObjective::ImprintSequence { .. } => -1.0,
        }
    }
}

/// Fine-tuning removal attack: cross-entropy-only descent on clean data,
/// continuing from the watermarked prompts.
#[allow(clippy::too_many_arguments)]
pub fn finetune_attack(
    model: &DualEncoderModel,
    prompts: &PromptParams,
    clean_data: &[LabeledSample],
    original_classes: &[ClassToken],
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<PromptParams> {
    if clean_data.is_empty() {
        return Err(Error::Empty("fine-tuning data".into()));
    }
    let objective = Objective::functionality_only(original_classes.to_vec());
    watermark::descend(
        model,
        prompts,
        clean_data,
        &objective,
        epochs,
        learning_rate,
        batch_size,
        0.0,
        seed,
        |_, _| Ok(()),
    )
}

/// Pruning removal attack on the deployed suspect model: zero the
/// `prune_fraction` smallest-magnitude parameters across the backbone
/// weight matrices and both prompt matrices, ranked globally. Magnitude
/// ties break by parameter order, so the result is fully deterministic.
pub fn prune_attack(
    model: &DualEncoderModel,
    prompts: &PromptParams,
    prune_fraction: f64,
) -> Result<(DualEncoderModel, PromptParams)> {
    if !(0.0..=1.0).contains(&prune_fraction) {
        return Err(Error::InvalidArgument(
            "prune_fraction must lie in [0,1]".into(),
        ));
    }
    let mut pruned_model = model.clone();
    let mut pruned_prompts = prompts.clone();
    {
        let mut params: Vec<&mut f64> = Vec::new();
        for layer in &mut pruned_model.encoder.layers {
            params.extend(layer.weight.iter_mut());
        }
        params.extend(pruned_prompts.visual.iter_mut());
        params.extend(pruned_prompts.text.iter_mut());
        let count = (prune_fraction * params.len() as f64).round() as usize;
        let mut order: Vec<usize> = (0..params.len()).collect();
        order.sort_by(|&a, &b| {
            let (va, vb) = (params[a].abs(), params[b].abs());
            va.partial_cmp(&vb).expect("finite").then(a.cmp(&b))
        });
        for &idx in order.iter().take(count.min(params.len())) {
            *params[idx] = 0.0;
        }
    }
    Ok((pruned_model, pruned_prompts))
}

fn clip_sample(x: &mut Array1<f64>, origin: &Array1<f64>, config: &PgdConfig) {
    for (v, &o) in x.iter_mut().zip(origin.iter()) {
        *v = v
            .max(o - config.epsilon_inf)
            .min(o + config.epsilon_inf)
            .max(config.input_min)
            .min(config.input_max);
    }
}

fn pgd_craft(
    model: &DualEncoderModel,
    references: &[&PromptParams],
    samples: &[LabeledSample],
    objectives: &[Objective],
    sign: f64,
    config: &PgdConfig,
) -> Result<Vec<LabeledSample>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("attack sample set".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for sample in samples {
        let mut current = sample.clone();
        // start inside the valid range; a zero budget keeps x unchanged
        clip_sample(&mut current.x, &sample.x, config);
        for _ in 0..config.steps {
            let mut grad = Array1::<f64>::zeros(current.x.len());
            for (prompts, objective) in references.iter().zip(objectives) {
                let (_, _, input_grads) = loss::evaluate_with_input_grad(
                    model,
                    prompts,
                    std::slice::from_ref(&current),
                    objective,
                )?;
                grad = grad + &input_grads[0];
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged("non-finite attack gradient".into()));
            }
            current.x = &current.x + &grad.mapv(|g| sign * config.step_size * sgn(g));
            clip_sample(&mut current.x, &sample.x, config);
        }
        out.push(current);
    }
    Ok(out)
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Single-reference false-claim attack: iterated signed-gradient steps
/// on the chosen objective against one white-box reference model,
/// clipped to the l-infinity ball and the valid input range.
pub fn pgd_false_claim(
    model: &DualEncoderModel,
    reference: &PromptParams,
    samples: &[LabeledSample],
    objective: &PgdObjective,
    config: &PgdConfig,
) -> Result<Vec<LabeledSample>> {
    pgd_craft(
        model,
        &[reference],
        samples,
        &[objective.to_objective()],
        objective.step_sign(),
        config,
    )
}

/// Adaptive false-claim attack: descend the summed joint objective
/// (cross-entropy plus lambda times the order loss) over two
/// independently trained reference prompt sets.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_false_claim(
    model: &DualEncoderModel,
    reference_a: &PromptParams,
    reference_b: &PromptParams,
    samples: &[LabeledSample],
    label_classes: &[ClassToken],
    verification_classes: &[ClassToken],
    lambda: f64,
    margin: f64,
    config: &PgdConfig,
) -> Result<Vec<LabeledSample>> {
    let objective = Objective {
        label_classes: label_classes.to_vec(),
        verification_classes: verification_classes.to_vec(),
        ce_weight: 1.0,
        order_weight: lambda,
        retain_weight: 0.0,
        retain_reference: None,
        margin,
    };
    pgd_craft(
        model,
        &[reference_a, reference_b],
        samples,
        &[objective.clone(), objective],
        -1.0,
        config,
    )
}

/// Overwriting attack: embed a second sequential watermark with a
/// disjoint verification-class set on top of the existing prompts.
pub fn overwrite_attack(
    model: &DualEncoderModel,
    prompts: &PromptParams,
    train: &[LabeledSample],
    vocab: &ClassVocabulary,
    original_verification: &[String],
    config: &SwapConfig,
) -> Result<(PromptParams, TrainingLog)> {
    if config
        .verification_classes
        .iter()
        .any(|t| original_verification.contains(t))
    {
        return Err(Error::InvalidArgument(
            "overwriting verification classes must be disjoint from the original set".into(),
        ));
    }
    watermark::embed_swap(model, prompts, train, vocab, config)
}

/// Unlearning attack: the adversary knows the verification classes and
/// descends L_f minus lambda times L_o, pushing the order term up while
/// preserving task accuracy.
#[allow(clippy::too_many_arguments)]
pub fn unlearn_attack(
    model: &DualEncoderModel,
    prompts: &PromptParams,
    train: &[LabeledSample],
    vocab: &ClassVocabulary,
    known_verification: &[String],
    lambda: f64,
    margin: f64,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<PromptParams> {
    if train.is_empty() {
        return Err(Error::Empty("unlearning data".into()));
    }
    let verification = watermark::resolve_tokens(model, vocab, known_verification);
    let objective = Objective {
        label_classes: vocab.original.clone(),
        verification_classes: verification,
        ce_weight: 1.0,
        order_weight: -lambda,
        retain_weight: 0.0,
        retain_reference: None,
        margin,
    };
    watermark::descend(
        model,
        prompts,
        train,
        &objective,
        epochs,
        learning_rate,
        batch_size,
        0.0,
        seed,
        |_, _| Ok(()),
    )
}

/// Attack success rate: the fraction of items satisfying the success
/// predicate (misclassification for CE attacks, exact reference-ordering
/// match for sequence attacks).
pub fn asr<T, F>(items: &[T], mut success: F) -> Result<f64>
where
    F: FnMut(&T) -> Result<bool>,
{
    if items.is_empty() {
        return Err(Error::Empty("attack output set".into()));
    }
    let mut hits = 0usize;
    for item in items {
        if success(item)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}
