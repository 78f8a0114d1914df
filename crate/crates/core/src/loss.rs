//! Loss evaluation and analytic gradients.
//!
//! Every training and attack objective in this crate is a weighted sum
//! of two terms over a batch:
//!
//!   * a cross-entropy functionality term over an ordered label-class
//!     list, and
//!   * a hinge order term over the raw verification-class logits,
//!     `sum_i max(0, margin - (z[i+1] - z[i]))`.
//!
//! Gradients flow to the soft prompts (the only trainable parameters)
//! and, on request, to the inputs (for signed-gradient attacks). The
//! frozen backbone never receives updates.

use ndarray::{Array1, Array2};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::model::{
    conditional_shift, conditional_shift_backward, ClassToken, DualEncoderModel, PromptParams,
    ShiftCache,
};

/// Gradient arrays with the same shapes as [`PromptParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGrads {
    pub visual: Array2<f64>,
    pub text: Array2<f64>,
}

impl PromptGrads {
    pub fn zeros_like(prompts: &PromptParams) -> Self {
        Self {
            visual: Array2::<f64>::zeros(prompts.visual.raw_dim()),
            text: Array2::<f64>::zeros(prompts.text.raw_dim()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.visual
            .iter()
            .chain(self.text.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// The loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub functionality: f64,
    pub order: f64,
    pub retain: f64,
    pub total: f64,
}

/// A batch objective: CE over `label_classes` plus a hinge over the
/// `verification_classes` logits, plus an optional retention penalty
/// tying prompted features to the zero-prompt features.
#[derive(Debug, Clone)]
pub struct Objective {
    pub label_classes: Vec<ClassToken>,
    pub verification_classes: Vec<ClassToken>,
    pub ce_weight: f64,
    pub order_weight: f64,
    /// Weight on `mean ||f_p(x) - f_r(x)||^2 + mean_k ||g_p(t_k) - g_r(t_k)||^2`,
    /// where the reference encoders use `retain_reference` prompts (the
    /// plain backbone when `None`). Keeps the tuned encoders close to the
    /// reference except where the other terms demand a warp.
    pub retain_weight: f64,
    /// Prompts defining the retention reference encoders.
    pub retain_reference: Option<PromptParams>,
    pub margin: f64,
}

impl Objective {
    pub fn functionality_only(label_classes: Vec<ClassToken>) -> Self {
        Self {
            label_classes,
            verification_classes: Vec::new(),
            ce_weight: 1.0,
            order_weight: 0.0,
            retain_weight: 0.0,
            retain_reference: None,
            margin: 0.0,
        }
    }

    /// The same objective with the order and retention terms switched off.
    pub fn without_order(&self) -> Self {
        Self {
            order_weight: 0.0,
            retain_weight: 0.0,
            ..self.clone()
        }
    }

    /// The same objective without its CE term (order plus retention).
    pub fn order_only(&self) -> Self {
        Self {
            ce_weight: 0.0,
            ..self.clone()
        }
    }

    fn validate(&self, batch: &[LabeledSample]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        if self.order_weight != 0.0 && self.verification_classes.len() < 2 {
            return Err(Error::InvalidArgument(
                "order term needs at least 2 verification classes".into(),
            ));
        }
        if self.ce_weight != 0.0 {
            for s in batch {
                if s.y >= self.label_classes.len() {
                    return Err(Error::InvalidArgument(format!(
                        "label {} outside the {}-class label set",
                        s.y,
                        self.label_classes.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Hinge order loss on a raw logit sequence.
pub fn order_loss_from_logits(z: &[f64], margin: f64) -> f64 {
    z.windows(2)
        .map(|w| (margin - (w[1] - w[0])).max(0.0))
        .sum()
}

struct EncodedClass {
    feature: Array1<f64>,
    cache: crate::model::EncoderCache,
    prenorm_norm: f64,
    shift: ShiftCache,
}

/// Encode `raw + s(raw)` through the backbone, keeping the caches the
/// backward pass needs.
fn encode_shifted(
    model: &DualEncoderModel,
    prompt: &Array2<f64>,
    raw: &Array1<f64>,
) -> EncodedClass {
    let (s, shift) = conditional_shift(prompt, raw);
    let (v, cache) = model.encoder.forward_cached(&(raw + &s));
    let norm = v.dot(&v).sqrt().max(1e-300);
    EncodedClass {
        feature: &v / norm,
        cache,
        prenorm_norm: norm,
        shift,
    }
}

/// Backprop through L2 normalization: y = v / |v|.
fn normalize_backward(enc: &EncodedClass, d_feature: &Array1<f64>) -> Array1<f64> {
    let y = &enc.feature;
    let proj = y.dot(d_feature);
    (d_feature - &(y * proj)) / enc.prenorm_norm
}

/// Evaluate the objective on a batch.
pub fn evaluate(
    model: &DualEncoderModel,
    prompts: &PromptParams,
    batch: &[LabeledSample],
    objective: &Objective,
) -> Result<LossTerms> {
    let (terms, _, _) = evaluate_inner(model, prompts, batch, objective, false, false)?;
    Ok(terms)
}

/// Evaluate the objective and its analytic gradient w.r.t. the prompts.
pub fn evaluate_with_grad(
    model: &DualEncoderModel,
    prompts: &PromptParams,
    batch: &[LabeledSample],
    objective: &Objective,
) -> Result<(LossTerms, PromptGrads)> {
    let (terms, grads, _) = evaluate_inner(model, prompts, batch, objective, true, false)?;
    Ok((terms, grads.expect("requested")))
}

/// Evaluate the objective with gradients w.r.t. both prompts and inputs.
pub fn evaluate_with_input_grad(
    model: &DualEncoderModel,
    prompts: &PromptParams,
    batch: &[LabeledSample],
    objective: &Objective,
) -> Result<(LossTerms, PromptGrads, Vec<Array1<f64>>)> {
    let (terms, grads, inputs) = evaluate_inner(model, prompts, batch, objective, true, true)?;
    Ok((terms, grads.expect("requested"), inputs.expect("requested")))
}

fn evaluate_inner(
    model: &DualEncoderModel,
    prompts: &PromptParams,
    batch: &[LabeledSample],
    objective: &Objective,
    want_grads: bool,
    want_input_grads: bool,
) -> Result<(LossTerms, Option<PromptGrads>, Option<Vec<Array1<f64>>>)> {
    objective.validate(batch)?;
    if !prompts.is_finite() {
        return Err(Error::NonFinite {
            context: "prompt parameters".into(),
        });
    }
    let tau = model.config.temperature;
    let batch_size = batch.len() as f64;

    let use_ce = objective.ce_weight != 0.0 && !objective.label_classes.is_empty();
    let use_order = !objective.verification_classes.is_empty();
    let use_retain = objective.retain_weight != 0.0;
    let need_labels = use_ce || (use_retain && !objective.label_classes.is_empty());

    let encode_token = |token: &ClassToken| -> Result<EncodedClass> {
        if token.embedding.len() != model.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: model.config.input_dim,
                got: token.embedding.len(),
            });
        }
        Ok(encode_shifted(model, &prompts.text, &token.embedding))
    };

    let label_enc: Vec<EncodedClass> = if need_labels {
        objective
            .label_classes
            .iter()
            .map(&encode_token)
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let verif_enc: Vec<EncodedClass> = if use_order {
        objective
            .verification_classes
            .iter()
            .map(&encode_token)
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut ce_sum = 0.0;
    let mut order_sum = 0.0;
    let mut retain_sum = 0.0;
    let ref_prompts = objective.retain_reference.as_ref();
    let reference = |matrix: Option<&ndarray::Array2<f64>>, input: &Array1<f64>| -> Array1<f64> {
        let v = match matrix {
            Some(m) => {
                let (s, _) = conditional_shift(m, input);
                model.encoder.forward(&(input + &s))
            }
            None => model.encoder.forward(input),
        };
        let norm = v.dot(&v).sqrt().max(1e-300);
        v / norm
    };
    let mut d_label: Vec<Array1<f64>> =
        vec![Array1::zeros(model.config.feature_dim); label_enc.len()];
    let mut d_verif: Vec<Array1<f64>> =
        vec![Array1::zeros(model.config.feature_dim); verif_enc.len()];
    let mut grads = PromptGrads::zeros_like(prompts);
    let mut input_grads: Vec<Array1<f64>> = Vec::new();

    for sample in batch {
        if sample.x.len() != model.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: model.config.input_dim,
                got: sample.x.len(),
            });
        }
        if sample.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "batch sample".into(),
            });
        }
        let img = encode_shifted(model, &prompts.visual, &sample.x);
        let mut d_feature = Array1::<f64>::zeros(model.config.feature_dim);

        if use_ce {
            let logits: Vec<f64> = label_enc
                .iter()
                .map(|g| img.feature.dot(&g.feature) / tau)
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let log_p = logits[sample.y] - max - sum.ln();
            ce_sum += -log_p;
            if want_grads || want_input_grads {
                let scale = objective.ce_weight / batch_size;
                for (k, (g, e)) in label_enc.iter().zip(&exps).enumerate() {
                    let mut d_logit = e / sum;
                    if k == sample.y {
                        d_logit -= 1.0;
                    }
                    let d_logit = d_logit * scale / tau;
                    d_feature = d_feature + &(&g.feature * d_logit);
                    d_label[k] = &d_label[k] + &(&img.feature * d_logit);
                }
            }
        }

        if use_order {
            let z: Vec<f64> = verif_enc
                .iter()
                .map(|g| img.feature.dot(&g.feature) / tau)
                .collect();
            order_sum += order_loss_from_logits(&z, objective.margin);
            if want_grads || want_input_grads {
                let scale = objective.order_weight / batch_size;
                let mut d_z = vec![0.0; z.len()];
                for i in 0..z.len() - 1 {
                    if objective.margin - (z[i + 1] - z[i]) > 0.0 {
                        d_z[i] += scale;
                        d_z[i + 1] -= scale;
                    }
                }
                for (g, (enc, &dz)) in d_verif.iter_mut().zip(verif_enc.iter().zip(&d_z)) {
                    if dz != 0.0 {
                        let dz = dz / tau;
                        d_feature = d_feature + &(&enc.feature * dz);
                        *g = &*g + &(&img.feature * dz);
                    }
                }
            }
        }

        if use_retain {
            let f0 = reference(ref_prompts.map(|p| &p.visual), &sample.x);
            let diff = &img.feature - &f0;
            retain_sum += diff.dot(&diff);
            if want_grads || want_input_grads {
                let scale = 2.0 * objective.retain_weight / batch_size;
                d_feature = d_feature + &(&diff * scale);
            }
        }

        if want_grads || want_input_grads {
            let d_prenorm = normalize_backward(&img, &d_feature);
            let d_encoder_input = model.encoder.backward(&img.cache, &d_prenorm);
            let (d_prompt, d_x) =
                conditional_shift_backward(&prompts.visual, &img.shift, &d_encoder_input);
            grads.visual = &grads.visual + &d_prompt;
            if want_input_grads {
                input_grads.push(d_x);
            }
        }
    }

    let mut retain = 0.0;
    if use_retain {
        retain += retain_sum / batch_size;
        if !label_enc.is_empty() {
            let scale = 2.0 * objective.retain_weight / label_enc.len() as f64;
            let mut text_sum = 0.0;
            for (k, (token, enc)) in objective.label_classes.iter().zip(&label_enc).enumerate() {
                let g0 = reference(ref_prompts.map(|p| &p.text), &token.embedding);
                let diff = &enc.feature - &g0;
                text_sum += diff.dot(&diff);
                if want_grads || want_input_grads {
                    d_label[k] = &d_label[k] + &(&diff * scale);
                }
            }
            retain += text_sum / label_enc.len() as f64;
        }
    }

    let functionality = if use_ce { ce_sum / batch_size } else { 0.0 };
    let order = if use_order { order_sum / batch_size } else { 0.0 };
    let total = objective.ce_weight * functionality
        + objective.order_weight * order
        + objective.retain_weight * retain;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            context: "loss value".into(),
        });
    }
    let terms = LossTerms {
        functionality,
        order,
        retain,
        total,
    };

    if !(want_grads || want_input_grads) {
        return Ok((terms, None, None));
    }

    // Text-tower backprop: every class feature depends on the shared
    // text prompt through its own conditional shift.
    for (enc, d_feat) in label_enc.iter().chain(&verif_enc).zip(
        d_label.iter().chain(&d_verif),
    ) {
        let d_prenorm = normalize_backward(enc, d_feat);
        let d_encoder_input = model.encoder.backward(&enc.cache, &d_prenorm);
        let (d_prompt, _) =
            conditional_shift_backward(&prompts.text, &enc.shift, &d_encoder_input);
        grads.text = &grads.text + &d_prompt;
    }

    let inputs = want_input_grads.then_some(input_grads);
    Ok((terms, Some(grads), inputs))
}

/// Central-difference gradient of an arbitrary scalar function of the
/// prompts. Independent of the analytic path; used as its oracle.
pub fn finite_difference_gradient<F>(
    loss_fn: F,
    prompts: &PromptParams,
    step: f64,
) -> Result<PromptGrads>
where
    F: Fn(&PromptParams) -> Result<f64>,
{
    let probe = loss_fn(prompts)?;
    if !probe.is_finite() {
        return Err(Error::NonFinite {
            context: "loss function value".into(),
        });
    }
    let mut grads = PromptGrads::zeros_like(prompts);
    let mut work = prompts.clone();
    for idx in 0..prompts.visual.len() {
        let (r, c) = (idx / prompts.visual.ncols().max(1), idx % prompts.visual.ncols().max(1));
        let orig = work.visual[[r, c]];
        work.visual[[r, c]] = orig + step;
        let plus = loss_fn(&work)?;
        work.visual[[r, c]] = orig - step;
        let minus = loss_fn(&work)?;
        work.visual[[r, c]] = orig;
        grads.visual[[r, c]] = (plus - minus) / (2.0 * step);
    }
    for idx in 0..prompts.text.len() {
        let (r, c) = (idx / prompts.text.ncols().max(1), idx % prompts.text.ncols().max(1));
        let orig = work.text[[r, c]];
        work.text[[r, c]] = orig + step;
        let plus = loss_fn(&work)?;
        work.text[[r, c]] = orig - step;
        let minus = loss_fn(&work)?;
        work.text[[r, c]] = orig;
        grads.text[[r, c]] = (plus - minus) / (2.0 * step);
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassToken, ModelConfig};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn setup() -> (DualEncoderModel, Vec<ClassToken>, Vec<ClassToken>, Vec<LabeledSample>) {
        let model = DualEncoderModel::new(ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut gauss = |dim: usize| {
            Array1::from_shape_fn(dim, |_| {
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            })
        };
        let labels: Vec<ClassToken> = (0..4)
            .map(|k| ClassToken::new(format!("class {k}"), gauss(32)))
            .collect();
        let verif: Vec<ClassToken> = (1..=4)
            .map(|i| ClassToken::derived(format!("Target {i}"), 32, 0))
            .collect();
        let batch: Vec<LabeledSample> = (0..6)
            .map(|i| LabeledSample {
                x: gauss(32),
                y: i % 4,
            })
            .collect();
        (model, labels, verif, batch)
    }

    #[test]
    fn order_loss_hand_values() {
        // margins satisfied
        assert_abs_diff_eq!(
            order_loss_from_logits(&[0.0, 1.0, 2.0, 3.0], 0.5),
            0.0,
            epsilon = 1e-15
        );
        // max(0, 0.5-0.2) + max(0, 0.5-0.8) = 0.3
        assert_abs_diff_eq!(
            order_loss_from_logits(&[0.0, 0.2, 1.0], 0.5),
            0.3,
            epsilon = 1e-15
        );
        // strictly decreasing with gap g: every hinge active at eps+g
        let g = 0.7;
        let eps = 0.5;
        let z: Vec<f64> = (0..5).map(|i| -(i as f64) * g).collect();
        assert_abs_diff_eq!(
            order_loss_from_logits(&z, eps),
            4.0 * (eps + g),
            epsilon = 1e-12
        );
    }

    #[test]
    fn hinge_zero_iff_margins_met() {
        let eps = 0.5;
        // all gaps >= eps
        assert_eq!(order_loss_from_logits(&[0.0, 0.5, 1.0], eps), 0.0);
        // one gap below eps
        assert!(order_loss_from_logits(&[0.0, 0.49, 1.0], eps) > 0.0);
    }

    #[test]
    fn uniform_predictor_gives_ln_k() {
        // all-equal class features make every logit identical
        let model = DualEncoderModel::new(ModelConfig::default()).unwrap();
        let tok = ClassToken::derived("x", 32, 0);
        let labels: Vec<ClassToken> = (0..10)
            .map(|k| ClassToken::new(format!("c{k}"), tok.embedding.clone()))
            .collect();
        let batch = vec![LabeledSample {
            x: Array1::from_elem(32, 0.3),
            y: 7,
        }];
        let obj = Objective::functionality_only(labels);
        let prompts = PromptParams::zeros(&model.config);
        let terms = evaluate(&model, &prompts, &batch, &obj).unwrap();
        assert_abs_diff_eq!(terms.functionality, 10.0f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn functionality_matches_hand_recomputation() {
        let (model, labels, _, batch) = setup();
        let prompts = PromptParams::seeded(&model.config, 3, 0.2);
        let obj = Objective::functionality_only(labels.clone());
        let terms = evaluate(&model, &prompts, &batch, &obj).unwrap();
        // recompute from raw probability vectors
        let mut sum = 0.0;
        for s in &batch {
            let p = model.predict(&prompts, &s.x, &labels).unwrap();
            sum += -p.values[s.y].ln();
        }
        assert_abs_diff_eq!(terms.functionality, sum / batch.len() as f64, epsilon = 1e-10);
    }

    #[test]
    fn label_outside_class_set_errors() {
        let (model, labels, _, mut batch) = setup();
        batch[0].y = 99;
        let obj = Objective::functionality_only(labels);
        let prompts = PromptParams::zeros(&model.config);
        assert!(evaluate(&model, &prompts, &batch, &obj).is_err());
    }

    #[test]
    fn total_is_weighted_sum() {
        let (model, labels, verif, batch) = setup();
        let prompts = PromptParams::seeded(&model.config, 3, 0.2);
        let mut obj = Objective {
            label_classes: labels,
            verification_classes: verif,
            ce_weight: 1.0,
            order_weight: 1.0,
            retain_weight: 0.0,
            retain_reference: None,
            margin: 0.5,
        };
        let t1 = evaluate(&model, &prompts, &batch, &obj).unwrap();
        assert_abs_diff_eq!(t1.total, t1.functionality + t1.order, epsilon = 1e-12);
        obj.order_weight = 2.0;
        let t2 = evaluate(&model, &prompts, &batch, &obj).unwrap();
        assert_abs_diff_eq!(t2.total - t1.total, t1.order, epsilon = 1e-12);
        obj.order_weight = 0.0;
        let t0 = evaluate(&model, &prompts, &batch, &obj).unwrap();
        assert_abs_diff_eq!(t0.total, t0.functionality, epsilon = 1e-12);
    }

    #[test]
    fn finite_difference_on_quadratic() {
        let model = DualEncoderModel::new(ModelConfig::default()).unwrap();
        let prompts = PromptParams::seeded(&model.config, 1, 0.5);
        // loss = 0.5 * |V_f|^2 has gradient V_f
        let grads = finite_difference_gradient(
            |p| Ok(0.5 * p.visual.iter().map(|v| v * v).sum::<f64>()),
            &prompts,
            1e-4,
        )
        .unwrap();
        for (g, v) in grads.visual.iter().zip(prompts.visual.iter()) {
            assert_abs_diff_eq!(g, v, epsilon = 1e-6);
        }
        assert_eq!(grads.text, Array2::<f64>::zeros(prompts.text.raw_dim()));

        let constant = finite_difference_gradient(|_| Ok(1.0), &prompts, 1e-4).unwrap();
        assert_eq!(constant.max_abs(), 0.0);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let (model, labels, verif, batch) = setup();
        let mut max_rel = 0.0f64;
        for seed in 0..5 {
            let prompts = PromptParams::seeded(&model.config, seed, 0.3);
            let obj = Objective {
                label_classes: labels.clone(),
                verification_classes: verif.clone(),
                ce_weight: 1.0,
                order_weight: 1.0,
                retain_weight: 0.5,
                retain_reference: Some(PromptParams::seeded(&model.config, seed + 100, 0.2)),
                margin: 0.5,
            };
            let (_, analytic) = evaluate_with_grad(&model, &prompts, &batch, &obj).unwrap();
            let numeric = finite_difference_gradient(
                |p| evaluate(&model, p, &batch, &obj).map(|t| t.total),
                &prompts,
                1e-4,
            )
            .unwrap();
            let scale = numeric.max_abs().max(1e-8);
            for (a, n) in analytic
                .visual
                .iter()
                .chain(analytic.text.iter())
                .zip(numeric.visual.iter().chain(numeric.text.iter()))
            {
                max_rel = max_rel.max((a - n).abs() / scale);
            }
        }
        assert!(max_rel <= 1e-3, "max relative gradient error {max_rel}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (model, labels, verif, batch) = setup();
        let prompts = PromptParams::seeded(&model.config, 2, 0.3);
        let obj = Objective {
            label_classes: labels,
            verification_classes: verif,
            ce_weight: 1.0,
            order_weight: 1.0,
            retain_weight: 0.0,
            retain_reference: None,
            margin: 0.5,
        };
        let (_, _, input_grads) =
            evaluate_with_input_grad(&model, &prompts, &batch, &obj).unwrap();
        // check a handful of coordinates of the first sample numerically
        let step = 1e-5;
        for coord in [0usize, 7, 19, 31] {
            let mut plus = batch.clone();
            plus[0].x[coord] += step;
            let mut minus = batch.clone();
            minus[0].x[coord] -= step;
            let lp = evaluate(&model, &prompts, &plus, &obj).unwrap().total;
            let lm = evaluate(&model, &prompts, &minus, &obj).unwrap().total;
            let numeric = (lp - lm) / (2.0 * step);
            assert_abs_diff_eq!(input_grads[0][coord], numeric, epsilon = 1e-5);
        }
    }
}
