//! A small frozen dual-encoder with learnable soft prompts.
//!
//! Both towers share one frozen backbone (a seeded dense network with tanh
//! hidden layers), so a class token whose embedding sits near an image
//! cluster mean lands near that cluster in the shared feature space. The
//! only trainable state is [`PromptParams`]: a mean-pooled prompt vector
//! added to the raw input (visual tower) or to the token embedding (text
//! tower) before the frozen backbone runs.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Frozen-model hyperparameters. Identical config + seed gives
/// bit-identical frozen weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub prompt_len_visual: usize,
    pub prompt_len_text: usize,
    /// Softmax temperature of the zero-shot prediction formula.
    pub temperature: f64,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            feature_dim: 16,
            hidden_dims: vec![64],
            prompt_len_visual: 8,
            prompt_len_text: 8,
            temperature: 0.07,
            rng_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::InvalidConfig("feature_dim must be >= 2".into()));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("hidden dims must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// The only trainable parameters in the system.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams {
    /// [prompt_len_visual x input_dim]
    pub visual: Array2<f64>,
    /// [prompt_len_text x input_dim]
    pub text: Array2<f64>,
}

impl PromptParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            visual: Array2::zeros((config.prompt_len_visual, config.input_dim)),
            text: Array2::zeros((config.prompt_len_text, config.input_dim)),
        }
    }

    /// Small seeded Gaussian initialization.
    pub fn seeded(config: &ModelConfig, seed: u64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| {
                std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            })
        };
        Self {
            visual: draw(config.prompt_len_visual, config.input_dim),
            text: draw(config.prompt_len_text, config.input_dim),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.visual.iter().all(|v| v.is_finite()) && self.text.iter().all(|v| v.is_finite())
    }

}

/// Attention weights of a conditional prompt shift for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftCache {
    pub alpha: Vec<f64>,
    pub input: Array1<f64>,
}

/// Input-conditioned prompt shift `s(u) = sum_j alpha_j(u) P_j` with
/// `alpha = softmax(P u / sqrt(d))`. Each row acts as key and value at
/// once, so the learned shift can specialize to regions of input space
/// instead of applying one global offset. Zero prompts shift nothing.
pub fn conditional_shift(prompt: &Array2<f64>, u: &Array1<f64>) -> (Array1<f64>, ShiftCache) {
    let rows = prompt.nrows();
    if rows == 0 {
        return (
            Array1::zeros(u.len()),
            ShiftCache {
                alpha: Vec::new(),
                input: u.clone(),
            },
        );
    }
    let scale = (u.len() as f64).sqrt();
    let z: Vec<f64> = (0..rows).map(|j| prompt.row(j).dot(u) / scale).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let alpha: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let mut s = Array1::zeros(u.len());
    for (j, &a) in alpha.iter().enumerate() {
        s = s + &(&prompt.row(j).to_owned() * a);
    }
    (s, ShiftCache { alpha, input: u.clone() })
}

/// Backprop through the conditional shift. `g` is the loss gradient at
/// the encoder input `u + s(u)`. Returns the prompt gradient and the
/// total gradient w.r.t. `u` (identity path included).
pub fn conditional_shift_backward(
    prompt: &Array2<f64>,
    cache: &ShiftCache,
    g: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>) {
    let rows = prompt.nrows();
    let mut d_prompt = Array2::zeros(prompt.raw_dim());
    if rows == 0 {
        return (d_prompt, g.clone());
    }
    let scale = (cache.input.len() as f64).sqrt();
    let dots: Vec<f64> = (0..rows).map(|j| prompt.row(j).dot(g)).collect();
    let mean: f64 = cache
        .alpha
        .iter()
        .zip(&dots)
        .map(|(&a, &d)| a * d)
        .sum();
    let mut d_u = g.clone();
    for j in 0..rows {
        let dz = cache.alpha[j] * (dots[j] - mean);
        let mut row = d_prompt.row_mut(j);
        row.assign(&(&(g * cache.alpha[j]) + &(&cache.input * (dz / scale))));
        d_u = d_u + &(&prompt.row(j).to_owned() * (dz / scale));
    }
    (d_prompt, d_u)
}

/// A class token plus its embedding in input space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassToken {
    pub name: String,
    pub embedding: Array1<f64>,
}

impl ClassToken {
    pub fn new(name: impl Into<String>, embedding: Array1<f64>) -> Self {
        Self {
            name: name.into(),
            embedding,
        }
    }

    /// Token with a deterministically derived embedding (seeded from the
    /// token string), giving every tower zero-shot access to arbitrary
    /// out-of-distribution labels.
    pub fn derived(name: impl Into<String>, dim: usize, seed: u64) -> Self {
        let name = name.into();
        let embedding = derive_token_embedding(&name, dim, seed);
        Self { name, embedding }
    }
}

/// Perturbation scale for verification tokens around their shared anchor.
/// Small enough that the backbone maps the whole set to nearly identical
/// features; large enough that the per-name directions stay separable.
pub const VERIFICATION_TOKEN_SPREAD: f64 = 0.3;

/// Number of candidate anchors scored when placing a verification set.
const ANCHOR_CANDIDATES: usize = 16;

/// Verification-class tokens drawn as small perturbations of one
/// common anchor embedding. The backbone then maps them to nearly
/// identical features, so the embedded ordering only has to tilt tiny
/// differences instead of warping the whole feature map.
///
/// The anchor is chosen deterministically from a candidate family keyed
/// by the full name set (distinct claims occupy distinct regions),
/// picking the candidate whose backbone feature points furthest away
/// from the mean feature of `context` (the in-distribution class
/// tokens). Anti-aligned verification logits stay below the real class
/// logits, so the ordering can be embedded without the verification
/// tokens ever winning a classification.
pub fn verification_token_set(
    model: &DualEncoderModel,
    context: &[ClassToken],
    names: &[String],
    spread: f64,
) -> Vec<ClassToken> {
    let dim = model.config.input_dim;
    let seed = model.config.rng_seed;
    let feature = |emb: &Array1<f64>| {
        let v = model.encoder.forward(emb);
        let n = v.dot(&v).sqrt().max(1e-300);
        v / n
    };
    let mut cone = Array1::<f64>::zeros(model.config.feature_dim);
    for tok in context {
        cone = cone + feature(&tok.embedding);
    }
    let cone_norm = cone.dot(&cone).sqrt();

    let mut anchor = None;
    let mut best = f64::INFINITY;
    for c in 0..ANCHOR_CANDIDATES {
        let label = format!(
            "__verification_anchor__#{c}\u{1f}{}",
            names.join("\u{1f}")
        );
        let mut cand = derive_token_embedding(&label, dim, seed);
        let norm = cand.dot(&cand).sqrt();
        if norm > 0.0 {
            cand *= (dim as f64).sqrt() / norm;
        }
        let score = if cone_norm > 0.0 {
            feature(&cand).dot(&cone) / cone_norm
        } else {
            0.0
        };
        if score < best {
            best = score;
            anchor = Some(cand);
        }
    }
    let anchor = anchor.expect("at least one candidate");
    names
        .iter()
        .map(|n| {
            let d = derive_token_embedding(n, dim, seed);
            ClassToken {
                name: n.clone(),
                embedding: &anchor + &(&d * spread),
            }
        })
        .collect()
}

/// Deterministic Gaussian embedding for a token string.
pub fn derive_token_embedding(name: &str, dim: usize, seed: u64) -> Array1<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let token_seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(token_seed);
    Array1::from_shape_fn(dim, |_| {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    })
}

/// Ordered original classes plus ordered verification classes (the
/// watermark key).
#[derive(Debug, Clone)]
pub struct ClassVocabulary {
    pub original: Vec<ClassToken>,
    pub verification: Vec<ClassToken>,
}

impl ClassVocabulary {
    pub fn new(original: Vec<ClassToken>, verification: Vec<ClassToken>) -> Result<Self> {
        if original.len() < 2 {
            return Err(Error::InvalidConfig("need at least 2 original classes".into()));
        }
        if verification.len() < 2 {
            return Err(Error::InvalidConfig(
                "need at least 2 verification classes".into(),
            ));
        }
        let mut names = std::collections::HashSet::new();
        for t in original.iter().chain(verification.iter()) {
            if !names.insert(t.name.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate class token '{}'",
                    t.name
                )));
            }
        }
        Ok(Self {
            original,
            verification,
        })
    }

    pub fn get(&self, name: &str) -> Result<&ClassToken> {
        self.original
            .iter()
            .chain(self.verification.iter())
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownToken(name.to_string()))
    }

    pub fn num_original(&self) -> usize {
        self.original.len()
    }

    pub fn num_verification(&self) -> usize {
        self.verification.len()
    }

    /// Original classes followed by the verification classes, the class
    /// set used for every audit query.
    pub fn combined(&self) -> Vec<ClassToken> {
        self.original
            .iter()
            .chain(self.verification.iter())
            .cloned()
            .collect()
    }
}

/// Logits aligned with an ordered class list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitVector {
    pub values: Vec<f64>,
    pub class_ids: Vec<String>,
}

/// Softmax output aligned with an ordered class list. Entries lie in
/// (0, 1) and sum to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector {
    pub values: Vec<f64>,
    pub class_ids: Vec<String>,
}

impl ProbabilityVector {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Slice aligned to `names`, un-renormalized.
    pub fn slice(&self, names: &[String]) -> Result<Vec<f64>> {
        names
            .iter()
            .map(|n| {
                self.class_ids
                    .iter()
                    .position(|c| c == n)
                    .map(|i| self.values[i])
                    .ok_or_else(|| Error::UnknownToken(n.clone()))
            })
            .collect()
    }
}

/// Numerically stable softmax; order-preserving by construction.
pub fn predict_probabilities(logits: &LogitVector) -> Result<ProbabilityVector> {
    if logits.values.is_empty() {
        return Err(Error::Empty("logit vector".into()));
    }
    if logits.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "logits".into(),
        });
    }
    let max = logits.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.values.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbabilityVector {
        values: exps.iter().map(|e| e / sum).collect(),
        class_ids: logits.class_ids.clone(),
    })
}

/// One dense layer of the frozen backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// [out x in]
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// The frozen backbone shared by both towers: tanh hidden layers, linear
/// output, weights drawn once from a seeded Gaussian with std 1/sqrt(fan_in).
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub layers: Vec<DenseLayer>,
}

impl Encoder {
    pub fn seeded(dims: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = 1.0 / (fan_in as f64).sqrt();
            let weight = Array2::from_shape_fn((fan_out, fan_in), |_| {
                std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            });
            let bias = Array1::zeros(fan_out);
            layers.push(DenseLayer { weight, bias });
        }
        Self { layers }
    }

    /// Forward pass without caching.
    pub fn forward(&self, input: &Array1<f64>) -> Array1<f64> {
        let mut h = input.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.weight.dot(&h) + &layer.bias;
            if i != last {
                h.mapv_inplace(f64::tanh);
            }
        }
        h
    }

    /// Forward pass recording per-layer inputs and activations for
    /// reverse mode.
    pub fn forward_cached(&self, input: &Array1<f64>) -> (Array1<f64>, EncoderCache) {
        let mut h = input.clone();
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(h.clone());
            h = layer.weight.dot(&h) + &layer.bias;
            if i != last {
                h.mapv_inplace(f64::tanh);
            }
        }
        (h.clone(), EncoderCache { inputs, output: h })
    }

    /// Gradient of a scalar w.r.t. the encoder input, given its gradient
    /// w.r.t. the encoder output.
    pub fn backward(&self, cache: &EncoderCache, d_output: &Array1<f64>) -> Array1<f64> {
        let last = self.layers.len() - 1;
        let mut grad = d_output.clone();
        for i in (0..self.layers.len()).rev() {
            if i != last {
                // tanh output of layer i is stored as the input of layer i+1
                let act = &cache.inputs[i + 1];
                grad = &grad * &act.mapv(|a| 1.0 - a * a);
            }
            grad = self.layers[i].weight.t().dot(&grad);
        }
        grad
    }
}

/// Per-layer forward state needed by [`Encoder::backward`].
#[derive(Debug, Clone)]
pub struct EncoderCache {
    /// Input to each layer (post-activation of the previous layer).
    pub inputs: Vec<Array1<f64>>,
    pub output: Array1<f64>,
}

/// The frozen dual-encoder: one shared backbone serving both towers.
#[derive(Debug, Clone)]
pub struct DualEncoderModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
}

impl DualEncoderModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.input_dim];
        dims.extend_from_slice(&config.hidden_dims);
        dims.push(config.feature_dim);
        let encoder = Encoder::seeded(&dims, config.rng_seed);
        Ok(Self { config, encoder })
    }

    fn check_input(&self, x: &Array1<f64>) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "encoder input".into(),
            });
        }
        Ok(())
    }

    /// Unit-norm image feature f(V_f, x).
    pub fn encode_image(&self, prompts: &PromptParams, x: &Array1<f64>) -> Result<Array1<f64>> {
        self.check_input(x)?;
        let (s, _) = conditional_shift(&prompts.visual, x);
        Ok(normalize(self.encoder.forward(&(x + &s))))
    }

    /// Unit-norm class feature g(V_g, c).
    pub fn encode_class(&self, prompts: &PromptParams, token: &ClassToken) -> Result<Array1<f64>> {
        self.check_input(&token.embedding)?;
        let (s, _) = conditional_shift(&prompts.text, &token.embedding);
        Ok(normalize(self.encoder.forward(&(&token.embedding + &s))))
    }

    /// Cosine-similarity logits over an ordered class list, scaled by
    /// 1/temperature.
    pub fn similarity_logits(
        &self,
        prompts: &PromptParams,
        x: &Array1<f64>,
        classes: &[ClassToken],
    ) -> Result<LogitVector> {
        if classes.is_empty() {
            return Err(Error::Empty("class list".into()));
        }
        let f = self.encode_image(prompts, x)?;
        let mut values = Vec::with_capacity(classes.len());
        let mut class_ids = Vec::with_capacity(classes.len());
        for token in classes {
            let g = self.encode_class(prompts, token)?;
            values.push(f.dot(&g) / self.config.temperature);
            class_ids.push(token.name.clone());
        }
        Ok(LogitVector { values, class_ids })
    }

    /// Zero-shot prediction over an ordered class list.
    pub fn predict(
        &self,
        prompts: &PromptParams,
        x: &Array1<f64>,
        classes: &[ClassToken],
    ) -> Result<ProbabilityVector> {
        predict_probabilities(&self.similarity_logits(prompts, x, classes)?)
    }
}

pub(crate) fn normalize(v: Array1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    if norm < 1e-300 {
        v
    } else {
        v / norm
    }
}
