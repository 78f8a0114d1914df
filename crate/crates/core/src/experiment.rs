//! End-to-end scenario orchestration: generate data, embed watermarks,
//! audit three suspicious-model variants, run the attack suite, and
//! persist every artifact under one output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{self, AttackMetrics, AttackResult, PgdConfig, PgdObjective};
use crate::checkpoint::save_checkpoint;
use crate::data::{
    generate_dataset, sample_few_shot, split_base_novel, DatasetSpec, LabeledSample, SplitSpec,
};
use crate::error::{Error, Result};
use crate::loss::Objective;
use crate::metrics;
use crate::model::{ClassToken, ClassVocabulary, DualEncoderModel, ModelConfig, PromptParams};
use crate::plot::{LinePlot, Series};
use crate::rank::{rank_permutation, PermutationRecord};
use crate::verify::{self, ModelOracle};
use crate::watermark::{self, BwapConfig, SwapConfig};

/// Audit-protocol parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationParams {
    /// Number of audit samples.
    pub m: usize,
    pub tau_thr: f64,
    pub alpha: f64,
    /// Audit repetitions whose p-values are arithmetically averaged.
    pub repeats: usize,
}

impl Default for VerificationParams {
    fn default() -> Self {
        Self {
            m: 100,
            tau_thr: 0.5,
            alpha: 0.01,
            repeats: 3,
        }
    }
}

/// One attack job in the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    Finetune { epochs: usize },
    Prune { fraction: f64 },
    Pgd,
    Adaptive,
    Overwrite { epochs: usize },
    Unlearn { lambda: f64, epochs: usize },
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Finetune { .. } => "finetune",
            AttackSpec::Prune { .. } => "prune",
            AttackSpec::Pgd => "pgd",
            AttackSpec::Adaptive => "adaptive",
            AttackSpec::Overwrite { .. } => "overwrite",
            AttackSpec::Unlearn { .. } => "unlearn",
        }
    }
}

/// Full scenario configuration. The master seed fixes every stochastic
/// choice downstream; stage-specific seeds are derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub swap: SwapConfig,
    /// Fraction of classes assigned to the base split.
    pub base_fraction: f64,
    /// Few-shot training samples per base class.
    pub shots: usize,
    pub verification: VerificationParams,
    pub attacks: Vec<AttackSpec>,
    pub output_dir: PathBuf,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            swap: SwapConfig::default(),
            base_fraction: 0.5,
            shots: 16,
            verification: VerificationParams::default(),
            attacks: vec![
                AttackSpec::Finetune { epochs: 5 },
                AttackSpec::Prune { fraction: 0.5 },
                AttackSpec::Pgd,
                AttackSpec::Adaptive,
                AttackSpec::Overwrite { epochs: 200 },
                AttackSpec::Unlearn {
                    lambda: 1.0,
                    epochs: 5,
                },
            ],
            output_dir: PathBuf::from("results"),
            master_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.swap.validate()?;
        if !(self.base_fraction > 0.0 && self.base_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "base_fraction must lie strictly between 0 and 1".into(),
            ));
        }
        if self.shots == 0 {
            return Err(Error::InvalidConfig("shots must be positive".into()));
        }
        if self.verification.m < 2 {
            return Err(Error::InvalidConfig("verification m must be >= 2".into()));
        }
        if self.verification.repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be positive".into()));
        }
        if !(self.verification.alpha > 0.0 && self.verification.alpha < 1.0) {
            return Err(Error::InvalidConfig("alpha must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// Deterministic per-stage seed derived from the master seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Compressed view of one audit, kept in the result record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    /// Arithmetic mean of the repeated audits' p-values.
    pub p_value: f64,
    pub underflow: bool,
    pub verdict: bool,
    pub wsr: f64,
    pub mean_distance: f64,
}

/// The scenario's full output. Reproducible from (config, master seed)
/// up to the wall-clock field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub config: ExperimentConfig,
    pub split: SplitSpec,
    pub acc_base: f64,
    pub acc_novel: f64,
    pub harmonic_mean: f64,
    /// Accuracy of the order-weight-zero control run.
    pub baseline_acc_base: f64,
    pub baseline_acc_novel: f64,
    pub watermarked_audit: AuditSummary,
    pub independent_prompt_audit: AuditSummary,
    pub independent_classes_audit: AuditSummary,
    pub harmless_swap: f64,
    pub harmless_bwap: f64,
    pub bwap_p_value: f64,
    pub bwap_verdict: bool,
    pub attacks: Vec<AttackResult>,
    pub sweeps: Vec<LinePlot>,
    pub wall_clock_seconds: f64,
}

impl ResultRecord {
    /// Copy with the timing field cleared, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    })
}

struct Scenario<'a> {
    config: &'a ExperimentConfig,
    model: DualEncoderModel,
    /// Base-class tokens plus the verification tokens: the softmax the
    /// owner trains against.
    vocab: ClassVocabulary,
    /// Every class token (base and novel) plus the verification tokens,
    /// so oracles can resolve any candidate list at query time.
    oracle_vocab: ClassVocabulary,
    /// Base-class names followed by the verification names; candidates
    /// for base-side evaluation.
    combined_names: Vec<String>,
    /// Novel-class names followed by the verification names; candidates
    /// for zero-shot novel-side evaluation.
    novel_candidates: Vec<String>,
    original_names: Vec<String>,
    novel_names: Vec<String>,
    verification_names: Vec<String>,
    verification_tokens: Vec<ClassToken>,
    reference: PermutationRecord,
    base: Vec<LabeledSample>,
    novel: Vec<LabeledSample>,
    train: Vec<LabeledSample>,
    audit_samples: Vec<LabeledSample>,
}

impl Scenario<'_> {
    fn averaged_audit(&self, prompts: &PromptParams, verif_names: &[String]) -> Result<AuditSummary> {
        self.averaged_audit_on(&self.model, prompts, verif_names)
    }

    /// Audit against an arbitrary suspect model (e.g. a pruned backbone).
    fn averaged_audit_on(
        &self,
        model: &DualEncoderModel,
        prompts: &PromptParams,
        verif_names: &[String],
    ) -> Result<AuditSummary> {
        let oracle = ModelOracle {
            model,
            prompts,
            vocab: &self.oracle_vocab,
        };
        let xs: Vec<_> = self.audit_samples.iter().map(|s| s.x.clone()).collect();
        let v = &self.config.verification;
        let mut p_sum = 0.0;
        let mut underflow = false;
        let mut last = None;
        for _ in 0..v.repeats {
            let report = verify::swap_verify(
                &oracle,
                &xs,
                &self.original_names,
                verif_names,
                &self.reference,
                v.tau_thr,
                v.alpha,
            )?;
            p_sum += report.p_value;
            underflow |= report.underflow;
            last = Some(report);
        }
        let report = last.expect("repeats >= 1");
        let p_value = p_sum / v.repeats as f64;
        let wsr = verify::wsr(&oracle, &xs, &self.original_names, verif_names, &self.reference)?;
        Ok(AuditSummary {
            p_value,
            underflow,
            verdict: p_value <= v.alpha,
            wsr,
            mean_distance: report.mean_distance,
        })
    }

    fn snapshot(&self, prompts: &PromptParams) -> Result<AttackMetrics> {
        self.snapshot_on(&self.model, prompts)
    }

    fn snapshot_on(&self, model: &DualEncoderModel, prompts: &PromptParams) -> Result<AttackMetrics> {
        let oracle = ModelOracle {
            model,
            prompts,
            vocab: &self.oracle_vocab,
        };
        let audit = self.averaged_audit_on(model, prompts, &self.verification_names)?;
        Ok(AttackMetrics {
            wsr: audit.wsr,
            acc_base: metrics::acc(&oracle, &self.base, &self.combined_names)?,
            acc_novel: metrics::acc(&oracle, &self.novel, &self.novel_candidates)?,
            p_value: audit.p_value,
        })
    }

    fn sequence_asr(&self, prompts: &PromptParams, samples: &[LabeledSample]) -> Result<f64> {
        let oracle = ModelOracle {
            model: &self.model,
            prompts,
            vocab: &self.oracle_vocab,
        };
        let adversary_names: Vec<String> = adversary_classes(self.verification_names.len());
        attack::asr(samples, |s| {
            let seq =
                verify::extract_sequence(&oracle, &s.x, &self.original_names, &adversary_names)?;
            Ok(rank_permutation(&seq)? == PermutationRecord::identity(adversary_names.len()))
        })
    }
}

/// The adversary's own verification-class names, disjoint from the
/// defender's by construction.
fn adversary_classes(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("Miqi {i}")).collect()
}

/// Run the full scenario: generate, split, embed, audit the watermarked
/// model plus two independence controls, attack, re-audit, persist. On a
/// stage failure a partial record naming the stage is written before the
/// error propagates.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultRecord> {
    config.validate()?;
    let start = Instant::now();
    match run_inner(config) {
        Ok(mut record) => {
            record.wall_clock_seconds = start.elapsed().as_secs_f64();
            record.write_json(&config.output_dir.join("result.json"))?;
            Ok(record)
        }
        Err(err) => {
            if let Error::Stage { stage, source } = &err {
                let partial = serde_json::json!({
                    "failure_stage": stage,
                    "error": source.to_string(),
                    "config": config,
                });
                // best effort: the failure may be the directory itself
                let _ = std::fs::write(
                    config.output_dir.join("partial.json"),
                    serde_json::to_string_pretty(&partial)?,
                );
            }
            Err(err)
        }
    }
}

fn run_inner(config: &ExperimentConfig) -> Result<ResultRecord> {
    let out = &config.output_dir;
    stage("setup", prepare_dirs(out))?;
    std::fs::write(
        out.join("config.echo"),
        serde_json::to_string_pretty(config)?,
    )?;
    let master = config.master_seed;

    // generate: dataset, model, vocabulary tied to the cluster means
    let dataset_spec = DatasetSpec {
        seed: derive_seed(master, "data"),
        ..config.dataset.clone()
    };
    let model_config = ModelConfig {
        rng_seed: derive_seed(master, "model"),
        ..config.model.clone()
    };
    let (model, class_tokens, verification_tokens, data) =
        stage("generate", build_world(&dataset_spec, &model_config, config))?;

    // split + few-shot training pools; labels are remapped to index each
    // side's own token list (novel classes are evaluated zero-shot)
    let (base_global, novel_global, split) = stage(
        "split",
        split_base_novel(&data, config.base_fraction, derive_seed(master, "split")),
    )?;
    let base = remap_labels(&base_global, &split.base_classes);
    let novel = remap_labels(&novel_global, &split.novel_classes);
    let train = stage(
        "few-shot",
        sample_few_shot(&base, config.shots, derive_seed(master, "shots")),
    )?;
    let independent_train = stage(
        "few-shot",
        sample_few_shot(&base, config.shots, derive_seed(master, "shots-independent")),
    )?;
    let audit_samples = stage(
        "audit-samples",
        pick_audit_samples(&novel, config.verification.m, derive_seed(master, "audit")),
    )?;

    let pick = |ids: &[usize]| -> Vec<ClassToken> {
        ids.iter().map(|&k| class_tokens[k].clone()).collect()
    };
    let vocab = stage(
        "generate",
        ClassVocabulary::new(pick(&split.base_classes), verification_tokens.clone()),
    )?;
    // the oracle vocabulary also carries the backdoor target token,
    // constructed exactly as the backdoor embedder will construct it, so
    // audits query the same embedding that was trained against
    let bwap_target = crate::model::verification_token_set(
        &model,
        &vocab.original,
        std::slice::from_ref(&BwapConfig::default_for(model_config.input_dim).target_class),
        crate::model::VERIFICATION_TOKEN_SPREAD,
    );
    // likewise the false-claim adversary's verification tokens: the
    // attack crafts inputs against this exact set, and the audit that
    // scores it must resolve the same names to the same embeddings
    let adversary_tokens = crate::model::verification_token_set(
        &model,
        &vocab.original,
        &adversary_classes(config.swap.verification_classes.len()),
        crate::model::VERIFICATION_TOKEN_SPREAD,
    );
    let mut oracle_tokens = class_tokens.clone();
    oracle_tokens.extend(bwap_target);
    oracle_tokens.extend(adversary_tokens);
    let oracle_vocab = stage(
        "generate",
        ClassVocabulary::new(oracle_tokens, verification_tokens.clone()),
    )?;
    let original_names: Vec<String> = vocab.original.iter().map(|t| t.name.clone()).collect();
    let novel_names: Vec<String> = split
        .novel_classes
        .iter()
        .map(|&k| class_tokens[k].name.clone())
        .collect();
    let verification_names = config.swap.verification_classes.clone();
    let combined_names: Vec<String> = original_names
        .iter()
        .chain(verification_names.iter())
        .cloned()
        .collect();
    let novel_candidates: Vec<String> = novel_names
        .iter()
        .chain(verification_names.iter())
        .cloned()
        .collect();
    let scenario = Scenario {
        config,
        model,
        vocab,
        oracle_vocab,
        combined_names,
        novel_candidates,
        original_names,
        novel_names,
        verification_names,
        verification_tokens,
        reference: PermutationRecord::identity(config.swap.verification_classes.len()),
        base,
        novel,
        train,
        audit_samples,
    };
    let model = &scenario.model;
    let vocab = &scenario.vocab;

    // embed: watermarked prompts, order-weight-zero control, independent
    // prompts from a disjoint few-shot draw
    let swap_config = SwapConfig {
        seed: derive_seed(master, "embed"),
        ..config.swap.clone()
    };
    let zeros = PromptParams::zeros(&model.config);
    let (watermarked, embed_log) = stage(
        "embed",
        watermark::embed_swap(model, &zeros, &scenario.train, vocab, &swap_config),
    )?;
    embed_log.write_jsonl(&out.join("checkpoints/embed_log.jsonl"))?;
    let baseline = stage(
        "embed",
        train_plain(model, vocab, &scenario.train, &swap_config, derive_seed(master, "baseline")),
    )?;
    let independent = stage(
        "embed",
        train_plain(
            model,
            vocab,
            &independent_train,
            &swap_config,
            derive_seed(master, "independent"),
        ),
    )?;
    for (name, prompts) in [
        ("watermarked", &watermarked),
        ("baseline", &baseline),
        ("independent", &independent),
    ] {
        save_checkpoint(model, prompts, &out.join(format!("checkpoints/{name}.ckpt")))?;
    }

    // audits: the watermarked model and two independence controls
    let watermarked_audit = stage(
        "audit",
        scenario.averaged_audit(&watermarked, &scenario.verification_names),
    )?;
    let independent_prompt_audit = stage(
        "audit",
        scenario.averaged_audit(&independent, &scenario.verification_names),
    )?;
    let independent_classes_audit = stage(
        "audit",
        scenario.averaged_audit(&watermarked, &adversary_classes(scenario.verification_names.len())),
    )?;
    write_audit(out, "watermarked", &watermarked_audit, config)?;
    write_audit(out, "independent_prompt", &independent_prompt_audit, config)?;
    write_audit(out, "independent_classes", &independent_classes_audit, config)?;

    // accuracy of the watermarked model vs the order-weight-zero control
    let wm_oracle = ModelOracle {
        model,
        prompts: &watermarked,
        vocab: &scenario.oracle_vocab,
    };
    let ind_oracle = ModelOracle {
        model,
        prompts: &independent,
        vocab: &scenario.oracle_vocab,
    };
    let acc_base = stage(
        "metrics",
        metrics::acc(&wm_oracle, &scenario.base, &scenario.combined_names),
    )?;
    let acc_novel = stage(
        "metrics",
        metrics::acc(&wm_oracle, &scenario.novel, &scenario.novel_candidates),
    )?;
    let baseline_oracle = ModelOracle {
        model,
        prompts: &baseline,
        vocab: &scenario.oracle_vocab,
    };
    let baseline_acc_base = metrics::acc(&baseline_oracle, &scenario.base, &scenario.combined_names)?;
    let baseline_acc_novel =
        metrics::acc(&baseline_oracle, &scenario.novel, &scenario.novel_candidates)?;
    let harmonic_mean = stage("metrics", metrics::harmonic_mean(acc_base, acc_novel))?;
    let harmless_swap = stage(
        "metrics",
        metrics::harmless_degree(
            &wm_oracle,
            &ind_oracle,
            &scenario.audit_samples,
            &scenario.novel_candidates,
        ),
    )?;

    // backdoor baseline: embed, paired audit, harmlessness on triggered
    // samples
    let bwap_config = BwapConfig {
        seed: derive_seed(master, "bwap"),
        ..BwapConfig::default_for(model.config.input_dim)
    };
    let (bwap_prompts, _) = stage(
        "bwap",
        watermark::embed_bwap(model, &zeros, &scenario.train, vocab, &bwap_config),
    )?;
    save_checkpoint(model, &bwap_prompts, &out.join("checkpoints/bwap.ckpt"))?;
    let bwap_oracle = ModelOracle {
        model,
        prompts: &bwap_prompts,
        vocab: &scenario.oracle_vocab,
    };
    let benign_xs: Vec<_> = scenario.audit_samples.iter().map(|s| s.x.clone()).collect();
    let triggered: Vec<LabeledSample> = scenario
        .audit_samples
        .iter()
        .map(|s| {
            Ok(LabeledSample {
                x: watermark::apply_trigger(&s.x, &bwap_config)?,
                y: s.y,
            })
        })
        .collect::<Result<_>>()?;
    let triggered_xs: Vec<_> = triggered.iter().map(|s| s.x.clone()).collect();
    let bwap_report = stage(
        "bwap",
        verify::bwap_verify(
            &bwap_oracle,
            &benign_xs,
            &triggered_xs,
            &scenario.novel_names,
            &bwap_config.target_class,
            config.verification.tau_thr,
            config.verification.alpha,
        ),
    )?;
    bwap_report.write_json(&out.join("audits/bwap.json"))?;
    let mut bwap_classes = scenario.novel_names.clone();
    bwap_classes.push(bwap_config.target_class.clone());
    let harmless_bwap = stage(
        "bwap",
        metrics::harmless_degree(&bwap_oracle, &ind_oracle, &triggered, &bwap_classes),
    )?;

    // attacks and re-audits
    let mut attacks = Vec::new();
    let mut sweeps = Vec::new();
    for spec in &config.attacks {
        let result = stage(
            spec.name(),
            run_attack(&scenario, &watermarked, &independent, spec, &mut sweeps),
        )?;
        std::fs::write(
            out.join(format!("attacks/{}.json", spec.name())),
            serde_json::to_string_pretty(&result)?,
        )?;
        attacks.push(result);
    }

    Ok(ResultRecord {
        config: config.clone(),
        split,
        acc_base,
        acc_novel,
        harmonic_mean,
        baseline_acc_base,
        baseline_acc_novel,
        watermarked_audit,
        independent_prompt_audit,
        independent_classes_audit,
        harmless_swap,
        harmless_bwap,
        bwap_p_value: bwap_report.p_value,
        bwap_verdict: bwap_report.verdict,
        attacks,
        sweeps,
        wall_clock_seconds: 0.0,
    })
}

fn prepare_dirs(out: &Path) -> Result<()> {
    for sub in ["", "checkpoints", "audits", "attacks", "plots"] {
        std::fs::create_dir_all(out.join(sub))?;
    }
    Ok(())
}

fn build_world(
    dataset_spec: &DatasetSpec,
    model_config: &ModelConfig,
    config: &ExperimentConfig,
) -> Result<(DualEncoderModel, Vec<ClassToken>, Vec<ClassToken>, Vec<LabeledSample>)> {
    if dataset_spec.input_dim != model_config.input_dim {
        return Err(Error::InvalidConfig(format!(
            "dataset input_dim {} does not match model input_dim {}",
            dataset_spec.input_dim, model_config.input_dim
        )));
    }
    let model = DualEncoderModel::new(model_config.clone())?;
    let data = generate_dataset(dataset_spec)?;
    // class tokens sit on the cluster means, giving the frozen shared
    // backbone zero-shot alignment before any prompt tuning
    let class_tokens: Vec<ClassToken> = crate::data::class_means(dataset_spec)?
        .into_iter()
        .enumerate()
        .map(|(k, m)| ClassToken::new(format!("class {k}"), m))
        .collect();
    let verification = crate::model::verification_token_set(
        &model,
        &class_tokens,
        &config.swap.verification_classes,
        crate::model::VERIFICATION_TOKEN_SPREAD,
    );
    Ok((model, class_tokens, verification, data))
}

/// Relabel each sample to the index of its class within `classes`.
fn remap_labels(samples: &[LabeledSample], classes: &[usize]) -> Vec<LabeledSample> {
    samples
        .iter()
        .map(|s| LabeledSample {
            x: s.x.clone(),
            y: classes.iter().position(|&c| c == s.y).expect("split covers labels"),
        })
        .collect()
}

fn pick_audit_samples(
    novel: &[LabeledSample],
    m: usize,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    if novel.len() < m {
        return Err(Error::InvalidConfig(format!(
            "audit needs {m} novel samples, only {} available",
            novel.len()
        )));
    }
    let mut indices: Vec<usize> = (0..novel.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    Ok(indices[..m].iter().map(|&i| novel[i].clone()).collect())
}

/// Cross-entropy-only prompt tuning with the SWAP schedule; the control
/// and independence baselines.
fn train_plain(
    model: &DualEncoderModel,
    vocab: &ClassVocabulary,
    train: &[LabeledSample],
    swap: &SwapConfig,
    seed: u64,
) -> Result<PromptParams> {
    let objective = Objective::functionality_only(vocab.original.clone());
    watermark::descend(
        model,
        &PromptParams::zeros(&model.config),
        train,
        &objective,
        swap.epochs,
        swap.learning_rate,
        swap.batch_size,
        swap.augment_std,
        seed,
        |_, _| Ok(()),
    )
}

fn write_audit(
    out: &Path,
    name: &str,
    summary: &AuditSummary,
    config: &ExperimentConfig,
) -> Result<()> {
    let record = serde_json::json!({
        "audit": name,
        "summary": summary,
        "params": config.verification,
        "seed": config.master_seed,
    });
    std::fs::write(
        out.join(format!("audits/{name}.json")),
        serde_json::to_string_pretty(&record)?,
    )?;
    Ok(())
}

fn run_attack(
    scenario: &Scenario<'_>,
    watermarked: &PromptParams,
    independent: &PromptParams,
    spec: &AttackSpec,
    sweeps: &mut Vec<LinePlot>,
) -> Result<AttackResult> {
    let config = scenario.config;
    let model = &scenario.model;
    let vocab = &scenario.vocab;
    let seed = derive_seed(config.master_seed, &format!("attack-{}", spec.name()));
    let pre = scenario.snapshot(watermarked)?;
    let out_dir = &config.output_dir;

    match spec {
        AttackSpec::Finetune { epochs } => {
            // instrument per-epoch retention for the sweep
            let objective = Objective::functionality_only(vocab.original.clone());
            let mut xs = vec![0.0];
            let mut wsr_curve = vec![pre.wsr];
            let mut acc_curve = vec![pre.acc_novel];
            let attacked = watermark::descend(
                model,
                watermarked,
                &scenario.train,
                &objective,
                *epochs,
                config.swap.learning_rate,
                config.swap.batch_size,
                0.0,
                seed,
                |epoch, prompts| {
                    let oracle = ModelOracle {
                        model,
                        prompts,
                        vocab: &scenario.oracle_vocab,
                    };
                    xs.push((epoch + 1) as f64);
                    wsr_curve.push(watermark::sequence_match_rate(
                        model,
                        prompts,
                        &scenario.audit_samples,
                        &scenario.verification_tokens,
                    )?);
                    acc_curve.push(metrics::acc(
                        &oracle,
                        &scenario.novel,
                        &scenario.novel_candidates,
                    )?);
                    Ok(())
                },
            )?;
            sweeps.push(LinePlot {
                title: "fine-tuning retention".into(),
                x_label: "epoch".into(),
                y_label: "rate".into(),
                x: xs,
                series: vec![
                    Series {
                        label: "wsr".into(),
                        y: wsr_curve,
                    },
                    Series {
                        label: "acc novel".into(),
                        y: acc_curve,
                    },
                ],
            });
            save_checkpoint(model, &attacked, &out_dir.join("checkpoints/attack-finetune.ckpt"))?;
            Ok(AttackResult {
                attack: spec.name().into(),
                parameters: serde_json::json!({ "epochs": epochs, "learning_rate": config.swap.learning_rate }),
                seed,
                pre,
                post: scenario.snapshot(&attacked)?,
                reference_asr: Vec::new(),
                victim_asr: None,
            })
        }
        AttackSpec::Prune { fraction } => {
            let mut xs = Vec::new();
            let mut wsr_curve = Vec::new();
            let mut acc_curve = Vec::new();
            for step in 0..10 {
                let f = step as f64 / 10.0;
                let (pruned_model, pruned) = attack::prune_attack(model, watermarked, f)?;
                let oracle = ModelOracle {
                    model: &pruned_model,
                    prompts: &pruned,
                    vocab: &scenario.oracle_vocab,
                };
                xs.push(f);
                wsr_curve.push(watermark::sequence_match_rate(
                    &pruned_model,
                    &pruned,
                    &scenario.audit_samples,
                    &scenario.verification_tokens,
                )?);
                acc_curve.push(metrics::acc(&oracle, &scenario.novel, &scenario.novel_candidates)?);
            }
            sweeps.push(LinePlot {
                title: "pruning sweep".into(),
                x_label: "pruned fraction".into(),
                y_label: "rate".into(),
                x: xs,
                series: vec![
                    Series {
                        label: "wsr".into(),
                        y: wsr_curve,
                    },
                    Series {
                        label: "acc novel".into(),
                        y: acc_curve,
                    },
                ],
            });
            let (attacked_model, attacked) = attack::prune_attack(model, watermarked, *fraction)?;
            save_checkpoint(&attacked_model, &attacked, &out_dir.join("checkpoints/attack-prune.ckpt"))?;
            Ok(AttackResult {
                attack: spec.name().into(),
                parameters: serde_json::json!({ "fraction": fraction }),
                seed,
                pre,
                post: scenario.snapshot_on(&attacked_model, &attacked)?,
                reference_asr: Vec::new(),
                victim_asr: None,
            })
        }
        AttackSpec::Pgd => {
            // order-loss descent against the promptless backbone as the
            // adversary's white-box reference
            let reference = PromptParams::zeros(&model.config);
            let adversary_tokens = crate::model::verification_token_set(
                model,
                &vocab.original,
                &adversary_classes(scenario.verification_names.len()),
                crate::model::VERIFICATION_TOKEN_SPREAD,
            );
            let pgd = PgdConfig::default();
            let crafted = attack::pgd_false_claim(
                model,
                &reference,
                &scenario.audit_samples,
                &PgdObjective::ImprintSequence {
                    verification: adversary_tokens,
                    margin: config.swap.epsilon,
                },
                &pgd,
            )?;
            let reference_asr = scenario.sequence_asr(&reference, &crafted)?;
            let victim_asr = scenario.sequence_asr(watermarked, &crafted)?;
            Ok(AttackResult {
                attack: spec.name().into(),
                parameters: serde_json::to_value(pgd)?,
                seed,
                pre,
                post: pre,
                reference_asr: vec![reference_asr],
                victim_asr: Some(victim_asr),
            })
        }
        AttackSpec::Adaptive => {
            // two independently tuned references, joint CE + order descent
            let ref_a = train_plain(
                model,
                vocab,
                &scenario.train,
                &config.swap,
                derive_seed(config.master_seed, "adaptive-ref-a"),
            )?;
            let ref_b = train_plain(
                model,
                vocab,
                &scenario.train,
                &config.swap,
                derive_seed(config.master_seed, "adaptive-ref-b"),
            )?;
            let adversary_tokens = crate::model::verification_token_set(
                model,
                &vocab.original,
                &adversary_classes(scenario.verification_names.len()),
                crate::model::VERIFICATION_TOKEN_SPREAD,
            );
            let pgd = PgdConfig::default();
            let crafted = attack::adaptive_false_claim(
                model,
                &ref_a,
                &ref_b,
                &scenario.audit_samples,
                &vocab.original,
                &adversary_tokens,
                config.swap.lambda,
                config.swap.epsilon,
                &pgd,
            )?;
            let asr_a = scenario.sequence_asr(&ref_a, &crafted)?;
            let asr_b = scenario.sequence_asr(&ref_b, &crafted)?;
            let victim_asr = scenario.sequence_asr(independent, &crafted)?;
            Ok(AttackResult {
                attack: spec.name().into(),
                parameters: serde_json::to_value(pgd)?,
                seed,
                pre,
                post: pre,
                reference_asr: vec![asr_a, asr_b],
                victim_asr: Some(victim_asr),
            })
        }
        AttackSpec::Overwrite { epochs } => {
            let new_t = adversary_classes(scenario.verification_names.len());
            let overwrite_config = SwapConfig {
                verification_classes: new_t.clone(),
                epochs: *epochs,
                seed,
                ..config.swap.clone()
            };
            let (attacked, _) = attack::overwrite_attack(
                model,
                watermarked,
                &scenario.train,
                vocab,
                &scenario.verification_names,
                &overwrite_config,
            )?;
            save_checkpoint(model, &attacked, &out_dir.join("checkpoints/attack-overwrite.ckpt"))?;
            let new_tokens = crate::model::verification_token_set(
                model,
                &vocab.original,
                &new_t,
                crate::model::VERIFICATION_TOKEN_SPREAD,
            );
            let new_wsr = watermark::sequence_match_rate(
                model,
                &attacked,
                &scenario.audit_samples,
                &new_tokens,
            )?;
            Ok(AttackResult {
                attack: spec.name().into(),
                parameters: serde_json::json!({ "epochs": epochs, "new_classes": new_t, "new_wsr": new_wsr }),
                seed,
                pre,
                post: scenario.snapshot(&attacked)?,
                reference_asr: Vec::new(),
                victim_asr: None,
            })
        }
        AttackSpec::Unlearn { lambda, epochs } => {
            let attacked = attack::unlearn_attack(
                model,
                watermarked,
                &scenario.train,
                vocab,
                &scenario.verification_names,
                *lambda,
                config.swap.epsilon,
                *epochs,
                config.swap.learning_rate,
                config.swap.batch_size,
                seed,
            )?;
            save_checkpoint(model, &attacked, &out_dir.join("checkpoints/attack-unlearn.ckpt"))?;
            Ok(AttackResult {
                attack: spec.name().into(),
                parameters: serde_json::json!({ "lambda": lambda, "epochs": epochs }),
                seed,
                pre,
                post: scenario.snapshot(&attacked)?,
                reference_asr: Vec::new(),
                victim_asr: None,
            })
        }
    }
}

/// Write every sweep of every record as an SVG plus its columnar data
/// file. Returns the SVG paths.
pub fn emit_plots(records: &[ResultRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Empty("result record set".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (i, record) in records.iter().enumerate() {
        for sweep in &record.sweeps {
            let slug: String = sweep
                .title
                .chars()
                .map(|c| if c.is_alphanumeric() { c } else { '-' })
                .collect();
            paths.push(sweep.write(dir, &format!("{i:02}-{slug}"))?);
        }
    }
    Ok(paths)
}
