//! Black-box ownership auditing: sequence extraction, the rank-distance
//! hypothesis test, the paired backdoor test, the executable rejection
//! bound, and Monte Carlo validation of its distance model.

use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassVocabulary, DualEncoderModel, ProbabilityVector, PromptParams};
use crate::rank::{rank_distance, rank_permutation, PermutationRecord};
use crate::stats::{one_sample_t_test, t_quantile, Tail};
use crate::watermark::resolve_tokens;

/// The only access an auditor has to a suspicious model: probability
/// vectors for (sample, ordered class list) queries. Responses must be
/// deterministic.
pub trait SuspiciousOracle {
    fn query(&self, x: &Array1<f64>, classes: &[String]) -> Result<ProbabilityVector>;
}

/// Oracle backed by a local model + prompt pair. Unknown tokens resolve
/// zero-shot through derived embeddings, like any caller-supplied label.
pub struct ModelOracle<'a> {
    pub model: &'a DualEncoderModel,
    pub prompts: &'a PromptParams,
    pub vocab: &'a ClassVocabulary,
}

impl SuspiciousOracle for ModelOracle<'_> {
    fn query(&self, x: &Array1<f64>, classes: &[String]) -> Result<ProbabilityVector> {
        let tokens = resolve_tokens(self.model, self.vocab, classes);
        self.model.predict(self.prompts, x, &tokens)
    }
}

fn check_response(p: &ProbabilityVector, expected: &[String]) -> Result<()> {
    if p.class_ids != expected {
        return Err(Error::Protocol(
            "oracle response is not aligned with the queried class list".into(),
        ));
    }
    if p.values.iter().any(|&v| !(v > 0.0 && v < 1.0 + 1e-9)) {
        return Err(Error::Protocol("oracle returned out-of-range probabilities".into()));
    }
    let sum: f64 = p.values.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Protocol(format!(
            "oracle probabilities sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Query the oracle over (original classes ++ verification classes) and
/// return the un-renormalized slice aligned to the verification classes.
pub fn extract_sequence(
    oracle: &dyn SuspiciousOracle,
    x: &Array1<f64>,
    original_classes: &[String],
    verification_classes: &[String],
) -> Result<Vec<f64>> {
    let mut query: Vec<String> = original_classes.to_vec();
    query.extend_from_slice(verification_classes);
    let response = oracle.query(x, &query)?;
    check_response(&response, &query)?;
    Ok(response.values[original_classes.len()..].to_vec())
}

/// Audit parameters echoed into every report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditParams {
    pub m: usize,
    pub n: usize,
    pub tau_thr: f64,
    pub alpha: f64,
}

/// Outcome of one ownership audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// Per-sample rank distances (sequential test) or paired probability
    /// gaps (backdoor test).
    pub distances: Vec<f64>,
    pub mean_distance: f64,
    pub std_distance: f64,
    pub t_statistic: f64,
    pub p_value: f64,
    /// Set when the p-value fell below 1e-300 and is printed as 0.
    pub underflow: bool,
    pub verdict: bool,
    pub params: AuditParams,
}

impl AuditReport {
    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn report_from_test(
    distances: Vec<f64>,
    test: crate::stats::TTestResult,
    params: AuditParams,
) -> AuditReport {
    AuditReport {
        distances,
        mean_distance: test.mean,
        std_distance: test.std,
        t_statistic: test.t_statistic,
        p_value: test.p_value,
        underflow: test.underflow,
        verdict: test.p_value <= params.alpha,
        params,
    }
}

/// The sequential-watermark audit: extract one permutation per sample,
/// measure rank distances to the registered reference, and run the
/// lower-tail t-test of mean distance against `tau_thr`.
pub fn swap_verify(
    oracle: &dyn SuspiciousOracle,
    samples: &[Array1<f64>],
    original_classes: &[String],
    verification_classes: &[String],
    reference: &PermutationRecord,
    tau_thr: f64,
    alpha: f64,
) -> Result<AuditReport> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(
            "audit needs at least 2 samples for a variance estimate".into(),
        ));
    }
    if reference.len() != verification_classes.len() {
        return Err(Error::DimensionMismatch {
            expected: verification_classes.len(),
            got: reference.len(),
        });
    }
    let mut distances = Vec::with_capacity(samples.len());
    for x in samples {
        let sequence = extract_sequence(oracle, x, original_classes, verification_classes)?;
        let extracted = rank_permutation(&sequence)?;
        distances.push(rank_distance(&extracted, reference)? as f64);
    }
    let test = one_sample_t_test(&distances, tau_thr, Tail::Lower)?;
    let params = AuditParams {
        m: samples.len(),
        n: verification_classes.len(),
        tau_thr,
        alpha,
    };
    Ok(report_from_test(distances, test, params))
}

/// Watermark success rate: fraction of samples whose extracted
/// permutation matches the reference exactly.
pub fn wsr(
    oracle: &dyn SuspiciousOracle,
    samples: &[Array1<f64>],
    original_classes: &[String],
    verification_classes: &[String],
    reference: &PermutationRecord,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set".into()));
    }
    let mut hits = 0usize;
    for x in samples {
        let sequence = extract_sequence(oracle, x, original_classes, verification_classes)?;
        if &rank_permutation(&sequence)? == reference {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// The paired backdoor audit: upper-tail t-test on the target-class
/// probability gap between triggered and benign versions of the same
/// samples.
pub fn bwap_verify(
    oracle: &dyn SuspiciousOracle,
    benign: &[Array1<f64>],
    triggered: &[Array1<f64>],
    original_classes: &[String],
    target_class: &str,
    tau_thr: f64,
    alpha: f64,
) -> Result<AuditReport> {
    if benign.len() != triggered.len() {
        return Err(Error::DimensionMismatch {
            expected: benign.len(),
            got: triggered.len(),
        });
    }
    if benign.len() < 2 {
        return Err(Error::InvalidArgument(
            "audit needs at least 2 sample pairs".into(),
        ));
    }
    let mut query: Vec<String> = original_classes.to_vec();
    query.push(target_class.to_string());
    let target_idx = query.len() - 1;
    let mut deltas = Vec::with_capacity(benign.len());
    for (b, t) in benign.iter().zip(triggered) {
        let pb = oracle.query(b, &query)?;
        check_response(&pb, &query)?;
        let pt = oracle.query(t, &query)?;
        check_response(&pt, &query)?;
        deltas.push(pt.values[target_idx] - pb.values[target_idx]);
    }
    let test = one_sample_t_test(&deltas, tau_thr, Tail::Upper)?;
    let params = AuditParams {
        m: benign.len(),
        n: 1,
        tau_thr,
        alpha,
    };
    Ok(report_from_test(deltas, test, params))
}

/// Inputs of the executable rejection bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremBoundInputs {
    pub m: usize,
    pub n: usize,
    pub tau_thr: f64,
    pub alpha: f64,
}

impl TheoremBoundInputs {
    /// Upper bound of the distance support: a = 2 * floor(n^2 / 4).
    pub fn distance_upper_bound(&self) -> f64 {
        2.0 * ((self.n * self.n / 4) as f64)
    }

    fn validate(&self) -> Result<f64> {
        if self.m < 2 {
            return Err(Error::InvalidArgument("m must be >= 2".into()));
        }
        if self.n < 2 {
            return Err(Error::InvalidArgument("n must be >= 2".into()));
        }
        let a = self.distance_upper_bound();
        if !(self.tau_thr > 0.0 && self.tau_thr < a) {
            return Err(Error::InvalidArgument(format!(
                "tau_thr must lie in (0, {a})"
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument("alpha must lie in (0,1)".into()));
        }
        Ok(a)
    }

    fn t_alpha(&self) -> Result<f64> {
        Ok(t_quantile(self.alpha, (self.m - 1) as f64)?.abs())
    }
}

/// The quadratic whose smaller root is the critical mean distance:
/// f(d) = [(m-1) + t^2] d^2 - [2(m-1)tau + a t^2] d + (m-1) tau^2.
pub fn bound_quadratic(inputs: &TheoremBoundInputs, d: f64) -> Result<f64> {
    let a = inputs.validate()?;
    let t2 = inputs.t_alpha()?.powi(2);
    let m1 = (inputs.m - 1) as f64;
    let tau = inputs.tau_thr;
    Ok((m1 + t2) * d * d - (2.0 * m1 * tau + a * t2) * d + m1 * tau * tau)
}

/// Critical mean distance d*: audits with mean distance below d* reject
/// the null at level alpha. Smaller root of [`bound_quadratic`]; the
/// a-bearing numerator follows the proof's root formula.
pub fn theorem_bound(inputs: &TheoremBoundInputs) -> Result<f64> {
    let a = inputs.validate()?;
    let t2 = inputs.t_alpha()?.powi(2);
    let m1 = (inputs.m - 1) as f64;
    let tau = inputs.tau_thr;
    let discriminant = a * a * t2 * t2 + 4.0 * m1 * t2 * tau * (a - tau);
    let d = (2.0 * m1 * tau + a * t2 - discriminant.sqrt()) / (2.0 * (m1 + t2));
    Ok(d)
}

/// How non-matching distances are simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceModel {
    /// The assumed model: uniform over {2, 4, ..., 2J}, J = floor(n^2/4).
    QuasiBernoulli,
    /// Empirical comparison mode: distances of uniformly random
    /// non-matching permutations to the reference.
    RandomPermutation,
}

/// Simulate audits under the quasi-Bernoulli distance model (a sample
/// matches with probability `p_success`, otherwise its distance is drawn
/// from `model`) and report the fraction of trials rejecting the null.
pub fn monte_carlo_validate(
    p_success: f64,
    m: usize,
    n: usize,
    tau_thr: f64,
    alpha: f64,
    trials: usize,
    model: DistanceModel,
    seed: u64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_success) {
        return Err(Error::InvalidArgument("p_success must lie in [0,1]".into()));
    }
    if trials < 1000 {
        return Err(Error::InvalidArgument("need at least 1000 trials".into()));
    }
    if m < 2 || n < 2 {
        return Err(Error::InvalidArgument("m and n must be >= 2".into()));
    }
    let j = n * n / 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference = PermutationRecord::identity(n);
    let mut rejections = 0usize;
    let mut distances = vec![0.0; m];
    for _ in 0..trials {
        for d in distances.iter_mut() {
            *d = if rng.random::<f64>() < p_success {
                0.0
            } else {
                match model {
                    DistanceModel::QuasiBernoulli => 2.0 * rng.random_range(1..=j) as f64,
                    DistanceModel::RandomPermutation => loop {
                        let perm = random_permutation(n, &mut rng);
                        let dist = rank_distance(&perm, &reference).expect("same n");
                        if dist > 0 {
                            break dist as f64;
                        }
                    },
                }
            };
        }
        let test = one_sample_t_test(&distances, tau_thr, Tail::Lower)?;
        if test.p_value <= alpha {
            rejections += 1;
        }
    }
    Ok(rejections as f64 / trials as f64)
}

fn random_permutation(n: usize, rng: &mut ChaCha8Rng) -> PermutationRecord {
    use rand::seq::SliceRandom;
    let mut ranks: Vec<usize> = (1..=n).collect();
    ranks.shuffle(rng);
    PermutationRecord { ranks }
}

/// One degenerate audit with every distance fixed at `d`: returns the
/// rejection decision of the t-test (resolved by the zero-variance rule).
pub fn degenerate_audit_rejects(d: f64, m: usize, tau_thr: f64, alpha: f64) -> Result<bool> {
    let distances = vec![d; m];
    let test = one_sample_t_test(&distances, tau_thr, Tail::Lower)?;
    Ok(test.p_value <= alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    struct FixedOracle {
        /// verification-class probabilities to emit, by query order
        verif: Vec<f64>,
    }

    impl SuspiciousOracle for FixedOracle {
        fn query(&self, _x: &Array1<f64>, classes: &[String]) -> Result<ProbabilityVector> {
            let k = classes.len() - self.verif.len();
            let verif_mass: f64 = self.verif.iter().sum();
            let rest = (1.0 - verif_mass) / k as f64;
            let mut values = vec![rest; k];
            values.extend_from_slice(&self.verif);
            Ok(ProbabilityVector {
                values,
                class_ids: classes.to_vec(),
            })
        }
    }

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn extract_sequence_slices_unrenormalized() {
        let oracle = FixedOracle {
            verif: vec![0.01, 0.02, 0.03, 0.04],
        };
        let orig = names("c", 10);
        let verif = names("t", 4);
        let x = Array1::zeros(4);
        let seq = extract_sequence(&oracle, &x, &orig, &verif).unwrap();
        assert_eq!(seq.len(), 4);
        for (got, want) in seq.iter().zip([0.01, 0.02, 0.03, 0.04]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        // repeated queries are identical
        let again = extract_sequence(&oracle, &x, &orig, &verif).unwrap();
        assert_eq!(seq, again);
    }

    struct MalformedOracle;
    impl SuspiciousOracle for MalformedOracle {
        fn query(&self, _x: &Array1<f64>, classes: &[String]) -> Result<ProbabilityVector> {
            Ok(ProbabilityVector {
                values: vec![0.5; classes.len()],
                class_ids: classes.to_vec(),
            })
        }
    }

    #[test]
    fn malformed_oracle_is_a_protocol_error() {
        let orig = names("c", 3);
        let verif = names("t", 2);
        let x = Array1::zeros(4);
        assert!(matches!(
            extract_sequence(&MalformedOracle, &x, &orig, &verif),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn matching_oracle_rejects_null() {
        let oracle = FixedOracle {
            verif: vec![0.01, 0.02, 0.03, 0.04],
        };
        let orig = names("c", 10);
        let verif = names("t", 4);
        let samples: Vec<Array1<f64>> = (0..100).map(|_| Array1::zeros(4)).collect();
        let reference = PermutationRecord::identity(4);
        let report = swap_verify(&oracle, &samples, &orig, &verif, &reference, 0.5, 0.01).unwrap();
        assert!(report.verdict);
        assert_eq!(report.p_value, 0.0);
        assert!(report.underflow);
        assert_eq!(report.mean_distance, 0.0);
        let w = wsr(&oracle, &samples, &orig, &verif, &reference).unwrap();
        assert_eq!(w, 1.0);
    }

    #[test]
    fn reversed_oracle_fails_audit() {
        let oracle = FixedOracle {
            verif: vec![0.04, 0.03, 0.02, 0.01],
        };
        let orig = names("c", 10);
        let verif = names("t", 4);
        let samples: Vec<Array1<f64>> = (0..100).map(|_| Array1::zeros(4)).collect();
        let reference = PermutationRecord::identity(4);
        let report = swap_verify(&oracle, &samples, &orig, &verif, &reference, 0.5, 0.01).unwrap();
        assert!(!report.verdict);
        assert_eq!(report.p_value, 1.0);
        assert_eq!(report.mean_distance, 8.0);
    }

    #[test]
    fn audit_distances_are_even_integers() {
        let oracle = FixedOracle {
            verif: vec![0.03, 0.02, 0.01, 0.04],
        };
        let orig = names("c", 5);
        let verif = names("t", 4);
        let samples: Vec<Array1<f64>> = (0..10).map(|_| Array1::zeros(4)).collect();
        let reference = PermutationRecord::identity(4);
        let report = swap_verify(&oracle, &samples, &orig, &verif, &reference, 0.5, 0.01).unwrap();
        for d in &report.distances {
            assert_eq!(d.fract(), 0.0);
            assert_eq!((*d as usize) % 2, 0);
            assert!(*d <= 8.0);
        }
    }

    #[test]
    fn audit_needs_two_samples() {
        let oracle = FixedOracle {
            verif: vec![0.01, 0.04],
        };
        let samples = vec![Array1::zeros(4)];
        let reference = PermutationRecord::identity(2);
        assert!(swap_verify(&oracle, &samples, &names("c", 3), &names("t", 2), &reference, 0.5, 0.01)
            .is_err());
    }

    #[test]
    fn theorem_bound_reference_value() {
        // independently computed root of the proof's quadratic at
        // m=100, n=4 (a=8), tau=0.5, alpha=0.01 with |t_{0.01,99}| = 2.36461
        let inputs = TheoremBoundInputs {
            m: 100,
            n: 4,
            tau_thr: 0.5,
            alpha: 0.01,
        };
        let d = theorem_bound(&inputs).unwrap();
        assert_abs_diff_eq!(d, 0.2018434040168224, epsilon = 1e-9);
        assert!(d > 0.0 && d < inputs.tau_thr);
        assert!(bound_quadratic(&inputs, d).unwrap().abs() <= 1e-8);
    }

    #[test]
    fn bound_degenerates_to_tau_when_t_alpha_vanishes() {
        // alpha = 0.5 makes t_alpha = 0 and the critical distance equal tau
        let inputs = TheoremBoundInputs {
            m: 50,
            n: 4,
            tau_thr: 0.5,
            alpha: 0.5,
        };
        let d = theorem_bound(&inputs).unwrap();
        assert_abs_diff_eq!(d, 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(bound_quadratic(&inputs, 0.5).unwrap(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn bound_rejects_tau_out_of_range() {
        let inputs = TheoremBoundInputs {
            m: 100,
            n: 4,
            tau_thr: 8.0,
            alpha: 0.01,
        };
        assert!(theorem_bound(&inputs).is_err());
    }

    #[test]
    fn monte_carlo_extremes() {
        let rate = monte_carlo_validate(
            1.0,
            20,
            4,
            0.5,
            0.01,
            1000,
            DistanceModel::QuasiBernoulli,
            0,
        )
        .unwrap();
        assert_eq!(rate, 1.0);

        let rate = monte_carlo_validate(
            0.0,
            20,
            4,
            0.5,
            0.01,
            2000,
            DistanceModel::QuasiBernoulli,
            1,
        )
        .unwrap();
        assert!(rate <= 0.02, "rejection rate {rate} for hopeless oracle");
    }

    #[test]
    fn monte_carlo_random_permutation_mode_agrees_roughly() {
        // both distance models put non-matching mass well above tau, so
        // the power at high p_success should be similar
        let a = monte_carlo_validate(0.97, 100, 4, 0.5, 0.01, 2000, DistanceModel::QuasiBernoulli, 7)
            .unwrap();
        let b = monte_carlo_validate(
            0.97,
            100,
            4,
            0.5,
            0.01,
            2000,
            DistanceModel::RandomPermutation,
            7,
        )
        .unwrap();
        assert!((a - b).abs() < 0.2, "model gap too large: {a} vs {b}");
    }

    #[test]
    fn degenerate_audits_bracket_the_bound() {
        let inputs = TheoremBoundInputs {
            m: 100,
            n: 4,
            tau_thr: 0.5,
            alpha: 0.01,
        };
        let d = theorem_bound(&inputs).unwrap();
        assert!(degenerate_audit_rejects(d * 0.9, 100, 0.5, 0.01).unwrap());
        assert!(!degenerate_audit_rejects(0.5 * 1.1, 100, 0.5, 0.01).unwrap());
    }

    #[test]
    fn bwap_paired_test() {
        struct Paired;
        impl SuspiciousOracle for Paired {
            fn query(&self, x: &Array1<f64>, classes: &[String]) -> Result<ProbabilityVector> {
                // triggered samples are tagged by a sentinel coordinate
                let target_p = if x[0] > 0.5 { 0.9 } else { 0.01 };
                let rest = (1.0 - target_p) / (classes.len() - 1) as f64;
                let mut values = vec![rest; classes.len() - 1];
                values.push(target_p);
                Ok(ProbabilityVector {
                    values,
                    class_ids: classes.to_vec(),
                })
            }
        }
        let benign: Vec<Array1<f64>> = (0..50).map(|_| Array1::zeros(4)).collect();
        let triggered: Vec<Array1<f64>> = (0..50).map(|_| Array1::ones(4)).collect();
        let orig = names("c", 5);
        let report =
            bwap_verify(&Paired, &benign, &triggered, &orig, "Target", 0.5, 0.01).unwrap();
        assert!(report.verdict);

        // identical responses: mean delta 0 < tau, verdict false
        let report =
            bwap_verify(&Paired, &benign, &benign, &orig, "Target", 0.5, 0.01).unwrap();
        assert!(!report.verdict);
        assert_eq!(report.p_value, 1.0);
    }
}
