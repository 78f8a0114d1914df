//! Deterministic synthetic classification data with base/novel class
//! splits and few-shot sampling.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub cluster_std: f64,
    /// Norm of the offset shared by every cluster mean. A common mean
    /// direction concentrates encoder features in a cone, mirroring the
    /// anisotropy of real image embeddings; without it the feature space
    /// is isotropic and no input-independent logit ordering can exist.
    pub mean_offset: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            samples_per_class: 40,
            input_dim: 32,
            cluster_std: 0.3,
            mean_offset: 16.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 4 {
            return Err(Error::InvalidConfig(
                "num_classes must be >= 4 so a base/novel split leaves >= 2 per side".into(),
            ));
        }
        if self.samples_per_class == 0 || self.input_dim == 0 {
            return Err(Error::InvalidConfig(
                "samples_per_class and input_dim must be positive".into(),
            ));
        }
        if self.cluster_std < 0.0 || !self.cluster_std.is_finite() {
            return Err(Error::InvalidConfig("cluster_std must be finite and >= 0".into()));
        }
        if self.mean_offset < 0.0 || !self.mean_offset.is_finite() {
            return Err(Error::InvalidConfig("mean_offset must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x: Array1<f64>,
    pub y: usize,
}

/// Class-level base/novel partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
}

/// Gaussian clusters: unit-scale seeded means around a shared offset
/// direction of norm `mean_offset`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = draw_means(spec, &mut rng);
    let mut gauss = |dim: usize| {
        Array1::from_shape_fn(dim, |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        })
    };
    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for (y, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let noise = gauss(spec.input_dim);
            samples.push(LabeledSample {
                x: mean + &(noise * spec.cluster_std),
                y,
            });
        }
    }
    Ok(samples)
}

fn draw_means(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<Array1<f64>> {
    let mut gauss = |dim: usize| {
        Array1::from_shape_fn(dim, |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        })
    };
    let direction = gauss(spec.input_dim);
    let norm = direction.dot(&direction).sqrt();
    let offset = direction * (spec.mean_offset / norm.max(1e-300));
    (0..spec.num_classes).map(|_| &offset + &gauss(spec.input_dim)).collect()
}

/// Per-class cluster means, as drawn by [`generate_dataset`] for the same
/// spec. Used to tie original class-token embeddings to the image clusters.
pub fn class_means(spec: &DatasetSpec) -> Result<Vec<Array1<f64>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(draw_means(spec, &mut rng))
}

/// Class-level split: no class appears on both sides.
pub fn split_base_novel(
    dataset: &[LabeledSample],
    base_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>, SplitSpec)> {
    if !(base_fraction > 0.0 && base_fraction < 1.0) {
        return Err(Error::InvalidArgument(
            "base_fraction must lie strictly between 0 and 1".into(),
        ));
    }
    let mut classes: Vec<usize> = dataset.iter().map(|s| s.y).collect();
    classes.sort_unstable();
    classes.dedup();
    let num_base = ((classes.len() as f64) * base_fraction).round() as usize;
    if num_base == 0 || num_base == classes.len() {
        return Err(Error::InvalidArgument(format!(
            "base_fraction {base_fraction} leaves an empty side for {} classes",
            classes.len()
        )));
    }
    let mut shuffled = classes.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let mut base_classes: Vec<usize> = shuffled[..num_base].to_vec();
    let mut novel_classes: Vec<usize> = shuffled[num_base..].to_vec();
    base_classes.sort_unstable();
    novel_classes.sort_unstable();
    let spec = SplitSpec {
        base_classes: base_classes.clone(),
        novel_classes: novel_classes.clone(),
    };
    let base = dataset
        .iter()
        .filter(|s| base_classes.contains(&s.y))
        .cloned()
        .collect();
    let novel = dataset
        .iter()
        .filter(|s| novel_classes.contains(&s.y))
        .cloned()
        .collect();
    Ok((base, novel, spec))
}

/// Few-shot subset: exactly `shots_per_class` per class, sampled without
/// replacement.
pub fn sample_few_shot(
    base: &[LabeledSample],
    shots_per_class: usize,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    let mut classes: Vec<usize> = base.iter().map(|s| s.y).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &c in &classes {
        let mut indices: Vec<usize> = base
            .iter()
            .enumerate()
            .filter(|(_, s)| s.y == c)
            .map(|(i, _)| i)
            .collect();
        if indices.len() < shots_per_class {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} samples, requested {shots_per_class} shots",
                indices.len()
            )));
        }
        indices.shuffle(&mut rng);
        out.extend(indices[..shots_per_class].iter().map(|&i| base[i].clone()));
    }
    Ok(out)
}

/// Columnar text export: header with dims and counts, one sample per
/// line with the label last.
pub fn export_dataset(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    let dim = samples.first().map_or(0, |s| s.x.len());
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "# input_dim={dim} count={}", samples.len())?;
    for s in samples {
        for v in s.x.iter() {
            write!(file, "{v:.17e} ")?;
        }
        writeln!(file, "{}", s.y)?;
    }
    Ok(())
}

pub fn import_dataset(path: &Path) -> Result<Vec<LabeledSample>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::CorruptFile("empty dataset file".into()))??;
    let dim: usize = header
        .split("input_dim=")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::CorruptFile("malformed dataset header".into()))?;
    let mut samples = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != dim + 1 {
            return Err(Error::CorruptFile(format!(
                "expected {} fields per line, got {}",
                dim + 1,
                fields.len()
            )));
        }
        let x = fields[..dim]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::CorruptFile(format!("bad float: {e}")))?;
        let y = fields[dim]
            .parse()
            .map_err(|e| Error::CorruptFile(format!("bad label: {e}")))?;
        samples.push(LabeledSample {
            x: Array1::from_vec(x),
            y,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic() {
        let spec = DatasetSpec::default();
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), spec.num_classes * spec.samples_per_class);
    }

    #[test]
    fn zero_std_collapses_to_means() {
        let spec = DatasetSpec {
            cluster_std: 0.0,
            samples_per_class: 3,
            ..DatasetSpec::default()
        };
        let data = generate_dataset(&spec).unwrap();
        let means = class_means(&spec).unwrap();
        for s in &data {
            assert_eq!(s.x, means[s.y]);
        }
    }

    #[test]
    fn nearest_centroid_oracle_scores_high() {
        // train centroids on half the data, evaluate on the rest
        let spec = DatasetSpec::default();
        let data = generate_dataset(&spec).unwrap();
        let (train, test): (Vec<_>, Vec<_>) = data
            .iter()
            .enumerate()
            .partition(|(i, _)| i % 2 == 0);
        let mut centroids = vec![Array1::<f64>::zeros(spec.input_dim); spec.num_classes];
        let mut counts = vec![0usize; spec.num_classes];
        for (_, s) in &train {
            centroids[s.y] = &centroids[s.y] + &s.x;
            counts[s.y] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            *c = &*c / (*n as f64);
        }
        let correct = test
            .iter()
            .filter(|(_, s)| {
                let pred = centroids
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        let da = (&s.x - *a).dot(&(&s.x - *a));
                        let db = (&s.x - *b).dot(&(&s.x - *b));
                        da.partial_cmp(&db).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                pred == s.y
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.9, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn split_is_a_class_partition() {
        let data = generate_dataset(&DatasetSpec::default()).unwrap();
        let (base, novel, spec) = split_base_novel(&data, 0.5, 1).unwrap();
        assert_eq!(spec.base_classes.len(), 5);
        assert_eq!(spec.novel_classes.len(), 5);
        for c in &spec.base_classes {
            assert!(!spec.novel_classes.contains(c));
        }
        assert_eq!(base.len() + novel.len(), data.len());
        for s in &base {
            assert!(spec.base_classes.contains(&s.y));
        }
        for s in &novel {
            assert!(spec.novel_classes.contains(&s.y));
        }
    }

    #[test]
    fn split_changes_with_seed_but_keeps_sizes() {
        let data = generate_dataset(&DatasetSpec::default()).unwrap();
        let (_, _, a) = split_base_novel(&data, 0.5, 1).unwrap();
        let (_, _, b) = split_base_novel(&data, 0.5, 2).unwrap();
        assert_eq!(a.base_classes.len(), b.base_classes.len());
        assert_ne!(a.base_classes, b.base_classes);
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        let data = generate_dataset(&DatasetSpec::default()).unwrap();
        assert!(split_base_novel(&data, 0.01, 0).is_err());
        assert!(split_base_novel(&data, 1.5, 0).is_err());
    }

    #[test]
    fn few_shot_counts_and_determinism() {
        let data = generate_dataset(&DatasetSpec::default()).unwrap();
        let (base, _, spec) = split_base_novel(&data, 0.5, 1).unwrap();
        let shots = sample_few_shot(&base, 1, 9).unwrap();
        assert_eq!(shots.len(), spec.base_classes.len());
        let again = sample_few_shot(&base, 1, 9).unwrap();
        assert_eq!(shots, again);

        let all = sample_few_shot(&base, 40, 9).unwrap();
        assert_eq!(all.len(), base.len());
        assert!(sample_few_shot(&base, 41, 9).is_err());
    }

    #[test]
    fn disjoint_seeds_report_controlled_overlap() {
        let data = generate_dataset(&DatasetSpec::default()).unwrap();
        let (base, _, _) = split_base_novel(&data, 0.5, 1).unwrap();
        let a = sample_few_shot(&base, 8, 100).unwrap();
        let b = sample_few_shot(&base, 8, 200).unwrap();
        let overlap = a.iter().filter(|s| b.contains(s)).count();
        assert!(overlap < a.len(), "distinct seeds produced identical subsets");
    }

    #[test]
    fn export_import_round_trip() {
        let spec = DatasetSpec {
            samples_per_class: 2,
            ..DatasetSpec::default()
        };
        let data = generate_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.txt");
        export_dataset(&path, &data).unwrap();
        let back = import_dataset(&path).unwrap();
        assert_eq!(data.len(), back.len());
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.y, b.y);
            for (u, v) in a.x.iter().zip(b.x.iter()) {
                assert!((u - v).abs() < 1e-15);
            }
        }
    }
}
