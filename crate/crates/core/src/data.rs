//! Synthetic concept-structured paired dataset: quasi-orthogonal prototypes
//! per concept with Gaussian sample noise, forget/retain/validation curation,
//! and the dataset file format.

use crate::error::{Error, Result};
use crate::io::{ContainerReader, ContainerWriter};
use crate::objectives::PairBatch;
use crate::rng::Rng;
use crate::tensor::{dot, l2_normalize_in_place, slice_norm, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub concepts: u32,
    pub train_per_concept: usize,
    pub test_per_concept: usize,
    pub vision_dim: usize,
    pub text_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ConceptSpec {
    fn default() -> Self {
        // 200 held-out samples per concept keep the 5% search validation at
        // ten samples per concept; fewer makes the searched step size
        // systematically undershoot the population forgetting threshold.
        ConceptSpec {
            concepts: 8,
            train_per_concept: 50,
            test_per_concept: 200,
            vision_dim: 32,
            text_dim: 24,
            noise_sigma: 0.1,
            seed: 42,
        }
    }
}

impl ConceptSpec {
    pub fn validate(&self) -> Result<()> {
        if self.concepts < 2 {
            return Err(Error::Config("need at least two concepts".into()));
        }
        if self.train_per_concept < 2 || self.test_per_concept < 1 {
            return Err(Error::Config(
                "need at least two train and one test sample per concept".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise sigma must be >= 0".into()));
        }
        // Orthogonalization supports at most dim directions per space.
        if self.concepts as usize > self.vision_dim || self.concepts as usize > self.text_dim {
            return Err(Error::Config(format!(
                "{} concepts exceed the orthogonal capacity of dims {}x{}",
                self.concepts, self.vision_dim, self.text_dim
            )));
        }
        Ok(())
    }
}

/// Per-concept unit prototype inputs in both input spaces. The text side
/// doubles as the zero-shot class prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    /// [K x vision_dim]
    pub vision: Tensor,
    /// [K x text_dim]
    pub text: Tensor,
}

impl Prototypes {
    pub fn concept_count(&self) -> usize {
        self.vision.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub spec: ConceptSpec,
    pub train: PairBatch,
    pub test: PairBatch,
    pub prototypes: Prototypes,
}

/// Draw K unit prototypes per input space, pairwise orthogonal by seeded
/// Gram-Schmidt over random draws, then per sample add Gaussian noise around
/// the concept prototype. Sample order is concept-major, so labels come out
/// sorted.
pub fn generate(spec: &ConceptSpec) -> Result<GeneratedData> {
    spec.validate()?;
    let k = spec.concepts as usize;
    let mut proto_rng = Rng::new(Rng::derive(spec.seed, "prototypes"));
    let vision_protos = orthonormal_rows(k, spec.vision_dim, &mut proto_rng)?;
    let text_protos = orthonormal_rows(k, spec.text_dim, &mut proto_rng)?;

    let make_pool = |tag: &str, per_concept: usize| -> PairBatch {
        let mut rng = Rng::new(Rng::derive(spec.seed, tag));
        let n = k * per_concept;
        let mut vision = Vec::with_capacity(n * spec.vision_dim);
        let mut text = Vec::with_capacity(n * spec.text_dim);
        let mut labels = Vec::with_capacity(n);
        for c in 0..k {
            let vp = vision_protos.row(c);
            let tp = text_protos.row(c);
            for _ in 0..per_concept {
                for &p in vp {
                    vision.push(p + spec.noise_sigma * rng.normal());
                }
                for &p in tp {
                    text.push(p + spec.noise_sigma * rng.normal());
                }
                labels.push(c as u32);
            }
        }
        PairBatch::new(
            Tensor::from_vec(&[n, spec.vision_dim], vision).unwrap(),
            Tensor::from_vec(&[n, spec.text_dim], text).unwrap(),
            labels,
        )
        .unwrap()
    };

    let train = make_pool("train", spec.train_per_concept);
    let test = make_pool("test", spec.test_per_concept);
    Ok(GeneratedData {
        spec: spec.clone(),
        train,
        test,
        prototypes: Prototypes {
            vision: vision_protos,
            text: text_protos,
        },
    })
}

/// K orthonormal rows via Gram-Schmidt on seeded uniform draws. Residuals
/// that collapse (astronomically unlikely) trigger a deterministic redraw.
fn orthonormal_rows(k: usize, dim: usize, rng: &mut Rng) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut candidate: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        for prev in &rows {
            let proj = dot(&candidate, prev);
            for (c, p) in candidate.iter_mut().zip(prev.iter()) {
                *c -= proj * p;
            }
        }
        if slice_norm(&candidate) < 1e-9 {
            continue;
        }
        l2_normalize_in_place(&mut candidate)?;
        rows.push(candidate);
    }
    Tensor::from_vec(&[k, dim], rows.concat())
}

/// Forget/retain/validation curation around a set of target concepts.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub forget: PairBatch,
    pub retain: PairBatch,
    pub validation: PairBatch,
    pub targets: Vec<u32>,
}

/// Forget set = every train sample of the target concepts, retain set = the
/// remainder, validation = per-concept stratified share of the test pool.
pub fn make_split(
    data: &GeneratedData,
    targets: &[u32],
    validation_fraction: f64,
) -> Result<DatasetSplit> {
    if targets.is_empty() {
        return Err(Error::Config("no target concepts".into()));
    }
    if !(validation_fraction > 0.0 && validation_fraction <= 1.0) {
        return Err(Error::Config(
            "validation fraction must be in (0, 1]".into(),
        ));
    }
    let k = data.spec.concepts;
    for &t in targets {
        if t >= k {
            return Err(Error::Config(format!("target concept {t} out of range")));
        }
    }
    let is_target = |label: u32| targets.contains(&label);

    let forget_idx: Vec<usize> = (0..data.train.len())
        .filter(|&i| is_target(data.train.labels[i]))
        .collect();
    let retain_idx: Vec<usize> = (0..data.train.len())
        .filter(|&i| !is_target(data.train.labels[i]))
        .collect();
    if forget_idx.is_empty() {
        return Err(Error::EmptyBatch("forget split"));
    }
    if retain_idx.is_empty() {
        return Err(Error::EmptyBatch("retain split"));
    }

    // Stratified validation: the first round(fraction * count) test samples
    // of each concept, at least one, in pool order.
    let mut validation_idx = Vec::new();
    for c in 0..k {
        let concept_idx: Vec<usize> = (0..data.test.len())
            .filter(|&i| data.test.labels[i] == c)
            .collect();
        let quota = ((validation_fraction * concept_idx.len() as f64).round() as usize)
            .clamp(1, concept_idx.len());
        validation_idx.extend_from_slice(&concept_idx[..quota]);
    }
    validation_idx.sort_unstable();

    let mut targets = targets.to_vec();
    targets.sort_unstable();
    targets.dedup();
    Ok(DatasetSplit {
        forget: data.train.take(&forget_idx),
        retain: data.train.take(&retain_idx),
        validation: data.test.take(&validation_idx),
        targets,
    })
}

// --- dataset file format -----------------------------------------------------

pub const DATASET_KIND: &str = "dataset";
pub const DATASET_VERSION: u32 = 1;

/// Write the generated pools and prototypes (`.dset`).
pub fn save_dataset(data: &GeneratedData, path: &Path, config_hash: u64) -> Result<()> {
    let mut w = ContainerWriter::new(DATASET_KIND, DATASET_VERSION);
    let spec = &data.spec;
    w.push("concepts", spec.concepts);
    w.push("train_per_concept", spec.train_per_concept);
    w.push("test_per_concept", spec.test_per_concept);
    w.push("vision_dim", spec.vision_dim);
    w.push("text_dim", spec.text_dim);
    w.push_f64("noise_sigma", spec.noise_sigma);
    w.push("seed", spec.seed);
    w.push_hex("config_hash", config_hash);
    w.section_f64("train_vision", data.train.vision.as_slice().to_vec());
    w.section_f64("train_text", data.train.text.as_slice().to_vec());
    w.section_u32("train_labels", data.train.labels.clone());
    w.section_f64("test_vision", data.test.vision.as_slice().to_vec());
    w.section_f64("test_text", data.test.text.as_slice().to_vec());
    w.section_u32("test_labels", data.test.labels.clone());
    w.section_f64("proto_vision", data.prototypes.vision.as_slice().to_vec());
    w.section_f64("proto_text", data.prototypes.text.as_slice().to_vec());
    w.write_to(path)
}

pub fn load_dataset(path: &Path) -> Result<(GeneratedData, u64)> {
    let r = ContainerReader::read_from(path, DATASET_KIND, DATASET_VERSION)?;
    let spec = ConceptSpec {
        concepts: r.usize_value("concepts")? as u32,
        train_per_concept: r.usize_value("train_per_concept")?,
        test_per_concept: r.usize_value("test_per_concept")?,
        vision_dim: r.usize_value("vision_dim")?,
        text_dim: r.usize_value("text_dim")?,
        noise_sigma: r.f64_value("noise_sigma")?,
        seed: r.usize_value("seed")? as u64,
    };
    let k = spec.concepts as usize;
    let batch = |v: &[f64], t: &[f64], labels: &[u32]| -> Result<PairBatch> {
        let n = labels.len();
        PairBatch::new(
            Tensor::from_vec(&[n, spec.vision_dim], v.to_vec())?,
            Tensor::from_vec(&[n, spec.text_dim], t.to_vec())?,
            labels.to_vec(),
        )
    };
    let train = batch(
        r.section_f64("train_vision")?,
        r.section_f64("train_text")?,
        r.section_u32("train_labels")?,
    )?;
    let test = batch(
        r.section_f64("test_vision")?,
        r.section_f64("test_text")?,
        r.section_u32("test_labels")?,
    )?;
    let prototypes = Prototypes {
        vision: Tensor::from_vec(
            &[k, spec.vision_dim],
            r.section_f64("proto_vision")?.to_vec(),
        )?,
        text: Tensor::from_vec(&[k, spec.text_dim], r.section_f64("proto_text")?.to_vec())?,
    };
    if train
        .labels
        .iter()
        .chain(test.labels.iter())
        .any(|&l| l >= spec.concepts)
    {
        return Err(Error::CorruptArtifact("label out of concept range".into()));
    }
    Ok((
        GeneratedData {
            spec,
            train,
            test,
            prototypes,
        },
        r.hex_value("config_hash")?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine_slices;

    #[test]
    fn generate_counts_and_determinism() {
        let spec = ConceptSpec::default();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.train.len(), 400);
        assert_eq!(a.test.len(), 8 * spec.test_per_concept);
        for c in 0..8u32 {
            assert_eq!(a.train.labels.iter().filter(|&&l| l == c).count(), 50);
        }
        assert_eq!(a, b, "same seed must give bit-identical pools");
    }

    #[test]
    fn prototypes_quasi_orthogonal() {
        let data = generate(&ConceptSpec::default()).unwrap();
        let k = data.prototypes.concept_count();
        for protos in [&data.prototypes.vision, &data.prototypes.text] {
            for i in 0..k {
                assert!((slice_norm(protos.row(i)) - 1.0).abs() < 1e-12);
                for j in 0..i {
                    let c = cosine_slices(protos.row(i), protos.row(j)).unwrap();
                    assert!(c.abs() <= 0.1, "prototypes {i},{j} cos {c}");
                }
            }
        }
    }

    #[test]
    fn sigma_zero_samples_equal_prototypes() {
        let spec = ConceptSpec {
            noise_sigma: 0.0,
            ..ConceptSpec::default()
        };
        let data = generate(&spec).unwrap();
        for i in 0..data.train.len() {
            let c = data.train.labels[i] as usize;
            assert_eq!(data.train.vision.row(i), data.prototypes.vision.row(c));
            assert_eq!(data.train.text.row(i), data.prototypes.text.row(c));
        }
    }

    #[test]
    fn too_many_concepts_rejected() {
        let spec = ConceptSpec {
            concepts: 40,
            vision_dim: 32,
            text_dim: 24,
            ..ConceptSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn split_counts_and_partition() {
        let data = generate(&ConceptSpec::default()).unwrap();
        let split = make_split(&data, &[3], 0.05).unwrap();
        assert_eq!(split.forget.len(), 50);
        assert_eq!(split.retain.len(), 350);
        assert_eq!(split.forget.len() + split.retain.len(), data.train.len());
        assert!(split.forget.labels.iter().all(|&l| l == 3));
        assert!(split.retain.labels.iter().all(|&l| l != 3));
    }

    #[test]
    fn validation_stratified_and_full_at_one() {
        let spec = ConceptSpec::default();
        let data = generate(&spec).unwrap();
        let split = make_split(&data, &[0], 0.05).unwrap();
        for c in 0..8u32 {
            let share = split.validation.labels.iter().filter(|&&l| l == c).count();
            let expected = 0.05 * spec.test_per_concept as f64;
            assert!(
                (share as f64 - expected).abs() <= 1.0,
                "concept {c} share {share}"
            );
        }
        let full = make_split(&data, &[0], 1.0).unwrap();
        assert_eq!(full.validation.len(), data.test.len());
    }

    #[test]
    fn split_rejects_bad_targets_and_fractions() {
        let data = generate(&ConceptSpec::default()).unwrap();
        assert!(make_split(&data, &[], 0.1).is_err());
        assert!(make_split(&data, &[99], 0.1).is_err());
        assert!(make_split(&data, &[0], 0.0).is_err());
        assert!(make_split(&data, &[0], 1.5).is_err());
        // All concepts targeted -> empty retain.
        let all: Vec<u32> = (0..8).collect();
        assert!(matches!(
            make_split(&data, &all, 0.1),
            Err(Error::EmptyBatch(_))
        ));
    }

    #[test]
    fn dataset_round_trip_and_version_check() {
        let dir = std::env::temp_dir().join("ulab-data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pools.dset");
        let data = generate(&ConceptSpec {
            concepts: 3,
            train_per_concept: 4,
            test_per_concept: 2,
            vision_dim: 6,
            text_dim: 5,
            noise_sigma: 0.2,
            seed: 7,
        })
        .unwrap();
        save_dataset(&data, &path, 0x55).unwrap();
        let (loaded, hash) = load_dataset(&path).unwrap();
        assert_eq!(hash, 0x55);
        assert_eq!(loaded, data);

        // Bump the version byte in the magic line.
        let bytes = std::fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes[..24]).to_string();
        assert!(text.starts_with("#ulab dataset 1"));
        let mut patched = bytes.clone();
        patched[14] = b'9';
        std::fs::write(&path, &patched).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(Error::UnsupportedVersion { .. })
        ));
    }
}
