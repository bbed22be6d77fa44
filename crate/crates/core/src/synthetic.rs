//! Planted-salient-frame benchmark generator.
//!
//! Each class gets a random unit prototype. A bag of class `k` carries a
//! contiguous block of salient frames built from prototype `k`; every other
//! frame is a random mixture of the remaining prototypes, so the label is
//! only visible in the salient block.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, BagEntry, DatasetManifest, SalientMasks, Split, MASKS_FILE};
use crate::error::{Error, Result};
use crate::format::{write_bag, BagSource, FrameBag};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MAX_PROTOTYPE_COSINE: f64 = 0.3;
const PROTOTYPE_ATTEMPTS: usize = 10_000;

const CLASS_NAMES: [&str; 7] = [
    "happiness",
    "sadness",
    "neutral",
    "anger",
    "surprise",
    "disgust",
    "fear",
];
const DESCRIPTORS: [&str; 7] = [
    "a smiling mouth, widened eyes",
    "drooping eyelids, downturned lips",
    "relaxed brows, closed mouth",
    "furrowed brows, tightened lips",
    "raised eyebrows, open mouth",
    "wrinkled nose, raised upper lip",
    "stretched lips, tense raised brows",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityProfile {
    /// Full signal on every salient frame.
    #[default]
    Step,
    /// Signal grows linearly across the salient block.
    Ramp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train_bags: usize,
    pub test_bags: usize,
    pub frames: usize,
    pub d: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub salient_count: usize,
    pub signal_strength: f64,
    /// Per-coordinate standard deviation of the additive Gaussian noise.
    pub noise_std: f64,
    pub profile: IntensityProfile,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_bags: 200,
            test_bags: 50,
            frames: 16,
            d: 32,
            classes: 4,
            salient_count: 4,
            signal_strength: 2.0,
            noise_std: 0.5,
            profile: IntensityProfile::Step,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.frames == 0 || self.d == 0 {
            return bad("frames and d must be positive");
        }
        if self.classes < 2 {
            return bad("at least two classes are required");
        }
        if self.salient_count == 0 || self.salient_count > self.frames {
            return bad("salient_count must lie in 1..=frames");
        }
        if !(self.signal_strength > 0.0) || !(self.noise_std >= 0.0) {
            return bad("signal_strength must be positive and noise_std non-negative");
        }
        if self.train_bags + self.test_bags == 0 {
            return bad("no bags requested");
        }
        Ok(())
    }
}

/// In-memory synthetic data before it is written out.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub prototypes: Tensor,
    pub class_names: Vec<String>,
    pub descriptors: Vec<String>,
    pub train: Vec<FrameBag>,
    pub test: Vec<FrameBag>,
    pub masks: SalientMasks,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalized(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= 1e-12 {
        return Err(Error::DegenerateVector {
            op: "synthetic frame",
            norm: n,
            eps: 1e-12,
        });
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit prototypes with pairwise cosine below [`MAX_PROTOTYPE_COSINE`],
/// drawn by rejection.
pub fn prototypes(rng: &mut ChaCha8Rng, classes: usize, d: usize) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while out.len() < classes {
        attempts += 1;
        if attempts > PROTOTYPE_ATTEMPTS {
            return Err(Error::Config(format!(
                "could not place {classes} prototypes with cosine < {MAX_PROTOTYPE_COSINE} in {d} dimensions"
            )));
        }
        let p = normalized(gaussian(rng, d))?;
        if out.iter().all(|q| dot(q, &p) < MAX_PROTOTYPE_COSINE) {
            out.push(p);
        }
    }
    Ok(out)
}

fn class_text(classes: usize) -> (Vec<String>, Vec<String>) {
    (0..classes)
        .map(|k| match (CLASS_NAMES.get(k), DESCRIPTORS.get(k)) {
            (Some(n), Some(d)) => (n.to_string(), d.to_string()),
            _ => (format!("class {k}"), format!("facial cue pattern {k}")),
        })
        .unzip()
}

struct BagDraw {
    features: Vec<Vec<f64>>,
    mask: Vec<bool>,
}

fn draw_bag(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, protos: &[Vec<f64>], label: usize) -> Result<BagDraw> {
    let (t_len, d, s) = (spec.frames, spec.d, spec.salient_count);
    let start = rng.random_range(0..=t_len - s);
    let mut features = Vec::with_capacity(t_len);
    let mut mask = vec![false; t_len];
    for t in 0..t_len {
        let noise = gaussian(rng, d);
        let mut v: Vec<f64>;
        if (start..start + s).contains(&t) {
            mask[t] = true;
            let intensity = match spec.profile {
                IntensityProfile::Step => 1.0,
                IntensityProfile::Ramp => (t - start + 1) as f64 / s as f64,
            };
            let a = spec.signal_strength * intensity;
            v = protos[label].iter().map(|p| a * p).collect();
        } else {
            let weights: Vec<f64> = (0..protos.len())
                .map(|j| if j == label { 0.0 } else { rng.random::<f64>() })
                .collect();
            let total: f64 = weights.iter().sum();
            v = vec![0.0; d];
            for (w, p) in weights.iter().zip(protos) {
                v.iter_mut().zip(p).for_each(|(x, q)| *x += w / total * q);
            }
        }
        v.iter_mut().zip(&noise).for_each(|(x, n)| *x += spec.noise_std * n);
        features.push(normalized(v)?);
    }
    Ok(BagDraw { features, mask })
}

/// Generates the benchmark in memory. Labels cycle through the classes so
/// both splits are balanced.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = prototypes(&mut rng, spec.classes, spec.d)?;
    let (class_names, descriptors) = class_text(spec.classes);
    let mut masks = SalientMasks::default();
    let mut split = |prefix: &str, count: usize, rng: &mut ChaCha8Rng| -> Result<Vec<FrameBag>> {
        (0..count)
            .map(|i| {
                let label = i % spec.classes;
                let draw = draw_bag(rng, spec, &protos, label)?;
                let id = format!("{prefix}_{i:04}");
                masks.masks.insert(id.clone(), draw.mask);
                let bag = FrameBag::new(&id, Tensor::from_rows(&draw.features)?, label, BagSource::Mock)?;
                Ok(bag.quantized())
            })
            .collect()
    };
    let train = split("train", spec.train_bags, &mut rng)?;
    let test = split("test", spec.test_bags, &mut rng)?;
    Ok(SyntheticData {
        prototypes: Tensor::from_rows(&protos)?,
        class_names,
        descriptors,
        train,
        test,
        masks,
    })
}

/// Writes bags under `out/bags/`, the manifest and the mask sidecar.
/// Returns the manifest path.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64, out: impl AsRef<Path>) -> Result<PathBuf> {
    let data = generate(spec, seed)?;
    let out = out.as_ref();
    let bag_dir = out.join("bags");
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
    let mut entries = Vec::new();
    for (split, bags) in [(Split::Train, &data.train), (Split::Test, &data.test)] {
        for bag in bags {
            let rel = format!("bags/{}.tgfb", bag.bag_id);
            write_bag(out.join(&rel), bag)?;
            entries.push(BagEntry { path: rel, split });
        }
    }
    let manifest = DatasetManifest {
        d: spec.d,
        classes: spec.classes,
        class_names: data.class_names,
        fine_descriptors: data.descriptors,
        bags: entries,
    };
    let path = out.join(MANIFEST_FILE);
    write_manifest(&path, &manifest)?;
    data.masks.write(out.join(MASKS_FILE))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            train_bags: 8,
            test_bags: 4,
            frames: 6,
            d: 8,
            classes: 3,
            salient_count: 2,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn prototypes_are_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = prototypes(&mut rng, 4, 32).unwrap();
        for i in 0..4 {
            assert!((dot(&p[i], &p[i]) - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert!(dot(&p[i], &p[j]) < MAX_PROTOTYPE_COSINE);
            }
        }
    }

    #[test]
    fn noiseless_fully_salient_bags_are_prototypes() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            salient_count: 6,
            ..small()
        };
        let data = generate(&spec, 1).unwrap();
        for bag in &data.train {
            let proto = data.prototypes.row(bag.label);
            for t in 0..bag.frames() {
                for (a, b) in bag.features.row(t).iter().zip(proto) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
            assert!(data.masks.get(&bag.bag_id).unwrap().iter().all(|&m| m));
        }
    }

    #[test]
    fn masks_mark_a_contiguous_block() {
        let data = generate(&small(), 3).unwrap();
        for bag in data.train.iter().chain(&data.test) {
            let m = data.masks.get(&bag.bag_id).unwrap();
            let on: Vec<usize> = (0..m.len()).filter(|&t| m[t]).collect();
            assert_eq!(on.len(), 2);
            assert_eq!(on[1], on[0] + 1);
        }
    }

    #[test]
    fn salient_frames_carry_the_label() {
        let spec = SyntheticSpec {
            noise_std: 0.05,
            ..small()
        };
        let data = generate(&spec, 5).unwrap();
        for bag in &data.train {
            let m = data.masks.get(&bag.bag_id).unwrap();
            let proto = data.prototypes.row(bag.label);
            for t in 0..bag.frames() {
                let c = dot(bag.features.row(t), proto);
                if m[t] {
                    assert!(c > 0.9, "{c}");
                } else {
                    assert!(c < 0.7, "{c}");
                }
            }
        }
    }

    #[test]
    fn files_are_byte_identical_per_seed() {
        let (a, b, c) = (
            tempfile::tempdir().unwrap(),
            tempfile::tempdir().unwrap(),
            tempfile::tempdir().unwrap(),
        );
        gen_synthetic(&small(), 7, a.path()).unwrap();
        gen_synthetic(&small(), 7, b.path()).unwrap();
        gen_synthetic(&small(), 8, c.path()).unwrap();
        let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
        for f in [
            "manifest.json",
            MASKS_FILE,
            "bags/train_0003.tgfb",
            "bags/test_0001.tgfb",
        ] {
            assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
        }
        assert_ne!(
            read(a.path(), "bags/train_0003.tgfb"),
            read(c.path(), "bags/train_0003.tgfb")
        );
        let ds = Dataset::open(a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (8, 4));
        assert_eq!(ds.masks().unwrap().masks.len(), 12);
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SyntheticSpec {
                salient_count: 0,
                ..small()
            },
            SyntheticSpec {
                salient_count: 7,
                ..small()
            },
            SyntheticSpec { classes: 1, ..small() },
            SyntheticSpec {
                noise_std: -1.0,
                ..small()
            },
        ] {
            assert!(generate(&spec, 0).is_err());
        }
        assert!(generate(
            &SyntheticSpec {
                classes: 40,
                d: 2,
                ..small()
            },
            0
        )
        .is_err());
    }
}
