//! Seeded synthetic client datasets with controllable non-IID skew.
//!
//! Every class owns a Gaussian prototype of shape `phi × input_dim`; a sample
//! is its class prototype plus isotropic noise. `LabelSkew` draws each
//! client's class mix from a symmetric Dirichlet; `FeatureShift` keeps labels
//! balanced and rotates the feature space differently on every client.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Batch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkewMode {
    LabelSkew,
    FeatureShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewSpec {
    pub mode: SkewMode,
    /// Dirichlet concentration for `LabelSkew`.
    pub alpha: f64,
    /// Client `i` is rotated by `i * rotation_angle` radians under `FeatureShift`.
    pub rotation_angle: f64,
    pub n_classes: usize,
    pub samples_per_client: usize,
    pub input_dim: usize,
    pub phi: usize,
    pub noise_std: f64,
}

impl SkewSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("data.alpha", "must be positive"));
        }
        if self.n_classes == 0 || self.input_dim == 0 || self.phi == 0 {
            return Err(Error::config("data", "class count and token shape must be at least 1"));
        }
        if self.samples_per_client < 2 * self.n_classes {
            return Err(Error::config(
                "data.samples_per_client",
                format!("must be at least 2 * n_classes = {}", 2 * self.n_classes),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("data.noise_std", "must be non-negative"));
        }
        if !self.rotation_angle.is_finite() {
            return Err(Error::config("data.rotation_angle", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Batch,
    pub test: Batch,
    /// Class mix the client's labels were drawn from.
    pub class_proportions: Vec<f64>,
    /// Realized label histogram over train and test together.
    pub class_counts: Vec<usize>,
    pub partition_hash: String,
}

impl ClientDataset {
    pub fn sample_count(&self) -> usize {
        self.train.sample_count()
    }
}

/// Fraction of samples assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

pub fn generate_partition(n_clients: usize, spec: &SkewSpec, seed: u64) -> Result<Vec<ClientDataset>> {
    if n_clients == 0 {
        return Err(Error::config("n_clients", "must be at least 1"));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = spec.phi * spec.input_dim;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let prototypes: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..width).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Data(e.to_string()))?;

    let mut datasets = Vec::with_capacity(n_clients);
    let mut global_counts = vec![0usize; spec.n_classes];
    for client_id in 0..n_clients {
        let (proportions, mut labels) = match spec.mode {
            SkewMode::LabelSkew => {
                let props = dirichlet(spec.alpha, spec.n_classes, &mut rng)?;
                let pick = WeightedIndex::new(&props).map_err(|e| Error::Data(e.to_string()))?;
                let labels = (0..spec.samples_per_client).map(|_| pick.sample(&mut rng)).collect();
                (props, labels)
            }
            SkewMode::FeatureShift => {
                let props = vec![1.0 / spec.n_classes as f64; spec.n_classes];
                let labels: Vec<usize> = (0..spec.samples_per_client).map(|j| j % spec.n_classes).collect();
                (props, labels)
            }
        };
        labels.shuffle(&mut rng);
        let angle = client_id as f64 * spec.rotation_angle;
        let mut features = Vec::with_capacity(labels.len() * width);
        for &y in &labels {
            let mut sample = prototypes[y].clone();
            if spec.mode == SkewMode::FeatureShift {
                rotate_pairs(&mut sample, spec.input_dim, angle);
            }
            for v in sample.iter_mut() {
                *v += noise.sample(&mut rng);
            }
            features.extend_from_slice(&sample);
        }
        let mut class_counts = vec![0usize; spec.n_classes];
        for &y in &labels {
            class_counts[y] += 1;
            global_counts[y] += 1;
        }
        let n_train = ((labels.len() as f64) * TRAIN_FRACTION).floor() as usize;
        let n_train = n_train.clamp(1, labels.len() - 1);
        let split = |range: std::ops::Range<usize>| -> Result<Batch> {
            Batch::new(
                spec.phi,
                spec.input_dim,
                features[range.start * width..range.end * width].to_vec(),
                labels[range].to_vec(),
            )
        };
        let train = split(0..n_train)?;
        let test = split(n_train..labels.len())?;
        let partition_hash = hex::encode(hash_batches(client_id, &train, &test));
        datasets.push(ClientDataset {
            client_id,
            train,
            test,
            class_proportions: proportions,
            class_counts,
            partition_hash,
        });
    }
    if let Some(missing) = global_counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!(
            "class {missing} received no samples on any client"
        )));
    }
    Ok(datasets)
}

/// Symmetric Dirichlet draw via normalized Gamma variates.
pub fn dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Data(e.to_string()))?;
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter_mut().for_each(|d| *d /= total);
    } else {
        // Every variate underflowed (tiny alpha): all mass on one class.
        let hot = rng.random_range(0..k);
        draws = (0..k).map(|i| if i == hot { 1.0 } else { 0.0 }).collect();
    }
    Ok(draws)
}

/// Rotates consecutive feature pairs `(0,1), (2,3), ...` of every token row.
fn rotate_pairs(sample: &mut [f64], input_dim: usize, angle: f64) {
    let (sin, cos) = angle.sin_cos();
    for token in sample.chunks_mut(input_dim) {
        for pair in token.chunks_exact_mut(2) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = cos * a - sin * b;
            pair[1] = sin * a + cos * b;
        }
    }
}

fn hash_batch(hasher: &mut Sha256, batch: &Batch) {
    hasher.update((batch.sample_count() as u64).to_le_bytes());
    for v in &batch.features {
        hasher.update(v.to_le_bytes());
    }
    for &y in &batch.labels {
        hasher.update((y as u64).to_le_bytes());
    }
}

fn hash_batches(client_id: usize, train: &Batch, test: &Batch) -> Vec<u8> {
    let mut hasher = Sha256::new();
    hasher.update((client_id as u64).to_le_bytes());
    hash_batch(&mut hasher, train);
    hash_batch(&mut hasher, test);
    hasher.finalize().to_vec()
}

/// Order-sensitive SHA-256 over every client's features and labels, hex encoded.
pub fn partition_digest(datasets: &[ClientDataset]) -> Result<String> {
    if datasets.is_empty() {
        return Err(Error::contract("partition_digest of an empty partition"));
    }
    let mut hasher = Sha256::new();
    hasher.update((datasets.len() as u64).to_le_bytes());
    for d in datasets {
        hasher.update(hash_batches(d.client_id, &d.train, &d.test));
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    client: usize,
    split: &'a str,
    index: usize,
    label: usize,
    features: &'a [f64],
}

/// Writes one JSON object per sample:
/// `{"client", "split" ("train"|"test"), "index", "label", "features"}`,
/// where `features` is the flattened `phi × input_dim` token matrix.
pub fn export_partition<W: Write>(datasets: &[ClientDataset], mut out: W) -> Result<()> {
    for d in datasets {
        for (split, batch) in [("train", &d.train), ("test", &d.test)] {
            for index in 0..batch.sample_count() {
                let rec = SampleRecord {
                    client: d.client_id,
                    split,
                    index,
                    label: batch.labels[index],
                    features: batch.sample(index),
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(mode: SkewMode, alpha: f64) -> SkewSpec {
        SkewSpec {
            mode,
            alpha,
            rotation_angle: 0.4,
            n_classes: 5,
            samples_per_client: 60,
            input_dim: 4,
            phi: 2,
            noise_std: 0.5,
        }
    }

    #[test]
    fn histograms_and_splits() {
        for mode in [SkewMode::LabelSkew, SkewMode::FeatureShift] {
            let parts = generate_partition(5, &spec(mode, 1.0), 7).unwrap();
            assert_eq!(parts.len(), 5);
            for d in &parts {
                assert_eq!(d.class_counts.iter().sum::<usize>(), 60);
                assert_eq!(d.train.sample_count(), 48);
                assert_eq!(d.test.sample_count(), 12);
                assert!(d.train.labels.iter().chain(&d.test.labels).all(|&y| y < 5));
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let s = spec(SkewMode::LabelSkew, 0.5);
        let a = generate_partition(3, &s, 11).unwrap();
        let b = generate_partition(3, &s, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(partition_digest(&a).unwrap(), partition_digest(&b).unwrap());
        let c = generate_partition(3, &s, 12).unwrap();
        assert_ne!(partition_digest(&a).unwrap(), partition_digest(&c).unwrap());
    }

    #[test]
    fn flipped_label_changes_digest() {
        let mut parts = generate_partition(2, &spec(SkewMode::LabelSkew, 1.0), 3).unwrap();
        let before = partition_digest(&parts).unwrap();
        let y = parts[1].test.labels[0];
        parts[1].test.labels[0] = (y + 1) % 5;
        assert_ne!(partition_digest(&parts).unwrap(), before);
        assert!(partition_digest(&[]).is_err());
    }

    #[test]
    fn large_alpha_is_near_uniform() {
        let parts = generate_partition(5, &spec(SkewMode::LabelSkew, 1e6), 5).unwrap();
        for d in &parts {
            for &p in &d.class_proportions {
                assert!((p - 0.2).abs() < 0.02, "{p}");
            }
        }
    }

    #[test]
    fn small_alpha_concentrates() {
        let mut concentrated = 0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let any = (0..5).any(|_| {
                let p = dirichlet(0.1, 5, &mut rng).unwrap();
                p.iter().cloned().fold(0.0, f64::max) > 0.6
            });
            concentrated += usize::from(any);
        }
        assert!(concentrated >= 8, "{concentrated}/10");
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(SkewMode::LabelSkew, 0.0);
        assert!(generate_partition(2, &s, 0).is_err());
        s.alpha = 1.0;
        s.samples_per_client = 9;
        assert!(generate_partition(2, &s, 0).is_err());
        assert!(generate_partition(0, &spec(SkewMode::LabelSkew, 1.0), 0).is_err());
    }

    #[test]
    fn missing_class_is_infeasible() {
        // One client with a needle-sharp class mix leaves most classes empty.
        let mut s = spec(SkewMode::LabelSkew, 1e-3);
        s.samples_per_client = 10;
        let err = generate_partition(1, &s, 1).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn export_writes_one_line_per_sample() {
        let parts = generate_partition(2, &spec(SkewMode::FeatureShift, 1.0), 2).unwrap();
        let mut buf = Vec::new();
        export_partition(&parts, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 120);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["split"], "train");
        assert_eq!(first["features"].as_array().unwrap().len(), 8);
    }
}
