//! Long-tailed dataset synthesis, frequency-split bookkeeping, samplers, and
//! (de)serialization.
//!
//! Synthetic data lives on the unit sphere: each class gets a random unit
//! prototype and samples are the prototype plus isotropic Gaussian noise.
//! Train counts decay geometrically across class index so that
//! `n_0 / n_(C-1)` equals the requested imbalance ratio; val and test splits
//! are balanced. An optional background class (index 0) is drawn from a broad
//! shell covering all prototypes.

mod io;
mod sampler;

pub use io::write_predictions_csv;
pub use sampler::{ClassBalancedSampler, InstanceBalancedSampler, Sampler, SamplerKind};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numeric::l2_norm;

/// Imbalance-ratio presets used throughout the benchmark recipes.
pub const IMBALANCE_PRESETS: [f64; 3] = [100.0, 50.0, 10.0];

/// Reference maximum class size the default frequency thresholds (100, 20)
/// are calibrated against; thresholds scale as `max_count / 1280`.
pub const THRESHOLD_REFERENCE_MAX: f64 = 1280.0;

/// Mix a base seed with a stream salt (splitmix64 finalizer).
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrequencySplit {
    Many,
    Medium,
    Few,
}

impl FrequencySplit {
    pub fn as_str(self) -> &'static str {
        match self {
            FrequencySplit::Many => "many",
            FrequencySplit::Medium => "medium",
            FrequencySplit::Few => "few",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Generator profile for a synthetic long-tailed dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetProfile {
    /// Number of foreground classes.
    pub classes: usize,
    /// Largest per-class train count (head class).
    pub max_count: usize,
    /// N_max / N_min across train classes; 1 means balanced.
    pub imbalance_ratio: f64,
    pub feature_dim: usize,
    /// Isotropic noise around each class prototype.
    pub noise_sigma: f64,
    /// Seed for the prototype layout (separate from the sampling seed).
    pub prototype_seed: u64,
    /// Fraction of train samples that are background (class 0); 0 disables
    /// the background class entirely.
    pub background_fraction: f64,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Number of prototype clusters; 0 draws every prototype independently.
    /// With clusters, class i belongs to cluster i mod clusters, so each
    /// cluster mixes head and tail classes and tail errors become
    /// head-confusions rather than pure noise.
    pub clusters: usize,
    /// Within-cluster prototype offset scale (used when clusters > 0).
    pub cluster_spread: f64,
}

impl Default for DatasetProfile {
    fn default() -> Self {
        DatasetProfile {
            classes: 20,
            max_count: 500,
            imbalance_ratio: 100.0,
            feature_dim: 64,
            noise_sigma: 0.25,
            prototype_seed: 7,
            background_fraction: 0.0,
            val_per_class: 50,
            test_per_class: 100,
            clusters: 0,
            cluster_spread: 0.4,
        }
    }
}

impl DatasetProfile {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::InvalidConfig("data.classes must be >= 1".into()));
        }
        if self.max_count == 0 {
            return Err(Error::InvalidConfig("data.max_count must be >= 1".into()));
        }
        if self.imbalance_ratio < 1.0 || !self.imbalance_ratio.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "data.imbalance_ratio must be >= 1, got {}",
                self.imbalance_ratio
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidConfig("data.feature_dim must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidConfig("data.noise_sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return Err(Error::InvalidConfig(format!(
                "data.background_fraction must be in [0,1), got {}",
                self.background_fraction
            )));
        }
        if self.val_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::InvalidConfig("val/test per-class sizes must be >= 1".into()));
        }
        if self.clusters > 0 && (self.cluster_spread <= 0.0 || !self.cluster_spread.is_finite()) {
            return Err(Error::InvalidConfig("data.cluster_spread must be > 0".into()));
        }
        self.train_counts().map(|_| ())
    }

    /// Geometric count profile: n_i = round(max_count * ratio^(-i/(C-1))).
    pub fn train_counts(&self) -> Result<Vec<usize>> {
        let c = self.classes;
        let mut counts = Vec::with_capacity(c);
        for i in 0..c {
            let exponent = if c == 1 { 0.0 } else { -(i as f64) / (c as f64 - 1.0) };
            let n = (self.max_count as f64 * self.imbalance_ratio.powf(exponent)).round();
            if n < 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "class {i} rounds to zero train samples (max_count {} too small for ratio {})",
                    self.max_count, self.imbalance_ratio
                )));
            }
            counts.push(n as usize);
        }
        Ok(counts)
    }

    /// Frequency thresholds (hi, lo) scaled to this profile's head size.
    pub fn frequency_thresholds(&self) -> (f64, f64) {
        let scale = self.max_count as f64 / THRESHOLD_REFERENCE_MAX;
        (100.0 * scale, 20.0 * scale)
    }

    fn has_background(&self) -> bool {
        self.background_fraction > 0.0
    }
}

/// Tag classes by train count: many if n > hi, few if n < lo, else medium
/// (boundaries are inclusive into medium).
pub fn frequency_splits(counts: &[usize], thresholds: (f64, f64)) -> Vec<FrequencySplit> {
    let (hi, lo) = thresholds;
    counts
        .iter()
        .map(|&n| {
            let n = n as f64;
            if n > hi {
                FrequencySplit::Many
            } else if n < lo {
                FrequencySplit::Few
            } else {
                FrequencySplit::Medium
            }
        })
        .collect()
}

/// Labeled feature vectors with long-tailed per-class counts and split
/// bookkeeping. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_dim: usize,
    features: Vec<f64>,
    labels: Vec<u32>,
    split_tags: Vec<SplitTag>,
    class_train_counts: Vec<usize>,
    freq_splits: Vec<FrequencySplit>,
    thresholds: (f64, f64),
    has_background: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn classes(&self) -> usize {
        self.class_train_counts.len()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn split_tag(&self, i: usize) -> SplitTag {
        self.split_tags[i]
    }

    pub fn class_train_counts(&self) -> &[usize] {
        &self.class_train_counts
    }

    pub fn freq_splits(&self) -> &[FrequencySplit] {
        &self.freq_splits
    }

    pub fn thresholds(&self) -> (f64, f64) {
        self.thresholds
    }

    pub fn has_background(&self) -> bool {
        self.has_background
    }

    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split_tags[i] == tag).collect()
    }

    /// Deterministic synthesis from a profile: same (profile, seed) gives a
    /// bit-identical dataset. Balanced val/test samples are drawn before the
    /// train samples of each class.
    pub fn synthesize(profile: &DatasetProfile, seed: u64) -> Result<Dataset> {
        profile.validate()?;
        let dim = profile.feature_dim;
        let fg_counts = profile.train_counts()?;
        let total_fg: usize = fg_counts.iter().sum();

        // Background train count chosen so bg/(bg+fg) = background_fraction.
        let bg_train = if profile.has_background() {
            let f = profile.background_fraction;
            let n = (f / (1.0 - f) * total_fg as f64).round() as usize;
            n.max(1)
        } else {
            0
        };

        let mut proto_rng = ChaCha8Rng::seed_from_u64(profile.prototype_seed);
        let unit_vec = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = l2_norm(&v);
            v.iter().map(|x| x / n).collect()
        };
        let prototypes: Vec<Vec<f64>> = if profile.clusters == 0 {
            (0..profile.classes).map(|_| unit_vec(&mut proto_rng)).collect()
        } else {
            // class i sits in cluster i mod clusters: every cluster spans the
            // full head-to-tail frequency range
            let centers: Vec<Vec<f64>> =
                (0..profile.clusters).map(|_| unit_vec(&mut proto_rng)).collect();
            (0..profile.classes)
                .map(|i| {
                    let center = &centers[i % profile.clusters];
                    let offset = unit_vec(&mut proto_rng);
                    let v: Vec<f64> = center
                        .iter()
                        .zip(&offset)
                        .map(|(c, o)| c + profile.cluster_spread * o)
                        .collect();
                    let n = l2_norm(&v);
                    v.iter().map(|x| x / n).collect()
                })
                .collect()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5A17));
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut split_tags = Vec::new();

        let sample_fg = |class: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>| {
            let proto = &prototypes[class];
            for j in 0..dim {
                let noise: f64 = rng.sample(StandardNormal);
                out.push(proto[j] + profile.noise_sigma * noise);
            }
        };
        // Background: a point on a broad shell around the origin, covering the
        // whole prototype sphere, plus the same class noise.
        let sample_bg = |rng: &mut ChaCha8Rng, out: &mut Vec<f64>| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = l2_norm(&v).max(1e-12);
            let radius = rng.gen_range(0.8..1.2);
            for j in 0..dim {
                let noise: f64 = rng.sample(StandardNormal);
                out.push(v[j] / n * radius + profile.noise_sigma * noise);
            }
        };

        let label_offset = usize::from(profile.has_background());
        if profile.has_background() {
            for (count, tag) in [
                (profile.val_per_class, SplitTag::Val),
                (profile.test_per_class, SplitTag::Test),
                (bg_train, SplitTag::Train),
            ] {
                for _ in 0..count {
                    sample_bg(&mut rng, &mut features);
                    labels.push(0);
                    split_tags.push(tag);
                }
            }
        }
        for (class, &train_count) in fg_counts.iter().enumerate() {
            for (count, tag) in [
                (profile.val_per_class, SplitTag::Val),
                (profile.test_per_class, SplitTag::Test),
                (train_count, SplitTag::Train),
            ] {
                for _ in 0..count {
                    sample_fg(class, &mut rng, &mut features);
                    labels.push((class + label_offset) as u32);
                    split_tags.push(tag);
                }
            }
        }

        let mut class_train_counts = Vec::with_capacity(fg_counts.len() + label_offset);
        if profile.has_background() {
            class_train_counts.push(bg_train);
        }
        class_train_counts.extend_from_slice(&fg_counts);

        // Threshold scaling follows the largest foreground class so a huge
        // background count cannot inflate the split boundaries.
        let thresholds = profile.frequency_thresholds();
        let freq_splits = frequency_splits(&class_train_counts, thresholds);

        Ok(Dataset {
            feature_dim: dim,
            features,
            labels,
            split_tags,
            class_train_counts,
            freq_splits,
            thresholds,
            has_background: profile.has_background(),
        })
    }

    /// Assemble a dataset from raw parts (used by the CSV reader and tests).
    /// All samples are tagged Train; thresholds follow the scaled default.
    pub fn from_parts(feature_dim: usize, features: Vec<f64>, labels: Vec<u32>) -> Result<Dataset> {
        if feature_dim == 0 || features.len() != labels.len() * feature_dim {
            return Err(Error::shape(
                "dataset from_parts",
                labels.len() * feature_dim,
                features.len(),
            ));
        }
        if labels.is_empty() {
            return Err(Error::InvalidConfig("dataset has no samples".into()));
        }
        let classes = labels.iter().map(|&l| l as usize).max().unwrap() + 1;
        let mut class_train_counts = vec![0usize; classes];
        for &l in &labels {
            class_train_counts[l as usize] += 1;
        }
        if let Some(i) = class_train_counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidConfig(format!("class {i} has no samples")));
        }
        let max_count = *class_train_counts.iter().max().unwrap();
        let scale = max_count as f64 / THRESHOLD_REFERENCE_MAX;
        let thresholds = (100.0 * scale, 20.0 * scale);
        let freq_splits = frequency_splits(&class_train_counts, thresholds);
        let n = labels.len();
        Ok(Dataset {
            feature_dim,
            features,
            labels,
            split_tags: vec![SplitTag::Train; n],
            class_train_counts,
            freq_splits,
            thresholds,
            has_background: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_profile() -> DatasetProfile {
        DatasetProfile {
            classes: 10,
            max_count: 50,
            imbalance_ratio: 10.0,
            feature_dim: 8,
            noise_sigma: 0.2,
            prototype_seed: 3,
            background_fraction: 0.0,
            val_per_class: 4,
            test_per_class: 6,
            clusters: 0,
            cluster_spread: 0.4,
        }
    }

    #[test]
    fn balanced_profile_counts() {
        let p = DatasetProfile { imbalance_ratio: 1.0, ..small_profile() };
        let counts = p.train_counts().unwrap();
        assert!(counts.iter().all(|&n| n == 50));
    }

    #[test]
    fn geometric_endpoint() {
        let p = DatasetProfile {
            classes: 10,
            max_count: 1000,
            imbalance_ratio: 100.0,
            ..small_profile()
        };
        let counts = p.train_counts().unwrap();
        assert_eq!(counts[0], 1000);
        assert_eq!(counts[9], 10);
    }

    #[test]
    fn counts_non_increasing_and_ratio_respected() {
        for &ratio in &IMBALANCE_PRESETS {
            let p = DatasetProfile {
                classes: 20,
                max_count: 500,
                imbalance_ratio: ratio,
                ..small_profile()
            };
            let counts = p.train_counts().unwrap();
            for w in counts.windows(2) {
                assert!(w[0] >= w[1]);
            }
            let n_min = *counts.last().unwrap() as f64;
            let observed = counts[0] as f64 / n_min;
            let slack = 2.0 / n_min;
            assert!(observed >= ratio * (1.0 - slack) && observed <= ratio * (1.0 + slack));
        }
    }

    #[test]
    fn zero_count_class_is_error() {
        let p = DatasetProfile { max_count: 3, imbalance_ratio: 100.0, ..small_profile() };
        assert!(p.train_counts().is_err());
    }

    #[test]
    fn threshold_tagging() {
        let tags = frequency_splits(&[150, 100, 20, 19, 5], (100.0, 20.0));
        assert_eq!(
            tags,
            vec![
                FrequencySplit::Many,
                FrequencySplit::Medium,
                FrequencySplit::Medium,
                FrequencySplit::Few,
                FrequencySplit::Few,
            ]
        );
    }

    #[test]
    fn synthesis_is_deterministic() {
        let p = small_profile();
        let a = Dataset::synthesize(&p, 42).unwrap();
        let b = Dataset::synthesize(&p, 42).unwrap();
        assert_eq!(a, b);
        let c = Dataset::synthesize(&p, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn splits_are_balanced_and_counted() {
        let p = small_profile();
        let d = Dataset::synthesize(&p, 1).unwrap();
        let mut val_per_class = vec![0usize; d.classes()];
        let mut test_per_class = vec![0usize; d.classes()];
        let mut train_per_class = vec![0usize; d.classes()];
        for i in 0..d.len() {
            match d.split_tag(i) {
                SplitTag::Val => val_per_class[d.label(i)] += 1,
                SplitTag::Test => test_per_class[d.label(i)] += 1,
                SplitTag::Train => train_per_class[d.label(i)] += 1,
            }
        }
        assert!(val_per_class.iter().all(|&n| n == p.val_per_class));
        assert!(test_per_class.iter().all(|&n| n == p.test_per_class));
        assert_eq!(train_per_class, d.class_train_counts());
        assert_eq!(train_per_class, p.train_counts().unwrap());
    }

    #[test]
    fn background_class_present_when_requested() {
        let p = DatasetProfile { background_fraction: 0.5, ..small_profile() };
        let d = Dataset::synthesize(&p, 9).unwrap();
        assert!(d.has_background());
        assert_eq!(d.classes(), p.classes + 1);
        // bg train count roughly equals all foreground train samples combined
        let fg_total: usize = d.class_train_counts()[1..].iter().sum();
        let bg = d.class_train_counts()[0];
        assert!((bg as f64 - fg_total as f64).abs() <= 1.0);
        // background dominates, so it must be tagged many-shot
        assert_eq!(d.freq_splits()[0], FrequencySplit::Many);
    }

    #[test]
    fn every_frequency_split_nonempty_on_benchmark() {
        let p = DatasetProfile::default();
        let d = Dataset::synthesize(&p, 0).unwrap();
        for split in [FrequencySplit::Many, FrequencySplit::Medium, FrequencySplit::Few] {
            assert!(d.freq_splits().contains(&split), "{:?} empty", split);
        }
    }

    #[test]
    fn mix_seed_spreads() {
        assert_ne!(mix_seed(0, 0), mix_seed(0, 1));
        assert_ne!(mix_seed(1, 0), mix_seed(2, 0));
        assert_eq!(mix_seed(5, 3), mix_seed(5, 3));
    }
}
