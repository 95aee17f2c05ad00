use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{indexed_seed, rng_from};

/// Train/validation/test proportions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { ratios: [0.70, 0.10, 0.20], seed: 0, stratified: true }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::invalid("ratios", "each ratio must lie in [0, 1]"));
        }
        if (self.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("ratios", "ratios must sum to 1"));
        }
        Ok(())
    }
}

/// Indices into the original sample list.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn cut(members: &[usize], ratios: &[f64; 3], out: &mut Split) {
    let n = members.len();
    let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    out.train.extend_from_slice(&members[..n_train]);
    out.val.extend_from_slice(&members[n_train..n_train + n_val]);
    out.test.extend_from_slice(&members[n_train + n_val..]);
}

/// Seeded split of `labels.len()` samples, stratified by label when requested.
///
/// Each class (or the whole set) is shuffled and cut at rounded ratio
/// boundaries, so per-class counts are within one subject of the ratios.
pub fn split_dataset(labels: &[usize], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if labels.len() < 10 {
        return Err(Error::TooFewSamples { needed: 10, got: labels.len() });
    }
    let mut split = Split::default();
    if spec.stratified {
        let k = labels.iter().copied().max().map_or(0, |m| m + 1);
        for class in 0..k {
            let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            members.shuffle(&mut rng_from(indexed_seed(spec.seed, "split", class as u64)));
            cut(&members, &spec.ratios, &mut split);
        }
    } else {
        let mut members: Vec<usize> = (0..labels.len()).collect();
        members.shuffle(&mut rng_from(indexed_seed(spec.seed, "split", u64::MAX)));
        cut(&members, &spec.ratios, &mut split);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_balanced_samples() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let s = split_dataset(&labels, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        assert_eq!(s, split_dataset(&labels, &SplitSpec::default()).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn per_class_counts_track_ratios() {
        let labels: Vec<usize> = (0..97).map(|i| i % 3).collect();
        let s = split_dataset(&labels, &SplitSpec { seed: 5, ..Default::default() }).unwrap();
        for class in 0..3 {
            let n = labels.iter().filter(|&&l| l == class).count() as f64;
            for (part, ratio) in [(&s.train, 0.7), (&s.val, 0.1), (&s.test, 0.2)] {
                let got = part.iter().filter(|&&i| labels[i] == class).count() as f64;
                assert!((got - n * ratio).abs() <= 1.0, "class {class}: {got} vs {}", n * ratio);
            }
        }
    }

    #[test]
    fn too_few_and_bad_ratios() {
        assert!(matches!(split_dataset(&[0; 9], &SplitSpec::default()), Err(Error::TooFewSamples { .. })));
        let bad = SplitSpec { ratios: [0.5, 0.2, 0.2], ..Default::default() };
        assert!(split_dataset(&[0; 20], &bad).is_err());
    }
}
