use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::rng::rng_from;
use crate::tensor::Tensor;

/// One non-matching partner per image and per network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardNegativePairs {
    /// `network_for_image[i] = j` with `j != i`.
    pub network_for_image: Vec<usize>,
    /// `image_for_network[j] = i` with `i != j`.
    pub image_for_network: Vec<usize>,
}

impl HardNegativePairs {
    pub fn len(&self) -> usize {
        self.network_for_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.network_for_image.is_empty()
    }
}

/// Draws an off-diagonal index with probability proportional to `exp(s / tau)`.
fn draw(scores: impl Iterator<Item = (usize, f64)>, tau: f64, rng: &mut crate::rng::Rng) -> usize {
    let (idx, logits): (Vec<usize>, Vec<f64>) = scores.map(|(j, s)| (j, s / tau)).unzip();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let dist = WeightedIndex::new(&weights).expect("at least one weight equals 1");
    idx[dist.sample(rng)]
}

/// Samples hard negatives from a `K x K` similarity matrix.
///
/// Image `i` gets network `j != i` with probability proportional to
/// `exp(S[i][j] / tau)` over its row; network `j` gets image `i != j` with
/// probability proportional to `exp(S[i][j] / tau)` over its column.
pub fn sample_hard_negatives(sim: &Tensor, tau: f64, seed: u64) -> HardNegativePairs {
    let k = sim.rows();
    assert!(k >= 2 && sim.cols() == k, "hard negatives need a square K >= 2 similarity matrix");
    let tau = if tau > 0.0 && tau.is_finite() { tau } else { 1.0 };
    let s = sim.data();
    let mut rng = rng_from(seed);
    let network_for_image = (0..k)
        .map(|i| draw((0..k).filter(|&j| j != i).map(|j| (j, s[i * k + j])), tau, &mut rng))
        .collect();
    let image_for_network = (0..k)
        .map(|j| draw((0..k).filter(|&i| i != j).map(|i| (i, s[i * k + j])), tau, &mut rng))
        .collect();
    HardNegativePairs { network_for_image, image_for_network }
}
