//! Library losses and metrics against straightforward scalar-loop oracles.

use cinp::eval::{auc, confusion_matrix, mcc};
use cinp::objectives::{inc_loss, inm_loss, mim_loss, similarity_matrix, HardNegativePairs};
use cinp::rng::rng_from;
use cinp::synth::{bold_to_fcn, BoldSeries, Volume3D};
use cinp::tensor::Tensor;
use rand::Rng;

const TOL: f64 = 1e-12;
const INSTANCES: u64 = 100;

fn rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    rows(rng, n, d)
        .into_iter()
        .map(|r| {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    let mut s = 0.0;
    for &x in xs {
        s += (x - m).exp();
    }
    m + s.ln()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * 1.0_f64.max(b.abs())
}

fn inc_oracle(v: &[Vec<f64>], w: &[Vec<f64>], tau: f64) -> f64 {
    let k = v.len();
    let mut s = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            s[i][j] = dot(&v[i], &w[j]) / tau;
        }
    }
    let mut image_side = 0.0;
    for i in 0..k {
        image_side += s[i][i] - log_sum_exp(&s[i]);
    }
    let mut network_side = 0.0;
    for j in 0..k {
        let col: Vec<f64> = (0..k).map(|i| s[i][j]).collect();
        network_side += s[j][j] - log_sum_exp(&col);
    }
    -0.5 * (image_side / k as f64 + network_side / k as f64)
}

#[test]
pub fn inc_anchor_two_orthonormal_pairs() {
    let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let expected = (1.0 + (-1.0_f64).exp()).ln();
    let got = inc_loss(&eye, &eye, 1.0).unwrap();
    assert!((got - expected).abs() <= TOL, "{got} vs {expected}");
}

#[test]
pub fn inc_matches_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = rng_from(seed);
        let k = rng.random_range(2..9);
        let d = rng.random_range(1..9);
        let tau = rng.random_range(0.05..2.0);
        let (v, w) = (unit_rows(&mut rng, k, d), unit_rows(&mut rng, k, d));
        let got = inc_loss(&Tensor::from_rows(&v).unwrap(), &Tensor::from_rows(&w).unwrap(), tau).unwrap();
        let want = inc_oracle(&v, &w, tau);
        assert!(close(got, want), "seed {seed}: {got} vs {want}");
    }
}

#[test]
pub fn similarity_matches_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = rng_from(seed);
        let k = rng.random_range(1..9);
        let d = rng.random_range(1..9);
        let (v, w) = (unit_rows(&mut rng, k, d), unit_rows(&mut rng, k, d));
        let s = similarity_matrix(&Tensor::from_rows(&v).unwrap(), &Tensor::from_rows(&w).unwrap()).unwrap();
        for i in 0..k {
            for j in 0..k {
                let want = dot(&v[i], &w[j]);
                assert!(close(s.data()[i * k + j], want), "seed {seed} ({i},{j})");
            }
        }
    }
}

#[test]
pub fn mim_matches_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = rng_from(seed);
        let dims = [rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5)];
        let n: usize = dims.iter().product();
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut want = 0.0;
        for i in 0..n {
            want += (a[i] - b[i]).abs();
        }
        want /= n as f64;
        let got = mim_loss(&Volume3D::new(dims, a, "a").unwrap(), &Volume3D::new(dims, b, "b").unwrap()).unwrap();
        assert!(close(got, want), "seed {seed}: {got} vs {want}");
    }
}

#[test]
pub fn inm_matches_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = rng_from(seed);
        let k = rng.random_range(2..7);
        let d = rng.random_range(1..6);
        let (v, w) = (unit_rows(&mut rng, k, d), unit_rows(&mut rng, k, d));
        let other = |i: usize, rng: &mut rand_chacha::ChaCha8Rng| (i + rng.random_range(1..k)) % k;
        let pairs = HardNegativePairs {
            network_for_image: (0..k).map(|i| other(i, &mut rng)).collect(),
            image_for_network: (0..k).map(|j| other(j, &mut rng)).collect(),
        };
        let head_w = rows(&mut rng, 2 * d, 2);
        let head_b = rows(&mut rng, 1, 2);

        let mut examples = Vec::new();
        for i in 0..k {
            examples.push((i, i, 1usize));
        }
        for i in 0..k {
            examples.push((i, pairs.network_for_image[i], 0));
        }
        for j in 0..k {
            examples.push((pairs.image_for_network[j], j, 0));
        }
        let mut want = 0.0;
        for &(i, j, target) in &examples {
            let x: Vec<f64> = v[i].iter().chain(&w[j]).copied().collect();
            let mut logits = [head_b[0][0], head_b[0][1]];
            for (r, xr) in x.iter().enumerate() {
                logits[0] += xr * head_w[r][0];
                logits[1] += xr * head_w[r][1];
            }
            want -= logits[target] - log_sum_exp(&logits);
        }
        want /= examples.len() as f64;

        let got = inm_loss(
            &Tensor::from_rows(&v).unwrap(),
            &Tensor::from_rows(&w).unwrap(),
            &pairs,
            &Tensor::from_rows(&head_w).unwrap(),
            &Tensor::from_rows(&head_b).unwrap(),
        )
        .unwrap();
        assert!(close(got, want), "seed {seed}: {got} vs {want}");
    }
}

#[test]
pub fn pearson_matches_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = rng_from(seed);
        let n = rng.random_range(2..8);
        let t = rng.random_range(8..40);
        let series = rows(&mut rng, n, t);
        let fcn = bold_to_fcn(&BoldSeries::from_rows(&series).unwrap()).unwrap();
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (&series[i], &series[j]);
                let tf = t as f64;
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for s in 0..t {
                    sx += x[s];
                    sy += y[s];
                    sxx += x[s] * x[s];
                    syy += y[s] * y[s];
                    sxy += x[s] * y[s];
                }
                let want = (tf * sxy - sx * sy) / ((tf * sxx - sx * sx) * (tf * syy - sy * sy)).sqrt();
                assert!(close(fcn.get(i, j), want), "seed {seed} ({i},{j}): {} vs {want}", fcn.get(i, j));
            }
        }
    }
}

fn mcc_oracle(c: &[Vec<usize>]) -> f64 {
    let k = c.len();
    let mut s = 0.0;
    let mut correct = 0.0;
    let mut t = vec![0.0; k];
    let mut p = vec![0.0; k];
    for i in 0..k {
        for j in 0..k {
            let x = c[i][j] as f64;
            s += x;
            t[i] += x;
            p[j] += x;
            if i == j {
                correct += x;
            }
        }
    }
    let mut pt = 0.0;
    let mut pp = 0.0;
    let mut tt = 0.0;
    for i in 0..k {
        pt += p[i] * t[i];
        pp += p[i] * p[i];
        tt += t[i] * t[i];
    }
    let den = ((s * s - pp) * (s * s - tt)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (correct * s - pt) / den
    }
}

#[test]
pub fn mcc_matches_oracle() {
    for seed in 0..INSTANCES {
        let mut rng = rng_from(seed);
        let k = rng.random_range(2..5);
        let n = rng.random_range(1..60);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let preds: Vec<usize> =
            labels.iter().map(|&l| if rng.random_bool(0.6) { l } else { rng.random_range(0..k) }).collect();
        let c = confusion_matrix(&preds, &labels, k).unwrap();
        let got = mcc(&c);
        let want = mcc_oracle(&c);
        assert!(close(got, want), "seed {seed}: {got} vs {want}");
    }
}

#[test]
pub fn mcc_binary_textbook_form() {
    // tp=6, fn=2, fp=1, tn=11
    let c = vec![vec![11, 1], vec![2, 6]];
    let (tp, tn, fp, fnn) = (6.0, 11.0, 1.0, 2.0);
    let want = (tp * tn - fp * fnn) / ((tp + fp) * (tp + fnn) * (tn + fp) * (tn + fnn) as f64).sqrt();
    assert!(close(mcc(&c), want));
}

#[test]
pub fn auc_matches_pair_counting() {
    for seed in 0..INSTANCES {
        let mut rng = rng_from(seed);
        let n = rng.random_range(2..50);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // Coarse scores so ties occur.
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6u8)) * 0.5).collect();
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        let got = auc(&scores, &labels).unwrap();
        assert!(close(got, wins / pairs), "seed {seed}: {got} vs {}", wins / pairs);
    }
}
