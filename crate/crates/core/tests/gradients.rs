//! Analytic gradients against central finite differences.

use cinp::model::{init_params, ModelCfg, NetworkEncoderCfg, VisualEncoderCfg};
use cinp::objectives::{total_loss, ObjectiveCfg};
use cinp::rng::rng_from;
use cinp::synth::{gen_paired_cohort, CohortSpec};
use cinp::tensor::{grad_check, Graph, Tensor, Var};
use cinp::Result;
use rand::Rng;

const PRIMITIVE_TOL: f64 = 1e-5;
const OBJECTIVE_TOL: f64 = 1e-4;
const H: f64 = 1e-5;
/// Smaller step for the full objective: the L1 reconstruction term has kinks
/// and a residual within `H` of zero would bias the difference quotient.
const H_OBJECTIVE: f64 = 1e-6;

fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero with random sign.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts any node with a fixed random weight so every output entry matters.
fn contract(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = rng_from(seed ^ 0x5eed);
    let w = g.constant(&random(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

struct Case {
    name: &'static str,
    check: Box<dyn Fn(u64) -> f64>,
}

fn case<F>(name: &'static str, check: F) -> Case
where
    F: Fn(u64) -> f64 + 'static,
{
    Case { name, check: Box::new(check) }
}

fn unary<F>(x: Tensor, seed: u64, op: F) -> f64
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check(
        |g, v| {
            let out = op(g, v)?;
            contract(g, out, seed)
        },
        &x,
        H,
    )
    .unwrap()
}

/// Checks the gradient with respect to each operand in turn.
fn binary<F>(a: Tensor, b: Tensor, seed: u64, op: F) -> f64
where
    F: Fn(&mut Graph, Var, Var) -> Result<Var>,
{
    let wrt_a = grad_check(
        |g, v| {
            let bv = g.constant(&b);
            let out = op(g, v, bv)?;
            contract(g, out, seed)
        },
        &a,
        H,
    )
    .unwrap();
    let wrt_b = grad_check(
        |g, v| {
            let av = g.constant(&a);
            let out = op(g, av, v)?;
            contract(g, out, seed)
        },
        &b,
        H,
    )
    .unwrap();
    wrt_a.max(wrt_b)
}

fn dims(seed: u64) -> (usize, usize, usize) {
    let mut rng = rng_from(seed);
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

fn primitive_cases() -> Vec<Case> {
    vec![
        case("add", |s| {
            let (m, n, _) = dims(s);
            let mut r = rng_from(s);
            binary(random(&mut r, &[m, n], -1.0, 1.0), random(&mut r, &[m, n], -1.0, 1.0), s, |g, a, b| g.add(a, b))
        }),
        case("sub", |s| {
            let (m, n, _) = dims(s);
            let mut r = rng_from(s);
            binary(random(&mut r, &[m, n], -1.0, 1.0), random(&mut r, &[m, n], -1.0, 1.0), s, |g, a, b| g.sub(a, b))
        }),
        case("mul", |s| {
            let (m, n, _) = dims(s);
            let mut r = rng_from(s);
            binary(random(&mut r, &[m, n], -1.0, 1.0), random(&mut r, &[m, n], -1.0, 1.0), s, |g, a, b| g.mul(a, b))
        }),
        case("add_broadcast", |s| {
            let (m, n, _) = dims(s);
            let mut r = rng_from(s);
            binary(random(&mut r, &[m * 2, n], -1.0, 1.0), random(&mut r, &[1, n], -1.0, 1.0), s, |g, a, b| {
                g.add_broadcast(a, b)
            })
        }),
        case("mul_broadcast", |s| {
            let (m, n, _) = dims(s);
            let mut r = rng_from(s);
            binary(random(&mut r, &[m * 2, n], -1.0, 1.0), random(&mut r, &[1, n], -1.0, 1.0), s, |g, a, b| {
                g.mul_broadcast(a, b)
            })
        }),
        case("scale", |s| {
            let (m, n, _) = dims(s);
            unary(random(&mut rng_from(s), &[m, n], -1.0, 1.0), s, |g, a| Ok(g.scale(a, -1.7)))
        }),
        case("scale_by", |s| {
            let (m, n, _) = dims(s);
            let mut r = rng_from(s);
            binary(random(&mut r, &[m, n], -1.0, 1.0), random(&mut r, &[1], 0.5, 2.0), s, |g, a, b| g.scale_by(a, b))
        }),
        case("matmul", |s| {
            let (m, k, n) = dims(s);
            let mut r = rng_from(s);
            binary(random(&mut r, &[m, k], -1.0, 1.0), random(&mut r, &[k, n], -1.0, 1.0), s, |g, a, b| g.matmul(a, b))
        }),
        case("transpose", |s| {
            let (m, n, _) = dims(s);
            unary(random(&mut rng_from(s), &[m, n], -1.0, 1.0), s, |g, a| g.transpose(a))
        }),
        case("exp", |s| {
            let (m, n, _) = dims(s);
            unary(random(&mut rng_from(s), &[m, n], -1.0, 1.0), s, |g, a| Ok(g.exp(a)))
        }),
        case("log", |s| {
            let (m, n, _) = dims(s);
            unary(random(&mut rng_from(s), &[m, n], 0.5, 2.0), s, |g, a| Ok(g.log(a)))
        }),
        case("abs", |s| {
            let (m, n, _) = dims(s);
            unary(away_from_zero(&mut rng_from(s), &[m, n]), s, |g, a| Ok(g.abs(a)))
        }),
        case("gelu", |s| {
            let (m, n, _) = dims(s);
            unary(random(&mut rng_from(s), &[m, n], -3.0, 3.0), s, |g, a| Ok(g.gelu(a)))
        }),
        case("sum", |s| {
            let (m, n, _) = dims(s);
            unary(random(&mut rng_from(s), &[m, n], -1.0, 1.0), s, |g, a| Ok(g.sum(a)))
        }),
        case("mean", |s| {
            let (m, n, _) = dims(s);
            unary(random(&mut rng_from(s), &[m, n], -1.0, 1.0), s, |g, a| Ok(g.mean(a)))
        }),
        case("concat_rows", |s| {
            let (m, n, k) = dims(s);
            let mut r = rng_from(s);
            binary(random(&mut r, &[m, n], -1.0, 1.0), random(&mut r, &[k, n], -1.0, 1.0), s, |g, a, b| {
                g.concat_rows(&[a, b])
            })
        }),
        case("concat_cols", |s| {
            let (m, n, k) = dims(s);
            let mut r = rng_from(s);
            binary(random(&mut r, &[m, n], -1.0, 1.0), random(&mut r, &[m, k], -1.0, 1.0), s, |g, a, b| {
                g.concat_cols(&[b, a])
            })
        }),
        case("softmax_rows", |s| {
            let (m, n, _) = dims(s);
            unary(random(&mut rng_from(s), &[m, n + 1], -2.0, 2.0), s, |g, a| g.softmax_rows(a))
        }),
        case("log_softmax_rows", |s| {
            let (m, n, _) = dims(s);
            unary(random(&mut rng_from(s), &[m, n + 1], -2.0, 2.0), s, |g, a| g.log_softmax_rows(a))
        }),
        case("l2_normalize_rows", |s| {
            let (m, n, _) = dims(s);
            unary(away_from_zero(&mut rng_from(s), &[m, n + 1]), s, |g, a| g.l2_normalize_rows(a))
        }),
        case("layer_norm_rows", |s| {
            let (m, n, _) = dims(s);
            unary(random(&mut rng_from(s), &[m, n + 2], -2.0, 2.0), s, |g, a| g.layer_norm_rows(a, 1e-5))
        }),
        case("gather", |s| {
            let (m, n, _) = dims(s);
            let mut r = rng_from(s);
            let idx: Vec<usize> = (0..7).map(|_| r.random_range(0..m * n)).collect();
            unary(random(&mut r, &[m, n], -1.0, 1.0), s, move |g, a| g.gather(a, idx.clone(), vec![7]))
        }),
        case("select_rows", |s| {
            let (m, n, _) = dims(s);
            let mut r = rng_from(s);
            let rows: Vec<usize> = (0..5).map(|_| r.random_range(0..m)).collect();
            unary(random(&mut r, &[m, n], -1.0, 1.0), s, move |g, a| g.select_rows(a, &rows))
        }),
        case("mean_groups", |s| {
            let (m, n, t) = dims(s);
            unary(random(&mut rng_from(s), &[m * t, n], -1.0, 1.0), s, move |g, a| g.mean_groups(a, m))
        }),
        case("attention", |s| {
            let (groups, t, heads) = dims(s);
            let dh = 1 + (s as usize % 3);
            let d = heads * dh;
            unary(random(&mut rng_from(s), &[groups * t, 3 * d], -1.0, 1.0), s, move |g, a| {
                g.attention(a, groups, heads)
            })
        }),
        case("reshape", |s| {
            let (m, n, _) = dims(s);
            unary(random(&mut rng_from(s), &[m, n], -1.0, 1.0), s, move |g, a| g.reshape(a, vec![n, m]))
        }),
    ]
}

#[test]
pub fn primitives_match_finite_differences() {
    let mut failures = Vec::new();
    for c in primitive_cases() {
        for seed in 0..3u64 {
            for shape_draw in 0..4u64 {
                let s = seed * 1000 + shape_draw;
                let err = (c.check)(s);
                if !(err < PRIMITIVE_TOL) {
                    failures.push(format!("{} seed {s}: {err:.3e}", c.name));
                }
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
pub fn composed_chain_matches_finite_differences() {
    for seed in 0..3u64 {
        let mut r = rng_from(seed);
        let x = random(&mut r, &[6, 4], -1.0, 1.0);
        let w = random(&mut r, &[4, 12], -0.5, 0.5);
        let err = grad_check(
            |g, v| {
                let wv = g.constant(&w);
                let h = g.layer_norm_rows(v, 1e-5)?;
                let qkv = g.matmul(h, wv)?;
                let a = g.attention(qkv, 2, 2)?;
                let a = g.gelu(a);
                let pooled = g.mean_groups(a, 2)?;
                let z = g.l2_normalize_rows(pooled)?;
                let lp = g.log_softmax_rows(z)?;
                contract(g, lp, seed)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < PRIMITIVE_TOL, "seed {seed}: {err:.3e}");
    }
}

fn toy_cfg() -> ModelCfg {
    ModelCfg {
        visual: VisualEncoderCfg {
            input_dims: [4, 4, 4],
            patch_size: 2,
            embed_dim: 4,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 1,
            positional: true,
        },
        network: NetworkEncoderCfg { n_rois: 4, embed_dim: 4, n_layers: 1, n_heads: 2, mlp_ratio: 1, positional: true },
        tau_init: 0.5,
    }
}

#[test]
pub fn full_objective_matches_finite_differences() {
    let cfg = toy_cfg();
    let obj = ObjectiveCfg::default();
    for seed in 0..3u64 {
        let spec = CohortSpec { n_subjects: 2, k_classes: 2, dims: [4, 4, 4], n_rois: 4, n_timepoints: 16, seed };
        let cohort = gen_paired_cohort(&spec).unwrap();
        let batch: Vec<_> = cohort.iter().collect();
        let mut params = init_params(&cfg, seed).unwrap();
        // Larger weights than the default init so every term has a visible slope.
        for (_, t) in params.iter_mut().filter(|(n, _)| *n != "log_temperature") {
            let scaled: Vec<f64> = t.data().iter().map(|x| x * 5.0).collect();
            *t = Tensor::new(t.shape().to_vec(), scaled).unwrap().with_requires_grad(t.requires_grad());
        }
        let step_seed = seed + 77;

        let mut fwd = total_loss(&batch, &params, &cfg, &obj, step_seed).unwrap();
        assert!(fwd.report.mim > 0.0 && fwd.report.inm > 0.0);
        fwd.graph.backward(fwd.loss).unwrap();
        params.collect_grads(&fwd.graph, &fwd.bound);

        let loss_at = |p: &cinp::model::ModelParams| total_loss(&batch, p, &cfg, &obj, step_seed).unwrap().report.total;
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        let mut worst = (0.0_f64, String::new());
        for name in &names {
            let t = params.get(name).unwrap().clone();
            let analytic = t.grad().expect("every parameter receives a gradient").to_vec();
            for i in 0..t.numel() {
                let mut probe = params.clone();
                let mut eval = |delta: f64| {
                    let mut data = t.data().to_vec();
                    data[i] += delta;
                    *probe.get_mut(name).unwrap() = Tensor::new(t.shape().to_vec(), data).unwrap();
                    loss_at(&probe)
                };
                let fd = (eval(H_OBJECTIVE) - eval(-H_OBJECTIVE)) / (2.0 * H_OBJECTIVE);
                let ad = analytic[i];
                let err = (ad - fd).abs() / 1.0_f64.max(ad.abs()).max(fd.abs());
                if err > worst.0 {
                    worst = (err, format!("{name}[{i}] ad {ad:.6e} fd {fd:.6e}"));
                }
            }
        }
        assert!(worst.0 < OBJECTIVE_TOL, "seed {seed}: {:.3e} at {}", worst.0, worst.1);
    }
}
