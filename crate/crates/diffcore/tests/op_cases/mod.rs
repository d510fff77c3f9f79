//! Shared gradient-check cases, one per op kind.

#![allow(dead_code)]

use diffcore::gradcheck::{numeric_gradient, relative_error, DEFAULT_STEP};
use diffcore::{linalg, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Entries bounded away from zero so kinks and poles stay out of the FD stencil.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let t = randn(rng, shape);
    t.map(|x| {
        if x.abs() < 0.05 {
            x.signum() * 0.05 + x
        } else {
            x
        }
    })
}

pub fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    randn(rng, shape).map(|x| 0.2 + x.abs())
}

pub fn spd(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let a = randn(rng, &[n, n]);
    let mut s = linalg::matmul(&a, &a.transpose()).unwrap();
    for i in 0..n {
        s.set2(i, i, s.get2(i, i) + 0.5);
    }
    s
}

pub fn lower(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut l = randn(rng, &[n, n]);
    for i in 0..n {
        for j in 0..n {
            if j > i {
                l.set2(i, j, 0.0);
            } else if i == j {
                l.set2(i, i, 1.0 + l.get2(i, i).abs());
            }
        }
    }
    l
}

/// Reverse-mode vs central differences for `sum(build(inputs) * weights)`.
pub fn check(inputs: &[Tensor], build: Build, rng: &mut ChaCha8Rng) -> f64 {
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.leaf(t.clone())).collect();
    let out = build(&mut probe, &vars).unwrap();
    let weights = randn(rng, probe.shape(out));

    let loss_of = |ins: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs).unwrap();
        t.value(o)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let o = build(&mut t, &vars).unwrap();
    let w = t.constant(weights.clone());
    let prod = t.mul(o, w).unwrap();
    let loss = t.sum(prod);
    let grads = t.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], x);
        let numeric = numeric_gradient(x, DEFAULT_STEP, |p| {
            let mut ins = inputs.to_vec();
            ins[k] = p.clone();
            loss_of(&ins)
        });
        worst = worst.max(relative_error(analytic.data(), numeric.data(), 1e-8));
    }
    worst
}

pub struct Case {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub build: Build,
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5))
}

pub fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m, n]), randn(r, &[m, n])]
            },
            build: |t, v| t.add(v[0], v[1]),
        },
        Case {
            name: "add_broadcast",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m, n]), randn(r, &[n])]
            },
            build: |t, v| t.add(v[0], v[1]),
        },
        Case {
            name: "sub_broadcast_lhs",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[1, n]), randn(r, &[m, n])]
            },
            build: |t, v| t.sub(v[0], v[1]),
        },
        Case {
            name: "mul",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m, n]), randn(r, &[n])]
            },
            build: |t, v| t.mul(v[0], v[1]),
        },
        Case {
            name: "div",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m, n]), positive(r, &[m, n])]
            },
            build: |t, v| t.div(v[0], v[1]),
        },
        Case {
            name: "scale_shift",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m, n])]
            },
            build: |t, v| {
                let a = t.scale(v[0], -1.7);
                Ok(t.shift(a, 0.3))
            },
        },
        Case {
            name: "scale_rows",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m, n]), randn(r, &[m, 1])]
            },
            build: |t, v| t.scale_rows(v[0], v[1]),
        },
        Case {
            name: "matmul",
            make: |r| {
                let (m, k) = dims(r);
                let n = r.random_range(1..5);
                vec![randn(r, &[m, k]), randn(r, &[k, n])]
            },
            build: |t, v| t.matmul(v[0], v[1]),
        },
        Case {
            name: "transpose",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m, n])]
            },
            build: |t, v| t.transpose(v[0]),
        },
        Case {
            name: "concat",
            make: |r| {
                let (m, n) = dims(r);
                let k = r.random_range(1..4);
                vec![randn(r, &[m, n]), randn(r, &[m, k])]
            },
            build: |t, v| t.concat(&[v[0], v[1], v[0]], 1),
        },
        Case {
            name: "concat_rows",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m, n]), randn(r, &[1, n])]
            },
            build: |t, v| t.concat(&[v[0], v[1]], 0),
        },
        Case {
            name: "slice",
            make: |r| {
                let m = r.random_range(1..4);
                vec![randn(r, &[m, 5])]
            },
            build: |t, v| t.slice(v[0], 1, 1, 3),
        },
        Case {
            name: "reshape",
            make: |r| vec![randn(r, &[2, 3])],
            build: |t, v| t.reshape(v[0], &[3, 2]),
        },
        Case {
            name: "sum",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m, n])]
            },
            build: |t, v| Ok(t.sum(v[0])),
        },
        Case {
            name: "mean",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m, n])]
            },
            build: |t, v| Ok(t.mean(v[0])),
        },
        Case {
            name: "sum_last",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m, n])]
            },
            build: |t, v| t.sum_last(v[0]),
        },
        Case {
            name: "relu",
            make: |r| {
                let (m, n) = dims(r);
                vec![away_from_zero(r, &[m, n])]
            },
            build: |t, v| Ok(t.relu(v[0])),
        },
        Case {
            name: "sigmoid",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m, n])]
            },
            build: |t, v| Ok(t.sigmoid(v[0])),
        },
        Case {
            name: "tanh",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m, n])]
            },
            build: |t, v| Ok(t.tanh(v[0])),
        },
        Case {
            name: "exp",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m, n])]
            },
            build: |t, v| Ok(t.exp(v[0])),
        },
        Case {
            name: "log",
            make: |r| {
                let (m, n) = dims(r);
                vec![positive(r, &[m, n])]
            },
            build: |t, v| Ok(t.log(v[0])),
        },
        Case {
            name: "softplus",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m, n]).map(|x| 3.0 * x)]
            },
            build: |t, v| Ok(t.softplus(v[0])),
        },
        Case {
            name: "softmax",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m, n])]
            },
            build: |t, v| t.softmax(v[0]),
        },
        Case {
            name: "logsumexp",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m, n])]
            },
            build: |t, v| t.logsumexp(v[0]),
        },
        Case {
            name: "outer",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m]), randn(r, &[n])]
            },
            build: |t, v| t.outer(v[0], v[1]),
        },
        Case {
            name: "diag_and_embed",
            make: |r| {
                let n = r.random_range(1..5);
                vec![randn(r, &[n, n])]
            },
            build: |t, v| {
                let d = t.diag(v[0])?;
                t.diag_embed(d)
            },
        },
        Case {
            name: "cholesky",
            make: |r| {
                let n = r.random_range(1..6);
                vec![spd(r, n)]
            },
            build: |t, v| t.cholesky(v[0]),
        },
        Case {
            name: "inverse",
            make: |r| {
                let n = r.random_range(1..6);
                vec![spd(r, n)]
            },
            build: |t, v| t.inverse(v[0]),
        },
        Case {
            name: "trisolve",
            make: |r| {
                let n = r.random_range(1..6);
                let k = r.random_range(1..4);
                vec![lower(r, n), randn(r, &[n, k])]
            },
            build: |t, v| t.trisolve(v[0], v[1], false),
        },
        Case {
            name: "trisolve_transposed",
            make: |r| {
                let n = r.random_range(1..6);
                let k = r.random_range(1..4);
                vec![lower(r, n), randn(r, &[n, k])]
            },
            build: |t, v| t.trisolve(v[0], v[1], true),
        },
        Case {
            name: "gaussian_logpdf_diag",
            make: |r| {
                let (m, n) = dims(r);
                vec![randn(r, &[m, n]), randn(r, &[n]), positive(r, &[n])]
            },
            build: |t, v| t.gaussian_logpdf_diag(v[0], v[1], v[2]),
        },
        Case {
            name: "gaussian_logpdf_full",
            make: |r| {
                let n = r.random_range(1..5);
                vec![randn(r, &[n]), randn(r, &[n]), spd(r, n)]
            },
            build: |t, v| t.gaussian_logpdf_full(v[0], v[1], v[2]),
        },
        Case {
            name: "composite_chain",
            make: |r| {
                let n = r.random_range(1..4);
                vec![randn(r, &[1, n]), randn(r, &[n, n]), spd(r, n)]
            },
            build: |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.tanh(h);
                let ht = t.transpose(h)?;
                let x = t.spd_solve(v[2], ht)?;
                let s = t.softplus(x);
                let s = t.reshape(s, &[1, t.value(x).numel()])?;
                t.logsumexp(s)
            },
        },
    ]
}

/// Worst relative error of every case over `seeds` random draws.
pub fn sweep(seeds: u64) -> Vec<(&'static str, f64)> {
    cases()
        .into_iter()
        .map(|case| {
            let mut worst: f64 = 0.0;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + case.name.len() as u64);
                let inputs = (case.make)(&mut rng);
                worst = worst.max(check(&inputs, case.build, &mut rng));
            }
            (case.name, worst)
        })
        .collect()
}
