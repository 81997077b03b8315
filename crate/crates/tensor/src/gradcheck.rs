//! Analytic gradients against central finite differences of independent
//! `f64` reference forwards.
//!
//! For an op with output `y`, the checked loss is `Σ r ⊙ y` with fixed
//! random weights `r`. The error for an input is
//! `max |analytic - numeric| / max |numeric|`, i.e. relative to the
//! gradient's own scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, Tensor, Var, BATCHNORM_EPS};

/// Finite-difference step. The references run in f64, so it can be small
/// enough that a perturbation rarely straddles a ReLU kink.
pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-3;

pub type Build = dyn Fn(&mut Graph<'_>, &[Var]) -> Var;
pub type Reference = dyn Fn(&[Vec<f64>]) -> Vec<f64>;
pub type MakeInputs = dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>;

pub struct Case {
    pub name: String,
    pub inputs: Box<MakeInputs>,
    pub build: Box<Build>,
    pub reference: Box<Reference>,
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
        build: impl Fn(&mut Graph<'_>, &[Var]) -> Var + 'static,
        reference: impl Fn(&[Vec<f64>]) -> Vec<f64> + 'static,
    ) -> Self {
        Case {
            name: name.into(),
            inputs: Box::new(inputs),
            build: Box::new(build),
            reference: Box::new(reference),
        }
    }

    /// Worst relative error over `instances` seeded input draws.
    pub fn worst_error(&self, instances: u64) -> Result<f64, String> {
        let mut worst = 0.0f64;
        for seed in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = (self.inputs)(&mut rng);
            let err = relative_error(&inputs, &*self.build, &*self.reference, seed)
                .map_err(|e| format!("{}: seed {seed}: {e}", self.name))?;
            worst = worst.max(err);
        }
        Ok(worst)
    }
}

/// Checks every input of one instance; fails if the forward values disagree.
pub fn relative_error(
    inputs: &[Tensor],
    build: &Build,
    reference: &Reference,
    seed: u64,
) -> Result<f64, String> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let out_len = g.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights: Vec<f32> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = g.constant(
        Tensor::new(g.value(out).shape().to_vec(), weights.clone()).map_err(|e| e.to_string())?,
    );
    let weighted = g.mul(out, r).map_err(|e| e.to_string())?;
    let loss = g.sum(weighted);
    g.backward(loss).map_err(|e| e.to_string())?;

    let base: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&x| f64::from(x)).collect())
        .collect();
    let objective = |xs: &[Vec<f64>]| -> f64 {
        reference(xs)
            .iter()
            .zip(&weights)
            .map(|(y, &w)| y * f64::from(w))
            .sum()
    };
    let ref_out = reference(&base);
    if ref_out.len() != out_len {
        return Err(format!(
            "reference gives {} outputs, graph {out_len}",
            ref_out.len()
        ));
    }
    for (a, b) in ref_out.iter().zip(g.value(out).data()) {
        if (a - f64::from(*b)).abs() > 1e-4 * (1.0 + a.abs()) {
            return Err(format!("forward mismatch: reference {a}, graph {b}"));
        }
    }

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = vec![0.0; base[i].len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let mut plus = base.clone();
            plus[i][k] += STEP;
            let mut minus = base.clone();
            minus[i][k] -= STEP;
            *slot = (objective(&plus) - objective(&minus)) / (2.0 * STEP);
        }
        let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if scale < 1e-9 {
            continue;
        }
        let err = numeric
            .iter()
            .zip(analytic.data())
            .map(|(n, &a)| (n - f64::from(a)).abs())
            .fold(0.0, f64::max)
            / scale;
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape matches data")
}

/// Values kept at least `gap` away from zero, so that a kink at 0 is not crossed.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32) -> Tensor {
    let mut t = random_tensor(rng, shape, -1.0, 1.0);
    for x in t.data_mut() {
        if x.abs() < gap {
            *x = if *x < 0.0 { -gap } else { gap };
        }
    }
    t
}

pub fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

pub fn softmax_ref(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
        out.extend(row.iter().map(|v| (v - max).exp() / total));
    }
    out
}

pub fn batchnorm_ref(x: &[f64], gamma: &[f64], beta: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let eps = f64::from(BATCHNORM_EPS);
    let mut out = vec![0.0; x.len()];
    for j in 0..cols {
        let col: Vec<f64> = (0..rows).map(|r| x[r * cols + j]).collect();
        let mean = col.iter().sum::<f64>() / rows as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
        for r in 0..rows {
            out[r * cols + j] = gamma[j] * (x[r * cols + j] - mean) / (var + eps).sqrt() + beta[j];
        }
    }
    out
}

fn m45(rng: &mut ChaCha8Rng) -> Tensor {
    random_tensor(rng, &[4, 5], -1.0, 1.0)
}

/// One case per differentiable graph operation (broadcast forms included).
pub fn primitive_cases() -> Vec<Case> {
    const IDS: [usize; 6] = [3, 0, 3, 1, 4, 3];
    const TARGETS: [usize; 4] = [2, 0, 4, 2];
    const MEAN: [f32; 5] = [0.1, -0.2, 0.3, 0.0, 0.5];
    const VAR: [f32; 5] = [1.0, 0.5, 2.0, 0.8, 1.2];
    let row = |rng: &mut ChaCha8Rng| random_tensor(rng, &[5], -1.0, 1.0);
    let pair = |rng: &mut ChaCha8Rng| vec![m45(rng), m45(rng)];
    let bn_inputs = |rng: &mut ChaCha8Rng| {
        vec![
            random_tensor(rng, &[4, 5], -2.0, 2.0),
            random_tensor(rng, &[5], 0.5, 1.5),
            random_tensor(rng, &[5], -1.0, 1.0),
        ]
    };
    let mu_sigma = |rng: &mut ChaCha8Rng| vec![m45(rng), random_tensor(rng, &[4, 5], 0.5, 1.5)];
    let eps = random_tensor(&mut ChaCha8Rng::seed_from_u64(99), &[4, 5], -2.0, 2.0);
    let eps_ref: Vec<f64> = eps.data().iter().map(|&e| f64::from(e)).collect();
    vec![
        Case::new(
            "matmul",
            |rng| vec![m45(rng), random_tensor(rng, &[5, 3], -1.0, 1.0)],
            |g, v| g.matmul(v[0], v[1]).unwrap(),
            |x| matmul_ref(&x[0], &x[1], 4, 5, 3),
        ),
        Case::new(
            "add",
            pair,
            |g, v| g.add(v[0], v[1]).unwrap(),
            |x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect(),
        ),
        Case::new(
            "sub",
            pair,
            |g, v| g.sub(v[0], v[1]).unwrap(),
            |x| x[0].iter().zip(&x[1]).map(|(a, b)| a - b).collect(),
        ),
        Case::new(
            "mul",
            pair,
            |g, v| g.mul(v[0], v[1]).unwrap(),
            |x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect(),
        ),
        Case::new(
            "add (row broadcast)",
            move |rng| vec![m45(rng), row(rng)],
            |g, v| g.add(v[0], v[1]).unwrap(),
            |x| {
                x[0].iter()
                    .enumerate()
                    .map(|(k, a)| a + x[1][k % 5])
                    .collect()
            },
        ),
        Case::new(
            "sub (row broadcast)",
            move |rng| vec![m45(rng), row(rng)],
            |g, v| g.sub(v[0], v[1]).unwrap(),
            |x| {
                x[0].iter()
                    .enumerate()
                    .map(|(k, a)| a - x[1][k % 5])
                    .collect()
            },
        ),
        Case::new(
            "mul (row broadcast)",
            move |rng| vec![m45(rng), row(rng)],
            |g, v| g.mul(v[0], v[1]).unwrap(),
            |x| {
                x[0].iter()
                    .enumerate()
                    .map(|(k, a)| a * x[1][k % 5])
                    .collect()
            },
        ),
        Case::new(
            "relu",
            |rng| vec![away_from_zero(rng, &[4, 5], 0.01)],
            |g, v| g.relu(v[0]),
            |x| x[0].iter().map(|a| a.max(0.0)).collect(),
        ),
        Case::new(
            "exp",
            |rng| vec![m45(rng)],
            |g, v| g.exp(v[0]),
            |x| x[0].iter().map(|a| a.exp()).collect(),
        ),
        Case::new(
            "square",
            |rng| vec![m45(rng)],
            |g, v| g.square(v[0]),
            |x| x[0].iter().map(|a| a * a).collect(),
        ),
        Case::new(
            "scale",
            |rng| vec![m45(rng)],
            |g, v| g.scale(v[0], -2.5),
            |x| x[0].iter().map(|a| -2.5 * a).collect(),
        ),
        Case::new(
            "add_scalar",
            |rng| vec![m45(rng)],
            |g, v| g.add_scalar(v[0], 0.75),
            |x| x[0].iter().map(|a| a + 0.75).collect(),
        ),
        Case::new(
            "reshape",
            |rng| vec![m45(rng)],
            |g, v| g.reshape(v[0], &[2, 10]).unwrap(),
            |x| x[0].clone(),
        ),
        Case::new(
            "sum",
            |rng| vec![m45(rng)],
            |g, v| g.sum(v[0]),
            |x| vec![x[0].iter().sum()],
        ),
        Case::new(
            "embedding",
            |rng| vec![random_tensor(rng, &[5, 4], -1.0, 1.0)],
            |g, v| g.embedding(v[0], &IDS).unwrap(),
            |x| {
                IDS.iter()
                    .flat_map(|&i| x[0][i * 4..(i + 1) * 4].to_vec())
                    .collect()
            },
        ),
        Case::new(
            "batchnorm_train",
            bn_inputs,
            |g, v| g.batchnorm_train(v[0], v[1], v[2]).unwrap().0,
            |x| batchnorm_ref(&x[0], &x[1], &x[2], 4, 5),
        ),
        Case::new(
            "batchnorm_eval",
            bn_inputs,
            |g, v| g.batchnorm_eval(v[0], v[1], v[2], &MEAN, &VAR).unwrap(),
            |x| {
                let eps = f64::from(BATCHNORM_EPS);
                (0..20)
                    .map(|k| {
                        let j = k % 5;
                        let (m, var) = (f64::from(MEAN[j]), f64::from(VAR[j]));
                        x[1][j] * (x[0][k] - m) / (var + eps).sqrt() + x[2][j]
                    })
                    .collect()
            },
        ),
        Case::new(
            "softmax",
            |rng| vec![random_tensor(rng, &[4, 5], -2.0, 2.0)],
            |g, v| g.softmax(v[0]).unwrap(),
            |x| softmax_ref(&x[0], 5),
        ),
        Case::new(
            "cross_entropy",
            |rng| vec![random_tensor(rng, &[4, 5], -2.0, 2.0)],
            |g, v| g.cross_entropy(v[0], &TARGETS).unwrap(),
            |x| {
                let p = softmax_ref(&x[0], 5);
                vec![TARGETS
                    .iter()
                    .enumerate()
                    .map(|(r, &t)| -p[r * 5 + t].ln())
                    .sum()]
            },
        ),
        Case::new(
            "one_hot_nll",
            |rng| vec![random_tensor(rng, &[4, 5], 0.2, 1.0)],
            |g, v| g.one_hot_nll(v[0], &TARGETS).unwrap(),
            |x| {
                vec![TARGETS
                    .iter()
                    .enumerate()
                    .map(|(r, &t)| -x[0][r * 5 + t].ln())
                    .sum()]
            },
        ),
        Case::new(
            "gaussian_sample",
            mu_sigma,
            move |g, v| g.gaussian_sample(v[0], v[1], eps.clone()).unwrap(),
            move |x| (0..20).map(|k| x[0][k] + x[1][k] * eps_ref[k]).collect(),
        ),
        Case::new(
            "gaussian_kl",
            mu_sigma,
            |g, v| g.gaussian_kl(v[0], v[1]).unwrap(),
            |x| {
                vec![(0..20)
                    .map(|k| {
                        -0.5 * (1.0 + (x[1][k] * x[1][k]).ln()
                            - x[0][k] * x[0][k]
                            - x[1][k] * x[1][k])
                    })
                    .sum()]
            },
        ),
    ]
}
