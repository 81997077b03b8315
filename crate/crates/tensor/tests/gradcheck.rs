use limo_tensor::gradcheck::{
    matmul_ref, primitive_cases, random_tensor, softmax_ref, Case, TOLERANCE,
};
use limo_tensor::{Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;

fn run(
    name: &str,
    make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<limo_tensor::Tensor> + 'static,
    build: impl Fn(&mut Graph<'_>, &[Var]) -> Var + 'static,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64> + 'static,
) {
    let err = Case::new(name, make_inputs, build, reference)
        .worst_error(INSTANCES)
        .unwrap();
    assert!(err < TOLERANCE, "{name}: relative error {err}");
}

fn m45(rng: &mut ChaCha8Rng) -> limo_tensor::Tensor {
    random_tensor(rng, &[4, 5], -1.0, 1.0)
}

#[test]
fn every_primitive() {
    let cases = primitive_cases();
    assert!(cases.len() >= 20);
    for case in cases {
        let err = case.worst_error(INSTANCES).unwrap();
        assert!(err < TOLERANCE, "{}: relative error {err}", case.name);
    }
}

#[test]
fn two_layer_mlp() {
    // relu(x W1 + b1) W2 + b2 on a 4x5 batch.
    run(
        "mlp",
        |rng| {
            vec![
                m45(rng),
                random_tensor(rng, &[5, 6], -1.0, 1.0),
                random_tensor(rng, &[6], -0.1, 0.1),
                random_tensor(rng, &[6, 2], -1.0, 1.0),
                random_tensor(rng, &[2], -1.0, 1.0),
            ]
        },
        |g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.add(h, v[2]).unwrap();
            let h = g.relu(h);
            let o = g.matmul(h, v[3]).unwrap();
            g.add(o, v[4]).unwrap()
        },
        |x| {
            let mut h = matmul_ref(&x[0], &x[1], 4, 5, 6);
            for (k, v) in h.iter_mut().enumerate() {
                *v = (*v + x[2][k % 6]).max(0.0);
            }
            let mut o = matmul_ref(&h, &x[3], 4, 6, 2);
            for (k, v) in o.iter_mut().enumerate() {
                *v += x[4][k % 2];
            }
            o
        },
    );
}

/// Ops for randomly wired composites; every one maps two 4x5 operands (or one) to 4x5.
#[derive(Debug, Clone, Copy)]
enum Step {
    Add(usize, usize),
    Mul(usize, usize),
    Exp(usize),
    Square(usize),
    Softmax(usize),
}

fn random_steps(seed: u64) -> Vec<Step> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = Vec::new();
    for i in 0..3 {
        let available = 2 + i;
        let a = rng.random_range(0..available);
        let b = rng.random_range(0..available);
        steps.push(match rng.random_range(0..5) {
            0 => Step::Add(a, b),
            1 => Step::Mul(a, b),
            2 => Step::Exp(a),
            3 => Step::Square(a),
            _ => Step::Softmax(a),
        });
    }
    steps
}

#[test]
fn randomly_wired_composites() {
    for wiring in 0..25u64 {
        let steps = random_steps(wiring);
        let graph_steps = steps.clone();
        let ref_steps = steps.clone();
        let build = move |g: &mut Graph<'_>, v: &[Var]| {
            let mut nodes = v.to_vec();
            for s in &graph_steps {
                let next = match *s {
                    Step::Add(a, b) => g.add(nodes[a], nodes[b]).unwrap(),
                    Step::Mul(a, b) => g.mul(nodes[a], nodes[b]).unwrap(),
                    Step::Exp(a) => g.exp(nodes[a]),
                    Step::Square(a) => g.square(nodes[a]),
                    Step::Softmax(a) => g.softmax(nodes[a]).unwrap(),
                };
                nodes.push(next);
            }
            *nodes.last().unwrap()
        };
        let reference = move |x: &[Vec<f64>]| {
            let mut nodes = x.to_vec();
            for s in &ref_steps {
                let next: Vec<f64> = match *s {
                    Step::Add(a, b) => nodes[a].iter().zip(&nodes[b]).map(|(p, q)| p + q).collect(),
                    Step::Mul(a, b) => nodes[a].iter().zip(&nodes[b]).map(|(p, q)| p * q).collect(),
                    Step::Exp(a) => nodes[a].iter().map(|p| p.exp()).collect(),
                    Step::Square(a) => nodes[a].iter().map(|p| p * p).collect(),
                    Step::Softmax(a) => softmax_ref(&nodes[a], 5),
                };
                nodes.push(next);
            }
            nodes.pop().unwrap()
        };
        run(
            &format!("composite {steps:?}"),
            |rng| vec![m45(rng), m45(rng)],
            build,
            reference,
        );
    }
}
