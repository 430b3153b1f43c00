use flowik::autodiff::{finite_diff_grad, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(ad: f64, fd: f64, rtol: f64, atol: f64) -> bool {
    (ad - fd).abs() <= atol + rtol * fd.abs()
}

#[test]
fn add_elementwise() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::eye(3));
    let a = tape.constant(Tensor::matrix(3, 3, data.clone()).unwrap());
    let c = tape.matmul(i, a).unwrap();
    assert_eq!(tape.value(c).data(), data.as_slice());
}

#[test]
fn conv2d_all_ones() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 4, 4]));
    let k = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
    let y = tape.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 4.0));
}

#[test]
fn conv2d_rejects_stride_three() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 4, 4]));
    let k = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
    assert!(tape.conv2d(x, k, None, 3, 0).is_err());
}

#[test]
fn shape_error_names_op_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::ones(&[2, 3]));
    let b = tape.constant(Tensor::ones(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul"), "{err}");
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn square_sum_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
}

#[test]
fn constant_loss_has_empty_gradients() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let loss = tape.sum(c).unwrap();
    assert!(tape.backward(loss).unwrap().is_empty());
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn non_finite_is_error() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![800.0]));
    assert!(tape.exp(x).is_err());
    let z = tape.param(Tensor::vector(vec![0.0]));
    assert!(tape.log(z).is_err());
}

#[test]
fn sigmoid_matvec_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w0 = Tensor::matrix(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let xv = Tensor::matrix(3, 1, vec![0.5, -0.3, 0.8]).unwrap();
    let f = |w: &Tensor| {
        let mut tape = Tape::new();
        let w = tape.constant(w.clone());
        let x = tape.constant(xv.clone());
        let y = tape.matmul(w, x).unwrap();
        let s = tape.sigmoid(y).unwrap();
        let l = tape.sum(s).unwrap();
        tape.value(l).item().unwrap()
    };
    let mut tape = Tape::new();
    let w = tape.param(w0.clone());
    let x = tape.constant(xv.clone());
    let y = tape.matmul(w, x).unwrap();
    let s = tape.sigmoid(y).unwrap();
    let l = tape.sum(s).unwrap();
    let g = tape.backward(l).unwrap();
    let fd = finite_diff_grad(f, &w0, 1e-5);
    for (a, b) in g.get(w).unwrap().data().iter().zip(fd.data()) {
        assert!(close(*a, *b, 1e-4, 1e-10), "{a} vs {b}");
    }
}

#[test]
fn inputs_are_not_mutated() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let before = tape.value(a).clone();
    let e = tape.exp(a).unwrap();
    let m = tape.mul(e, a).unwrap();
    let l = tape.sum(m).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.value(a), &before);
}

#[test]
fn kinked_ops_backward_away_from_kinks() {
    let x0 = Tensor::vector(vec![-1.5, -0.2, 0.4, 2.5]);
    let build = |tape: &mut Tape, x: Var| {
        let r = tape.leaky_relu(x, 0.1).unwrap();
        let c = tape.clamp(x, -1.0, 1.0).unwrap();
        let p = tape.mul(r, c).unwrap();
        tape.sum(p).unwrap()
    };
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let l = build(&mut tape, x);
    let g = tape.backward(l).unwrap();
    let fd = finite_diff_grad(
        |t| {
            let mut tape = Tape::new();
            let x = tape.constant(t.clone());
            let l = build(&mut tape, x);
            tape.value(l).item().unwrap()
        },
        &x0,
        1e-6,
    );
    for (a, b) in g.get(x).unwrap().data().iter().zip(fd.data()) {
        assert!(close(*a, *b, 1e-6, 1e-9), "{a} vs {b}");
    }
}

/// Builds a random differentiable graph over a handful of leaves and reduces
/// it to a scalar. The same `seed` replays the same graph on any leaf values.
fn random_graph(seed: u64, tape: &mut Tape, leaves: &[Var]) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<Var> = leaves.to_vec();
    let steps = rng.random_range(3..10);
    for _ in 0..steps {
        let a = pool[rng.random_range(0..pool.len())];
        let shape = tape.shape(a).to_vec();
        let (m, n) = (shape[0], shape[1]);
        let same: Vec<Var> = pool
            .iter()
            .copied()
            .filter(|v| tape.shape(*v) == shape.as_slice())
            .collect();
        let b = same[rng.random_range(0..same.len())];
        let next = match rng.random_range(0..14) {
            0 => tape.add(a, b),
            1 => tape.sub(a, b),
            2 => tape.mul(a, b),
            3 => {
                // row broadcast: first row of b against all of a
                let row = tape.slice(b, 0, 0, 1).unwrap();
                tape.mul(a, row)
            }
            4 => {
                let bt = tape.reshape(b, &[n, m]).unwrap();
                let p = tape.matmul(a, bt).unwrap();
                let s = tape.tanh(p).unwrap();
                let r = tape.slice(s, 1, 0, 1).unwrap();
                let ones = tape_ones(tape, 1, n);
                let r = tape.matmul(r, ones).unwrap();
                tape.add(a, r)
            }
            5 => {
                let w = tape.reshape(b, &[n, m]).unwrap();
                let w = tape.slice(w, 1, 0, 1).unwrap();
                let ones = tape_ones(tape, 1, n);
                let w = tape.matmul(w, ones).unwrap();
                let bias = tape.slice(a, 0, 0, 1).unwrap();
                let y = tape.affine(a, w, bias).unwrap();
                tape.tanh(y)
            }
            6 => {
                let t = tape.tanh(a).unwrap();
                tape.exp(t)
            }
            7 => {
                let s = tape.softplus(a).unwrap();
                let s = tape.offset(s, 0.5).unwrap();
                tape.log(s)
            }
            8 => tape.sigmoid(a),
            9 => tape.softplus(a),
            10 => {
                let c = tape.concat(&[a, b], 1).unwrap();
                tape.slice(c, 1, rng.random_range(0..=n), n)
            }
            11 => {
                let img = tape.reshape(a, &[1, 1, m, n]).unwrap();
                let k = tape.reshape(b, &[1, 1, m, n]).unwrap();
                let k = tape.slice(k, 2, 0, 2).unwrap();
                let k = tape.slice(k, 3, 0, 2).unwrap();
                let stride = rng.random_range(1..=2);
                let y = tape.conv2d(img, k, None, stride, 1).unwrap();
                let s = tape.sum(y).unwrap();
                let s = tape.scale(s, 0.1).unwrap();
                let s = tape.tanh(s).unwrap();
                tape.mul(a, s)
            }
            12 => {
                let r = tape.sum_rows(a).unwrap();
                let r = tape.reshape(r, &[m, 1]).unwrap();
                let ones = tape_ones(tape, 1, n);
                let r = tape.matmul(r, ones).unwrap();
                let r = tape.scale(r, 0.3).unwrap();
                tape.sub(b, r)
            }
            _ => {
                let mu = tape.mean(a).unwrap();
                tape.mul(b, mu)
            }
        }
        .unwrap();
        pool.push(next);
    }
    let last = *pool.last().unwrap();
    let sq = tape.mul(last, last).unwrap();
    let s1 = tape.sum(sq).unwrap();
    let s2 = tape.mean(last).unwrap();
    tape.add(s1, s2).unwrap()
}

fn tape_ones(tape: &mut Tape, r: usize, c: usize) -> Var {
    tape.constant(Tensor::ones(&[r, c]))
}

fn leaves_for(seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let m = rng.random_range(2..4);
    let n = rng.random_range(2..4);
    (0..3)
        .map(|_| Tensor::matrix(m, n, (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect()
}

fn eval(seed: u64, leaves: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.constant(t.clone())).collect();
    let l = random_graph(seed, &mut tape, &vars);
    tape.value(l).item().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_graphs_match_finite_differences(seed in any::<u64>()) {
        let leaves = leaves_for(seed);
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
        let loss = random_graph(seed, &mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        for (i, v) in vars.iter().enumerate() {
            let fd = finite_diff_grad(
                |t| {
                    let mut ls = leaves.clone();
                    ls[i] = t.clone();
                    eval(seed, &ls)
                },
                &leaves[i],
                1e-5,
            );
            let ad = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(leaves[i].shape()));
            for (a, b) in ad.data().iter().zip(fd.data()) {
                prop_assert!(close(*a, *b, 1e-4, 1e-7), "leaf {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic(seed in any::<u64>()) {
        let leaves = leaves_for(seed);
        let run = || {
            let mut tape = Tape::new();
            let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
            let loss = random_graph(seed, &mut tape, &vars);
            let g = tape.backward(loss).unwrap();
            vars.iter()
                .flat_map(|v| g.get(*v).map(|t| t.to_vec()).unwrap_or_default())
                .map(f64::to_bits)
                .collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
