use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `sum(op(params) ⊙ w)` for a fixed random projection `w`, so every
/// primitive is checked through a scalar with a non-trivial upstream gradient.
type Builder = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;

fn project_to_scalar(g: &mut Graph, out: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    let shape = g.shape(out).to_vec();
    let w = g.param("proj", rand_tensor(rng, shape), false);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn eval_scalar(
    shapes: &[Vec<usize>],
    values: &[Tensor],
    feeds: &Feeds,
    index_inputs: &[(&str, usize)],
    build: &Builder,
    proj_seed: u64,
) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    for (name, len) in index_inputs {
        g.index_input(name, *len);
    }
    let params: Vec<NodeId> =
        shapes.iter().zip(values).enumerate().map(|(i, (_, v))| g.param(&format!("p{i}"), v.clone(), true)).collect();
    let out = build(&mut g, &params);
    let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
    let loss = if g.value(out).numel() == 1 { out } else { project_to_scalar(&mut g, out, &mut prng) };
    g.forward(feeds).unwrap();
    let value = g.value(loss).item();
    let grads = g.backward(loss, None).unwrap();
    (value, params.iter().map(|p| grads.get(*p).unwrap().clone()).collect())
}

/// Central finite differences with h = 1e-5; returns the max relative error.
fn gradcheck(shapes: &[Vec<usize>], feeds: Feeds, index_inputs: &[(&str, usize)], build: &Builder, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s.clone())).collect();
    let (_, analytic) = eval_scalar(shapes, &values, &feeds, index_inputs, build, seed + 1000);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (pi, v) in values.iter().enumerate() {
        for e in 0..v.numel() {
            let mut plus = values.clone();
            plus[pi].data_mut()[e] += h;
            let mut minus = values.clone();
            minus[pi].data_mut()[e] -= h;
            let fp = eval_scalar(shapes, &plus, &feeds, index_inputs, build, seed + 1000).0;
            let fm = eval_scalar(shapes, &minus, &feeds, index_inputs, build, seed + 1000).0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].data()[e];
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-3));
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let cases: Vec<(&str, Vec<Vec<usize>>, Box<Builder>)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|g: &mut Graph, p: &[NodeId]| g.matmul(p[0], p[1]).unwrap())),
        (
            "matmul_t",
            vec![vec![3, 4], vec![5, 4]],
            Box::new(|g: &mut Graph, p: &[NodeId]| g.matmul_t(p[0], p[1]).unwrap()),
        ),
        (
            "add_bias",
            vec![vec![3, 4], vec![4]],
            Box::new(|g: &mut Graph, p: &[NodeId]| g.add_bias(p[0], p[1]).unwrap()),
        ),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|g: &mut Graph, p: &[NodeId]| g.add(p[0], p[1]).unwrap())),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|g: &mut Graph, p: &[NodeId]| g.sub(p[0], p[1]).unwrap())),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|g: &mut Graph, p: &[NodeId]| g.mul(p[0], p[1]).unwrap())),
        ("scale", vec![vec![2, 3]], Box::new(|g: &mut Graph, p: &[NodeId]| g.scale(p[0], -1.7))),
        ("silu", vec![vec![3, 3]], Box::new(|g: &mut Graph, p: &[NodeId]| g.silu(p[0]))),
        (
            "concat_cols",
            vec![vec![2, 3], vec![2, 2]],
            Box::new(|g: &mut Graph, p: &[NodeId]| g.concat_cols(&[p[0], p[1]]).unwrap()),
        ),
        (
            "concat_rows",
            vec![vec![2, 3], vec![1, 3]],
            Box::new(|g: &mut Graph, p: &[NodeId]| g.concat_rows(&[p[0], p[1]]).unwrap()),
        ),
        ("mse", vec![vec![2, 3], vec![2, 3]], Box::new(|g: &mut Graph, p: &[NodeId]| g.mse(p[0], p[1]).unwrap())),
        ("sum", vec![vec![2, 3]], Box::new(|g: &mut Graph, p: &[NodeId]| g.sum(p[0]))),
    ];
    for (name, shapes, build) in &cases {
        for seed in 0..3 {
            let err = gradcheck(shapes, Feeds::new(), &[], build.as_ref(), seed);
            assert!(err < 1e-6, "{name}: relative error {err:e}");
        }
    }
}

#[test]
fn gather_and_cross_entropy_gradients() {
    let gather: Box<Builder> = Box::new(|g: &mut Graph, p: &[NodeId]| g.gather(p[0], "ids").unwrap());
    let feeds = Feeds::new().indices("ids", vec![2, 0, 2, 1]);
    let err = gradcheck(&[vec![3, 4]], feeds, &[("ids", 4)], gather.as_ref(), 7);
    assert!(err < 1e-6, "gather: {err:e}");

    let ce: Box<Builder> = Box::new(|g: &mut Graph, p: &[NodeId]| g.cross_entropy(p[0], "labels").unwrap());
    let feeds = Feeds::new().indices("labels", vec![0, 3, 1]);
    let err = gradcheck(&[vec![3, 4]], feeds, &[("labels", 3)], ce.as_ref(), 8);
    assert!(err < 1e-6, "cross_entropy: {err:e}");
}

#[test]
fn identity_matmul_returns_operand() {
    let mut g = Graph::new();
    let a = g.input("a", vec![2, 2]).unwrap();
    let b = g.input("b", vec![2, 3]).unwrap();
    let c = g.matmul(a, b).unwrap();
    g.mark_output("c", c);
    let b_val = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 3.0, 4.0, -0.25]);
    let out = g
        .forward_eval(
            &Feeds::new().tensor("a", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0])).tensor("b", b_val.clone()),
        )
        .unwrap();
    assert_eq!(out["c"], b_val);
}

#[test]
fn mse_of_equal_operands_is_zero() {
    let mut g = Graph::new();
    let x = g.input("x", vec![1, 5]).unwrap();
    let loss = g.mse(x, x).unwrap();
    g.mark_output("loss", loss);
    let out = g.forward_eval(&Feeds::new().tensor("x", Tensor::matrix(1, 5, vec![1.0, -2.0, 3.0, 0.1, 7.0]))).unwrap();
    assert_eq!(out["loss"].item(), 0.0);
}

#[test]
fn square_gradient_at_three() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::scalar(3.0), true);
    let y = g.mul(x, x).unwrap();
    g.forward(&Feeds::new()).unwrap();
    assert_eq!(g.value(y).item(), 9.0);
    let grads = g.backward(y, None).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);
}

#[test]
fn mse_gradient_vanishes_at_minimum() {
    let mut g = Graph::new();
    let a = g.param("a", Tensor::vector(vec![0.3, -1.2, 4.0]), true);
    let b = g.param("b", Tensor::vector(vec![0.3, -1.2, 4.0]), false);
    let loss = g.mse(a, b).unwrap();
    g.forward(&Feeds::new()).unwrap();
    let grads = g.backward(loss, None).unwrap();
    assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(grads.get(b).is_none(), "frozen parameter received a gradient");
}

#[test]
fn backward_errors() {
    let mut g = Graph::new();
    let a = g.param("a", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]), true);
    let s = g.silu(a);
    assert!(matches!(g.backward(s, None), Err(Error::NotEvaluated)));
    g.forward(&Feeds::new()).unwrap();
    assert!(matches!(g.backward(s, None), Err(Error::MissingSeed(_))));
    let seed = Tensor::matrix(2, 2, vec![1.0; 4]);
    assert!(g.backward(s, Some(&seed)).is_ok());
    // Mutating a parameter invalidates the forward pass.
    g.param_value_mut(a).data_mut()[0] = 0.0;
    assert!(matches!(g.backward(s, Some(&seed)), Err(Error::NotEvaluated)));
}

#[test]
fn shape_errors_name_the_node() {
    let mut g = Graph::new();
    let a = g.input("a", vec![2, 3]).unwrap();
    let b = g.input("b", vec![2, 3]).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(&err, Error::Shape { node, .. } if node.contains("matmul")), "{err}");

    let c = g.add(a, b).unwrap();
    g.mark_output("c", c);
    let bad =
        Feeds::new().tensor("a", Tensor::matrix(2, 3, vec![0.0; 6])).tensor("b", Tensor::matrix(3, 2, vec![0.0; 6]));
    let err = g.forward(&bad).unwrap_err();
    assert!(matches!(&err, Error::Shape { node, .. } if node.contains("'b'")), "{err}");
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn three_layer_network_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let dims = [5usize, 7, 6, 3];
    let batch = 4;
    let x = rand_tensor(&mut rng, vec![batch, dims[0]]);
    let ws: Vec<Tensor> = (0..3).map(|l| rand_tensor(&mut rng, vec![dims[l], dims[l + 1]])).collect();
    let bs: Vec<Tensor> = (0..3).map(|l| rand_tensor(&mut rng, vec![dims[l + 1]])).collect();

    let mut g = Graph::new();
    let mut h = g.input("x", vec![batch, dims[0]]).unwrap();
    for l in 0..3 {
        let w = g.param(&format!("w{l}"), ws[l].clone(), true);
        let b = g.param(&format!("b{l}"), bs[l].clone(), true);
        h = g.matmul(h, w).unwrap();
        h = g.add_bias(h, b).unwrap();
        if l < 2 {
            h = g.silu(h);
        }
    }
    g.mark_output("y", h);
    let out = g.forward_eval(&Feeds::new().tensor("x", x.clone())).unwrap();

    let mut act = x.data().to_vec();
    for l in 0..3 {
        let mut z = naive_matmul(&act, ws[l].data(), batch, dims[l], dims[l + 1]);
        for r in 0..batch {
            for c in 0..dims[l + 1] {
                z[r * dims[l + 1] + c] += bs[l].data()[c];
            }
        }
        if l < 2 {
            z.iter_mut().for_each(|v| *v = *v / (1.0 + (-*v).exp()));
        }
        act = z;
    }
    for (a, b) in out["y"].data().iter().zip(&act) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.input("x", vec![3, 4]).unwrap();
        let w = g.param("w", rand_tensor(&mut rng, vec![5, 4]), true);
        let y = g.matmul_t(x, w).unwrap();
        let y = g.silu(y);
        let t = g.param("t", rand_tensor(&mut rng, vec![3, 5]), false);
        let loss = g.mse(y, t).unwrap();
        let xv = rand_tensor(&mut rng, vec![3, 4]);
        g.forward(&Feeds::new().tensor("x", xv)).unwrap();
        let grads = g.backward(loss, None).unwrap();
        (g.value(loss).item().to_bits(), grads.get(w).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn frozen_parameters_unchanged_by_optimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let x = g.input("x", vec![2, 3]).unwrap();
    let frozen = g.param("frozen", rand_tensor(&mut rng, vec![3, 3]), false);
    let train = g.param("train", rand_tensor(&mut rng, vec![3, 3]), true);
    let h = g.matmul(x, frozen).unwrap();
    let h = g.matmul(h, train).unwrap();
    let loss = g.sum(h);
    let before = g.param_value(frozen).clone();
    let mut opt = GraphOptimizer::new(AdamW::with_lr(1e-2), &g);
    let feeds = Feeds::new().tensor("x", rand_tensor(&mut rng, vec![2, 3]));
    for _ in 0..20 {
        g.forward(&feeds).unwrap();
        let grads = g.backward(loss, None).unwrap();
        assert!(grads.get(frozen).is_none());
        opt.step(&mut g, &grads).unwrap();
    }
    let after = g.param_value(frozen);
    assert!(before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(opt.state(train).unwrap().step == 20);
}
