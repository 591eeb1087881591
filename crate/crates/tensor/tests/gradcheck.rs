//! Finite-difference checks of every differentiable op, in double precision.

use bisic_tensor::{ConvGeom, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type BuildFn = dyn for<'g> Fn(&[Var<'g, f64>]) -> Var<'g, f64>;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Scalar probe `sum(f(inputs) * weights)` with fixed random weights.
fn probe(inputs: &[Tensor<f64>], build: &BuildFn, weights: &Tensor<f64>) -> f64 {
    let g = Graph::inference();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&vars).value();
    out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

fn check(name: &str, inputs: Vec<Tensor<f64>>, build: &BuildFn, tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&vars);
    let weights = rand_tensor(&out.shape(), &mut rng, -1.0, 1.0);
    let w = g.constant(weights.clone());
    let loss = out.mul(w).sum_all();
    let grads = g.backward(loss);
    let eps = 1e-6;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= eps;
            let numeric = (probe(&plus, build, &weights) - probe(&minus, build, &weights)) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (1.0 + numeric.abs());
            assert!(err < tol, "{name}: input {k} element {i}: analytic {a} vs numeric {numeric}");
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn elementwise_ops() {
    let mut r = rng();
    let x = rand_tensor(&[3, 4], &mut r, -2.0, 2.0);
    let pos = rand_tensor(&[3, 4], &mut r, 0.2, 2.0);
    check("exp", vec![x.clone()], &|v| v[0].exp(), 1e-6);
    check("ln", vec![pos.clone()], &|v| v[0].ln(), 1e-6);
    check("sqrt", vec![pos.clone()], &|v| v[0].sqrt(), 1e-6);
    check("tanh", vec![x.clone()], &|v| v[0].tanh(), 1e-6);
    check("sigmoid", vec![x.clone()], &|v| v[0].sigmoid(), 1e-6);
    check("softplus", vec![x.clone()], &|v| v[0].softplus(), 1e-6);
    check("relu", vec![x.clone()], &|v| v[0].relu(), 1e-6);
    check("leaky_relu", vec![x.clone()], &|v| v[0].leaky_relu(0.1), 1e-6);
    check("abs", vec![x.clone()], &|v| v[0].abs(), 1e-6);
    check("square", vec![x.clone()], &|v| v[0].square(), 1e-6);
    check("powf", vec![pos.clone()], &|v| v[0].powf(1.7), 1e-6);
    check("scale", vec![x.clone()], &|v| v[0].scale(-2.5).add_scalar(3.0).neg(), 1e-6);
}

#[test]
fn broadcast_binary_ops() {
    let mut r = rng();
    let a = rand_tensor(&[2, 3, 4], &mut r, -1.0, 1.0);
    let b = rand_tensor(&[1, 3, 1], &mut r, 0.5, 1.5);
    check("add", vec![a.clone(), b.clone()], &|v| v[0].add(v[1]), 1e-6);
    check("sub", vec![b.clone(), a.clone()], &|v| v[0].sub(v[1]), 1e-6);
    check("mul", vec![a.clone(), b.clone()], &|v| v[0].mul(v[1]), 1e-6);
    check("div", vec![a.clone(), b.clone()], &|v| v[0].div(v[1]), 1e-6);
}

#[test]
fn shape_ops() {
    let mut r = rng();
    let a = rand_tensor(&[2, 3, 4], &mut r, -1.0, 1.0);
    let b = rand_tensor(&[2, 2, 4], &mut r, -1.0, 1.0);
    check("reshape", vec![a.clone()], &|v| v[0].reshape(&[6, 4]), 1e-6);
    check("permute", vec![a.clone()], &|v| v[0].permute(&[2, 0, 1]), 1e-6);
    check("narrow", vec![a.clone()], &|v| v[0].narrow(1, 1, 2), 1e-6);
    check("concat", vec![a.clone(), b.clone()], &|v| Var::concat(&[v[0], v[1]], 1), 1e-6);
    check("flip", vec![a.clone()], &|v| v[0].flip(1), 1e-6);
    check("sum_axes", vec![a.clone()], &|v| v[0].sum_axes(&[0, 2]), 1e-6);
    check("mean_all", vec![a.clone()], &|v| v[0].mean_all(), 1e-6);
    check("softmax", vec![a.clone()], &|v| v[0].softmax(1), 1e-6);
    check("softmax_last", vec![a.clone()], &|v| v[0].softmax(2), 1e-6);
}

#[test]
fn matmul_all_transposes() {
    let mut r = rng();
    let a = rand_tensor(&[2, 3, 4], &mut r, -1.0, 1.0);
    let b = rand_tensor(&[2, 4, 5], &mut r, -1.0, 1.0);
    let at = a.permute(&[0, 2, 1]);
    let bt = b.permute(&[0, 2, 1]);
    check("nn", vec![a.clone(), b.clone()], &|v| v[0].matmul(v[1], false, false), 1e-6);
    check("tn", vec![at.clone(), b.clone()], &|v| v[0].matmul(v[1], true, false), 1e-6);
    check("nt", vec![a.clone(), bt.clone()], &|v| v[0].matmul(v[1], false, true), 1e-6);
    check("tt", vec![at.clone(), bt.clone()], &|v| v[0].matmul(v[1], true, true), 1e-6);
    // every transpose combination computes the same product
    let g = Graph::<f64>::inference();
    let p = g.constant(a).matmul(g.constant(b), false, false).value();
    let q = g.constant(at).matmul(g.constant(bt), true, true).value();
    assert_eq!(p.shape(), q.shape());
    for (x, y) in p.data().iter().zip(q.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn conv_ops() {
    let mut r = rng();
    let x = rand_tensor(&[2, 2, 2, 5, 6], &mut r, -1.0, 1.0);
    let w = rand_tensor(&[3, 2, 3, 3, 3], &mut r, -0.5, 0.5);
    let b = rand_tensor(&[3], &mut r, -0.5, 0.5);
    let geom = ConvGeom::new([3, 3, 3], [1, 2, 2], [1, 1, 1]);
    check("conv3d", vec![x.clone(), w.clone(), b.clone()], &move |v| v[0].conv3d(v[1], Some(v[2]), geom), 1e-6);

    let xt = rand_tensor(&[1, 3, 2, 3, 3], &mut r, -1.0, 1.0);
    let wt = rand_tensor(&[3, 2, 3, 5, 5], &mut r, -0.5, 0.5);
    let bt = rand_tensor(&[2], &mut r, -0.5, 0.5);
    let geom_t = ConvGeom::new([3, 5, 5], [1, 2, 2], [1, 2, 2]);
    check(
        "conv_transpose3d",
        vec![xt, wt, bt],
        &move |v| v[0].conv_transpose3d(v[1], Some(v[2]), geom_t, [0, 1, 1]),
        1e-6,
    );
}

#[test]
fn lower_bound_passes_upward_gradient() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_vec(&[3], vec![0.05, 0.5, 0.02]));
    let y = x.lower_bound(0.1);
    assert_eq!(y.value().data(), &[0.1, 0.5, 0.1]);
    // loss = -sum(y): gradient wants every y larger, so it flows everywhere
    let gr = g.backward(y.neg().sum_all());
    assert_eq!(gr.get(x).unwrap().data(), &[-1.0, -1.0, -1.0]);
    // loss = +sum(y): below the bound the gradient is blocked
    let g2 = Graph::<f64>::new();
    let x2 = g2.leaf(Tensor::from_vec(&[3], vec![0.05, 0.5, 0.02]));
    let gr2 = g2.backward(x2.lower_bound(0.1).sum_all());
    assert_eq!(gr2.get(x2).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn gaussian_rate_gradient() {
    let y = Tensor::from_vec(&[6], vec![0.0, 1.0, -2.0, 3.0, 0.0, -1.0]);
    let mu = Tensor::from_vec(&[6], vec![0.3, 0.8, -1.2, 0.5, -0.4, -1.1]);
    let sigma = Tensor::from_vec(&[6], vec![0.5, 1.3, 2.0, 0.9, 0.2, 3.5]);
    check("gaussian_rate", vec![y, mu, sigma], &|v| v[0].gaussian_rate(v[1], v[2]), 1e-5);
}

#[test]
fn gaussian_rate_known_values() {
    let g = Graph::<f64>::inference();
    let y = g.constant(Tensor::from_vec(&[3], vec![0.0, 2.0, 40.0]));
    let mu = g.constant(Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]));
    let s = g.constant(Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]));
    let bits = y.gaussian_rate(mu, s).value();
    // P(|X| < 0.5) for a standard normal
    let p0: f64 = 0.382_924_922_548_026;
    assert!((bits.data()[0] - (-p0.log2())).abs() < 1e-9);
    // P(1.5 < X < 2.5)
    let p2: f64 = 0.060_597_535_943_081;
    assert!((bits.data()[1] - (-p2.log2())).abs() < 1e-9);
    // far tail is clamped to 24 bits
    assert!((bits.data()[2] - 24.0).abs() < 1e-12);
}

#[test]
fn no_grad_graph_records_no_closures() {
    let g = Graph::<f32>::inference();
    let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
    let y = x.square().sum_all();
    assert!(!y.requires_grad());
    let grads = g.backward(y);
    assert!(grads.get(x).is_none());
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::from_fn(&[2, 4, 2, 16, 16], |_| r.gen_range(-1.0..1.0));
        let w = Tensor::<f32>::from_fn(&[8, 4, 3, 5, 5], |_| r.gen_range(-0.1..0.1));
        let g = Graph::new();
        let (xv, wv) = (g.leaf(x), g.leaf(w));
        let y = xv.conv3d(wv, None, ConvGeom::new([3, 5, 5], [1, 2, 2], [1, 2, 2])).tanh();
        let loss = y.square().mean_all();
        let gr = g.backward(loss);
        (y.value().data().to_vec(), gr.get(wv).unwrap().data().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(ga.iter().zip(&gb).all(|(p, q)| p.to_bits() == q.to_bits()));
}
