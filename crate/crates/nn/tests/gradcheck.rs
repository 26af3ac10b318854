//! Central finite-difference checks of every operation's adjoint in f64.

use confaug_nn::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

/// Scalarizes an arbitrary output with fixed random weights so every output
/// element contributes to the checked gradient.
fn scalarize(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(g.shape(out), &mut rng);
    let w = g.input(w);
    let p = g.mul(out, w).unwrap();
    g.sum_all(p).unwrap()
}

fn eval(inputs: &[Tensor<f64>], f: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_grad(t.clone())).collect();
    let out = f(&mut g, &vars);
    let l = scalarize(&mut g, out, 99);
    g.value(l).item()
}

fn check(name: &str, inputs: Vec<Tensor<f64>>, f: &Build) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_grad(t.clone())).collect();
    let out = f(&mut g, &vars);
    let l = scalarize(&mut g, out, 99);
    let grads = g.backward(l).unwrap();
    let h = 1e-5;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus, f) - eval(&minus, f)) / (2.0 * h);
            let an = analytic.data()[j];
            let err = (fd - an).abs() / (1.0 + fd.abs().max(an.abs()));
            assert!(err < 1e-6, "{name}: input {i} elem {j}: analytic {an} vs fd {fd}");
        }
    }
}

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn elementwise_ops() {
    check("add", vec![rnd(&[2, 3], 1), rnd(&[2, 3], 2)], &|g, v| g.add(v[0], v[1]).unwrap());
    check("sub", vec![rnd(&[2, 3], 1), rnd(&[2, 3], 2)], &|g, v| g.sub(v[0], v[1]).unwrap());
    check("mul", vec![rnd(&[2, 3], 1), rnd(&[2, 3], 2)], &|g, v| g.mul(v[0], v[1]).unwrap());
    check("scale", vec![rnd(&[4], 1)], &|g, v| g.scale(v[0], -1.7).unwrap());
    check("add_scalar", vec![rnd(&[4], 1)], &|g, v| g.add_scalar(v[0], 0.3).unwrap());
    check("silu", vec![rnd(&[7], 3)], &|g, v| g.silu(v[0]).unwrap());
    check("sigmoid", vec![rnd(&[7], 3)], &|g, v| g.sigmoid(v[0]).unwrap());
    check("gelu", vec![rnd(&[7], 3)], &|g, v| g.gelu(v[0]).unwrap());
    check("relu", vec![rnd(&[7], 3)], &|g, v| g.relu(v[0]).unwrap());
}

#[test]
fn broadcasting_ops() {
    check("add_channel", vec![rnd(&[2, 3, 2, 2], 1), rnd(&[3], 2)], &|g, v| g.add_channel(v[0], v[1]).unwrap());
    check("add_nc", vec![rnd(&[2, 3, 2, 2], 1), rnd(&[2, 3], 2)], &|g, v| g.add_nc(v[0], v[1]).unwrap());
    check("mul_nc", vec![rnd(&[2, 3, 2, 2], 1), rnd(&[2, 3], 2)], &|g, v| g.mul_nc(v[0], v[1]).unwrap());
    check("add_broadcast", vec![rnd(&[2, 3, 4], 1), rnd(&[3, 4], 2)], &|g, v| {
        g.add_broadcast(v[0], v[1]).unwrap()
    });
}

#[test]
fn linear_algebra_ops() {
    check("linear", vec![rnd(&[2, 3, 4], 1), rnd(&[5, 4], 2), rnd(&[5], 3)], &|g, v| {
        g.linear(v[0], v[1], Some(v[2])).unwrap()
    });
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { rnd(&[2, 4, 3], 1) } else { rnd(&[2, 3, 4], 1) };
        let b = if tb { rnd(&[2, 5, 4], 2) } else { rnd(&[2, 4, 5], 2) };
        check("bmm", vec![a, b], &move |g, v| g.bmm(v[0], v[1], ta, tb).unwrap());
    }
}

#[test]
fn convolution() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
        check(
            "conv2d",
            vec![rnd(&[2, 2, 5, 4], 1), rnd(&[3, 2, k, k], 2), rnd(&[3], 3)],
            &move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap(),
        );
    }
}

#[test]
fn normalization() {
    check("group_norm", vec![rnd(&[2, 4, 3, 2], 1), rnd(&[4], 2), rnd(&[4], 3)], &|g, v| {
        g.group_norm(v[0], v[1], v[2], 2).unwrap()
    });
    check("layer_norm", vec![rnd(&[3, 5], 1), rnd(&[5], 2), rnd(&[5], 3)], &|g, v| {
        g.layer_norm(v[0], v[1], v[2]).unwrap()
    });
    check("softmax0", vec![rnd(&[3, 4, 2], 1)], &|g, v| g.softmax(v[0], 0).unwrap());
    check("softmax1", vec![rnd(&[3, 4, 2], 1)], &|g, v| g.softmax(v[0], 1).unwrap());
    check("softmax2", vec![rnd(&[3, 4, 2], 1)], &|g, v| g.softmax(v[0], 2).unwrap());
}

#[test]
fn layout_ops() {
    check("reshape", vec![rnd(&[2, 6], 1)], &|g, v| g.reshape(v[0], &[3, 4]).unwrap());
    check("permute", vec![rnd(&[2, 3, 4], 1)], &|g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
    check("concat", vec![rnd(&[2, 1, 3], 1), rnd(&[2, 2, 3], 2)], &|g, v| g.concat(&[v[0], v[1]], 1).unwrap());
    check("narrow", vec![rnd(&[2, 5, 3], 1)], &|g, v| g.narrow(v[0], 1, 1, 3).unwrap());
    check("upsample2x", vec![rnd(&[1, 2, 2, 3], 1)], &|g, v| g.upsample2x(v[0]).unwrap());
    check("avg_pool2x", vec![rnd(&[1, 2, 4, 4], 1)], &|g, v| g.avg_pool2x(v[0]).unwrap());
    check("max_pool2x", vec![rnd(&[1, 2, 4, 4], 1)], &|g, v| g.max_pool2x(v[0]).unwrap());
    check("global_avg_pool", vec![rnd(&[2, 3, 2, 2], 1)], &|g, v| g.global_avg_pool(v[0]).unwrap());
    check("embedding", vec![rnd(&[4, 3], 1)], &|g, v| g.embedding(v[0], &[2, 0, 2]).unwrap());
}

#[test]
fn losses() {
    check("mse", vec![rnd(&[2, 3], 1), rnd(&[2, 3], 2)], &|g, v| g.mse(v[0], v[1]).unwrap());
    check("cross_entropy", vec![rnd(&[3, 4], 1)], &|g, v| g.cross_entropy(v[0], &[1, 3, 0]).unwrap());
    check("log_prob_sum", vec![rnd(&[3, 4], 1)], &|g, v| g.log_prob_sum(v[0], &[1, 3, 0]).unwrap());
    check("sum_squares", vec![rnd(&[5], 1)], &|g, v| g.sum_squares(v[0]).unwrap());
    check("mean_all", vec![rnd(&[5], 1)], &|g, v| g.mean_all(v[0]).unwrap());
}

#[test]
fn reused_node_accumulates() {
    // x * x uses x twice
    check("square", vec![rnd(&[4], 5)], &|g, v| g.mul(v[0], v[0]).unwrap());
}

#[test]
fn linear_rows_do_not_depend_on_batch_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = Tensor::<f32>::randn(&[37, 53], &mut rng);
    let xs = Tensor::<f32>::randn(&[9, 53], &mut rng);
    let mut g = Graph::inference();
    let (wv, xv) = (g.input(w.clone()), g.input(xs.clone()));
    let full = g.linear(xv, wv, None).unwrap();
    let full = g.value(full).clone();
    for r in 0..9 {
        let mut g1 = Graph::inference();
        let (wv, xv) = (g1.input(w.clone()), g1.input(xs.narrow0(r, 1).unwrap()));
        let one = g1.linear(xv, wv, None).unwrap();
        assert_eq!(g1.value(one).data(), &full.data()[r * 37..(r + 1) * 37]);
    }
}

#[test]
fn inference_graph_drops_parameter_gradients() {
    use confaug_nn::{ParamBuilder, ParamStore};
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lin = {
        let mut vb = ParamBuilder::new(&mut store, &mut rng);
        confaug_nn::Linear::new(&mut vb.pp("l"), 3, 2, true).unwrap()
    };
    let mut g = Graph::inference();
    let x = g.input_grad(rnd(&[1, 3], 4));
    let y = lin.forward(&mut g, &store, x).unwrap();
    let s = g.sum_all(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).is_some());
    assert!(grads.for_params(&store).iter().all(|g| g.as_ref().is_none_or(|t| t.data().iter().all(|&v| v == 0.0))));
}
