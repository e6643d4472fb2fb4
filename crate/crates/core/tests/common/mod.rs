#![allow(dead_code)]

use segcnn::conv::{conv3d_backward, conv3d_forward, ConvFilter, ConvMode};
use segcnn::layers::{
    batchnorm_backward, batchnorm_forward, dense_backward, dense_forward, elu_backward, elu_forward, maxpool3d_backward,
    maxpool3d_forward, mse, mse_grad, BatchNormState, DenseLayer, Mode,
};
use segcnn::model::{build, ArchitectureSpec};
use segcnn::rng::{rng_uniform, Rng};
use segcnn::tensor::Tensor;

pub const STEP: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|)`, with a floor so exact zeros compare as equal.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.data().iter().zip(numeric).map(|(a, n)| rel_err(*a, *n)).fold(0.0, f64::max)
}

/// Central differences of `loss` with respect to every element of `x`.
pub fn numeric(x: &Tensor<f64>, mut loss: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += STEP;
            let mut m = x.clone();
            m.data_mut()[i] -= STEP;
            (loss(&p) - loss(&m)) / (2.0 * STEP)
        })
        .collect()
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    rng_uniform(rng, shape, lo, hi).unwrap()
}

pub fn conv_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let n = 1 + rng.below(2);
    let dims: Vec<usize> = (0..3).map(|_| 1 + rng.below(4)).collect();
    let c = 1 + rng.below(3);
    let m = 1 + rng.below(3);
    let side = [1, 3][rng.below(2)];
    let x = uniform(&mut rng, &[n, dims[0], dims[1], dims[2], c], -1.0, 1.0);
    let f = ConvFilter::new(uniform(&mut rng, &[c, side, side, side, m], -1.0, 1.0), uniform(&mut rng, &[m], -1.0, 1.0)).unwrap();
    let up = uniform(&mut rng, &[n, dims[0], dims[1], dims[2], m], -1.0, 1.0);
    let (gx, gw, gb) = conv3d_backward(&x, &f, &up).unwrap();
    let run = |x: &Tensor<f64>, f: &ConvFilter<f64>| dot(&conv3d_forward(x, f, ConvMode::Gemm).unwrap(), &up);
    let ex = max_rel_err(&gx, &numeric(&x, |x| run(x, &f)));
    let ew = max_rel_err(&gw, &numeric(&f.weights, |w| run(&x, &ConvFilter::new(w.clone(), f.bias.clone()).unwrap())));
    let eb = max_rel_err(&gb, &numeric(&f.bias, |b| run(&x, &ConvFilter::new(f.weights.clone(), b.clone()).unwrap())));
    ex.max(ew).max(eb)
}

pub fn elu_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let x = uniform(&mut rng, &[3, 7], -3.0, 3.0);
    let up = uniform(&mut rng, &[3, 7], -1.0, 1.0);
    max_rel_err(&elu_backward(&x, &up).unwrap(), &numeric(&x, |x| dot(&elu_forward(x), &up)))
}

pub fn pool_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let x = uniform(&mut rng, &[2, 3, 4, 5, 2], -1.0, 1.0);
    let (y, idx) = maxpool3d_forward(&x).unwrap();
    let up = uniform(&mut rng, y.shape(), -1.0, 1.0);
    let g = maxpool3d_backward(&idx, &up).unwrap();
    max_rel_err(&g, &numeric(&x, |x| dot(&maxpool3d_forward(x).unwrap().0, &up)))
}

pub fn batchnorm_case(seed: u64, mode: Mode) -> f64 {
    let mut rng = Rng::new(seed);
    let x = uniform(&mut rng, &[2, 2, 3, 2, 3], -2.0, 2.0);
    let mut st = BatchNormState::new(3);
    st.gamma = uniform(&mut rng, &[3], 0.5, 1.5);
    st.beta = uniform(&mut rng, &[3], -0.5, 0.5);
    st.running_mean = uniform(&mut rng, &[3], -0.5, 0.5);
    st.running_var = uniform(&mut rng, &[3], 0.5, 2.0);
    let up = uniform(&mut rng, x.shape(), -1.0, 1.0);
    let (_, cache) = batchnorm_forward(&x, &mut st.clone(), mode).unwrap();
    let g = batchnorm_backward(&cache, &st, &up).unwrap();
    let run = |x: &Tensor<f64>, s: &BatchNormState<f64>| dot(&batchnorm_forward(x, &mut s.clone(), mode).unwrap().0, &up);
    let ex = max_rel_err(&g.input, &numeric(&x, |x| run(x, &st)));
    let eg = max_rel_err(&g.gamma, &numeric(&st.gamma, |v| run(&x, &BatchNormState { gamma: v.clone(), ..st.clone() })));
    let eb = max_rel_err(&g.beta, &numeric(&st.beta, |v| run(&x, &BatchNormState { beta: v.clone(), ..st.clone() })));
    ex.max(eg).max(eb)
}

pub fn dense_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (n, i, o) = (1 + rng.below(3), 1 + rng.below(6), 1 + rng.below(4));
    let x = uniform(&mut rng, &[n, i], -1.0, 1.0);
    let layer = DenseLayer::new(uniform(&mut rng, &[i, o], -1.0, 1.0), uniform(&mut rng, &[o], -1.0, 1.0)).unwrap();
    let up = uniform(&mut rng, &[n, o], -1.0, 1.0);
    let g = dense_backward(&x, &layer, &up).unwrap();
    let run = |x: &Tensor<f64>, l: &DenseLayer<f64>| dot(&dense_forward(x, l).unwrap(), &up);
    let ex = max_rel_err(&g.input, &numeric(&x, |x| run(x, &layer)));
    let ew = max_rel_err(&g.weights, &numeric(&layer.weights, |w| run(&x, &DenseLayer { weights: w.clone(), bias: layer.bias.clone() })));
    let eb = max_rel_err(&g.bias, &numeric(&layer.bias, |b| run(&x, &DenseLayer { weights: layer.weights.clone(), bias: b.clone() })));
    ex.max(ew).max(eb)
}

pub fn mse_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let p = uniform(&mut rng, &[5, 1], -2.0, 2.0);
    let t = uniform(&mut rng, &[5, 1], -2.0, 2.0);
    max_rel_err(&mse_grad(&p, &t).unwrap(), &numeric(&p, |p| mse(p, &t).unwrap()))
}

/// Spec of the tiny network used by the end-to-end check.
pub fn tiny_spec(seed: u64) -> ArchitectureSpec {
    let k = 1 + (seed % 2) as usize;
    let mut spec = ArchitectureSpec::new([2, 3, 2, 2], k, [4, 5, 4]);
    spec.boundary = 1;
    spec.hidden_units = 3;
    spec
}

/// Worst relative error over every trainable scalar of a tiny network,
/// differentiating the train-mode MSE of one batch.
pub fn network_case(seed: u64) -> f64 {
    let spec = tiny_spec(seed);
    let mut net = build::<f64>(&spec, seed).unwrap();
    let mut rng = Rng::with_stream(seed, 1);
    let [x0, x1, x2, c] = spec.input_shape().unwrap();
    let x = uniform(&mut rng, &[4, x0, x1, x2, c], -1.0, 1.0);
    let y = uniform(&mut rng, &[4, 1], -1.0, 1.0);
    // Non-trivial batch-norm affine parameters.
    for t in net.trainable_mut() {
        if t.rank() == 1 {
            let fresh = uniform(&mut rng, t.shape(), 0.5, 1.5);
            t.data_mut().copy_from_slice(fresh.data());
        }
    }
    let (_, grads) = net.loss_and_grads(&x, &y).unwrap();
    // Biases feeding batch norm have exactly zero gradient, so differences there are pure
    // rounding noise; errors are measured against a floor tied to the largest gradient.
    let floor = 1e-3 * grads.iter().flat_map(|g| g.data().iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let step = 1e-5;
    let mut worst = 0.0f64;
    for (p, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let mut eval = |delta: f64| {
                let orig = net.trainable_mut()[p].data()[i];
                net.trainable_mut()[p].data_mut()[i] = orig + delta;
                let out = net.forward(&x, Mode::Train).unwrap();
                net.trainable_mut()[p].data_mut()[i] = orig;
                mse(&out, &y).unwrap()
            };
            let n = (eval(step) - eval(-step)) / (2.0 * step);
            let a = g.data()[i];
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
        }
    }
    worst
}
