//! Finite-difference verification of every tape operation.
//!
//! Gradients for each layer must match central differences (h = 1e-5) in
//! double precision with max relative error below 1e-4, sampled over at
//! least 100 random parameter coordinates where the layer has that many.

use esbn_nn::gradcheck::check_gradients;
use esbn_nn::init::init_parameters;
use esbn_nn::ops::Activation;
use esbn_nn::tape::Graph;
use esbn_nn::tensor::Tensor;
use esbn_nn::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const COORDS: usize = 120;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    init_parameters(shape, Activation::Tanh, &mut rng(seed)).unwrap()
}

fn assert_pass(report: esbn_nn::gradcheck::GradCheckReport, what: &str) {
    assert!(
        report.max_rel_err < TOL,
        "{what}: max rel err {} at {}[{}] over {} coords",
        report.max_rel_err,
        report.worst_path,
        report.worst_index,
        report.coords_checked
    );
    assert!(report.coords_checked >= 100, "{what}: too few coordinates");
}

#[test]
fn linear_with_each_activation() {
    for (name, act) in [
        ("identity", None),
        ("relu", Some(Activation::Relu)),
        ("sigmoid", Some(Activation::Sigmoid)),
        ("tanh", Some(Activation::Tanh)),
    ] {
        let mut store = ParamStore::new();
        store.insert("w", rand_tensor(&[10, 12], 1), true);
        store.insert("b", Tensor::from_vec(vec![0.05; 10]), true);
        let x = rand_tensor(&[4, 12], 2);
        let t = rand_tensor(&[4, 10], 3);
        let report = check_gradients(
            &mut store,
            |s| {
                let mut g = Graph::new();
                let xi = g.leaf(x.clone());
                let w = g.param(s, "w");
                let b = g.param(s, "b");
                let mut y = g.linear(xi, w, b);
                y = match act {
                    None => y,
                    Some(Activation::Relu) => g.relu(y),
                    Some(Activation::Sigmoid) => g.sigmoid(y),
                    Some(Activation::Tanh) => g.tanh(y),
                    _ => unreachable!(),
                };
                let tt = g.leaf(t.clone());
                let loss = g.mse_mean(y, tt);
                let grads = g.compute_gradients(loss, s).unwrap();
                (g.value(loss).data()[0], grads)
            },
            COORDS,
            H,
            10,
        );
        assert_pass(report, &format!("linear+{name}"));
    }
}

#[test]
fn softmax_then_mse() {
    let mut store = ParamStore::new();
    store.insert("w", rand_tensor(&[12, 10], 4), true);
    store.insert("b", Tensor::zeros(&[12]), true);
    let x = rand_tensor(&[3, 10], 5);
    let t = rand_tensor(&[3, 12], 6);
    let report = check_gradients(
        &mut store,
        |s| {
            let mut g = Graph::new();
            let xi = g.leaf(x.clone());
            let w = g.param(s, "w");
            let b = g.param(s, "b");
            let y = g.linear(xi, w, b);
            let sm = g.softmax(y);
            let tt = g.leaf(t.clone());
            let loss = g.mse_mean(sm, tt);
            let grads = g.compute_gradients(loss, s).unwrap();
            (g.value(loss).data()[0], grads)
        },
        COORDS,
        H,
        11,
    );
    assert_pass(report, "softmax");
}

#[test]
fn cross_entropy_mean_gradient() {
    let mut store = ParamStore::new();
    store.insert("w", rand_tensor(&[12, 10], 7), true);
    store.insert("b", Tensor::zeros(&[12]), true);
    let x = rand_tensor(&[5, 10], 8);
    let targets = vec![0usize, 3, 11, 2, 7];
    let report = check_gradients(
        &mut store,
        |s| {
            let mut g = Graph::new();
            let xi = g.leaf(x.clone());
            let w = g.param(s, "w");
            let b = g.param(s, "b");
            let y = g.linear(xi, w, b);
            let loss = g.cross_entropy_mean(y, &targets);
            let grads = g.compute_gradients(loss, s).unwrap();
            (g.value(loss).data()[0], grads)
        },
        COORDS,
        H,
        12,
    );
    assert_pass(report, "cross_entropy_mean");
}

#[test]
fn conv2d_gradient() {
    let mut store = ParamStore::new();
    store.insert("k", rand_tensor(&[4, 2, 4, 4], 13), true);
    store.insert("kb", Tensor::from_vec(vec![0.01, -0.02, 0.03, 0.01]), true);
    let x = rand_tensor(&[2, 2, 8, 8], 14);
    let t = rand_tensor(&[2, 4, 4, 4], 15);
    let report = check_gradients(
        &mut store,
        |s| {
            let mut g = Graph::new();
            let xi = g.var(x.clone());
            let k = g.param(s, "k");
            let kb = g.param(s, "kb");
            let y = g.conv2d(xi, k, kb, 2, 1);
            let tt = g.leaf(t.clone());
            let loss = g.mse_mean(y, tt);
            let grads = g.compute_gradients(loss, s).unwrap();
            (g.value(loss).data()[0], grads)
        },
        COORDS,
        H,
        16,
    );
    assert_pass(report, "conv2d");
}

#[test]
fn conv2d_input_gradient() {
    // gradient w.r.t. the input itself (x registered as a parameter)
    let mut store = ParamStore::new();
    store.insert("x", rand_tensor(&[1, 2, 8, 8], 40), true);
    let k = rand_tensor(&[3, 2, 4, 4], 41);
    let kb = Tensor::zeros(&[3]);
    let t = rand_tensor(&[1, 3, 4, 4], 42);
    let report = check_gradients(
        &mut store,
        |s| {
            let mut g = Graph::new();
            let xi = g.param(s, "x");
            let ki = g.leaf(k.clone());
            let kbi = g.leaf(kb.clone());
            let y = g.conv2d(xi, ki, kbi, 2, 1);
            let tt = g.leaf(t.clone());
            let loss = g.mse_mean(y, tt);
            let grads = g.compute_gradients(loss, s).unwrap();
            (g.value(loss).data()[0], grads)
        },
        COORDS,
        H,
        43,
    );
    assert_pass(report, "conv2d input");
}

#[test]
fn conv2d_transpose_gradient() {
    let mut store = ParamStore::new();
    store.insert("k", rand_tensor(&[3, 2, 4, 4], 17), true);
    store.insert("kb", Tensor::from_vec(vec![0.02, -0.01]), true);
    store.insert("x", rand_tensor(&[2, 3, 4, 4], 18), true);
    let t = rand_tensor(&[2, 2, 8, 8], 19);
    let report = check_gradients(
        &mut store,
        |s| {
            let mut g = Graph::new();
            let xi = g.param(s, "x");
            let k = g.param(s, "k");
            let kb = g.param(s, "kb");
            let y = g.conv2d_transpose(xi, k, kb, 2, 1);
            let tt = g.leaf(t.clone());
            let loss = g.mse_mean(y, tt);
            let grads = g.compute_gradients(loss, s).unwrap();
            (g.value(loss).data()[0], grads)
        },
        COORDS,
        H,
        20,
    );
    assert_pass(report, "conv2d_transpose");
}

#[test]
fn batchnorm_2d_and_4d_gradients() {
    // 2-D (per-feature over batch)
    let mut store = ParamStore::new();
    store.insert("gamma", Tensor::from_vec(vec![1.1, 0.9, 1.3, 0.7, 1.05, 0.95]), true);
    store.insert("beta", Tensor::from_vec(vec![0.1, -0.2, 0.0, 0.3, -0.1, 0.2]), true);
    store.insert("x", rand_tensor(&[30, 6], 21), true);
    let t = rand_tensor(&[30, 6], 22);
    let report = check_gradients(
        &mut store,
        |s| {
            let mut g = Graph::new();
            let xi = g.param(s, "x");
            let ga = g.param(s, "gamma");
            let be = g.param(s, "beta");
            let mut rm = Tensor::zeros(&[6]);
            let mut rv = Tensor::full(&[6], 1.0);
            let y = g.batchnorm(xi, ga, be, &mut rm, &mut rv, true, 1e-5, 0.1);
            let tt = g.leaf(t.clone());
            let loss = g.mse_mean(y, tt);
            let grads = g.compute_gradients(loss, s).unwrap();
            (g.value(loss).data()[0], grads)
        },
        COORDS,
        H,
        23,
    );
    assert_pass(report, "batchnorm 2d");

    // 4-D (per-channel over batch and space)
    let mut store = ParamStore::new();
    store.insert("gamma", Tensor::from_vec(vec![1.0, 1.2, 0.8]), true);
    store.insert("beta", Tensor::from_vec(vec![0.0, 0.1, -0.1]), true);
    store.insert("x", rand_tensor(&[3, 3, 4, 4], 24), true);
    let t = rand_tensor(&[3, 3, 4, 4], 25);
    let report = check_gradients(
        &mut store,
        |s| {
            let mut g = Graph::new();
            let xi = g.param(s, "x");
            let ga = g.param(s, "gamma");
            let be = g.param(s, "beta");
            let mut rm = Tensor::zeros(&[3]);
            let mut rv = Tensor::full(&[3], 1.0);
            let y = g.batchnorm(xi, ga, be, &mut rm, &mut rv, true, 1e-5, 0.1);
            let tt = g.leaf(t.clone());
            let loss = g.mse_mean(y, tt);
            let grads = g.compute_gradients(loss, s).unwrap();
            (g.value(loss).data()[0], grads)
        },
        COORDS,
        H,
        26,
    );
    assert_pass(report, "batchnorm 4d");
}

#[test]
fn lstm_cell_gradient() {
    let hidden = 6;
    let input = 5;
    let batch = 4;
    let mut store = ParamStore::new();
    store.insert("w_ih", rand_tensor(&[4 * hidden, input], 27), true);
    store.insert("w_hh", rand_tensor(&[4 * hidden, hidden], 28), true);
    store.insert("bias", rand_tensor(&[4 * hidden, 1], 29).reshaped(vec![4 * hidden]).unwrap(), true);
    store.insert("x", rand_tensor(&[batch, input], 30), true);
    let h0 = rand_tensor(&[batch, hidden], 31);
    let c0 = rand_tensor(&[batch, hidden], 32);
    let t = rand_tensor(&[batch, hidden], 33);
    let report = check_gradients(
        &mut store,
        |s| {
            let mut g = Graph::new();
            let xi = g.param(s, "x");
            let h = g.leaf(h0.clone());
            let c = g.leaf(c0.clone());
            let w_ih = g.param(s, "w_ih");
            let w_hh = g.param(s, "w_hh");
            let bias = g.param(s, "bias");
            // two chained steps exercise both state paths
            let (h1, c1) = g.lstm_cell(xi, h, c, w_ih, w_hh, bias);
            let (h2, _c2) = g.lstm_cell(xi, h1, c1, w_ih, w_hh, bias);
            let tt = g.leaf(t.clone());
            let loss = g.mse_mean(h2, tt);
            let grads = g.compute_gradients(loss, s).unwrap();
            (g.value(loss).data()[0], grads)
        },
        COORDS,
        H,
        34,
    );
    assert_pass(report, "lstm_cell");
}

#[test]
fn attention_style_composite_gradient() {
    // softmax over row-dots, weighted sum, gating: the retrieval pattern the
    // sequence models are built from.
    let mut store = ParamStore::new();
    store.insert("m0", rand_tensor(&[3, 8], 35), true);
    store.insert("m1", rand_tensor(&[3, 8], 36), true);
    store.insert("m2", rand_tensor(&[3, 8], 37), true);
    store.insert("q", rand_tensor(&[3, 8], 38), true);
    store.insert("gate_w", rand_tensor(&[1, 8], 39), true);
    let t = rand_tensor(&[3, 8], 44);
    let report = check_gradients(
        &mut store,
        |s| {
            let mut g = Graph::new();
            let rows = [
                g.param(s, "m0"),
                g.param(s, "m1"),
                g.param(s, "m2"),
            ];
            let q = g.param(s, "q");
            let gw = g.param(s, "gate_w");
            let gb = g.zeros(&[1]);
            let dots: Vec<_> = rows.iter().map(|&m| g.row_dot(m, q)).collect();
            let cat = g.concat_cols(&dots);
            let w = g.softmax(cat);
            let mut acc = None;
            for (i, &m) in rows.iter().enumerate() {
                let wi = g.slice_cols(w, i, 1);
                let term = g.mul_col(m, wi);
                acc = Some(match acc {
                    None => term,
                    Some(a) => g.add(a, term),
                });
            }
            let gate_pre = g.linear(q, gw, gb);
            let gate = g.sigmoid(gate_pre);
            let gated = g.mul_col(acc.unwrap(), gate);
            let tt = g.leaf(t.clone());
            let loss = g.mse_mean(gated, tt);
            let grads = g.compute_gradients(loss, s).unwrap();
            (g.value(loss).data()[0], grads)
        },
        COORDS,
        H,
        45,
    );
    assert_pass(report, "attention composite");
}

#[test]
fn broadcast_and_slice_rows_gradient() {
    let mut store = ParamStore::new();
    store.insert("mem", rand_tensor(&[1, 10], 46), true);
    store.insert("w", rand_tensor(&[10, 10], 47), true);
    let t = rand_tensor(&[4, 10], 48);
    let report = check_gradients(
        &mut store,
        |s| {
            let mut g = Graph::new();
            let mem = g.param(s, "mem");
            let w = g.param(s, "w");
            let b = g.zeros(&[10]);
            let big = g.broadcast_rows(mem, 8);
            let top = g.slice_rows(big, 0, 4);
            let bot = g.slice_rows(big, 4, 4);
            let mixed = g.add(top, bot);
            let y = g.linear(mixed, w, b);
            let tt = g.leaf(t.clone());
            let loss = g.mse_mean(y, tt);
            let grads = g.compute_gradients(loss, s).unwrap();
            (g.value(loss).data()[0], grads)
        },
        COORDS,
        H,
        49,
    );
    assert_pass(report, "broadcast/slice rows");
}

#[test]
fn scale_sub_mul_reshape_gradient() {
    let mut store = ParamStore::new();
    store.insert("a", rand_tensor(&[6, 10], 50), true);
    store.insert("b", rand_tensor(&[6, 10], 51), true);
    let t = rand_tensor(&[4, 15], 52);
    let report = check_gradients(
        &mut store,
        |s| {
            let mut g = Graph::new();
            let a = g.param(s, "a");
            let b = g.param(s, "b");
            let prod = g.mul(a, b);
            let diff = g.sub(prod, a);
            let scaled = g.scale(diff, 1.7);
            let reshaped = g.reshape(scaled, &[4, 15]);
            let tt = g.leaf(t.clone());
            let loss = g.mse_mean(reshaped, tt);
            let grads = g.compute_gradients(loss, s).unwrap();
            (g.value(loss).data()[0], grads)
        },
        COORDS,
        H,
        53,
    );
    assert_pass(report, "scale/sub/mul/reshape");
}
