use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seld_autodiff::gradcheck::{check_inputs, GradCheckOptions};
use seld_autodiff::{concat, ForwardCtx, Graph, MultiHeadAttention, ParamStore, PoolKind, Tensor};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1e-12))
}

// Direct six-loop cross-correlation.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(vec![b, cout, ho, wo]);
    for n in 0..b {
        for co in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let ih = (oh * stride + i) as isize - pad as isize;
                                let iw = (ow * stride + j) as isize - pad as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                    acc += x.get(&[n, ci, ih as usize, iw as usize]) * w.get(&[co, ci, i, j]);
                                }
                            }
                        }
                    }
                    out.set(&[n, co, oh, ow], acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_all_ones_sums_to_nine() {
    let g = Graph::<f64>::new();
    let x = g.input(Tensor::ones(vec![1, 1, 3, 3]));
    let w = g.input(Tensor::ones(vec![1, 1, 3, 3]));
    let y = x.conv2d(&w, None, (1, 1), (0, 0)).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 1, 1]);
    assert_eq!(y.value().item(), 9.0);
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xt = rand_tensor(&[2, 1, 5, 4], &mut rng);
    let mut k = Tensor::zeros(vec![1, 1, 3, 3]);
    k.set(&[0, 0, 1, 1], 1.0);
    let g = Graph::new();
    let y = g.input(xt.clone()).conv2d(&g.input(k), None, (1, 1), (1, 1)).unwrap();
    assert_eq!(*y.value(), xt);
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let xt = rand_tensor(&[2, 3, 8, 8], &mut rng);
        let wt = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let bias: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = Graph::new();
        let y = g
            .input(xt.clone())
            .conv2d(&g.input(wt.clone()), Some(&g.input(Tensor::new(vec![4], bias.clone()).unwrap())), (stride, stride), (pad, pad))
            .unwrap();
        let want = naive_conv(&xt, &wt, &bias, stride, pad);
        assert_eq!(y.shape(), want.shape());
        assert!(rel_close(y.value().data(), want.data(), 1e-6));
    }
}

#[test]
fn conv2d_f32_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xt = rand_tensor(&[2, 3, 8, 8], &mut rng);
    let wt = rand_tensor(&[4, 3, 3, 3], &mut rng);
    let want = naive_conv(&xt, &wt, &[0.0; 4], 1, 1);
    let g = Graph::<f32>::new();
    let y = g.input(xt.cast()).conv2d(&g.input(wt.cast()), None, (1, 1), (1, 1)).unwrap();
    let got: Vec<f64> = y.value().data().iter().map(|&v| v as f64).collect();
    assert!(got.iter().zip(want.data()).all(|(a, b)| (a - b).abs() <= 1e-5 * b.abs().max(1.0)));
}

#[test]
fn conv2d_shape_error_names_dimension() {
    let g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(vec![1, 3, 4, 4]));
    let w = g.input(Tensor::zeros(vec![2, 2, 3, 3]));
    let err = x.conv2d(&w, None, (1, 1), (1, 1)).unwrap_err().to_string();
    assert!(err.contains("channel"), "{err}");
}

#[test]
fn depthwise_single_channel_equals_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xt = rand_tensor(&[2, 1, 6, 5], &mut rng);
    let wt = rand_tensor(&[1, 1, 3, 3], &mut rng);
    let g = Graph::new();
    let (x, w) = (g.input(xt), g.input(wt));
    let a = x.depthwise_conv2d(&w, None, (1, 1), (1, 1)).unwrap();
    let b = x.conv2d(&w, None, (1, 1), (1, 1)).unwrap();
    assert!(rel_close(a.value().data(), b.value().data(), 1e-12));
}

#[test]
fn depthwise_identity_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xt = rand_tensor(&[2, 4, 5, 5], &mut rng);
    let mut k = Tensor::zeros(vec![4, 1, 3, 3]);
    for c in 0..4 {
        k.set(&[c, 0, 1, 1], 1.0);
    }
    let g = Graph::new();
    let y = g.input(xt.clone()).depthwise_conv2d(&g.input(k), None, (1, 1), (1, 1)).unwrap();
    assert_eq!(*y.value(), xt);
}

#[test]
fn depthwise_matches_per_channel_conv2d_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (b, c, h, w) = (2, 5, 7, 6);
    let xt = rand_tensor(&[b, c, h, w], &mut rng);
    let wt = rand_tensor(&[c, 1, 3, 3], &mut rng);
    let bias: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let g = Graph::new();
    let y = g
        .input(xt.clone())
        .depthwise_conv2d(&g.input(wt.clone()), Some(&g.input(Tensor::new(vec![c], bias.clone()).unwrap())), (1, 1), (1, 1))
        .unwrap();
    for ch in 0..c {
        let xc = Tensor::from_fn(vec![b, 1, h, w], |i| {
            let (n, r) = (i / (h * w), i % (h * w));
            xt.data()[(n * c + ch) * h * w + r]
        });
        let wc = Tensor::new(vec![1, 1, 3, 3], wt.data()[ch * 9..(ch + 1) * 9].to_vec()).unwrap();
        let want = naive_conv(&xc, &wc, &[bias[ch]], 1, 1);
        let yv = y.value();
        for n in 0..b {
            let got = &yv.data()[(n * c + ch) * h * w..][..h * w];
            assert!(rel_close(got, &want.data()[n * h * w..(n + 1) * h * w], 1e-6));
        }
    }
}

#[test]
fn linear_identity_and_sum() {
    let g = Graph::<f64>::new();
    let x = g.input(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let eye = g.input(Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let zero = g.input(Tensor::zeros(vec![3]));
    assert_eq!(x.linear(&eye, Some(&zero)).unwrap().value().data(), &[1.0, 2.0, 3.0]);
    let ones = g.input(Tensor::ones(vec![2, 3]));
    assert_eq!(x.linear(&ones, None).unwrap().value().data(), &[6.0, 6.0]);
}

#[test]
fn linear_matches_matrix_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xt = rand_tensor(&[2, 3, 5], &mut rng);
    let wt = rand_tensor(&[4, 5], &mut rng);
    let bt = rand_tensor(&[4], &mut rng);
    let g = Graph::new();
    let y = g.input(xt.clone()).linear(&g.input(wt.clone()), Some(&g.input(bt.clone()))).unwrap();
    assert_eq!(y.shape(), vec![2, 3, 4]);
    for r in 0..6 {
        for o in 0..4 {
            let want: f64 = bt.data()[o] + (0..5).map(|k| xt.data()[r * 5 + k] * wt.data()[o * 5 + k]).sum::<f64>();
            assert!((y.value().data()[r * 4 + o] - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }
}

#[test]
fn softmax_analytic_cases() {
    let g = Graph::<f64>::new();
    let u = g.input(Tensor::full(vec![5], 0.3)).softmax(0).unwrap();
    assert!(u.value().data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    let s = g.input(Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap()).softmax(0).unwrap();
    assert!((s.value().data()[0] - 0.25).abs() < 1e-12 && (s.value().data()[1] - 0.75).abs() < 1e-12);
}

#[test]
fn softmax_shift_invariance_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xt = rand_tensor(&[4, 3, 7], &mut rng).map(|v| v * 5.0);
    let g = Graph::new();
    for axis in 0..3 {
        let a = g.input(xt.clone()).softmax(axis).unwrap();
        let b = g.input(xt.map(|v| v + 1e4)).softmax(axis).unwrap();
        assert!(a.value().max_abs_diff(&b.value()) <= 1e-6);
        let sums = a.mean_axis(axis).unwrap();
        let n = xt.shape()[axis] as f64;
        assert!(sums.value().data().iter().all(|&s| (s * n - 1.0).abs() <= 1e-6));
        assert!(a.value().data().iter().all(|&p| p >= 0.0));
    }
}

fn mha(embed: usize, heads: usize, seed: u64) -> (ParamStore<f64>, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = MultiHeadAttention::new(&mut store, "attn", embed, heads, 0.0, &mut rng).unwrap();
    (store, m)
}

#[test]
fn mhsa_rejects_indivisible_heads() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(MultiHeadAttention::new(&mut store, "a", 10, 3, 0.0, &mut rng).is_err());
}

#[test]
fn mhsa_single_token_is_value_projection() {
    let (store, m) = mha(8, 2, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let xt = rand_tensor(&[3, 1, 8], &mut rng);
    let g = Graph::new();
    let x = g.input(xt);
    let y = m.forward(&g, &store, x, &ForwardCtx::eval()).unwrap();
    let want = m.out_proj.forward(&g, &store, m.v_proj.forward(&g, &store, x).unwrap()).unwrap();
    assert!(y.value().max_abs_diff(&want.value()) <= 1e-12);
}

#[test]
fn mhsa_is_permutation_equivariant() {
    let (store, m) = mha(16, 4, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, s, e) = (2, 6, 16);
    let xt = rand_tensor(&[n, s, e], &mut rng);
    let perm = [3, 0, 5, 1, 4, 2];
    let permute = |t: &Tensor<f64>| {
        Tensor::from_fn(vec![n, s, e], |i| {
            let (b, r) = (i / (s * e), i % (s * e));
            let (p, k) = (r / e, r % e);
            t.data()[(b * s + perm[p]) * e + k]
        })
    };
    let g = Graph::new();
    let y = m.forward(&g, &store, g.input(xt.clone()), &ForwardCtx::eval()).unwrap();
    let yp = m.forward(&g, &store, g.input(permute(&xt)), &ForwardCtx::eval()).unwrap();
    assert!(permute(&y.value()).max_abs_diff(&yp.value()) <= 1e-5);
}

#[test]
fn mhsa_two_token_hand_computation() {
    // 1 head, embed 1: q = 2x, k = x, v = 3x + 1, out = 0.5y
    let (mut store, m) = mha(1, 1, 13);
    let set = |store: &mut ParamStore<f64>, id, v: f64| store.get_mut(id).value = Tensor::new(store.get(id).value.shape().to_vec(), vec![v]).unwrap();
    set(&mut store, m.q_proj.weight, 2.0);
    set(&mut store, m.q_proj.bias.unwrap(), 0.0);
    set(&mut store, m.k_proj.weight, 1.0);
    set(&mut store, m.k_proj.bias.unwrap(), 0.0);
    set(&mut store, m.v_proj.weight, 3.0);
    set(&mut store, m.v_proj.bias.unwrap(), 1.0);
    set(&mut store, m.out_proj.weight, 0.5);
    set(&mut store, m.out_proj.bias.unwrap(), 0.0);
    let x = [0.5f64, -1.0];
    let g = Graph::new();
    let y = m.forward(&g, &store, g.input(Tensor::new(vec![1, 2, 1], x.to_vec()).unwrap()), &ForwardCtx::eval()).unwrap();
    for i in 0..2 {
        let logits: Vec<f64> = (0..2).map(|j| 2.0 * x[i] * x[j]).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let want: f64 = (0..2).map(|j| logits[j].exp() / z * (3.0 * x[j] + 1.0)).sum::<f64>() * 0.5;
        assert!((y.value().data()[i] - want).abs() <= 1e-6);
    }
}

#[test]
fn backward_of_simple_sums() {
    let g = Graph::<f64>::new();
    let xt = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap();
    let x = g.leaf(xt.clone());
    let grads = g.backward(x.sum()).unwrap();
    assert!(grads.wrt(&x).unwrap().data().iter().all(|&v| v == 1.0));
    let g = Graph::<f64>::new();
    let x = g.leaf(xt.clone());
    let grads = g.backward(x.mul(&x).unwrap().sum()).unwrap();
    assert_eq!(grads.wrt(&x).unwrap().data(), xt.map(|v| 2.0 * v).data());
}

#[test]
fn backward_requires_scalar_root() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::ones(vec![3]));
    assert!(g.backward(x.relu()).is_err());
}

#[test]
fn shared_parameter_receives_single_accumulated_gradient() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", Tensor::new(vec![1], vec![3.0]).unwrap(), true).unwrap();
    let g = Graph::new();
    let (a, b) = (g.param(&store, id), g.param(&store, id));
    let grads = g.backward(a.mul(&b).unwrap().sum()).unwrap();
    assert_eq!(grads.params().count(), 1);
    assert_eq!(grads.param(id).unwrap().data(), &[6.0]);
}

const TOL: f64 = 1e-4;

fn gc<F>(shapes: &[&[usize]], seed: u64, f: F)
where
    F: for<'g> Fn(&'g Graph<f64>, &[seld_autodiff::Var<'g, f64>]) -> seld_autodiff::Result<seld_autodiff::Var<'g, f64>>,
{
    for instance in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 100 + instance);
        let inputs: Vec<_> = shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect();
        let report = check_inputs(&inputs, &f, &GradCheckOptions::default()).unwrap();
        assert!(report.passes(TOL), "instance {instance}: {report:?}");
    }
}

fn project<'g>(y: seld_autodiff::Var<'g, f64>, seed: u64) -> seld_autodiff::Result<seld_autodiff::Var<'g, f64>> {
    // weight the output by a fixed random projection so every element matters
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = y.graph().input(rand_tensor(&y.shape(), &mut rng));
    Ok(y.mul(&r)?.sum())
}

#[test]
fn gradcheck_elementwise_and_activations() {
    gc(&[&[3, 4], &[3, 4]], 1, |_, v| project(v[0].add(&v[1])?.mul(&v[0])?.sub(&v[1])?.scale(0.7), 1));
    gc(&[&[3, 5]], 2, |_, v| project(v[0].relu(), 2));
    gc(&[&[3, 5]], 3, |_, v| project(v[0].gelu(), 3));
    gc(&[&[3, 5]], 4, |_, v| project(v[0].tanh(), 4));
}

#[test]
fn gradcheck_linear_and_bmm() {
    gc(&[&[2, 3, 5], &[4, 5], &[4]], 5, |_, v| project(v[0].linear(&v[1], Some(&v[2]))?, 5));
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
        let b: &[usize] = if tb { &[2, 5, 4] } else { &[2, 4, 5] };
        gc(&[a, b], 6, move |_, v| project(v[0].bmm(&v[1], ta, tb)?, 6));
    }
}

#[test]
fn gradcheck_convolutions() {
    gc(&[&[2, 3, 6, 5], &[4, 3, 3, 3], &[4]], 7, |_, v| project(v[0].conv2d(&v[1], Some(&v[2]), (1, 1), (1, 1))?, 7));
    gc(&[&[2, 3, 7, 6], &[2, 3, 3, 2], &[2]], 8, |_, v| project(v[0].conv2d(&v[1], Some(&v[2]), (2, 1), (1, 0))?, 8));
    gc(&[&[2, 3, 4, 4], &[5, 3, 1, 1], &[5]], 9, |_, v| project(v[0].conv2d(&v[1], Some(&v[2]), (1, 1), (0, 0))?, 9));
    gc(&[&[2, 3, 5, 4], &[3, 1, 3, 3], &[3]], 10, |_, v| project(v[0].depthwise_conv2d(&v[1], Some(&v[2]), (1, 1), (1, 1))?, 10));
}

#[test]
fn gradcheck_pooling() {
    for k in [(5, 2), (1, 2), (2, 2)] {
        gc(&[&[2, 2, 10, 4]], 11, move |_, v| project(v[0].pool2d(k, PoolKind::Max)?, 11));
        gc(&[&[2, 2, 10, 4]], 12, move |_, v| project(v[0].pool2d(k, PoolKind::Avg)?, 12));
    }
}

#[test]
fn gradcheck_normalization() {
    gc(&[&[3, 4, 3, 2], &[4], &[4]], 13, |_, v| project(v[0].batch_norm(&v[1], &v[2], None)?.0, 13));
    gc(&[&[3, 4, 3, 2], &[4], &[4]], 14, |_, v| {
        let rm = [0.1, -0.2, 0.3, 0.0];
        let rv = [1.5, 0.5, 2.0, 1.0];
        project(v[0].batch_norm(&v[1], &v[2], Some((&rm, &rv)))?.0, 14)
    });
    gc(&[&[3, 2, 6], &[6], &[6]], 15, |_, v| project(v[0].layer_norm(&v[1], &v[2])?, 15));
}

#[test]
fn gradcheck_softmax_and_shape_ops() {
    gc(&[&[3, 4, 5]], 16, |_, v| project(v[0].softmax(1)?, 16));
    gc(&[&[2, 3, 4]], 17, |_, v| project(v[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?, 17));
    gc(&[&[2, 3, 4], &[2, 1, 4]], 18, |_, v| project(concat(&[v[0], v[1]], 1)?, 18));
    gc(&[&[2, 3, 4]], 19, |_, v| project(v[0].mean_axis(1)?, 19));
    gc(&[&[2, 3]], 20, |_, v| Ok(v[0].mean()));
    gc(&[&[4, 6]], 21, |_, v| project(v[0].dropout(0.3, 99)?, 21));
    gc(&[&[4, 6], &[4, 6]], 22, |_, v| v[0].mse(&v[1]));
}

#[test]
fn gradcheck_attention() {
    let (store, m) = mha(8, 2, 23);
    gc(&[&[2, 5, 8]], 23, move |g, v| project(m.forward(g, &store, v[0], &ForwardCtx::eval())?, 23));
}

#[test]
fn gradcheck_detects_perturbed_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand_tensor(&[3, 3], &mut rng);
    let opts = GradCheckOptions {
        perturb: 1e-2,
        ..Default::default()
    };
    let report = check_inputs(&[x], |_, v| Ok(v[0].tanh().sum()), &opts).unwrap();
    assert!(!report.passes(TOL));
}

#[test]
fn backward_is_deterministic() {
    let (store, m) = mha(8, 2, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let xt = rand_tensor(&[2, 4, 8], &mut rng);
    let run = || {
        let g = Graph::new();
        let y = m.forward(&g, &store, g.input(xt.clone()), &ForwardCtx::eval()).unwrap();
        let grads = g.backward(y.mul(&y).unwrap().sum()).unwrap();
        grads.params().map(|(_, t)| t.clone()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
