use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random_array(shape: &[usize], rng: &mut ChaCha8Rng) -> Array<f64> {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_identity() {
    let eye = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let m = t64(&[2, 2], &[1.5, -2.0, 3.0, 4.25]);
    assert_eq!(eye.matmul(&m).unwrap().data(), m.data());
}

#[test]
fn matmul_hand_arithmetic() {
    let a = t64(&[1, 2], &[1.0, 2.0]);
    let b = t64(&[2, 1], &[3.0, 4.0]);
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[1, 1]);
    assert_eq!(c.data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = t64(&[2, 3], &[0.0; 6]);
    let b = t64(&[2, 3], &[0.0; 6]);
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, TensorError::Shape { .. }));
}

#[test]
fn matmul_grad_matches_finite_differences_and_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_array(&[5, 7], &mut rng);
    let b = random_array(&[7, 3], &mut rng);
    let f = |ts: &[Tensor<f64>]| Ok(ts[0].matmul(&ts[1])?.sum());
    let numeric = gradcheck::numeric_gradients(&[a.clone(), b.clone()], 1e-4, f).unwrap();
    let analytic = gradcheck::analytic_gradients(&[a.clone(), b.clone()], f).unwrap();
    // closed form: d sum(AB)/dA = ones(5,3) · Bᵀ, i.e. each row holds B's row sums
    for i in 0..5 {
        for k in 0..7 {
            let row_sum: f64 = (0..3).map(|j| b.data[k * 3 + j]).sum();
            assert!((numeric[0][i * 7 + k] - row_sum).abs() < 1e-8);
            assert!((analytic[0][i * 7 + k] - row_sum).abs() < 1e-12);
        }
    }
    assert!(gradcheck::compare(&analytic, &numeric).max_rel_err < 1e-6);
}

#[test]
fn batched_broadcast_matmul_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_array(&[2, 3, 4, 5], &mut rng);
    let b = random_array(&[3, 5, 2], &mut rng);
    let w = random_array(&[2, 3, 4, 2], &mut rng);
    let r = gradcheck::check(&[a, b, w], 1e-5, |ts| {
        Ok(ts[0].matmul(&ts[1])?.mul(&ts[2])?.sum())
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");

    let a = random_array(&[1, 4, 3], &mut rng);
    let b = random_array(&[2, 3, 2], &mut rng);
    let r = gradcheck::check(&[a, b], 1e-5, |ts| Ok(ts[0].matmul(&ts[1])?.square()?.sum())).unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn softmax_symmetric_pair() {
    let s = t64(&[2], &[0.0, 0.0]).softmax().unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
}

#[test]
fn gelu_fixed_point_and_formula() {
    let g = t64(&[3], &[0.0, 1.0, -2.0]).gelu();
    assert_eq!(g.data()[0], 0.0);
    let exact = |x: f64| {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    };
    assert!((g.data()[1] - exact(1.0)).abs() < 1e-15);
    assert!((g.data()[2] - exact(-2.0)).abs() < 1e-15);
}

#[test]
fn stationary_point_has_zero_gradient() {
    let c = t64(&[3], &[0.5, -1.0, 2.0]);
    let x = Tensor::leaf(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    x.sub(&c).unwrap().square().unwrap().mean().backward().unwrap();
    assert_eq!(*x.grad().unwrap(), vec![0.0, 0.0, 0.0]);
}

#[test]
fn strict_mode_rejects_division_by_zero() {
    let a = t64(&[2], &[1.0, 1.0]);
    let b = t64(&[2], &[1.0, 0.0]);
    assert!(a.div(&b).is_ok());
    let old = set_strict(true);
    assert!(matches!(a.div(&b), Err(TensorError::NonFinite { op: "div" })));
    set_strict(old);
}

#[test]
fn layer_norm_examples() {
    let ln = layer_norm(&t64(&[4], &[2.0; 4]), None, None, 1e-5).unwrap();
    assert_eq!(ln.data(), &[0.0; 4]);
    let gain = t64(&[2], &[1.0, 1.0]);
    let bias = t64(&[2], &[0.0, 0.0]);
    let ln = layer_norm(&t64(&[2], &[1.0, 3.0]), Some(&gain), Some(&bias), 0.0).unwrap();
    assert_eq!(ln.data(), &[-1.0, 1.0]);
}

#[test]
fn layer_norm_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_array(&[4], &mut rng);
    let g = random_array(&[4], &mut rng);
    let b = random_array(&[4], &mut rng);
    let w = random_array(&[4], &mut rng);
    let r = gradcheck::check(&[x, g, b, w], 1e-4, |ts| {
        Ok(layer_norm(&ts[0], Some(&ts[1]), Some(&ts[2]), 1e-5)?.mul(&ts[3])?.sum())
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-3, "{r:?}");
}

#[test]
fn backward_examples() {
    let w = Tensor::leaf(&[3], vec![0.1, 0.2, 0.3]).unwrap();
    w.sum().backward().unwrap();
    assert_eq!(*w.grad().unwrap(), vec![1.0, 1.0, 1.0]);

    let w = Tensor::leaf(&[3], vec![1.0, -2.0, 3.0]).unwrap();
    w.square().unwrap().sum().backward().unwrap();
    assert_eq!(*w.grad().unwrap(), vec![2.0, -4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let w = Tensor::<f64>::leaf(&[3], vec![0.0; 3]).unwrap();
    assert!(matches!(w.scale(2.0).backward(), Err(TensorError::NotScalar(_))));
}

#[test]
fn gradients_accumulate_across_uses_and_calls() {
    let w = Tensor::leaf(&[2], vec![1.0, 2.0]).unwrap();
    // w used twice in one graph
    w.add(&w).unwrap().sum().backward().unwrap();
    assert_eq!(*w.grad().unwrap(), vec![2.0, 2.0]);
    // second pass adds on top
    w.sum().backward().unwrap();
    assert_eq!(*w.grad().unwrap(), vec![3.0, 3.0]);
}

#[test]
fn structural_ops_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_array(&[2, 3, 4], &mut rng);
    let y = random_array(&[2, 2, 4], &mut rng);
    let table = random_array(&[5, 4], &mut rng);
    let w = random_array(&[4, 5, 2], &mut rng);
    let r = gradcheck::check(&[x, y, table, w], 1e-5, |ts| {
        let cat = concat(&[ts[0].clone(), ts[1].clone()], 1)?; // (2,5,4)
        let p = cat.permute(&[2, 1, 0])?; // (4,5,2)
        let s = p.slice(1, 1, 3)?; // (4,3,2)
        let e = embedding(&ts[2], &[0, 3, 3])?; // (3,4)
        let e = e.transpose(0, 1)?.reshape(&[4, 3, 1])?;
        let z = s.mul(&e)?.tanh().exp();
        let pooled = z.mean_axis(1)?; // (4,2)
        let w = ts[3].slice(1, 0, 1)?.reshape(&[4, 2])?;
        Ok(pooled.mul(&w)?.softmax()?.sqrt().sum())
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn elementwise_broadcast_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = random_array(&[3, 1, 4], &mut rng);
    let b = random_array(&[2, 4], &mut rng);
    let mut c = random_array(&[4], &mut rng);
    c.data.iter_mut().for_each(|v| *v = 1.5 + *v);
    let r = gradcheck::check(&[a, b, c], 1e-5, |ts| {
        let s = ts[0].add(&ts[1])?.sub(&ts[2])?.mul(&ts[1])?.div(&ts[2])?;
        Ok(s.gelu().silu()?.neg().scale(0.7).add_scalar(0.1).square()?.sum())
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn chunk_splits_evenly() {
    let x = t64(&[2, 6], &(0..12).map(|v| v as f64).collect::<Vec<_>>());
    let parts = x.chunk(3, 1).unwrap();
    assert_eq!(parts[1].data(), &[2.0, 3.0, 8.0, 9.0]);
    assert!(x.chunk(4, 1).is_err());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a = Tensor::from_array(&random_array(&[4, 6], &mut rng).cast::<f32>(), true);
        let b = Tensor::from_array(&random_array(&[6, 6], &mut rng).cast::<f32>(), true);
        let y = a.matmul(&b).unwrap().softmax().unwrap();
        let y = layer_norm(&y, None, None, 1e-6).unwrap().gelu().square().unwrap().mean();
        y.backward().unwrap();
        (a.grad_vec().unwrap(), b.grad_vec().unwrap())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

/// Attention spelled out with generic graph ops.
fn composed_attention(qkv: &Tensor<f64>, heads: usize) -> Result<Tensor<f64>> {
    let (b, l, d3) = (qkv.shape()[0], qkv.shape()[1], qkv.shape()[2]);
    let d = d3 / 3;
    let dh = d / heads;
    let split = |t: &Tensor<f64>| t.reshape(&[b, l, heads, dh])?.permute(&[0, 2, 1, 3]);
    let parts = qkv.chunk(3, 2)?;
    let (q, k, v) = (split(&parts[0])?, split(&parts[1])?, split(&parts[2])?);
    let scores = q.matmul(&k.transpose(2, 3)?)?.scale(1.0 / (dh as f64).sqrt());
    scores.softmax()?.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, l, d])
}

#[test]
fn fused_attention_matches_composed_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let qkv = random_array(&[2, 5, 12], &mut rng);
    let w = random_array(&[2, 5, 4], &mut rng);
    let fused = |ts: &[Tensor<f64>]| multi_head_attention(&ts[0], 2)?.mul(&ts[1]).map(|t| t.sum());
    let composed = |ts: &[Tensor<f64>]| composed_attention(&ts[0], 2)?.mul(&ts[1]).map(|t| t.sum());
    let leaves = [qkv.clone(), w.clone()];
    let a = gradcheck::analytic_gradients(&leaves, fused).unwrap();
    let b = gradcheck::analytic_gradients(&leaves, composed).unwrap();
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
    let out_f = multi_head_attention(&Tensor::from_array(&qkv, false), 2).unwrap();
    let out_c = composed_attention(&Tensor::from_array(&qkv, false), 2).unwrap();
    for (x, y) in out_f.data().iter().zip(out_c.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    let r = gradcheck::check(&leaves, 1e-5, fused).unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn attention_rejects_bad_head_splits() {
    assert!(multi_head_attention(&Tensor::<f64>::zeros(&[1, 2, 12]), 5).is_err());
    assert!(multi_head_attention(&Tensor::<f64>::zeros(&[2, 12]), 2).is_err());
}

#[test]
fn fast_f32_exp_and_tanh_track_libm() {
    let mut worst_exp = 0.0f64;
    let mut worst_tanh = 0.0f64;
    for i in 0..=200_000 {
        let x = -87.0 + 175.0 * i as f64 / 200_000.0;
        let got = (x as f32).fast_exp() as f64;
        let want = (x as f32 as f64).exp();
        worst_exp = worst_exp.max((got - want).abs() / want);
        let y = (x / 8.0) as f32;
        worst_tanh = worst_tanh.max(((y.fast_tanh() as f64) - (y as f64).tanh()).abs());
    }
    assert!(worst_exp < 5e-7, "{worst_exp}");
    assert!(worst_tanh < 5e-7, "{worst_tanh}");
    assert_eq!((-1000.0f32).fast_exp(), (-87.3f32).fast_exp());
    assert!((1000.0f32).fast_exp().is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-20.0..20.0)).collect();
        let s = t64(&[rows, cols], &x).softmax().unwrap();
        for row in s.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_centres_each_row(rows in 1usize..5, cols in 2usize..12, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y = layer_norm(&t64(&[rows, cols], &x), None, None, 1e-9).unwrap();
        for row in y.data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-5);
        }
    }

    #[test]
    fn composed_graph_matches_finite_differences(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_array(&[3, 4], &mut rng);
        let w = random_array(&[4, 4], &mut rng);
        let g = random_array(&[4], &mut rng);
        let r = gradcheck::check(&[x, w, g], 1e-4, |ts| {
            let h = ts[0].matmul(&ts[1])?.gelu();
            let h = layer_norm(&h, Some(&ts[2]), None, 1e-5)?;
            Ok(h.softmax()?.mul(&h)?.tanh().mean())
        }).unwrap();
        prop_assert!(r.max_rel_err < 1e-3, "{:?}", r);
    }
}
