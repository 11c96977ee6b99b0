//! Dense tensors, reverse-mode differentiation and the few kernels the encoder needs.
//!
//! All arithmetic is `f64`. Reductions run sequentially in a fixed order, so two
//! runs over the same inputs produce bit-identical values and gradients.

mod graph;
pub mod gradcheck;
pub mod kernels;
mod tensor;

pub use graph::{rfft_macs, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::gradcheck::check_gradients;
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::from_rows(&[vec![1., 0.], vec![0., 1.]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![5.], vec![6.]]).unwrap());
        let a = g.constant(Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap());
        let id = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(id).data(), &[5.0, 6.0]);
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[17.0, 39.0]);
        assert_eq!(g.value(p).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn grad_of_summed_product_is_broadcast_column_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let mut g = Graph::new();
        let av = g.leaf(a.clone(), true);
        let bv = g.constant(b.clone());
        let p = g.matmul(av, bv).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        let ga = g.grad(av).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                let expect: f64 = b.row(k).iter().sum();
                assert!((ga.data()[i * 4 + k] - expect).abs() < 1e-12);
            }
        }
        let r = check_gradients(&[a, b], &[None, None], |g, v| {
            let p = g.matmul(v[0], v[1])?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap());
        let y = g.softmax(x);
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = rand_tensor(&mut rng, &[4, 6]);
        let a = g.constant(t.clone());
        let b = g.constant(t.map(|v| v + 100.0));
        let ya = g.softmax(a);
        let yb = g.softmax(b);
        assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-6);
        for r in 0..4 {
            let s: f64 = g.value(ya).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(g.value(ya).row(r).iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[4], 1.0));
        let zeros = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(Tensor::full(&[2, 4], 3.5));
        let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let one2 = g.constant(Tensor::full(&[2], 1.0));
        let zero2 = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap());
        let y = g.layer_norm(x, one2, zero2, 1e-12).unwrap();
        assert!((g.value(y).data()[0] + 1.0).abs() < 1e-9);
        assert!((g.value(y).data()[1] - 1.0).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = rand_tensor(&mut rng, &[5, 8]);
        let x = g.constant(t);
        let o8 = g.constant(Tensor::full(&[8], 1.0));
        let z8 = g.constant(Tensor::zeros(&[8]));
        let y = g.layer_norm(x, o8, z8, 1e-5).unwrap();
        for r in 0..5 {
            let m: f64 = g.value(y).row(r).iter().sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 6]);
        let gam = rand_tensor(&mut rng, &[6]);
        let bet = rand_tensor(&mut rng, &[6]);
        let w = rand_tensor(&mut rng, &[3, 6]);
        let r = check_gradients(&[x, gam, bet], &[None, None, None], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn rfft_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[32], 1.0));
        let y = g.rfft_mag(x).unwrap();
        assert_eq!(g.value(y).shape(), &[17]);
        assert!((g.value(y).data()[0] - 32.0).abs() < 1e-12);
        assert!(g.value(y).data()[1..].iter().all(|v| v.abs() < 1e-12));

        let cos: Vec<f64> = (0..32).map(|n| (2.0 * std::f64::consts::PI * 4.0 * n as f64 / 32.0).cos()).collect();
        // naive DFT oracle
        let naive: Vec<f64> = (0..17)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &v) in cos.iter().enumerate() {
                    let th = -2.0 * std::f64::consts::PI * (k * n) as f64 / 32.0;
                    re += v * th.cos();
                    im += v * th.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect();
        let x = g.constant(Tensor::new(vec![32], cos).unwrap());
        let y = g.rfft_mag(x).unwrap();
        for (k, (a, b)) in g.value(y).data().iter().zip(&naive).enumerate() {
            assert!((a - b).abs() < 1e-9, "bin {k}");
            let expect = if k == 4 { 16.0 } else { 0.0 };
            assert!((a - expect).abs() < 1e-9, "bin {k}: {a}");
        }

        let x = g.constant(Tensor::zeros(&[3, 24]));
        assert!(matches!(g.rfft_mag(x), Err(Error::UnsupportedLength(24))));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let unused = g.leaf(Tensor::scalar(1.0), true);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
        assert_eq!(g.grad_or_zeros(unused).data(), &[0.0]);

        let c = g.constant(Tensor::scalar(2.0));
        assert_eq!(g.backward(c), Err(Error::NoGraph));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = rand_tensor(&mut rng, &[5]);
        let r = check_gradients(&[t], &[None], |g, v| {
            let s = g.softmax(v[0]);
            let sel = g.constant(Tensor::new(vec![5], vec![1., 0., 0., 0., 0.]).unwrap());
            let p = g.mul(s, sel)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[2, 4, 6]);
        let w = rand_tensor(&mut rng, &[2, 6, 4]);
        let row = rand_tensor(&mut rng, &[4]);
        let proj = rand_tensor(&mut rng, &[2, 4, 4]);
        let r = check_gradients(&[x.clone(), w.clone(), row.clone()], &[None, None, None], |g, v| {
            let a = g.gemm(v[0], v[1], false, false)?; // [2,4,4]
            let b = g.gemm(v[0], v[0], false, true)?; // [2,4,4]
            let c = g.add(a, b)?;
            let c = g.add_row(c, v[2])?;
            let c = g.gelu(c);
            let c = g.softmax(c);
            let c = g.permute(c, &[1, 0, 2])?;
            let c = g.reshape(c, &[8, 4])?;
            let d = g.rope(c, &[0., 1., 2., 3., 4., 5., 6., 7.], 10000.0)?;
            let t = g.tile(v[2], 8);
            let e = g.concat(&[d, t], 1)?;
            let e = g.scale(e, 0.7);
            let e = g.reshape(e, &[2, 4, 8])?;
            let e2 = g.gemm(e, e, true, false)?; // [2,8,8]
            let p = g.constant(Tensor::full(&[2, 8, 8], 0.3));
            let f = g.sub(e2, p)?;
            let f = g.mul(f, f)?;
            Ok(g.sum(f))
        })
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
        let _ = proj;

        // im2col + gather + where_rows + cross entropy + rfft
        let sig = rand_tensor(&mut rng, &[3, 8, 2]);
        let table = rand_tensor(&mut rng, &[3, 6]);
        let fill = rand_tensor(&mut rng, &[6]);
        let r = check_gradients(&[sig, table, fill], &[None, None, None], |g, v| {
            let u = g.im2col(v[0], 3, 2, 1)?; // [3*4, 6]
            let t = g.gather_rows(v[1], &[0, 2, 2, 1, 0, 1, 1, 2, 0, 0, 1, 2])?;
            let m = g.where_rows(t, v[2], &[true, false, false, true, false, false, true, false, false, false, false, true])?;
            let s = g.mul(u, m)?;
            let s = g.reshape(s, &[12, 6])?;
            g.softmax_cross_entropy(s, &[0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5])
        })
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");

        let patch = rand_tensor(&mut rng, &[2, 16]);
        let r = check_gradients(&[patch], &[None], |g, v| {
            let m = g.rfft_mag(v[0])?;
            let m = g.mul(m, m)?;
            let m2 = g.rfft_mag(v[0])?;
            let s = g.add(m, m2)?;
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");

        let logits = rand_tensor(&mut rng, &[3, 4]);
        let targets = Tensor::new(vec![3, 4], vec![1., 0., 0., 1., 0., 1., 1., 0., 0., 0., 1., 1.]).unwrap();
        let r = check_gradients(&[logits], &[None], |g, v| g.bce_with_logits(v[0], &targets)).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[4, 8]);
        let w = rand_tensor(&mut rng, &[8, 8]);
        let run = |g: &mut Graph| {
            let xv = g.leaf(x.clone(), true);
            let wv = g.leaf(w.clone(), true);
            let h = g.matmul(xv, wv).unwrap();
            let h = g.softmax(h);
            let s = g.sum(h);
            let l = g.mul(s, s).unwrap();
            (xv, wv, l)
        };
        let mut g = Graph::new();
        let (xv, wv, l) = run(&mut g);
        g.backward(l).unwrap();
        let first = (g.grad(xv).unwrap().clone(), g.grad(wv).unwrap().clone());
        g.backward(l).unwrap();
        assert_eq!(first.0.data(), g.grad(xv).unwrap().data());
        assert_eq!(first.1.data(), g.grad(wv).unwrap().data());
    }

    #[test]
    fn parseval_holds_on_random_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let x: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = kernels::rfft_mag(&x).unwrap();
            let energy: f64 = x.iter().map(|v| v * v).sum();
            let spec = (m[0] * m[0] + 2.0 * m[1..16].iter().map(|v| v * v).sum::<f64>() + m[16] * m[16]) / 32.0;
            assert!((energy - spec).abs() / energy < 1e-6);
        }
    }
}
