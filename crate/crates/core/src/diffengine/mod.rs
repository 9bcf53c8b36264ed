//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar sweeps the record once in reverse and
//! returns gradients for every leaf registered with [`Tape::param`].
//!
//! Binary ops broadcast only by leading-batch expansion: a shape that is a
//! suffix of the other is repeated over the missing leading axes.

mod tape;
mod tensor;

pub use tape::{CustomOp, Gradients, NodeId, Tape, Var};
pub use tensor::{Index, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for axis of length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: argument outside the domain")]
    Domain { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: unsupported rank {rank}")]
    Rank { op: &'static str, rank: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("variable belongs to a different tape")]
    ForeignVar,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    type Build = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>;

    /// Reduces `build`'s output to a scalar with fixed random weights so
    /// every output element contributes, then compares reverse-mode
    /// gradients with central differences.
    fn check_grad(inputs: &[Tensor], build: &Build) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let tape = Tape::new();
            let vars: Vec<_> = inputs.iter().map(|t| tape.param(t)).collect();
            build(&tape, &vars).to_tensor()
        };
        let weights = rand_tensor(&mut rng, probe.shape(), 0.5, 1.5);
        let loss_of = |ins: &[Tensor]| -> f64 {
            let tape = Tape::new();
            let vars: Vec<_> = ins.iter().map(|t| tape.param(t)).collect();
            let out = build(&tape, &vars);
            let w = tape.constant(weights.clone());
            out.mul(&w).unwrap().sum().unwrap().item().unwrap()
        };
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = build(&tape, &vars);
        let w = tape.constant(weights.clone());
        let loss = out.mul(&w).unwrap().sum().unwrap();
        let grads = tape.backward(&loss).unwrap();

        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let g = grads.get(&vars[k]).unwrap();
            for i in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let ad = g.data()[i];
                let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
                assert!(rel < 1e-4, "input {k} elem {i}: fd {fd} ad {ad}");
            }
        }
    }

    #[test]
    fn silu_and_tanh_at_zero() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::scalar(0.0));
        assert_eq!(x.silu().unwrap().item(), Some(0.0));
        let y = x.tanh().unwrap();
        assert_eq!(y.item(), Some(0.0));
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x0 = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let tape = Tape::new();
        let x = tape.param(&x0);
        let loss = x.mul(&x).unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        // central differences, h = 1e-6
        let f = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        let h = 1e-6;
        for i in 0..3 {
            let mut p = x0.data().to_vec();
            let mut m = x0.data().to_vec();
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((g.get(&x).unwrap().data()[i] - fd).abs() < 1e-6);
        }
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let tape = Tape::new();
        let w = tape.param(&Tensor::vector(vec![1.0, -2.0]));
        let loss = tape.scalar(3.0);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&w).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn detached_input_gradient_is_input() {
        let tape = Tape::new();
        let w = tape.param(&Tensor::vector(vec![0.3, 0.7]));
        let x = tape.constant(Tensor::vector(vec![2.0, -5.0]));
        let loss = w.mul(&x).unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&w).unwrap().data(), &[2.0, -5.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let w = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(&w),
            Err(EngineError::NotScalar { .. })
        ));
        let tape = Tape::new();
        let w = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        let s = w.sum().unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(tape.backward(&s).unwrap_err(), EngineError::TapeConsumed);
    }

    #[test]
    fn forward_errors() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(a.add(&b), Err(EngineError::ShapeMismatch { .. })));
        assert!(matches!(a.log(), Err(EngineError::Domain { .. })));
        assert!(matches!(a.div(&a), Err(EngineError::Domain { .. })));
        let idx = Rc::new(Index::vector(vec![0, 3]));
        assert!(matches!(
            a.gather_lastdim(&idx),
            Err(EngineError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            b.scatter_add_lastdim(&idx, 3),
            Err(EngineError::IndexOutOfRange { .. })
        ));
        let big = tape.constant(Tensor::full(&[1], 800.0));
        assert!(matches!(big.exp(), Err(EngineError::NonFinite { .. })));
    }

    #[test]
    fn floor_has_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![0.3, 1.7, -2.2]));
        let f = x.floor_detached();
        assert_eq!(f.data(), &[0.0, 1.0, -3.0]);
        let loss = f.mul(&f).unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_routes_only_to_gathered_positions() {
        let tape = Tape::new();
        let src = tape.param(&Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let idx = Rc::new(Index::vector(vec![2, 2, 0]));
        let loss = src.gather_lastdim(&idx).unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&src).unwrap().data(), &[1.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn clamp_gradient_passes_inside_only() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![-2.0, -1.0, 0.5, 1.0, 3.0]));
        let loss = x.clamp_detached(-1.0, 1.0).unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn fd_elementwise_unary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let pos = rand_tensor(&mut rng, &[3, 4], 0.2, 1.0);
        check_grad(&[x.clone()], &|_, v| v[0].neg().unwrap());
        check_grad(&[x.clone()], &|_, v| v[0].exp().unwrap());
        check_grad(&[x.clone()], &|_, v| v[0].tanh().unwrap());
        check_grad(&[x.clone()], &|_, v| v[0].silu().unwrap());
        check_grad(&[x.clone()], &|_, v| v[0].square().unwrap());
        check_grad(&[x.clone()], &|_, v| v[0].pow_int(3).unwrap());
        check_grad(&[pos.clone()], &|_, v| v[0].pow_int(-2).unwrap());
        check_grad(&[pos.clone()], &|_, v| v[0].log().unwrap());
        check_grad(&[x.clone()], &|_, v| v[0].clamp_detached(-0.5, 0.5).unwrap());
        check_grad(&[x.clone()], &|_, v| v[0].abs().unwrap());
        check_grad(&[x.clone()], &|_, v| {
            v[0].mul(&v[0].floor_detached()).unwrap()
        });
    }

    #[test]
    fn fd_binary_with_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        let bpos = rand_tensor(&mut rng, &[4], 0.3, 1.0);
        let s = rand_tensor(&mut rng, &[], -1.0, 1.0);
        check_grad(&[a.clone(), b.clone()], &|_, v| v[0].add(&v[1]).unwrap());
        check_grad(&[b.clone(), a.clone()], &|_, v| v[0].sub(&v[1]).unwrap());
        check_grad(&[a.clone(), b.clone()], &|_, v| v[0].mul(&v[1]).unwrap());
        check_grad(&[a.clone(), bpos.clone()], &|_, v| v[0].div(&v[1]).unwrap());
        check_grad(&[bpos.clone(), a.clone()], &|_, v| v[1].div(&v[0]).unwrap());
        check_grad(&[a.clone(), s.clone()], &|_, v| v[0].mul(&v[1]).unwrap());
        check_grad(&[a.clone(), a.map(|x| x + 2.0)], &|_, v| v[0].div(&v[1]).unwrap());
    }

    #[test]
    fn fd_reductions_and_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let c = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
        check_grad(&[a.clone()], &|_, v| v[0].sum().unwrap());
        check_grad(&[a.clone()], &|_, v| v[0].mean().unwrap());
        check_grad(&[a.clone()], &|_, v| v[0].sum_lastdim().unwrap());
        check_grad(&[a.clone(), b.clone()], &|_, v| v[0].matmul(&v[1]).unwrap());
        check_grad(&[a.clone()], &|_, v| v[0].transpose().unwrap());
        check_grad(&[a.clone()], &|_, v| v[0].reshape(&[2, 6]).unwrap());
        check_grad(&[a.clone(), c.clone()], &|t, v| {
            t.concat_lastdim(&[v[0].clone(), v[1].clone()]).unwrap()
        });
    }

    #[test]
    fn fd_gather_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
        let shared = Rc::new(Index::vector(vec![4, 0, 0, 2]));
        let per_row = Rc::new(Index::new(vec![3, 2], vec![1, 1, 0, 4, 3, 2]).unwrap());
        let batched = Rc::new(Index::new(vec![2, 3, 2], vec![0, 4, 1, 1, 2, 3, 4, 4, 0, 0, 3, 1]).unwrap());
        let s1 = shared.clone();
        check_grad(&[src.clone()], &move |_, v| v[0].gather_lastdim(&s1).unwrap());
        let s2 = per_row.clone();
        check_grad(&[src.clone()], &move |_, v| v[0].gather_lastdim(&s2).unwrap());
        let s3 = batched.clone();
        check_grad(&[src.clone()], &move |_, v| v[0].gather_lastdim(&s3).unwrap());

        let vals = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let s4 = shared.clone();
        check_grad(&[vals.clone()], &move |_, v| v[0].scatter_add_lastdim(&s4, 5).unwrap());
        let vals2 = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
        let s5 = per_row.clone();
        check_grad(&[vals2], &move |_, v| v[0].scatter_add_lastdim(&s5, 6).unwrap());
    }

    #[test]
    fn scatter_accumulates_duplicates() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![1.0, 2.0, 4.0]));
        let idx = Rc::new(Index::vector(vec![1, 1, 0]));
        let out = v.scatter_add_lastdim(&idx, 3).unwrap();
        assert_eq!(out.data(), &[4.0, 3.0, 0.0]);
    }

    #[test]
    fn independent_tapes_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, &[6, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let idx = Rc::new(Index::vector(vec![0, 2, 2, 1, 0]));
        let run = || {
            let tape = Tape::new();
            let va = tape.param(&a);
            let vb = tape.param(&b);
            let h = va.matmul(&vb).unwrap().silu().unwrap();
            let s = h.scatter_add_lastdim(&Rc::new(Index::vector(vec![2, 0, 2])), 4).unwrap();
            let g = s.gather_lastdim(&idx).unwrap();
            let loss = g.square().unwrap().mean().unwrap();
            let grads = tape.backward(&loss).unwrap();
            (
                grads.get(&va).unwrap().clone(),
                grads.get(&vb).unwrap().clone(),
            )
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(
            a1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            a2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(b1, b2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn prop_tanh_silu_chain_matches_fd(
            xs in proptest::collection::vec(-1.0f64..1.0, 1..6),
            ws in proptest::collection::vec(-1.0f64..1.0, 6),
        ) {
            let x = Tensor::vector(xs.clone());
            let w = Tensor::vector(ws[..xs.len()].to_vec());
            check_grad(&[x, w], &|_, v| {
                v[0].mul(&v[1]).unwrap().tanh().unwrap().silu().unwrap()
            });
        }

        #[test]
        fn prop_gather_index_gradient_is_zero(
            idx in proptest::collection::vec(0usize..4, 1..8),
        ) {
            let tape = Tape::new();
            let src = tape.constant(Tensor::vector(vec![0.5, -1.0, 2.0, 3.0]));
            let pos = tape.param(&Tensor::vector(idx.iter().map(|&i| i as f64).collect()));
            let index = Rc::new(Index::vector(pos.floor_detached().data().iter().map(|&v| v as usize).collect()));
            let loss = src.gather_lastdim(&index).unwrap().sum().unwrap();
            let g = tape.backward(&loss).unwrap();
            prop_assert!(g.get(&pos).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }
}
