//! Gradient checks: every differentiable primitive against the central
//! finite-difference oracle, plus the tape's determinism and error
//! contracts.

use hybridlm_core::fd::{finite_difference_gradient, max_rel_err};
use hybridlm_core::rng::derive;
use hybridlm_core::tape::Tape;
use hybridlm_core::tensor::Tensor;
use hybridlm_core::Result;

type T64 = Tensor<f64>;

#[test]
fn square_sum_gradient() {
    // loss = sum(x*x), x = [3]: grad = [6].
    let mut tape = Tape::new();
    let x = tape.param("x", T64::new(vec![1], vec![3.0]).unwrap()).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    let grads = tape.backward(loss).unwrap();
    assert!((grads["x"].data()[0] - 6.0).abs() < 1e-14);
}

#[test]
fn softplus_gradient_at_zero() {
    // loss = sum(softplus(x)), x = [0]: grad = [σ(0)] = [0.5].
    let mut tape = Tape::new();
    let x = tape.param("x", T64::zeros(&[1])).unwrap();
    let sp = tape.softplus(x);
    let loss = tape.sum(sp);
    let grads = tape.backward(loss).unwrap();
    assert!((grads["x"].data()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    // Random 2-layer MLP, step 1e-6, max rel err < 1e-6.
    let mut rng = derive(17, 0);
    let w1 = T64::randn(&[8, 5], 0.6, &mut rng);
    let w2 = T64::randn(&[3, 8], 0.6, &mut rng);
    let x = T64::randn(&[4, 5], 1.0, &mut rng);

    let run = |w1v: &T64, w2v: &T64| -> Result<(f64, Option<(T64, T64)>)> {
        let mut tape = Tape::new();
        let w1p = tape.param("w1", w1v.clone())?;
        let w2p = tape.param("w2", w2v.clone())?;
        let xc = tape.constant(x.clone());
        let h = tape.linear(xc, w1p)?;
        let h = tape.silu(h);
        let y = tape.linear(h, w2p)?;
        let sq = tape.mul(y, y)?;
        let loss = tape.sum(sq);
        let v = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        Ok((v, Some((grads["w1"].clone(), grads["w2"].clone()))))
    };

    let (_, grads) = run(&w1, &w2).unwrap();
    let (g1, g2) = grads.unwrap();
    let fd1 = finite_difference_gradient(&mut |p| Ok(run(p, &w2)?.0), &w1, 1e-6).unwrap();
    let fd2 = finite_difference_gradient(&mut |p| Ok(run(&w1, p)?.0), &w2, 1e-6).unwrap();
    assert!(max_rel_err(&g1.to_f64_vec(), &fd1.to_f64_vec(), 1e-4) < 1e-6);
    assert!(max_rel_err(&g2.to_f64_vec(), &fd2.to_f64_vec(), 1e-4) < 1e-6);
}

/// Build a scalar loss exercising one primitive and check its input
/// gradient against finite differences.
fn check_unary(
    name: &str,
    seed: u64,
    shape: &[usize],
    apply: impl Fn(&mut Tape<f64>, hybridlm_core::tape::Var) -> hybridlm_core::tape::Var,
) {
    let mut rng = derive(seed, 3);
    let x0 = T64::randn(shape, 0.8, &mut rng);
    let run = |xv: &T64| -> Result<(f64, Option<T64>)> {
        let mut tape = Tape::new();
        let x = tape.param("x", xv.clone())?;
        let y = apply(&mut tape, x);
        // Mixing weights shaped like the output, fixed by the seed.
        let mut mix_rng = derive(seed, 4);
        let mix = T64::randn(tape.value(y).shape(), 1.0, &mut mix_rng);
        let m = tape.constant(mix);
        let my = tape.mul(y, m)?;
        let loss = tape.sum(my);
        let v = tape.value(loss).item();
        let g = tape.backward(loss)?;
        Ok((v, Some(g["x"].clone())))
    };
    let (_, g) = run(&x0).unwrap();
    let fd = finite_difference_gradient(&mut |p| Ok(run(p)?.0), &x0, 1e-6).unwrap();
    let err = max_rel_err(&g.unwrap().to_f64_vec(), &fd.to_f64_vec(), 1e-5);
    assert!(err < 1e-5, "{name}: rel err {err}");
}

#[test]
fn elementwise_primitives_match_fd() {
    for seed in 0..50u64 {
        check_unary("silu", seed, &[3, 4], |t, x| t.silu(x));
        check_unary("softplus", seed, &[3, 4], |t, x| t.softplus(x));
        check_unary("exp", seed, &[3, 4], |t, x| t.exp(x));
        check_unary("clamp", seed, &[3, 4], |t, x| t.clamp_max(x, 0.3));
        check_unary("scale", seed, &[3, 4], |t, x| t.scale(x, -1.7));
    }
}

#[test]
fn structural_primitives_match_fd() {
    for seed in 20..70u64 {
        check_unary("reshape", seed, &[4, 6], |t, x| t.reshape(x, &[2, 12]).unwrap());
        check_unary("narrow+concat", seed, &[6, 3], |t, x| {
            let a = t.narrow(x, 0, 2).unwrap();
            let b = t.narrow(x, 2, 4).unwrap();
            t.concat_rows(b, a).unwrap()
        });
    }
}

#[test]
fn rms_norm_matches_fd() {
    for seed in 0..50u64 {
        let mut rng = derive(seed, 5);
        let x0 = T64::randn(&[3, 8], 1.0, &mut rng);
        let gain0 = T64::randn(&[8], 0.5, &mut rng).map(|v| v + 1.0);
        let mix = T64::randn(&[3, 8], 1.0, &mut rng);
        let run = |xv: &T64, gv: &T64| -> Result<(f64, Option<(T64, T64)>)> {
            let mut tape = Tape::new();
            let x = tape.param("x", xv.clone())?;
            let g = tape.param("g", gv.clone())?;
            let y = tape.rms_norm(x, g, 2, 1e-6)?;
            let m = tape.constant(mix.clone());
            let my = tape.mul(y, m)?;
            let loss = tape.sum(my);
            let v = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            Ok((v, Some((grads["x"].clone(), grads["g"].clone()))))
        };
        let (_, grads) = run(&x0, &gain0).unwrap();
        let (gx, gg) = grads.unwrap();
        let fdx = finite_difference_gradient(&mut |p| Ok(run(p, &gain0)?.0), &x0, 1e-6).unwrap();
        let fdg = finite_difference_gradient(&mut |p| Ok(run(&x0, p)?.0), &gain0, 1e-6).unwrap();
        assert!(max_rel_err(&gx.to_f64_vec(), &fdx.to_f64_vec(), 1e-5) < 1e-5);
        assert!(max_rel_err(&gg.to_f64_vec(), &fdg.to_f64_vec(), 1e-5) < 1e-5);
    }
}

#[test]
fn conv1d_with_resets_matches_fd() {
    for seed in 0..50u64 {
        let mut rng = derive(seed, 6);
        let t_len = 7;
        let c = 3;
        let k = 4;
        let x0 = T64::randn(&[t_len, c], 1.0, &mut rng);
        let w0 = T64::randn(&[c, k], 0.5, &mut rng);
        let b0 = T64::randn(&[c], 0.2, &mut rng);
        let mix = T64::randn(&[t_len, c], 1.0, &mut rng);
        let resets = vec![true, false, false, true, false, false, false];
        let run = |xv: &T64, wv: &T64, bv: &T64| -> Result<(f64, Option<Vec<T64>>)> {
            let mut tape = Tape::new();
            let x = tape.param("x", xv.clone())?;
            let w = tape.param("w", wv.clone())?;
            let b = tape.param("b", bv.clone())?;
            let y = tape.conv1d_causal(x, w, b, &resets)?;
            let m = tape.constant(mix.clone());
            let my = tape.mul(y, m)?;
            let loss = tape.sum(my);
            let v = tape.value(loss).item();
            let g = tape.backward(loss)?;
            Ok((v, Some(vec![g["x"].clone(), g["w"].clone(), g["b"].clone()])))
        };
        let (_, grads) = run(&x0, &w0, &b0).unwrap();
        let grads = grads.unwrap();
        let fdx = finite_difference_gradient(&mut |p| Ok(run(p, &w0, &b0)?.0), &x0, 1e-6).unwrap();
        let fdw = finite_difference_gradient(&mut |p| Ok(run(&x0, p, &b0)?.0), &w0, 1e-6).unwrap();
        let fdb = finite_difference_gradient(&mut |p| Ok(run(&x0, &w0, p)?.0), &b0, 1e-6).unwrap();
        for (g, fd) in grads.iter().zip([fdx, fdw, fdb]) {
            assert!(max_rel_err(&g.to_f64_vec(), &fd.to_f64_vec(), 1e-5) < 1e-5);
        }
    }
}

#[test]
fn cross_entropy_matches_fd() {
    for seed in 0..50u64 {
        let mut rng = derive(seed, 7);
        let logits0 = T64::randn(&[4, 6], 1.5, &mut rng);
        let targets = vec![Some(2), None, Some(0), Some(5)];
        let run = |lv: &T64| -> Result<(f64, Option<T64>)> {
            let mut tape = Tape::new();
            let l = tape.param("logits", lv.clone())?;
            let loss = tape.cross_entropy(l, &targets)?;
            let v = tape.value(loss).item();
            let g = tape.backward(loss)?;
            Ok((v, Some(g["logits"].clone())))
        };
        let (_, g) = run(&logits0).unwrap();
        let fd = finite_difference_gradient(&mut |p| Ok(run(p)?.0), &logits0, 1e-6).unwrap();
        assert!(max_rel_err(&g.unwrap().to_f64_vec(), &fd.to_f64_vec(), 1e-5) < 1e-5);
    }
}

#[test]
fn embedding_scatter_matches_fd() {
    let mut rng = derive(31, 8);
    let table0 = T64::randn(&[5, 3], 1.0, &mut rng);
    let ids = vec![4, 0, 4, 2];
    let mix = T64::randn(&[4, 3], 1.0, &mut rng);
    let run = |tv: &T64| -> Result<(f64, Option<T64>)> {
        let mut tape = Tape::new();
        let t = tape.param("table", tv.clone())?;
        let e = tape.embedding(t, &ids)?;
        let m = tape.constant(mix.clone());
        let me = tape.mul(e, m)?;
        let loss = tape.sum(me);
        let v = tape.value(loss).item();
        let g = tape.backward(loss)?;
        Ok((v, Some(g["table"].clone())))
    };
    let (_, g) = run(&table0).unwrap();
    let fd = finite_difference_gradient(&mut |p| Ok(run(p)?.0), &table0, 1e-6).unwrap();
    assert!(max_rel_err(&g.unwrap().to_f64_vec(), &fd.to_f64_vec(), 1e-5) < 1e-5);
}

#[test]
fn replay_is_bit_identical() {
    let run = || -> Vec<f64> {
        let mut rng = derive(99, 9);
        let mut tape = Tape::new();
        let x = tape.param("x", T64::randn(&[4, 4], 1.0, &mut rng)).unwrap();
        let w = tape.param("w", T64::randn(&[4, 4], 1.0, &mut rng)).unwrap();
        let y = tape.linear(x, w).unwrap();
        let s = tape.silu(y);
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        let mut out = grads["x"].to_f64_vec();
        out.extend(grads["w"].to_f64_vec());
        out
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param("x", T64::zeros(&[2, 2])).unwrap();
    let y = tape.silu(x);
    let err = tape.backward(y).unwrap_err();
    assert!(err.to_string().contains("scalar"), "{err}");
}

#[test]
fn nan_gradient_names_the_op() {
    // exp overflows to inf; the backward pass flags the op it flows into.
    let mut tape = Tape::<f64>::new();
    let x = tape.param("x", T64::full(&[2], 800.0)).unwrap();
    let e = tape.exp(x);
    let loss = tape.sum(e);
    let err = tape.backward(loss).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("non-finite"), "{msg}");
}

#[test]
fn shape_mismatch_errors() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(T64::zeros(&[2, 3]));
    let b = tape.constant(T64::zeros(&[3, 2]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.linear(a, b).is_err());
}
