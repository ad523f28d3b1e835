//! SSM scan oracle equivalences, reset behaviour, the state-passing
//! simulation, and block-level examples.

use hybridlm_core::block::SeqMeta;
use hybridlm_core::config::HybridConfig;
use hybridlm_core::fd::{finite_difference_gradient, max_rel_err};
use hybridlm_core::model::HybridModel;
use hybridlm_core::mup::MuPMultiplierSet;
use hybridlm_core::rng::derive;
use hybridlm_core::ssm::{
    apply_mixing, mamba2_block_forward, materialize_mixing_matrix, multihead_scan,
    ssm_block_state_passing, ssm_scan_chunked, ssm_scan_sequential, DtPolicy, HeadScanInput,
    SsmDims, SsmLayerVars, SsmMults,
};
use hybridlm_core::tape::Tape;
use hybridlm_core::tensor::Tensor;
use hybridlm_core::verify::HeadInstance;
use proptest::prelude::*;

type T64 = Tensor<f64>;

#[test]
fn single_step_matches_materialized_matrix() {
    // T = 1: the scan reads its own write, M_00 = C·B·dt + D.
    let x = T64::new(vec![1, 1], vec![1.0]).unwrap();
    let b = T64::new(vec![1, 1], vec![1.0]).unwrap();
    let c = T64::new(vec![1, 1], vec![1.0]).unwrap();
    let dt = T64::new(vec![1], vec![1.0]).unwrap();
    let input = HeadScanInput {
        x: &x,
        b: &b,
        c: &c,
        dt: &dt,
        a_log: -0.3,
        d_skip: 0.0,
        resets: &[false],
    };
    let init = T64::zeros(&[1, 1]);
    let (y, _) = ssm_scan_sequential(&input, &init).unwrap();
    let m = materialize_mixing_matrix(&b, &c, &dt, -0.3, 0.0, &[false]).unwrap();
    // Empty decay product: M_00 = 1·1·1 + 0 = 1, and the scan agrees.
    assert!((m.at2(0, 0) - 1.0).abs() < 1e-15);
    assert!((y.at2(0, 0) - m.at2(0, 0)).abs() < 1e-15);
}

#[test]
fn no_forgetting_limit_is_a_running_sum() {
    // A_log -> -inf (abar -> 1), constant write c: y_t = (t+1)·c.
    let t_len = 9;
    let x = T64::full(&[t_len, 1], 1.0);
    let b = T64::full(&[t_len, 1], 0.5);
    let c = T64::full(&[t_len, 1], 1.0);
    let dt = T64::full(&[t_len], 2.0);
    let input = HeadScanInput {
        x: &x,
        b: &b,
        c: &c,
        dt: &dt,
        a_log: -700.0,
        d_skip: 0.0,
        resets: &vec![false; t_len],
    };
    let (y, _) = ssm_scan_sequential(&input, &T64::zeros(&[1, 1])).unwrap();
    for t in 0..t_len {
        let expect = (t + 1) as f64 * 1.0; // C·B·dt·x = 1·0.5·2·1 per step
        assert!((y.at2(t, 0) - expect).abs() < 1e-12, "t={t}");
    }
}

#[test]
fn instant_forgetting_leaves_only_the_diagonal() {
    // Huge decay: abar ~ 0, so M_ts vanishes for s < t and the scan reduces
    // to the write-then-read diagonal.
    let mut rng = derive(3, 0);
    let inst = HeadInstance::random(&mut rng, 12, 2, 3, false);
    let m = materialize_mixing_matrix(&inst.b, &inst.c, &inst.dt, 8.0, 0.0, &inst.resets).unwrap();
    for t in 0..12 {
        for s in 0..t {
            assert!(m.at2(t, s).abs() < 1e-12, "({t},{s}) = {}", m.at2(t, s));
        }
        assert!(m.at2(t, t).abs() > 0.0 || inst.dt.data()[t] == 0.0);
    }
    let input = HeadScanInput {
        x: &inst.x,
        b: &inst.b,
        c: &inst.c,
        dt: &inst.dt,
        a_log: 8.0,
        d_skip: 0.0,
        resets: &inst.resets,
    };
    let (y, _) = ssm_scan_sequential(&input, &T64::zeros(&[2, 3])).unwrap();
    let ym = apply_mixing(&m, &inst.x).unwrap();
    assert!(y.max_abs_diff(&ym) < 1e-12);
}

#[test]
fn chunked_equals_sequential_at_unit_and_full_chunks() {
    let mut rng = derive(5, 0);
    for _ in 0..5 {
        let inst = HeadInstance::random(&mut rng, 33, 2, 4, true);
        let init = T64::randn(&[2, 4], 0.5, &mut rng);
        let (y_seq, h_seq) = ssm_scan_sequential(&inst.input(), &init).unwrap();
        for chunk in [1, 33] {
            let (y, h) = ssm_scan_chunked(&inst.input(), &init, chunk).unwrap();
            assert!(y_seq.max_abs_diff(&y) < 1e-10);
            assert!(h_seq.max_abs_diff(&h) < 1e-10);
        }
    }
}

#[test]
fn chunked_with_interior_resets_matches_sequential() {
    let mut rng = derive(7, 0);
    let inst = HeadInstance::random(&mut rng, 97, 3, 5, true);
    let init = T64::zeros(&[3, 5]);
    let (y_seq, h_seq) = ssm_scan_sequential(&inst.input(), &init).unwrap();
    let (y, h) = ssm_scan_chunked(&inst.input(), &init, 16).unwrap();
    assert!(y_seq.max_abs_diff(&y) < 1e-10);
    assert!(h_seq.max_abs_diff(&h) < 1e-10);
}

#[test]
fn reset_gates_cross_boundary_coefficients() {
    let mut rng = derive(11, 0);
    let t_len = 20;
    let inst = HeadInstance::random(&mut rng, t_len, 1, 4, false);
    let mut resets = vec![false; t_len];
    resets[0] = true;
    resets[9] = true;
    let with =
        materialize_mixing_matrix(&inst.b, &inst.c, &inst.dt, inst.a_log, inst.d_skip, &resets)
            .unwrap();
    let mut clear = vec![false; t_len];
    clear[0] = true;
    let without =
        materialize_mixing_matrix(&inst.b, &inst.c, &inst.dt, inst.a_log, inst.d_skip, &clear)
            .unwrap();
    let gate = (-80.0f64).exp();
    for t in 9..t_len {
        for s in 0..9 {
            let bound = gate * without.at2(t, s).abs() * (1.0 + 1e-9);
            assert!(with.at2(t, s).abs() <= bound + 1e-300, "({t},{s})");
        }
    }
}

#[test]
fn materialize_refuses_oversized_instances() {
    let t = 513;
    let b = T64::zeros(&[t, 1]);
    let c = T64::zeros(&[t, 1]);
    let dt = T64::full(&[t], 0.1);
    assert!(materialize_mixing_matrix(&b, &c, &dt, 0.0, 0.0, &vec![false; t]).is_err());
}

#[test]
fn non_positive_dt_rejected() {
    let x = T64::zeros(&[2, 1]);
    let b = T64::zeros(&[2, 1]);
    let c = T64::zeros(&[2, 1]);
    let dt = T64::new(vec![2], vec![0.5, 0.0]).unwrap();
    let input = HeadScanInput {
        x: &x,
        b: &b,
        c: &c,
        dt: &dt,
        a_log: 0.0,
        d_skip: 0.0,
        resets: &[true, false],
    };
    assert!(ssm_scan_sequential(&input, &T64::zeros(&[1, 1])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// abar ∈ (0, 1) for finite A_log and dt > 0; with a reset it drops to
    /// (0, exp(-80)].
    #[test]
    fn abar_stays_in_range(a_log in -6.0..3.0f64, dt in 1e-4..5.0f64, reset in any::<bool>()) {
        let mut l = -a_log.exp() * dt;
        if reset {
            l += -80.0;
        }
        let abar = l.exp();
        prop_assert!(abar > 0.0);
        if reset {
            prop_assert!(abar <= (-80.0f64).exp());
        } else {
            prop_assert!(abar < 1.0);
        }
    }

    /// Chunk size never changes the scan output.
    #[test]
    fn any_chunk_size_is_equivalent(seed in 0u64..500, chunk in 1usize..40) {
        let mut rng = derive(seed, 21);
        let inst = HeadInstance::random(&mut rng, 29, 2, 3, true);
        let init = T64::zeros(&[2, 3]);
        let (y_seq, _) = ssm_scan_sequential(&inst.input(), &init).unwrap();
        let (y, _) = ssm_scan_chunked(&inst.input(), &init, chunk).unwrap();
        prop_assert!(y_seq.max_abs_diff(&y) < 1e-10);
    }
}

fn tiny_dims() -> SsmDims {
    SsmDims {
        d_model: 12,
        n_heads: 2,
        d_head: 4,
        d_state: 3,
        n_groups: 1,
        conv_k: 3,
        chunk_size: 4,
    }
}

fn register_ssm_layer(tape: &mut Tape<f64>, dims: &SsmDims, seed: u64) -> SsmLayerVars {
    let mut rng = derive(seed, 22);
    let d = dims.d_model;
    let bc = dims.bc_width();
    let mut param = |name: &str, t: T64| tape.param(name, t).unwrap();
    SsmLayerVars {
        w_x: param("w_x", T64::randn(&[dims.d_ssm(), d], 0.3, &mut rng)),
        w_z: param("w_z", T64::randn(&[dims.d_ssm(), d], 0.3, &mut rng)),
        w_b: param("w_b", T64::randn(&[bc, d], 0.3, &mut rng)),
        w_c: param("w_c", T64::randn(&[bc, d], 0.3, &mut rng)),
        w_dt: param("w_dt", T64::randn(&[dims.n_heads, d], 0.3, &mut rng)),
        conv_w: param("conv_w", T64::randn(&[dims.conv_channels(), dims.conv_k], 0.3, &mut rng)),
        conv_b: param("conv_b", T64::randn(&[dims.conv_channels()], 0.1, &mut rng)),
        b_dt: param("b_dt", T64::randn(&[dims.n_heads], 0.3, &mut rng)),
        a_log: param("a_log", T64::randn(&[dims.n_heads], 0.5, &mut rng)),
        d_skip: param("d_skip", T64::full(&[dims.n_heads], 1.0)),
        w_out: param("w_out", T64::randn(&[d, dims.d_ssm()], 0.3, &mut rng)),
        rms_gain: param("rms_gain", T64::full(&[dims.d_ssm()], 1.0)),
    }
}

fn unit_mults() -> SsmMults {
    SsmMults { m_x: 1.0, m_z: 1.0, m_b: 1.0, m_c: 1.0, m_dt: 1.0, m_ssm: 1.0 }
}

#[test]
fn state_passing_matches_full_forward() {
    // Chunk-wise state passing (hidden + conv tail hand-off) reproduces the
    // unchunked block output for several chunk lengths, resets included.
    let dims = tiny_dims();
    let t_len = 23;
    let mut resets = vec![false; t_len];
    resets[0] = true;
    resets[7] = true;
    resets[15] = true;
    for chunk_len in [1usize, 3, 5, 8, 23] {
        let mut tape = Tape::new();
        let vars = register_ssm_layer(&mut tape, &dims, 42);
        let mut rng = derive(43, 23);
        let u = tape.constant(T64::randn(&[t_len, dims.d_model], 1.0, &mut rng));
        let full = mamba2_block_forward(
            &mut tape,
            u,
            &vars,
            &dims,
            &unit_mults(),
            &DtPolicy::None,
            0,
            &resets,
        )
        .unwrap();
        let full_value = tape.value(full).clone();
        let chunked = ssm_block_state_passing(
            &mut tape,
            u,
            &vars,
            &dims,
            &unit_mults(),
            &DtPolicy::None,
            0,
            &resets,
            chunk_len,
        )
        .unwrap();
        let diff = full_value.max_abs_diff(&chunked);
        assert!(diff < 1e-10, "chunk_len {chunk_len}: diff {diff:.2e}");
    }
}

#[test]
fn multihead_scan_agrees_with_tape_op() {
    let mut rng = derive(51, 24);
    let (t_len, h, p, g, n) = (11, 4, 3, 2, 5);
    let x = T64::randn(&[t_len, h, p], 1.0, &mut rng);
    let b = T64::randn(&[t_len, g, n], 1.0, &mut rng);
    let c = T64::randn(&[t_len, g, n], 1.0, &mut rng);
    let dt = T64::rand_uniform(&[t_len, h], 0.05, 1.0, &mut rng);
    let a_log = T64::randn(&[h], 0.5, &mut rng);
    let d_skip = T64::randn(&[h], 0.5, &mut rng);
    let mut resets = vec![false; t_len];
    resets[0] = true;
    resets[6] = true;

    let mut hidden = T64::zeros(&[h, p, n]);
    let y_ref = multihead_scan(&x, &b, &c, &dt, &a_log, &d_skip, &resets, &mut hidden).unwrap();

    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let bv = tape.constant(b);
    let cv = tape.constant(c);
    let dtv = tape.constant(dt);
    let av = tape.constant(a_log);
    let dv = tape.constant(d_skip);
    let y = tape.ssm_scan(xv, bv, cv, dtv, av, dv, &resets).unwrap();
    assert!(tape.value(y).max_abs_diff(&y_ref) < 1e-12);
}

#[test]
fn block_shapes_and_dt_examples() {
    // u [T=8, d=32], d_ssm = 16 (2 heads × 8), d_state = 8: y [8, 32].
    let dims = SsmDims {
        d_model: 32,
        n_heads: 2,
        d_head: 8,
        d_state: 8,
        n_groups: 1,
        conv_k: 4,
        chunk_size: 8,
    };
    let mut tape = Tape::new();
    let mut rng = derive(60, 25);
    let d = dims.d_model;
    let bc = dims.bc_width();
    let vars = SsmLayerVars {
        w_x: tape.constant(T64::randn(&[dims.d_ssm(), d], 0.2, &mut rng)),
        w_z: tape.constant(T64::randn(&[dims.d_ssm(), d], 0.2, &mut rng)),
        w_b: tape.constant(T64::randn(&[bc, d], 0.2, &mut rng)),
        w_c: tape.constant(T64::randn(&[bc, d], 0.2, &mut rng)),
        w_dt: tape.constant(T64::zeros(&[dims.n_heads, d])),
        conv_w: tape.constant(T64::randn(&[dims.conv_channels(), 4], 0.2, &mut rng)),
        conv_b: tape.constant(T64::zeros(&[dims.conv_channels()])),
        b_dt: tape.constant(T64::zeros(&[dims.n_heads])),
        a_log: tape.constant(T64::zeros(&[dims.n_heads])),
        d_skip: tape.constant(T64::full(&[dims.n_heads], 1.0)),
        w_out: tape.constant(T64::randn(&[d, dims.d_ssm()], 0.2, &mut rng)),
        rms_gain: tape.constant(T64::full(&[dims.d_ssm()], 1.0)),
    };
    let u = tape.constant(T64::randn(&[8, 32], 1.0, &mut rng));
    let mut resets = vec![false; 8];
    resets[0] = true;
    let y = mamba2_block_forward(
        &mut tape,
        u,
        &vars,
        &dims,
        &unit_mults(),
        &DtPolicy::None,
        0,
        &resets,
    )
    .unwrap();
    assert_eq!(tape.value(y).shape(), &[8, 32]);
    // With W_dt = 0 and b_dt = 0, dt = softplus(0) = ln 2 at every position
    // before any policy: exercised indirectly by the zero projections above.
    assert!((hybridlm_core::scalar::softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn full_block_gradients_match_fd() {
    // dLoss/d{A_log, b_dt, W_*} through the whole block, rel err < 1e-4.
    let dims = tiny_dims();
    let t_len = 6;
    let mut resets = vec![false; t_len];
    resets[0] = true;
    resets[3] = true;
    let mut rng = derive(71, 26);
    let u_data = T64::randn(&[t_len, dims.d_model], 1.0, &mut rng);
    let mix = T64::randn(&[t_len, dims.d_model], 1.0, &mut rng);

    let run = |patch: Option<(&str, &T64)>| -> (f64, std::collections::BTreeMap<String, T64>) {
        let mut tape = Tape::new();
        let mut vars = register_ssm_layer(&mut tape, &dims, 5);
        if let Some((name, tensor)) = patch {
            let v = tape.constant(tensor.clone());
            match name {
                "a_log" => vars.a_log = v,
                "b_dt" => vars.b_dt = v,
                "w_x" => vars.w_x = v,
                "conv_w" => vars.conv_w = v,
                _ => unreachable!(),
            }
        }
        let u = tape.constant(u_data.clone());
        let y = mamba2_block_forward(
            &mut tape,
            u,
            &vars,
            &dims,
            &unit_mults(),
            &DtPolicy::None,
            0,
            &resets,
        )
        .unwrap();
        let m = tape.constant(mix.clone());
        let my = tape.mul(y, m).unwrap();
        let loss = tape.sum(my);
        let v = tape.value(loss).item();
        let grads = tape.backward(loss).unwrap();
        (v, grads)
    };

    let (_, grads) = run(None);
    for name in ["a_log", "b_dt", "w_x", "conv_w"] {
        let base = {
            let mut tape = Tape::new();
            let vars = register_ssm_layer(&mut tape, &dims, 5);
            let id = match name {
                "a_log" => vars.a_log,
                "b_dt" => vars.b_dt,
                "w_x" => vars.w_x,
                "conv_w" => vars.conv_w,
                _ => unreachable!(),
            };
            tape.value(id).clone()
        };
        let fd = finite_difference_gradient(&mut |p| Ok(run(Some((name, p))).0), &base, 1e-5)
            .unwrap();
        let err = max_rel_err(&grads[name].to_f64_vec(), &fd.to_f64_vec(), 1e-4);
        assert!(err < 1e-4, "{name}: rel err {err:.2e}");
    }
}

#[test]
fn block_forward_rejects_bad_config() {
    let mut dims = tiny_dims();
    dims.n_groups = 3; // does not divide n_heads = 2
    let mut tape = Tape::new();
    let vars = register_ssm_layer(&mut tape, &tiny_dims(), 1);
    let u = tape.constant(T64::zeros(&[4, 12]));
    assert!(mamba2_block_forward(
        &mut tape,
        u,
        &vars,
        &dims,
        &unit_mults(),
        &DtPolicy::None,
        0,
        &[true, false, false, false],
    )
    .is_err());
}

#[test]
fn model_residual_stays_finite_across_widths() {
    // 50 random forward passes at widths {32, 64, 128}.
    let base = MuPMultiplierSet::base();
    for &width in &[32usize, 64, 128] {
        for seed in 0..(50 / 3 + 1) as u64 {
            let cfg = HybridConfig::desk(width, 2, 48, seed);
            let model = HybridModel::<f64>::new(cfg, &base).unwrap();
            let mut rng = derive(seed, 27);
            let tokens: Vec<usize> =
                (0..16).map(|_| (hybridlm_core::rng::uniform_f64(&mut rng, 0.0, 48.0)) as usize).collect();
            let meta = SeqMeta::single_doc(16);
            let mut tape = Tape::new();
            let vars = model.register(&mut tape).unwrap();
            let logits =
                model.forward(&mut tape, &vars, &tokens, &meta, &DtPolicy::None, 0).unwrap();
            assert!(tape.value(logits).all_finite(), "width {width} seed {seed}");
        }
    }
}
