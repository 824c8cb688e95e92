//! Central-difference oracles for every differentiable graph operation, plus
//! the tape's bookkeeping rules (accumulation, reuse, repeated backward).

use lifeseq_tensor::{grad_check, Graph, GradStore, NodeId, ParamSet, Result, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;
const SEEDS: [u64; 5] = [1, 2, 3, 7, 42];

fn rand_tensor(rng: &mut ChaCha12Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect();
    Tensor::from_vec(rows, cols, data).expect("sized data")
}

/// Builds a scalar by contracting `y` with a fixed random tensor, so the
/// checked operation sees a generic incoming adjoint.
fn contract(g: &mut Graph, y: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = g.input(weights.clone());
    let prod = g.mul(y, w)?;
    g.mean_all(prod)
}

fn check<F>(name: &str, params: &mut ParamSet, build: F)
where
    F: FnMut(&ParamSet) -> Result<(Graph, NodeId)>,
{
    let report = grad_check(params, H, build).unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(
        report.max_rel_err < TOL,
        "{name}: max rel err {} at {:?} over {} coords",
        report.max_rel_err,
        report.worst,
        report.coords_checked
    );
}

#[test]
fn elementwise_and_linear_ops_match_central_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let a = params.add("a", rand_tensor(&mut rng, 3, 4, -1.0, 1.0), true);
        let b = params.add("b", rand_tensor(&mut rng, 3, 4, -1.0, 1.0), true);
        let w = params.add("w", rand_tensor(&mut rng, 4, 2, -1.0, 1.0), true);
        let bias = params.add("bias", rand_tensor(&mut rng, 1, 2, -0.5, 0.5), true);
        let gate = params.add("gate", Tensor::scalar(rng.gen::<f64>() - 0.5), true);
        let cw = rand_tensor(&mut rng, 3, 2, -1.0, 1.0);

        check(&format!("linear chain seed {seed}"), &mut params, |p| {
            let mut g = Graph::new();
            let na = g.param(p, a)?;
            let nb = g.param(p, b)?;
            let nw = g.param(p, w)?;
            let nbias = g.param(p, bias)?;
            let ngate = g.param(p, gate)?;
            let sum = g.add(na, nb)?;
            let dif = g.sub(sum, nb)?;
            let prod = g.mul(dif, nb)?;
            let mm = g.matmul(prod, nw)?;
            let biased = g.add_row(mm, nbias)?;
            let scaled = g.scale(biased, 1.7)?;
            let gated = g.scale_by_scalar(scaled, ngate)?;
            let loss = contract(&mut g, gated, &cw)?;
            Ok((g, loss))
        });
    }
}

#[test]
fn nonlinearities_match_central_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let x = params.add("x", rand_tensor(&mut rng, 3, 5, -2.0, 2.0), true);
        let cw = rand_tensor(&mut rng, 3, 5, -1.0, 1.0);

        for (name, f) in [
            ("tanh", 0usize),
            ("sin", 1),
            ("exp", 2),
            ("gelu", 3),
            ("softmax_rows", 4),
            ("sub_row_mean", 5),
        ] {
            check(&format!("{name} seed {seed}"), &mut params, |p| {
                let mut g = Graph::new();
                let nx = g.param(p, x)?;
                let y = match f {
                    0 => g.tanh(nx)?,
                    1 => g.sin(nx)?,
                    2 => g.exp(nx)?,
                    3 => g.gelu(nx)?,
                    4 => g.softmax_rows(nx)?,
                    _ => g.sub_row_mean(nx)?,
                };
                let loss = contract(&mut g, y, &cw)?;
                Ok((g, loss))
            });
        }
    }
}

#[test]
fn shape_ops_match_central_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let x = params.add("x", rand_tensor(&mut rng, 4, 6, -1.0, 1.0), true);
        let table = params.add("table", rand_tensor(&mut rng, 5, 3, -1.0, 1.0), true);
        let ids = vec![4, 0, 2, 0, 3, 1];
        let cw_slice = rand_tensor(&mut rng, 2, 2, -1.0, 1.0);
        let cw_cat = rand_tensor(&mut rng, 4, 8, -1.0, 1.0);
        let cw_gather = rand_tensor(&mut rng, 6, 3, -1.0, 1.0);

        check(&format!("slice seed {seed}"), &mut params, |p| {
            let mut g = Graph::new();
            let nx = g.param(p, x)?;
            let cols = g.slice_cols(nx, 1, 3)?;
            let rows = g.slice_rows(cols, 2, 4)?;
            let loss = contract(&mut g, rows, &cw_slice)?;
            Ok((g, loss))
        });

        check(&format!("concat seed {seed}"), &mut params, |p| {
            let mut g = Graph::new();
            let nx = g.param(p, x)?;
            let left = g.slice_cols(nx, 0, 2)?;
            let cat = g.concat_cols(&[nx, left])?;
            let loss = contract(&mut g, cat, &cw_cat)?;
            Ok((g, loss))
        });

        check(&format!("gather seed {seed}"), &mut params, |p| {
            let mut g = Graph::new();
            let nt = g.param(p, table)?;
            let rows = g.gather_rows(nt, &ids)?;
            let loss = contract(&mut g, rows, &cw_gather)?;
            Ok((g, loss))
        });
    }
}

#[test]
fn normalization_and_time_ops_match_central_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let x = params.add("x", rand_tensor(&mut rng, 4, 6, -2.0, 2.0), true);
        let gain = params.add("gain", rand_tensor(&mut rng, 1, 6, 0.5, 1.5), true);
        let w = params.add("w", rand_tensor(&mut rng, 1, 6, -1.0, 1.0), true);
        let phi = params.add("phi", rand_tensor(&mut rng, 1, 6, -3.0, 3.0), true);
        let xs: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() * 10.0).collect();
        let cw = rand_tensor(&mut rng, 4, 6, -1.0, 1.0);

        check(&format!("rmsnorm seed {seed}"), &mut params, |p| {
            let mut g = Graph::new();
            let nx = g.param(p, x)?;
            let ng = g.param(p, gain)?;
            let y = g.rmsnorm(nx, ng)?;
            let loss = contract(&mut g, y, &cw)?;
            Ok((g, loss))
        });

        check(&format!("rope seed {seed}"), &mut params, |p| {
            let mut g = Graph::new();
            let nx = g.param(p, x)?;
            let y = g.rope(nx, &[0, 3, 5, 11], 10_000.0)?;
            let loss = contract(&mut g, y, &cw)?;
            Ok((g, loss))
        });

        check(&format!("time2vec seed {seed}"), &mut params, |p| {
            let mut g = Graph::new();
            let nw = g.param(p, w)?;
            let nphi = g.param(p, phi)?;
            let y = g.time2vec(nw, nphi, &xs, 2)?;
            let loss = contract(&mut g, y, &cw)?;
            Ok((g, loss))
        });
    }
}

#[test]
fn attention_ops_match_central_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let l = 5;
        let dh = 3;
        let q = params.add("q", rand_tensor(&mut rng, l, dh, -1.0, 1.0), true);
        let k = params.add("k", rand_tensor(&mut rng, l, dh, -1.0, 1.0), true);
        let v = params.add("v", rand_tensor(&mut rng, l, dh, -1.0, 1.0), true);
        let pq = params.add("pq", rand_tensor(&mut rng, l, 4, 0.3, 1.2), true);
        let pk = params.add("pk", rand_tensor(&mut rng, l, 4, 0.3, 1.2), true);
        let cw = rand_tensor(&mut rng, l, dh, -1.0, 1.0);
        let scale = 1.0 / (dh as f64).sqrt();

        for window in [None, Some(2), Some(l + 3)] {
            check(&format!("causal_attention w={window:?} seed {seed}"), &mut params, |p| {
                let mut g = Graph::new();
                let nq = g.param(p, q)?;
                let nk = g.param(p, k)?;
                let nv = g.param(p, v)?;
                let y = g.causal_attention(nq, nk, nv, scale, window)?;
                let loss = contract(&mut g, y, &cw)?;
                Ok((g, loss))
            });
        }

        check(&format!("performer_causal seed {seed}"), &mut params, |p| {
            let mut g = Graph::new();
            let npq = g.param(p, pq)?;
            let npk = g.param(p, pk)?;
            let nv = g.param(p, v)?;
            let y = g.performer_causal(npq, npk, nv, 1e-9)?;
            let loss = contract(&mut g, y, &cw)?;
            Ok((g, loss))
        });
    }
}

#[test]
fn favor_features_match_central_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let l = 5;
        let dh = 3;
        let m = 4;
        let x = params.add("x", rand_tensor(&mut rng, l, dh, -1.0, 1.0), true);
        let omega = rand_tensor(&mut rng, m, dh, -1.0, 1.0);
        let cw = rand_tensor(&mut rng, l, m, -1.0, 1.0);

        check(&format!("favor features seed {seed}"), &mut params, |p| {
            let mut g = Graph::new();
            let nx = g.param(p, x)?;
            let phi = g.favor_features(nx, &omega, false)?;
            let loss = contract(&mut g, phi, &cw)?;
            Ok((g, loss))
        });
    }
}

#[test]
fn favor_attention_head_matches_central_differences() {
    // The row stabilizer is held constant in the gradient; it cancels in the
    // normalized attention output, so the composed head stays exact.
    for seed in SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let l = 5;
        let dh = 3;
        let m = 4;
        let q = params.add("q", rand_tensor(&mut rng, l, dh, -1.0, 1.0), true);
        let k = params.add("k", rand_tensor(&mut rng, l, dh, -1.0, 1.0), true);
        let v = params.add("v", rand_tensor(&mut rng, l, dh, -1.0, 1.0), true);
        let omega = rand_tensor(&mut rng, m, dh, -1.0, 1.0);
        let cw = rand_tensor(&mut rng, l, dh, -1.0, 1.0);

        check(&format!("favor head seed {seed}"), &mut params, |p| {
            let mut g = Graph::new();
            let nq = g.param(p, q)?;
            let nk = g.param(p, k)?;
            let nv = g.param(p, v)?;
            let pq = g.favor_features(nq, &omega, true)?;
            let pk = g.favor_features(nk, &omega, false)?;
            let y = g.performer_causal(pq, pk, nv, 1e-9)?;
            let loss = contract(&mut g, y, &cw)?;
            Ok((g, loss))
        });
    }
}

#[test]
fn favor_features_match_the_closed_form() {
    let x = Tensor::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.25]).expect("shape");
    let omega = Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, -0.5, 0.5]).expect("shape");
    let mut g = Graph::new();
    let nx = g.input(x.clone());
    let phi = g.favor_features(nx, &omega, false).expect("forward");
    let got = g.value(phi);
    let inv_sqrt_m = 1.0 / 3.0f64.sqrt();
    for t in 0..2 {
        let xt = x.row(t);
        let energy = 0.5 * (xt[0] * xt[0] + xt[1] * xt[1]);
        for mu in 0..3 {
            let om = omega.row(mu);
            let want = (xt[0] * om[0] + xt[1] * om[1] - energy).exp() * inv_sqrt_m;
            assert!(
                (got.row(t)[mu] - want).abs() < 1e-15,
                "phi[{t}][{mu}] = {}, want {want}",
                got.row(t)[mu]
            );
        }
    }
}

#[test]
fn row_stabilizer_rescales_rows_without_changing_attention() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let l = 4;
    let m = 6;
    let q = rand_tensor(&mut rng, l, 3, -3.0, 3.0);
    let k = rand_tensor(&mut rng, l, 3, -3.0, 3.0);
    let v = rand_tensor(&mut rng, l, 3, -1.0, 1.0);
    let omega = rand_tensor(&mut rng, m, 3, -1.0, 1.0);
    let run = |stab: bool| {
        let mut g = Graph::new();
        let nq = g.input(q.clone());
        let nk = g.input(k.clone());
        let nv = g.input(v.clone());
        let pq = g.favor_features(nq, &omega, stab).expect("features");
        let pk = g.favor_features(nk, &omega, false).expect("features");
        let y = g.performer_causal(pq, pk, nv, 1e-30).expect("attention");
        (g.value(pq).clone(), g.value(y).clone())
    };
    let (phi_plain, y_plain) = run(false);
    let (phi_stab, y_stab) = run(true);

    // Each row is rescaled by one positive factor exp(-c_t).
    for t in 0..l {
        let ratio = phi_plain.row(t)[0] / phi_stab.row(t)[0];
        assert!(ratio.is_finite() && ratio > 0.0);
        for mu in 1..m {
            let r = phi_plain.row(t)[mu] / phi_stab.row(t)[mu];
            assert!((r - ratio).abs() < 1e-12 * ratio, "row {t} not uniformly scaled");
        }
    }
    // Stabilized features are bounded: the largest projection maps to exp(-|x|^2/2).
    let bound = 1.0 / (m as f64).sqrt();
    assert!(phi_stab.data().iter().all(|&p| p <= bound * (1.0 + 1e-15)));
    // The scale divides out of the normalized attention output.
    for (a, b) in y_plain.data().iter().zip(y_stab.data()) {
        assert!((a - b).abs() < 1e-10, "attention shifted: {a} vs {b}");
    }
}

#[test]
fn cross_entropy_matches_central_differences() {
    for seed in SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let l = 4;
        let vsz = 6;
        let logits = params.add("logits", rand_tensor(&mut rng, l, vsz, -2.0, 2.0), true);
        let targets: Vec<usize> = (0..l).map(|_| rng.gen_range(0..vsz)).collect();
        let mask = vec![true, false, true, true];

        check(&format!("cross_entropy seed {seed}"), &mut params, |p| {
            let mut g = Graph::new();
            let nl = g.param(p, logits)?;
            let loss = g.cross_entropy_sum(nl, &targets, &mask)?;
            Ok((g, loss))
        });
    }
}

#[test]
fn cross_entropy_value_matches_manual_log_softmax() {
    let mut params = ParamSet::new();
    let logits = params.add(
        "logits",
        Tensor::from_vec(2, 3, vec![0.5, -1.0, 2.0, 1.0, 1.0, 1.0]).expect("shape"),
        true,
    );
    let mut g = Graph::new();
    let nl = g.param(&params, logits).expect("leaf");
    let loss = g.cross_entropy_sum(nl, &[2, 0], &[true, true]).expect("loss");

    let row0: f64 = {
        let z: f64 = [0.5f64, -1.0, 2.0].iter().map(|v| v.exp()).sum();
        -(2.0f64.exp() / z).ln()
    };
    let row1: f64 = -(1.0f64 / 3.0).ln();
    let got = g.value(loss).item().expect("scalar");
    assert!((got - (row0 + row1)).abs() < 1e-12, "got {got}, want {}", row0 + row1);
}

#[test]
fn masked_positions_receive_zero_gradient() {
    let mut params = ParamSet::new();
    let logits = params.add("logits", Tensor::filled(3, 4, 0.25), true);
    let mut g = Graph::new();
    let nl = g.param(&params, logits).expect("leaf");
    let loss = g.cross_entropy_sum(nl, &[0, 1, 2], &[true, false, true]).expect("loss");
    let grads = g.backward(loss).expect("backward");
    let dl = grads.get(logits).expect("gradient");
    assert!(dl.row(1).iter().all(|&v| v == 0.0), "masked row has gradient {:?}", dl.row(1));
    assert!(dl.row(0).iter().any(|&v| v != 0.0));
}

#[test]
fn dropout_marks_graph_non_checkable() {
    let mut params = ParamSet::new();
    let x = params.add("x", Tensor::filled(4, 4, 1.0), true);
    let err = grad_check(&mut params, H, |p| {
        let mut g = Graph::new();
        let nx = g.param(p, x)?;
        let y = g.dropout(nx, 0.5, 9)?;
        let loss = g.mean_all(y)?;
        Ok((g, loss))
    })
    .unwrap_err();
    assert!(matches!(err, TensorError::NotCheckable("dropout")));
}

#[test]
fn dropout_scales_kept_elements_and_is_deterministic_per_seed() {
    let mut params = ParamSet::new();
    let x = params.add("x", Tensor::filled(10, 10, 1.0), true);
    let run = |seed: u64| {
        let mut g = Graph::new();
        let nx = g.param(&params, x).expect("leaf");
        let y = g.dropout(nx, 0.25, seed).expect("dropout");
        g.value(y).clone()
    };
    let a = run(3);
    let b = run(3);
    let c = run(4);
    assert_eq!(a, b, "same seed must give the same mask");
    assert_ne!(a, c, "different seeds should differ");
    let kept = 1.0 / 0.75;
    assert!(a.data().iter().all(|&v| v == 0.0 || (v - kept).abs() < 1e-15));
}

#[test]
fn performer_counts_small_denominators_instead_of_clamping() {
    let mut g = Graph::new();
    let pq = g.input(Tensor::filled(3, 2, 1e-9));
    let pk = g.input(Tensor::filled(3, 2, 1e-9));
    let v = g.input(Tensor::filled(3, 2, 1.0));
    g.performer_causal(pq, pk, v, 1e-9).expect("forward");
    assert_eq!(g.diagnostics.small_denominators, 3);
}

#[test]
fn backward_into_accumulates_across_graphs() {
    // Two separate graphs on the same parameter: the store should hold the sum.
    let mut params = ParamSet::new();
    let w = params.add("w", Tensor::scalar(1.5), true);
    let mut store = GradStore::new(&params);
    for _ in 0..2 {
        let mut g = Graph::new();
        let nw = g.param(&params, w).expect("leaf");
        let y = g.mul(nw, nw).expect("mul");
        g.backward_into(y, &mut store).expect("backward");
    }
    assert_eq!(store.get(w).expect("grad").data()[0], 2.0 * 2.0 * 1.5);
}

#[test]
fn windowed_attention_limits_receptive_field() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let l = 6;
    let q = rand_tensor(&mut rng, l, 2, -1.0, 1.0);
    let k = rand_tensor(&mut rng, l, 2, -1.0, 1.0);
    let mut v1 = rand_tensor(&mut rng, l, 2, -1.0, 1.0);
    let mut v2 = v1.clone();
    // Editing a value row outside the window of the last query must not change it.
    v2.set(0, 0, 99.0);
    v2.set(0, 1, -99.0);
    let run = |v: &Tensor| {
        let mut g = Graph::new();
        let nq = g.input(q.clone());
        let nk = g.input(k.clone());
        let nv = g.input(v.clone());
        let y = g.causal_attention(nq, nk, nv, 0.7, Some(3)).expect("attention");
        g.value(y).clone()
    };
    let y1 = run(&mut v1);
    let y2 = run(&mut v2);
    assert_eq!(y1.row(l - 1), y2.row(l - 1), "row 0 is outside the window of query 5");
    assert_ne!(y1.row(1), y2.row(1), "row 0 is inside the window of query 1");
}
