use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn params(entries: &[(&str, Tensor)]) -> ParamSet {
    let mut p = ParamSet::new();
    for (n, t) in entries {
        p.insert(*n, t.clone()).unwrap();
    }
    p
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    let s = g.softmax_rows(x);
    assert_eq!(g.value(s), &[0.5, 0.5]);
}

#[test]
fn masked_softmax_zeroes_masked_columns() {
    let mut g = Graph::new();
    let x = g.constant(&Tensor::matrix(1, 3, vec![0.3, 9.0, 0.3]).unwrap());
    let s = g.softmax_rows_masked(x, Some(&[true, false, true])).unwrap();
    assert_eq!(g.value(s), &[0.5, 0.0, 0.5]);
    assert!(g.softmax_rows_masked(x, Some(&[false; 3])).is_err());
}

#[test]
fn cosine_of_identical_rows_is_one() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::matrix(1, 3, vec![0.3, -2.0, 5.0]).unwrap());
    let c = g.cosine_rows(a, a).unwrap();
    assert!((g.value(c)[0] - 1.0).abs() < 1e-15);
    let unit = g.constant(&Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    let c = g.cosine_rows(unit, unit).unwrap();
    assert_eq!(g.value(c)[0], 1.0);
}

#[test]
fn identity_matmul() {
    let mut g = Graph::new();
    let i = g.constant(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let a = g.constant(&Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let p = g.matmul(i, a).unwrap();
    assert_eq!(g.value(p), g.value(a));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(&Tensor::zeros(vec![2, 3]));
    let b = g.constant(&Tensor::zeros(vec![2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("unexpected {:?}", other),
    }
    let c = g.constant(&Tensor::zeros(vec![3, 2]));
    assert!(g.add(a, c).unwrap_err().to_string().contains("[3, 2]"));
}

#[test]
fn backward_sum_and_quadratic() {
    let p = params(&[("p", Tensor::vector(vec![0.5, -1.0, 2.0])), ("q", Tensor::vector(vec![3.0]))]);
    let mut g = Graph::new();
    let pv = g.param(&p, "p").unwrap();
    let s = g.sum(pv);
    let grads = g.backward(s, &p).unwrap();
    assert_eq!(grads["p"].data(), &[1.0, 1.0, 1.0]);
    assert_eq!(grads["p"].shape(), &[3]);
    assert_eq!(grads["q"].data(), &[0.0]);

    let mut g = Graph::new();
    let pv = g.param(&p, "p").unwrap();
    let sq = g.mul(pv, pv).unwrap();
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    let grads = g.backward(half, &p).unwrap();
    assert_eq!(grads["p"].data(), p.get("p").unwrap().data());
}

#[test]
fn backward_rejects_non_scalar() {
    let p = params(&[("p", Tensor::vector(vec![1.0, 2.0]))]);
    let mut g = Graph::new();
    let pv = g.param(&p, "p").unwrap();
    assert!(matches!(g.backward(pv, &p), Err(Error::Shape { .. })));
}

#[test]
fn gradcheck_quadratic_is_exact() {
    let p = params(&[("p", Tensor::vector(vec![0.3, -1.7, 2.2, 0.01]))]);
    let report = grad_check(
        |g, ps| {
            let v = g.param(ps, "p")?;
            let sq = g.mul(v, v)?;
            let s = g.sum(sq);
            Ok(g.scale(s, 0.5))
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert_eq!(report.checked, 4);
    assert!(report.max_rel_error < 1e-8, "{:?}", report);
}

#[test]
fn gradcheck_rejects_bad_eps_and_non_finite() {
    let p = params(&[("p", Tensor::vector(vec![1.0]))]);
    let f = |g: &mut Graph, ps: &ParamSet| {
        let v = g.param(ps, "p")?;
        Ok(g.sum(v))
    };
    assert!(grad_check(f, &p, 0.0).is_err());
    let p = params(&[("p", Tensor::vector(vec![1e-6]))]);
    let err = grad_check(
        |g, ps| {
            let v = g.param(ps, "p")?;
            let l = g.ln(v)?;
            Ok(g.sum(l))
        },
        &p,
        1e-5,
    );
    assert!(matches!(err, Err(Error::NonFinite(_))));
}

#[test]
fn gradcheck_detects_flipped_sign() {
    let p = params(&[("p", Tensor::vector(vec![0.4, -0.9]))]);
    let report = grad_check_with(
        |g, ps| {
            let v = g.param(ps, "p")?;
            let e = g.exp(v)?;
            Ok(g.sum(e))
        },
        &p,
        GradCheckOptions {
            eps: 1e-5,
            flip_sign: true,
        },
    )
    .unwrap();
    assert!(report.max_rel_error > 0.9);
}

#[test]
fn gradcheck_skips_coordinates_straddling_a_kink() {
    // first coordinate sits within eps of the hinge
    let p = params(&[("p", Tensor::vector(vec![3e-6, 0.5, -0.5]))]);
    let report = grad_check(
        |g, ps| {
            let v = g.param(ps, "p")?;
            let r = g.relu(v);
            Ok(g.sum(r))
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert_eq!(report.skipped_kinks, 1);
    assert_eq!(report.checked, 2);
    assert!(report.max_rel_error < 1e-9);
}

/// Every primitive in one scalar function; analytic vs numeric gradients.
fn kitchen_sink(g: &mut Graph, ps: &ParamSet) -> crate::error::Result<Var> {
    let a = g.param(ps, "a")?; // 3x4
    let b = g.param(ps, "b")?; // 4x2
    let row = g.param(ps, "row")?; // 1x4
    let col = g.param(ps, "col")?; // 3x1
    let s = g.param(ps, "s")?; // 1x1
    let adj = Rc::new(SparseMatrix::from_triplets(
        3,
        vec![(0, 0, 0.5), (0, 1, 0.4), (1, 0, 0.4), (1, 1, 0.3), (2, 2, 1.0), (1, 2, 0.2)],
    ));

    let ab = g.matmul(a, b)?; // 3x2
    let at = g.transpose(a); // 4x3
    let ar = g.add_row(a, row)?;
    let am = g.mul_row(ar, row)?;
    let ac = g.add_col(am, col)?;
    let pos = g.exp(col)?;
    let dc = g.div_col(ac, pos)?;
    let sc = g.scale_by(dc, s)?;
    let ln_in = g.add_const(pos, 0.1);
    let lnv = g.ln(ln_in)?;
    let sm = g.softmax_rows(sc);
    let smm = g.softmax_rows_masked(sc, Some(&[true, false, true, true]))?;
    let lse = g.logsumexp_rows(sc, Some(vec![true, true, false, true, false, true, true, true, true, true, true, false]))?;
    let rn = g.row_norm(a);
    let lnorm = g.layer_norm(a);
    let mm = g.masked_mean_rows(lnorm, &[true, false, true])?;
    let mr = g.mean_rows(sm);
    let sq = g.matmul(a, at)?; // 3x3
    let dg = g.diag(sq)?;
    let ga = g.gather_rows(a, &[2, 0, 2])?;
    let cr = g.concat_rows(&[a, ga])?;
    let cc = g.concat_cols(&[ab, col])?;
    let sr = g.slice_rows(cr, 1, 3)?;
    let scl = g.slice_cols(sr, 1, 2)?;
    let pr = g.propagate(&adj, a)?;
    let rl = g.relu(pr);
    let cm = g.cosine_matrix(a, ga)?;
    let crw = g.cosine_rows(a, pr)?;
    let diff = g.sub(sm, smm)?;
    let prod = g.mul(diff, lnorm)?;

    let mut terms = Vec::new();
    for v in [ab, lnv, lse, rn, mm, mr, dg, cc, scl, rl, cm, crw, prod] {
        let t = g.sum(v);
        terms.push(t);
    }
    let mut total = terms[0];
    for (k, &t) in terms.iter().enumerate().skip(1) {
        let w = g.scale(t, 1.0 + k as f64 * 0.1);
        total = g.add(total, w)?;
    }
    let sc2 = g.sum_cols(sq);
    let m = g.mean(sc2);
    let neg = g.neg(m);
    g.add(total, neg)
}

#[test]
fn every_op_matches_finite_differences() {
    for seed in [1u64, 2, 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = params(&[
            ("a", random_tensor(&mut rng, 3, 4)),
            ("b", random_tensor(&mut rng, 4, 2)),
            ("row", random_tensor(&mut rng, 1, 4)),
            ("col", random_tensor(&mut rng, 3, 1)),
            ("s", Tensor::scalar(0.7)),
        ]);
        let report = grad_check(kitchen_sink, &p, 1e-5).unwrap();
        assert!(report.checked > 20);
        assert!(report.max_rel_error < 1e-6, "seed {}: {:?}", seed, report);
    }
}

#[test]
fn sparse_matrix_sums_duplicates() {
    let m = SparseMatrix::from_triplets(2, vec![(1, 0, 1.0), (0, 1, 2.0), (1, 0, 0.5)]);
    assert_eq!(m.nnz(), 2);
    assert_eq!(m.to_dense(), vec![vec![0.0, 2.0], vec![1.5, 0.0]]);
}

#[test]
fn param_registered_once() {
    let p = params(&[("w", Tensor::vector(vec![1.0]))]);
    let mut g = Graph::new();
    let a = g.param(&p, "w").unwrap();
    let b = g.param(&p, "w").unwrap();
    assert_eq!(a, b);
    assert!(g.param(&p, "missing").is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut p = ParamSet::new();
    p.insert("graph.w0", random_tensor(&mut rng, 3, 2)).unwrap();
    p.insert("text.bias", Tensor::vector(vec![1e-300, -0.1, 1.0 / 3.0])).unwrap();
    p.insert("temperature.log_tau", Tensor::scalar(0.07f64.ln())).unwrap();
    let map = p.clone().into_map();
    let text = checkpoint::encode(&map);
    let back = checkpoint::decode(&text, "mem").unwrap();
    assert_eq!(ParamSet::from_map(back.clone()), p);
    assert_eq!(checkpoint::encode(&back), text);
    assert!(text.starts_with("graph.w0 3 2\n"));
    assert!(checkpoint::decode("x 2 2\n1 2 3\n", "mem").is_err());
}

#[test]
fn checksum_tracks_values() {
    let mut p = params(&[("a", Tensor::vector(vec![1.0, 2.0]))]);
    let before = p.checksum();
    assert_eq!(before, p.clone().checksum());
    p.get_mut("a").unwrap().data_mut()[1] = 2.0000001;
    assert_ne!(before, p.checksum());
}

fn linear_combo_loss(g: &mut Graph, ps: &ParamSet, wa: f64, wb: f64) -> crate::error::Result<Var> {
    let x = g.param(ps, "x")?;
    let y = g.param(ps, "y")?;
    // L1: logsumexp-based, L2: cosine-based
    let xy = g.matmul(x, y)?;
    let l1 = g.logsumexp_rows(xy, None)?;
    let l1 = g.sum(l1);
    let yt = g.transpose(y);
    let c = g.cosine_matrix(x, yt)?;
    let l2 = g.mean(c);
    let a = g.scale(l1, wa);
    let b = g.scale(l2, wb);
    g.add(a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::matrix(3, 4, vals).unwrap());
        let s = g.softmax_rows(x);
        for row in g.value(s).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_is_linear(seed in 0u64..1000, wa in -3.0f64..3.0, wb in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = params(&[("x", random_tensor(&mut rng, 2, 3)), ("y", random_tensor(&mut rng, 3, 2))]);
        let grad_of = |a: f64, b: f64| {
            let mut g = Graph::new();
            let l = linear_combo_loss(&mut g, &p, a, b).unwrap();
            g.backward(l, &p).unwrap()
        };
        let combined = grad_of(wa, wb);
        let g1 = grad_of(1.0, 0.0);
        let g2 = grad_of(0.0, 1.0);
        for name in ["x", "y"] {
            for i in 0..combined[name].len() {
                let expect = wa * g1[name].data()[i] + wb * g2[name].data()[i];
                prop_assert!((combined[name].data()[i] - expect).abs() <= 1e-10);
            }
        }
    }
}
