//! Theory-harness integration: the explicit one-block realizations hit
//! their tolerance, the stability bound holds with analytic constants, and
//! the composite bound holds with a bounded random residual.
//!
//! The oracle for the operator itself is a second, independently coded
//! evaluation (precomputed coefficient tables, node-major loops) checked
//! against the shipped implementation.

use cato_core::chart::ChartCoords;
use cato_core::rng::{normal_vec, rng_substream};
use cato_core::tensor::Tensor;
use cato_core::theory::{
    apply_t, construct_lemma1_network, eval_network, interior_chart, measure_chart_stability,
    run_default_suite, sample_ball, stability_sweep, verify_lemma1, verify_theorem1,
    AxialOperatorSpec, Lemma1Options,
};

/// Independent evaluation of the operator: tabulate every coefficient
/// first, then accumulate node-major.
fn apply_t_oracle(
    spec: &AxialOperatorSpec,
    zeta: &ChartCoords<f64>,
    f: &Tensor<f64>,
) -> Vec<f64> {
    let (h, w) = (zeta.h, zeta.w);
    let n = h * w;
    let tab = |c: &cato_core::theory::Coeff| -> Vec<f64> {
        (0..n)
            .map(|k| {
                let (xi, eta) = zeta.get(k);
                c.eval(xi, eta)
            })
            .collect()
    };
    let mut out = vec![0.0; n];
    for (a, b) in &spec.row_terms {
        let at = tab(a);
        let bt = tab(b);
        for i in 0..h {
            let mut acc = 0.0;
            for t in 0..w {
                acc += bt[i * w + t] * f.data[i * w + t];
            }
            acc /= w as f64;
            for j in 0..w {
                out[i * w + j] += at[i * w + j] * acc;
            }
        }
    }
    for (c, d) in &spec.col_terms {
        let ct = tab(c);
        let dt = tab(d);
        for j in 0..w {
            let mut acc = 0.0;
            for p in 0..h {
                acc += dt[p * w + j] * f.data[p * w + j];
            }
            acc /= h as f64;
            for i in 0..h {
                out[i * w + j] += ct[i * w + j] * acc;
            }
        }
    }
    let lt = tab(&spec.diag);
    for k in 0..n {
        out[k] += lt[k] * f.data[k];
    }
    out
}

#[test]
fn apply_t_matches_independent_oracle() {
    let zeta = interior_chart(7, 9, 0.85).unwrap();
    let spec = AxialOperatorSpec::poly_deg3();
    let mut rng = rng_substream(11, "oracle", 0);
    for _ in 0..5 {
        let f = Tensor {
            shape: vec![7, 9],
            data: normal_vec(&mut rng, 63),
            grad: None,
        };
        let got = apply_t(&spec, &zeta, &f).unwrap();
        let expect = apply_t_oracle(&spec, &zeta, &f);
        for (a, b) in got.data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn lemma1_identity_realization() {
    let zeta = interior_chart(8, 8, 0.85).unwrap();
    let opts = Lemma1Options::default();
    let (_, report) =
        verify_lemma1(&AxialOperatorSpec::identity(), &zeta, &opts, "identity").unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn lemma1_row_mean_realization() {
    let zeta = interior_chart(8, 8, 0.85).unwrap();
    let opts = Lemma1Options::default();
    let spec = AxialOperatorSpec::row_mean();
    let (model, report) = verify_lemma1(&spec, &zeta, &opts, "row-mean").unwrap();
    assert!(report.pass, "{report:?}");
    // Spot check directly against apply_t on a fresh field.
    let mut rng = rng_substream(3, "spot", 0);
    let mut f = Tensor { shape: vec![8, 8], data: normal_vec(&mut rng, 64), grad: None };
    let norm = f.norm();
    f.data.iter_mut().for_each(|v| *v /= norm);
    let predicted = eval_network(&model, &zeta, &f).unwrap();
    let exact = apply_t(&spec, &zeta, &f).unwrap();
    let err: f64 = predicted
        .data
        .iter()
        .zip(&exact.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    assert!(err <= opts.eps_nn, "spot error {err}");
}

#[test]
fn lemma1_poly_deg3_realization() {
    let zeta = interior_chart(8, 8, 0.85).unwrap();
    let opts = Lemma1Options::default();
    let (_, report) =
        verify_lemma1(&AxialOperatorSpec::poly_deg3(), &zeta, &opts, "poly-deg3").unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn constructed_attention_weights_are_exactly_uniform() {
    // Zero logits: softmax of an all-zero row is exactly 1/W in IEEE
    // arithmetic; verify through the realized network by checking the
    // row-mean property bit-tightly on a constant field.
    let zeta = interior_chart(6, 6, 0.8).unwrap();
    let opts = Lemma1Options::default();
    let spec = AxialOperatorSpec::row_mean();
    let (model, _) = construct_lemma1_network(&spec, &zeta, &opts).unwrap();
    // Constant field: the row mean equals the constant.
    let f = Tensor::full(vec![6, 6], 0.217);
    let predicted = eval_network(&model, &zeta, &f).unwrap();
    for v in &predicted.data {
        assert!((v - 0.217).abs() < opts.eps_nn);
    }
}

#[test]
fn lemma2_bound_holds_at_all_radii() {
    let zeta = interior_chart(8, 8, 0.85).unwrap();
    let spec = AxialOperatorSpec::linear_chart();
    let mut rng = rng_substream(21, "lemma2", 0);
    for delta in [0.0, 0.01, 0.05, 0.1] {
        let report = measure_chart_stability(&spec, &zeta, delta, 100, &mut rng).unwrap();
        assert!(report.pass, "{report:?}");
        if delta == 0.0 {
            assert_eq!(report.measured, 0.0);
        }
    }
}

#[test]
fn lemma2_difference_is_monotone_in_delta() {
    let zeta = interior_chart(8, 8, 0.85).unwrap();
    let spec = AxialOperatorSpec::linear_chart();
    let mut rng = rng_substream(22, "sweep", 0);
    let sweep = stability_sweep(&spec, &zeta, &[0.0, 0.01, 0.05, 0.1], &mut rng).unwrap();
    assert_eq!(sweep[0], 0.0);
    for pair in sweep.windows(2) {
        assert!(pair[0] <= pair[1] + 1e-12, "{sweep:?}");
    }
}

#[test]
fn theorem1_composite_bound() {
    let zeta = interior_chart(8, 8, 0.85).unwrap();
    let opts = Lemma1Options::default();
    let report =
        verify_theorem1(&AxialOperatorSpec::poly_deg3(), &zeta, 0.05, 0.05, &opts).unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn theorem1_degenerate_case_reduces_to_lemma1() {
    let zeta = interior_chart(8, 8, 0.85).unwrap();
    let opts = Lemma1Options::default();
    let report =
        verify_theorem1(&AxialOperatorSpec::poly_deg3(), &zeta, 0.0, 0.0, &opts).unwrap();
    assert!(report.pass, "{report:?}");
    assert!((report.bound - opts.eps_nn).abs() < 1e-15);
}

#[test]
fn underbudgeted_tolerance_reports_fit_failure() {
    let zeta = interior_chart(8, 8, 0.85).unwrap();
    let opts = Lemma1Options { eps_nn: 1e-9, widths: vec![16], ..Lemma1Options::default() };
    let err = construct_lemma1_network(&AxialOperatorSpec::poly_deg3(), &zeta, &opts);
    match err {
        Err(cato_core::Error::Fit(_)) => {}
        other => panic!("expected a fit error, got {other:?}"),
    }
}

#[test]
fn default_suite_all_pass() {
    let suite = run_default_suite(0).unwrap();
    for r in &suite.reports {
        assert!(r.pass, "{} failed: measured {} vs bound {}", r.name, r.measured, r.bound);
        // No hidden slack: a passing report satisfies its inequality at
        // face value.
        assert!(r.measured <= r.bound + r.solver_tol);
    }
    assert!(suite.all_pass);
}

#[test]
fn sampled_ball_has_requested_norms() {
    let mut rng = rng_substream(5, "ball", 0);
    let fields = sample_ball(4, 4, 1.0, 8, &mut rng);
    for f in &fields {
        assert!((f.norm() - 1.0).abs() < 1e-12);
    }
    assert_eq!(fields.len(), 8 + 16);
}
