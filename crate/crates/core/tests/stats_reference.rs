use concept_tree::analysis::stats::{
    correlation_p_value, pearson, regularized_incomplete_beta, spearman,
};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::beta::beta_reg;

#[test]
fn p_values_match_students_t() {
    for n in [3usize, 4, 5, 8, 12, 30, 100] {
        let df = (n - 2) as f64;
        let t_dist = StudentsT::new(0.0, 1.0, df).unwrap();
        for r in [-0.99, -0.7, -0.218, -0.05, 0.0, 0.1, 0.5, 0.8, 0.95] {
            let t = r * (df / (1.0 - r * r)).sqrt();
            let want = 2.0 * (1.0 - t_dist.cdf(t.abs()));
            let got = correlation_p_value(r, n);
            assert!((got - want).abs() < 1e-9, "n={n} r={r}: {got} vs {want}");
        }
    }
}

#[test]
fn incomplete_beta_matches_reference() {
    for &(a, b) in &[(0.5, 0.5), (1.5, 0.5), (4.0, 0.5), (2.0, 3.0), (10.0, 7.5)] {
        for i in 1..20 {
            let x = i as f64 / 20.0;
            let got = regularized_incomplete_beta(a, b, x);
            let want = beta_reg(a, b, x);
            assert!(
                (got - want).abs() < 1e-10,
                "I_{x}({a},{b}): {got} vs {want}"
            );
        }
    }
}

#[test]
fn n5_case() {
    // x = 1..5 with y chosen so that r = 0.8 exactly
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [2.0, 1.0, 4.0, 3.0, 5.0];
    let c = pearson(&x, &y).unwrap();
    assert!((c.r - 0.8).abs() < 1e-12);
    let t_dist = StudentsT::new(0.0, 1.0, 3.0).unwrap();
    let t = 0.8 * (3.0f64 / 0.36).sqrt();
    let want = 2.0 * (1.0 - t_dist.cdf(t));
    assert!((c.p - want).abs() < 1e-6);
    assert!((c.p - 0.10408803866182799).abs() < 1e-6);
    // ranks equal values here, so spearman agrees
    let s = spearman(&x, &y).unwrap();
    assert!((s.r - 0.8).abs() < 1e-12);
}
