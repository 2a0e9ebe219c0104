//! Security formulas against a 40-digit reference grid
//! (regenerate with `scripts/oracle_grid.py`).

use dpsqkd::security::{
    binary_entropy, collision_prob_single, compression_factor, secure_fraction,
    security_threshold,
};

fn rows(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn close(name: &str, got: f64, want: f64, tol: f64) {
    assert!(
        (got - want).abs() <= tol,
        "{name}: got {got:.17e}, want {want:.17e}"
    );
}

#[test]
fn formulas_match_reference_grid() {
    let grid = rows(include_str!("data/oracle_grid.csv"));
    assert_eq!(grid.len(), 100);
    for r in grid {
        let (e, mu) = (r[0], r[1]);
        close("p_c0", collision_prob_single(e).unwrap(), r[2], 1e-12);
        close("tau", compression_factor(e, mu).unwrap(), r[3], 1e-12);
        close("h2", binary_entropy(e), r[4], 1e-12);
        close("secure fraction", secure_fraction(e, mu, 1.16).unwrap(), r[5], 1e-12);
    }
}

#[test]
fn thresholds_match_reference_grid() {
    let grid = rows(include_str!("data/threshold_grid.csv"));
    assert_eq!(grid.len(), 15);
    for r in grid {
        close("threshold", security_threshold(r[0], r[1]).unwrap(), r[2], 1e-11);
    }
}
