//! Performance and fairness metrics.
//!
//! Per-client scores are compared against a reference vector (the standalone
//! scores) through Pearson correlation, Euclidean distance and cosine
//! similarity; the spread of scores across clients is the population standard
//! deviation.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Set Dice of two binary masks; two empty masks score 1.
pub fn dice_coefficient(pred: &[bool], truth: &[bool]) -> Result<f64> {
    check_dim(truth.len(), pred.len())?;
    let mut both = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (&a, &b) in pred.iter().zip(truth) {
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample Pearson correlation with a two-tailed p-value from Student's t
/// with `n - 2` degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    check_dim(x.len(), y.len())?;
    let n = x.len();
    if n < 3 {
        return Err(Error::invalid(format!("pearson correlation needs at least 3 points, got {n}")));
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::invalid("pearson correlation undefined for zero variance"));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok((r, correlation_p_value(r, n)))
}

/// Two-tailed p-value of a sample correlation `r` over `n` points.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let one_minus = 1.0 - r * r;
    if one_minus <= 0.0 {
        return 0.0;
    }
    let t = r * (df / one_minus).sqrt();
    student_t_two_tailed(t, df)
}

/// P(|T| >= |t|) for Student's t with `df` degrees of freedom.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, 0.5 * df, 0.5).clamp(0.0, 1.0)
}

const BETA_TOL: f64 = 1e-12;
const BETA_MAX_ITER: usize = 500;

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The continued fraction converges fast only below the mean; use the
    // symmetry I_x(a,b) = 1 - I_{1-x}(b,a) otherwise.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=BETA_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < BETA_TOL {
            break;
        }
    }
    h
}

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

pub fn euclidean(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dim(x.len(), y.len())?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

pub fn cosine_sim(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dim(x.len(), y.len())?;
    let nx = norm(x);
    let ny = norm(y);
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::invalid("cosine similarity undefined for a zero vector"));
    }
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Population standard deviation of per-client scores.
pub fn client_std(scores: &[f64]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::invalid(format!("client std needs at least 2 clients, got {}", scores.len())));
    }
    let m = mean(scores);
    let var = scores.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / scores.len() as f64;
    Ok(var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Raw correlation in [-1, 1]; tables render it scaled by 100.
    pub pearson_r: f64,
    pub p_value: f64,
    pub euclidean_distance: f64,
    pub cosine_similarity: f64,
}

/// Compares a method's per-client test scores with the standalone scores.
pub fn build_fairness_report(method_scores: &[f64], standalone_scores: &[f64]) -> Result<FairnessReport> {
    check_dim(standalone_scores.len(), method_scores.len())?;
    let (pearson_r, p_value) = pearson(method_scores, standalone_scores)?;
    Ok(FairnessReport {
        scores: method_scores.to_vec(),
        mean: mean(method_scores),
        std: client_std(method_scores)?,
        pearson_r,
        p_value,
        euclidean_distance: euclidean(method_scores, standalone_scores)?,
        cosine_similarity: cosine_sim(method_scores, standalone_scores)?,
    })
}

/// Fixed-width table with one row per method: per-client scores, Avg., Std.,
/// then the fairness columns. Scores and correlations are shown ×100.
pub fn render_table(rows: &[(String, FairnessReport)]) -> String {
    use std::fmt::Write;
    let n = rows.first().map_or(0, |(_, r)| r.scores.len());
    let mut out = String::new();
    let _ = write!(out, "{:<14}", "Method");
    for i in 1..=n {
        let _ = write!(out, "{:>8}", format!("C{i}"));
    }
    let _ = writeln!(out, "{:>8}{:>8}{:>20}{:>11}{:>9}", "Avg.", "Std.", "Pearson (p)", "Euclid.", "Cosine");
    for (name, r) in rows {
        let _ = write!(out, "{:<14}", name);
        for s in &r.scores {
            let _ = write!(out, "{:>8.2}", s * 100.0);
        }
        let corr = format!("{:.2} ({:.1e})", r.pearson_r * 100.0, r.p_value);
        let _ = writeln!(
            out,
            "{:>8.2}{:>8.2}{:>20}{:>11.4}{:>9.4}",
            r.mean * 100.0,
            r.std * 100.0,
            corr,
            r.euclidean_distance,
            r.cosine_similarity
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn dice_edge_cases() {
        let a = [true, true, false, false];
        assert_eq!(dice_coefficient(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_coefficient(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(dice_coefficient(&[false; 3], &[false; 3]).unwrap(), 1.0);
        // |P| = |G| = 4, overlap 2
        let p = [true, true, true, true, false, false];
        let g = [false, false, true, true, true, true];
        assert_abs_diff_eq!(dice_coefficient(&p, &g).unwrap(), 0.5);
        assert_eq!(dice_coefficient(&g, &p).unwrap(), dice_coefficient(&p, &g).unwrap());
        assert!(dice_coefficient(&[true], &[true, false]).is_err());
    }

    #[test]
    fn pearson_identity_and_negation() {
        let x = [1.0, 2.0, 4.0, 7.0, 11.0];
        let (r, p) = pearson(&x, &x).unwrap();
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-15);
        assert!(p < 1e-10);
        let y: Vec<f64> = x.iter().map(|v| 3.0 - v).collect();
        assert_abs_diff_eq!(pearson(&x, &y).unwrap().0, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn pearson_rejects_degenerate_inputs() {
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn p_value_matches_published_pair() {
        // r = 0.8862 over six clients is printed as 88.67 (1.9e-2).
        let p = correlation_p_value(0.8862, 6);
        assert!((1.5e-2..=2.3e-2).contains(&p), "p = {p}");
    }

    #[test]
    fn p_value_agrees_with_statrs() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        for &(t, df) in &[(0.3, 1.0), (1.7, 4.0), (3.826, 4.0), (-2.2, 9.0), (5.0, 30.0)] {
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            let expected = 2.0 * (1.0 - dist.cdf(f64::abs(t)));
            assert_abs_diff_eq!(student_t_two_tailed(t, df), expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn ln_gamma_known_values() {
        assert_abs_diff_eq!(ln_gamma(1.0), 0.0, epsilon = 1e-13);
        assert_abs_diff_eq!(ln_gamma(5.0), 24f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ln_gamma(0.5), std::f64::consts::PI.sqrt().ln(), epsilon = 1e-13);
    }

    #[test]
    fn distances() {
        assert_eq!(euclidean(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert_abs_diff_eq!(euclidean(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2f64.sqrt());
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 2.0]).is_err());
        assert!(euclidean(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn population_std() {
        assert_eq!(client_std(&[0.0, 1.0]).unwrap(), 0.5);
        assert_eq!(client_std(&[0.7; 4]).unwrap(), 0.0);
        assert_abs_diff_eq!(client_std(&[0.1, 0.5, 0.9]).unwrap(), client_std(&[0.9, 0.1, 0.5]).unwrap(), epsilon = 1e-15);
        assert!(client_std(&[1.0]).is_err());
    }

    #[test]
    fn report_against_self() {
        let s = [0.6, 0.7, 0.8, 0.95];
        let r = build_fairness_report(&s, &s).unwrap();
        assert_abs_diff_eq!(r.pearson_r, 1.0, epsilon = 1e-12);
        assert_eq!(r.euclidean_distance, 0.0);
    }

    #[test]
    fn report_matches_hand_arithmetic() {
        let method = [0.8, 0.6, 0.9, 0.7];
        let standalone = [0.7, 0.5, 0.9, 0.5];
        let r = build_fairness_report(&method, &standalone).unwrap();
        // means 0.75 and 0.65; deviations (.05,-.15,.15,-.05) and (.05,-.15,.25,-.15)
        let sxy = 0.05 * 0.05 + 0.15 * 0.15 + 0.15 * 0.25 + 0.05 * 0.15;
        let sxx = 0.05f64 * 0.05 + 0.15 * 0.15 + 0.15 * 0.15 + 0.05 * 0.05;
        let syy = 0.05f64 * 0.05 + 0.15 * 0.15 + 0.25 * 0.25 + 0.15 * 0.15;
        assert_abs_diff_eq!(r.pearson_r, sxy / (sxx * syy).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.mean, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(r.std, (sxx / 4.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.euclidean_distance, (0.01f64 + 0.01 + 0.0 + 0.04).sqrt(), epsilon = 1e-12);
        let dot = 0.56 + 0.30 + 0.81 + 0.35;
        let nm = (0.64f64 + 0.36 + 0.81 + 0.49).sqrt();
        let ns = (0.49f64 + 0.25 + 0.81 + 0.25).sqrt();
        assert_abs_diff_eq!(r.cosine_similarity, dot / (nm * ns), epsilon = 1e-12);
    }

    #[test]
    fn table_has_fairness_columns() {
        let s = [0.6, 0.7, 0.8];
        let t = render_table(&[("FedAvg".into(), build_fairness_report(&s, &s).unwrap())]);
        assert!(t.contains("Pearson (p)") && t.contains("Euclid.") && t.contains("Std."));
        assert!(t.contains("100.00"));
    }
}
