//! Reference computations written independently of the library kernels.
//!
//! The t-distribution tail uses the angular form of the Student density,
//! `P(|T| > t) = ∫_θ^{π/2} cos^{ν-1} u du / ∫_0^{π/2} cos^{ν-1} u du`
//! with `θ = atan(t / √ν)`, integrated by adaptive Simpson quadrature.
//! Counting helpers recount shares straight from raw record text.

use std::collections::{BTreeMap, BTreeSet};

use crate::t2d::Records;

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + adaptive(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson integral of `f` over `[a, b]`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(a, b, fa, fm, fb);
    adaptive(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Two-sided Student-t tail probability by quadrature.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    let power = df - 1.0;
    let f = move |u: f64| u.cos().max(0.0).powf(power);
    let theta = (t.abs() / df.sqrt()).atan();
    let half = std::f64::consts::FRAC_PI_2;
    let tail = integrate(&f, theta, half, 1e-13);
    let total = integrate(&f, 0.0, half, 1e-13);
    (tail / total).clamp(0.0, 1.0)
}

/// Welch statistic, Welch–Satterthwaite df and two-sided p from raw samples.
pub fn welch_from_samples(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let moments = |x: &[f64]| {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (n, mean, var)
    };
    let (na, ma, va) = moments(a);
    let (nb, mb, vb) = moments(b);
    let (sa, sb) = (va / na, vb / nb);
    let t = (mb - ma) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    (t, df, t_two_sided_p(t, df))
}

/// Pooled-SD proportion difference written out term by term.
pub fn smd(expected: f64, observed: f64) -> f64 {
    let pooled = ((expected * (1.0 - expected) + observed * (1.0 - observed)) / 2.0).sqrt();
    (observed - expected) / pooled
}

/// Person ids whose `table` rows have `code` in column `col`.
pub fn persons_with(records: &Records, table: &str, col: usize, code: &str) -> BTreeSet<String> {
    records.tables[table]
        .iter()
        .filter(|r| r[col] == code)
        .map(|r| r[0].clone())
        .collect()
}

/// Person ids per value of a person-table column.
pub fn person_groups(records: &Records, col: usize) -> BTreeMap<String, BTreeSet<String>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in &records.tables["person"] {
        out.entry(r[col].clone()).or_default().insert(r[0].clone());
    }
    out
}

/// `100 · |a ∩ b| / |b|`.
pub fn percent_within(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    100.0 * a.intersection(b).count() as f64 / b.len() as f64
}
