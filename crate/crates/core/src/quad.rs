//! Composite trapezoid quadrature on uniform and explicit node sets.

/// Trapezoid rule over uniformly spaced samples.
#[inline]
pub fn trapezoid_uniform(vals: &[f64], dx: f64) -> f64 {
    match vals.len() {
        0 | 1 => 0.0,
        n => {
            let mut s = 0.5 * (vals[0] + vals[n - 1]);
            for v in &vals[1..n - 1] {
                s += v;
            }
            s * dx
        }
    }
}

/// Trapezoid rule over explicit (possibly non-uniform) nodes.
#[inline]
pub fn trapezoid_nodes(xs: &[f64], vals: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), vals.len());
    let mut s = 0.0;
    for k in 1..xs.len() {
        s += 0.5 * (vals[k] + vals[k - 1]) * (xs[k] - xs[k - 1]);
    }
    s
}

/// Cumulative trapezoid over uniform samples; `out[0] = 0`.
pub fn cumulative_trapezoid_uniform(vals: &[f64], dx: f64, out: &mut Vec<f64>) {
    out.clear();
    out.push(0.0);
    for k in 1..vals.len() {
        let prev = out[k - 1];
        out.push(prev + 0.5 * (vals[k] + vals[k - 1]) * dx);
    }
}

/// Trapezoid of `f` over `[a, b]` with `n` nodes.
pub fn trapezoid_fn(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n.max(2);
    let dx = (b - a) / (n - 1) as f64;
    let mut s = 0.5 * (f(a) + f(b));
    for k in 1..n - 1 {
        s += f(a + dx * k as f64);
    }
    s * dx
}
