//! Uniform axes and multilinear interpolation helpers.

/// A uniform 1-D axis with `n >= 2` nodes spanning `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        assert!(n >= 2, "axis needs at least 2 nodes");
        assert!(hi > lo, "axis needs hi > lo");
        Axis { lo, hi, n }
    }

    /// Degenerate single-node axis (used for x-independent fields).
    pub fn point(v: f64) -> Self {
        Axis {
            lo: v,
            hi: v,
            n: 1,
        }
    }

    #[inline]
    pub fn step(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.hi - self.lo) / (self.n - 1) as f64
        }
    }

    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        if self.n < 2 {
            self.lo
        } else {
            self.lo + self.step() * i as f64
        }
    }

    pub fn coords(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(move |i| self.coord(i))
    }

    /// Cell index and fractional offset for `x`, clamped to the axis.
    #[inline]
    pub fn locate(&self, x: f64) -> (usize, f64) {
        if self.n < 2 {
            return (0, 0.0);
        }
        let s = (x - self.lo) / self.step();
        if s <= 0.0 {
            return (0, 0.0);
        }
        let max = (self.n - 2) as f64;
        if s >= (self.n - 1) as f64 {
            return (self.n - 2, 1.0);
        }
        let i = s.floor().min(max) as usize;
        (i, s - i as f64)
    }

    #[inline]
    pub fn contains(&self, x: f64) -> bool {
        let slack = 1e-12 * (1.0 + self.hi.abs() + self.lo.abs());
        x >= self.lo - slack && x <= self.hi + slack
    }

    /// Nearest node index.
    pub fn nearest(&self, x: f64) -> usize {
        let (i, w) = self.locate(x);
        if w < 0.5 {
            i
        } else {
            i + 1
        }
    }
}

/// Linear interpolation on an axis given node values.
#[inline]
pub fn interp1(axis: &Axis, vals: &[f64], x: f64) -> f64 {
    if axis.n < 2 {
        return vals[0];
    }
    let (i, w) = axis.locate(x);
    vals[i] * (1.0 - w) + vals[i + 1] * w
}
