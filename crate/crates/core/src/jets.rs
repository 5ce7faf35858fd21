//! Truncated Taylor arithmetic: a value together with its first four
//! derivatives with respect to a single parameter.
//!
//! The separable solvers express radial profiles in analytic bases; carrying
//! jets through the basis evaluation gives boundary derivatives to rounding
//! accuracy, with no stencil error on top of the collocation error.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// `f` and d^k f/dt^k for k = 1..4 at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub d: [f64; 5],
}

impl Jet {
    pub fn constant(c: f64) -> Jet {
        Jet { d: [c, 0.0, 0.0, 0.0, 0.0] }
    }

    /// The running variable: value `t`, first derivative 1.
    pub fn variable(t: f64) -> Jet {
        Jet { d: [t, 1.0, 0.0, 0.0, 0.0] }
    }

    pub fn value(&self) -> f64 {
        self.d[0]
    }

    /// Compose a scalar function given its derivatives at `self.value()`
    /// (Faà di Bruno through order four).
    pub fn compose(&self, f: [f64; 5]) -> Jet {
        let g = &self.d;
        let (g1, g2, g3, g4) = (g[1], g[2], g[3], g[4]);
        Jet {
            d: [
                f[0],
                f[1] * g1,
                f[2] * g1 * g1 + f[1] * g2,
                f[3] * g1.powi(3) + 3.0 * f[2] * g1 * g2 + f[1] * g3,
                f[4] * g1.powi(4)
                    + 6.0 * f[3] * g1 * g1 * g2
                    + f[2] * (4.0 * g1 * g3 + 3.0 * g2 * g2)
                    + f[1] * g4,
            ],
        }
    }

    pub fn sin(&self) -> Jet {
        let t = self.d[0];
        let (s, c) = t.sin_cos();
        self.compose([s, c, -s, -c, s])
    }

    pub fn cos(&self) -> Jet {
        let t = self.d[0];
        let (s, c) = t.sin_cos();
        self.compose([c, -s, -c, s, c])
    }

    pub fn exp(&self) -> Jet {
        let e = self.d[0].exp();
        self.compose([e, e, e, e, e])
    }

    pub fn ln(&self) -> Jet {
        let t = self.d[0];
        self.compose([t.ln(), 1.0 / t, -1.0 / (t * t), 2.0 / t.powi(3), -6.0 / t.powi(4)])
    }

    /// Real power; `self.value()` must be positive unless `p` is a
    /// non-negative integer.
    pub fn powf(&self, p: f64) -> Jet {
        let t = self.d[0];
        if t == 0.0 && p >= 0.0 && p.fract() == 0.0 {
            // Monomial jets at the origin stay finite; handle explicitly.
            let k = p as i32;
            let mut f = [0.0; 5];
            for (m, slot) in f.iter_mut().enumerate() {
                let m = m as i32;
                if k == m {
                    *slot = (1..=k).map(|j| j as f64).product();
                }
            }
            return self.compose(f);
        }
        let mut f = [0.0; 5];
        let mut coef = 1.0;
        for (m, slot) in f.iter_mut().enumerate() {
            *slot = coef * t.powf(p - m as f64);
            coef *= p - m as f64;
        }
        self.compose(f)
    }

    pub fn powi(&self, k: i32) -> Jet {
        match k {
            0 => Jet::constant(1.0),
            1 => *self,
            _ if k > 1 => {
                let mut acc = *self;
                for _ in 1..k {
                    acc = acc * *self;
                }
                acc
            }
            _ => Jet::constant(1.0) / self.powi(-k),
        }
    }

    pub fn recip(&self) -> Jet {
        Jet::constant(1.0) / *self
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a += b;
        }
        Jet { d }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a -= b;
        }
        Jet { d }
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        let mut d = self.d;
        for a in d.iter_mut() {
            *a = -*a;
        }
        Jet { d }
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        // Leibniz rule with binomial coefficients (1,1),(1,2,1),...
        const B: [[f64; 5]; 5] = [
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0, 0.0],
            [1.0, 2.0, 1.0, 0.0, 0.0],
            [1.0, 3.0, 3.0, 1.0, 0.0],
            [1.0, 4.0, 6.0, 4.0, 1.0],
        ];
        let mut d = [0.0; 5];
        for (k, slot) in d.iter_mut().enumerate() {
            *slot = (0..=k).map(|j| B[k][j] * self.d[j] * o.d[k - j]).sum();
        }
        Jet { d }
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, s: f64) -> Jet {
        let mut d = self.d;
        for a in d.iter_mut() {
            *a *= s;
        }
        Jet { d }
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, o: Jet) -> Jet {
        let t = o.d[0];
        let inv = [
            1.0 / t,
            -1.0 / (t * t),
            2.0 / t.powi(3),
            -6.0 / t.powi(4),
            24.0 / t.powi(5),
        ];
        self * o.compose(inv)
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(self, s: f64) -> Jet {
        let mut d = self.d;
        d[0] += s;
        Jet { d }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd4(f: impl Fn(f64) -> f64, t: f64, k: usize) -> f64 {
        // High-order central differences as an independent check.
        let h = 1e-2;
        let v = |j: i32| f(t + j as f64 * h);
        match k {
            1 => (v(-2) - 8.0 * v(-1) + 8.0 * v(1) - v(2)) / (12.0 * h),
            2 => (-v(-2) + 16.0 * v(-1) - 30.0 * v(0) + 16.0 * v(1) - v(2)) / (12.0 * h * h),
            3 => (v(-3) - 8.0 * v(-2) + 13.0 * v(-1) - 13.0 * v(1) + 8.0 * v(2) - v(3))
                / (8.0 * h.powi(3)),
            4 => (-v(-3) + 12.0 * v(-2) - 39.0 * v(-1) + 56.0 * v(0) - 39.0 * v(1) + 12.0 * v(2)
                - v(3))
                / (6.0 * h.powi(4)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn jet_matches_difference_quotients() {
        let expr = |t: f64| (t * t + 0.3).ln() * (2.0 * t).sin() + (-(t)).exp() / (t + 2.0);
        let jexpr = |t: Jet| {
            (t * t + 0.3).ln() * (t * 2.0).sin() + (-t).exp() / (t + 2.0)
        };
        let t0 = 0.7;
        let j = jexpr(Jet::variable(t0));
        for k in 1..=4 {
            let want = fd4(expr, t0, k);
            let got = j.d[k];
            assert!(
                (got - want).abs() < 1e-5 * want.abs().max(1.0),
                "k={k}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn monomial_jets_at_origin() {
        let j = Jet::variable(0.0).powf(3.0);
        assert_eq!(j.d, [0.0, 0.0, 0.0, 6.0, 0.0]);
        let j = Jet::variable(0.0).powi(2);
        assert_eq!(j.d, [0.0, 0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn quotient_and_power_consistency() {
        let t = Jet::variable(1.3);
        let a = t.powf(-2.0);
        let b = Jet::constant(1.0) / (t * t);
        for k in 0..5 {
            assert!((a.d[k] - b.d[k]).abs() < 1e-12 * b.d[k].abs().max(1.0));
        }
    }
}
