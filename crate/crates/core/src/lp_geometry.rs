//! Lp-ball geometry: norms, dual exponents, Euclidean projections and the closed-form
//! linear maximization oracle used by Frank-Wolfe.
//!
//! All routines act on a single example (one flat slice). Batched callers apply them row
//! by row. Accumulation is done in f64 regardless of the element type.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

/// Norm order of an attack ball.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Norm {
    L1,
    L2,
    /// Finite `p > 1`, `p != 2`.
    Lp(f64),
    Linf,
}

impl Norm {
    /// Canonical form: `Lp(1)` becomes `L1`, `Lp(2)` becomes `L2`, `Lp(inf)` becomes `Linf`.
    pub fn from_p(p: f64) -> Result<Self> {
        if p.is_nan() || p < 1.0 {
            return Err(Error::InvalidArgument(format!("norm order must be >= 1, got {p}")));
        }
        Ok(if p == 1.0 {
            Norm::L1
        } else if p == 2.0 {
            Norm::L2
        } else if p.is_infinite() {
            Norm::Linf
        } else {
            Norm::Lp(p)
        })
    }

    pub fn p(self) -> f64 {
        match self {
            Norm::L1 => 1.0,
            Norm::L2 => 2.0,
            Norm::Lp(p) => p,
            Norm::Linf => f64::INFINITY,
        }
    }

    /// Dual norm with `1/p + 1/q = 1`.
    pub fn dual(self) -> Norm {
        match self {
            Norm::L1 => Norm::Linf,
            Norm::L2 => Norm::L2,
            Norm::Lp(p) => Norm::Lp(dual_q(p)),
            Norm::Linf => Norm::L1,
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Norm::L1 => f.write_str("l1"),
            Norm::L2 => f.write_str("l2"),
            Norm::Lp(p) => write!(f, "lp:{p}"),
            Norm::Linf => f.write_str("linf"),
        }
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            "linf" | "inf" => Ok(Norm::Linf),
            other => {
                let p = other
                    .strip_prefix("lp:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("unknown norm '{s}' (l1, l2, lp:<p>, linf)"))
                    })?;
                Norm::from_p(p)
            }
        }
    }
}

impl TryFrom<String> for Norm {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Norm> for String {
    fn from(n: Norm) -> String {
        n.to_string()
    }
}

/// Constraint set `B_p(eps)` plus the input-domain box used when materializing images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub norm: Norm,
    pub eps: f64,
    /// Per-coordinate `[lo, hi]` bounds applied to `x + delta` after optimization.
    pub clamp_box: Option<(f64, f64)>,
}

impl AttackBudget {
    /// Budget in the `[0, 1]` pixel domain.
    pub fn new(norm: Norm, eps: f64) -> Result<Self> {
        let b = AttackBudget { norm, eps, clamp_box: Some((0.0, 1.0)) };
        b.validate()?;
        Ok(b)
    }

    pub fn unclamped(norm: Norm, eps: f64) -> Result<Self> {
        let b = AttackBudget { norm, eps, clamp_box: None };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err(Error::InvalidArgument(format!("eps must be finite and >= 0, got {}", self.eps)));
        }
        if let Norm::Lp(p) = self.norm {
            if !(p > 1.0 && p.is_finite()) {
                return Err(Error::InvalidArgument(format!("invalid norm order {p}")));
            }
        }
        if let Some((lo, hi)) = self.clamp_box {
            if !(lo < hi) {
                return Err(Error::InvalidArgument(format!("empty clamp box [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn contains<T: Scalar>(&self, delta: &[T], rel_tol: f64) -> bool {
        lp_norm(delta, self.norm) <= self.eps * (1.0 + rel_tol) + f64::MIN_POSITIVE
    }
}

/// Dual exponent `q` with `1/p + 1/q = 1`.
pub fn dual_q(p: f64) -> f64 {
    if p == 1.0 {
        f64::INFINITY
    } else if p.is_infinite() {
        1.0
    } else {
        p / (p - 1.0)
    }
}

pub fn lp_norm<T: Scalar>(v: &[T], norm: Norm) -> f64 {
    match norm {
        Norm::L1 => v.iter().map(|x| x.as_f64().abs()).sum(),
        Norm::L2 => v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt(),
        Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.as_f64().abs())),
        Norm::Lp(p) => {
            // Scale by the max entry so large p cannot overflow.
            let m = v.iter().fold(0.0f64, |m, x| m.max(x.as_f64().abs()));
            if m == 0.0 {
                return 0.0;
            }
            m * v.iter().map(|x| (x.as_f64().abs() / m).powf(p)).sum::<f64>().powf(1.0 / p)
        }
    }
}

/// Euclidean projection onto `B_p(eps)` for `p` in {2, inf}.
pub fn project_ball<T: Scalar>(z: &[T], budget: &AttackBudget) -> Result<Vec<T>> {
    let eps = budget.eps;
    match budget.norm {
        Norm::L2 => {
            let n = lp_norm(z, Norm::L2);
            // A rescaled point can land a few ulps outside; treat it as on the sphere so
            // projection stays idempotent bit for bit.
            if n <= eps * (1.0 + 8.0 * T::epsilon().as_f64()) {
                Ok(z.to_vec())
            } else {
                let c = eps / n;
                Ok(z.iter().map(|&v| T::of(v.as_f64() * c)).collect())
            }
        }
        Norm::Linf => {
            let e = T::of(eps);
            Ok(z.iter().map(|&v| v.max(-e).min(e)).collect())
        }
        other => Err(Error::UnsupportedNorm { op: "project_ball", norm: other.to_string() }),
    }
}

/// Result of the linear maximization oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleOutput<T> {
    pub s: Vec<T>,
    /// Set when the gradient is identically zero; `s` is then the zero vector.
    pub degenerate: bool,
}

/// `argmax_{||s||_p <= eps} s · grad`.
///
/// For finite `p > 1` the maximizer is `alpha * sgn(g_i) |g_i|^(q/p)` with `alpha` chosen so
/// that `||s||_p = eps`; this attains Hölder's bound `s · g = eps ||g||_q`. The exponent
/// is `q/p = 1/(p-1)`: zero for `p = inf` (signed gradient), one for `p = 2`.
/// For `p = inf`, `sgn(0) = +1`. For `p = 1`, ties in `|g_i|` go to the lowest index.
pub fn fw_oracle<T: Scalar>(grad: &[T], budget: &AttackBudget) -> OracleOutput<T> {
    let eps = budget.eps;
    let zero = || OracleOutput { s: vec![T::zero(); grad.len()], degenerate: true };
    let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.as_f64().abs()));
    if gmax == 0.0 {
        return zero();
    }
    let s = match budget.norm {
        Norm::Linf => grad
            .iter()
            .map(|&g| if g.as_f64() < 0.0 { T::of(-eps) } else { T::of(eps) })
            .collect(),
        Norm::L1 => {
            let mut best = 0;
            for (i, g) in grad.iter().enumerate() {
                if g.as_f64().abs() > grad[best].as_f64().abs() {
                    best = i;
                }
            }
            let mut s = vec![T::zero(); grad.len()];
            s[best] = T::of(eps * grad[best].as_f64().signum());
            s
        }
        Norm::L2 => {
            // Normalize by the max entry first so squares cannot overflow.
            let n = gmax * grad.iter().map(|g| (g.as_f64() / gmax).powi(2)).sum::<f64>().sqrt();
            grad.iter().map(|&g| T::of(eps * g.as_f64() / n)).collect()
        }
        Norm::Lp(p) => {
            let expo = 1.0 / (p - 1.0);
            let raw: Vec<f64> = grad
                .iter()
                .map(|g| {
                    let u = g.as_f64() / gmax;
                    u.signum() * u.abs().powf(expo)
                })
                .collect();
            let n = lp_norm(&raw, Norm::Lp(p));
            raw.iter().map(|&r| T::of(eps * r / n)).collect()
        }
    };
    OracleOutput { s, degenerate: false }
}
