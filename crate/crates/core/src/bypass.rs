//! Bounded-gradient bypass functions for the shortcut path of a residual
//! unit.
//!
//! | kind       | value                         | derivative     | derivative range |
//! |------------|-------------------------------|----------------|------------------|
//! | `identity` | `x`                           | `1`            | `{1}`            |
//! | `h1`       | `x − ln(eˣ + 1)`              | `1 / (1 + eˣ)` | `(0, 1)`         |
//! | `h2`       | `x·atan(x) − ½·ln(x² + 1)`    | `atan(x)`      | `(−π/2, π/2)`    |
//! | `h3`       | `atan(x)`                     | `1 / (1 + x²)` | `(0, 1]`         |

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `f64` strictly below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BypassKind {
    Identity,
    H1,
    H2,
    #[default]
    H3,
}

impl BypassKind {
    pub const ALL: [BypassKind; 4] = [
        BypassKind::Identity,
        BypassKind::H1,
        BypassKind::H2,
        BypassKind::H3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BypassKind::Identity => "identity",
            BypassKind::H1 => "h1",
            BypassKind::H2 => "h2",
            BypassKind::H3 => "h3",
        }
    }

    /// Supremum of `|H'|` over the real line.
    pub fn derivative_bound(self) -> f64 {
        match self {
            BypassKind::H2 => FRAC_PI_2,
            _ => 1.0,
        }
    }

    /// `H(x)`, without input validation. Used by the elementwise tensor op,
    /// whose inputs are already checked for finiteness.
    pub(crate) fn value_unchecked(self, x: f64) -> f64 {
        match self {
            BypassKind::Identity => x,
            // x − ln(1 + eˣ) == −ln(1 + e⁻ˣ); pick the branch whose exponent
            // cannot overflow.
            BypassKind::H1 => {
                if x > 0.0 {
                    -(-x).exp().ln_1p()
                } else {
                    x - x.exp().ln_1p()
                }
            }
            BypassKind::H2 => x * x.atan() - half_log_one_plus_square(x),
            BypassKind::H3 => x.atan(),
        }
    }

    pub(crate) fn derivative_unchecked(self, x: f64) -> f64 {
        match self {
            BypassKind::Identity => 1.0,
            // 1/(1+eˣ) leaves the open unit interval in f64 once eˣ falls
            // below half an ulp of 1 or overflows; round toward the interior.
            BypassKind::H1 => {
                let d = if x > 0.0 {
                    let e = (-x).exp();
                    e / (1.0 + e)
                } else {
                    1.0 / (1.0 + x.exp())
                };
                d.clamp(f64::MIN_POSITIVE, BELOW_ONE)
            }
            BypassKind::H2 => x.atan(),
            BypassKind::H3 => 1.0 / x.mul_add(x, 1.0),
        }
    }
}

/// `½·ln(1 + x²)` without overflowing for large `|x|`.
fn half_log_one_plus_square(x: f64) -> f64 {
    let a = x.abs();
    if a < 1e150 {
        0.5 * (a * a).ln_1p()
    } else {
        a.ln()
    }
}

impl fmt::Display for BypassKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BypassKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(BypassKind::Identity),
            "h1" => Ok(BypassKind::H1),
            "h2" => Ok(BypassKind::H2),
            "h3" => Ok(BypassKind::H3),
            other => Err(Error::Config(format!(
                "unknown bypass kind {other:?} (expected identity, h1, h2 or h3)"
            ))),
        }
    }
}

fn check_finite(op: &'static str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::contract(op, format!("input {x} is not finite")))
    }
}

/// Evaluates `H_kind(x)`.
pub fn bypass_eval(kind: BypassKind, x: f64) -> Result<f64> {
    check_finite("bypass_eval", x)?;
    Ok(kind.value_unchecked(x))
}

/// Evaluates `H'_kind(x)`.
pub fn bypass_grad(kind: BypassKind, x: f64) -> Result<f64> {
    check_finite("bypass_grad", x)?;
    Ok(kind.derivative_unchecked(x))
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_4, LN_2};

    use approx::assert_abs_diff_eq;

    use super::*;

    #[test]
    fn point_values() {
        assert_eq!(bypass_eval(BypassKind::H3, 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(bypass_eval(BypassKind::H1, 0.0).unwrap(), -LN_2, epsilon = 1e-15);
        // π/4 − ½·ln 2
        assert_abs_diff_eq!(
            bypass_eval(BypassKind::H2, 1.0).unwrap(),
            0.438_824_573_117_476_1,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            bypass_eval(BypassKind::H2, 1.0).unwrap(),
            FRAC_PI_4 - 0.5 * LN_2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn point_derivatives() {
        assert_eq!(bypass_grad(BypassKind::H3, 0.0).unwrap(), 1.0);
        assert_eq!(bypass_grad(BypassKind::H1, 0.0).unwrap(), 0.5);
        assert_eq!(bypass_grad(BypassKind::H2, 0.0).unwrap(), 0.0);
        assert_eq!(bypass_grad(BypassKind::Identity, 123.0).unwrap(), 1.0);
    }

    #[test]
    fn h1_does_not_overflow() {
        let hi = bypass_eval(BypassKind::H1, 750.0).unwrap();
        let lo = bypass_eval(BypassKind::H1, -750.0).unwrap();
        assert!(hi.is_finite() && lo.is_finite());
        assert_abs_diff_eq!(lo, -750.0, epsilon = 1e-12);
        assert!(hi <= 0.0 && hi > -1e-300);
    }

    #[test]
    fn extreme_inputs_keep_derivative_bounds() {
        for x in [-1e8, 1e8, -750.0, 750.0] {
            let d1 = bypass_grad(BypassKind::H1, x).unwrap();
            assert!(d1 > 0.0 && d1 < 1.0, "H1'({x}) = {d1}");
            let d2 = bypass_grad(BypassKind::H2, x).unwrap();
            assert!(d2.abs() < FRAC_PI_2);
            let d3 = bypass_grad(BypassKind::H3, x).unwrap();
            assert!(d3 > 0.0 && d3 <= 1.0);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        for kind in BypassKind::ALL {
            assert!(bypass_eval(kind, f64::NAN).is_err());
            assert!(bypass_grad(kind, f64::INFINITY).is_err());
        }
    }

    #[test]
    fn names_round_trip() {
        for kind in BypassKind::ALL {
            assert_eq!(kind.name().parse::<BypassKind>().unwrap(), kind);
        }
        assert!("H3".parse::<BypassKind>().is_err());
        assert_eq!(BypassKind::default(), BypassKind::H3);
    }
}
