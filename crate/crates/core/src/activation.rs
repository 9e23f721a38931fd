use alloc::format;
use core::fmt;
use core::str::FromStr;

use crate::error::Error;
use crate::matrix::Matrix;

/// Elementwise nonlinearity applied to hidden layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
    Rectifier,
    Identity,
}

impl ActivationKind {
    #[inline]
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => 1.0 / (1.0 + libm::exp(-x)),
            ActivationKind::Tanh => libm::tanh(x),
            ActivationKind::Rectifier => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            ActivationKind::Identity => x,
        }
    }

    /// Derivative expressed in terms of the activation output `y = f(x)`.
    /// For the rectifier the subgradient at 0 is taken as 0.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => y * (1.0 - y),
            ActivationKind::Tanh => 1.0 - y * y,
            ActivationKind::Rectifier => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Rectifier => "rectifier",
            ActivationKind::Identity => "identity",
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "tanh" => Ok(ActivationKind::Tanh),
            "rectifier" | "relu" => Ok(ActivationKind::Rectifier),
            "identity" | "linear" => Ok(ActivationKind::Identity),
            other => Err(Error::Parse {
                what: "activation",
                position: 0,
                message: format!("unknown activation '{other}'"),
            }),
        }
    }
}

/// Applies the activation elementwise; the shape is preserved.
pub fn apply_activation(kind: ActivationKind, m: &Matrix) -> Matrix {
    m.map(|x| kind.apply_scalar(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn definition_points() {
        assert_eq!(ActivationKind::Sigmoid.apply_scalar(0.0), 0.5);
        assert_eq!(ActivationKind::Tanh.apply_scalar(0.0), 0.0);
        assert_eq!(ActivationKind::Rectifier.apply_scalar(-3.2), 0.0);
        assert_eq!(ActivationKind::Rectifier.apply_scalar(3.2), 3.2);
        assert_eq!(ActivationKind::Identity.apply_scalar(-7.5), -7.5);
    }

    #[test]
    fn parse_rejects_unknown() {
        assert!("sigmoid".parse::<ActivationKind>().is_ok());
        assert!("softplus".parse::<ActivationKind>().is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        for kind in [
            ActivationKind::Sigmoid,
            ActivationKind::Tanh,
            ActivationKind::Rectifier,
            ActivationKind::Identity,
        ] {
            for x in [-2.0, -0.7, 0.3, 1.9] {
                let y = kind.apply_scalar(x);
                let num = (kind.apply_scalar(x + h) - kind.apply_scalar(x - h)) / (2.0 * h);
                let ana = kind.derivative_from_output(y);
                assert!(
                    (num - ana).abs() < 1e-6,
                    "{kind} at {x}: numeric {num} vs analytic {ana}"
                );
            }
        }
    }
}
