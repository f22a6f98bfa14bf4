//! Jacobians of a per-row vector field with respect to per-row 3-D inputs.
//!
//! The field is usually a normalized gradient that was itself recorded with
//! [`Tape::grad`], which makes these second derivatives of the scalar
//! function that produced it.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Reduction applied to the 3×3 Jacobian of a vector field.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivMode {
    /// Full Jacobian; its Frobenius norm is the rotation-invariant magnitude.
    #[default]
    JacobianFrobenius,
    /// `Jᵀ·1`, the vector a reverse pass seeded with ones produces.
    VjpOnes,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SecondDerivative {
    Jacobian([[f64; 3]; 3]),
    Vjp([f64; 3]),
}

impl SecondDerivative {
    /// Frobenius norm of the Jacobian, or L2 norm of the reduced vector.
    pub fn magnitude(&self) -> f64 {
        match self {
            SecondDerivative::Jacobian(j) => j.iter().flatten().map(|x| x * x).sum::<f64>().sqrt(),
            SecondDerivative::Vjp(v) => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }
}

/// `J[n][i][j] = ∂out[n,i] / ∂input[n,j]`, assuming row `n` of `out` depends
/// only on row `n` of `input`.
pub fn row_jacobians(tape: &mut Tape, out: Var, input: Var) -> Result<Vec<[[f64; 3]; 3]>> {
    let (so, si) = (tape.shape(out), tape.shape(input));
    if so.cols != 3 || si.cols != 3 || so.rows != si.rows {
        return Err(Error::Shape(format!(
            "row jacobian needs matching [n,3] output and input, got {so} and {si}"
        )));
    }
    let mut jac = vec![[[0.0; 3]; 3]; so.rows];
    for i in 0..3 {
        let comp = tape.slice_cols(out, i, 1)?;
        let s = tape.sum(comp)?;
        let g = tape.gradient(s, &[input])?.remove(0);
        for (n, j) in jac.iter_mut().enumerate() {
            j[i].copy_from_slice(g.row_slice(n));
        }
    }
    Ok(jac)
}

/// Second derivative of each row of `out` (a 3-vector field) wrt `input`.
pub fn second_derivative(
    tape: &mut Tape,
    out: Var,
    input: Var,
    mode: DerivMode,
) -> Result<Vec<SecondDerivative>> {
    let jac = row_jacobians(tape, out, input)?;
    Ok(jac
        .into_iter()
        .map(|j| match mode {
            DerivMode::JacobianFrobenius => SecondDerivative::Jacobian(j),
            DerivMode::VjpOnes => {
                let mut v = [0.0; 3];
                for row in &j {
                    for (c, x) in row.iter().enumerate() {
                        v[c] += x;
                    }
                }
                SecondDerivative::Vjp(v)
            }
        })
        .collect())
}
