//! The state family `alpha|HH> + sign * beta|VV>` and simple state functionals.

use serde::{Deserialize, Serialize};

use crate::error::{check_range, Error, Result};
use crate::qmat::{herm_eig, psd_sqrt, ComplexMatrix, DensityMatrix, C64, ONE, ZERO};
use crate::tol;

pub const HH: usize = 0;
pub const HV: usize = 1;
pub const VH: usize = 2;
pub const VV: usize = 3;

/// Relative sign between the `HH` and `VV` amplitudes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Sign {
    Plus,
    #[default]
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

impl TryFrom<i8> for Sign {
    type Error = String;
    fn try_from(v: i8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Sign::Plus),
            -1 => Ok(Sign::Minus),
            other => Err(format!("sign must be +1 or -1, got {other}")),
        }
    }
}

impl From<Sign> for i8 {
    fn from(s: Sign) -> i8 {
        match s {
            Sign::Plus => 1,
            Sign::Minus => -1,
        }
    }
}

/// Real amplitudes of `alpha|HH> + sign * beta|VV>`, with `beta = sqrt(1 - alpha^2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct StateParams {
    alpha: f64,
    beta: f64,
    sign: Sign,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    alpha: f64,
    #[serde(default)]
    sign: Sign,
}

impl TryFrom<RawParams> for StateParams {
    type Error = Error;
    fn try_from(r: RawParams) -> Result<Self> {
        StateParams::new(r.alpha, r.sign)
    }
}

impl From<StateParams> for RawParams {
    fn from(p: StateParams) -> Self {
        RawParams {
            alpha: p.alpha,
            sign: p.sign,
        }
    }
}

impl StateParams {
    pub fn new(alpha: f64, sign: Sign) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::InvalidState(format!(
                "alpha = {alpha} is not finite"
            )));
        }
        check_range("alpha", alpha, 0.0, 1.0)?;
        let beta = (1.0 - alpha * alpha).max(0.0).sqrt();
        Ok(Self { alpha, beta, sign })
    }

    /// The default minus-sign member of the family.
    pub fn with_alpha(alpha: f64) -> Result<Self> {
        Self::new(alpha, Sign::Minus)
    }

    /// `(|HH> - |VV>) / sqrt(2)`.
    pub fn bell() -> Self {
        Self::with_alpha(std::f64::consts::FRAC_1_SQRT_2).expect("valid alpha")
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn sign(&self) -> Sign {
        self.sign
    }

    pub fn ket(&self) -> [C64; 4] {
        [
            C64::new(self.alpha, 0.0),
            ZERO,
            ZERO,
            C64::new(self.sign.value() * self.beta, 0.0),
        ]
    }
}

pub fn make_state(params: &StateParams) -> DensityMatrix {
    DensityMatrix::from_pure(&params.ket()).expect("normalized family state")
}

/// Computational basis state `|index><index|`.
pub fn basis_state(index: usize) -> DensityMatrix {
    DensityMatrix::new(ComplexMatrix::unit(4, index, index)).expect("basis projector")
}

/// Product of two single-qubit pure states.
pub fn product_state(a: [C64; 2], b: [C64; 2]) -> Result<DensityMatrix> {
    let n = (a[0].norm_sqr() + a[1].norm_sqr()) * (b[0].norm_sqr() + b[1].norm_sqr());
    if (n - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidState(format!("product ket has norm^2 {n}")));
    }
    DensityMatrix::from_pure(&[a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1]])
}

fn require_normalized(rho: &DensityMatrix) -> Result<()> {
    if rho.is_normalized() {
        Ok(())
    } else {
        Err(Error::NotNormalized { trace: rho.trace() })
    }
}

/// `Tr(rho^2)` of a trace-one state.
pub fn purity(rho: &DensityMatrix) -> Result<f64> {
    require_normalized(rho)?;
    let m = rho.matrix();
    // Tr(rho rho) = sum |rho_ij|^2 for Hermitian rho.
    Ok(m.entries().iter().map(|z| z.norm_sqr()).sum())
}

/// Scales a (possibly post-selected) state to unit trace.
pub fn renormalize(rho: &DensityMatrix) -> Result<DensityMatrix> {
    let t = rho.trace();
    if t <= tol::TRACE_FLOOR {
        return Err(Error::PostSelectedAway { trace: t });
    }
    if t == 1.0 {
        return Ok(rho.clone());
    }
    DensityMatrix::new(rho.matrix().scale_real(1.0 / t))
}

/// Uhlmann fidelity `(Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2`.
pub fn fidelity(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    require_normalized(rho)?;
    require_normalized(sigma)?;
    let s = psd_sqrt(rho.matrix())?;
    let inner = (&(&s * sigma.matrix()) * &s).hermitian_part();
    let eig = herm_eig(&inner)?;
    let root: f64 = eig.values.iter().map(|&x| x.max(0.0).sqrt()).sum();
    Ok((root * root).min(1.0))
}

/// Reduced state of one qubit (`which` = 0 keeps the first qubit).
pub fn partial_trace(rho: &DensityMatrix, which: usize) -> ComplexMatrix {
    let m = rho.matrix();
    let mut out = ComplexMatrix::zeros(2, 2);
    for a in 0..2 {
        for b in 0..2 {
            let mut acc = ZERO;
            for k in 0..2 {
                let (r, c) = if which == 0 {
                    (2 * a + k, 2 * b + k)
                } else {
                    (2 * k + a, 2 * k + b)
                };
                acc += m[(r, c)];
            }
            out[(a, b)] = acc;
        }
    }
    out
}

/// Single-qubit kets used throughout: `H, V, D, A, R, L`.
pub fn qubit_ket(label: char) -> Option<[C64; 2]> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let r = |x: f64| C64::new(x, 0.0);
    Some(match label {
        'H' => [ONE, ZERO],
        'V' => [ZERO, ONE],
        'D' => [r(h), r(h)],
        'A' => [r(h), r(-h)],
        'R' => [r(h), C64::new(0.0, -h)],
        'L' => [r(h), C64::new(0.0, h)],
        _ => return None,
    })
}
