//! Kraus channels: single-qubit amplitude damping, its two-qubit product, the
//! correlated post-selected damping channel and the local NOT.

use serde::{Deserialize, Serialize};

use crate::error::{check_range, Error, Result};
use crate::qmat::{herm_eig, kron, pauli_x, ComplexMatrix, DensityMatrix, C64};
use crate::tol;

/// Default ceiling on the number of operators `compose` may produce.
pub const COMPOSE_CAP: usize = 64;

/// Ordered Kraus operators together with `I - sum K^dagger K`.
#[derive(Clone, Debug, PartialEq)]
pub struct KrausChannel {
    label: String,
    dim: usize,
    operators: Vec<ComplexMatrix>,
    deficit: ComplexMatrix,
}

impl KrausChannel {
    /// Validates shapes and that the channel does not increase trace.
    pub fn new(label: impl Into<String>, operators: Vec<ComplexMatrix>) -> Result<Self> {
        let first = operators
            .first()
            .ok_or_else(|| Error::InvalidConfig("a channel needs at least one operator".into()))?;
        let dim = first.rows();
        for k in &operators {
            if k.rows() != dim || k.cols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: format!("{dim}x{dim}"),
                    found: format!("{}x{}", k.rows(), k.cols()),
                });
            }
            if !k.is_finite() {
                return Err(Error::NonFinite);
            }
        }
        let mut sum = ComplexMatrix::zeros(dim, dim);
        for k in &operators {
            sum = &sum + &(&k.adjoint() * k);
        }
        let deficit = (&ComplexMatrix::identity(dim) - &sum).hermitian_part();
        let min = herm_eig(&deficit)?.values[dim - 1];
        if min < -tol::PSD_SLACK {
            return Err(Error::Unphysical(format!(
                "channel increases trace (deficit eigenvalue {min:e})"
            )));
        }
        Ok(Self {
            label: label.into(),
            dim,
            operators,
            deficit,
        })
    }

    /// Shape checks only. Used for imperfect optical trains, whose first-order
    /// component matrices are not exactly contractive.
    pub fn new_unchecked(label: impl Into<String>, operators: Vec<ComplexMatrix>) -> Result<Self> {
        let first = operators
            .first()
            .ok_or_else(|| Error::InvalidConfig("a channel needs at least one operator".into()))?;
        let dim = first.rows();
        if let Some(k) = operators
            .iter()
            .find(|k| k.rows() != dim || k.cols() != dim)
        {
            return Err(Error::DimensionMismatch {
                expected: format!("{dim}x{dim}"),
                found: format!("{}x{}", k.rows(), k.cols()),
            });
        }
        let mut sum = ComplexMatrix::zeros(dim, dim);
        for k in &operators {
            sum = &sum + &(&k.adjoint() * k);
        }
        let deficit = (&ComplexMatrix::identity(dim) - &sum).hermitian_part();
        Ok(Self {
            label: label.into(),
            dim,
            operators,
            deficit,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn operators(&self) -> &[ComplexMatrix] {
        &self.operators
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    /// `I - sum K^dagger K`.
    pub fn deficit(&self) -> &ComplexMatrix {
        &self.deficit
    }

    /// Largest entry of the completeness deficit.
    pub fn deficit_norm(&self) -> f64 {
        self.deficit.max_abs()
    }

    pub fn is_trace_preserving(&self) -> bool {
        self.deficit_norm() <= tol::ALGEBRAIC
    }

    /// `sum K M K^dagger` on an arbitrary square matrix.
    pub fn apply_matrix(&self, m: &ComplexMatrix) -> ComplexMatrix {
        let mut out = ComplexMatrix::zeros(self.dim, self.dim);
        for k in &self.operators {
            out = &out + &m.conjugate_by(k);
        }
        out
    }
}

/// The coincidence factor of the delayed cross branches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMismatch", into = "RawMismatch")]
pub enum TemporalMismatch {
    /// Delay shorter than the coincidence window: `Re(sqrt z) = 1`.
    Overlapping,
    /// Delay longer than the window: `Re(sqrt z) = 0`, cross branches are lost.
    #[default]
    Separated,
    /// Exploratory `z = exp(-i chi)` with amplitude factor `cos(chi / 2)`.
    Phase { chi: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawMismatch {
    Binary(u8),
    Phase { chi: f64 },
}

impl TryFrom<RawMismatch> for TemporalMismatch {
    type Error = String;
    fn try_from(r: RawMismatch) -> std::result::Result<Self, String> {
        match r {
            RawMismatch::Binary(0) => Ok(TemporalMismatch::Separated),
            RawMismatch::Binary(1) => Ok(TemporalMismatch::Overlapping),
            RawMismatch::Binary(v) => Err(format!("z must be 0 or 1, got {v}")),
            RawMismatch::Phase { chi } if chi.is_finite() => Ok(TemporalMismatch::Phase { chi }),
            RawMismatch::Phase { chi } => Err(format!("chi = {chi} is not finite")),
        }
    }
}

impl From<TemporalMismatch> for RawMismatch {
    fn from(z: TemporalMismatch) -> Self {
        match z {
            TemporalMismatch::Overlapping => RawMismatch::Binary(1),
            TemporalMismatch::Separated => RawMismatch::Binary(0),
            TemporalMismatch::Phase { chi } => RawMismatch::Phase { chi },
        }
    }
}

impl TemporalMismatch {
    /// `Re(sqrt z)`.
    pub fn factor(self) -> f64 {
        match self {
            TemporalMismatch::Overlapping => 1.0,
            TemporalMismatch::Separated => 0.0,
            TemporalMismatch::Phase { chi } => (chi / 2.0).cos(),
        }
    }

    pub fn is_binary(self) -> bool {
        !matches!(self, TemporalMismatch::Phase { .. })
    }

    /// Short tag used in file names and reports.
    pub fn tag(self) -> String {
        match self {
            TemporalMismatch::Overlapping => "z1".into(),
            TemporalMismatch::Separated => "z0".into(),
            TemporalMismatch::Phase { chi } => format!("chi{chi:.4}"),
        }
    }
}

/// Single-qubit amplitude damping: `diag(1, sqrt(1-P))` and `sqrt(P)|H><V|`.
pub fn standard_adc_kraus(p: f64) -> Result<KrausChannel> {
    check_range("P", p, 0.0, 1.0)?;
    let a1 = ComplexMatrix::diag_real(&[1.0, (1.0 - p).sqrt()]);
    let a2 = ComplexMatrix::unit(2, 0, 1).scale_real(p.sqrt());
    KrausChannel::new(format!("adc(P={p})"), vec![a1, a2])
}

/// `{K_i (x) K_j}` for a trace-preserving single-qubit channel.
pub fn product_channel(c: &KrausChannel) -> Result<KrausChannel> {
    if c.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: "single-qubit channel".into(),
            found: format!("{0}x{0}", c.dim()),
        });
    }
    if !c.is_trace_preserving() {
        return Err(Error::NotTracePreserving {
            deficit: c.deficit_norm(),
        });
    }
    tensor(c, c)
}

/// `{A_i (x) B_j}` for two single-qubit channels.
pub fn tensor(a: &KrausChannel, b: &KrausChannel) -> Result<KrausChannel> {
    let mut ops = Vec::with_capacity(a.len() * b.len());
    for ka in a.operators() {
        for kb in b.operators() {
            ops.push(kron(ka, kb)?);
        }
    }
    KrausChannel::new(format!("{}(x){}", a.label(), b.label()), ops)
}

/// Product damping channel at strength `P` on both qubits.
pub fn product_adc(p: f64) -> Result<KrausChannel> {
    product_channel(&standard_adc_kraus(p)?)
}

/// Correlated damping channel.
///
/// Operators are `A_i (x) A_j` with the mismatch factor on the cross terms
/// `i != j`; with `embed_not` they are additionally left-multiplied by the
/// two-qubit flip, which is the published operator set. Operators that vanish
/// identically are dropped.
pub fn correlated_adc_kraus(p: f64, z: TemporalMismatch, embed_not: bool) -> Result<KrausChannel> {
    check_range("p", p, 0.0, 1.0)?;
    let adc = standard_adc_kraus(p)?;
    let a = adc.operators();
    let zf = z.factor();
    let flip = not_unitary();
    let mut ops = Vec::with_capacity(4);
    for i in 0..2 {
        for j in 0..2 {
            let mut k = kron(&a[i], &a[j])?;
            if i != j {
                k = k.scale_real(zf);
            }
            if embed_not {
                k = &flip * &k;
            }
            if k.max_abs() > 0.0 {
                ops.push(k);
            }
        }
    }
    let tag = if embed_not { "+not" } else { "" };
    KrausChannel::new(format!("correlated(p={p},{}){tag}", z.tag()), ops)
}

/// `sigma_x (x) sigma_x`.
pub fn not_unitary() -> ComplexMatrix {
    let x = pauli_x();
    kron(&x, &x).expect("4x4")
}

pub fn not_channel() -> KrausChannel {
    KrausChannel::new("not", vec![not_unitary()]).expect("unitary channel")
}

pub fn identity_channel(dim: usize) -> KrausChannel {
    KrausChannel::new("identity", vec![ComplexMatrix::identity(dim)]).expect("identity")
}

/// Output of a channel, with the trace it had before any renormalization.
#[derive(Clone, Debug)]
pub struct ChannelOutput {
    pub state: DensityMatrix,
    pub trace_before: f64,
}

/// `sum K rho K^dagger`, rescaled to unit trace when `renorm` is set.
pub fn apply_channel(rho: &DensityMatrix, c: &KrausChannel, renorm: bool) -> Result<DensityMatrix> {
    apply_channel_traced(rho, c, renorm).map(|o| o.state)
}

pub fn apply_channel_traced(
    rho: &DensityMatrix,
    c: &KrausChannel,
    renorm: bool,
) -> Result<ChannelOutput> {
    if c.dim() != 4 {
        return Err(Error::DimensionMismatch {
            expected: "two-qubit channel".into(),
            found: format!("{0}x{0}", c.dim()),
        });
    }
    let out = c.apply_matrix(rho.matrix()).hermitian_part();
    let trace = out.trace().re;
    if trace <= tol::TRACE_FLOOR {
        return Err(Error::PostSelectedAway { trace });
    }
    let m = if renorm {
        out.scale_real(1.0 / trace)
    } else {
        out
    };
    Ok(ChannelOutput {
        state: DensityMatrix::new(m)?,
        trace_before: trace,
    })
}

/// Sequential composition: `second` after `first`, operators `{K2_j K1_i}`.
pub fn compose(first: &KrausChannel, second: &KrausChannel) -> Result<KrausChannel> {
    compose_with_cap(first, second, COMPOSE_CAP)
}

pub fn compose_with_cap(
    first: &KrausChannel,
    second: &KrausChannel,
    cap: usize,
) -> Result<KrausChannel> {
    if first.dim() != second.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("{0}x{0}", first.dim()),
            found: format!("{0}x{0}", second.dim()),
        });
    }
    let count = first.len() * second.len();
    if count > cap {
        return Err(Error::TooManyOperators { count, cap });
    }
    let mut ops = Vec::with_capacity(count);
    for k2 in second.operators() {
        for k1 in first.operators() {
            ops.push(k2 * k1);
        }
    }
    KrausChannel::new(format!("{}∘{}", second.label(), first.label()), ops)
}

/// Largest entry-wise difference between the actions of two channels on the
/// matrix units `|i><j|`, which span every input.
pub fn channel_distance(a: &KrausChannel, b: &KrausChannel) -> f64 {
    if a.dim() != b.dim() {
        return f64::INFINITY;
    }
    let n = a.dim();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let e = ComplexMatrix::unit(n, i, j);
            worst = worst.max(a.apply_matrix(&e).max_abs_diff(&b.apply_matrix(&e)));
        }
    }
    worst
}

/// Operator rotated so that its largest-magnitude entry is real and positive.
/// Entries tied for largest (within 1e-9 relative) resolve to the first in row-major order.
pub fn align_phase(k: &ComplexMatrix) -> ComplexMatrix {
    let max = k.max_abs();
    if max == 0.0 {
        return k.clone();
    }
    let pivot = k
        .entries()
        .iter()
        .find(|z| z.norm() >= max * (1.0 - 1e-9))
        .copied()
        .expect("a maximal entry exists");
    k.scale((pivot / pivot.norm()).conj())
}

/// Largest entry-wise deviation between two Kraus sets after phase alignment,
/// ignoring operators below `1e-14` and matching operators greedily by distance.
/// Returns infinity when the non-zero operator counts differ.
pub fn kraus_set_deviation(a: &[ComplexMatrix], b: &[ComplexMatrix]) -> f64 {
    let keep = |ops: &[ComplexMatrix]| -> Vec<ComplexMatrix> {
        ops.iter()
            .filter(|k| k.max_abs() > 1e-14)
            .map(align_phase)
            .collect()
    };
    let (a, b) = (keep(a), keep(b));
    if a.len() != b.len() || a.iter().chain(&b).any(|k| k.rows() != a[0].rows()) {
        return f64::INFINITY;
    }
    let mut used = vec![false; b.len()];
    let mut worst: f64 = 0.0;
    for ka in &a {
        let (idx, d) = b
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, kb)| (i, ka.max_abs_diff(kb)))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("equal counts");
        used[idx] = true;
        worst = worst.max(d);
    }
    worst
}

/// JSON form of a channel.
#[derive(Serialize, Deserialize)]
struct ChannelDoc {
    label: String,
    dim: usize,
    operators: Vec<Vec<[f64; 2]>>,
    deficit_norm: f64,
}

impl Serialize for KrausChannel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ChannelDoc {
            label: self.label.clone(),
            dim: self.dim,
            operators: self
                .operators
                .iter()
                .map(|k| k.entries().iter().map(|z| [z.re, z.im]).collect())
                .collect(),
            deficit_norm: self.deficit_norm(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for KrausChannel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = ChannelDoc::deserialize(d)?;
        let ops = doc
            .operators
            .into_iter()
            .map(|flat| {
                let data = flat.into_iter().map(|[re, im]| C64::new(re, im)).collect();
                ComplexMatrix::from_vec(doc.dim, doc.dim, data)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(D::Error::custom)?;
        KrausChannel::new(doc.label, ops).map_err(D::Error::custom)
    }
}
