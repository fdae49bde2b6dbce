//! Simulated two-qubit polarization tomography: projector sets, Poisson
//! coincidence counts, linear inversion and maximum-likelihood estimation.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::concurrence;
use crate::error::{Error, Result};
use crate::qmat::{herm_eig, kron, pauli_x, pauli_y, pauli_z, ComplexMatrix, DensityMatrix, C64};
use crate::states::{fidelity, purity, qubit_ket};
use crate::tol;

pub const DEFAULT_PAIRS_PER_SETTING: u64 = 10_000;
pub const ML_TOLERANCE: f64 = 1e-10;
pub const ML_MAX_ITERATIONS: usize = 10_000;
/// Singular values below this fraction of the largest count as null.
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSetting {
    label: String,
    projector: ComplexMatrix,
}

impl MeasurementSetting {
    /// Product projector from a two-letter label over `H V D A R L`.
    pub fn from_label(label: &str) -> Result<Self> {
        let chars: Vec<char> = label.chars().collect();
        let (a, b) = match chars.as_slice() {
            [a, b] => (qubit_ket(*a), qubit_ket(*b)),
            _ => (None, None),
        };
        let (Some(a), Some(b)) = (a, b) else {
            return Err(Error::UnknownSetting(label.to_owned()));
        };
        let pa = ComplexMatrix::outer(&a, &a);
        let pb = ComplexMatrix::outer(&b, &b);
        Ok(Self {
            label: label.to_owned(),
            projector: kron(&pa, &pb)?,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn projector(&self) -> &ComplexMatrix {
        &self.projector
    }

    /// `Tr(Pi rho)`.
    pub fn probability(&self, rho: &ComplexMatrix) -> f64 {
        let mut s = C64::default();
        for r in 0..4 {
            for c in 0..4 {
                s += self.projector[(r, c)] * rho[(c, r)];
            }
        }
        s.re
    }
}

fn product_settings(letters: &str) -> Vec<MeasurementSetting> {
    let mut out = Vec::new();
    for a in letters.chars() {
        for b in letters.chars() {
            out.push(MeasurementSetting::from_label(&format!("{a}{b}")).expect("known letters"));
        }
    }
    out
}

/// The 16 projections over `{H, V, D, R}` on each qubit.
pub fn standard_settings() -> Vec<MeasurementSetting> {
    product_settings("HVDR")
}

/// All 36 projections over the six cardinal polarizations.
pub fn overcomplete_settings() -> Vec<MeasurementSetting> {
    product_settings("HVDARL")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub setting_label: String,
    pub observed: u64,
    pub expected: f64,
}

fn check_state(rho: &DensityMatrix) -> Result<()> {
    if !rho.is_normalized() {
        return Err(Error::NotNormalized { trace: rho.trace() });
    }
    Ok(())
}

/// Expected counts without shot noise; `observed` is the rounded mean.
pub fn expected_counts(
    rho: &DensityMatrix,
    settings: &[MeasurementSetting],
    pairs: u64,
) -> Result<Vec<CountRecord>> {
    check_state(rho)?;
    Ok(settings
        .iter()
        .map(|s| {
            let expected = pairs as f64 * s.probability(rho.matrix()).max(0.0);
            CountRecord {
                setting_label: s.label.clone(),
                observed: expected.round() as u64,
                expected,
            }
        })
        .collect())
}

/// Poisson counts, one generator stream per setting index.
pub fn simulate_counts(
    rho: &DensityMatrix,
    settings: &[MeasurementSetting],
    pairs: u64,
    seed: u64,
) -> Result<Vec<CountRecord>> {
    let mut records = expected_counts(rho, settings, pairs)?;
    for (k, r) in records.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        r.observed = if r.expected > 0.0 {
            Poisson::new(r.expected)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?
                .sample(&mut rng) as u64
        } else {
            0
        };
    }
    Ok(records)
}

pub fn counts_to_csv(records: &[CountRecord]) -> String {
    let mut out = String::from("setting_label,observed,expected\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{:.16e}\n",
            r.setting_label, r.observed, r.expected
        ));
    }
    out
}

pub fn counts_from_csv(text: &str) -> Result<Vec<CountRecord>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == "setting_label,observed,expected" => {}
        other => {
            return Err(Error::InvalidConfig(format!(
                "unexpected counts header {other:?}"
            )))
        }
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            let bad = || Error::InvalidConfig(format!("malformed counts row `{l}`"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(CountRecord {
                setting_label: f[0].to_owned(),
                observed: f[1].parse().map_err(|_| bad())?,
                expected: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    LinearInversion,
    #[default]
    MaxLikelihood,
}

/// Hermitian basis `sigma_i (x) sigma_j / 4`, identity first.
fn pauli_basis() -> Vec<ComplexMatrix> {
    let ps = [ComplexMatrix::identity(2), pauli_x(), pauli_y(), pauli_z()];
    let mut out = Vec::with_capacity(16);
    for a in &ps {
        for b in &ps {
            out.push(kron(a, b).expect("4x4").scale_real(0.25));
        }
    }
    out
}

fn design_matrix(settings: &[MeasurementSetting], basis: &[ComplexMatrix]) -> DMatrix<f64> {
    DMatrix::from_fn(settings.len(), basis.len(), |k, j| {
        settings[k].probability(&basis[j])
    })
}

/// Dimension of the unresolved operator subspace of a setting set.
pub fn null_space_dimension(settings: &[MeasurementSetting]) -> usize {
    let a = design_matrix(settings, &pauli_basis());
    let sv = a.svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    16 - sv.iter().filter(|s| **s > RANK_TOL * max).count()
}

/// Nearest PSD unit-trace matrix by eigenvalue clipping and rescaling.
pub fn project_physical(m: &ComplexMatrix) -> Result<DensityMatrix> {
    let e = herm_eig(&m.hermitian_part())?;
    let clipped: Vec<f64> = e.values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total <= tol::TRACE_FLOOR {
        return Ok(DensityMatrix::maximally_mixed());
    }
    let mut out = ComplexMatrix::zeros(4, 4);
    for (i, w) in clipped.iter().enumerate() {
        if *w > 0.0 {
            let v = e.vectors.column(i);
            out = &out + &ComplexMatrix::outer(&v, &v).scale_real(w / total);
        }
    }
    DensityMatrix::new(out.hermitian_part())
}

fn settings_for(records: &[CountRecord]) -> Result<Vec<MeasurementSetting>> {
    records
        .iter()
        .map(|r| MeasurementSetting::from_label(&r.setting_label))
        .collect()
}

/// Reconstruction from the observed counts.
pub fn reconstruct(records: &[CountRecord], method: Method) -> Result<DensityMatrix> {
    let counts: Vec<f64> = records.iter().map(|r| r.observed as f64).collect();
    reconstruct_from(&settings_for(records)?, &counts, method)
}

/// Reconstruction from the noiseless expected counts.
pub fn reconstruct_expected(records: &[CountRecord], method: Method) -> Result<DensityMatrix> {
    let counts: Vec<f64> = records.iter().map(|r| r.expected).collect();
    reconstruct_from(&settings_for(records)?, &counts, method)
}

pub fn reconstruct_from(
    settings: &[MeasurementSetting],
    counts: &[f64],
    method: Method,
) -> Result<DensityMatrix> {
    if settings.len() != counts.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} counts", settings.len()),
            found: format!("{}", counts.len()),
        });
    }
    if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::InvalidConfig(
            "counts must be finite and nonnegative".into(),
        ));
    }
    let null_dim = null_space_dimension(settings);
    if null_dim > 0 {
        return Err(Error::InformationallyIncomplete { null_dim });
    }
    if counts.iter().sum::<f64>() <= 0.0 {
        return Ok(DensityMatrix::maximally_mixed());
    }
    let linear = linear_inversion(settings, counts)?;
    match method {
        Method::LinearInversion => Ok(linear),
        Method::MaxLikelihood => max_likelihood(settings, counts),
    }
}

fn linear_inversion(settings: &[MeasurementSetting], counts: &[f64]) -> Result<DensityMatrix> {
    let basis = pauli_basis();
    let a = design_matrix(settings, &basis);
    let b = DVector::from_column_slice(counts);
    let x = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut m = ComplexMatrix::zeros(4, 4);
    for (j, e) in basis.iter().enumerate() {
        m = &m + &e.scale_real(x[j]);
    }
    // The solution is (pair rate) * rho; the trace removes the rate.
    let t = m.trace().re;
    if t.abs() <= tol::TRACE_FLOOR {
        return project_physical(&m);
    }
    project_physical(&m.scale_real(1.0 / t))
}

/// Poisson log-likelihood with the pair rate profiled out.
pub fn log_likelihood(settings: &[MeasurementSetting], counts: &[f64], rho: &ComplexMatrix) -> f64 {
    let probs: Vec<f64> = settings
        .iter()
        .map(|s| s.probability(rho).max(1e-300))
        .collect();
    let total: f64 = counts.iter().sum();
    let norm: f64 = probs.iter().sum();
    counts
        .iter()
        .zip(&probs)
        .filter(|(c, _)| **c > 0.0)
        .map(|(c, p)| c * p.ln())
        .sum::<f64>()
        - total * norm.ln()
}

fn inv_sqrt(m: &ComplexMatrix) -> Result<(ComplexMatrix, ComplexMatrix)> {
    let e = herm_eig(m)?;
    Ok((
        e.map(|w| w.max(1e-300).sqrt()),
        e.map(|w| 1.0 / w.max(1e-300).sqrt()),
    ))
}

/// Diluted `R rho R` ascent in the frame where the projector sum is flat.
fn max_likelihood(settings: &[MeasurementSetting], counts: &[f64]) -> Result<DensityMatrix> {
    let mut s_sum = ComplexMatrix::zeros(4, 4);
    for s in settings {
        s_sum = &s_sum + &s.projector;
    }
    let (g_half, g_inv_half) = inv_sqrt(&s_sum.hermitian_part())?;
    let to_rho = |sigma: &ComplexMatrix| -> ComplexMatrix {
        let r = sigma.conjugate_by(&g_inv_half).hermitian_part();
        let t = r.trace().re;
        r.scale_real(1.0 / t)
    };
    let mut rho = DensityMatrix::maximally_mixed().into_matrix();
    let mut sigma = rho.conjugate_by(&g_half).hermitian_part();
    let mut ll = log_likelihood(settings, counts, &rho);
    let total: f64 = counts.iter().sum();
    let mut eps = 1.0;
    for _ in 0..ML_MAX_ITERATIONS {
        let probs: Vec<f64> = settings
            .iter()
            .map(|s| s.probability(&rho).max(1e-300))
            .collect();
        let norm: f64 = probs.iter().sum();
        let mut r = ComplexMatrix::zeros(4, 4);
        for ((s, c), p) in settings.iter().zip(counts).zip(&probs) {
            if *c > 0.0 {
                r = &r + &s.projector.scale_real(c / p);
            }
        }
        // At the optimum R = (N / norm) S, so this step is the identity there.
        let rt = r
            .scale_real(norm / total)
            .conjugate_by(&g_inv_half)
            .hermitian_part();
        let mut accepted = false;
        while eps >= 1e-8 {
            let step = &(&ComplexMatrix::identity(4).scale_real(1.0 - eps) + &rt.scale_real(eps))
                .hermitian_part();
            let cand = sigma.conjugate_by(step).hermitian_part();
            let cand_rho = to_rho(&cand);
            let cand_ll = log_likelihood(settings, counts, &cand_rho);
            if cand_ll >= ll {
                let gain = cand_ll - ll;
                sigma = cand.scale_real(1.0 / cand.trace().re);
                rho = cand_rho;
                ll = cand_ll;
                accepted = true;
                eps = (eps * 2.0).min(1.0);
                if gain < ML_TOLERANCE {
                    return project_physical(&rho);
                }
                break;
            }
            eps /= 2.0;
        }
        if !accepted {
            break;
        }
    }
    project_physical(&rho)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shots {
    Noiseless,
    Poisson(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QstStats {
    pub mean_concurrence: f64,
    pub std_concurrence: f64,
    pub mean_fidelity: f64,
    pub concurrences: Vec<f64>,
}

/// Seed of iteration `i` derived from a run seed.
pub fn iteration_seed(seed: u64, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 32 | i as u64);
    rng.next_u64()
}

/// Independent simulate-and-reconstruct runs with derived seeds.
pub fn repeated_qst(
    rho: &DensityMatrix,
    settings: &[MeasurementSetting],
    shots: Shots,
    iterations: usize,
    seed: u64,
    method: Method,
) -> Result<QstStats> {
    if iterations < 2 {
        return Err(Error::InvalidConfig(
            "repeated tomography needs at least 2 iterations".into(),
        ));
    }
    let runs: Vec<(f64, f64)> = (0..iterations)
        .into_par_iter()
        .map(|i| {
            let est = match shots {
                Shots::Noiseless => {
                    let recs = expected_counts(rho, settings, DEFAULT_PAIRS_PER_SETTING)?;
                    reconstruct_expected(&recs, method)?
                }
                Shots::Poisson(n) => reconstruct(
                    &simulate_counts(rho, settings, n, iteration_seed(seed, i))?,
                    method,
                )?,
            };
            Ok((concurrence(&est)?, fidelity(rho, &est)?))
        })
        .collect::<Result<_>>()?;
    let n = iterations as f64;
    let concurrences: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let mean = concurrences.iter().sum::<f64>() / n;
    let var = concurrences.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(QstStats {
        mean_concurrence: mean,
        std_concurrence: var.sqrt(),
        mean_fidelity: runs.iter().map(|r| r.1).sum::<f64>() / n,
        concurrences,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReconstructionReport {
    pub method: Method,
    pub fidelity: Option<f64>,
    pub concurrence: f64,
    pub purity: f64,
    pub rho: ComplexMatrix,
}

pub fn reconstruction_report(
    estimate: &DensityMatrix,
    truth: Option<&DensityMatrix>,
    method: Method,
) -> Result<ReconstructionReport> {
    Ok(ReconstructionReport {
        method,
        fidelity: truth.map(|t| fidelity(t, estimate)).transpose()?,
        concurrence: concurrence(estimate)?,
        purity: purity(estimate)?,
        rho: estimate.matrix().clone(),
    })
}
