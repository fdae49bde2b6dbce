//! Systematic-error propagation through the optical model: beam-splitter
//! leakage, waveplate least counts, NOT-plate tilt and pump-angle error.
//!
//! Signed shifts (`ConcurrencePerturbation::delta_c`) are `C_new - C_old`.
//! The headline figure is the drop `C_ideal - C_imperfect`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{concurrence, wootters_eigenvalues};
use crate::channels::TemporalMismatch;
use crate::error::{check_range, Error, Result};
use crate::optics::{
    build_train_unitary, device_name, dsi_leg, pair_mismatch, pair_terms, LegBlock, LegSettings,
    OpticalComponent, OpticalTrain, ParamSlot, Path, TrainMap, MAX_EXTINCTION,
};
use crate::protocol::ProtocolConfig;
use crate::qmat::{herm_eig, kron, psd_sqrt, spin_flip, ComplexMatrix, DensityMatrix, C64};
use crate::states::{Sign, StateParams};
use crate::tol;

/// NOT-plate tilt from a 1 degree mount reading.
pub const NOT_LEAST_COUNT: f64 = PI / 180.0;
/// Damping-plate angle error that reproduces `sqrt(p(1-p)) pi/90` exactly.
pub const DAMPING_ANGLE_LEAST_COUNT: f64 = PI / 360.0;
/// Pump half-wave plate least count.
pub const PUMP_LEAST_COUNT: f64 = PI / 180.0;
pub const MIN_MC_SAMPLES: usize = 100;

/// `delta_alpha = 2 cos(2 phi) delta_phi`.
pub fn state_prep_error(phi: f64, delta_phi: f64) -> f64 {
    2.0 * (2.0 * phi).cos() * delta_phi
}

/// `delta_p = 2 sin(4 theta) delta_theta`.
pub fn damping_error(theta: f64, delta_theta: f64) -> f64 {
    2.0 * (4.0 * theta).sin() * delta_theta
}

/// `sqrt(p(1-p)) pi/90`, the strength form of the mount least count.
pub fn damping_error_from_strength(p: f64) -> f64 {
    (p * (1.0 - p)).sqrt() * PI / 90.0
}

/// Pump angle with `alpha = sin(2 phi)`, `beta = cos(2 phi)`.
pub fn pump_angle(alpha: f64) -> f64 {
    alpha.clamp(0.0, 1.0).asin() / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DampingError {
    /// Mount least count, `delta_theta = pi/360`.
    LeastCount,
    /// Error on the damping strength itself.
    Strength(f64),
    /// Error on the plate angle.
    Angle(f64),
}

impl Default for DampingError {
    fn default() -> Self {
        DampingError::Angle(0.0)
    }
}

impl DampingError {
    /// Angle uncertainty at plate angle `theta`. A strength error at a
    /// stationary point of `sin^2(2 theta)` has no first-order angle and maps
    /// to zero.
    pub fn angle_at(self, theta: f64) -> f64 {
        match self {
            DampingError::LeastCount => DAMPING_ANGLE_LEAST_COUNT,
            DampingError::Angle(a) => a,
            DampingError::Strength(s) => {
                let d = 2.0 * (4.0 * theta).sin().abs();
                if d < 1e-12 {
                    0.0
                } else {
                    s / d
                }
            }
        }
    }

    fn magnitude(self) -> f64 {
        match self {
            DampingError::LeastCount => DAMPING_ANGLE_LEAST_COUNT,
            DampingError::Strength(x) | DampingError::Angle(x) => x,
        }
    }

    fn scaled(self, k: f64) -> Self {
        match self {
            DampingError::LeastCount => DampingError::Angle(DAMPING_ANGLE_LEAST_COUNT * k),
            DampingError::Strength(x) => DampingError::Strength(x * k),
            DampingError::Angle(x) => DampingError::Angle(x * k),
        }
    }
}

/// Extinction ratios: one value for every port, or four per named device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PbsDeltas {
    Uniform(f64),
    PerDevice(BTreeMap<String, [f64; 4]>),
}

impl Default for PbsDeltas {
    fn default() -> Self {
        PbsDeltas::Uniform(0.0)
    }
}

impl PbsDeltas {
    pub fn get(&self, device: &str, slot: usize) -> f64 {
        match self {
            PbsDeltas::Uniform(d) => *d,
            PbsDeltas::PerDevice(m) => m.get(device).map_or(0.0, |d| d[slot]),
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            PbsDeltas::Uniform(d) => vec![*d],
            PbsDeltas::PerDevice(m) => m.values().flatten().copied().collect(),
        }
    }

    fn scaled(&self, k: f64) -> Self {
        match self {
            PbsDeltas::Uniform(d) => PbsDeltas::Uniform(d * k),
            PbsDeltas::PerDevice(m) => PbsDeltas::PerDevice(
                m.iter()
                    .map(|(n, d)| (n.clone(), d.map(|x| x * k)))
                    .collect(),
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBudget {
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub delta_p: DampingError,
    #[serde(default, rename = "delta_P")]
    pub delta_big_p: DampingError,
    #[serde(default)]
    pub pbs_deltas: PbsDeltas,
    #[serde(default)]
    pub delta_phi: f64,
    /// Move every parameter of a group together instead of independently.
    #[serde(default)]
    pub correlated: bool,
}

impl ErrorBudget {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Mount least counts with a uniform leakage `delta` on every PBS port.
    pub fn reported(delta: f64) -> Self {
        Self {
            mu: NOT_LEAST_COUNT,
            delta_p: DampingError::LeastCount,
            delta_big_p: DampingError::LeastCount,
            pbs_deltas: PbsDeltas::Uniform(delta),
            delta_phi: PUMP_LEAST_COUNT,
            correlated: false,
        }
    }

    /// Leakage only.
    pub fn pbs_only(delta: f64) -> Self {
        Self {
            pbs_deltas: PbsDeltas::Uniform(delta),
            ..Self::default()
        }
    }

    /// Every entry multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            mu: self.mu * k,
            delta_p: self.delta_p.scaled(k),
            delta_big_p: self.delta_big_p.scaled(k),
            pbs_deltas: self.pbs_deltas.scaled(k),
            delta_phi: self.delta_phi * k,
            correlated: self.correlated,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_range("mu", self.mu, 0.0, f64::MAX)?;
        check_range("delta_phi", self.delta_phi, 0.0, f64::MAX)?;
        check_range("delta_p", self.delta_p.magnitude(), 0.0, f64::MAX)?;
        check_range("delta_P", self.delta_big_p.magnitude(), 0.0, f64::MAX)?;
        for d in self.pbs_deltas.values() {
            check_range("pbs_deltas", d, 0.0, MAX_EXTINCTION)?;
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: Self = serde_json::from_str(s)?;
        b.validate()?;
        Ok(b)
    }
}

/// State and nominal damping settings around which errors are propagated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub state: StateParams,
    pub p: f64,
    pub big_p: f64,
    pub z: TemporalMismatch,
    pub not_plate: bool,
}

impl OperatingPoint {
    pub fn new(state: StateParams, p: f64, big_p: f64) -> Result<Self> {
        check_range("p", p, 0.0, 1.0)?;
        check_range("P", big_p, 0.0, 1.0)?;
        Ok(Self {
            state,
            p,
            big_p,
            z: TemporalMismatch::Separated,
            not_plate: true,
        })
    }

    /// Bell state with both damping stages off.
    pub fn bell() -> Self {
        Self::new(StateParams::bell(), 0.0, 0.0).expect("valid")
    }

    pub fn from_config(cfg: &ProtocolConfig, big_p: f64) -> Result<Self> {
        Ok(Self {
            z: cfg.z,
            not_plate: cfg.apply_not,
            ..Self::new(cfg.state, cfg.p, big_p)?
        })
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Ok(Self {
            state: StateParams::new(alpha, self.state.sign())?,
            ..self.clone()
        })
    }

    fn leg(&self) -> Result<OpticalTrain> {
        let mut s = LegSettings::ideal(self.p, self.big_p, self.z)?;
        s.not_plate = self.not_plate;
        Ok(dsi_leg(&s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorGroup {
    Pbs,
    NotPlate,
    DampingP,
    DampingBigP,
    Waveplate,
    StatePrep,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorParam {
    pub name: String,
    pub group: ErrorGroup,
    pub sigma: f64,
    /// Leg index and parameter index in that leg. `None` for the pump angle.
    #[serde(skip)]
    site: Option<(usize, usize)>,
    #[serde(skip)]
    key: Option<(String, ParamSlot)>,
}

fn group_of(device: &str, slot: ParamSlot) -> ErrorGroup {
    match slot {
        ParamSlot::Delta(_) => ErrorGroup::Pbs,
        ParamSlot::Mu => ErrorGroup::NotPlate,
        ParamSlot::Theta if device == "H1" => ErrorGroup::DampingP,
        ParamSlot::Theta if device == "H2" => ErrorGroup::DampingBigP,
        ParamSlot::Theta => ErrorGroup::Waveplate,
    }
}

/// Nominal two-leg model with one entry per error parameter.
#[derive(Clone, Debug)]
pub struct ErrorModel {
    state: StateParams,
    trains: [OpticalTrain; 2],
    maps: [TrainMap; 2],
    z: TemporalMismatch,
    params: Vec<ErrorParam>,
}

const LEG_NAMES: [&str; 2] = ["A", "B"];

impl ErrorModel {
    /// Both legs share a budget; parameters of the two legs are independent.
    pub fn from_trains(
        state: StateParams,
        a: OpticalTrain,
        b: OpticalTrain,
        budget: &ErrorBudget,
    ) -> Result<Self> {
        budget.validate()?;
        let maps = [
            build_train_unitary(&a, false)?,
            build_train_unitary(&b, false)?,
        ];
        let z = pair_mismatch(&maps[0], &maps[1])?;
        let mut params = Vec::new();
        for (leg, m) in maps.iter().enumerate() {
            for (idx, tp) in m.parameters().iter().enumerate() {
                let group = group_of(&tp.device, tp.slot);
                let sigma = match (group, tp.slot) {
                    (ErrorGroup::Pbs, ParamSlot::Delta(k)) => budget.pbs_deltas.get(&tp.device, k),
                    (ErrorGroup::NotPlate, _) => budget.mu,
                    (ErrorGroup::DampingP, _) => budget.delta_p.angle_at(tp.value),
                    (ErrorGroup::DampingBigP, _) => budget.delta_big_p.angle_at(tp.value),
                    _ => tp.uncertainty,
                };
                let slot = match tp.slot {
                    ParamSlot::Delta(k) => format!("delta{k}"),
                    ParamSlot::Theta => "theta".into(),
                    ParamSlot::Mu => "mu".into(),
                };
                params.push(ErrorParam {
                    name: format!("{}:{}:{}", LEG_NAMES[leg], tp.device, slot),
                    group,
                    sigma,
                    site: Some((leg, idx)),
                    key: Some((tp.device.clone(), tp.slot)),
                });
            }
        }
        params.push(ErrorParam {
            name: "pump:phi".into(),
            group: ErrorGroup::StatePrep,
            sigma: budget.delta_phi,
            site: None,
            key: None,
        });
        Ok(Self {
            state,
            trains: [a, b],
            maps,
            z,
            params,
        })
    }

    pub fn new(op: &OperatingPoint, budget: &ErrorBudget) -> Result<Self> {
        let leg = op.leg()?;
        Self::from_trains(op.state, leg.clone(), leg, budget)
    }

    pub fn params(&self) -> &[ErrorParam] {
        &self.params
    }

    fn blocks(&self) -> [Vec<LegBlock>; 2] {
        [
            self.maps[0].leg_blocks_full(Path::P0),
            self.maps[1].leg_blocks_full(Path::P0),
        ]
    }

    /// Nominal two-qubit operators on the fixed port grid, zeros included.
    pub fn nominal_operators(&self) -> Result<Vec<ComplexMatrix>> {
        let [a, b] = self.blocks();
        pair_terms(&a, &b, None, self.z)
            .into_iter()
            .map(|(i, j, f)| Ok(kron(&a[i].k, &b[j].k)?.scale_real(f)))
            .collect()
    }

    /// Derivative of every nominal operator with respect to parameter `i`,
    /// scaled by its sigma. Empty for the pump angle, which is not in the train.
    pub fn operator_corrections(&self, i: usize) -> Result<Vec<ComplexMatrix>> {
        let p = &self.params[i];
        let Some((leg, idx)) = p.site else {
            return Ok(Vec::new());
        };
        let [a, b] = self.blocks();
        let tangent = self.maps[leg].leg_tangent_full(Path::P0, idx)?;
        pair_terms(&a, &b, None, self.z)
            .into_iter()
            .map(|(ia, ib, f)| {
                let k = if leg == 0 {
                    kron(&tangent[ia].k, &b[ib].k)?
                } else {
                    kron(&a[ia].k, &tangent[ib].k)?
                };
                Ok(k.scale_real(f * p.sigma))
            })
            .collect()
    }

    fn input(&self) -> ComplexMatrix {
        let psi = self.state.ket();
        ComplexMatrix::outer(&psi, &psi)
    }

    /// `d rho_in / d phi` times sigma.
    fn input_tangent(&self, sigma: f64) -> ComplexMatrix {
        let psi = self.state.ket();
        let s = self.state.sign().value();
        let (a, b) = (self.state.alpha(), self.state.beta());
        let z = C64::default();
        let d = [
            C64::new(2.0 * b * sigma, 0.0),
            z,
            z,
            C64::new(-2.0 * s * a * sigma, 0.0),
        ];
        &ComplexMatrix::outer(&d, &psi) + &ComplexMatrix::outer(&psi, &d)
    }

    /// Renormalized nominal output.
    pub fn nominal_output(&self) -> Result<DensityMatrix> {
        let ops = self.nominal_operators()?;
        normalized(&sandwich(&ops, &self.input()))
    }

    /// First-order change of the renormalized output for parameter `i` at
    /// one sigma.
    pub fn delta_rho(&self, i: usize) -> Result<ComplexMatrix> {
        let k0 = self.nominal_operators()?;
        let rho_in = self.input();
        let sigma = sandwich(&k0, &rho_in);
        let t = sigma.trace().re;
        let d_sigma = match self.params[i].site {
            Some(_) => {
                let dk = self.operator_corrections(i)?;
                let mut acc = ComplexMatrix::zeros(4, 4);
                for (k, d) in k0.iter().zip(&dk) {
                    acc = &acc + &(&(d * &rho_in) * &k.adjoint());
                    acc = &acc + &(&(k * &rho_in) * &d.adjoint());
                }
                acc
            }
            None => sandwich(&k0, &self.input_tangent(self.params[i].sigma)),
        };
        let dt = d_sigma.trace().re;
        Ok((&d_sigma - &sigma.scale_real(dt / t)).scale_real(1.0 / t))
    }

    /// Output with parameter `i` displaced by `u_i sigma_i`, evaluated exactly.
    pub fn displaced_output(&self, u: &[f64]) -> Result<DensityMatrix> {
        let mut offsets: [BTreeMap<(String, ParamSlot), f64>; 2] = Default::default();
        let mut dphi = 0.0;
        for (p, ui) in self.params.iter().zip(u) {
            match (&p.site, &p.key) {
                (Some((leg, _)), Some(key)) => {
                    offsets[*leg].insert(key.clone(), ui * p.sigma);
                }
                _ => dphi = ui * p.sigma,
            }
        }
        let maps = [
            build_train_unitary(&offset_train(&self.trains[0], &offsets[0]), false)?,
            build_train_unitary(&offset_train(&self.trains[1], &offsets[1]), false)?,
        ];
        let a = maps[0].leg_blocks_full(Path::P0);
        let b = maps[1].leg_blocks_full(Path::P0);
        let mut ops = Vec::new();
        for (i, j, f) in pair_terms(&a, &b, None, self.z) {
            ops.push(kron(&a[i].k, &b[j].k)?.scale_real(f));
        }
        let phi = pump_angle(self.state.alpha()) + dphi;
        let (alpha, beta) = ((2.0 * phi).sin(), (2.0 * phi).cos());
        let s = self.state.sign().value();
        let z = C64::default();
        let psi = [C64::new(alpha, 0.0), z, z, C64::new(s * beta, 0.0)];
        normalized(&sandwich(&ops, &ComplexMatrix::outer(&psi, &psi)))
    }

    /// Group labels, with independent parameters each in their own class.
    fn classes(&self, correlated: bool) -> Vec<usize> {
        let mut map: BTreeMap<ErrorGroup, usize> = BTreeMap::new();
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if correlated {
                    let n = map.len();
                    *map.entry(p.group).or_insert(n)
                } else {
                    i
                }
            })
            .collect()
    }
}

fn offset_train(
    train: &OpticalTrain,
    offsets: &BTreeMap<(String, ParamSlot), f64>,
) -> OpticalTrain {
    let mut t = train.clone();
    for (i, comp) in t.components.iter_mut().enumerate() {
        let name = device_name(comp, i);
        let off = |slot| offsets.get(&(name.clone(), slot)).copied().unwrap_or(0.0);
        match comp {
            OpticalComponent::Pbs { deltas, .. } => {
                for (k, d) in deltas.iter_mut().enumerate() {
                    *d += off(ParamSlot::Delta(k));
                }
            }
            OpticalComponent::Hwp { theta, .. } | OpticalComponent::Qwp { theta, .. } => {
                *theta += off(ParamSlot::Theta)
            }
            OpticalComponent::NotPlate { mu, .. } => *mu += off(ParamSlot::Mu),
            _ => {}
        }
    }
    t
}

fn sandwich(ops: &[ComplexMatrix], rho: &ComplexMatrix) -> ComplexMatrix {
    let mut out = ComplexMatrix::zeros(4, 4);
    for k in ops {
        out = &out + &rho.conjugate_by(k);
    }
    out
}

fn normalized(sigma: &ComplexMatrix) -> Result<DensityMatrix> {
    let t = sigma.trace().re;
    if t <= tol::TRACE_FLOOR {
        return Err(Error::PostSelectedAway { trace: t });
    }
    DensityMatrix::new(sigma.scale_real(1.0 / t).hermitian_part())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KrausCorrection {
    pub parameter: String,
    pub group: ErrorGroup,
    pub sigma: f64,
    pub delta_k: Vec<ComplexMatrix>,
}

/// Nominal operators `K0` and their first-order corrections, one set per
/// parameter, plus the per-operator quadrature `sqrt(sum |dK|_F^2)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerturbedKraus {
    pub k0: Vec<ComplexMatrix>,
    pub corrections: Vec<KrausCorrection>,
    pub quadrature: Vec<f64>,
}

impl PerturbedKraus {
    /// Quadrature norm of the corrections within one group.
    pub fn group_norm(&self, group: ErrorGroup) -> f64 {
        self.corrections
            .iter()
            .filter(|c| c.group == group)
            .flat_map(|c| c.delta_k.iter().map(|k| k.frobenius().powi(2)))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn perturb_kraus(
    budget: &ErrorBudget,
    a: &OpticalTrain,
    b: &OpticalTrain,
) -> Result<PerturbedKraus> {
    let model = ErrorModel::from_trains(StateParams::bell(), a.clone(), b.clone(), budget)?;
    let k0 = model.nominal_operators()?;
    let mut corrections = Vec::new();
    let mut sq = vec![0.0; k0.len()];
    for (i, p) in model.params().iter().enumerate() {
        if p.site.is_none() {
            continue;
        }
        let delta_k = model.operator_corrections(i)?;
        for (s, d) in sq.iter_mut().zip(&delta_k) {
            *s += d.frobenius().powi(2);
        }
        corrections.push(KrausCorrection {
            parameter: p.name.clone(),
            group: p.group,
            sigma: p.sigma,
            delta_k,
        });
    }
    Ok(PerturbedKraus {
        k0,
        corrections,
        quadrature: sq.into_iter().map(f64::sqrt).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FirstOrder,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConcurrencePerturbation {
    /// Shifts of the Wootters eigenvalues, largest first.
    pub delta_lambdas: [f64; 4],
    pub delta_c: f64,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// Sample standard deviation of C (Monte Carlo only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    /// Standard error of `std`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
}

impl ConcurrencePerturbation {
    /// `(dl1/sqrt l1 - dl2/sqrt l2 - dl3/sqrt l3 - dl4/sqrt l4) / 2`.
    pub fn combine(lambdas: &[f64; 4], delta_lambdas: &[f64; 4]) -> f64 {
        let t: Vec<f64> = lambdas
            .iter()
            .zip(delta_lambdas)
            .map(|(l, d)| d / l.sqrt())
            .collect();
        0.5 * (t[0] - t[1] - t[2] - t[3])
    }
}

/// First-order concurrence shift for `rho0 + delta_rho`.
///
/// With `R = rho rho~ = sqrt(rho) M sqrt(rho)^-1` and `M = sqrt(rho) rho~
/// sqrt(rho)` Hermitian, the biorthogonal left/right eigenvectors of `R` are
/// `sqrt(rho)^-1 w` and `sqrt(rho) w` for eigenvectors `w` of `M`. Clusters
/// of equal eigenvalues away from the largest are resolved by diagonalizing
/// the perturbation inside the cluster, which leaves the sum unchanged.
pub fn first_order_delta_c(
    rho0: &DensityMatrix,
    delta_rho: &ComplexMatrix,
) -> Result<ConcurrencePerturbation> {
    if delta_rho.rows() != 4 || delta_rho.cols() != 4 {
        return Err(Error::DimensionMismatch {
            expected: "4x4".into(),
            found: format!("{}x{}", delta_rho.rows(), delta_rho.cols()),
        });
    }
    let rho = rho0.matrix();
    let e = herm_eig(rho)?;
    if e.values[3] <= tol::DEGENERACY {
        return Err(Error::Degenerate(format!(
            "the state is rank deficient (smallest eigenvalue {:e}), so the Wootters spectrum has zeros",
            e.values[3]
        )));
    }
    let sq = psd_sqrt(rho)?;
    let sq_inv = e.map(|w| 1.0 / w.sqrt());
    let yy = spin_flip();
    let tilde = |m: &ComplexMatrix| m.conj().conjugate_by(&yy);
    let rho_t = tilde(rho);
    let m = (&(&sq * &rho_t) * &sq).hermitian_part();
    let me = herm_eig(&m)?;
    let lambdas = [me.values[0], me.values[1], me.values[2], me.values[3]];
    if lambdas[3] <= tol::DEGENERACY {
        return Err(Error::Degenerate(format!(
            "Wootters eigenvalue {:e} is zero",
            lambdas[3]
        )));
    }

    let d_r = &(delta_rho * &rho_t) + &(rho * &tilde(delta_rho));
    let t = &(&sq_inv * &d_r) * &sq;
    let w = &me.vectors;
    let proj = &(&w.adjoint() * &t) * w;

    let scale = lambdas[0].max(1.0);
    let mut clusters: Vec<Vec<usize>> = vec![vec![0]];
    for i in 1..4 {
        if lambdas[i - 1] - lambdas[i] < tol::DEGENERACY * scale {
            clusters.last_mut().expect("non-empty").push(i);
        } else {
            clusters.push(vec![i]);
        }
    }
    if clusters[0].len() > 1 {
        return Err(Error::Degenerate(format!(
            "largest Wootters eigenvalues coincide ({:e}, {:e})",
            lambdas[0], lambdas[1]
        )));
    }
    let mut delta_lambdas = [0.0; 4];
    for cl in &clusters {
        if cl.len() == 1 {
            delta_lambdas[cl[0]] = proj[(cl[0], cl[0])].re;
            continue;
        }
        let n = cl.len();
        let mut sub = ComplexMatrix::zeros(n, n);
        for (a, &i) in cl.iter().enumerate() {
            for (b, &j) in cl.iter().enumerate() {
                sub[(a, b)] = proj[(i, j)];
            }
        }
        let se = herm_eig(&sub.hermitian_part())?;
        for (a, &i) in cl.iter().enumerate() {
            delta_lambdas[i] = se.values[a];
        }
    }
    Ok(ConcurrencePerturbation {
        delta_lambdas,
        delta_c: ConcurrencePerturbation::combine(&lambdas, &delta_lambdas),
        method: Method::FirstOrder,
        samples: None,
        std: None,
        std_error: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Contribution {
    pub parameter: String,
    pub group: ErrorGroup,
    pub sigma: f64,
    /// Signed first-order shift of C for a one-sigma step.
    pub delta_c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FirstOrderBudget {
    pub concurrence: f64,
    pub contributions: Vec<Contribution>,
    /// Quadrature over independent parameters, or over groups of linearly
    /// summed parameters in correlated mode.
    pub delta_c: f64,
    pub by_group: BTreeMap<ErrorGroup, f64>,
}

pub fn first_order_budget(op: &OperatingPoint, budget: &ErrorBudget) -> Result<FirstOrderBudget> {
    let model = ErrorModel::new(op, budget)?;
    let rho0 = model.nominal_output()?;
    let mut contributions = Vec::new();
    for (i, p) in model.params().iter().enumerate() {
        let delta_c = if p.sigma == 0.0 {
            0.0
        } else {
            first_order_delta_c(&rho0, &model.delta_rho(i)?)?.delta_c
        };
        contributions.push(Contribution {
            parameter: p.name.clone(),
            group: p.group,
            sigma: p.sigma,
            delta_c,
        });
    }
    let classes = model.classes(budget.correlated);
    let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
    for (c, k) in contributions.iter().zip(&classes) {
        *sums.entry(*k).or_default() += c.delta_c;
    }
    let delta_c = sums.values().map(|s| s * s).sum::<f64>().sqrt();
    let mut by_group: BTreeMap<ErrorGroup, f64> = BTreeMap::new();
    for c in &contributions {
        *by_group.entry(c.group).or_default() += c.delta_c * c.delta_c;
    }
    for v in by_group.values_mut() {
        *v = v.sqrt();
    }
    Ok(FirstOrderBudget {
        concurrence: concurrence(&rho0)?,
        contributions,
        delta_c,
        by_group,
    })
}

fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 8 {
        return x.iter().sum();
    }
    let (a, b) = x.split_at(x.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Uniform draws within plus or minus each budget entry, one independent
/// generator stream per sample. `delta_c` is the mean shift `C - C0`.
pub fn monte_carlo_delta_c(
    op: &OperatingPoint,
    budget: &ErrorBudget,
    samples: usize,
    seed: u64,
) -> Result<ConcurrencePerturbation> {
    if samples < MIN_MC_SAMPLES {
        return Err(Error::InvalidConfig(format!(
            "Monte Carlo needs at least {MIN_MC_SAMPLES} samples, got {samples}"
        )));
    }
    let model = ErrorModel::new(op, budget)?;
    let rho0 = model.nominal_output()?;
    let c0 = concurrence(&rho0)?;
    let l0 = wootters_eigenvalues(&rho0)?;
    let classes = model.classes(budget.correlated);
    let n_classes = classes.iter().max().map_or(0, |m| m + 1);

    let draws: Vec<(f64, [f64; 4])> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let u_class: Vec<f64> = (0..n_classes)
                .map(|_| rng.random_range(-1.0..=1.0))
                .collect();
            let u: Vec<f64> = classes.iter().map(|k| u_class[*k]).collect();
            let rho = model.displaced_output(&u)?;
            let l = wootters_eigenvalues(&rho)?;
            Ok((
                concurrence(&rho)? - c0,
                [l[0] - l0[0], l[1] - l0[1], l[2] - l0[2], l[3] - l0[3]],
            ))
        })
        .collect::<Result<_>>()?;

    let n = samples as f64;
    let shifts: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let mean = pairwise_sum(&shifts) / n;
    let dev2: Vec<f64> = shifts.iter().map(|x| (x - mean).powi(2)).collect();
    let dev4: Vec<f64> = dev2.iter().map(|x| x * x).collect();
    let var = pairwise_sum(&dev2) / (n - 1.0);
    let std = var.sqrt();
    let m4 = pairwise_sum(&dev4) / n;
    let std_error = if std > 0.0 {
        ((m4 - var * var).max(0.0) / n).sqrt() / (2.0 * std)
    } else {
        0.0
    };
    let mut delta_lambdas = [0.0; 4];
    for (k, dl) in delta_lambdas.iter_mut().enumerate() {
        let col: Vec<f64> = draws.iter().map(|d| d.1[k]).collect();
        *dl = pairwise_sum(&col) / n;
    }
    Ok(ConcurrencePerturbation {
        delta_lambdas,
        delta_c: mean,
        method: Method::MonteCarlo,
        samples: Some(samples),
        std: Some(std),
        std_error: Some(std_error),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Headline {
    pub c_ideal: f64,
    pub c_imperfect: f64,
    /// `c_ideal - c_imperfect`.
    pub delta_c: f64,
    pub delta_c_percent: f64,
}

/// Every budget entry applied at its full positive value, evaluated exactly.
pub fn headline_delta_c(op: &OperatingPoint, budget: &ErrorBudget) -> Result<Headline> {
    let model = ErrorModel::new(op, budget)?;
    let c_ideal = concurrence(&model.nominal_output()?)?;
    let u = vec![1.0; model.params().len()];
    let c_imperfect = concurrence(&model.displaced_output(&u)?)?;
    let delta_c = c_ideal - c_imperfect;
    Ok(Headline {
        c_ideal,
        c_imperfect,
        delta_c,
        delta_c_percent: 100.0 * delta_c,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub c_ideal: f64,
    pub c_imperfect: f64,
    pub delta_c: f64,
}

/// Headline evaluation along a grid of state parameters.
pub fn alpha_curve(
    op: &OperatingPoint,
    budget: &ErrorBudget,
    alphas: &[f64],
) -> Result<Vec<AlphaPoint>> {
    alphas
        .par_iter()
        .map(|&alpha| {
            let h = headline_delta_c(&op.with_alpha(alpha)?, budget)?;
            Ok(AlphaPoint {
                alpha,
                c_ideal: h.c_ideal,
                c_imperfect: h.c_imperfect,
                delta_c: h.delta_c,
            })
        })
        .collect()
}

/// Report of the error engine; shifts are in concurrence units.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorReport {
    pub operating_point: OperatingPoint,
    pub budget: ErrorBudget,
    pub headline: Headline,
    pub delta_c_first_order: Option<f64>,
    pub first_order: Option<FirstOrderBudget>,
    pub delta_c_mc_mean: f64,
    pub delta_c_mc_std: f64,
    pub delta_c_mc_std_error: f64,
    pub samples: usize,
    pub seed: u64,
    /// Half the range of the headline drop over `alpha -/+ delta_alpha`.
    pub spread_state_parameter: f64,
    /// Monte Carlo standard deviation of C.
    pub spread_sampling: f64,
    pub notes: Vec<String>,
}

pub fn error_report(
    op: &OperatingPoint,
    budget: &ErrorBudget,
    samples: usize,
    seed: u64,
) -> Result<ErrorReport> {
    let headline = headline_delta_c(op, budget)?;
    let mut notes = Vec::new();
    let first_order = match first_order_budget(op, budget) {
        Ok(f) => Some(f),
        Err(Error::Degenerate(msg)) => {
            notes.push(format!(
                "first-order propagation unavailable ({msg}); the Monte Carlo estimate stands in"
            ));
            None
        }
        Err(e) => return Err(e),
    };
    let mc = monte_carlo_delta_c(op, budget, samples, seed)?;

    let phi = pump_angle(op.state.alpha());
    let mut ends = Vec::new();
    for s in [-1.0, 1.0] {
        let alpha = (2.0 * (phi + s * budget.delta_phi)).sin().clamp(0.0, 1.0);
        let no_prep = ErrorBudget {
            delta_phi: 0.0,
            ..budget.clone()
        };
        ends.push(headline_delta_c(&op.with_alpha(alpha)?, &no_prep)?.delta_c);
    }
    let spread_state_parameter = (ends[1] - ends[0]).abs() / 2.0;
    if !op.not_plate {
        notes.push("legs built without the NOT plate".into());
    }
    Ok(ErrorReport {
        operating_point: op.clone(),
        budget: budget.clone(),
        headline,
        delta_c_first_order: first_order.as_ref().map(|f| f.delta_c),
        first_order,
        delta_c_mc_mean: mc.delta_c,
        delta_c_mc_std: mc.std.unwrap_or(0.0),
        delta_c_mc_std_error: mc.std_error.unwrap_or(0.0),
        samples,
        seed,
        spread_state_parameter,
        spread_sampling: mc.std.unwrap_or(0.0),
        notes,
    })
}

/// A mixed operating point where the first-order formula applies.
pub fn full_rank_operating_point() -> OperatingPoint {
    OperatingPoint::new(
        StateParams::new(0.55, Sign::Minus).expect("valid"),
        0.3,
        0.2,
    )
    .expect("valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{derive_kraus, ModeState, Pol};
    use crate::qmat::test_util::{random_density, rng};
    use crate::states::make_state;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4, FRAC_PI_8};

    #[test]
    fn state_prep_examples() {
        assert!(state_prep_error(FRAC_PI_4, 0.01).abs() < 1e-17);
        assert!((state_prep_error(0.0, 0.01) - 0.02).abs() < 1e-15);
        let d = state_prep_error(FRAC_PI_8, PI / 180.0);
        assert!((d - 2.0 * FRAC_1_SQRT_2 * PI / 180.0).abs() < 1e-15);
        assert!((d - 0.02468).abs() < 5e-6);
    }

    #[test]
    fn damping_error_examples() {
        assert_eq!(damping_error(0.0, 0.1), 0.0);
        assert!((damping_error(FRAC_PI_8, 0.3) - 0.6).abs() < 1e-15);
        assert!((damping_error_from_strength(0.5) - 0.01745).abs() < 5e-6);
    }

    #[test]
    fn damping_forms_agree_at_quarter_degree() {
        for i in 0..=90 {
            let theta = i as f64 * FRAC_PI_4 / 90.0;
            let p = crate::optics::angle_to_damping(theta);
            let a = damping_error(theta, DAMPING_ANGLE_LEAST_COUNT).abs();
            assert!(
                (a - damping_error_from_strength(p)).abs() < 1e-14,
                "theta={theta}"
            );
            // Half the 2 degree count (pi/180) gives twice the strength form.
            let b = damping_error(theta, PI / 180.0).abs();
            assert!((b - 2.0 * damping_error_from_strength(p)).abs() < 1e-14);
        }
    }

    #[test]
    fn strength_error_converts_to_angle() {
        let theta = 0.3;
        let d = DampingError::Strength(0.01).angle_at(theta);
        assert!((damping_error(theta, d) - 0.01).abs() < 1e-15);
        assert_eq!(DampingError::Strength(0.01).angle_at(0.0), 0.0);
    }

    #[test]
    fn budget_json() {
        let b = ErrorBudget::reported(1e-3);
        let j = serde_json::to_string(&b).unwrap();
        assert!(j.contains("\"delta_P\":\"least_count\""));
        assert_eq!(ErrorBudget::from_json(&j).unwrap(), b);
        let per =
            r#"{"pbs_deltas": {"P1": [0.001, 0.002, 0.0, 0.0]}, "delta_p": {"strength": 0.01}}"#;
        let b = ErrorBudget::from_json(per).unwrap();
        assert_eq!(b.pbs_deltas.get("P1", 1), 0.002);
        assert_eq!(b.pbs_deltas.get("P2", 1), 0.0);
        assert!(ErrorBudget::from_json(r#"{"pbs_deltas": 0.2}"#).is_err());
        assert!(ErrorBudget::from_json(r#"{"mu": -1.0}"#).is_err());
        assert!(ErrorBudget::from_json(r#"{"nu": 1.0}"#).is_err());
    }

    #[test]
    fn zero_budget_gives_zero_corrections() {
        let leg = OperatingPoint::bell().leg().unwrap();
        let pk = perturb_kraus(&ErrorBudget::zero(), &leg, &leg).unwrap();
        assert!(pk
            .corrections
            .iter()
            .all(|c| c.delta_k.iter().all(|k| k.max_abs() == 0.0)));
        assert!(pk.quadrature.iter().all(|q| *q == 0.0));
    }

    #[test]
    fn not_tilt_inserts_sigma_z_at_the_plate() {
        let leg = OperatingPoint::bell().leg().unwrap();
        let m = build_train_unitary(&leg, false).unwrap();
        let mu = m
            .parameters()
            .iter()
            .position(|p| p.slot == ParamSlot::Mu)
            .unwrap();
        // At p = q = 0 the tilt sends H back through the counter-propagating
        // arm to a and V through the delayed loop to a'.
        let tan = m.leg_tangent_full(Path::P0, mu).unwrap();
        for b in &tan {
            let expect = match (b.path, b.delayed) {
                (Path::A, false) => ComplexMatrix::unit(2, 0, 0),
                (Path::APrime, true) => ComplexMatrix::unit(2, 1, 1),
                _ => ComplexMatrix::zeros(2, 2),
            };
            assert!(
                b.k.max_abs_diff(&expect) < 1e-15,
                "{:?} {}",
                b.path,
                b.delayed
            );
        }
        let budget = ErrorBudget {
            mu: NOT_LEAST_COUNT,
            ..ErrorBudget::zero()
        };
        let pk = perturb_kraus(&budget, &leg, &leg).unwrap();
        for c in &pk.corrections {
            let nonzero = c.delta_k.iter().any(|k| k.max_abs() > 0.0);
            assert_eq!(nonzero, c.group == ErrorGroup::NotPlate, "{}", c.parameter);
        }
    }

    #[test]
    fn nominal_operators_match_derived_channel() {
        let op = full_rank_operating_point();
        let model = ErrorModel::new(&op, &ErrorBudget::zero()).unwrap();
        let leg = build_train_unitary(&op.leg().unwrap(), true).unwrap();
        let derived = derive_kraus(&leg, &leg, (Path::P0, Path::P0), None).unwrap();
        let rho = make_state(&op.state);
        let a = sandwich(&model.nominal_operators().unwrap(), rho.matrix());
        let b = derived.apply_matrix(rho.matrix());
        assert!(a.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn leakage_response_is_linear() {
        let op = OperatingPoint::bell();
        let norms: Vec<f64> = [1e-4, 1e-3, 1e-2]
            .iter()
            .map(|d| {
                let model = ErrorModel::new(&op, &ErrorBudget::pbs_only(*d)).unwrap();
                let mut total = ComplexMatrix::zeros(4, 4);
                for (i, p) in model.params().iter().enumerate() {
                    if p.group == ErrorGroup::Pbs {
                        total = &total + &model.delta_rho(i).unwrap();
                    }
                }
                total.frobenius()
            })
            .collect();
        assert!(norms[0] > 0.0);
        assert!((norms[1] / norms[0] - 10.0).abs() < 1e-9);
        assert!((norms[2] / norms[1] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn delta_rho_matches_finite_difference() {
        let op = full_rank_operating_point();
        let model = ErrorModel::new(&op, &ErrorBudget::reported(1e-3)).unwrap();
        let n = model.params().len();
        let h = 1e-5;
        for i in 0..n {
            let mut u = vec![0.0; n];
            u[i] = h;
            let plus = model.displaced_output(&u).unwrap();
            u[i] = -h;
            let minus = model.displaced_output(&u).unwrap();
            let fd = (plus.matrix() - minus.matrix()).scale_real(1.0 / (2.0 * h));
            let an = model.delta_rho(i).unwrap();
            assert!(
                fd.max_abs_diff(&an) < 1e-9 * (1.0 + an.max_abs()),
                "{}",
                model.params()[i].name
            );
        }
    }

    #[test]
    fn zero_perturbation_gives_zero_shift() {
        let rho = random_density(&mut rng(5));
        let r = first_order_delta_c(&rho, &ComplexMatrix::zeros(4, 4)).unwrap();
        assert_eq!(r.delta_c, 0.0);
        assert_eq!(r.delta_lambdas, [0.0; 4]);
    }

    #[test]
    fn first_order_matches_finite_difference_on_random_states() {
        let mut r = rng(9);
        for _ in 0..50 {
            let rho = random_density(&mut r);
            let d = crate::qmat::test_util::random_hermitian(&mut r, 4);
            let d = &d - &ComplexMatrix::identity(4).scale(d.trace() / 4.0);
            let h = 1e-7;
            let shifted = |s: f64| DensityMatrix::new(rho.matrix() + &d.scale_real(s * h)).unwrap();
            let fo = first_order_delta_c(&rho, &d.scale_real(h)).unwrap();
            let c0 = concurrence(&rho).unwrap();
            if c0 < 1e-3 {
                continue;
            }
            let fd =
                (concurrence(&shifted(1.0)).unwrap() - concurrence(&shifted(-1.0)).unwrap()) / 2.0;
            assert!(
                (fo.delta_c - fd).abs() < 1e-6 * h.max(fd.abs()) + 1e-12,
                "{} vs {}",
                fo.delta_c,
                fd
            );
            let combined = ConcurrencePerturbation::combine(
                &wootters_eigenvalues(&rho).unwrap(),
                &fo.delta_lambdas,
            );
            assert!((combined - fo.delta_c).abs() < 1e-12);
        }
    }

    #[test]
    fn biorthogonal_shift_equals_single_vector_form_when_symmetric() {
        // Bell-diagonal states have rho~ = rho, so R = rho^2 is Hermitian and
        // the single-eigenvector expression applies as written.
        let bell = |s: f64, hv: bool| {
            let z = C64::default();
            let h = C64::new(FRAC_1_SQRT_2, 0.0);
            if hv {
                [z, h, h.scale(s), z]
            } else {
                [h, z, z, h.scale(s)]
            }
        };
        let weights = [0.55, 0.25, 0.15, 0.05];
        let kets = [
            bell(1.0, false),
            bell(-1.0, false),
            bell(1.0, true),
            bell(-1.0, true),
        ];
        let mut rho = ComplexMatrix::zeros(4, 4);
        for (w, k) in weights.iter().zip(&kets) {
            rho = &rho + &ComplexMatrix::outer(k, k).scale_real(*w);
        }
        let rho = DensityMatrix::new(rho).unwrap();
        let mut r = rng(2);
        let d = crate::qmat::test_util::random_hermitian(&mut r, 4).scale_real(1e-3);
        let d = d.conj().transpose().hermitian_part();
        let fo = first_order_delta_c(&rho, &d).unwrap();
        let yy = spin_flip();
        let tilde = |m: &ComplexMatrix| m.conj().conjugate_by(&yy);
        let d_r = &(&d * &tilde(rho.matrix())) + &(rho.matrix() * &tilde(&d));
        let re = herm_eig(&(rho.matrix() * rho.matrix())).unwrap();
        for i in 0..4 {
            let v = re.vectors.column(i);
            let dv = d_r.mul_vec(&v);
            let s: C64 = v.iter().zip(&dv).map(|(a, b)| a.conj() * b).sum();
            assert!((s.re - fo.delta_lambdas[i]).abs() < 1e-14, "{i}");
        }
    }

    #[test]
    fn degenerate_inputs_are_reported() {
        let bell = make_state(&StateParams::bell());
        let err = first_order_delta_c(&bell, &ComplexMatrix::zeros(4, 4)).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
        assert!(err.to_string().contains("Monte Carlo"));
        let mixed = DensityMatrix::maximally_mixed();
        assert!(matches!(
            first_order_delta_c(&mixed, &ComplexMatrix::zeros(4, 4)),
            Err(Error::Degenerate(_))
        ));
        let op = OperatingPoint::bell();
        assert!(matches!(
            first_order_budget(&op, &ErrorBudget::reported(1e-3)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn first_order_is_linear_in_the_budget() {
        let op = full_rank_operating_point();
        let b = ErrorBudget::reported(1e-3);
        let full = first_order_budget(&op, &b).unwrap().delta_c;
        let half = first_order_budget(&op, &b.scaled(0.5)).unwrap().delta_c;
        assert!(full > 0.0);
        assert!((half / full - 0.5).abs() < 0.05 * 0.5);
    }

    #[test]
    fn zero_budget_monte_carlo_has_no_spread() {
        let op = full_rank_operating_point();
        let mc = monte_carlo_delta_c(&op, &ErrorBudget::zero(), 100, 1).unwrap();
        assert_eq!(mc.std, Some(0.0));
        assert_eq!(mc.delta_c, 0.0);
        assert!(monte_carlo_delta_c(&op, &ErrorBudget::zero(), 99, 1).is_err());
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let op = full_rank_operating_point();
        let b = ErrorBudget::reported(1e-3);
        let a = monte_carlo_delta_c(&op, &b, 200, 42).unwrap();
        let c = monte_carlo_delta_c(&op, &b, 200, 42).unwrap();
        assert_eq!(a, c);
        let d = monte_carlo_delta_c(&op, &b, 200, 43).unwrap();
        assert_ne!(a.std, d.std);
    }

    #[test]
    fn monte_carlo_agrees_with_first_order() {
        let op = full_rank_operating_point();
        for b in [ErrorBudget::pbs_only(1e-3), ErrorBudget::reported(1e-3)] {
            let fo = first_order_budget(&op, &b).unwrap().delta_c;
            let mc = monte_carlo_delta_c(&op, &b, 2000, 7).unwrap();
            let (std, se) = (mc.std.unwrap(), mc.std_error.unwrap());
            let sqrt3 = 3f64.sqrt();
            assert!(
                (sqrt3 * std - fo).abs() < 3.0 * sqrt3 * se,
                "{} vs {fo}",
                sqrt3 * std
            );
        }
    }

    #[test]
    fn correlated_mode_sums_within_groups() {
        let op = full_rank_operating_point();
        let mut b = ErrorBudget::pbs_only(1e-3);
        let ind = first_order_budget(&op, &b).unwrap();
        b.correlated = true;
        let cor = first_order_budget(&op, &b).unwrap();
        let linear: f64 = ind.contributions.iter().map(|c| c.delta_c).sum();
        assert!((cor.delta_c - linear.abs()).abs() < 1e-15);
    }

    #[test]
    fn alpha_curve_vanishes_at_separable_endpoints() {
        let op = OperatingPoint::bell();
        let alphas: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let curve = alpha_curve(&op, &ErrorBudget::pbs_only(1e-2), &alphas).unwrap();
        assert!(curve[0].c_imperfect.abs() < 1e-12);
        assert!(curve[10].c_imperfect.abs() < 1e-12);
        assert!(curve[0].delta_c.abs() < 1e-12 && curve[10].delta_c.abs() < 1e-12);
        // Leakage re-weights the HH and VV populations, so the shift changes
        // sign around the Bell point and is largest in between.
        let peak = curve
            .iter()
            .max_by(|a, b| a.delta_c.abs().total_cmp(&b.delta_c.abs()))
            .unwrap();
        assert!(peak.alpha > 0.0 && peak.alpha < 1.0 && peak.delta_c.abs() > 1e-3);
        assert!(curve[7].delta_c.abs() < 0.1 * peak.delta_c.abs());
    }

    #[test]
    fn headline_is_zero_for_zero_budget() {
        let h = headline_delta_c(&OperatingPoint::bell(), &ErrorBudget::zero()).unwrap();
        assert!((h.c_ideal - 1.0).abs() < 1e-12);
        assert_eq!(h.delta_c, 0.0);
    }

    #[test]
    fn report_falls_back_for_the_bell_output() {
        let r = error_report(
            &OperatingPoint::bell(),
            &ErrorBudget::reported(1e-3),
            200,
            3,
        )
        .unwrap();
        assert!(r.delta_c_first_order.is_none());
        assert!(r.notes.iter().any(|n| n.contains("Monte Carlo")));
        let j = serde_json::to_value(&r).unwrap();
        for k in [
            "delta_c_first_order",
            "delta_c_mc_mean",
            "delta_c_mc_std",
            "samples",
            "seed",
        ] {
            assert!(j.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn signed_leakage_keeps_states_physical() {
        let op = full_rank_operating_point();
        let model = ErrorModel::new(&op, &ErrorBudget::pbs_only(1e-2)).unwrap();
        let u = vec![-1.0; model.params().len()];
        assert!(model.displaced_output(&u).is_ok());
        let _ = ModeState::single(Pol::H, Path::P0);
    }
}
