//! Mode-level model of the displaced-Sagnac damping train.
//!
//! A train is an ordered list of components acting on sparse (polarization,
//! path, delayed) amplitude maps. Kraus operators are read off as the
//! polarization blocks between the input mode and each terminal path.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::channels::{KrausChannel, TemporalMismatch};
use crate::error::{check_range, Error, Result};
use crate::qmat::{kron, ComplexMatrix, C64};

/// Largest extinction ratio accepted in a train file.
pub const MAX_EXTINCTION: f64 = 0.1;

/// Blocks with no entry above this are treated as absent.
pub const BLOCK_FLOOR: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Path {
    #[serde(rename = "0")]
    P0,
    #[serde(rename = "1")]
    P1,
    #[serde(rename = "2")]
    P2,
    #[serde(rename = "3")]
    P3,
    #[serde(rename = "4")]
    P4,
    #[serde(rename = "5")]
    P5,
    #[serde(rename = "a")]
    A,
    #[serde(rename = "b")]
    B,
    #[serde(rename = "a'")]
    APrime,
    #[serde(rename = "b'")]
    BPrime,
}

impl Path {
    pub fn is_terminal(self) -> bool {
        matches!(self, Path::A | Path::B | Path::APrime | Path::BPrime)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Path::P0 => "0",
            Path::P1 => "1",
            Path::P2 => "2",
            Path::P3 => "3",
            Path::P4 => "4",
            Path::P5 => "5",
            Path::A => "a",
            Path::B => "b",
            Path::APrime => "a'",
            Path::BPrime => "b'",
        }
    }

    pub const TERMINALS: [Path; 4] = [Path::A, Path::B, Path::APrime, Path::BPrime];
}

impl std::fmt::Display for Path {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pol {
    H,
    V,
}

impl Pol {
    fn index(self) -> usize {
        match self {
            Pol::H => 0,
            Pol::V => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModeKey {
    pub path: Path,
    pub delayed: bool,
    pub pol: Pol,
}

impl ModeKey {
    pub fn new(pol: Pol, path: Path) -> Self {
        Self {
            path,
            delayed: false,
            pol,
        }
    }
}

/// Sparse single-photon amplitudes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModeState {
    amps: BTreeMap<ModeKey, C64>,
}

impl ModeState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(pol: Pol, path: Path) -> Self {
        let mut s = Self::new();
        s.amps.insert(ModeKey::new(pol, path), C64::new(1.0, 0.0));
        s
    }

    pub fn get(&self, key: &ModeKey) -> C64 {
        self.amps.get(key).copied().unwrap_or_default()
    }

    /// Amplitude on an undelayed mode.
    pub fn amp(&self, pol: Pol, path: Path) -> C64 {
        self.get(&ModeKey::new(pol, path))
    }

    /// Amplitude on a mode of either time bin.
    pub fn amp_at(&self, pol: Pol, path: Path, delayed: bool) -> C64 {
        self.get(&ModeKey { path, delayed, pol })
    }

    pub fn insert(&mut self, key: ModeKey, amp: C64) {
        if amp != C64::default() {
            self.amps.insert(key, amp);
        } else {
            self.amps.remove(&key);
        }
    }

    fn take(&mut self, key: &ModeKey) -> C64 {
        self.amps.remove(key).unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ModeKey, &C64)> {
        self.amps.iter()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.values().map(|a| a.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.amps
            .values()
            .all(|a| a.re.is_finite() && a.im.is_finite())
    }

    /// Every (path, delayed) pair carrying amplitude.
    pub fn ports(&self) -> BTreeSet<(Path, bool)> {
        self.amps.keys().map(|k| (k.path, k.delayed)).collect()
    }
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One optical element. `device` ties together passes through the same
/// physical element so they share parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OpticalComponent {
    /// Polarizing beam splitter with leakage `[delta, delta', delta1, delta1']`.
    /// `adjoint` marks a reverse pass, which uses the transposed matrix.
    Pbs {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        device: Option<String>,
        inputs: [Option<Path>; 2],
        outputs: [Path; 2],
        #[serde(default)]
        deltas: [f64; 4],
        #[serde(default, skip_serializing_if = "is_false")]
        adjoint: bool,
    },
    Hwp {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        device: Option<String>,
        paths: Vec<Path>,
        theta: f64,
        #[serde(default, skip_serializing_if = "is_zero")]
        delta_theta: f64,
    },
    Qwp {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        device: Option<String>,
        paths: Vec<Path>,
        theta: f64,
        #[serde(default, skip_serializing_if = "is_zero")]
        delta_theta: f64,
    },
    /// `sigma_x - mu sigma_z` on each listed path.
    NotPlate {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        device: Option<String>,
        paths: Vec<Path>,
        #[serde(default)]
        mu: f64,
    },
    /// Moves a path into the late time bin.
    PathDelay {
        path: Path,
        #[serde(default)]
        z: TemporalMismatch,
    },
    /// Coherence-length compensator, modeled as identity.
    Compensator { path: Path },
}

impl OpticalComponent {
    pub fn kind(&self) -> &'static str {
        match self {
            OpticalComponent::Pbs { .. } => "pbs",
            OpticalComponent::Hwp { .. } => "hwp",
            OpticalComponent::Qwp { .. } => "qwp",
            OpticalComponent::NotPlate { .. } => "not_plate",
            OpticalComponent::PathDelay { .. } => "path_delay",
            OpticalComponent::Compensator { .. } => "compensator",
        }
    }

    fn device(&self) -> Option<&str> {
        match self {
            OpticalComponent::Pbs { device, .. }
            | OpticalComponent::Hwp { device, .. }
            | OpticalComponent::Qwp { device, .. }
            | OpticalComponent::NotPlate { device, .. } => device.as_deref(),
            _ => None,
        }
    }
}

fn default_inputs() -> Vec<Path> {
    vec![Path::P0]
}

/// Ordered component list plus the populated input paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticalTrain {
    #[serde(default)]
    pub label: String,
    #[serde(default = "default_inputs")]
    pub inputs: Vec<Path>,
    pub components: Vec<OpticalComponent>,
}

impl OpticalTrain {
    pub fn new(label: impl Into<String>, components: Vec<OpticalComponent>) -> Self {
        Self {
            label: label.into(),
            inputs: default_inputs(),
            components,
        }
    }

    /// Range and connectivity checks. Returns warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        for c in &self.components {
            match c {
                OpticalComponent::Pbs { deltas, .. } => {
                    for d in deltas {
                        check_range("extinction ratio", *d, 0.0, MAX_EXTINCTION)?;
                    }
                }
                OpticalComponent::Hwp {
                    theta, delta_theta, ..
                }
                | OpticalComponent::Qwp {
                    theta, delta_theta, ..
                } => {
                    check_range("theta", *theta, 0.0, FRAC_PI_2)?;
                    check_range("delta_theta", *delta_theta, 0.0, f64::MAX)?;
                }
                OpticalComponent::NotPlate { mu, .. } if !mu.is_finite() => {
                    return Err(Error::NonFinite);
                }
                _ => {}
            }
        }
        Ok(compile(self)?.warnings)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }

    /// Same train with all leakage and NOT-plate errors removed.
    pub fn idealized(&self) -> Self {
        let mut t = self.clone();
        for c in &mut t.components {
            match c {
                OpticalComponent::Pbs { deltas, .. } => *deltas = [0.0; 4],
                OpticalComponent::NotPlate { mu, .. } => *mu = 0.0,
                _ => {}
            }
        }
        t
    }
}

/// Which parameter of a device a derivative refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSlot {
    Delta(usize),
    Theta,
    Mu,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainParam {
    pub device: String,
    pub slot: ParamSlot,
    pub value: f64,
    /// Least count declared on the component, zero if none.
    pub uncertainty: f64,
}

type Real4 = [[f64; 4]; 4];
type Jones = [[C64; 2]; 2];

#[derive(Clone, Debug)]
enum StageOp {
    Pbs {
        inputs: [Option<Path>; 2],
        outputs: [Path; 2],
        deltas: [f64; 4],
        adjoint: bool,
    },
    Hwp {
        paths: Vec<Path>,
        theta: f64,
    },
    Qwp {
        paths: Vec<Path>,
        theta: f64,
    },
    Not {
        paths: Vec<Path>,
        mu: f64,
    },
    Delay {
        path: Path,
    },
    Identity,
}

#[derive(Clone, Debug)]
struct Stage {
    op: StageOp,
    device: String,
}

/// Compiled train acting linearly on mode states.
#[derive(Clone, Debug)]
pub struct TrainMap {
    label: String,
    inputs: Vec<Path>,
    stages: Vec<Stage>,
    params: Vec<TrainParam>,
    z: Option<TemporalMismatch>,
    warnings: Vec<String>,
}

fn c(x: f64) -> C64 {
    C64::new(x, 0.0)
}

/// Rows `(H_out1, V_out1, H_out2, V_out2)`, columns `(H_in1, V_in1, H_in2, V_in2)`.
pub fn pbs_matrix(d: [f64; 4]) -> Real4 {
    let [t, tp, t1, t1p] = d;
    [
        [1.0 - t, 0.0, t, 0.0],
        [0.0, tp, 0.0, 1.0 - tp],
        [t1, 0.0, 1.0 - t1, 0.0],
        [0.0, 1.0 - t1p, 0.0, t1p],
    ]
}

fn pbs_dmatrix(slot: usize) -> Real4 {
    let mut m = [[0.0; 4]; 4];
    match slot {
        0 => {
            m[0][0] = -1.0;
            m[0][2] = 1.0;
        }
        1 => {
            m[1][1] = 1.0;
            m[1][3] = -1.0;
        }
        2 => {
            m[2][0] = 1.0;
            m[2][2] = -1.0;
        }
        _ => {
            m[3][1] = -1.0;
            m[3][3] = 1.0;
        }
    }
    m
}

fn transpose4(m: Real4) -> Real4 {
    let mut t = [[0.0; 4]; 4];
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            t[j][i] = *v;
        }
    }
    t
}

/// Half-wave plate `[[-cos 2t, sin 2t], [sin 2t, cos 2t]]`.
pub fn hwp_jones(theta: f64) -> Jones {
    let (s, co) = (2.0 * theta).sin_cos();
    [[c(-co), c(s)], [c(s), c(co)]]
}

fn hwp_djones(theta: f64) -> Jones {
    let (s, co) = (2.0 * theta).sin_cos();
    [[c(2.0 * s), c(2.0 * co)], [c(2.0 * co), c(-2.0 * s)]]
}

/// Quarter-wave plate in the same angle convention as `hwp_jones`.
pub fn qwp_jones(theta: f64) -> Jones {
    let a = FRAC_PI_2 - theta;
    let (s, co) = a.sin_cos();
    let i = C64::new(0.0, 1.0);
    let off = C64::new(1.0, -1.0) * (s * co);
    [
        [c(co * co) + i * (s * s), off],
        [off, c(s * s) + i * (co * co)],
    ]
}

fn qwp_djones(theta: f64) -> Jones {
    let a = FRAC_PI_2 - theta;
    let (s2, c2) = (2.0 * a).sin_cos();
    let k = -C64::new(1.0, -1.0);
    [[k * (-s2), k * c2], [k * c2, k * s2]]
}

/// `sigma_x - mu sigma_z`.
pub fn not_jones(mu: f64) -> Jones {
    [[c(-mu), c(1.0)], [c(1.0), c(mu)]]
}

fn not_djones() -> Jones {
    [[c(-1.0), c(0.0)], [c(0.0), c(1.0)]]
}

pub fn jones_matrix(j: &Jones) -> ComplexMatrix {
    ComplexMatrix::from_vec(2, 2, vec![j[0][0], j[0][1], j[1][0], j[1][1]])
        .expect("2x2 Jones matrix")
}

/// `sin^2(2 theta)`.
pub fn angle_to_damping(theta: f64) -> f64 {
    (2.0 * theta).sin().powi(2)
}

/// Inverse of `angle_to_damping` on `[0, pi/4]`.
pub fn damping_to_angle(p: f64) -> Result<f64> {
    check_range("P", p, 0.0, 1.0)?;
    Ok(p.sqrt().asin() / 2.0)
}

fn compile(train: &OpticalTrain) -> Result<TrainMap> {
    let mut warnings = Vec::new();
    let mut live: BTreeSet<Path> = BTreeSet::new();
    for p in &train.inputs {
        if *p == Path::P1 {
            warnings.push(
                "input port 1 is populated; its contributions are neglected by the reference model"
                    .into(),
            );
        }
        if p.is_terminal() {
            return Err(Error::InvalidTrain(format!(
                "input path {p} is a terminal path"
            )));
        }
        live.insert(*p);
    }
    if live.is_empty() {
        return Err(Error::InvalidTrain("train has no input path".into()));
    }

    let mut stages = Vec::with_capacity(train.components.len());
    let mut params: Vec<TrainParam> = Vec::new();
    let mut devices: BTreeMap<String, OpticalComponent> = BTreeMap::new();
    let mut z: Option<TemporalMismatch> = None;
    let mut delayed: BTreeSet<Path> = BTreeSet::new();

    let require = |live: &BTreeSet<Path>, p: &Path| -> Result<()> {
        if live.contains(p) {
            Ok(())
        } else {
            Err(Error::UnconnectedPath {
                path: p.to_string(),
            })
        }
    };

    for (i, comp) in train.components.iter().enumerate() {
        let device = device_name(comp, i);
        if let Some(prev) = devices.get(&device) {
            if !same_device_params(prev, comp) {
                return Err(Error::InvalidTrain(format!(
                    "device {device} is used with inconsistent parameters"
                )));
            }
        } else {
            match comp {
                OpticalComponent::Pbs { deltas, .. } => {
                    for (k, d) in deltas.iter().enumerate() {
                        params.push(TrainParam {
                            device: device.clone(),
                            slot: ParamSlot::Delta(k),
                            value: *d,
                            uncertainty: 0.0,
                        });
                    }
                }
                OpticalComponent::Hwp {
                    theta, delta_theta, ..
                }
                | OpticalComponent::Qwp {
                    theta, delta_theta, ..
                } => params.push(TrainParam {
                    device: device.clone(),
                    slot: ParamSlot::Theta,
                    value: *theta,
                    uncertainty: *delta_theta,
                }),
                OpticalComponent::NotPlate { mu, .. } => params.push(TrainParam {
                    device: device.clone(),
                    slot: ParamSlot::Mu,
                    value: *mu,
                    uncertainty: 0.0,
                }),
                _ => {}
            }
            devices.insert(device.clone(), comp.clone());
        }

        let op = match comp {
            OpticalComponent::Pbs {
                inputs,
                outputs,
                deltas,
                adjoint,
                ..
            } => {
                if !deltas.iter().all(|d| d.is_finite()) {
                    return Err(Error::NonFinite);
                }
                if outputs[0] == outputs[1] {
                    return Err(Error::InvalidTrain(format!(
                        "pbs at component {i} sends both ports to path {}",
                        outputs[0]
                    )));
                }
                let mut ins = [None, None];
                for (slot, p) in inputs.iter().enumerate() {
                    if let Some(p) = p {
                        // An unpopulated port 1 is vacuum.
                        if *p == Path::P1 && !live.contains(p) {
                            continue;
                        }
                        require(&live, p)?;
                        live.remove(p);
                        ins[slot] = Some(*p);
                    }
                }
                if ins.iter().all(Option::is_none) {
                    return Err(Error::InvalidTrain(format!(
                        "pbs at component {i} has no populated input"
                    )));
                }
                for o in outputs {
                    if live.contains(o) {
                        return Err(Error::InvalidTrain(format!(
                            "path {o} is already occupied at component {i}"
                        )));
                    }
                    live.insert(*o);
                }
                for p in ins.iter().flatten() {
                    if delayed.remove(p) {
                        for o in outputs {
                            delayed.insert(*o);
                        }
                    }
                }
                StageOp::Pbs {
                    inputs: ins,
                    outputs: *outputs,
                    deltas: *deltas,
                    adjoint: *adjoint,
                }
            }
            OpticalComponent::Hwp { paths, theta, .. }
            | OpticalComponent::Qwp { paths, theta, .. } => {
                if !theta.is_finite() {
                    return Err(Error::NonFinite);
                }
                for p in paths {
                    require(&live, p)?;
                }
                if matches!(comp, OpticalComponent::Hwp { .. }) {
                    StageOp::Hwp {
                        paths: paths.clone(),
                        theta: *theta,
                    }
                } else {
                    StageOp::Qwp {
                        paths: paths.clone(),
                        theta: *theta,
                    }
                }
            }
            OpticalComponent::NotPlate { paths, mu, .. } => {
                for p in paths {
                    require(&live, p)?;
                }
                StageOp::Not {
                    paths: paths.clone(),
                    mu: *mu,
                }
            }
            OpticalComponent::PathDelay { path, z: zc } => {
                require(&live, path)?;
                if let Some(prev) = z {
                    if prev != *zc {
                        return Err(Error::InvalidTrain(
                            "delays in one train disagree on z".into(),
                        ));
                    }
                }
                if !delayed.insert(*path) {
                    return Err(Error::InvalidTrain(format!("path {path} is delayed twice")));
                }
                z = Some(*zc);
                StageOp::Delay { path: *path }
            }
            OpticalComponent::Compensator { path } => {
                require(&live, path)?;
                StageOp::Identity
            }
        };
        stages.push(Stage { op, device });
    }

    if let Some(p) = live.iter().find(|p| !p.is_terminal()) {
        return Err(Error::UnconnectedPath {
            path: p.to_string(),
        });
    }

    Ok(TrainMap {
        label: train.label.clone(),
        inputs: train.inputs.clone(),
        stages,
        params,
        z,
        warnings,
    })
}

/// Explicit device tag, or `kind#index` for untagged components.
pub fn device_name(comp: &OpticalComponent, index: usize) -> String {
    comp.device()
        .map(str::to_owned)
        .unwrap_or_else(|| format!("{}#{index}", comp.kind()))
}

fn same_device_params(a: &OpticalComponent, b: &OpticalComponent) -> bool {
    use OpticalComponent::*;
    match (a, b) {
        (Pbs { deltas: x, .. }, Pbs { deltas: y, .. }) => x == y,
        (Hwp { theta: x, .. }, Hwp { theta: y, .. })
        | (Qwp { theta: x, .. }, Qwp { theta: y, .. }) => x == y,
        (NotPlate { mu: x, .. }, NotPlate { mu: y, .. }) => x == y,
        _ => false,
    }
}

/// Compiles a train. With `ideal`, leakage and NOT errors are zeroed first.
pub fn build_train_unitary(train: &OpticalTrain, ideal: bool) -> Result<TrainMap> {
    if ideal {
        compile(&train.idealized())
    } else {
        compile(train)
    }
}

fn apply_real4(state: &mut ModeState, ins: [Option<Path>; 2], outs: [Path; 2], m: &Real4) {
    for delayed in [false, true] {
        let mut v = [C64::default(); 4];
        for (slot, p) in ins.iter().enumerate() {
            if let Some(p) = p {
                v[2 * slot] = state.take(&ModeKey {
                    path: *p,
                    delayed,
                    pol: Pol::H,
                });
                v[2 * slot + 1] = state.take(&ModeKey {
                    path: *p,
                    delayed,
                    pol: Pol::V,
                });
            }
        }
        if v.iter().all(|a| *a == C64::default()) {
            continue;
        }
        for (r, row) in m.iter().enumerate() {
            let amp: C64 = row.iter().zip(&v).map(|(x, a)| a * *x).sum();
            let key = ModeKey {
                path: outs[r / 2],
                delayed,
                pol: if r % 2 == 0 { Pol::H } else { Pol::V },
            };
            let prev = state.get(&key);
            state.insert(key, prev + amp);
        }
    }
}

fn apply_jones(state: &mut ModeState, paths: &[Path], j: &Jones) {
    for p in paths {
        for delayed in [false, true] {
            let kh = ModeKey {
                path: *p,
                delayed,
                pol: Pol::H,
            };
            let kv = ModeKey { pol: Pol::V, ..kh };
            let (h, v) = (state.get(&kh), state.get(&kv));
            state.insert(kh, j[0][0] * h + j[0][1] * v);
            state.insert(kv, j[1][0] * h + j[1][1] * v);
        }
    }
}

fn apply_delay(state: &mut ModeState, path: Path) {
    for pol in [Pol::H, Pol::V] {
        let a = state.take(&ModeKey::new(pol, path));
        let key = ModeKey {
            path,
            delayed: true,
            pol,
        };
        let prev = state.get(&key);
        state.insert(key, prev + a);
    }
}

fn add_into(acc: &mut ModeState, other: &ModeState) {
    for (k, a) in other.iter() {
        let prev = acc.get(k);
        acc.insert(*k, prev + a);
    }
}

impl Stage {
    fn apply(&self, s: &mut ModeState) {
        match &self.op {
            StageOp::Pbs {
                inputs,
                outputs,
                deltas,
                adjoint,
            } => {
                let m = pbs_matrix(*deltas);
                let m = if *adjoint { transpose4(m) } else { m };
                apply_real4(s, *inputs, *outputs, &m);
            }
            StageOp::Hwp { paths, theta } => apply_jones(s, paths, &hwp_jones(*theta)),
            StageOp::Qwp { paths, theta } => apply_jones(s, paths, &qwp_jones(*theta)),
            StageOp::Not { paths, mu } => apply_jones(s, paths, &not_jones(*mu)),
            StageOp::Delay { path } => apply_delay(s, *path),
            StageOp::Identity => {}
        }
    }

    /// The stage with its matrix replaced by the derivative in `slot`.
    /// Returns `None` when the stage does not depend on that parameter.
    fn apply_derivative(&self, s: &ModeState, slot: ParamSlot) -> Option<ModeState> {
        let mut out = s.clone();
        match (&self.op, slot) {
            (
                StageOp::Pbs {
                    inputs,
                    outputs,
                    adjoint,
                    ..
                },
                ParamSlot::Delta(k),
            ) => {
                let m = pbs_dmatrix(k);
                let m = if *adjoint { transpose4(m) } else { m };
                apply_real4(&mut out, *inputs, *outputs, &m);
            }
            (StageOp::Hwp { paths, theta }, ParamSlot::Theta) => {
                out = jones_on_paths(s, paths, &hwp_djones(*theta));
            }
            (StageOp::Qwp { paths, theta }, ParamSlot::Theta) => {
                out = jones_on_paths(s, paths, &qwp_djones(*theta));
            }
            (StageOp::Not { paths, .. }, ParamSlot::Mu) => {
                out = jones_on_paths(s, paths, &not_djones())
            }
            _ => return None,
        }
        // Modes the derivative does not touch contribute nothing.
        if let StageOp::Pbs {
            inputs, outputs, ..
        } = &self.op
        {
            let touched: BTreeSet<Path> = inputs
                .iter()
                .flatten()
                .chain(outputs.iter())
                .copied()
                .collect();
            out.amps.retain(|k, _| touched.contains(&k.path));
        }
        Some(out)
    }
}

/// `j` applied to the listed paths of `src`, with every other mode dropped.
fn jones_on_paths(src: &ModeState, paths: &[Path], j: &Jones) -> ModeState {
    let mut sub = ModeState::new();
    for (k, a) in src.iter() {
        if paths.contains(&k.path) {
            sub.insert(*k, *a);
        }
    }
    apply_jones(&mut sub, paths, j);
    sub
}

/// One polarization block `<out path| U |in path>`.
#[derive(Clone, Debug, PartialEq)]
pub struct LegBlock {
    pub path: Path,
    pub delayed: bool,
    pub k: ComplexMatrix,
}

impl TrainMap {
    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn inputs(&self) -> &[Path] {
        &self.inputs
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn parameters(&self) -> &[TrainParam] {
        &self.params
    }

    /// Coincidence factor declared by the train's delay stage.
    pub fn mismatch(&self) -> Option<TemporalMismatch> {
        self.z
    }

    pub fn apply(&self, input: &ModeState) -> ModeState {
        let mut s = input.clone();
        for st in &self.stages {
            st.apply(&mut s);
        }
        s
    }

    /// Value and derivative with respect to parameter `param`, by forward
    /// propagation of the tangent alongside the amplitudes.
    pub fn apply_with_tangent(
        &self,
        input: &ModeState,
        param: usize,
    ) -> Result<(ModeState, ModeState)> {
        let target = self
            .params
            .get(param)
            .ok_or_else(|| Error::InvalidConfig(format!("no parameter {param}")))?;
        let mut val = input.clone();
        let mut tan = ModeState::new();
        for st in &self.stages {
            st.apply(&mut tan);
            if st.device == target.device {
                if let Some(d) = st.apply_derivative(&val, target.slot) {
                    add_into(&mut tan, &d);
                }
            }
            st.apply(&mut val);
        }
        Ok((val, tan))
    }

    /// `U|H, in>` and `U|V, in>`.
    pub fn fg(&self, input: Path) -> (ModeState, ModeState) {
        (
            self.apply(&ModeState::single(Pol::H, input)),
            self.apply(&ModeState::single(Pol::V, input)),
        )
    }

    /// Blocks for every occupied output port, including negligible ones.
    pub fn leg_blocks(&self, input: Path) -> Vec<LegBlock> {
        let (f, g) = self.fg(input);
        let ports: Vec<_> = f.ports().union(&g.ports()).copied().collect();
        blocks_on(&f, &g, &ports)
    }

    /// Blocks on all eight terminal ports, so that sets from different
    /// parameter values line up index by index.
    pub fn leg_blocks_full(&self, input: Path) -> Vec<LegBlock> {
        let (f, g) = self.fg(input);
        blocks_on(&f, &g, &terminal_ports())
    }

    /// Derivatives of `leg_blocks_full` with respect to parameter `param`.
    pub fn leg_tangent_full(&self, input: Path, param: usize) -> Result<Vec<LegBlock>> {
        let (_, df) = self.apply_with_tangent(&ModeState::single(Pol::H, input), param)?;
        let (_, dg) = self.apply_with_tangent(&ModeState::single(Pol::V, input), param)?;
        Ok(blocks_on(&df, &dg, &terminal_ports()))
    }
}

/// Every terminal path in both time bins.
pub fn terminal_ports() -> Vec<(Path, bool)> {
    Path::TERMINALS
        .iter()
        .flat_map(|p| [(*p, false), (*p, true)])
        .collect()
}

/// Columns are the images of `|H>` (`f`) and `|V>` (`g`).
pub fn blocks_on(f: &ModeState, g: &ModeState, ports: &[(Path, bool)]) -> Vec<LegBlock> {
    ports
        .iter()
        .map(|&(path, delayed)| {
            let mut k = ComplexMatrix::zeros(2, 2);
            for (col, st) in [f, g].iter().enumerate() {
                for pol in [Pol::H, Pol::V] {
                    k[(pol.index(), col)] = st.amp_at(pol, path, delayed);
                }
            }
            LegBlock { path, delayed, k }
        })
        .collect()
}

fn keep(b: &LegBlock, outs: Option<&[Path]>) -> bool {
    b.path.is_terminal() && outs.is_none_or(|o| o.contains(&b.path))
}

/// Single-qubit Kraus set of one leg. `env_out` restricts the retained paths.
pub fn derive_kraus_single(
    train: &TrainMap,
    env_in: Path,
    env_out: Option<&[Path]>,
) -> Result<KrausChannel> {
    let ops: Vec<ComplexMatrix> = train
        .leg_blocks(env_in)
        .into_iter()
        .filter(|b| keep(b, env_out) && b.k.max_abs() > BLOCK_FLOOR)
        .map(|b| b.k)
        .collect();
    if ops.is_empty() {
        return Err(Error::PostSelectedAway { trace: 0.0 });
    }
    KrausChannel::new_unchecked(format!("derived({})", train.label), ops)
}

/// Index pairs and amplitude factors of the two-qubit operators built from two
/// legs' blocks. A pair with exactly one delayed photon carries `Re(sqrt z)`.
pub fn pair_terms(
    a: &[LegBlock],
    b: &[LegBlock],
    env_out: Option<&[(Path, Path)]>,
    z: TemporalMismatch,
) -> Vec<(usize, usize, f64)> {
    let mut terms = Vec::new();
    for (i, ba) in a.iter().enumerate() {
        for (j, bb) in b.iter().enumerate() {
            if !ba.path.is_terminal() || !bb.path.is_terminal() {
                continue;
            }
            if let Some(outs) = env_out {
                if !outs.contains(&(ba.path, bb.path)) {
                    continue;
                }
            }
            let f = if ba.delayed != bb.delayed {
                z.factor()
            } else {
                1.0
            };
            if f != 0.0 {
                terms.push((i, j, f));
            }
        }
    }
    terms
}

/// Shared coincidence factor of two legs. Legs without a delay impose none.
pub fn pair_mismatch(a: &TrainMap, b: &TrainMap) -> Result<TemporalMismatch> {
    match (a.mismatch(), b.mismatch()) {
        (Some(x), Some(y)) if x != y => {
            Err(Error::InvalidTrain("the two legs disagree on z".into()))
        }
        (Some(x), _) | (None, Some(x)) => Ok(x),
        (None, None) => Ok(TemporalMismatch::Overlapping),
    }
}

/// Two-qubit Kraus set of a pair of legs, one per qubit.
///
/// `env_out` lists the retained output path pairs; `None` keeps all terminal
/// pairs. Coincidence between time bins follows the legs' delay stages.
pub fn derive_kraus(
    a: &TrainMap,
    b: &TrainMap,
    env_in: (Path, Path),
    env_out: Option<&[(Path, Path)]>,
) -> Result<KrausChannel> {
    let z = pair_mismatch(a, b)?;
    let ba = a.leg_blocks(env_in.0);
    let bb = b.leg_blocks(env_in.1);
    let mut ops = Vec::new();
    for (i, j, f) in pair_terms(&ba, &bb, env_out, z) {
        let k = kron(&ba[i].k, &bb[j].k)?.scale_real(f);
        if k.max_abs() > BLOCK_FLOOR {
            ops.push(k);
        }
    }
    if ops.is_empty() {
        return Err(Error::PostSelectedAway { trace: 0.0 });
    }
    KrausChannel::new_unchecked(format!("derived({}|{})", a.label, b.label), ops)
}

/// Settings of one displaced-Sagnac leg.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegSettings {
    pub theta_p: f64,
    pub theta_q: f64,
    #[serde(default)]
    pub p1: [f64; 4],
    #[serde(default)]
    pub p2: [f64; 4],
    #[serde(default)]
    pub mu: f64,
    #[serde(default = "yes")]
    pub not_plate: bool,
    #[serde(default)]
    pub z: TemporalMismatch,
}

fn yes() -> bool {
    true
}

impl LegSettings {
    /// Ideal leg with damping strengths `p` and `q`.
    pub fn ideal(p: f64, q: f64, z: TemporalMismatch) -> Result<Self> {
        Ok(Self {
            theta_p: damping_to_angle(p)?,
            theta_q: damping_to_angle(q)?,
            p1: [0.0; 4],
            p2: [0.0; 4],
            mu: 0.0,
            not_plate: true,
            z,
        })
    }
}

/// PBS, half-wave plate on the reflected arm, then a recombining PBS.
pub fn standard_leg(theta: f64) -> OpticalTrain {
    use OpticalComponent::*;
    OpticalTrain::new(
        "standard",
        vec![
            Pbs {
                device: Some("P1".into()),
                inputs: [Some(Path::P0), None],
                outputs: [Path::P2, Path::P3],
                deltas: [0.0; 4],
                adjoint: false,
            },
            Hwp {
                device: Some("H1".into()),
                paths: vec![Path::P3],
                theta,
                delta_theta: 0.0,
            },
            Pbs {
                device: Some("P2".into()),
                inputs: [Some(Path::P3), Some(Path::P2)],
                outputs: [Path::B, Path::A],
                deltas: [0.0; 4],
                adjoint: false,
            },
        ],
    )
}

/// Full displaced-Sagnac leg with the embedded NOT plate, the inner delayed
/// loop and the return pass through the first PBS.
pub fn dsi_leg(s: &LegSettings) -> OpticalTrain {
    use OpticalComponent::*;
    let p1 = |inputs, outputs, adjoint| Pbs {
        device: Some("P1".into()),
        inputs,
        outputs,
        deltas: s.p1,
        adjoint,
    };
    let mut comps = vec![
        p1([Some(Path::P0), None], [Path::P2, Path::P3], false),
        Hwp {
            device: Some("H1".into()),
            paths: vec![Path::P3],
            theta: s.theta_p,
            delta_theta: 0.0,
        },
    ];
    if s.not_plate {
        comps.push(NotPlate {
            device: Some("NOT".into()),
            paths: vec![Path::P2, Path::P3],
            mu: s.mu,
        });
    }
    comps.extend([
        Pbs {
            device: Some("P2".into()),
            inputs: [Some(Path::P3), None],
            outputs: [Path::P4, Path::P5],
            deltas: s.p2,
            adjoint: false,
        },
        PathDelay {
            path: Path::P5,
            z: s.z,
        },
        Hwp {
            device: Some("H2".into()),
            paths: vec![Path::P2, Path::P5],
            theta: s.theta_q,
            delta_theta: 0.0,
        },
        p1([Some(Path::P4), Some(Path::P2)], [Path::B, Path::A], true),
        p1([Some(Path::P5), None], [Path::BPrime, Path::APrime], true),
    ]);
    OpticalTrain::new("dsi", comps)
}

/// Largest element-wise gap accepted between derived and closed-form Kraus sets.
pub const ORACLE_TOLERANCE: f64 = 1e-8;

/// Derived-versus-closed-form comparison at one `(p, z)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleRow {
    pub p: f64,
    pub z: TemporalMismatch,
    /// Ideal DSI pair against the correlated channel with embedded flip.
    pub pair_deviation: f64,
    /// Standard leg against the single-qubit damping channel.
    pub single_deviation: f64,
    /// Difference of the completeness deficits of the two pair sets.
    pub deficit_gap: f64,
    /// False for the phase mode, whose reference is the model itself.
    pub has_reference: bool,
}

impl OracleRow {
    pub fn max_deviation(&self) -> f64 {
        self.pair_deviation
            .max(self.single_deviation)
            .max(self.deficit_gap)
    }

    pub fn passes(&self) -> bool {
        !self.has_reference || self.max_deviation() <= ORACLE_TOLERANCE
    }
}

/// Compares the optics-derived Kraus sets with the closed forms over `p_grid x zs`.
pub fn verify_oracle(p_grid: &[f64], zs: &[TemporalMismatch]) -> Result<Vec<OracleRow>> {
    use crate::channels::{correlated_adc_kraus, kraus_set_deviation, standard_adc_kraus};
    let mut rows = Vec::with_capacity(p_grid.len() * zs.len());
    for &z in zs {
        for &p in p_grid {
            let leg = build_train_unitary(&dsi_leg(&LegSettings::ideal(p, 0.0, z)?), true)?;
            let derived = derive_kraus(&leg, &leg, (Path::P0, Path::P0), None)?;
            let closed = correlated_adc_kraus(p, z, true)?;
            let single = build_train_unitary(&standard_leg(damping_to_angle(p)?), true)?;
            let single = derive_kraus_single(&single, Path::P0, None)?;
            rows.push(OracleRow {
                p,
                z,
                pair_deviation: kraus_set_deviation(derived.operators(), closed.operators()),
                single_deviation: kraus_set_deviation(
                    single.operators(),
                    standard_adc_kraus(p)?.operators(),
                ),
                deficit_gap: (derived.deficit_norm() - closed.deficit_norm()).abs(),
                has_reference: z.is_binary(),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{
        compose, correlated_adc_kraus, kraus_set_deviation, product_adc, standard_adc_kraus,
    };
    use crate::qmat::pauli_x;
    use crate::qmat::test_util::rng;
    use rand::Rng;
    use std::f64::consts::{FRAC_PI_4, FRAC_PI_8, PI};

    fn ideal_leg(p: f64, q: f64, z: TemporalMismatch) -> TrainMap {
        let s = LegSettings::ideal(p, q, z).unwrap();
        build_train_unitary(&dsi_leg(&s), true).unwrap()
    }

    #[test]
    fn damping_angle_examples() {
        assert_eq!(angle_to_damping(0.0), 0.0);
        assert!((angle_to_damping(FRAC_PI_4) - 1.0).abs() < 1e-15);
        assert!((angle_to_damping(FRAC_PI_8) - 0.5).abs() < 1e-15);
        for p in [0.0, 0.1, 0.5, 0.9, 1.0] {
            assert!((angle_to_damping(damping_to_angle(p).unwrap()) - p).abs() < 1e-14);
        }
    }

    #[test]
    fn ideal_pbs_routes_h_through_and_v_across() {
        let t = OpticalTrain::new(
            "pbs",
            vec![OpticalComponent::Pbs {
                device: None,
                inputs: [Some(Path::P0), None],
                outputs: [Path::A, Path::B],
                deltas: [0.0; 4],
                adjoint: false,
            }],
        );
        let m = build_train_unitary(&t, true).unwrap();
        let (f, g) = m.fg(Path::P0);
        assert_eq!(f.amp(Pol::H, Path::A), c(1.0));
        assert_eq!(f.norm_sqr(), 1.0);
        assert_eq!(g.amp(Pol::V, Path::B), c(1.0));
        assert_eq!(g.norm_sqr(), 1.0);
    }

    #[test]
    fn not_plate_matrix() {
        let mu = PI / 180.0;
        let n = jones_matrix(&not_jones(mu));
        let expect = &pauli_x() - &crate::qmat::pauli_z().scale_real(mu);
        assert!(n.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn ideal_leg_at_zero_damping_is_sigma_x_into_b() {
        let m = ideal_leg(0.0, 0.0, TemporalMismatch::Overlapping);
        let ch = derive_kraus_single(&m, Path::P0, None).unwrap();
        assert_eq!(ch.len(), 1);
        assert!(ch.operators()[0].max_abs_diff(&pauli_x()) < 1e-15);
        let blocks = m.leg_blocks(Path::P0);
        let b = blocks.iter().find(|b| b.path == Path::B).unwrap();
        assert!(b.k.max_abs_diff(&pauli_x()) < 1e-15);
    }

    #[test]
    fn ideal_pair_at_zero_damping_is_xx() {
        let m = ideal_leg(0.0, 0.0, TemporalMismatch::Separated);
        let ch = derive_kraus(&m, &m, (Path::P0, Path::P0), None).unwrap();
        assert_eq!(ch.len(), 1);
        let xx = kron(&pauli_x(), &pauli_x()).unwrap();
        assert!(ch.operators()[0].max_abs_diff(&xx) < 1e-15);
    }

    #[test]
    fn standard_leg_is_amplitude_damping() {
        for i in 0..=20 {
            let p = i as f64 / 20.0;
            let t = standard_leg(damping_to_angle(p).unwrap());
            let m = build_train_unitary(&t, true).unwrap();
            let derived = derive_kraus_single(&m, Path::P0, None).unwrap();
            let closed = standard_adc_kraus(p).unwrap();
            assert!(
                kraus_set_deviation(derived.operators(), closed.operators()) < 1e-10,
                "p={p}"
            );
            assert!(derived.deficit_norm() < 1e-10);
        }
    }

    #[test]
    fn ideal_pair_reproduces_correlated_channel() {
        for z in [TemporalMismatch::Overlapping, TemporalMismatch::Separated] {
            for i in 0..=20 {
                let p = i as f64 / 20.0;
                let m = ideal_leg(p, 0.0, z);
                let derived = derive_kraus(&m, &m, (Path::P0, Path::P0), None).unwrap();
                let closed = correlated_adc_kraus(p, z, true).unwrap();
                assert!(
                    kraus_set_deviation(derived.operators(), closed.operators()) < 1e-10,
                    "p={p} z={z:?}"
                );
                assert!((derived.deficit_norm() - closed.deficit_norm()).abs() < 1e-10);
                if z == TemporalMismatch::Overlapping {
                    assert!(derived.deficit_norm() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn second_damping_composes_after_correlated_channel() {
        let mut r = rng(3);
        for _ in 0..10 {
            let (p, q): (f64, f64) = (r.random(), r.random());
            let m = ideal_leg(p, q, TemporalMismatch::Separated);
            let derived = derive_kraus(&m, &m, (Path::P0, Path::P0), None).unwrap();
            let closed = compose(
                &correlated_adc_kraus(p, TemporalMismatch::Separated, true).unwrap(),
                &product_adc(q).unwrap(),
            )
            .unwrap();
            let rho =
                crate::states::make_state(&crate::states::StateParams::with_alpha(0.55).unwrap());
            let a = derived.apply_matrix(rho.matrix());
            let b = closed.apply_matrix(rho.matrix());
            assert!(a.max_abs_diff(&b) < 1e-12, "p={p} q={q}");
        }
    }

    struct Fg {
        f: BTreeMap<(Pol, Path), f64>,
        g: BTreeMap<(Pol, Path), f64>,
    }

    // Hand expansion of the leg with leakage on both PBS and a tilted NOT.
    fn fg_closed_form(tp: f64, tq: f64, d: [f64; 4], e: [f64; 4], mu: f64) -> Fg {
        let [dl, dp, d1, d1p] = d;
        let [el, ep, e1, e1p] = e;
        let (big_s, big_c) = (2.0 * tp).sin_cos();
        let (s, co) = (2.0 * tq).sin_cos();
        let fm = big_c - mu * big_s;
        let gp = big_s + mu * big_c;
        let (sm, cm) = (s + mu * co, co - mu * s);
        use Path::*;
        use Pol::*;
        let mut f = BTreeMap::new();
        f.insert(
            (H, A),
            dl * d1 * (1.0 - el) * gp + (1.0 - d1) * (1.0 - dl) * sm,
        );
        f.insert(
            (H, B),
            (1.0 - dl) * d1 * (1.0 - el) * gp + d1 * (1.0 - dl) * sm,
        );
        f.insert((V, A), -(1.0 - dp) * d1 * ep * fm + d1p * (1.0 - dl) * cm);
        f.insert((V, B), -dp * d1 * ep * fm + (1.0 - d1p) * (1.0 - dl) * cm);
        let h5 = d1 * (-e1 * gp * co - (1.0 - e1p) * fm * s);
        let v5 = d1 * (e1 * gp * s - (1.0 - e1p) * fm * co);
        f.insert((H, APrime), dl * h5);
        f.insert((H, BPrime), (1.0 - dl) * h5);
        f.insert((V, APrime), (1.0 - dp) * v5);
        f.insert((V, BPrime), dp * v5);

        let (h2, v2) = (-dp * cm, dp * sm);
        let (h4, v4) = ((1.0 - d1p) * (1.0 - el) * fm, (1.0 - d1p) * ep * gp);
        let h5 = (1.0 - d1p) * ((1.0 - e1p) * gp * s - e1 * fm * co);
        let v5 = (1.0 - d1p) * (e1 * fm * s + (1.0 - e1p) * gp * co);
        let mut g = BTreeMap::new();
        g.insert((H, B), (1.0 - dl) * h4 + d1 * h2);
        g.insert((V, B), dp * v4 + (1.0 - d1p) * v2);
        g.insert((H, A), dl * h4 + (1.0 - d1) * h2);
        g.insert((V, A), (1.0 - dp) * v4 + d1p * v2);
        g.insert((H, BPrime), (1.0 - dl) * h5);
        g.insert((V, BPrime), dp * v5);
        g.insert((H, APrime), dl * h5);
        g.insert((V, APrime), (1.0 - dp) * v5);
        Fg { f, g }
    }

    #[test]
    fn imperfect_leg_matches_hand_expansion() {
        let mut r = rng(11);
        for _ in 0..20 {
            let mut d = [0.0; 4];
            let mut e = [0.0; 4];
            for x in d.iter_mut().chain(e.iter_mut()) {
                *x = r.random_range(0.0..1e-2);
            }
            let mu = r.random_range(-1e-2..1e-2);
            let (tp, tq) = (
                r.random_range(0.0..FRAC_PI_4),
                r.random_range(0.0..FRAC_PI_4),
            );
            let s = LegSettings {
                theta_p: tp,
                theta_q: tq,
                p1: d,
                p2: e,
                mu,
                not_plate: true,
                z: TemporalMismatch::Separated,
            };
            let m = build_train_unitary(&dsi_leg(&s), false).unwrap();
            let (f, g) = m.fg(Path::P0);
            let cf = fg_closed_form(tp, tq, d, e, mu);
            for (state, table) in [(&f, &cf.f), (&g, &cf.g)] {
                let mut total = 0.0;
                for ((pol, path), want) in table {
                    let delayed = matches!(path, Path::APrime | Path::BPrime);
                    let got = state.amp_at(*pol, *path, delayed);
                    assert!(
                        (got - c(*want)).norm() < 1e-13,
                        "{pol:?} {path}: {got} vs {want}"
                    );
                    assert!(got.im == 0.0);
                    total += want * want;
                }
                assert!((state.norm_sqr() - total).abs() < 1e-12, "stray amplitude");
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let s = LegSettings {
            theta_p: 0.4,
            theta_q: 0.2,
            p1: [1e-3, 2e-3, 3e-3, 4e-3],
            p2: [5e-3, 6e-3, 7e-3, 8e-3],
            mu: 0.01,
            not_plate: true,
            z: TemporalMismatch::Separated,
        };
        let train = dsi_leg(&s);
        let m = build_train_unitary(&train, false).unwrap();
        let h = 1e-6;
        for (idx, param) in m.parameters().iter().enumerate() {
            let bump = |sign: f64| {
                let mut t = train.clone();
                for comp in &mut t.components {
                    match (comp, param.slot) {
                        (
                            OpticalComponent::Pbs {
                                device: Some(d),
                                deltas,
                                ..
                            },
                            ParamSlot::Delta(k),
                        ) if *d == param.device => deltas[k] += sign * h,
                        (
                            OpticalComponent::Hwp {
                                device: Some(d),
                                theta,
                                ..
                            },
                            ParamSlot::Theta,
                        ) if *d == param.device => *theta += sign * h,
                        (
                            OpticalComponent::NotPlate {
                                device: Some(d),
                                mu,
                                ..
                            },
                            ParamSlot::Mu,
                        ) if *d == param.device => *mu += sign * h,
                        _ => {}
                    }
                }
                build_train_unitary(&t, false).unwrap()
            };
            let (plus, minus) = (bump(1.0), bump(-1.0));
            for pol in [Pol::H, Pol::V] {
                let input = ModeState::single(pol, Path::P0);
                let (_, tan) = m.apply_with_tangent(&input, idx).unwrap();
                let (a, b) = (plus.apply(&input), minus.apply(&input));
                let keys: BTreeSet<ModeKey> = a
                    .iter()
                    .chain(b.iter())
                    .chain(tan.iter())
                    .map(|(k, _)| *k)
                    .collect();
                for k in keys {
                    let fd = (a.get(&k) - b.get(&k)) / (2.0 * h);
                    assert!((fd - tan.get(&k)).norm() < 1e-7, "{param:?} {k:?}");
                }
            }
        }
    }

    #[test]
    fn qwp_derivative_matches_finite_difference() {
        let t = 0.3;
        let h = 1e-6;
        let d = qwp_djones(t);
        let (a, b) = (qwp_jones(t + h), qwp_jones(t - h));
        for r in 0..2 {
            for col in 0..2 {
                assert!(((a[r][col] - b[r][col]) / (2.0 * h) - d[r][col]).norm() < 1e-8);
            }
        }
        let q = jones_matrix(&qwp_jones(t));
        assert!((&q.adjoint() * &q).max_abs_diff(&ComplexMatrix::identity(2)) < 1e-14);
    }

    #[test]
    fn shared_device_parameters_are_shared() {
        let m = ideal_leg(0.3, 0.1, TemporalMismatch::Separated);
        let names: Vec<_> = m
            .parameters()
            .iter()
            .map(|p| (p.device.as_str(), p.slot))
            .collect();
        assert_eq!(names.iter().filter(|(d, _)| *d == "P1").count(), 4);
        assert_eq!(names.len(), 4 + 1 + 1 + 4 + 1);
    }

    #[test]
    fn unconnected_path_is_named() {
        let mut t = dsi_leg(&LegSettings::ideal(0.2, 0.0, TemporalMismatch::Separated).unwrap());
        t.components.pop();
        match build_train_unitary(&t, true) {
            Err(Error::UnconnectedPath { path }) => assert_eq!(path, "5"),
            other => panic!("{other:?}"),
        }
        let mut t = standard_leg(0.2);
        t.components.remove(0);
        assert!(
            matches!(build_train_unitary(&t, true), Err(Error::UnconnectedPath { path }) if path == "3")
        );
    }

    #[test]
    fn port_one_input_warns() {
        let mut t = standard_leg(0.2);
        t.inputs.push(Path::P1);
        if let OpticalComponent::Pbs { inputs, .. } = &mut t.components[0] {
            inputs[1] = Some(Path::P1);
        }
        let w = t.validate().unwrap();
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn validation_rejects_out_of_range_parameters() {
        let mut s = LegSettings::ideal(0.2, 0.0, TemporalMismatch::Separated).unwrap();
        s.p1[2] = 0.2;
        assert!(matches!(
            dsi_leg(&s).validate(),
            Err(Error::OutOfRange { .. })
        ));
        assert!(matches!(
            standard_leg(2.0).validate(),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn train_json_round_trips() {
        let s = LegSettings {
            theta_p: 0.3,
            theta_q: 0.1,
            p1: [1e-3, 0.0, 2e-3, 0.1],
            p2: [0.0; 4],
            mu: PI / 180.0,
            not_plate: true,
            z: TemporalMismatch::Phase { chi: 0.7 },
        };
        let t = dsi_leg(&s);
        let j = t.to_json().unwrap();
        assert_eq!(OpticalTrain::from_json(&j).unwrap(), t);
        assert!(j.contains("\"a'\""));
        assert!(OpticalTrain::from_json(r#"{"components":[{"kind":"mirror"}]}"#).is_err());
    }

    #[test]
    fn imperfect_not_plate_inflates_trace() {
        let mu = PI / 180.0;
        let mut s = LegSettings::ideal(0.0, 0.0, TemporalMismatch::Separated).unwrap();
        s.mu = mu;
        let m = build_train_unitary(&dsi_leg(&s), false).unwrap();
        let (f, g) = m.fg(Path::P0);
        assert!((f.norm_sqr() - (1.0 + mu * mu)).abs() < 1e-14);
        assert!((g.norm_sqr() - (1.0 + mu * mu)).abs() < 1e-14);
    }

    #[test]
    fn phase_mismatch_scales_cross_terms() {
        let chi = 1.1;
        let z = TemporalMismatch::Phase { chi };
        let m = ideal_leg(0.4, 0.0, z);
        let derived = derive_kraus(&m, &m, (Path::P0, Path::P0), None).unwrap();
        let closed = correlated_adc_kraus(0.4, z, true).unwrap();
        assert!(kraus_set_deviation(derived.operators(), closed.operators()) < 1e-10);
    }

    #[test]
    fn oracle_grid_passes_and_flags_phase_mode() {
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let zs = [TemporalMismatch::Separated, TemporalMismatch::Overlapping];
        let rows = verify_oracle(&grid, &zs).unwrap();
        assert_eq!(rows.len(), 22);
        assert!(rows
            .iter()
            .all(|r| r.has_reference && r.max_deviation() <= 1e-10));
        let zero = rows.iter().find(|r| r.p == 0.0).unwrap();
        assert!(zero.max_deviation() < 1e-15);
        let phase = verify_oracle(&[0.3], &[TemporalMismatch::Phase { chi: PI / 3.0 }]).unwrap();
        assert!(!phase[0].has_reference && phase[0].passes());
    }
}
