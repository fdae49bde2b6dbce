//! The manipulation pipeline: correlated first damping, optional local NOT,
//! then product damping swept over `P`; plus the two channel characterizations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    classify, concurrence_best, find_esd_threshold, uniform_grid, validate_grid, Classification,
    EsdThreshold, Trajectory, CLASSIFY_TOL,
};
use crate::channels::{
    apply_channel, apply_channel_traced, correlated_adc_kraus, not_unitary, product_adc,
    TemporalMismatch,
};
use crate::error::{check_range, Error, Result};
use crate::qmat::DensityMatrix;
use crate::states::{basis_state, make_state, purity, renormalize, StateParams, VV};

pub const DEFAULT_GRID_POINTS: usize = 201;

/// How the flip carried by the published first-channel operators composes
/// with the explicit NOT.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineVariant {
    /// Published operators (flip included) followed by the explicit flip.
    PublishedLiteral,
    /// Flip-free damping, then one flip iff `apply_not`.
    #[default]
    PhysicalSingleFlip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub state: StateParams,
    pub p: f64,
    pub z: TemporalMismatch,
    pub variant: PipelineVariant,
    pub apply_not: bool,
    pub renormalize_after_first: bool,
    /// Set when the run will be compared against reconstructed states.
    #[serde(default)]
    pub compare_tomography: bool,
    pub grid: Vec<f64>,
}

impl ProtocolConfig {
    /// Defaults: separated timing, single-flip variant, NOT applied, renormalized, 201 points.
    pub fn new(state: StateParams, p: f64) -> Self {
        let z = TemporalMismatch::default();
        Self {
            state,
            p,
            z,
            variant: PipelineVariant::default(),
            apply_not: true,
            renormalize_after_first: z.factor() == 0.0,
            compare_tomography: false,
            grid: uniform_grid(DEFAULT_GRID_POINTS).expect("valid default grid"),
        }
    }

    pub fn with_z(mut self, z: TemporalMismatch) -> Self {
        self.z = z;
        self.renormalize_after_first = z.factor() < 1.0 || self.renormalize_after_first;
        self
    }

    pub fn with_variant(mut self, variant: PipelineVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_not(mut self, apply_not: bool) -> Self {
        self.apply_not = apply_not;
        self
    }

    pub fn with_grid(mut self, grid: Vec<f64>) -> Self {
        self.grid = grid;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_range("p", self.p, 0.0, 1.0)?;
        validate_grid(&self.grid)?;
        let lossy = self.z.factor() < 1.0 && self.p > 0.0;
        if lossy && self.compare_tomography && !self.renormalize_after_first {
            return Err(Error::InvalidConfig(
                "a trace-decreasing first channel must be renormalized before comparing with tomography"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// State after the first channel (and the flip, where configured), with the
/// trace it had before renormalization.
#[derive(Clone, Debug)]
pub struct FirstStage {
    pub state: DensityMatrix,
    pub trace_before: f64,
}

fn flip(rho: &DensityMatrix) -> Result<DensityMatrix> {
    rho.unitary(&not_unitary())
}

/// `rho0 -> first channel -> (flip)` for the configured variant and NOT flag.
pub fn first_stage(cfg: &ProtocolConfig) -> Result<FirstStage> {
    let embed = cfg.variant == PipelineVariant::PublishedLiteral;
    let first = correlated_adc_kraus(cfg.p, cfg.z, embed)?;
    let out = apply_channel_traced(&make_state(&cfg.state), &first, cfg.renormalize_after_first)?;
    let state = if cfg.apply_not {
        flip(&out.state)?
    } else {
        out.state
    };
    Ok(FirstStage {
        state,
        trace_before: out.trace_before,
    })
}

/// Concurrence and purity of a possibly sub-normalized state.
///
/// A sub-normalized state keeps its success weight: concurrence scales linearly
/// with the trace, and purity is the raw `Tr(rho^2)`.
fn metrics(rho: &DensityMatrix) -> Result<(f64, f64)> {
    let t = rho.trace();
    let unit = renormalize(rho)?;
    let c = concurrence_best(&unit)?;
    let pur = purity(&unit)?;
    if rho.is_normalized() {
        Ok((c, pur))
    } else {
        Ok((t * c, t * t * pur))
    }
}

fn after_second(stage: &DensityMatrix, big_p: f64) -> Result<DensityMatrix> {
    apply_channel(stage, &product_adc(big_p)?, false)
}

/// One arm of the pipeline, honoring `cfg.apply_not`, with its threshold.
pub fn run_arm(cfg: &ProtocolConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let stage = first_stage(cfg)?;
    let rows = cfg
        .grid
        .par_iter()
        .map(|&big_p| metrics(&after_second(&stage.state, big_p)?))
        .collect::<Result<Vec<_>>>()?;
    let (conc, pur): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    let label = format!(
        "{}(alpha={}, p={}, {})",
        if cfg.apply_not {
            "with_not"
        } else {
            "without_not"
        },
        cfg.state.alpha(),
        cfg.p,
        cfg.z.tag()
    );
    let n = cfg.grid.len();
    let mut t = Trajectory::new(
        label,
        cfg.grid.clone(),
        conc,
        pur,
        vec![stage.trace_before; n],
    )?;
    let unit = renormalize(&stage.state)?;
    t.threshold = Some(find_esd_threshold(|big_p| after_second(&unit, big_p))?);
    Ok(t)
}

/// Both arms of one experiment and the verdict on the manipulation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineRun {
    pub config: ProtocolConfig,
    pub with_not: Trajectory,
    pub without_not: Trajectory,
    pub classification: Classification,
    /// Trace after the first channel, before renormalization.
    pub first_channel_trace: f64,
    /// Concurrence of the renormalized first-channel output.
    pub first_channel_concurrence: f64,
}

impl PipelineRun {
    pub fn threshold_with_not(&self) -> EsdThreshold {
        self.with_not.threshold.expect("set by run_pipeline")
    }

    pub fn threshold_without_not(&self) -> EsdThreshold {
        self.without_not.threshold.expect("set by run_pipeline")
    }

    pub fn summary(&self) -> Summary {
        Summary {
            threshold_with_not: self.threshold_with_not().value,
            threshold_without_not: self.threshold_without_not().value,
            classification: self.classification,
            kind_with_not: self.threshold_with_not().kind,
            kind_without_not: self.threshold_without_not().kind,
            first_channel_trace: self.first_channel_trace,
            first_channel_concurrence: self.first_channel_concurrence,
            notes: crate::analysis::discrepancy_notes(
                self.config.state.alpha(),
                self.config.p,
                &self.threshold_without_not(),
                &self.threshold_with_not(),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub threshold_with_not: Option<f64>,
    pub threshold_without_not: Option<f64>,
    pub classification: Classification,
    pub kind_with_not: crate::analysis::ThresholdKind,
    pub kind_without_not: crate::analysis::ThresholdKind,
    pub first_channel_trace: f64,
    pub first_channel_concurrence: f64,
    pub notes: Vec<String>,
}

/// Runs the with-NOT and without-NOT arms and classifies the manipulation.
pub fn run_pipeline(cfg: &ProtocolConfig) -> Result<PipelineRun> {
    let with = run_arm(&cfg.clone().with_not(true))?;
    let without = run_arm(&cfg.clone().with_not(false))?;
    let classification = classify(
        &without.threshold.expect("set by run_arm"),
        &with.threshold.expect("set by run_arm"),
        CLASSIFY_TOL,
    );
    let mut with = with;
    with.classification = Some(classification);
    let stage = first_stage(&cfg.clone().with_not(false))?;
    Ok(PipelineRun {
        config: cfg.clone(),
        first_channel_trace: stage.trace_before,
        first_channel_concurrence: concurrence_best(&renormalize(&stage.state)?)?,
        with_not: with,
        without_not: without,
        classification,
    })
}

/// Concurrence and purity of the renormalized first-channel output versus `p`,
/// second channel off. Uses the published operator set, flip included.
pub fn characterize_first_channel(
    state: &StateParams,
    p_grid: &[f64],
    z: TemporalMismatch,
) -> Result<Trajectory> {
    first_channel_curve(
        &make_state(state),
        p_grid,
        z,
        format!("first(alpha={})", state.alpha()),
    )
}

fn first_channel_curve(
    rho: &DensityMatrix,
    p_grid: &[f64],
    z: TemporalMismatch,
    label: String,
) -> Result<Trajectory> {
    validate_grid(p_grid)?;
    let rows = p_grid
        .par_iter()
        .map(|&p| {
            let out = apply_channel_traced(rho, &correlated_adc_kraus(p, z, true)?, true)?;
            Ok((
                concurrence_best(&out.state)?,
                purity(&out.state)?,
                out.trace_before,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut conc = Vec::with_capacity(rows.len());
    let mut pur = Vec::with_capacity(rows.len());
    let mut tr = Vec::with_capacity(rows.len());
    for (c, q, t) in rows {
        conc.push(c);
        pur.push(q);
        tr.push(t);
    }
    Trajectory::new(label, p_grid.to_vec(), conc, pur, tr)
}

/// Concurrence versus `P` of the product damping channel on the unflipped
/// input, first channel off.
pub fn characterize_second_channel(state: &StateParams, big_p_grid: &[f64]) -> Result<Trajectory> {
    validate_grid(big_p_grid)?;
    let rho = make_state(state);
    let rows = big_p_grid
        .par_iter()
        .map(|&big_p| metrics(&after_second(&rho, big_p)?))
        .collect::<Result<Vec<_>>>()?;
    let (conc, pur): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    let n = big_p_grid.len();
    let mut t = Trajectory::new(
        format!("second(alpha={})", state.alpha()),
        big_p_grid.to_vec(),
        conc,
        pur,
        vec![1.0; n],
    )?;
    t.threshold = Some(find_esd_threshold(|big_p| after_second(&rho, big_p))?);
    Ok(t)
}

/// Purity of the separable input `|VV>` through the first channel, beside the
/// product damping channel at the same strength.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeparablePurity {
    pub grid: Vec<f64>,
    /// Renormalized correlated-channel output.
    pub correlated: Vec<f64>,
    /// `((1-p)^4 + p^4) / ((1-p)^2 + p^2)^2`.
    pub correlated_closed_form: Vec<f64>,
    /// Product channel: `(p^2 + (1-p)^2)^2`.
    pub product: Vec<f64>,
}

pub fn separable_purity(p_grid: &[f64], z: TemporalMismatch) -> Result<SeparablePurity> {
    let traj = first_channel_curve(&basis_state(VV), p_grid, z, "first(|VV>)".into())?;
    let closed = p_grid
        .iter()
        .map(|&p| {
            let (a, b) = ((1.0 - p).powi(2), p * p);
            (a * a + b * b) / (a + b).powi(2)
        })
        .collect();
    let product = p_grid
        .iter()
        .map(|&p| {
            let out = apply_channel(&basis_state(VV), &product_adc(p)?, false)?;
            purity(&out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeparablePurity {
        grid: p_grid.to_vec(),
        correlated: traj.purity,
        correlated_closed_form: closed,
        product,
    })
}

/// Run manifest for a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepManifest {
    pub state: StateParams,
    pub p: f64,
    #[serde(default)]
    pub z: TemporalMismatch,
    #[serde(default)]
    pub variant: PipelineVariant,
    #[serde(default = "default_true")]
    pub apply_not: bool,
    #[serde(default)]
    pub renormalize_after_first: Option<bool>,
    #[serde(default)]
    pub grid: GridSpec,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            n: DEFAULT_GRID_POINTS,
        }
    }
}

impl SweepManifest {
    pub fn to_config(&self) -> Result<ProtocolConfig> {
        let mut cfg = ProtocolConfig::new(self.state, self.p)
            .with_z(self.z)
            .with_variant(self.variant)
            .with_not(self.apply_not)
            .with_grid(uniform_grid(self.grid.n)?);
        if let Some(r) = self.renormalize_after_first {
            cfg.renormalize_after_first = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
