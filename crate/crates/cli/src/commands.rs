//! Subcommand bodies. Each returns whether its tolerance checks passed.

use std::fmt::Write;
use std::path::PathBuf;

use anyhow::{bail, Result};
use esd_core::analysis::{fmt17, regime_map, uniform_grid, EsdThreshold, REPORTED_ALPHA};
use esd_core::channels::TemporalMismatch;
use esd_core::errors::{
    alpha_curve, error_report, AlphaPoint, ErrorBudget, ErrorReport, OperatingPoint,
};
use esd_core::optics::{verify_oracle, OracleRow, ORACLE_TOLERANCE};
use esd_core::protocol::{
    characterize_first_channel, characterize_second_channel, run_pipeline, separable_purity,
    GridSpec, Summary, SweepManifest,
};
use esd_core::states::{make_state, StateParams};
use esd_core::tomography::{
    counts_to_csv, expected_counts, overcomplete_settings, reconstruct, reconstruct_expected,
    reconstruction_report, repeated_qst, simulate_counts, standard_settings, Method, QstStats,
    ReconstructionReport, Shots, DEFAULT_PAIRS_PER_SETTING,
};
use serde::{Deserialize, Serialize};

use crate::manifest::{self, Loaded};
use crate::output::{opt17, OutDir};
use crate::svg::{Marker, Plot, Series};

/// Global flags, each overriding its manifest counterpart.
#[derive(Clone, Debug, Default)]
pub struct Globals {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub grid_points: Option<usize>,
}

pub struct Outcome {
    pub passed: bool,
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
}

struct Run<T> {
    body: T,
    out: OutDir,
    seed: u64,
}

fn start<T>(g: &Globals, loaded: Loaded<T>) -> Result<Run<T>> {
    let root = g
        .out
        .clone()
        .or(loaded.envelope.out)
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok(Run {
        body: loaded.body,
        out: OutDir::create(&root)?,
        seed: g.seed.or(loaded.envelope.seed).unwrap_or(0),
    })
}

fn required<T: for<'de> Deserialize<'de>>(g: &Globals, cmd: &str) -> Result<Loaded<T>> {
    match &g.manifest {
        Some(p) => manifest::load(p),
        None => bail!("{cmd} needs --manifest <path>"),
    }
}

fn grid(g: &Globals, spec: GridSpec) -> Result<Vec<f64>> {
    Ok(uniform_grid(g.grid_points.unwrap_or(spec.n))?)
}

fn done(passed: bool, lines: Vec<String>, out: OutDir) -> Outcome {
    Outcome {
        passed,
        lines,
        files: out.written().to_vec(),
    }
}

fn threshold_marker(t: &EsdThreshold, name: &str, series: usize) -> Option<Marker> {
    t.value.map(|x| Marker {
        x,
        label: format!("{name} {x:.4}"),
        series,
    })
}

fn bell() -> StateParams {
    StateParams::bell()
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    manifest: &'a SweepManifest,
    #[serde(flatten)]
    summary: Summary,
}

pub fn sweep(g: &Globals) -> Result<Outcome> {
    let mut run = start(g, required::<SweepManifest>(g, "sweep")?)?;
    if let Some(n) = g.grid_points {
        run.body.grid.n = n;
    }
    let cfg = run.body.to_config()?;
    let pipeline = run_pipeline(&cfg)?;
    let summary = pipeline.summary();
    run.out.write("with_not.csv", &pipeline.with_not.to_csv())?;
    run.out
        .write("without_not.csv", &pipeline.without_not.to_csv())?;
    let mut plot = Plot::new(
        &format!("alpha = {}, p = {}", cfg.state.alpha(), cfg.p),
        "second damping P",
        "concurrence",
    );
    plot.series.push(Series::new(
        "without NOT",
        &pipeline.without_not.grid,
        &pipeline.without_not.concurrence,
    ));
    plot.series.push(Series::new(
        "with NOT",
        &pipeline.with_not.grid,
        &pipeline.with_not.concurrence,
    ));
    plot.markers
        .extend(threshold_marker(&pipeline.threshold_without_not(), "P*", 0));
    plot.markers
        .extend(threshold_marker(&pipeline.threshold_with_not(), "P*", 1));
    run.out.write("sweep.svg", &plot.render())?;
    let mut lines = vec![format!("classification: {}", summary.classification)];
    lines.extend(summary.notes.iter().map(|n| format!("note: {n}")));
    run.out.json(
        "summary.json",
        &SweepSummary {
            manifest: &run.body,
            summary,
        },
    )?;
    Ok(done(true, lines, run.out))
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FirstManifest {
    #[serde(default = "bell")]
    pub state: StateParams,
    #[serde(default)]
    pub z: TemporalMismatch,
    #[serde(default)]
    pub grid: GridSpec,
}

impl Default for FirstManifest {
    fn default() -> Self {
        Self {
            state: bell(),
            z: TemporalMismatch::default(),
            grid: GridSpec::default(),
        }
    }
}

pub fn characterize_first(g: &Globals) -> Result<Outcome> {
    let mut run = start(
        g,
        manifest::load_or_default::<FirstManifest>(g.manifest.as_deref())?,
    )?;
    let grid = grid(g, run.body.grid)?;
    let traj = characterize_first_channel(&run.body.state, &grid, run.body.z)?;
    let sep = separable_purity(&grid, run.body.z)?;
    run.out.write("first_channel.csv", &traj.to_csv())?;
    let mut csv =
        String::from("p,purity_correlated,purity_correlated_closed_form,purity_product\n");
    for i in 0..sep.grid.len() {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            fmt17(sep.grid[i]),
            fmt17(sep.correlated[i]),
            fmt17(sep.correlated_closed_form[i]),
            fmt17(sep.product[i])
        );
    }
    run.out.write("separable_purity.csv", &csv)?;
    let mut plot = Plot::new(
        &format!("first channel, alpha = {}", run.body.state.alpha()),
        "first damping p",
        "value",
    );
    plot.series
        .push(Series::new("concurrence", &traj.grid, &traj.concurrence));
    plot.series
        .push(Series::new("purity", &traj.grid, &traj.purity));
    plot.series
        .push(Series::new("|VV> purity, correlated", &sep.grid, &sep.correlated).dashed());
    plot.series
        .push(Series::new("|VV> purity, product", &sep.grid, &sep.product).dashed());
    run.out.write("first_channel.svg", &plot.render())?;
    let worst = sep
        .correlated
        .iter()
        .zip(&sep.correlated_closed_form)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let passed = worst <= 1e-10;
    let lines = vec![format!(
        "separable purity closed-form deviation: {worst:.3e}"
    )];
    Ok(done(passed, lines, run.out))
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SecondManifest {
    #[serde(default = "bell")]
    pub state: StateParams,
    #[serde(default)]
    pub grid: GridSpec,
}

impl Default for SecondManifest {
    fn default() -> Self {
        Self {
            state: bell(),
            grid: GridSpec::default(),
        }
    }
}

pub fn characterize_second(g: &Globals) -> Result<Outcome> {
    let mut run = start(
        g,
        manifest::load_or_default::<SecondManifest>(g.manifest.as_deref())?,
    )?;
    let grid = grid(g, run.body.grid)?;
    let traj = characterize_second_channel(&run.body.state, &grid)?;
    run.out.write("second_channel.csv", &traj.to_csv())?;
    let mut plot = Plot::new(
        &format!("second channel, alpha = {}", run.body.state.alpha()),
        "second damping P",
        "value",
    );
    plot.series
        .push(Series::new("concurrence", &traj.grid, &traj.concurrence));
    plot.series
        .push(Series::new("purity", &traj.grid, &traj.purity));
    if let Some(t) = &traj.threshold {
        plot.markers.extend(threshold_marker(t, "P*", 0));
    }
    run.out.write("second_channel.svg", &plot.render())?;
    Ok(done(true, Vec::new(), run.out))
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RegimesManifest {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "regime_grid")]
    pub grid: GridSpec,
}

fn default_alpha() -> f64 {
    REPORTED_ALPHA
}

fn regime_grid() -> GridSpec {
    GridSpec { n: 101 }
}

impl Default for RegimesManifest {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            grid: regime_grid(),
        }
    }
}

pub fn regimes(g: &Globals) -> Result<Outcome> {
    let mut run = start(
        g,
        manifest::load_or_default::<RegimesManifest>(g.manifest.as_deref())?,
    )?;
    let grid = grid(g, run.body.grid)?;
    let map = regime_map(run.body.alpha, &grid)?;
    let mut csv = String::from("p,classification,threshold_without_not,threshold_with_not\n");
    for e in &map.entries {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            fmt17(e.p),
            e.classification,
            opt17(e.threshold_without_not.value),
            opt17(e.threshold_with_not.value)
        );
    }
    run.out.write("regimes.csv", &csv)?;
    let lines: Vec<String> = map.notes.iter().map(|n| format!("note: {n}")).collect();
    let ps: Vec<f64> = map.entries.iter().map(|e| e.p).collect();
    let without: Vec<f64> = map
        .entries
        .iter()
        .map(|e| e.threshold_without_not.value.unwrap_or(f64::NAN))
        .collect();
    let with: Vec<f64> = map
        .entries
        .iter()
        .map(|e| e.threshold_with_not.value.unwrap_or(f64::NAN))
        .collect();
    let mut plot = Plot::new(
        &format!("thresholds, alpha = {}", run.body.alpha),
        "first damping p",
        "P*",
    );
    plot.series.push(Series::new("without NOT", &ps, &without));
    plot.series.push(Series::new("with NOT", &ps, &with));
    for (x, label) in [
        (map.boundaries.avoid_delay, "avoid/delay"),
        (map.boundaries.delay_hasten, "delay/hasten"),
    ] {
        if let Some(x) = x {
            plot.markers.push(Marker {
                x,
                label: format!("{label} {x:.4}"),
                series: 2,
            });
        }
    }
    run.out.write("regimes.svg", &plot.render())?;
    run.out.json("regimes.json", &map)?;
    Ok(done(true, lines, run.out))
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OracleManifest {
    #[serde(default = "oracle_grid")]
    pub grid: GridSpec,
    #[serde(default = "oracle_z")]
    pub z: Vec<TemporalMismatch>,
}

fn oracle_grid() -> GridSpec {
    GridSpec { n: 11 }
}

fn oracle_z() -> Vec<TemporalMismatch> {
    vec![TemporalMismatch::Separated, TemporalMismatch::Overlapping]
}

impl Default for OracleManifest {
    fn default() -> Self {
        Self {
            grid: oracle_grid(),
            z: oracle_z(),
        }
    }
}

#[derive(Serialize)]
struct OracleReport<'a> {
    tolerance: f64,
    max_deviation: f64,
    passed: bool,
    rows: &'a [OracleRow],
    notes: Vec<String>,
}

pub fn verify(g: &Globals) -> Result<Outcome> {
    let mut run = start(
        g,
        manifest::load_or_default::<OracleManifest>(g.manifest.as_deref())?,
    )?;
    let grid = grid(g, run.body.grid)?;
    let rows = verify_oracle(&grid, &run.body.z)?;
    let mut csv = String::from("p,z,pair_deviation,single_deviation,deficit_gap,reference\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            fmt17(r.p),
            r.z.tag(),
            fmt17(r.pair_deviation),
            fmt17(r.single_deviation),
            fmt17(r.deficit_gap),
            if r.has_reference {
                "closed_form"
            } else {
                "none"
            }
        );
    }
    run.out.write("oracle.csv", &csv)?;
    let mut notes = Vec::new();
    for z in run.body.z.iter().filter(|z| !z.is_binary()) {
        notes.push(format!(
            "{}: exploratory, no closed-form reference",
            z.tag()
        ));
    }
    let max_deviation = rows
        .iter()
        .filter(|r| r.has_reference)
        .map(OracleRow::max_deviation)
        .fold(0.0, f64::max);
    let failures: Vec<&OracleRow> = rows.iter().filter(|r| !r.passes()).collect();
    let passed = failures.is_empty();
    let mut lines = vec![format!(
        "max deviation {max_deviation:.3e} (tolerance {ORACLE_TOLERANCE:e})"
    )];
    for r in &failures {
        lines.push(format!(
            "FAIL p = {} z = {}: {:.3e}",
            r.p,
            r.z.tag(),
            r.max_deviation()
        ));
    }
    lines.extend(notes.iter().map(|n| format!("note: {n}")));
    run.out.json(
        "oracle.json",
        &OracleReport {
            tolerance: ORACLE_TOLERANCE,
            max_deviation,
            passed,
            rows: &rows,
            notes,
        },
    )?;
    Ok(done(passed, lines, run.out))
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PointSpec {
    #[serde(default = "bell")]
    pub state: StateParams,
    #[serde(default)]
    pub p: f64,
    #[serde(default, rename = "P")]
    pub big_p: f64,
    #[serde(default)]
    pub z: TemporalMismatch,
    #[serde(default = "yes")]
    pub not_plate: bool,
}

fn yes() -> bool {
    true
}

impl Default for PointSpec {
    fn default() -> Self {
        Self {
            state: bell(),
            p: 0.0,
            big_p: 0.0,
            z: TemporalMismatch::default(),
            not_plate: true,
        }
    }
}

impl PointSpec {
    pub fn build(&self) -> Result<OperatingPoint> {
        let mut op = OperatingPoint::new(self.state, self.p, self.big_p)?;
        op.z = self.z;
        op.not_plate = self.not_plate;
        Ok(op)
    }
}

/// Optional acceptance band on the headline drop, in percentage points.
#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub delta_c_percent: f64,
    pub tolerance_pp: f64,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorManifest {
    #[serde(default)]
    pub operating_point: PointSpec,
    #[serde(default)]
    pub budget: ErrorBudget,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "alpha_grid")]
    pub alpha_grid: GridSpec,
    #[serde(default)]
    pub expect: Option<Expectation>,
}

fn default_samples() -> usize {
    10_000
}

fn alpha_grid() -> GridSpec {
    GridSpec { n: 21 }
}

#[derive(Serialize)]
struct ErrorOutput<'a> {
    report: &'a ErrorReport,
    alpha_curve: &'a [AlphaPoint],
    expect: Option<Expectation>,
    passed: bool,
}

pub fn error_report_cmd(g: &Globals) -> Result<Outcome> {
    let mut run = start(g, required::<ErrorManifest>(g, "error-report")?)?;
    run.body.budget.validate()?;
    let op = run.body.operating_point.build()?;
    let report = error_report(&op, &run.body.budget, run.body.samples, run.seed)?;
    let alphas = grid(g, run.body.alpha_grid)?;
    let curve = alpha_curve(&op, &run.body.budget, &alphas)?;
    let mut csv = String::from("alpha,c_ideal,c_imperfect,delta_c\n");
    for a in &curve {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            fmt17(a.alpha),
            fmt17(a.c_ideal),
            fmt17(a.c_imperfect),
            fmt17(a.delta_c)
        );
    }
    run.out.write("alpha_curve.csv", &csv)?;
    let xs: Vec<f64> = curve.iter().map(|a| a.alpha).collect();
    let mut plot = Plot::new("concurrence versus alpha", "alpha", "concurrence");
    plot.series.push(Series::new(
        "ideal",
        &xs,
        &curve.iter().map(|a| a.c_ideal).collect::<Vec<_>>(),
    ));
    plot.series.push(
        Series::new(
            "with errors",
            &xs,
            &curve.iter().map(|a| a.c_imperfect).collect::<Vec<_>>(),
        )
        .dashed(),
    );
    run.out.write("alpha_curve.svg", &plot.render())?;

    let h = &report.headline;
    let mut lines = vec![
        format!(
            "headline delta C = {:.4}% (C ideal {:.6}, imperfect {:.6})",
            h.delta_c_percent, h.c_ideal, h.c_imperfect
        ),
        match report.delta_c_first_order {
            Some(d) => format!("first-order delta C = {d:.6e}"),
            None => "first-order delta C unavailable".into(),
        },
        format!(
            "Monte Carlo: mean shift {:.6e}, std {:.6e} +/- {:.1e} over {} samples",
            report.delta_c_mc_mean,
            report.delta_c_mc_std,
            report.delta_c_mc_std_error,
            report.samples
        ),
    ];
    lines.extend(report.notes.iter().map(|n| format!("note: {n}")));
    let passed = match run.body.expect {
        None => true,
        Some(e) => {
            let ok = (h.delta_c_percent - e.delta_c_percent).abs() <= e.tolerance_pp;
            lines.push(format!(
                "{} expected {}% +/- {} pp, got {:.4}%",
                if ok { "PASS" } else { "FAIL" },
                e.delta_c_percent,
                e.tolerance_pp,
                h.delta_c_percent
            ));
            ok
        }
    };
    run.out.json(
        "error_report.json",
        &ErrorOutput {
            report: &report,
            alpha_curve: &curve,
            expect: run.body.expect,
            passed,
        },
    )?;
    Ok(done(passed, lines, run.out))
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SettingSet {
    #[default]
    Standard,
    Overcomplete,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TomoManifest {
    #[serde(default)]
    pub source: PointSpec,
    #[serde(default)]
    pub settings: SettingSet,
    #[serde(default = "default_pairs")]
    pub pairs_per_setting: u64,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "one")]
    pub iterations: usize,
    #[serde(default)]
    pub noiseless: bool,
}

fn default_pairs() -> u64 {
    DEFAULT_PAIRS_PER_SETTING
}

fn one() -> usize {
    1
}

impl Default for TomoManifest {
    fn default() -> Self {
        Self {
            source: PointSpec::default(),
            settings: SettingSet::default(),
            pairs_per_setting: default_pairs(),
            method: Method::default(),
            iterations: one(),
            noiseless: false,
        }
    }
}

#[derive(Serialize)]
struct TomoOutput {
    truth_concurrence: f64,
    reconstruction: ReconstructionReport,
    repeated: Option<QstStats>,
}

pub fn tomo_sim(g: &Globals) -> Result<Outcome> {
    let mut run = start(
        g,
        manifest::load_or_default::<TomoManifest>(g.manifest.as_deref())?,
    )?;
    let b = &run.body;
    let truth = if b.source.p == 0.0 && b.source.big_p == 0.0 {
        make_state(&b.source.state)
    } else {
        esd_core::errors::ErrorModel::new(&b.source.build()?, &ErrorBudget::zero())?
            .nominal_output()?
    };
    let settings = match b.settings {
        SettingSet::Standard => standard_settings(),
        SettingSet::Overcomplete => overcomplete_settings(),
    };
    let records = if b.noiseless {
        expected_counts(&truth, &settings, b.pairs_per_setting)?
    } else {
        simulate_counts(&truth, &settings, b.pairs_per_setting, run.seed)?
    };
    let estimate = if b.noiseless {
        reconstruct_expected(&records, b.method)?
    } else {
        reconstruct(&records, b.method)?
    };
    let report = reconstruction_report(&estimate, Some(&truth), b.method)?;
    let shots = if b.noiseless {
        Shots::Noiseless
    } else {
        Shots::Poisson(b.pairs_per_setting)
    };
    let repeated = if b.iterations >= 2 {
        Some(repeated_qst(
            &truth,
            &settings,
            shots,
            b.iterations,
            run.seed,
            b.method,
        )?)
    } else {
        None
    };
    let truth_concurrence = esd_core::analysis::concurrence(&truth)?;
    let mut lines = vec![format!(
        "fidelity {:.6}, concurrence {:.6} (truth {:.6})",
        report.fidelity.unwrap_or(f64::NAN),
        report.concurrence,
        truth_concurrence
    )];
    if let Some(s) = &repeated {
        lines.push(format!(
            "{} runs: concurrence {:.6} +/- {:.6}, mean fidelity {:.6}",
            b.iterations, s.mean_concurrence, s.std_concurrence, s.mean_fidelity
        ));
    }
    run.out.write("counts.csv", &counts_to_csv(&records))?;
    run.out.json(
        "reconstruction.json",
        &TomoOutput {
            truth_concurrence,
            reconstruction: report,
            repeated,
        },
    )?;
    Ok(done(true, lines, run.out))
}
