//! Run configurations and the `fig3b`, `fig3d` and `custom` scenario runners.
//!
//! A run starts from the scenario's built-in defaults (drawn from the frozen
//! calibration); a user TOML file is deep-merged over them, so a file only
//! needs the keys it changes. The fully resolved configuration and the seed
//! are written into every output file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::Calibration;
use crate::channel::{
    build_grid_plan, coherence_time, table1_labeling_report, ChannelPlan, Table1LabelingReport,
};
use crate::coincidence::{CoincidenceWindow, CountsMatrix};
use crate::detection::DetectorConfig;
use crate::error::{ensure, Error, Result};
use crate::keyrate::{
    analytic_rates, optimize_pair_rate, scaling_curve, AnalyticRates, ChannelTally, KeyRateReport,
    LinkTemplate, ScalingPoint,
};
use crate::rng::derive_seed;
use crate::simulation::LinkSetup;
use crate::source::SourceConfig;

/// Channel count the laboratory projection quotes for the 761–970 nm window.
pub const QUOTED_GRID_CHANNELS: usize = 15_000;

/// Agreement threshold, in standard errors, for Monte Carlo vs analytic columns.
pub const CONSISTENCY_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Fig3b,
    Fig3d,
    Custom,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Fig3b => "fig3b",
            Scenario::Fig3d => "fig3d",
            Scenario::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Montecarlo,
    Analytic,
    Both,
}

impl Mode {
    pub fn montecarlo(self) -> bool {
        matches!(self, Mode::Montecarlo | Mode::Both)
    }
    pub fn analytic(self) -> bool {
        matches!(self, Mode::Analytic | Mode::Both)
    }
}

/// How the channel plan is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PlanSpec {
    /// The two-channel laboratory plan with calibrated compensation.
    Table1,
    Explicit(ChannelPlan),
    Grid(GridSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub window_low_nm: f64,
    pub window_high_nm: f64,
    pub spacing_ghz: f64,
    pub bandwidth_ghz: f64,
    /// Keep only the innermost pairs (Monte Carlo over thousands of channels
    /// is rarely what one wants). 0 keeps all.
    #[serde(default)]
    pub max_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSet {
    pub alice: DetectorConfig,
    pub bob: DetectorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSettings {
    /// Minimum recording time per basis block, s.
    pub duration: f64,
    /// Expected events wanted for the rarest reported coincidence count;
    /// the block is lengthened up to `max_duration` to reach it.
    pub target_events: f64,
    pub max_duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSettings {
    pub n_values: Vec<u32>,
    /// Broad-channel cases evaluated at the fixed spectral density.
    pub bandwidths_ghz: Vec<f64>,
    pub reference_bandwidth_ghz: f64,
    pub spectral_density_per_ghz: f64,
    pub receiver_efficiency: f64,
    pub dark_rate: f64,
    pub pair_rate_bracket: [f64; 2],
    pub grid: GridSpec,
}

/// A fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub mode: Mode,
    /// Total two-sided loss values, dB, strictly ascending.
    pub loss_grid: Vec<f64>,
    pub f_ec: f64,
    pub global_dead_time: f64,
    pub accidental_delay: f64,
    pub extra_signal_loss: f64,
    pub extra_idler_loss: f64,
    pub source: SourceConfig,
    pub plan: PlanSpec,
    pub detectors: DetectorSet,
    pub window: CoincidenceWindow,
    pub montecarlo: MonteCarloSettings,
    pub scaling: ScalingSettings,
}

impl RunConfig {
    pub fn defaults(scenario: Scenario) -> RunConfig {
        let cal = Calibration::frozen();
        let loss_grid = match scenario {
            Scenario::Fig3b => vec![30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 89.0],
            Scenario::Fig3d => (0..=90).map(f64::from).collect(),
            Scenario::Custom => vec![40.0],
        };
        RunConfig {
            scenario,
            seed: 1,
            mode: match scenario {
                Scenario::Fig3d => Mode::Analytic,
                _ => Mode::Both,
            },
            loss_grid,
            f_ec: cal.receiver.f_ec,
            global_dead_time: cal.receiver.global_dead_time,
            accidental_delay: cal.receiver.accidental_delay,
            extra_signal_loss: 0.0,
            extra_idler_loss: 0.0,
            source: cal.source_config(),
            plan: PlanSpec::Table1,
            detectors: DetectorSet {
                alice: cal.detector_config(),
                bob: cal.detector_config(),
            },
            window: cal.window(),
            montecarlo: MonteCarloSettings {
                duration: 1.0,
                target_events: 1000.0,
                max_duration: 40000.0,
            },
            scaling: ScalingSettings {
                n_values: vec![1, 80, 1000, 15000],
                bandwidths_ghz: vec![19.0, 21.0, 22.0],
                reference_bandwidth_ghz: cal.scaling.reference_bandwidth_ghz,
                spectral_density_per_ghz: cal.fitted.spectral_density_per_ghz,
                receiver_efficiency: cal.scaling.receiver_efficiency,
                dark_rate: cal.scaling.dark_rate,
                pair_rate_bracket: cal.scaling.pair_rate_bracket,
                grid: GridSpec {
                    window_low_nm: 761.0,
                    window_high_nm: 970.0,
                    spacing_ghz: 6.25,
                    bandwidth_ghz: 6.25,
                    max_pairs: 0,
                },
            },
        }
    }

    /// Resolves a user TOML document over the scenario defaults.
    pub fn from_toml(scenario: Scenario, text: &str) -> Result<RunConfig> {
        let user: toml::Table = toml::from_str(text)?;
        if let Some(v) = user.get("scenario") {
            ensure(v.as_str() == Some(scenario.as_str()), "scenario", || {
                format!("config is for `{v}` but the `{}` subcommand was run", scenario.as_str())
            })?;
        }
        let defaults = Self::defaults(scenario);
        let mut base = toml::Table::try_from(&defaults).expect("defaults serialise");
        // A plan given in the file replaces the default wholesale.
        if user.contains_key("plan") {
            base.remove("plan");
        }
        merge(&mut base, user);
        let cfg: RunConfig = toml::Value::Table(base).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(scenario: Scenario, path: &Path) -> Result<RunConfig> {
        Self::from_toml(scenario, &fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.loss_grid.is_empty(), "loss_grid", || "must not be empty".into())?;
        ensure(
            self.loss_grid.iter().all(|l| l.is_finite() && *l >= 0.0),
            "loss_grid",
            || "values must be finite and non-negative".into(),
        )?;
        ensure(
            self.loss_grid.windows(2).all(|w| w[0] < w[1]),
            "loss_grid",
            || "must be strictly ascending".into(),
        )?;
        let mc = &self.montecarlo;
        ensure(mc.duration > 0.0 && mc.duration.is_finite(), "montecarlo.duration", || {
            format!("must be positive, got {}", mc.duration)
        })?;
        ensure(mc.max_duration >= mc.duration, "montecarlo.max_duration", || {
            "must be at least montecarlo.duration".into()
        })?;
        ensure(mc.target_events >= 0.0, "montecarlo.target_events", || "must be non-negative".into())?;
        let sc = &self.scaling;
        ensure(!sc.n_values.is_empty() && sc.n_values.iter().all(|&n| n >= 1), "scaling.n_values", || {
            "must be a non-empty list of positive integers".into()
        })?;
        ensure(
            sc.bandwidths_ghz.iter().all(|&b| b > 0.0) && sc.reference_bandwidth_ghz > 0.0,
            "scaling.bandwidths_ghz",
            || "bandwidths must be positive".into(),
        )?;
        ensure(sc.spectral_density_per_ghz > 0.0, "scaling.spectral_density_per_ghz", || {
            "must be positive".into()
        })?;
        ensure(
            sc.receiver_efficiency > 0.0 && sc.receiver_efficiency <= 1.0,
            "scaling.receiver_efficiency",
            || "must be in (0, 1]".into(),
        )?;
        ensure(sc.dark_rate >= 0.0, "scaling.dark_rate", || "must be non-negative".into())?;
        ensure(
            sc.pair_rate_bracket[0] > 0.0 && sc.pair_rate_bracket[1] > sc.pair_rate_bracket[0],
            "scaling.pair_rate_bracket",
            || "must be [lo, hi] with 0 < lo < hi".into(),
        )?;
        if self.scenario == Scenario::Fig3d {
            ensure(self.mode != Mode::Montecarlo, "mode", || {
                "the scaling projection is analytic only".into()
            })?;
            return Ok(());
        }
        let setup = self.setup(self.loss_grid[0])?;
        setup.validate()?;
        ensure(
            (setup.plan.signal_cwl_nm - setup.source.signal_cwl_nm).abs() < 1e-9
                && (setup.plan.idler_cwl_nm - setup.source.idler_cwl_nm).abs() < 1e-9,
            "plan",
            || "plan centre wavelengths must equal the source's".into(),
        )?;
        if self.scenario == Scenario::Fig3b {
            ensure(setup.plan.pairs.len() >= 2, "plan", || {
                "the WM comparison needs at least two channel pairs".into()
            })?;
        }
        Ok(())
    }

    pub fn channel_plan(&self) -> Result<ChannelPlan> {
        match &self.plan {
            PlanSpec::Table1 => Ok(Calibration::frozen().table1_plan()),
            PlanSpec::Explicit(p) => Ok(p.clone()),
            PlanSpec::Grid(g) => {
                let mut grid = build_grid_plan(g.window_low_nm, g.window_high_nm, g.spacing_ghz * 1e9, g.bandwidth_ghz * 1e9)?
                    .plan;
                if g.max_pairs > 0 {
                    grid.pairs.truncate(g.max_pairs);
                }
                Ok(grid)
            }
        }
    }

    /// Link at `loss_db`. A grid plan is tiled about its own degenerate
    /// wavelength, so the source is recentred there.
    pub fn setup(&self, loss_db: f64) -> Result<LinkSetup> {
        let plan = self.channel_plan()?;
        let mut source = self.source.clone();
        if matches!(self.plan, PlanSpec::Grid(_)) {
            source.spdc_center_nm = plan.spdc_center_nm;
            source.signal_cwl_nm = plan.signal_cwl_nm;
            source.idler_cwl_nm = plan.idler_cwl_nm;
        }
        Ok(LinkSetup {
            source,
            plan,
            alice: self.detectors.alice.clone(),
            bob: self.detectors.bob.clone(),
            window: self.window,
            global_dead_time: self.global_dead_time,
            loss_db,
            extra_signal_loss: self.extra_signal_loss,
            extra_idler_loss: self.extra_idler_loss,
            f_ec: self.f_ec,
            accidental_delay: self.accidental_delay,
        })
    }

    /// Identical-channel template of the scaling projection.
    pub fn scaling_template(&self) -> LinkTemplate {
        let sc = &self.scaling;
        let mut t = Calibration::frozen().scaling_template();
        t.base.pair_rate_in_band = sc.spectral_density_per_ghz * sc.reference_bandwidth_ghz;
        t.base.dark_rate_alice = sc.dark_rate;
        t.base.dark_rate_bob = sc.dark_rate;
        t.base.f_ec = self.f_ec;
        t.receiver_efficiency_alice = sc.receiver_efficiency;
        t.receiver_efficiency_bob = sc.receiver_efficiency;
        t
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Files written by a run, plus any statistics warnings.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunOutput {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn provenance_lines(cfg: &RunConfig) -> String {
    format!(
        "# wmqkd {}\n# scenario: {}\n# seed: {}\n# config: {}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.scenario.as_str(),
        cfg.seed,
        serde_json::to_string(cfg).expect("config serialises")
    )
}

fn write_csv(path: &Path, cfg: &RunConfig, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(provenance_lines(cfg).as_bytes())?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct JsonDocument<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    config: &'a RunConfig,
    results: T,
}

fn write_json<T: Serialize>(path: &Path, cfg: &RunConfig, results: T) -> Result<()> {
    let doc = JsonDocument {
        tool: "wmqkd",
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config: cfg,
        results,
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn num(x: f64) -> String {
    x.to_string()
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Runs `scenario` and writes its files into `out_dir`.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutput> {
    fs::create_dir_all(out_dir)?;
    match cfg.scenario {
        Scenario::Fig3b => run_fig3b(cfg, out_dir),
        Scenario::Fig3d => run_fig3d(cfg, out_dir),
        Scenario::Custom => run_custom(cfg, out_dir),
    }
}

/// Monte Carlo result at one loss value, with its statistics budget.
#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloPoint {
    pub seed: u64,
    pub duration_per_basis: f64,
    /// Expected coincidences of the rarest reported channel over both blocks.
    pub expected_events: f64,
    pub pairs_simulated: u64,
    pub report: KeyRateReport,
    pub warning: Option<String>,
}

/// Block length meeting the statistics target, and the expected event count.
fn mc_duration(cfg: &RunConfig, setup: &LinkSetup) -> (f64, f64) {
    let mut rate = f64::INFINITY;
    for p in 0..setup.plan.pairs.len() {
        rate = rate.min(setup.analytic_channel(p).coincidences());
    }
    if setup.plan.pairs.len() > 1 {
        rate = rate.min(setup.analytic_merged().coincidences());
    }
    let mc = &cfg.montecarlo;
    let wanted = if rate > 0.0 { mc.target_events / (2.0 * rate) } else { f64::INFINITY };
    let duration = wanted.clamp(mc.duration, mc.max_duration);
    (duration, 2.0 * rate * duration)
}

fn simulate_point(cfg: &RunConfig, setup: &LinkSetup) -> Result<MonteCarloPoint> {
    let (duration, expected) = mc_duration(cfg, setup);
    let seed = derive_seed(cfg.seed, &[setup.loss_db.to_bits()]);
    let mc = setup.simulate(duration, seed)?;
    let mut tallies: Vec<ChannelTally> = mc.channels.clone();
    tallies.extend(mc.merged.clone());
    let report = KeyRateReport::from_tallies(&tallies, setup.f_ec)?;
    let warning = (expected < cfg.montecarlo.target_events).then(|| {
        format!(
            "loss {} dB: only {:.0} expected coincidences in the rarest channel (target {:.0}); \
             QBER and key-rate estimates carry relative errors of order 1/sqrt({:.0})",
            setup.loss_db,
            expected,
            cfg.montecarlo.target_events,
            expected.max(1.0)
        )
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(MonteCarloPoint {
        seed,
        duration_per_basis: duration,
        expected_events: expected,
        pairs_simulated: mc.pairs_simulated,
        report,
        warning,
    })
}

/// Analytic predictions for each channel and the merged receiver.
#[derive(Debug, Clone, Serialize)]
pub struct AnalyticPoint {
    pub channels: Vec<AnalyticRates>,
    pub merged: Option<AnalyticRates>,
    pub wm_key_rate: f64,
    pub wm_qber: f64,
}

fn analytic_point(setup: &LinkSetup) -> AnalyticPoint {
    let channels: Vec<AnalyticRates> = (0..setup.plan.pairs.len()).map(|p| setup.analytic_channel(p)).collect();
    let cc: f64 = channels.iter().map(|c| c.coincidences()).sum();
    let wm_qber = if cc > 0.0 {
        channels.iter().map(|c| c.qber * c.coincidences()).sum::<f64>() / cc
    } else {
        0.5
    };
    AnalyticPoint {
        wm_key_rate: channels.iter().map(|c| c.key_rate).sum(),
        wm_qber,
        merged: (setup.plan.pairs.len() > 1).then(|| setup.analytic_merged()),
        channels,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossPoint {
    pub loss_db: f64,
    pub analytic: Option<AnalyticPoint>,
    pub montecarlo: Option<MonteCarloPoint>,
}

fn evaluate_grid(cfg: &RunConfig) -> Vec<Result<LossPoint>> {
    cfg.loss_grid
        .par_iter()
        .map(|&loss| {
            let setup = cfg.setup(loss)?;
            Ok(LossPoint {
                loss_db: loss,
                analytic: cfg.mode.analytic().then(|| analytic_point(&setup)),
                montecarlo: if cfg.mode.montecarlo() {
                    Some(simulate_point(cfg, &setup)?)
                } else {
                    None
                },
            })
        })
        .collect()
}

/// Keeps the leading successful points; returns the first error, if any.
fn split_results(results: Vec<Result<LossPoint>>) -> (Vec<LossPoint>, Option<Error>) {
    let mut ok = Vec::new();
    for r in results {
        match r {
            Ok(p) => ok.push(p),
            Err(e) => return (ok, Some(e)),
        }
    }
    (ok, None)
}

const FIG3B_HEADER: [&str; 10] = [
    "loss_db",
    "configuration",
    "mode",
    "qber",
    "qber_sigma",
    "key_rate_bps",
    "key_rate_sigma",
    "coincidences",
    "duration_s",
    "expected_events",
];

fn fig3b_rows(p: &LossPoint) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    let loss = num(p.loss_db);
    if let Some(a) = &p.analytic {
        let row = |name: &str, q: f64, r: f64| {
            vec![loss.clone(), name.into(), "analytic".into(), num(q), String::new(), num(r), String::new(), String::new(), String::new(), String::new()]
        };
        rows.push(row("ch1", a.channels[0].qber, a.channels[0].key_rate));
        rows.push(row("wm", a.wm_qber, a.wm_key_rate));
        if let Some(m) = &a.merged {
            rows.push(row("nowm", m.qber, m.key_rate));
        }
    }
    if let Some(mc) = &p.montecarlo {
        let rep = &mc.report;
        let chans: Vec<_> = rep.channels.iter().filter(|c| c.label != "merged").collect();
        let cc: u64 = chans.iter().map(|c| c.coincidences).sum();
        let err: u64 = chans.iter().map(|c| c.counts_hv.erroneous() + c.counts_da.erroneous()).sum();
        let wm_q = (cc > 0).then(|| err as f64 / cc as f64);
        let wm_r: f64 = chans.iter().map(|c| c.secure_key_rate).sum();
        let wm_s: f64 = chans.iter().map(|c| c.secure_key_rate_sigma.powi(2)).sum::<f64>().sqrt();
        let base = |name: &str, q: Option<f64>, qs: Option<f64>, r: f64, rs: f64, n: u64| {
            vec![
                loss.clone(),
                name.into(),
                "montecarlo".into(),
                opt(q),
                opt(qs),
                num(r),
                num(rs),
                n.to_string(),
                num(mc.duration_per_basis),
                num(mc.expected_events),
            ]
        };
        let c1 = chans[0];
        rows.push(base("ch1", c1.qber, c1.qber_sigma, c1.secure_key_rate, c1.secure_key_rate_sigma, c1.coincidences));
        rows.push(base(
            "wm",
            wm_q,
            wm_q.map(|q| (q * (1.0 - q) / cc as f64).sqrt()),
            wm_r,
            wm_s,
            cc,
        ));
        if let Some(m) = rep.channel("merged") {
            rows.push(base("nowm", m.qber, m.qber_sigma, m.secure_key_rate, m.secure_key_rate_sigma, m.coincidences));
        }
    }
    // Canonical order: configuration, then mode.
    rows.sort_by(|a, b| (&a[1], &a[2]).cmp(&(&b[1], &b[2])));
    rows
}

fn count_rows(p: &LossPoint) -> Vec<Vec<String>> {
    let Some(mc) = &p.montecarlo else {
        return Vec::new();
    };
    let mut rows = Vec::new();
    for c in &mc.report.channels {
        for m in [&c.counts_hv, &c.counts_da] {
            let mut r = vec![num(p.loss_db), c.label.clone()];
            r.extend(m.csv_record());
            rows.push(r);
        }
    }
    rows
}

fn counts_header() -> Vec<&'static str> {
    let mut h = vec!["loss_db", "label"];
    h.extend(CountsMatrix::CSV_HEADER);
    h
}

fn finish_grid(
    cfg: &RunConfig,
    out_dir: &Path,
    stem: &str,
    header: &[&str],
    row_fn: fn(&LossPoint) -> Vec<Vec<String>>,
) -> Result<RunOutput> {
    let (points, err) = split_results(evaluate_grid(cfg));
    let mut out = RunOutput::default();
    let rows: Vec<Vec<String>> = points.iter().flat_map(row_fn).collect();
    let csv_path = out_dir.join(format!("{stem}.csv"));
    write_csv(&csv_path, cfg, header, &rows)?;
    out.files.push(csv_path);
    if cfg.mode.montecarlo() {
        let counts_path = out_dir.join(format!("{stem}_counts.csv"));
        let rows: Vec<Vec<String>> = points.iter().flat_map(count_rows).collect();
        write_csv(&counts_path, cfg, &counts_header(), &rows)?;
        out.files.push(counts_path);
    }
    out.warnings = points
        .iter()
        .filter_map(|p| p.montecarlo.as_ref().and_then(|m| m.warning.clone()))
        .collect();
    let json_path = out_dir.join(format!("{stem}.json"));
    write_json(&json_path, cfg, &points)?;
    out.files.push(json_path);
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

pub fn run_fig3b(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutput> {
    finish_grid(cfg, out_dir, "fig3b", &FIG3B_HEADER, fig3b_rows)
}

const CUSTOM_HEADER: [&str; 15] = [
    "loss_db",
    "label",
    "analytic_qber",
    "analytic_key_rate",
    "mc_qber",
    "mc_qber_sigma",
    "mc_key_rate",
    "mc_key_rate_sigma",
    "qber_z",
    "key_rate_z",
    "consistent",
    "coincidences",
    "accidentals",
    "duration_s",
    "expected_events",
];

/// Monte Carlo vs analytic agreement, in standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Consistency {
    pub qber_z: f64,
    pub key_rate_z: f64,
    pub pass: bool,
}

/// Compares one Monte Carlo channel report with its analytic prediction.
/// The QBER error uses the predicted QBER; the key-rate error is the delta
/// method estimate attached to the report.
pub fn consistency(mc: &crate::keyrate::ChannelKeyReport, analytic: &AnalyticRates) -> Option<Consistency> {
    let q = mc.qber?;
    let n = mc.coincidences as f64;
    let sq = (analytic.qber * (1.0 - analytic.qber) / n).sqrt();
    let qber_z = (q - analytic.qber) / sq;
    let key_rate_z = if mc.secure_key_rate_sigma > 0.0 {
        (mc.secure_key_rate - analytic.key_rate) / mc.secure_key_rate_sigma
    } else if mc.secure_key_rate == analytic.key_rate {
        0.0
    } else {
        f64::INFINITY
    };
    Some(Consistency {
        qber_z,
        key_rate_z,
        pass: qber_z.abs() <= CONSISTENCY_SIGMAS && key_rate_z.abs() <= CONSISTENCY_SIGMAS,
    })
}

fn custom_rows(p: &LossPoint) -> Vec<Vec<String>> {
    let loss = num(p.loss_db);
    let mut labels: Vec<(String, Option<AnalyticRates>)> = Vec::new();
    if let Some(a) = &p.analytic {
        labels.extend(a.channels.iter().enumerate().map(|(i, r)| (format!("#{i}"), Some(*r))));
        if let Some(m) = a.merged {
            labels.push(("merged".into(), Some(m)));
        }
    }
    let mc_channels: Vec<&crate::keyrate::ChannelKeyReport> =
        p.montecarlo.iter().flat_map(|m| m.report.channels.iter()).collect();
    let n = labels.len().max(mc_channels.len());
    let mut rows = Vec::new();
    for i in 0..n {
        let an = labels.get(i).and_then(|l| l.1);
        let mc = mc_channels.get(i).copied();
        let label = match (mc, labels.get(i)) {
            (Some(m), _) => m.label.clone(),
            (None, Some((l, _))) if l == "merged" => l.clone(),
            (None, _) => format!("ch{}", i + 1),
        };
        let check = match (mc, an.as_ref()) {
            (Some(m), Some(a)) => consistency(m, a),
            _ => None,
        };
        let mcp = p.montecarlo.as_ref();
        rows.push(vec![
            loss.clone(),
            label,
            opt(an.map(|a| a.qber)),
            opt(an.map(|a| a.key_rate)),
            opt(mc.and_then(|m| m.qber)),
            opt(mc.and_then(|m| m.qber_sigma)),
            opt(mc.map(|m| m.secure_key_rate)),
            opt(mc.map(|m| m.secure_key_rate_sigma)),
            opt(check.map(|c| c.qber_z)),
            opt(check.map(|c| c.key_rate_z)),
            check.map(|c| c.pass.to_string()).unwrap_or_default(),
            mc.map(|m| m.coincidences.to_string()).unwrap_or_default(),
            mc.map(|m| m.accidentals.to_string()).unwrap_or_default(),
            opt(mcp.map(|m| m.duration_per_basis)),
            opt(mcp.map(|m| m.expected_events)),
        ]);
    }
    rows
}

pub fn run_custom(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutput> {
    finish_grid(cfg, out_dir, "custom", &CUSTOM_HEADER, custom_rows)
}

/// Summary of the scaling projection.
#[derive(Debug, Clone, Serialize)]
pub struct Fig3dSummary {
    pub grid_band_count: usize,
    pub grid_pair_count: usize,
    pub grid_unpaired_count: usize,
    pub quoted_channel_count: usize,
    pub coherence_time_s: f64,
    pub table1_labeling: Table1LabelingReport,
    pub scaling: Vec<ScalingPoint>,
    pub bandwidth: Vec<BandwidthPoint>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandwidthPoint {
    pub bandwidth_ghz: f64,
    pub loss_db: f64,
    pub pair_rate: f64,
    pub qber: f64,
    pub key_rate_bps: f64,
}

/// Per-channel key at a fixed spectral density for each bandwidth.
pub fn bandwidth_curves(cfg: &RunConfig) -> Vec<BandwidthPoint> {
    let t = cfg.scaling_template();
    let mut bws = vec![cfg.scaling.reference_bandwidth_ghz];
    bws.extend(&cfg.scaling.bandwidths_ghz);
    let mut out = Vec::new();
    for &bw in &bws {
        for &loss in &cfg.loss_grid {
            let pair_rate = cfg.scaling.spectral_density_per_ghz * bw;
            let r = analytic_rates(&t.at_loss(loss).with_pair_rate(pair_rate));
            out.push(BandwidthPoint {
                bandwidth_ghz: bw,
                loss_db: loss,
                pair_rate,
                qber: r.qber,
                key_rate_bps: r.key_rate,
            });
        }
    }
    out.sort_by(|a, b| a.bandwidth_ghz.total_cmp(&b.bandwidth_ghz).then(a.loss_db.total_cmp(&b.loss_db)));
    out
}

pub fn fig3d_summary(cfg: &RunConfig) -> Result<Fig3dSummary> {
    let g = &cfg.scaling.grid;
    let grid = build_grid_plan(g.window_low_nm, g.window_high_nm, g.spacing_ghz * 1e9, g.bandwidth_ghz * 1e9)?;
    let template = cfg.scaling_template();
    let [lo, hi] = cfg.scaling.pair_rate_bracket;
    let mut warnings = Vec::new();
    let per_loss = cfg
        .loss_grid
        .par_iter()
        .map(|&loss| optimize_pair_rate(&template.at_loss(loss), lo, hi).map(|o| (loss, o.warning)))
        .collect::<Result<Vec<_>>>()?;
    for (loss, w) in per_loss {
        if let Some(w) = w {
            warnings.push(format!("loss {loss} dB: {w}"));
        }
    }
    Ok(Fig3dSummary {
        grid_band_count: grid.band_count,
        grid_pair_count: grid.pair_count(),
        grid_unpaired_count: grid.unpaired_count,
        quoted_channel_count: QUOTED_GRID_CHANNELS,
        coherence_time_s: coherence_time(g.bandwidth_ghz * 1e9)?,
        table1_labeling: table1_labeling_report(),
        scaling: scaling_curve(&template, &cfg.scaling.n_values, &cfg.loss_grid, Some((lo, hi)))?,
        bandwidth: bandwidth_curves(cfg),
        warnings,
    })
}

pub fn run_fig3d(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutput> {
    let s = fig3d_summary(cfg)?;
    let mut out = RunOutput::default();

    let scaling_path = out_dir.join("fig3d_scaling.csv");
    let rows: Vec<Vec<String>> = s
        .scaling
        .iter()
        .map(|p| {
            vec![
                p.n.to_string(),
                num(p.loss_db),
                num(p.qber),
                num(p.key_rate),
                num(p.pair_rate),
                num(p.key_rate_per_channel),
            ]
        })
        .collect();
    write_csv(
        &scaling_path,
        cfg,
        &["n", "loss_db", "qber", "key_rate_bps", "pair_rate", "key_rate_per_channel"],
        &rows,
    )?;
    out.files.push(scaling_path);

    let bw_path = out_dir.join("fig3d_bandwidth.csv");
    let rows: Vec<Vec<String>> = s
        .bandwidth
        .iter()
        .map(|p| vec![num(p.bandwidth_ghz), num(p.loss_db), num(p.qber), num(p.key_rate_bps), num(p.pair_rate)])
        .collect();
    write_csv(&bw_path, cfg, &["bandwidth_ghz", "loss_db", "qber", "key_rate_bps", "pair_rate"], &rows)?;
    out.files.push(bw_path);

    let g = &cfg.scaling.grid;
    let grid = build_grid_plan(g.window_low_nm, g.window_high_nm, g.spacing_ghz * 1e9, g.bandwidth_ghz * 1e9)?;
    let plan_path = out_dir.join("fig3d_grid_plan.csv");
    let mut buf = provenance_lines(cfg).into_bytes();
    grid.plan.write_csv(&mut buf)?;
    fs::write(&plan_path, buf)?;
    out.files.push(plan_path);

    let json_path = out_dir.join("fig3d.json");
    write_json(&json_path, cfg, &s)?;
    out.files.push(json_path);
    out.warnings = s.warnings;
    Ok(out)
}
