//! Readout and transfer-pulse error budget.
//!
//! Readout rows (off-resonant shelving, thresholding, shelving failure,
//! deshelving) are simulated; transfer-pulse rows are derived from measured
//! inputs. All probabilities are raw numbers, not in units of 1e-5.

use crate::error::{Error, Result};
use crate::microwave::rabi_transfer_probability;
use crate::rates::{build_rate_matrix, evolve, LaserBeam, Lineshape, Occupations, Polarization};
use crate::registry::StateRegistry;
use crate::species::SpeciesData;
use crate::structure::{FieldConfig, StateLabel};
use serde::{Deserialize, Serialize};
use statrs::distribution::{DiscreteCDF, Poisson};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

/// Default 43Ca+ budget inputs.
pub const DEFAULT_CA43_BUDGET: &str = include_str!("../data/budget/ca43_budget.toml");

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ErrorValue {
    pub value: f64,
    #[serde(default)]
    pub uncertainty: f64,
}

impl ErrorValue {
    pub fn exact(value: f64) -> Self {
        ErrorValue { value, uncertainty: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutConfig {
    pub field_mt: f64,
    /// State that should stay bright during shelving.
    pub bright_state: String,
    /// Shelving transition (S -> P3/2 style) and the level it shelves into.
    pub shelve_transition: String,
    pub shelf_level: String,
    /// Beam anchor ["F,M" lower, "F,M" upper] on the shelving transition.
    pub shelve_anchor: [String; 2],
    pub intensity: f64,
    /// Offset of the shelving beam from its anchor.
    #[serde(default)]
    pub detuning_mhz: f64,
    /// Intensity weights [sigma-, pi, sigma+].
    pub weights: [f64; 3],
    /// Total shelving-beam exposure.
    pub exposure_us: f64,
    pub shelving_cycles: u32,
    /// Per-cycle shelving probability of the dark state; the rate model
    /// supplies it when absent.
    #[serde(default)]
    pub shelving_probability: Option<f64>,
    /// Broadband repump intensity clearing the non-shelf D level between
    /// shelving pulses (rate-model fallback only).
    #[serde(default = "default_clear_intensity")]
    pub clear_intensity: f64,
    #[serde(default = "default_clear_us")]
    pub clear_duration_us: f64,
    pub detect_time_us: f64,
    /// Mean detected count rate of the bright ion (s^-1).
    pub bright_count_rate: f64,
    /// Background count rate with the ion dark (s^-1).
    pub background_count_rate: f64,
    /// Photon threshold; the optimum is searched when absent.
    #[serde(default)]
    pub threshold: Option<u64>,
    /// Shelf lifetime; the species value is used when absent.
    #[serde(default)]
    pub shelf_lifetime_s: Option<f64>,
    /// Window over which a shelved ion can decay and scatter photons.
    pub deshelve_window_us: f64,
}

fn default_clear_intensity() -> f64 {
    10.0
}

fn default_clear_us() -> f64 {
    3.0
}

impl ReadoutConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("readout: {what}")));
        if !(self.intensity >= 0.0) {
            return bad("intensity must be >= 0");
        }
        if !(self.exposure_us >= 0.0) || !(self.detect_time_us >= 0.0) || !(self.deshelve_window_us >= 0.0) {
            return bad("durations must be >= 0");
        }
        if !(self.bright_count_rate > 0.0) || !(self.background_count_rate >= 0.0) {
            return bad("bright_count_rate must be > 0 and background_count_rate >= 0");
        }
        if let Some(p) = self.shelving_probability {
            if !(0.0..=1.0).contains(&p) {
                return bad("shelving_probability outside [0, 1]");
            }
        }
        if self.threshold == Some(0) {
            return bad("threshold must be >= 1");
        }
        Ok(())
    }

    pub fn lambda_bright(&self) -> f64 {
        self.bright_count_rate * self.detect_time_us * 1e-6
    }

    pub fn background_mean(&self) -> f64 {
        self.background_count_rate * self.detect_time_us * 1e-6
    }

    fn polarization(&self) -> Result<Polarization> {
        Polarization::from_weights(self.weights[0], self.weights[1], self.weights[2])
    }
}

/// Ground level, shelving upper level and every level it decays to.
fn shelving_registry(readout: &ReadoutConfig, species: &SpeciesData) -> Result<StateRegistry> {
    let tr = species
        .transition(&readout.shelve_transition)
        .ok_or_else(|| Error::Config(format!("{} has no transition {}", species.name, readout.shelve_transition)))?;
    let mut levels = vec![tr.lower.clone(), tr.upper.clone()];
    for d in species.decays_from(&tr.upper) {
        if !levels.contains(&d.lower) {
            levels.push(d.lower.clone());
        }
    }
    if !levels.contains(&readout.shelf_level) {
        return Err(Error::Structure(format!("{} does not decay to {}", tr.upper, readout.shelf_level)));
    }
    let names: Vec<&str> = levels.iter().map(String::as_str).collect();
    StateRegistry::new(species, FieldConfig::from_millitesla(readout.field_mt)?, &names)
}

fn shelving_beam(readout: &ReadoutConfig) -> Result<LaserBeam> {
    let anchor = (StateLabel::parse(&readout.shelve_anchor[0])?, StateLabel::parse(&readout.shelve_anchor[1])?);
    Ok(LaserBeam::new(&readout.shelve_transition, anchor, readout.intensity, readout.polarization()?)
        .with_detuning_hz(readout.detuning_mhz * 1e6)
        .named("shelve"))
}

/// Signed detuning (Hz) of the shelving beam from the nearest resonance of
/// the bright state that its polarization can drive.
pub fn bright_state_detuning_hz(readout: &ReadoutConfig, species: &SpeciesData) -> Result<f64> {
    let reg = shelving_registry(readout, species)?;
    let beam = shelving_beam(readout)?;
    let tr = species.transition(&readout.shelve_transition).expect("registry checked the transition");
    let energy = |level: &str, label: &str| -> Result<f64> {
        Ok(reg.state(reg.index(level, StateLabel::parse(label)?)?).energy)
    };
    let laser = energy(&tr.upper, &readout.shelve_anchor[1])? - energy(&tr.lower, &readout.shelve_anchor[0])? + beam.detuning;
    let bright = reg.state(reg.ground_index(StateLabel::parse(&readout.bright_state)?)?);
    let m_bright = bright.label.m.twice();
    reg.level_range(&tr.upper)
        .expect("registry holds the upper level")
        .map(|u| reg.state(u))
        .filter(|u| {
            let dq = (u.label.m.twice() - m_bright) / 2;
            dq.abs() <= 1 && readout.weights[(dq + 1) as usize] > 0.0
        })
        .map(|u| laser - (u.energy - bright.energy))
        .min_by(|a, b| a.abs().total_cmp(&b.abs()))
        .map(|d| d / (2.0 * std::f64::consts::PI))
        .ok_or_else(|| Error::Structure("bright state has no driven resonance".into()))
}

fn level_population(reg: &StateRegistry, p: &Occupations, level: &str) -> f64 {
    reg.level_range(level).map(|r| r.map(|k| p.get(k)).sum()).unwrap_or(0.0)
}

/// Probability that the bright state is excited by the detuned shelving
/// beam and decays into the shelf level over the full exposure.
pub fn off_resonant_shelving_error(readout: &ReadoutConfig, species: &SpeciesData) -> Result<f64> {
    readout.validate()?;
    let reg = shelving_registry(readout, species)?;
    let rates = build_rate_matrix(&[shelving_beam(readout)?], &reg)?;
    let start = reg.ground_index(StateLabel::parse(&readout.bright_state)?)?;
    let p = evolve(&Occupations::pure(reg.len(), start), &rates, readout.exposure_us * 1e-6)?;
    Ok(level_population(&reg, &p, &readout.shelf_level).clamp(0.0, 1.0))
}

/// Per-cycle shelving probability of the anchor state from the rate model:
/// one shelving pulse (exposure / cycles) followed by a broadband clear-out
/// of every non-shelf D level back through the upper level.
pub fn rate_model_shelving_probability(readout: &ReadoutConfig, species: &SpeciesData) -> Result<f64> {
    readout.validate()?;
    let reg = shelving_registry(readout, species)?;
    let shelve = build_rate_matrix(&[shelving_beam(readout)?], &reg)?;
    let tr = species.transition(&readout.shelve_transition).expect("checked");
    let anchor = StateLabel::parse(&readout.shelve_anchor[0])?;
    let mut p = Occupations::pure(reg.len(), reg.ground_index(anchor)?);
    let pulse = readout.exposure_us * 1e-6 / readout.shelving_cycles.max(1) as f64;
    p = evolve(&p, &shelve, pulse)?;
    for d in species.decays_from(&tr.upper) {
        if d.lower == tr.lower || d.lower == readout.shelf_level {
            continue;
        }
        let lower = reg.level_range(&d.lower).expect("registry holds decay targets");
        let upper = reg.level_range(&tr.upper).expect("registry holds upper level");
        let beam = LaserBeam::new(
            &d.name,
            (reg.state(lower.start).label, reg.state(upper.start).label),
            readout.clear_intensity,
            Polarization::from_weights(1.0, 1.0, 1.0)?,
        )
        .with_lineshape(Lineshape::Broadband)
        .named("clear");
        p = evolve(&p, &build_rate_matrix(&[beam], &reg)?, readout.clear_duration_us * 1e-6)?;
    }
    Ok(level_population(&reg, &p, &readout.shelf_level).clamp(0.0, 1.0))
}

/// (bright-miss, dark-false-bright) probabilities for threshold `k`:
/// P(X < k) with X ~ Poisson(lambda_bright) and P(Y >= k) with
/// Y ~ Poisson(background_rate * detect_time).
pub fn thresholding_error(lambda_bright: f64, background_rate: f64, detect_time: f64, k: u64) -> Result<(f64, f64)> {
    if !(lambda_bright > 0.0) {
        return Err(Error::Config(format!("bright mean count must be > 0, got {lambda_bright}")));
    }
    let bg = background_rate * detect_time;
    if !(bg >= 0.0) {
        return Err(Error::Config(format!("background mean must be >= 0, got {bg}")));
    }
    if k == 0 {
        return Ok((0.0, 1.0));
    }
    let bright = Poisson::new(lambda_bright).map_err(|e| Error::Numerical(e.to_string()))?;
    let miss = bright.cdf(k - 1);
    let false_bright = if bg == 0.0 {
        0.0
    } else {
        Poisson::new(bg).map_err(|e| Error::Numerical(e.to_string()))?.sf(k - 1)
    };
    Ok((miss, false_bright))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Threshold {
    pub k: u64,
    pub bright_miss: f64,
    pub dark_false_bright: f64,
}

/// Threshold minimising the summed error (smallest k on ties).
pub fn optimal_threshold(lambda_bright: f64, background_mean: f64) -> Result<Threshold> {
    let kmax = (lambda_bright + 10.0 * lambda_bright.sqrt() + 10.0).ceil() as u64;
    let mut best: Option<Threshold> = None;
    for k in 1..=kmax {
        let (miss, fb) = thresholding_error(lambda_bright, background_mean, 1.0, k)?;
        let t = Threshold { k, bright_miss: miss, dark_false_bright: fb };
        if best.map(|b| miss + fb < b.bright_miss + b.dark_false_bright).unwrap_or(true) {
            best = Some(t);
        }
    }
    Ok(best.expect("kmax >= 1"))
}

/// Threshold from the configuration, or the optimum.
pub fn readout_threshold(readout: &ReadoutConfig) -> Result<Threshold> {
    readout.validate()?;
    match readout.threshold {
        Some(k) => {
            let (miss, fb) = thresholding_error(readout.lambda_bright(), readout.background_mean(), 1.0, k)?;
            Ok(Threshold { k, bright_miss: miss, dark_false_bright: fb })
        }
        None => optimal_threshold(readout.lambda_bright(), readout.background_mean()),
    }
}

/// (shelving failure, deshelving) for the dark state. Failure is the
/// residual unshelved population (1 - p)^cycles; deshelving is
/// 1 - exp(-window / tau) with tau the shelf lifetime.
pub fn shelving_failure_and_deshelving(readout: &ReadoutConfig, species: &SpeciesData) -> Result<(f64, f64)> {
    readout.validate()?;
    let p = match readout.shelving_probability {
        Some(p) => p,
        None => rate_model_shelving_probability(readout, species)?,
    };
    let failure = (1.0 - p).powi(readout.shelving_cycles as i32);
    let tau = match readout.shelf_lifetime_s {
        Some(t) => t,
        None => {
            species
                .level(&readout.shelf_level)
                .ok_or_else(|| Error::Config(format!("{} has no level {}", species.name, readout.shelf_level)))?
                .lifetime
        }
    };
    if !(tau > 0.0) {
        return Err(Error::Config(format!("shelf lifetime must be > 0, got {tau}")));
    }
    let deshelving = -(-readout.deshelve_window_us * 1e-6 / tau).exp_m1();
    Ok((failure, deshelving))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdleInterval {
    pub idle_us: f64,
    /// Lifetime of the idling state against leakage.
    pub lifetime_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimedPulse {
    pub duration_us: f64,
    /// Decoherence time T2** of the transition.
    #[serde(default)]
    pub t2_us: Option<f64>,
    /// RMS detuning drift of the transition.
    #[serde(default)]
    pub detuning_rms_khz: Option<f64>,
    /// Amplitude-miscalibration error of this pulse.
    #[serde(default)]
    pub amplitude_error: Option<f64>,
}

/// One error source: either a direct value or the data it derives from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SourceInput {
    #[serde(default)]
    pub value: Option<f64>,
    #[serde(default)]
    pub uncertainty: f64,
    #[serde(default)]
    pub idle: Vec<IdleInterval>,
    #[serde(default)]
    pub pulses: Vec<TimedPulse>,
    /// Sources sharing a tag have correlated uncertainties (summed
    /// linearly before the quadrature sum).
    #[serde(default)]
    pub correlation: Option<String>,
}

/// Measured inputs of the transfer pulses for one qubit state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct StateInputs {
    #[serde(default)]
    pub leakage: Option<SourceInput>,
    #[serde(default)]
    pub decoherence: Option<SourceInput>,
    #[serde(default)]
    pub detuning: Option<SourceInput>,
    #[serde(default)]
    pub amplitude: Option<SourceInput>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MeasuredErrorInputs {
    #[serde(default)]
    pub bright: StateInputs,
    #[serde(default)]
    pub dark: StateInputs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Transfer,
    Readout,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BudgetRow {
    pub name: String,
    pub section: Section,
    pub simulated: bool,
    /// `None` when the column does not apply or was not provided.
    pub bright: Option<ErrorValue>,
    pub dark: Option<ErrorValue>,
    pub correlation: Option<String>,
    /// Columns the inputs should have supplied but did not.
    pub missing: Vec<String>,
}

fn check_probability(name: &str, v: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name}: error {v} outside [0, 1]")));
    }
    Ok(v)
}

fn derive_source(kind: &str, input: &SourceInput) -> Result<ErrorValue> {
    if let Some(v) = input.value {
        return Ok(ErrorValue { value: check_probability(kind, v)?, uncertainty: input.uncertainty });
    }
    let mut total = 0.0;
    match kind {
        "leakage" => {
            for iv in &input.idle {
                if !(iv.lifetime_s > 0.0) || !(iv.idle_us >= 0.0) {
                    return Err(Error::Config("leakage needs idle_us >= 0 and lifetime_s > 0".into()));
                }
                total += -(-iv.idle_us * 1e-6 / iv.lifetime_s).exp_m1();
            }
        }
        "decoherence" => {
            for p in &input.pulses {
                let t2 = p.t2_us.ok_or_else(|| Error::Config("decoherence pulse without t2_us".into()))?;
                if !(t2 > 0.0) {
                    return Err(Error::Config("t2_us must be > 0".into()));
                }
                total += 0.5 * -(-p.duration_us / t2).exp_m1();
            }
        }
        "detuning" => {
            for p in &input.pulses {
                let rms = p.detuning_rms_khz.ok_or_else(|| Error::Config("detuning pulse without detuning_rms_khz".into()))?;
                let t = p.duration_us * 1e-6;
                if !(t > 0.0) {
                    return Err(Error::Config("detuning pulse needs duration_us > 0".into()));
                }
                total += 1.0 - rabi_transfer_probability(PI / t, 2.0 * PI * rms * 1e3, t);
            }
        }
        "amplitude" => {
            for p in &input.pulses {
                total += p.amplitude_error.ok_or_else(|| Error::Config("amplitude pulse without amplitude_error".into()))?;
            }
        }
        _ => unreachable!("fixed source list"),
    }
    Ok(ErrorValue { value: check_probability(kind, total)?, uncertainty: input.uncertainty })
}

const SOURCES: [(&str, &str); 4] =
    [("leakage", "Leakage"), ("decoherence", "Decoherence"), ("detuning", "Detuning"), ("amplitude", "Amplitude miscalibration")];

fn source<'a>(inputs: &'a StateInputs, kind: &str) -> Option<&'a SourceInput> {
    match kind {
        "leakage" => inputs.leakage.as_ref(),
        "decoherence" => inputs.decoherence.as_ref(),
        "detuning" => inputs.detuning.as_ref(),
        "amplitude" => inputs.amplitude.as_ref(),
        _ => None,
    }
}

/// Transfer-pulse rows (leakage, decoherence, detuning, amplitude) for the
/// bright and dark columns. Missing inputs give an empty cell listed in
/// `missing`.
pub fn transfer_pulse_errors(measured: &MeasuredErrorInputs) -> Result<Vec<BudgetRow>> {
    SOURCES
        .iter()
        .map(|&(kind, name)| {
            let mut row = BudgetRow {
                name: name.to_string(),
                section: Section::Transfer,
                simulated: false,
                bright: None,
                dark: None,
                correlation: None,
                missing: Vec::new(),
            };
            for (col, inputs) in [("bright", &measured.bright), ("dark", &measured.dark)] {
                match source(inputs, kind) {
                    Some(s) => {
                        let v = derive_source(kind, s)?;
                        row.correlation = row.correlation.take().or_else(|| s.correlation.clone());
                        if col == "bright" {
                            row.bright = Some(v);
                        } else {
                            row.dark = Some(v);
                        }
                    }
                    None => row.missing.push(col.to_string()),
                }
            }
            Ok(row)
        })
        .collect()
}

/// Simulated readout rows.
pub fn readout_rows(readout: &ReadoutConfig, species: &SpeciesData) -> Result<Vec<BudgetRow>> {
    let shelving = off_resonant_shelving_error(readout, species)?;
    let t = readout_threshold(readout)?;
    let (failure, deshelving) = shelving_failure_and_deshelving(readout, species)?;
    let row = |name: &str, bright: Option<f64>, dark: Option<f64>| BudgetRow {
        name: name.to_string(),
        section: Section::Readout,
        simulated: true,
        bright: bright.map(ErrorValue::exact),
        dark: dark.map(ErrorValue::exact),
        correlation: None,
        missing: Vec::new(),
    };
    Ok(vec![
        row("Off-resonant shelving", Some(shelving), None),
        row("Thresholding", Some(t.bright_miss), Some(t.dark_false_bright)),
        row("Shelving failure", None, Some(failure)),
        row("Deshelving", None, Some(deshelving)),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BudgetTotals {
    pub transfer: [ErrorValue; 2],
    pub readout: [ErrorValue; 2],
    pub total: [ErrorValue; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BudgetReport {
    pub rows: Vec<BudgetRow>,
    pub totals: BudgetTotals,
    /// "row/column" entries that were not provided.
    pub missing: Vec<String>,
}

/// Sum in sorted order, so the total does not depend on row order.
fn ordered_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

/// Sum of values; uncertainties add linearly within a correlation tag and in
/// quadrature across tags and untagged rows.
fn column_total<'a>(cells: impl Iterator<Item = (&'a Option<String>, ErrorValue)>) -> ErrorValue {
    let mut values = Vec::new();
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut variances = Vec::new();
    for (tag, v) in cells {
        values.push(v.value);
        match tag {
            Some(t) => groups.entry(t.clone()).or_default().push(v.uncertainty),
            None => variances.push(v.uncertainty * v.uncertainty),
        }
    }
    variances.extend(groups.into_values().map(|u| ordered_sum(u).powi(2)));
    ErrorValue { value: ordered_sum(values), uncertainty: ordered_sum(variances).sqrt() }
}

pub fn aggregate_budget(rows: &[BudgetRow]) -> BudgetReport {
    let total_for = |section: Option<Section>, col: usize| {
        column_total(rows.iter().filter(|r| section.map(|s| r.section == s).unwrap_or(true)).filter_map(|r| {
            let cell = if col == 0 { r.bright } else { r.dark };
            cell.map(|v| (&r.correlation, v))
        }))
    };
    let both = |s: Option<Section>| [total_for(s, 0), total_for(s, 1)];
    let missing = rows.iter().flat_map(|r| r.missing.iter().map(move |c| format!("{}/{}", r.name, c))).collect();
    BudgetReport {
        rows: rows.to_vec(),
        totals: BudgetTotals {
            transfer: both(Some(Section::Transfer)),
            readout: both(Some(Section::Readout)),
            total: both(None),
        },
        missing,
    }
}

fn cell_csv(v: Option<ErrorValue>) -> (String, String) {
    match v {
        Some(v) => (format!("{:.10e}", v.value), format!("{:.10e}", v.uncertainty)),
        None => (String::new(), String::new()),
    }
}

fn cell_text(v: Option<ErrorValue>, missing: bool) -> String {
    match v {
        Some(v) if v.uncertainty > 0.0 => format!("{:.2}({:.2})", v.value * 1e5, v.uncertainty * 1e5),
        Some(v) => format!("{:.2}", v.value * 1e5),
        None if missing => "not provided".to_string(),
        None => "-".to_string(),
    }
}

impl BudgetReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,row,simulated,bright,bright_unc,dark,dark_unc\n");
        let mut line = |section: &str, name: &str, sim: &str, b: Option<ErrorValue>, d: Option<ErrorValue>| {
            let (bv, bu) = cell_csv(b);
            let (dv, du) = cell_csv(d);
            let _ = writeln!(out, "{section},{name},{sim},{bv},{bu},{dv},{du}");
        };
        for r in &self.rows {
            let section = match r.section {
                Section::Transfer => "transfer",
                Section::Readout => "readout",
            };
            line(section, &r.name, if r.simulated { "true" } else { "false" }, r.bright, r.dark);
        }
        let t = &self.totals;
        line("total", "Total transfer pulse error", "", Some(t.transfer[0]), Some(t.transfer[1]));
        line("total", "Total optical readout error", "", Some(t.readout[0]), Some(t.readout[1]));
        line("total", "Total expected error", "", Some(t.total[0]), Some(t.total[1]));
        out
    }

    /// Aligned table in units of 1e-5.
    pub fn to_text(&self) -> String {
        let mut lines: Vec<[String; 3]> = vec![["Error source (x1e-5)".into(), "bright".into(), "dark".into()]];
        for r in &self.rows {
            let name = if r.simulated { format!("{} *", r.name) } else { r.name.clone() };
            let miss = |c: &str| r.missing.iter().any(|m| m == c);
            lines.push([name, cell_text(r.bright, miss("bright")), cell_text(r.dark, miss("dark"))]);
        }
        let t = &self.totals;
        for (name, v) in [
            ("Total transfer pulse error", t.transfer),
            ("Total optical readout error", t.readout),
            ("Total expected error", t.total),
        ] {
            lines.push([name.into(), cell_text(Some(v[0]), false), cell_text(Some(v[1]), false)]);
        }
        let w0 = lines.iter().map(|l| l[0].len()).max().unwrap_or(0);
        let w1 = lines.iter().map(|l| l[1].len()).max().unwrap_or(0);
        let mut out = String::new();
        for l in &lines {
            let _ = writeln!(out, "{:<w0$}  {:>w1$}  {}", l[0], l[1], l[2]);
        }
        out.push_str("* simulated\n");
        out
    }
}

/// Readout configuration plus measured transfer-pulse inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetInputs {
    pub species: String,
    pub readout: ReadoutConfig,
    #[serde(default)]
    pub transfer: MeasuredErrorInputs,
}

impl BudgetInputs {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let b: BudgetInputs = toml::from_str(text).map_err(|e| Error::Config(format!("budget inputs: {e}")))?;
        b.readout.validate()?;
        Ok(b)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn default_ca43() -> Self {
        Self::from_toml_str(DEFAULT_CA43_BUDGET).expect("bundled budget inputs are valid")
    }

    /// Full report: transfer rows from the measured inputs, readout rows
    /// simulated.
    pub fn report(&self, species: &SpeciesData) -> Result<BudgetReport> {
        let mut rows = transfer_pulse_errors(&self.transfer)?;
        rows.extend(readout_rows(&self.readout, species)?);
        Ok(aggregate_budget(&rows))
    }
}
