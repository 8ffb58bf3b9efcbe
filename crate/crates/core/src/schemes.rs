//! Pulse sequences built from laser and microwave steps, iterated cycle by
//! cycle.
//!
//! A cycle is a fixed linear map on the occupation vector, so each sequence
//! is compiled once into a single transfer matrix and then applied
//! repeatedly.

use crate::config::{parse_pair, BeamConfig, MicrowaveConfig, RunConfig};
use crate::error::{Error, Result};
use crate::microwave::{
    build_groups, build_mw_operation, check_coverage, fssp_tone_plan, MicrowaveTone, MwOperation, MwSettings, PlannedTone,
};
use crate::rates::{
    build_rate_matrix_with, linear_polarization, propagator, LaserBeam, Occupations, Polarization, RateMatrix, RateOptions,
};
use crate::registry::StateRegistry;
use crate::species::{SpeciesData, TransitionSpec};
use crate::structure::{clock_field, ClockPoint, FieldConfig, StateLabel};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Debug)]
pub enum StepKind {
    /// Beams applied together for `duration` seconds.
    Laser { beams: Vec<LaserBeam>, duration: f64, allow_lambda: bool },
    Microwave(MwOperation),
    /// Free evolution (spontaneous decay only).
    Wait(f64),
}

#[derive(Clone, Debug)]
pub struct PulseStep {
    pub name: String,
    pub kind: StepKind,
}

impl PulseStep {
    pub fn laser(name: &str, beams: Vec<LaserBeam>, duration: f64) -> Self {
        PulseStep { name: name.to_string(), kind: StepKind::Laser { beams, duration, allow_lambda: false } }
    }

    /// Laser step whose beams may jointly couple three or more states.
    pub fn multi_tone(name: &str, beams: Vec<LaserBeam>, duration: f64) -> Self {
        PulseStep { name: name.to_string(), kind: StepKind::Laser { beams, duration, allow_lambda: true } }
    }

    pub fn microwave(op: MwOperation) -> Self {
        PulseStep { name: op.name.clone(), kind: StepKind::Microwave(op) }
    }

    pub fn duration(&self) -> f64 {
        match &self.kind {
            StepKind::Laser { duration, .. } => *duration,
            StepKind::Microwave(op) => op.duration,
            StepKind::Wait(t) => *t,
        }
    }

    /// Transfer matrix of the step over the whole registry.
    pub fn transfer(&self, registry: &StateRegistry) -> Result<DMatrix<f64>> {
        match &self.kind {
            StepKind::Laser { beams, duration, allow_lambda } => {
                if !(*duration > 0.0) {
                    return Err(Error::Config(format!("laser step {} needs a positive duration", self.name)));
                }
                let r = build_rate_matrix_with(beams, registry, RateOptions { allow_lambda: *allow_lambda })?;
                propagator(&r, *duration)
            }
            StepKind::Microwave(op) => Ok(op.embedded(registry)),
            StepKind::Wait(t) => propagator(&build_rate_matrix_with(&[], registry, RateOptions::default())?, *t),
        }
    }

    /// Rate matrix of a laser step, for diagnostics.
    pub fn rate_matrix(&self, registry: &StateRegistry) -> Option<Result<RateMatrix>> {
        match &self.kind {
            StepKind::Laser { beams, allow_lambda, .. } => {
                Some(build_rate_matrix_with(beams, registry, RateOptions { allow_lambda: *allow_lambda }))
            }
            _ => None,
        }
    }
}

/// One cycle of strictly sequential steps.
#[derive(Clone, Debug)]
pub struct PulseSequence {
    pub steps: Vec<PulseStep>,
    /// Idle time added once per cycle (seconds).
    pub dead_time: f64,
}

impl PulseSequence {
    pub fn new(steps: Vec<PulseStep>) -> Self {
        PulseSequence { steps, dead_time: 0.0 }
    }

    pub fn duration(&self) -> f64 {
        self.steps.iter().map(PulseStep::duration).sum::<f64>() + self.dead_time
    }

    /// Product of the step transfers, first step rightmost.
    pub fn compile(&self, registry: &StateRegistry) -> Result<DMatrix<f64>> {
        let n = registry.len();
        let mut m = DMatrix::identity(n, n);
        for step in &self.steps {
            m = step.transfer(registry)? * m;
        }
        if self.dead_time > 0.0 {
            m = PulseStep { name: "dead time".into(), kind: StepKind::Wait(self.dead_time) }.transfer(registry)? * m;
        }
        Ok(m)
    }
}

/// A compiled scheme: registry, cycle map and the state being prepared.
#[derive(Clone, Debug)]
pub struct Scheme {
    pub registry: StateRegistry,
    pub sequence: PulseSequence,
    pub cycle: DMatrix<f64>,
    pub cycle_duration: f64,
    pub target: usize,
}

impl Scheme {
    pub fn new(registry: StateRegistry, sequence: PulseSequence, target: usize) -> Result<Self> {
        if target >= registry.len() {
            return Err(Error::Config("target index outside the registry".into()));
        }
        let cycle = sequence.compile(&registry)?;
        let cycle_duration = sequence.duration();
        Ok(Scheme { registry, sequence, cycle, cycle_duration, target })
    }

    pub fn error(&self, p: &Occupations) -> f64 {
        (1.0 - p.get(self.target)).clamp(0.0, 1.0)
    }

    /// Population spread uniformly over the ground states.
    pub fn uniform_ground(&self) -> Occupations {
        Occupations::uniform_over(self.registry.len(), self.registry.ground_range())
    }

    /// Fixed point of the cycle map by direct solution rather than
    /// iteration. Requires a unique fixed point.
    /// True when every state has a path to the target under repeated cycles,
    /// so the iteration has a single attracting distribution to settle into.
    pub fn reaches_target(&self) -> bool {
        let n = self.registry.len();
        let mut seen = vec![false; n];
        let mut stack = vec![self.target];
        seen[self.target] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if !seen[j] && self.cycle[(i, j)] > 0.0 {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|v| v)
    }

    pub fn fixed_point(&self) -> Result<Occupations> {
        let n = self.registry.len();
        let mut a = &self.cycle - DMatrix::identity(n, n);
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut b = DVector::zeros(n);
        b[n - 1] = 1.0;
        let x = a.lu().solve(&b).ok_or_else(|| Error::Numerical("cycle map has no unique fixed point".into()))?;
        let mut p = Occupations(x);
        for v in p.0.iter_mut() {
            if *v < 0.0 && *v > -1e-12 {
                *v = 0.0;
            }
        }
        p.check(1e-9)?;
        Ok(p)
    }
}

/// Error and elapsed experiment time after each cycle (index 0 = initial).
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationTrace {
    pub errors: Vec<f64>,
    pub times: Vec<f64>,
    pub final_occupations: Occupations,
    pub converged: bool,
}

impl SimulationTrace {
    pub fn cycles(&self) -> usize {
        self.errors.len() - 1
    }

    /// First cycle at which the error is below `level`.
    pub fn first_below(&self, level: f64) -> Option<usize> {
        self.errors.iter().position(|&e| e < level)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemeResult {
    pub steady_error: f64,
    pub cycles: usize,
    pub duration: f64,
    pub converged: bool,
    pub trace: SimulationTrace,
}

impl SchemeResult {
    fn from_trace(trace: SimulationTrace) -> Self {
        SchemeResult {
            steady_error: *trace.errors.last().expect("non-empty"),
            cycles: trace.cycles(),
            duration: *trace.times.last().expect("non-empty"),
            converged: trace.converged,
            trace,
        }
    }
}

/// Stopping rule for [`run_to_convergence`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Convergence {
    /// Largest per-cycle change in error (and in any occupation) accepted
    /// as converged.
    pub threshold: f64,
    pub max_cycles: usize,
}

impl Default for Convergence {
    fn default() -> Self {
        Convergence { threshold: 1e-7, max_cycles: 100_000 }
    }
}

/// Applies exactly `cycles` cycles.
pub fn run_cycles(scheme: &Scheme, initial: &Occupations, cycles: usize) -> Result<SimulationTrace> {
    iterate(scheme, initial, cycles, None)
}

/// Iterates until the per-cycle change of the error and of every occupation
/// falls below the threshold, or the cycle cap is hit. Hitting the cap is
/// not an error here; `converged` is false in that case.
pub fn run_to_convergence(scheme: &Scheme, initial: &Occupations, conv: Convergence) -> Result<SchemeResult> {
    Ok(SchemeResult::from_trace(iterate(scheme, initial, conv.max_cycles, Some(conv.threshold))?))
}

/// Like [`run_to_convergence`] but non-convergence is an error.
pub fn run_to_convergence_strict(scheme: &Scheme, initial: &Occupations, conv: Convergence) -> Result<SchemeResult> {
    let r = run_to_convergence(scheme, initial, conv)?;
    if !r.converged {
        return Err(Error::NonConvergence { cycles: r.cycles, error: r.steady_error });
    }
    Ok(r)
}

fn iterate(scheme: &Scheme, initial: &Occupations, max_cycles: usize, threshold: Option<f64>) -> Result<SimulationTrace> {
    if initial.len() != scheme.registry.len() {
        return Err(Error::Config("initial occupations do not match the registry".into()));
    }
    initial.check(1e-9)?;
    let mut p = initial.0.clone();
    let mut errors = vec![scheme.error(initial)];
    let mut times = vec![0.0];
    let mut converged = false;
    // Without a path to the target a flat trace is stagnation, not convergence.
    let threshold = threshold.filter(|_| scheme.reaches_target());
    for n in 1..=max_cycles {
        let next = &scheme.cycle * &p;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite occupation after cycle {n}")));
        }
        let err = (1.0 - next[scheme.target]).clamp(0.0, 1.0);
        let change = (&next - &p).amax();
        let prev_err = *errors.last().expect("non-empty");
        p = next;
        errors.push(err);
        times.push(n as f64 * scheme.cycle_duration);
        if let Some(th) = threshold {
            if (prev_err - err).abs() < th && change < th {
                converged = true;
                break;
            }
        }
    }
    for v in p.iter_mut() {
        if *v < 0.0 && *v > -1e-12 {
            *v = 0.0;
        }
    }
    let final_occupations = Occupations(p);
    final_occupations.check(1e-9)?;
    Ok(SimulationTrace { errors, times, final_occupations, converged })
}

/// Cycles until the error first drops below `level`, up to `cap`.
pub fn cycles_to_reach(scheme: &Scheme, initial: &Occupations, level: f64, cap: usize) -> Result<Option<usize>> {
    initial.check(1e-9)?;
    let mut p = initial.0.clone();
    if scheme.error(initial) < level {
        return Ok(Some(0));
    }
    for n in 1..=cap {
        p = &scheme.cycle * &p;
        if (1.0 - p[scheme.target]) < level {
            return Ok(Some(n));
        }
    }
    Ok(None)
}

/// Levels, field, beams and MW groups resolved from a run configuration.
#[derive(Clone, Debug)]
pub struct Setup {
    pub config: RunConfig,
    pub registry: StateRegistry,
    pub target: StateLabel,
    /// Ground state emptied by the pump beam.
    pub pump_state: StateLabel,
    pub pump: LaserBeam,
    pub repump: Option<LaserBeam>,
}

fn sign_of(label: StateLabel) -> i32 {
    if label.m.twice() < 0 {
        -1
    } else {
        1
    }
}

/// Rank-1 transition out of the ground level into a J = 1/2 level.
fn pump_transition<'a>(species: &'a SpeciesData, name: Option<&str>) -> Result<&'a TransitionSpec> {
    if let Some(n) = name {
        return species.transition(n).ok_or_else(|| Error::Config(format!("{} has no transition {n}", species.name)));
    }
    species
        .optical_transitions
        .iter()
        .find(|t| {
            t.rank == 1
                && t.lower == species.ground_level
                && species.level(&t.upper).map(|l| l.j.twice() == 1).unwrap_or(false)
        })
        .ok_or_else(|| Error::Config(format!("{} has no S1/2 -> P1/2 style pump transition", species.name)))
}

fn repump_transition<'a>(species: &'a SpeciesData, upper: &str, name: Option<&str>) -> Result<Option<&'a TransitionSpec>> {
    if let Some(n) = name {
        return species
            .transition(n)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("{} has no transition {n}", species.name)));
    }
    Ok(species
        .optical_transitions
        .iter()
        .find(|t| t.rank == 1 && t.upper == upper && t.lower != species.ground_level))
}

/// Lowest-field clock point among the ground transitions |F_o,M> <-> |F_t,M>
/// with M = +-1, searched up to 1 T.
pub fn default_clock_field(species: &SpeciesData) -> Result<(f64, (StateLabel, StateLabel))> {
    let ground = species.level(&species.ground_level).expect("validated");
    let i2 = species.nuclear_spin.twice();
    let (fo, ft) = ((i2 - 1) / 2, (i2 + 1) / 2);
    let mut best: Option<(f64, (StateLabel, StateLabel))> = None;
    for m in [1, -1] {
        let pair = (StateLabel::int(fo, m), StateLabel::int(ft, m));
        if let ClockPoint::Found { field_tesla, .. } = clock_field(ground, species, pair.0, pair.1, (1e-5, 1.0))? {
            if best.map(|b| field_tesla < b.0).unwrap_or(true) {
                best = Some((field_tesla, pair));
            }
        }
    }
    best.ok_or_else(|| Error::Structure(format!("{}: no M = +-1 clock point below 1 T", species.name)))
}

/// Field from the configuration, or the clock point it asks for.
pub fn resolve_field(config: &RunConfig, species: &SpeciesData) -> Result<FieldConfig> {
    if let Some(mt) = config.field_mt {
        return FieldConfig::from_millitesla(mt);
    }
    if let Some(pair) = &config.clock_transition {
        let (a, b) = parse_pair(pair)?;
        let ground = species.level(&species.ground_level).expect("validated");
        return match clock_field(ground, species, a, b, (1e-5, 1.0))? {
            ClockPoint::Found { field_tesla, .. } => FieldConfig::new(field_tesla),
            ClockPoint::NoClockPoint => Err(Error::Structure(format!("no clock point for |{a}> <-> |{b}> below 1 T"))),
        };
    }
    FieldConfig::new(default_clock_field(species)?.0)
}

fn beam_polarization(cfg: &BeamConfig) -> Result<Polarization> {
    match (cfg.weights, cfg.angle_deg) {
        (Some(w), _) => Polarization::from_weights(w[0], w[1], w[2]),
        (None, Some(theta)) => linear_polarization(theta),
        (None, None) => linear_polarization(90.0),
    }
}

fn make_beam(cfg: &BeamConfig, name: &str, transition: &str, anchor: (StateLabel, StateLabel)) -> Result<LaserBeam> {
    Ok(LaserBeam::new(transition, anchor, cfg.intensity, beam_polarization(cfg)?)
        .named(name)
        .with_detuning_hz(cfg.detuning_mhz * 1e6)
        .with_lineshape(cfg.lineshape))
}

impl Setup {
    pub fn new(config: &RunConfig, species: &SpeciesData) -> Result<Self> {
        let field = resolve_field(config, species)?;
        let levels = Self::levels(config, species)?;
        let names: Vec<&str> = levels.iter().map(String::as_str).collect();
        let registry = StateRegistry::new(species, field, &names)?;
        Self::with_registry(config, registry)
    }

    fn levels(config: &RunConfig, species: &SpeciesData) -> Result<Vec<String>> {
        let pump = pump_transition(species, config.pump.transition.as_deref())?;
        let mut levels = vec![pump.lower.clone(), pump.upper.clone()];
        if let Some(r) = repump_transition(species, &pump.upper, config.repump.transition.as_deref())? {
            levels.push(r.lower.clone());
        }
        Ok(levels)
    }

    /// Uses an existing registry (for instance a mirrored one).
    pub fn with_registry(config: &RunConfig, registry: StateRegistry) -> Result<Self> {
        config.validate()?;
        let species = registry.species().clone();
        let target = config.target_label(&species)?;
        registry.ground_index(target)?;
        let sign = sign_of(target);
        let i2 = species.nuclear_spin.twice();
        let (fo, ft) = ((i2 - 1) / 2, (i2 + 1) / 2);
        let mt = target.m.twice() / 2;
        let pump_state = StateLabel::int(fo, mt - sign);

        let pt = pump_transition(&species, config.pump.transition.as_deref())?;
        let anchor = match &config.pump.anchor {
            Some(pair) => parse_pair(pair)?,
            None => (pump_state, StateLabel::int(ft, mt)),
        };
        let pump = make_beam(&config.pump, "pump", &pt.name, anchor)?;

        let repump = match repump_transition(&species, &pt.upper, config.repump.transition.as_deref())? {
            Some(rt) if registry.has_level(&rt.lower) => {
                let anchor = match &config.repump.anchor {
                    Some(pair) => parse_pair(pair)?,
                    None => {
                        let d = species.level(&rt.lower).expect("validated");
                        let fmax = (i2 + d.j.twice()) / 2;
                        (StateLabel::int(fmax, mt), StateLabel::int(ft, mt))
                    }
                };
                Some(make_beam(&config.repump, "repump", &rt.name, anchor)?)
            }
            _ => None,
        };
        registry.check_closed()?;
        Ok(Setup { config: config.clone(), registry, target, pump_state, pump, repump })
    }

    pub fn target_index(&self) -> usize {
        self.registry.ground_index(self.target).expect("checked")
    }

    pub fn convergence(&self) -> Convergence {
        Convergence { threshold: self.config.convergence.threshold, max_cycles: self.config.convergence.max_cycles }
    }

    pub fn mw_settings(&self) -> MwSettings {
        let mw = &self.config.microwave;
        MwSettings { rabi: 2.0 * PI * mw.rabi_khz * 1e3, weak_factor: mw.weak_factor, mode: mw.mode, leakage: mw.leakage }
    }

    /// Tone plan from the configuration, or generated from the target.
    pub fn tone_plan(&self) -> Result<Vec<PlannedTone>> {
        let mw = &self.config.microwave;
        let mut plan = match &mw.tones {
            Some(tones) => {
                let plan = tones
                    .iter()
                    .map(|t| {
                        Ok(PlannedTone {
                            group: t.group,
                            transitions: t.transitions.iter().map(parse_pair).collect::<Result<_>>()?,
                            weak: t.weak,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                check_coverage(&self.registry, self.target, self.pump_state, &plan)?;
                return Ok(plan);
            }
            None => fssp_tone_plan(&self.registry, self.target)?,
        };
        match &mw.weak {
            Some(list) => {
                let weak: Vec<(StateLabel, StateLabel)> = list.iter().map(parse_pair).collect::<Result<_>>()?;
                for tone in &mut plan {
                    tone.weak = tone
                        .transitions
                        .iter()
                        .any(|&(x, y)| weak.iter().any(|&(a, b)| (a, b) == (x, y) || (a, b) == (y, x)));
                }
            }
            None => {
                let sign = sign_of(self.target);
                let i2 = self.registry.species().nuclear_spin.twice();
                let (fo, ft) = ((i2 - 1) / 2, (i2 + 1) / 2);
                let freq = |(a, b): (StateLabel, StateLabel)| -> Result<f64> {
                    let ea = self.registry.state(self.registry.ground_index(a)?).energy;
                    let eb = self.registry.state(self.registry.ground_index(b)?).energy;
                    Ok((eb - ea).abs() / (2.0 * PI))
                };
                let clock = freq((StateLabel::int(fo, sign), StateLabel::int(ft, sign)))?;
                for tone in &mut plan {
                    tone.weak = (freq(tone.transitions[0])? - clock).abs() > mw.weak_offset_mhz * 1e6;
                }
            }
        }
        Ok(plan)
    }

    pub fn mw_groups(&self) -> Result<(MwOperation, MwOperation)> {
        build_groups(&self.tone_plan()?, &self.registry, &self.mw_settings())
    }

    fn laser_step(&self, name: &str, beam: &LaserBeam, duration_us: f64) -> PulseStep {
        PulseStep::laser(name, vec![beam.clone()], duration_us * 1e-6)
    }

    /// One FSSP cycle in the configured order.
    pub fn fssp_sequence(&self) -> Result<PulseSequence> {
        let (a, b) = self.mw_groups()?;
        let mut steps = Vec::new();
        for name in &self.config.cycle.order {
            match name.as_str() {
                "A" => steps.push(PulseStep::microwave(a.clone())),
                "B" => steps.push(PulseStep::microwave(b.clone())),
                "pump" => steps.push(self.laser_step("pump", &self.pump, self.config.pump.duration_us)),
                "repump" => {
                    if let Some(r) = &self.repump {
                        steps.push(self.laser_step("repump", r, self.config.repump.duration_us));
                    }
                }
                other => return Err(Error::Config(format!("unknown cycle step '{other}'"))),
            }
        }
        Ok(PulseSequence { steps, dead_time: self.config.cycle.dead_time_us * 1e-6 })
    }

    pub fn fssp_scheme(&self) -> Result<Scheme> {
        Scheme::new(self.registry.clone(), self.fssp_sequence()?, self.target_index())
    }

    /// Initial occupations named by the configuration.
    pub fn initial(&self) -> Result<Occupations> {
        self.initial_from(&self.config.initial)
    }

    pub fn initial_from(&self, spec: &str) -> Result<Occupations> {
        if spec.trim().eq_ignore_ascii_case("uniform") {
            return Ok(Occupations::uniform_over(self.registry.len(), self.registry.ground_range()));
        }
        let label = StateLabel::parse(spec)?;
        Ok(Occupations::pure(self.registry.len(), self.registry.ground_index(label)?))
    }
}

/// Pulsed FSSP for at most `max_cycles` cycles, stopping early on
/// convergence.
pub fn run_fssp(setup: &Setup, initial: &Occupations, max_cycles: usize) -> Result<SchemeResult> {
    let scheme = setup.fssp_scheme()?;
    let conv = Convergence { threshold: setup.config.convergence.threshold, max_cycles };
    run_to_convergence(&scheme, initial, conv)
}

/// Cycles to reach error 1/e from each ground state in registry order.
pub fn prepare_from_all_states(setup: &Setup) -> Result<Vec<(StateLabel, Option<usize>)>> {
    let scheme = setup.fssp_scheme()?;
    let cap = setup.config.convergence.max_cycles;
    setup
        .registry
        .ground_range()
        .into_par_iter()
        .map(|k| {
            let init = Occupations::pure(scheme.registry.len(), k);
            let n = cycles_to_reach(&scheme, &init, (-1f64).exp(), cap)?;
            Ok((scheme.registry.state(k).label, n))
        })
        .collect()
}

fn polarized(epsilon: f64, sign: i32) -> Result<Polarization> {
    let p = Polarization::from_weights(epsilon / 2.0, epsilon / 2.0, 1.0 - epsilon)?;
    Ok(if sign < 0 { p.mirrored() } else { p })
}

/// PSSP: circularly polarised carrier (target manifold), sideband (other
/// manifold) and repump applied continuously, in blocks of
/// `pssp.duration_us`, until convergence; then `correction_cycles` FSSP
/// cycles.
pub fn pssp_scheme(setup: &Setup, epsilon: f64) -> Result<Scheme> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("polarisation impurity {epsilon} outside [0, 1]")));
    }
    let cfg = &setup.config.pssp;
    let sign = sign_of(setup.target);
    let species = setup.registry.species();
    let i2 = species.nuclear_spin.twice();
    let (fo, ft) = ((i2 - 1) / 2, (i2 + 1) / 2);
    let mt = setup.target.m.twice() / 2;
    let upper = StateLabel::int(ft, mt);
    let pol = polarized(epsilon, sign)?;
    let carrier = LaserBeam::new(&setup.pump.transition, (StateLabel::int(ft, mt - sign), upper), cfg.intensity, pol)
        .named("carrier");
    let sideband = LaserBeam::new(
        &setup.pump.transition,
        (StateLabel::int(fo, mt - sign), upper),
        cfg.intensity * cfg.sideband_ratio,
        pol,
    )
    .named("sideband");
    let mut beams = vec![carrier, sideband];
    beams.extend(setup.repump.iter().cloned());
    let steps = vec![PulseStep::multi_tone("pssp", beams, cfg.duration_us * 1e-6)];
    Scheme::new(setup.registry.clone(), PulseSequence::new(steps), setup.target_index())
}

pub fn run_pssp(setup: &Setup, epsilon: f64, initial: &Occupations) -> Result<SchemeResult> {
    let scheme = pssp_scheme(setup, epsilon)?;
    let first = run_to_convergence(&scheme, initial, setup.convergence())?;
    let extra = setup.config.pssp.correction_cycles;
    if extra == 0 {
        return Ok(first);
    }
    let fssp = setup.fssp_scheme()?;
    let tail = run_cycles(&fssp, &first.trace.final_occupations, extra)?;
    let mut trace = first.trace;
    let t0 = *trace.times.last().expect("non-empty");
    trace.errors.extend_from_slice(&tail.errors[1..]);
    trace.times.extend(tail.times[1..].iter().map(|t| t0 + t));
    trace.final_occupations = tail.final_occupations;
    Ok(SchemeResult::from_trace(trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldRegime {
    Low,
    High,
}

/// Alternative scheme: multi-tone pumping of the F_o manifold, with MW pi
/// pulses returning every F_t state except the target to F_o.
///
/// Cycle: MW |F_t,M> <-> |F_o,M> (|M| <= F_o), pump tones, repump,
/// MW |F_t,+-F_t> <-> |F_o,+-F_o>, pump tones, repump. The target is
/// `alternative.target`, by default |F_t,0>.
pub fn alternative_scheme(config: &RunConfig, species: &SpeciesData, regime: FieldRegime) -> Result<Scheme> {
    let alt = &config.alternative;
    let i2 = species.nuclear_spin.twice();
    let (fo, ft) = ((i2 - 1) / 2, (i2 + 1) / 2);
    let mut cfg = config.clone();
    cfg.field_mt = Some(match regime {
        FieldRegime::Low => alt.low_field_mt,
        FieldRegime::High => alt.high_field_mt,
    });
    cfg.target = Some(alt.target.clone().unwrap_or_else(|| format!("{ft},0")));
    let setup = Setup::new(&cfg, species)?;
    let target = setup.target;
    if target.f.twice() != 2 * ft {
        return Err(Error::Config(format!("alternative target |{target}> must lie in F = {ft}")));
    }
    let pol = linear_polarization(alt.angle_deg)?;
    // Tones are anchored on the strongest polarisation component.
    let w = pol.weights();
    let q = if w[1] >= w[0].max(w[2]) { 0 } else { 1 };
    let tones: Vec<LaserBeam> = (-fo..=fo)
        .map(|m| {
            LaserBeam::new(&setup.pump.transition, (StateLabel::int(fo, m), StateLabel::int(ft, m + q)), alt.intensity, pol)
                .named(&format!("tone {m:+}"))
        })
        .collect();
    let rabi = 2.0 * PI * alt.rabi_khz * 1e3;
    let (mode, leak) = (cfg.microwave.mode, cfg.microwave.leakage);
    let keep = |pair: &(StateLabel, StateLabel)| pair.0 != target;
    let inner: Vec<MicrowaveTone> = (-fo..=fo)
        .map(|m| (StateLabel::int(ft, m), StateLabel::int(fo, m)))
        .filter(keep)
        .map(|(a, b)| MicrowaveTone::pi_pulse(a, b, rabi))
        .collect();
    let edges: Vec<MicrowaveTone> = [1, -1]
        .into_iter()
        .map(|s| (StateLabel::int(ft, s * ft), StateLabel::int(fo, s * fo)))
        .filter(keep)
        .map(|(a, b)| MicrowaveTone::pi_pulse(a, b, rabi))
        .collect();
    let mw1 = build_mw_operation("return", &inner, &setup.registry, mode, leak)?;
    let mw2 = build_mw_operation("return edges", &edges, &setup.registry, mode, leak)?;
    let pump = PulseStep::multi_tone("pump tones", tones, alt.pump_duration_us * 1e-6);
    let mut steps = Vec::new();
    for mw in [mw1, mw2] {
        steps.push(PulseStep::microwave(mw));
        steps.push(pump.clone());
        if let Some(r) = &setup.repump {
            steps.push(setup.laser_step("repump", r, cfg.repump.duration_us));
        }
    }
    Scheme::new(setup.registry.clone(), PulseSequence::new(steps), setup.target_index())
}

/// Runs the alternative scheme for the configured number of cycles.
pub fn run_alternative(config: &RunConfig, species: &SpeciesData, regime: FieldRegime) -> Result<SchemeResult> {
    let scheme = alternative_scheme(config, species, regime)?;
    let setup_initial = Occupations::uniform_over(scheme.registry.len(), scheme.registry.ground_range());
    let mut trace = run_cycles(&scheme, &setup_initial, config.alternative.cycles)?;
    let n = trace.errors.len();
    trace.converged = n >= 2 && (trace.errors[n - 1] - trace.errors[n - 2]).abs() < config.convergence.threshold;
    Ok(SchemeResult::from_trace(trace))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub intensity: f64,
    pub result: std::result::Result<SchemeResult, String>,
    /// Error of the exact per-cycle fixed point, free of the stopping rule.
    pub fixed_point_error: Option<f64>,
}

/// One convergence run per pump intensity, in parallel; failures are kept
/// per row.
pub fn sweep_intensity(setup: &Setup, intensities: &[f64]) -> Vec<SweepRow> {
    intensities
        .par_iter()
        .map(|&s| {
            let scheme = || -> Result<(Setup, Scheme)> {
                let mut cfg = setup.config.clone();
                cfg.pump.intensity = s;
                let variant = Setup::with_registry(&cfg, setup.registry.clone())?;
                let scheme = variant.fssp_scheme()?;
                Ok((variant, scheme))
            };
            match scheme() {
                Ok((variant, scheme)) => {
                    let result = variant
                        .initial()
                        .and_then(|p0| run_to_convergence(&scheme, &p0, variant.convergence()))
                        .map_err(|e| e.to_string());
                    let fixed_point_error = scheme.fixed_point().ok().map(|p| scheme.error(&p));
                    SweepRow { intensity: s, result, fixed_point_error }
                }
                Err(e) => SweepRow { intensity: s, result: Err(e.to_string()), fixed_point_error: None },
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeciesRow {
    pub species: String,
    pub target: String,
    pub field_tesla: f64,
    pub hyperfine_splitting_hz: f64,
    pub result: std::result::Result<SchemeResult, String>,
}

/// Steady-state FSSP error for each species in the configured scan, using
/// the pump, repump, MW and convergence settings of `config`.
pub fn cross_species_errors(
    config: &RunConfig,
    load: &(dyn Fn(&str) -> Result<SpeciesData> + Sync),
) -> Vec<SpeciesRow> {
    config
        .species_scan
        .par_iter()
        .map(|entry| {
            let mut row = SpeciesRow {
                species: entry.species.clone(),
                target: entry.target.clone().unwrap_or_default(),
                field_tesla: f64::NAN,
                hyperfine_splitting_hz: f64::NAN,
                result: Err(String::new()),
            };
            let run = |row: &mut SpeciesRow| -> Result<SchemeResult> {
                let species = load(&entry.species)?;
                row.hyperfine_splitting_hz = species.ground_hyperfine_splitting_hz();
                let mut cfg = RunConfig::for_species(&entry.species);
                cfg.field_mt = entry.field_mt;
                cfg.target = entry.target.clone();
                cfg.pump = BeamConfig { transition: None, anchor: None, ..config.pump.clone() };
                cfg.repump = BeamConfig { transition: None, anchor: None, ..config.repump.clone() };
                cfg.microwave = MicrowaveConfig { weak: None, tones: None, ..config.microwave.clone() };
                cfg.cycle = config.cycle.clone();
                cfg.convergence = config.convergence;
                let setup = Setup::new(&cfg, &species)?;
                row.field_tesla = setup.registry.field().field_tesla;
                row.target = setup.target.to_string();
                run_to_convergence(&setup.fssp_scheme()?, &setup.initial()?, setup.convergence())
            };
            row.result = run(&mut row).map_err(|e| e.to_string());
            row
        })
        .collect()
}

/// Least-squares slope of ln(y) against ln(x).
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Numerical("log-log fit needs two positive points".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Numerical("log-log fit with identical x values".into()));
    }
    Ok(sxy / sxx)
}
