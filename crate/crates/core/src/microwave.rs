//! Microwave population transfer inside the ground level.
//!
//! A group of simultaneously applied tones is reduced to a stochastic
//! transfer matrix over the ground states. Coherences are dropped between
//! operations. Each tone drives one or two intended transitions (a
//! near-degenerate pair is driven by a single tone); every other ground
//! transition with a non-zero magnetic-dipole element sees the tone
//! off-resonantly and picks up a two-level leakage probability.

use crate::error::{Error, Result};
use crate::rates::Occupations;
use crate::registry::StateRegistry;
use crate::structure::{magnetic_dipole_element, StateLabel};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Leakage probabilities below this are not applied.
const LEAKAGE_FLOOR: f64 = 1e-15;

/// Two-level transfer probability (Omega^2/W^2) sin^2(W t / 2) with
/// W = sqrt(Omega^2 + delta^2). Angular frequencies, seconds.
pub fn rabi_transfer_probability(omega: f64, delta: f64, t: f64) -> f64 {
    let w2 = omega * omega + delta * delta;
    if w2 == 0.0 {
        return 0.0;
    }
    let w = w2.sqrt();
    (omega * omega / w2) * (0.5 * w * t).sin().powi(2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MwMode {
    /// Intended transitions are exact swaps.
    #[default]
    Ideal,
    /// Intended transitions follow the Rabi formula with each transition's
    /// own coupling and detuning from the tone.
    Characterized,
}

/// One microwave tone.
#[derive(Clone, Debug, PartialEq)]
pub struct MicrowaveTone {
    /// Intended transitions; the first is the reference the tone frequency
    /// and Rabi frequency refer to.
    pub transitions: Vec<(StateLabel, StateLabel)>,
    /// Rabi frequency on the reference transition (rad/s).
    pub rabi: f64,
    /// Tone frequency minus the reference transition frequency (rad/s).
    pub detuning: f64,
    pub duration: f64,
}

impl MicrowaveTone {
    /// Resonant tone on a single transition.
    pub fn new(lower: StateLabel, upper: StateLabel, rabi: f64, duration: f64) -> Self {
        MicrowaveTone { transitions: vec![(lower, upper)], rabi, detuning: 0.0, duration }
    }

    /// Resonant pi pulse.
    pub fn pi_pulse(lower: StateLabel, upper: StateLabel, rabi: f64) -> Self {
        Self::new(lower, upper, rabi, PI / rabi)
    }

    pub fn mirrored(&self) -> Self {
        let mut t = self.clone();
        t.transitions = self.transitions.iter().map(|(a, b)| (a.mirrored(), b.mirrored())).collect();
        t
    }
}

/// Transfer matrix of one group of simultaneous tones.
#[derive(Clone, Debug, PartialEq)]
pub struct MwOperation {
    pub name: String,
    pub tones: Vec<MicrowaveTone>,
    /// Column-stochastic matrix over the ground states (registry order).
    pub transfer: DMatrix<f64>,
    /// Length of the longest tone.
    pub duration: f64,
}

impl MwOperation {
    /// Applies the transfer to the ground block of a full occupation vector.
    pub fn apply(&self, p: &Occupations, registry: &StateRegistry) -> Result<Occupations> {
        let g = registry.ground_range();
        if p.len() != registry.len() || g.len() != self.transfer.nrows() {
            return Err(Error::Config("microwave operation does not match the state registry".into()));
        }
        let mut v = p.0.clone();
        let ground = self.transfer.clone() * p.0.rows(g.start, g.len());
        v.rows_mut(g.start, g.len()).copy_from(&ground);
        Ok(Occupations(v))
    }

    /// Full-registry matrix (identity outside the ground level).
    pub fn embedded(&self, registry: &StateRegistry) -> DMatrix<f64> {
        let n = registry.len();
        let g = registry.ground_range();
        let mut m = DMatrix::identity(n, n);
        m.view_mut((g.start, g.start), (g.len(), g.len())).copy_from(&self.transfer);
        m
    }

    /// Largest deviation of any row or column sum from 1.
    pub fn stochastic_defect(&self) -> f64 {
        let n = self.transfer.nrows();
        (0..n)
            .map(|k| (self.transfer.row(k).sum() - 1.0).abs().max((self.transfer.column(k).sum() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

fn mix(m: &mut DMatrix<f64>, a: usize, b: usize, p: f64) {
    // Left-multiply by the symmetric 2x2 transfer on (a, b).
    let ra = m.row(a).clone_owned();
    let rb = m.row(b).clone_owned();
    m.row_mut(a).copy_from(&(&ra * (1.0 - p) + &rb * p));
    m.row_mut(b).copy_from(&(&rb * (1.0 - p) + &ra * p));
}

/// Builds the transfer matrix of a group of simultaneous tones.
///
/// Intended transitions are applied first as disjoint 2x2 blocks, then, if
/// `leakage` is set, the off-resonant action of every tone on every other
/// ground transition.
pub fn build_mw_operation(
    name: &str,
    tones: &[MicrowaveTone],
    registry: &StateRegistry,
    mode: MwMode,
    leakage: bool,
) -> Result<MwOperation> {
    let g = registry.ground_range();
    let n = g.len();
    let local = |label: StateLabel| registry.ground_index(label).map(|k| k - g.start);
    let energy = |k: usize| registry.state(g.start + k).energy;
    let element = |a: usize, b: usize| magnetic_dipole_element(registry.state(g.start + a), registry.state(g.start + b)).abs();

    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut blocks = Vec::new();
    let mut duration: f64 = 0.0;
    for (ti, tone) in tones.iter().enumerate() {
        if !(tone.rabi >= 0.0) || !(tone.duration >= 0.0) {
            return Err(Error::Config(format!("{name}: tone {ti} needs rabi >= 0 and duration >= 0")));
        }
        if tone.transitions.is_empty() {
            return Err(Error::Config(format!("{name}: tone {ti} has no transitions")));
        }
        duration = duration.max(tone.duration);
        let (r0, r1) = tone.transitions[0];
        let (ra, rb) = (local(r0)?, local(r1)?);
        let ref_element = element(ra, rb);
        if ref_element == 0.0 {
            return Err(Error::Config(format!("{name}: {r0} <-> {r1} has no magnetic-dipole coupling")));
        }
        let tone_freq = (energy(rb) - energy(ra)).abs() + tone.detuning;
        for &(la, lb) in &tone.transitions {
            let (a, b) = (local(la)?, local(lb)?);
            for s in [a, b] {
                if let Some(other) = owner[s] {
                    return Err(Error::LambdaGuard(format!(
                        "{name}: {} is driven by tones {other} and {ti}",
                        registry.describe(g.start + s)
                    )));
                }
                owner[s] = Some(ti);
            }
            let p = match mode {
                MwMode::Ideal => 1.0,
                MwMode::Characterized => {
                    let omega = tone.rabi * element(a, b) / ref_element;
                    let delta = tone_freq - (energy(b) - energy(a)).abs();
                    rabi_transfer_probability(omega, delta, tone.duration)
                }
            };
            blocks.push((a, b, p));
        }
    }

    let mut transfer = DMatrix::identity(n, n);
    for &(a, b, p) in &blocks {
        mix(&mut transfer, a, b, p);
    }

    for tone in tones.iter().filter(|_| leakage) {
        let (r0, r1) = tone.transitions[0];
        let (ra, rb) = (local(r0)?, local(r1)?);
        let ref_element = element(ra, rb);
        let tone_freq = (energy(rb) - energy(ra)).abs() + tone.detuning;
        for a in 0..n {
            for b in a + 1..n {
                let intended = tone.transitions.iter().any(|&(x, y)| {
                    let (x, y) = (local(x).unwrap_or(usize::MAX), local(y).unwrap_or(usize::MAX));
                    (x == a && y == b) || (x == b && y == a)
                });
                if intended {
                    continue;
                }
                let e = element(a, b);
                if e == 0.0 {
                    continue;
                }
                let omega = tone.rabi * e / ref_element;
                let delta = tone_freq - (energy(b) - energy(a)).abs();
                let p = rabi_transfer_probability(omega, delta, tone.duration);
                if p > LEAKAGE_FLOOR {
                    mix(&mut transfer, a, b, p);
                }
            }
        }
    }

    Ok(MwOperation { name: name.to_string(), tones: tones.to_vec(), transfer, duration })
}

/// Which of the two alternating groups a tone belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MwGroup {
    A,
    B,
}

/// Tone plan entry before conversion to a [`MicrowaveTone`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedTone {
    pub group: MwGroup,
    pub transitions: Vec<(StateLabel, StateLabel)>,
    /// Driven at reduced amplitude for a longer time.
    pub weak: bool,
}

/// Tone plan that lets every ground state except `target` reach `pump`
/// (the ground state the optical pumping empties).
///
/// With I + 1/2 = F_t and target M = F_t (mirror for M = -F_t), tone k
/// drives the near-degenerate pair |F_o,k> <-> |F_t,k+1> and
/// |F_t,k> <-> |F_o,k+1> for k = -F_t .. F_o - 1, skipping any transition
/// that touches the target. One extra tone drives |F_t,F_o> <-> |F_o,F_o>.
/// Tones alternate between groups by k so that no state is driven twice
/// within a group. For 43Ca+ this is 8 tones covering 14 transitions.
pub fn fssp_tone_plan(registry: &StateRegistry, target: StateLabel) -> Result<Vec<PlannedTone>> {
    let ground = registry.species().level(&registry.species().ground_level).expect("validated");
    if ground.j.twice() != 1 {
        return Err(Error::Config("FSSP tone plan needs a J = 1/2 ground level".into()));
    }
    let i2 = registry.species().nuclear_spin.twice();
    let ft = (i2 + 1) / 2;
    let fo = (i2 - 1) / 2;
    let sign = if target == StateLabel::int(ft, ft) {
        1
    } else if target == StateLabel::int(ft, -ft) {
        -1
    } else {
        return Err(Error::Config(format!("FSSP target must be a stretched state |{ft},+-{ft}>, got |{target}>")));
    };
    let lab = |f: i32, m: i32| StateLabel::int(f, sign * m);
    let valid = |f: i32, m: i32| m.abs() <= f;

    let mut plan = Vec::new();
    for k in (-ft..fo).rev() {
        let mut transitions = Vec::new();
        for (fa, fb) in [(fo, ft), (ft, fo)] {
            let (ma, mb) = (k, k + 1);
            if !valid(fa, ma) || !valid(fb, mb) {
                continue;
            }
            if (fa == ft && ma == ft) || (fb == ft && mb == ft) {
                continue;
            }
            transitions.push((lab(fa, ma), lab(fb, mb)));
        }
        if transitions.is_empty() {
            continue;
        }
        let group = if (fo - 1 - k) % 2 == 0 { MwGroup::A } else { MwGroup::B };
        plan.push(PlannedTone { group, transitions, weak: false });
    }
    plan.push(PlannedTone { group: MwGroup::B, transitions: vec![(lab(ft, fo), lab(fo, fo))], weak: false });

    let pump = lab(fo, fo);
    check_coverage(registry, target, pump, &plan)?;
    Ok(plan)
}

/// Every ground state other than the target must connect to the pump state
/// through the planned transitions.
pub fn check_coverage(registry: &StateRegistry, target: StateLabel, pump: StateLabel, plan: &[PlannedTone]) -> Result<()> {
    let g = registry.ground_range();
    let n = g.len();
    let local = |label: StateLabel| registry.ground_index(label).map(|k| k - g.start);
    let mut adj = vec![Vec::new(); n];
    for tone in plan {
        for &(a, b) in &tone.transitions {
            let (a, b) = (local(a)?, local(b)?);
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    let start = local(pump)?;
    let t = local(target)?;
    if !adj[t].is_empty() {
        return Err(Error::Config(format!("tone plan drives the target |{target}>")));
    }
    let mut seen = vec![false; n];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(x) = stack.pop() {
        for &y in &adj[x] {
            if !seen[y] {
                seen[y] = true;
                stack.push(y);
            }
        }
    }
    let missing: Vec<String> = (0..n)
        .filter(|&k| k != t && !seen[k])
        .map(|k| registry.state(g.start + k).label.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("tone plan leaves {} unconnected to |{pump}>", missing.join("; "))));
    }
    Ok(())
}

/// Amplitude and timing settings shared by all tones of a plan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MwSettings {
    /// Rabi frequency of a normal-strength tone (rad/s).
    pub rabi: f64,
    /// Weak tones run at rabi / factor for factor times as long.
    pub weak_factor: f64,
    pub mode: MwMode,
    /// Include off-resonant leakage on transitions no tone is aimed at.
    pub leakage: bool,
}

impl Default for MwSettings {
    fn default() -> Self {
        MwSettings { rabi: 2.0 * PI * 1e6, weak_factor: 4.0, mode: MwMode::Ideal, leakage: false }
    }
}

/// Converts a planned tone into a pi pulse on its stronger transition.
pub fn tone_from_plan(planned: &PlannedTone, registry: &StateRegistry, settings: &MwSettings) -> Result<MicrowaveTone> {
    let mut transitions = planned.transitions.clone();
    let strength = |(a, b): (StateLabel, StateLabel)| -> Result<f64> {
        let (a, b) = (registry.ground_index(a)?, registry.ground_index(b)?);
        Ok(magnetic_dipole_element(registry.state(a), registry.state(b)).abs())
    };
    let mut best = 0;
    let mut best_strength = -1.0;
    for (k, &t) in transitions.iter().enumerate() {
        let s = strength(t)?;
        if s > best_strength {
            best = k;
            best_strength = s;
        }
    }
    transitions.swap(0, best);
    let rabi = if planned.weak { settings.rabi / settings.weak_factor } else { settings.rabi };
    Ok(MicrowaveTone { transitions, rabi, detuning: 0.0, duration: PI / rabi })
}

/// Builds groups A and B from a tone plan.
pub fn build_groups(plan: &[PlannedTone], registry: &StateRegistry, settings: &MwSettings) -> Result<(MwOperation, MwOperation)> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for p in plan {
        let tone = tone_from_plan(p, registry, settings)?;
        match p.group {
            MwGroup::A => a.push(tone),
            MwGroup::B => b.push(tone),
        }
    }
    Ok((
        build_mw_operation("A", &a, registry, settings.mode, settings.leakage)?,
        build_mw_operation("B", &b, registry, settings.mode, settings.leakage)?,
    ))
}

/// Default FSSP groups with the tones listed in `weak` marked as weak
/// (matched on their first transition, either orientation).
pub fn default_fssp_mw_groups(
    registry: &StateRegistry,
    target: StateLabel,
    weak: &[(StateLabel, StateLabel)],
    settings: &MwSettings,
) -> Result<(MwOperation, MwOperation)> {
    let mut plan = fssp_tone_plan(registry, target)?;
    for tone in &mut plan {
        tone.weak = tone
            .transitions
            .iter()
            .any(|&(x, y)| weak.iter().any(|&(a, b)| (a, b) == (x, y) || (a, b) == (y, x)));
    }
    build_groups(&plan, registry, settings)
}
