//! Hyperfine and Zeeman structure of a single fine-structure level.
//!
//! The Hamiltonian is assembled in the uncoupled |m_I, m_J> product basis and
//! is block-diagonal in M = m_I + m_J. Eigenstates are labelled with the
//! (F, M) quantum numbers they continue to adiabatically from zero field, by
//! tracking eigenvector overlaps in small field steps. Energies are angular
//! frequencies internally; [`DressedState::frequency_hz`] reports Hz.

use crate::angular::{clebsch_gordan, HalfInt};
use crate::error::{Error, Result};
use crate::species::{LevelSpec, SpeciesData};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Bohr magneton over Planck's constant, Hz/T.
pub const BOHR_MAGNETON_HZ_PER_T: f64 = 1.399_624_493_61e10;

/// Largest field increment used when continuing labels from zero field.
pub const LABEL_STEP_TESLA: f64 = 1e-4;

/// Below this absolute splitting two eigenvalues in one M block count as
/// degenerate and labels cannot be assigned.
const DEGENERACY_TOL: f64 = 2.0 * PI * 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    /// Static magnetic field in tesla.
    pub field_tesla: f64,
}

impl FieldConfig {
    pub fn new(field_tesla: f64) -> Result<Self> {
        if !(field_tesla >= 0.0) || !field_tesla.is_finite() {
            return Err(Error::Config(format!("field must be a finite value >= 0, got {field_tesla}")));
        }
        Ok(FieldConfig { field_tesla })
    }

    pub fn from_millitesla(mt: f64) -> Result<Self> {
        Self::new(mt * 1e-3)
    }
}

/// (F, M) label of a dressed state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateLabel {
    pub f: HalfInt,
    pub m: HalfInt,
}

impl StateLabel {
    pub fn new(f: HalfInt, m: HalfInt) -> Self {
        StateLabel { f, m }
    }

    /// Integer labels, the common case for half-integer I and J.
    pub fn int(f: i32, m: i32) -> Self {
        StateLabel { f: HalfInt::from_int(f), m: HalfInt::from_int(m) }
    }

    /// Parses "F,M" with integer or n/2 entries.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() != 2 {
            return Err(Error::UnknownState(format!("'{text}' (expected F,M)")));
        }
        let parse_one = |s: &str| -> Option<HalfInt> {
            if let Some((num, den)) = s.split_once('/') {
                if den.trim() != "2" {
                    return None;
                }
                num.trim().parse::<i32>().ok().map(HalfInt::from_twice)
            } else {
                s.trim_start_matches('+').parse::<i32>().ok().map(HalfInt::from_int)
            }
        };
        match (parse_one(parts[0]), parse_one(parts[1])) {
            (Some(f), Some(m)) => Ok(StateLabel { f, m }),
            _ => Err(Error::UnknownState(format!("'{text}'"))),
        }
    }

    pub fn mirrored(self) -> Self {
        StateLabel { f: self.f, m: -self.m }
    }
}

impl std::fmt::Display for StateLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.m.twice() > 0 {
            write!(f, "{},+{}", self.f, self.m)
        } else {
            write!(f, "{},{}", self.f, self.m)
        }
    }
}

/// Field-dressed eigenstate of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct DressedState {
    pub level: String,
    pub label: StateLabel,
    /// Energy relative to the field-free level centroid (rad/s).
    pub energy: f64,
    /// Amplitudes over the |m_I, m_J> product basis of the level.
    pub amplitudes: DVector<f64>,
    pub i: HalfInt,
    pub j: HalfInt,
    pub g_j: f64,
    pub g_i: f64,
}

impl DressedState {
    pub fn frequency_hz(&self) -> f64 {
        self.energy / (2.0 * PI)
    }

    pub fn f(&self) -> HalfInt {
        self.label.f
    }

    pub fn m(&self) -> HalfInt {
        self.label.m
    }

    /// Amplitude of the |m_I, m_J> component.
    pub fn component(&self, m_i: HalfInt, m_j: HalfInt) -> f64 {
        match ProductBasis::new(self.i, self.j).index(m_i, m_j) {
            Some(k) => self.amplitudes[k],
            None => 0.0,
        }
    }
}

/// Indexing of the |m_I, m_J> basis: k = (m_I + I) * (2J + 1) + (m_J + J).
#[derive(Clone, Copy, Debug)]
pub struct ProductBasis {
    pub i: HalfInt,
    pub j: HalfInt,
}

impl ProductBasis {
    pub fn new(i: HalfInt, j: HalfInt) -> Self {
        ProductBasis { i, j }
    }

    pub fn dim(&self) -> usize {
        self.i.multiplicity() * self.j.multiplicity()
    }

    pub fn index(&self, m_i: HalfInt, m_j: HalfInt) -> Option<usize> {
        if m_i.twice().abs() > self.i.twice() || m_j.twice().abs() > self.j.twice() {
            return None;
        }
        let a = ((m_i.twice() + self.i.twice()) / 2) as usize;
        let b = ((m_j.twice() + self.j.twice()) / 2) as usize;
        Some(a * self.j.multiplicity() + b)
    }

    pub fn quantum_numbers(&self, k: usize) -> (HalfInt, HalfInt) {
        let nj = self.j.multiplicity();
        let m_i = HalfInt::from_twice(2 * (k / nj) as i32 - self.i.twice());
        let m_j = HalfInt::from_twice(2 * (k % nj) as i32 - self.j.twice());
        (m_i, m_j)
    }

    pub fn total_m(&self, k: usize) -> HalfInt {
        let (a, b) = self.quantum_numbers(k);
        a + b
    }
}

fn ladder(j: HalfInt, m: HalfInt, raise: bool) -> f64 {
    let jj = j.value();
    let mm = m.value();
    let v = if raise { jj * (jj + 1.0) - mm * (mm + 1.0) } else { jj * (jj + 1.0) - mm * (mm - 1.0) };
    v.max(0.0).sqrt()
}

/// I.J in the product basis (dimensionless, hbar = 1).
fn i_dot_j(basis: &ProductBasis) -> DMatrix<f64> {
    let n = basis.dim();
    let mut m = DMatrix::zeros(n, n);
    for k in 0..n {
        let (mi, mj) = basis.quantum_numbers(k);
        m[(k, k)] = mi.value() * mj.value();
        // (I+ J- + I- J+)/2
        if let Some(t) = basis.index(mi + HalfInt(2), mj - HalfInt(2)) {
            let v = 0.5 * ladder(basis.i, mi, true) * ladder(basis.j, mj, false);
            m[(t, k)] += v;
        }
        if let Some(t) = basis.index(mi - HalfInt(2), mj + HalfInt(2)) {
            let v = 0.5 * ladder(basis.i, mi, false) * ladder(basis.j, mj, true);
            m[(t, k)] += v;
        }
    }
    m
}

/// Field-independent and field-linear parts of a level Hamiltonian, both in
/// rad/s (Zeeman part per tesla).
#[derive(Clone, Debug)]
pub struct HamiltonianParts {
    pub basis: ProductBasis,
    pub hyperfine: DMatrix<f64>,
    pub zeeman_per_tesla: DMatrix<f64>,
}

impl HamiltonianParts {
    pub fn new(level: &LevelSpec, species: &SpeciesData) -> Result<Self> {
        if species.level(&level.name).is_none() {
            return Err(Error::Structure(format!("level {} does not belong to {}", level.name, species.name)));
        }
        let i = species.nuclear_spin;
        let j = level.j;
        let basis = ProductBasis::new(i, j);
        let n = basis.dim();
        let two_pi_mhz = 2.0 * PI * 1e6;

        let idj = i_dot_j(&basis);
        let mut hyperfine = &idj * (level.a_mhz * two_pi_mhz);

        if level.b_mhz != 0.0 {
            if j.twice() < 2 || i.twice() < 2 {
                return Err(Error::Structure(format!(
                    "level {}: quadrupole constant is undefined for J = {} and I = {}",
                    level.name, j, i
                )));
            }
            let (iv, jv) = (i.value(), j.value());
            let ident = DMatrix::<f64>::identity(n, n);
            let numerator = (&idj * &idj) * 3.0 + &idj * 1.5 - ident * (iv * (iv + 1.0) * jv * (jv + 1.0));
            let denom = 2.0 * iv * (2.0 * iv - 1.0) * jv * (2.0 * jv - 1.0);
            hyperfine += numerator * (level.b_mhz * two_pi_mhz / denom);
        }

        let mu_b = 2.0 * PI * BOHR_MAGNETON_HZ_PER_T;
        let mut zeeman = DMatrix::zeros(n, n);
        for k in 0..n {
            let (mi, mj) = basis.quantum_numbers(k);
            zeeman[(k, k)] = mu_b * (level.g_j * mj.value() + species.nuclear_g_factor * mi.value());
        }

        Ok(HamiltonianParts { basis, hyperfine, zeeman_per_tesla: zeeman })
    }

    pub fn at(&self, field: f64) -> DMatrix<f64> {
        &self.hyperfine + &self.zeeman_per_tesla * field
    }
}

/// Full Hamiltonian of `level` at `field`, rad/s, over the |m_I, m_J> basis.
pub fn build_hamiltonian(level: &LevelSpec, species: &SpeciesData, field: &FieldConfig) -> Result<DMatrix<f64>> {
    Ok(HamiltonianParts::new(level, species)?.at(field.field_tesla))
}

/// One M block being followed through field.
#[derive(Clone, Debug)]
struct Block {
    m: HalfInt,
    indices: Vec<usize>,
    hyperfine: DMatrix<f64>,
    zeeman: DMatrix<f64>,
    labels: Vec<HalfInt>,
    vectors: Vec<DVector<f64>>,
    energies: Vec<f64>,
}

/// Follows the labelled eigenstates of one level as the field changes.
#[derive(Clone, Debug)]
pub struct LevelTracker {
    level: LevelSpec,
    g_i: f64,
    basis: ProductBasis,
    blocks: Vec<Block>,
    field: f64,
    step: f64,
}

impl LevelTracker {
    pub fn new(level: &LevelSpec, species: &SpeciesData) -> Result<Self> {
        Self::with_step(level, species, LABEL_STEP_TESLA)
    }

    pub fn with_step(level: &LevelSpec, species: &SpeciesData, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::Config("label continuation step must be positive".into()));
        }
        let parts = HamiltonianParts::new(level, species)?;
        let basis = parts.basis;
        let idj = i_dot_j(&basis);
        let (iv, jv) = (basis.i.value(), basis.j.value());

        let mut blocks = Vec::new();
        let max_m = basis.i.twice() + basis.j.twice();
        for m2 in (-max_m..=max_m).step_by(2) {
            let m = HalfInt(m2);
            let indices: Vec<usize> = (0..basis.dim()).filter(|&k| basis.total_m(k) == m).collect();
            let d = indices.len();
            let sub = |mat: &DMatrix<f64>| DMatrix::from_fn(d, d, |r, c| mat[(indices[r], indices[c])]);
            let hyperfine = sub(&parts.hyperfine);
            let zeeman = sub(&parts.zeeman_per_tesla);

            // F^2 = I^2 + J^2 + 2 I.J has a non-degenerate spectrum inside one
            // M block, so its eigenvectors fix the zero-field labels even when
            // hyperfine levels happen to be degenerate.
            let f2 = sub(&idj) * 2.0 + DMatrix::identity(d, d) * (iv * (iv + 1.0) + jv * (jv + 1.0));
            let eig = SymmetricEigen::new(f2);
            let mut labels = Vec::with_capacity(d);
            let mut vectors = Vec::with_capacity(d);
            for c in 0..d {
                let ff = eig.eigenvalues[c];
                let f = (-1.0 + (1.0 + 4.0 * ff).sqrt()) / 2.0;
                let label = HalfInt::from_f64(f).ok_or_else(|| {
                    Error::Structure(format!("level {}: F^2 eigenvalue {ff} is not F(F+1)", level.name))
                })?;
                labels.push(label);
                vectors.push(normalise_sign(eig.eigenvectors.column(c).into_owned()));
            }
            let mut sorted = labels.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != labels.len() {
                return Err(Error::Structure(format!("level {}: repeated F label in block M={m}", level.name)));
            }
            let energies = vectors.iter().map(|v| v.dot(&(&hyperfine * v))).collect();
            blocks.push(Block { m, indices, hyperfine, zeeman, labels, vectors, energies });
        }

        Ok(LevelTracker { level: level.clone(), g_i: species.nuclear_g_factor, basis, blocks, field: 0.0, step })
    }

    pub fn field(&self) -> f64 {
        self.field
    }

    /// Continues the labels to `field` in increments no larger than the step.
    pub fn advance_to(&mut self, field: f64) -> Result<()> {
        if !(field >= 0.0) {
            return Err(Error::Config(format!("field must be >= 0, got {field}")));
        }
        let distance = field - self.field;
        if distance == 0.0 {
            return Ok(());
        }
        let n_steps = (distance.abs() / self.step).ceil().max(1.0) as usize;
        let start = self.field;
        for s in 1..=n_steps {
            let b = start + distance * s as f64 / n_steps as f64;
            for block in &mut self.blocks {
                step_block(block, b, &self.level.name)?;
            }
        }
        self.field = field;
        Ok(())
    }

    /// The labelled eigenstates at the current field, sorted by (F, M).
    pub fn states(&self) -> Vec<DressedState> {
        let n = self.basis.dim();
        let mut out = Vec::with_capacity(n);
        for block in &self.blocks {
            for (c, label) in block.labels.iter().enumerate() {
                let mut amps = DVector::zeros(n);
                for (r, &k) in block.indices.iter().enumerate() {
                    amps[k] = block.vectors[c][r];
                }
                out.push(DressedState {
                    level: self.level.name.clone(),
                    label: StateLabel::new(*label, block.m),
                    energy: block.energies[c],
                    amplitudes: amps,
                    i: self.basis.i,
                    j: self.basis.j,
                    g_j: self.level.g_j,
                    g_i: self.g_i,
                });
            }
        }
        out.sort_by(|a, b| a.label.cmp(&b.label));
        out
    }

    /// Energy (rad/s) of one labelled state at the current field.
    pub fn energy(&self, label: StateLabel) -> Option<f64> {
        let block = self.blocks.iter().find(|b| b.m == label.m)?;
        let c = block.labels.iter().position(|&f| f == label.f)?;
        Some(block.energies[c])
    }
}

fn normalise_sign(mut v: DVector<f64>) -> DVector<f64> {
    // Largest component positive, so vectors have a reproducible phase.
    let (k, _) = v.iter().enumerate().fold((0, 0.0), |acc, (k, x)| if x.abs() > acc.1 { (k, x.abs()) } else { acc });
    if v[k] < 0.0 {
        v.neg_mut();
    }
    v
}

fn step_block(block: &mut Block, field: f64, level: &str) -> Result<()> {
    let d = block.indices.len();
    if d == 1 {
        block.energies[0] = block.hyperfine[(0, 0)] + block.zeeman[(0, 0)] * field;
        return Ok(());
    }
    let h = &block.hyperfine + &block.zeeman * field;
    let eig = SymmetricEigen::new(h);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    for w in order.windows(2) {
        if (eig.eigenvalues[w[1]] - eig.eigenvalues[w[0]]).abs() < DEGENERACY_TOL {
            return Err(Error::Structure(format!(
                "level {level}: degenerate eigenvalues in block M={} at {:.6} mT; cannot assign labels",
                block.m,
                field * 1e3
            )));
        }
    }

    // Match each tracked vector to the new eigenvector with largest overlap.
    let mut taken = vec![false; d];
    let mut new_vectors = Vec::with_capacity(d);
    let mut new_energies = Vec::with_capacity(d);
    for prev in &block.vectors {
        let mut best = None;
        let mut best_overlap = 0.0;
        for c in 0..d {
            if taken[c] {
                continue;
            }
            let o = prev.dot(&eig.eigenvectors.column(c)).abs();
            if o > best_overlap {
                best_overlap = o;
                best = Some(c);
            }
        }
        let c = best.ok_or_else(|| Error::Structure(format!("level {level}: label tracking lost a state")))?;
        if best_overlap < 0.5 {
            return Err(Error::Structure(format!(
                "level {level}: ambiguous label continuation in block M={} at {:.6} mT (overlap {best_overlap:.3})",
                block.m,
                field * 1e3
            )));
        }
        taken[c] = true;
        let mut v = eig.eigenvectors.column(c).into_owned();
        if prev.dot(&v) < 0.0 {
            v.neg_mut();
        }
        new_vectors.push(v);
        new_energies.push(eig.eigenvalues[c]);
    }
    block.vectors = new_vectors;
    block.energies = new_energies;
    Ok(())
}

/// Labelled eigenstates of `level` at `field`, sorted by (F, M).
pub fn dressed_states(level: &LevelSpec, species: &SpeciesData, field: &FieldConfig) -> Result<Vec<DressedState>> {
    dressed_states_with_step(level, species, field, LABEL_STEP_TESLA)
}

pub fn dressed_states_with_step(
    level: &LevelSpec,
    species: &SpeciesData,
    field: &FieldConfig,
    step: f64,
) -> Result<Vec<DressedState>> {
    let mut tracker = LevelTracker::with_step(level, species, step)?;
    tracker.advance_to(field.field_tesla)?;
    Ok(tracker.states())
}

/// Outcome of a clock-point search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ClockPoint {
    /// d(frequency)/dB vanishes at `field_tesla`.
    Found { field_tesla: f64, frequency_hz: f64 },
    /// The derivative keeps its sign over the whole search range.
    NoClockPoint,
}

impl ClockPoint {
    pub fn field(&self) -> Option<f64> {
        match self {
            ClockPoint::Found { field_tesla, .. } => Some(*field_tesla),
            ClockPoint::NoClockPoint => None,
        }
    }
}

/// Transition frequency (Hz) between two labelled states of one level.
pub fn transition_frequency_hz(tracker: &LevelTracker, lower: StateLabel, upper: StateLabel) -> Result<f64> {
    let el = tracker.energy(lower).ok_or_else(|| Error::UnknownState(lower.to_string()))?;
    let eu = tracker.energy(upper).ok_or_else(|| Error::UnknownState(upper.to_string()))?;
    Ok((eu - el) / (2.0 * PI))
}

const DERIVATIVE_STEP: f64 = 1e-6;
const SCAN_POINTS: usize = 200;

/// Field in `range` (tesla) where the lower<->upper frequency is stationary.
///
/// Scans the numerically differentiated frequency for the first sign change
/// and refines it by bisection.
pub fn clock_field(
    level: &LevelSpec,
    species: &SpeciesData,
    lower: StateLabel,
    upper: StateLabel,
    range: (f64, f64),
) -> Result<ClockPoint> {
    let (lo, hi) = range;
    if !(lo >= 0.0 && hi > lo) {
        return Err(Error::Config(format!("invalid clock search range {lo}..{hi} T")));
    }
    let mut tracker = LevelTracker::new(level, species)?;
    tracker.energy(lower).ok_or_else(|| Error::UnknownState(lower.to_string()))?;
    tracker.energy(upper).ok_or_else(|| Error::UnknownState(upper.to_string()))?;

    let h = DERIVATIVE_STEP;
    let derivative = |tracker: &mut LevelTracker, b: f64| -> Result<f64> {
        let b_minus = (b - h).max(0.0);
        let b_plus = b + h;
        tracker.advance_to(b_minus)?;
        let f_minus = transition_frequency_hz(tracker, lower, upper)?;
        tracker.advance_to(b_plus)?;
        let f_plus = transition_frequency_hz(tracker, lower, upper)?;
        Ok((f_plus - f_minus) / (b_plus - b_minus))
    };

    let start = lo.max(2.0 * h);
    let mut prev_b = start;
    let mut prev_d = derivative(&mut tracker, start)?;
    for k in 1..=SCAN_POINTS {
        let b = start + (hi - start) * k as f64 / SCAN_POINTS as f64;
        let d = derivative(&mut tracker, b)?;
        if prev_d == 0.0 || prev_d.signum() != d.signum() {
            // Bisection on [prev_b, b].
            let mut a = prev_b;
            let mut c = b;
            let mut da = prev_d;
            let mut bisect = tracker.clone();
            while c - a > 1e-10 {
                let mid = 0.5 * (a + c);
                let dm = derivative(&mut bisect, mid)?;
                if dm == 0.0 {
                    a = mid;
                    c = mid;
                    break;
                }
                if dm.signum() == da.signum() {
                    a = mid;
                    da = dm;
                } else {
                    c = mid;
                }
            }
            let field = 0.5 * (a + c);
            bisect.advance_to(field)?;
            let freq = transition_frequency_hz(&bisect, lower, upper)?.abs();
            return Ok(ClockPoint::Found { field_tesla: field, frequency_hz: freq });
        }
        prev_b = b;
        prev_d = d;
    }
    Ok(ClockPoint::NoClockPoint)
}

/// Relative amplitude of a rank-`rank` multipole coupling between a lower and
/// an upper dressed state for spherical component `q` (M_upper - M_lower = q).
///
/// Normalised so that, for any upper state, the squared amplitudes summed
/// over all lower states of the level pair and over q equal 1.
pub fn multipole_amplitude(lower: &DressedState, upper: &DressedState, rank: u32, q: i32) -> f64 {
    if upper.label.m.twice() - lower.label.m.twice() != 2 * q || q.unsigned_abs() > rank {
        return 0.0;
    }
    if lower.i != upper.i {
        return 0.0;
    }
    let k = HalfInt::from_int(rank as i32);
    let qh = HalfInt::from_int(q);
    let lb = ProductBasis::new(lower.i, lower.j);
    let ub = ProductBasis::new(upper.i, upper.j);
    let mut amp = 0.0;
    for (kl, &cl) in lower.amplitudes.iter().enumerate() {
        if cl == 0.0 {
            continue;
        }
        let (m_i, mj_l) = lb.quantum_numbers(kl);
        let mj_u = mj_l + qh;
        let Some(ku) = ub.index(m_i, mj_u) else { continue };
        let cu = upper.amplitudes[ku];
        if cu == 0.0 {
            continue;
        }
        amp += cl * cu * clebsch_gordan(lower.j, mj_l, k, qh, upper.j, mj_u);
    }
    amp
}

/// Electric-dipole amplitude for polarisation component q in {-1, 0, +1}.
pub fn electric_dipole_amplitude(lower: &DressedState, upper: &DressedState, q: i32) -> f64 {
    multipole_amplitude(lower, upper, 1, q)
}

/// Relative magnetic-dipole coupling <a| J_q + (g_I/g_J) I_q |b>, q = M_a - M_b.
pub fn magnetic_dipole_element(a: &DressedState, b: &DressedState) -> f64 {
    if a.level != b.level || a.i != b.i || a.j != b.j {
        return 0.0;
    }
    let dq = a.label.m.twice() - b.label.m.twice();
    if dq.abs() > 2 {
        return 0.0;
    }
    let q = dq / 2;
    let basis = ProductBasis::new(a.i, a.j);
    let ratio = a.g_i / a.g_j;
    let mut total = 0.0;
    for (kb, &cb) in b.amplitudes.iter().enumerate() {
        if cb == 0.0 {
            continue;
        }
        let (mi, mj) = basis.quantum_numbers(kb);
        match q {
            0 => {
                total += a.amplitudes[kb] * cb * (mj.value() + ratio * mi.value());
            }
            1 => {
                // T_{+1} = -T_+ / sqrt 2
                if let Some(t) = basis.index(mi, mj + HalfInt(2)) {
                    total -= a.amplitudes[t] * cb * ladder(a.j, mj, true) / 2f64.sqrt();
                }
                if let Some(t) = basis.index(mi + HalfInt(2), mj) {
                    total -= a.amplitudes[t] * cb * ratio * ladder(a.i, mi, true) / 2f64.sqrt();
                }
            }
            _ => {
                // T_{-1} = T_- / sqrt 2
                if let Some(t) = basis.index(mi, mj - HalfInt(2)) {
                    total += a.amplitudes[t] * cb * ladder(a.j, mj, false) / 2f64.sqrt();
                }
                if let Some(t) = basis.index(mi - HalfInt(2), mj) {
                    total += a.amplitudes[t] * cb * ratio * ladder(a.i, mi, false) / 2f64.sqrt();
                }
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ca() -> SpeciesData {
        SpeciesData::builtin("Ca43").unwrap()
    }

    fn level<'a>(s: &'a SpeciesData, name: &str) -> &'a LevelSpec {
        s.level(name).unwrap()
    }

    #[test]
    fn hamiltonian_is_hermitian_and_block_diagonal() {
        let s = ca();
        for l in &s.levels {
            let h = build_hamiltonian(l, &s, &FieldConfig::from_millitesla(28.8).unwrap()).unwrap();
            let basis = ProductBasis::new(s.nuclear_spin, l.j);
            assert_eq!(h.nrows(), basis.dim());
            let scale = h.amax();
            assert!((&h - h.transpose()).amax() < 1e-12 * scale);
            for r in 0..h.nrows() {
                for c in 0..h.ncols() {
                    if basis.total_m(r) != basis.total_m(c) {
                        assert_eq!(h[(r, c)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn trace_is_preserved() {
        let s = ca();
        for l in &s.levels {
            let field = FieldConfig::from_millitesla(10.0).unwrap();
            let h = build_hamiltonian(l, &s, &field).unwrap();
            let states = dressed_states(l, &s, &field).unwrap();
            let sum: f64 = states.iter().map(|d| d.energy).sum();
            let scale = h.amax() * h.nrows() as f64;
            assert!((sum - h.trace()).abs() < 1e-9 * scale);
        }
    }

    #[test]
    fn quadrupole_rejected_for_j_half() {
        let mut s = ca();
        let mut l = level(&s, "S1/2").clone();
        l.b_mhz = 1.0;
        s.levels.retain(|x| x.name != "S1/2");
        s.levels.push(l.clone());
        let err = build_hamiltonian(&l, &s, &FieldConfig::new(0.0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Structure(_)));
    }

    #[test]
    fn zero_field_hyperfine_splitting() {
        let s = ca();
        let states = dressed_states(level(&s, "S1/2"), &s, &FieldConfig::new(0.0).unwrap()).unwrap();
        let e4 = states.iter().find(|d| d.label == StateLabel::int(4, 0)).unwrap().frequency_hz();
        let e3 = states.iter().find(|d| d.label == StateLabel::int(3, 0)).unwrap().frequency_hz();
        assert!(((e3 - e4) - 4.0 * 806.4020716e6).abs() < 1.0);
        // M degeneracy inside each manifold.
        for d in &states {
            let reference = if d.label.f == HalfInt::from_int(4) { e4 } else { e3 };
            assert!((d.frequency_hz() - reference).abs() < 1e-3);
        }
    }

    #[test]
    fn stretch_state_is_a_product_state() {
        let s = ca();
        for mt in [0.0, 5.0, 28.8, 80.0] {
            let states = dressed_states(level(&s, "S1/2"), &s, &FieldConfig::from_millitesla(mt).unwrap()).unwrap();
            let st = states.iter().find(|d| d.label == StateLabel::int(4, 4)).unwrap();
            assert!((st.component(HalfInt(7), HalfInt(1)).abs() - 1.0).abs() < 1e-12);
            let neg = states.iter().find(|d| d.label == StateLabel::int(4, -4)).unwrap();
            assert!((neg.component(HalfInt(-7), HalfInt(-1)).abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dressed_state_invariants() {
        let s = ca();
        let field = FieldConfig::from_millitesla(28.8).unwrap();
        for l in &s.levels {
            let states = dressed_states(l, &s, &field).unwrap();
            let basis = ProductBasis::new(s.nuclear_spin, l.j);
            let mut labels: Vec<_> = states.iter().map(|d| d.label).collect();
            labels.dedup();
            assert_eq!(labels.len(), basis.dim());
            for d in &states {
                assert!((d.amplitudes.norm() - 1.0).abs() < 1e-12);
                for (k, a) in d.amplitudes.iter().enumerate() {
                    if *a != 0.0 {
                        assert_eq!(basis.total_m(k), d.label.m);
                    }
                }
            }
        }
    }

    #[test]
    fn qubit_frequency_at_28p8_mt() {
        let s = ca();
        let states = dressed_states(level(&s, "S1/2"), &s, &FieldConfig::from_millitesla(28.8).unwrap()).unwrap();
        let get = |f, m| states.iter().find(|d| d.label == StateLabel::int(f, m)).unwrap().frequency_hz();
        let qubit = get(3, 1) - get(4, 1);
        assert!((qubit - 3.1225e9).abs() < 3e6, "{qubit}");
        let zeeman = get(4, 2) - get(4, 1);
        assert!(zeeman.abs() > 50e6 && zeeman.abs() < 200e6, "{zeeman}");
    }

    #[test]
    fn labels_stable_under_step_halving() {
        let s = ca();
        let field = FieldConfig::from_millitesla(28.8).unwrap();
        for l in &s.levels {
            let a = dressed_states_with_step(l, &s, &field, 1e-4).unwrap();
            let b = dressed_states_with_step(l, &s, &field, 5e-5).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.label, y.label);
                assert!((x.energy - y.energy).abs() < 1e-6 * x.energy.abs().max(1.0));
            }
        }
    }

    #[test]
    fn clock_point_ca43() {
        let s = ca();
        let cp = clock_field(level(&s, "S1/2"), &s, StateLabel::int(4, 1), StateLabel::int(3, 1), (1e-3, 50e-3)).unwrap();
        let ClockPoint::Found { field_tesla, frequency_hz } = cp else { panic!("no clock point") };
        assert!((field_tesla - 28.8e-3).abs() < 0.3e-3, "{field_tesla}");
        assert!((frequency_hz - 3.123e9).abs() < 3e6, "{frequency_hz}");
    }

    #[test]
    fn stretch_transition_has_no_clock_point() {
        let s = ca();
        let cp = clock_field(level(&s, "S1/2"), &s, StateLabel::int(4, 4), StateLabel::int(3, 3), (1e-5, 50e-3)).unwrap();
        assert_eq!(cp, ClockPoint::NoClockPoint);
    }

    #[test]
    fn unknown_label_is_reported() {
        let s = ca();
        let err = clock_field(level(&s, "S1/2"), &s, StateLabel::int(5, 1), StateLabel::int(3, 1), (1e-3, 5e-2));
        assert!(matches!(err, Err(Error::UnknownState(_))));
    }

    #[test]
    fn dipole_selection_and_stretch_darkness() {
        let s = ca();
        let field = FieldConfig::from_millitesla(28.8).unwrap();
        let ground = dressed_states(level(&s, "S1/2"), &s, &field).unwrap();
        let p = dressed_states(level(&s, "P1/2"), &s, &field).unwrap();
        let stretch = ground.iter().find(|d| d.label == StateLabel::int(4, 4)).unwrap();
        for u in &p {
            assert_eq!(electric_dipole_amplitude(stretch, u, 1), 0.0);
            for g in &ground {
                for q in -1..=1 {
                    if u.label.m.twice() - g.label.m.twice() != 2 * q {
                        assert_eq!(electric_dipole_amplitude(g, u, q), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn dipole_sum_rule() {
        let s = ca();
        let field = FieldConfig::from_millitesla(28.8).unwrap();
        for (lo, up, rank) in [("S1/2", "P1/2", 1), ("D3/2", "P1/2", 1), ("D5/2", "P3/2", 1), ("S1/2", "D5/2", 2)] {
            let lower = dressed_states(level(&s, lo), &s, &field).unwrap();
            let upper = dressed_states(level(&s, up), &s, &field).unwrap();
            let r = rank as i32;
            for u in &upper {
                let total: f64 = lower
                    .iter()
                    .flat_map(|g| (-r..=r).map(move |q| (g, q)))
                    .map(|(g, q)| multipole_amplitude(g, u, rank, q).powi(2))
                    .sum();
                assert!((total - 1.0).abs() < 1e-12, "{lo}->{up} {}: {total}", u.label);
            }
        }
    }

    #[test]
    fn magnetic_dipole_symmetry_and_selection() {
        let s = ca();
        let ground = dressed_states(level(&s, "S1/2"), &s, &FieldConfig::from_millitesla(28.8).unwrap()).unwrap();
        for a in &ground {
            for b in &ground {
                let ab = magnetic_dipole_element(a, b);
                let ba = magnetic_dipole_element(b, a);
                assert!((ab.abs() - ba.abs()).abs() < 1e-12);
                if (a.label.m.twice() - b.label.m.twice()).abs() > 2 {
                    assert_eq!(ab, 0.0);
                }
            }
        }
    }

    #[test]
    fn label_parsing() {
        assert_eq!(StateLabel::parse("4,-4").unwrap(), StateLabel::int(4, -4));
        assert_eq!(StateLabel::parse("3, +3").unwrap(), StateLabel::int(3, 3));
        assert_eq!(StateLabel::parse("5/2,-3/2").unwrap(), StateLabel::new(HalfInt(5), HalfInt(-3)));
        assert!(StateLabel::parse("4").is_err());
        assert!(StateLabel::parse("a,b").is_err());
        assert_eq!(StateLabel::int(4, 4).to_string(), "4,+4");
    }
}
