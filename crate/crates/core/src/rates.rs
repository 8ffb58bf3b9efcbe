//! Classical rate equations for laser-driven population transfer plus
//! spontaneous decay.
//!
//! Populations evolve as dp/dt = R p with R[i][j] the rate from state j into
//! state i. A beam of intensity s = I/I0 drives every dressed transition of
//! its optical transition at
//!
//! ```text
//! rate = (Gamma_t / 2) * s * sum_q |a_q|^2 |d_q|^2 * L(delta),
//! L(delta) = 1 / (1 + (2 delta / Gamma)^2)
//! ```
//!
//! equally upward and downward, where Gamma_t is the partial linewidth of the
//! transition, Gamma the natural width of the upper level, and delta the beam
//! detuning from that particular dressed transition.
//!
//! The (1 + s) self-saturation term of the two-level scattering rate is NOT
//! applied inside the multi-level generator. This is the weak-drive limit and
//! is accurate for s well below 1; every pumping beam in the default
//! configurations has s <= 0.15.

use crate::error::{Error, Result};
use crate::registry::StateRegistry;
use crate::structure::{multipole_amplitude, StateLabel};
use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Links weaker than this fraction of a beam's strongest link are ignored by
/// the lambda guard.
pub const LAMBDA_GUARD_FRACTION: f64 = 1e-3;

/// Spherical polarisation amplitudes for (sigma-, pi, sigma+).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Polarization {
    pub minus: Complex<f64>,
    pub pi: Complex<f64>,
    pub plus: Complex<f64>,
}

impl Polarization {
    pub fn new(minus: Complex<f64>, pi: Complex<f64>, plus: Complex<f64>) -> Result<Self> {
        let p = Polarization { minus, pi, plus };
        let norm: f64 = p.weights().iter().sum();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("polarisation weights sum to {norm}, expected 1")));
        }
        Ok(p)
    }

    /// Real amplitudes from intensity weights (sigma-, pi, sigma+); the
    /// weights are normalised.
    pub fn from_weights(minus: f64, pi: f64, plus: f64) -> Result<Self> {
        if minus < 0.0 || pi < 0.0 || plus < 0.0 {
            return Err(Error::Config("polarisation weights must be non-negative".into()));
        }
        let total = minus + pi + plus;
        if !(total > 0.0) {
            return Err(Error::Config("polarisation weights are all zero".into()));
        }
        let c = |w: f64| Complex::new((w / total).sqrt(), 0.0);
        Ok(Polarization { minus: c(minus), pi: c(pi), plus: c(plus) })
    }

    pub fn sigma_plus() -> Self {
        Self::from_weights(0.0, 0.0, 1.0).expect("valid")
    }

    pub fn sigma_minus() -> Self {
        Self::from_weights(1.0, 0.0, 0.0).expect("valid")
    }

    /// Intensity weights [sigma-, pi, sigma+].
    pub fn weights(&self) -> [f64; 3] {
        [self.minus.norm_sqr(), self.pi.norm_sqr(), self.plus.norm_sqr()]
    }

    /// Weight of spherical component q in {-1, 0, +1}.
    pub fn weight(&self, q: i32) -> f64 {
        self.weights()[(q + 1) as usize]
    }

    /// Swaps sigma+ and sigma-.
    pub fn mirrored(&self) -> Self {
        Polarization { minus: self.plus, pi: self.pi, plus: self.minus }
    }
}

/// Linear polarisation at `theta_deg` degrees to the quantisation axis.
pub fn linear_polarization(theta_deg: f64) -> Result<Polarization> {
    if !(0.0..=90.0).contains(&theta_deg) {
        return Err(Error::Config(format!("polarisation angle {theta_deg} outside [0, 90] degrees")));
    }
    let t = theta_deg.to_radians();
    // E = cos t z + sin t x, x = (e_-1 - e_+1)/sqrt 2
    let s = t.sin() / 2f64.sqrt();
    Polarization::new(Complex::new(s, 0.0), Complex::new(t.cos(), 0.0), Complex::new(-s, 0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Lineshape {
    /// Lorentzian with the natural linewidth of the upper level.
    #[default]
    Natural,
    /// Flat response: every dressed transition is driven as if resonant.
    /// Stands in for a power-broadened or multi-frequency repumper.
    Broadband,
}

/// A laser beam addressing one optical transition.
#[derive(Clone, Debug, PartialEq)]
pub struct LaserBeam {
    pub name: String,
    /// Name of the species transition, e.g. "397".
    pub transition: String,
    /// Dressed transition (lower, upper) the beam frequency is referenced to.
    pub anchor: (StateLabel, StateLabel),
    /// Detuning from the anchor (rad/s).
    pub detuning: f64,
    /// Intensity in units of the transition's saturation intensity.
    pub intensity: f64,
    pub polarization: Polarization,
    pub lineshape: Lineshape,
}

impl LaserBeam {
    pub fn new(transition: &str, anchor: (StateLabel, StateLabel), intensity: f64, polarization: Polarization) -> Self {
        LaserBeam {
            name: transition.to_string(),
            transition: transition.to_string(),
            anchor,
            detuning: 0.0,
            intensity,
            polarization,
            lineshape: Lineshape::Natural,
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn with_detuning_hz(mut self, hz: f64) -> Self {
        self.detuning = 2.0 * PI * hz;
        self
    }

    pub fn with_lineshape(mut self, lineshape: Lineshape) -> Self {
        self.lineshape = lineshape;
        self
    }

    /// Mirror image: M labels negated, sigma+ and sigma- exchanged.
    pub fn mirrored(&self) -> Self {
        let mut b = self.clone();
        b.anchor = (self.anchor.0.mirrored(), self.anchor.1.mirrored());
        b.polarization = self.polarization.mirrored();
        b
    }
}

/// Generator of the population dynamics over the registry's states.
#[derive(Clone, Debug, PartialEq)]
pub struct RateMatrix {
    pub matrix: DMatrix<f64>,
    /// Names of the beams that produced the driven part.
    pub beams: Vec<String>,
}

impl RateMatrix {
    /// Wraps an explicit generator after checking its invariants.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let r = RateMatrix { matrix, beams: Vec::new() };
        r.check()?;
        Ok(r)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Column sums vanish, off-diagonals are non-negative.
    pub fn check(&self) -> Result<()> {
        let n = self.matrix.nrows();
        if self.matrix.ncols() != n {
            return Err(Error::Numerical("rate matrix is not square".into()));
        }
        for j in 0..n {
            let mut sum = 0.0;
            let mut scale: f64 = 0.0;
            for i in 0..n {
                let v = self.matrix[(i, j)];
                if !v.is_finite() {
                    return Err(Error::Numerical(format!("non-finite rate at ({i}, {j})")));
                }
                if i != j && v < 0.0 {
                    return Err(Error::Numerical(format!("negative rate {v} at ({i}, {j})")));
                }
                sum += v;
                scale = scale.max(v.abs());
            }
            if sum.abs() > 1e-10 * scale.max(1.0) {
                return Err(Error::Numerical(format!("column {j} sums to {sum}")));
            }
        }
        Ok(())
    }

    /// Largest relative column-sum defect.
    pub fn max_column_sum(&self) -> f64 {
        (0..self.dim())
            .map(|j| {
                let col = self.matrix.column(j);
                let scale = col.amax().max(1e-300);
                col.sum().abs() / scale
            })
            .fold(0.0, f64::max)
    }

    /// Total rate out of state j.
    pub fn out_rate(&self, j: usize) -> f64 {
        -self.matrix[(j, j)]
    }

    fn add_transfer(&mut self, from: usize, to: usize, rate: f64) {
        self.matrix[(to, from)] += rate;
        self.matrix[(from, from)] -= rate;
    }
}

/// Real population vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Occupations(pub DVector<f64>);

impl Occupations {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        let p = Occupations(values);
        p.check(1e-9)?;
        Ok(p)
    }

    /// All population in one state.
    pub fn pure(n: usize, index: usize) -> Self {
        let mut v = DVector::zeros(n);
        v[index] = 1.0;
        Occupations(v)
    }

    /// Equal population over the given states.
    pub fn uniform_over(n: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let idx: Vec<usize> = indices.into_iter().collect();
        let mut v = DVector::zeros(n);
        for &k in &idx {
            v[k] = 1.0 / idx.len() as f64;
        }
        Occupations(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.sum()
    }

    pub fn get(&self, k: usize) -> f64 {
        self.0[k]
    }

    pub fn check(&self, tol: f64) -> Result<()> {
        for (k, &v) in self.0.iter().enumerate() {
            if !v.is_finite() || v < -tol || v > 1.0 + tol {
                return Err(Error::Numerical(format!("occupation {k} = {v} outside [0, 1]")));
            }
        }
        let s = self.sum();
        if (s - 1.0).abs() > tol {
            return Err(Error::Numerical(format!("occupations sum to {s}")));
        }
        Ok(())
    }

    /// Applies a transfer matrix (column-stochastic propagator).
    pub fn apply(&self, m: &DMatrix<f64>) -> Result<Occupations> {
        let mut v = m * &self.0;
        clean(&mut v)?;
        Ok(Occupations(v))
    }
}

fn clean(v: &mut DVector<f64>) -> Result<()> {
    for (k, x) in v.iter_mut().enumerate() {
        if !x.is_finite() {
            return Err(Error::Numerical(format!("non-finite occupation at index {k}")));
        }
        if *x < 0.0 && *x > -1e-12 {
            *x = 0.0;
        }
    }
    Ok(())
}

/// Options for [`build_rate_matrix_with`].
#[derive(Clone, Copy, Debug, Default)]
pub struct RateOptions {
    /// Accept beams that jointly drive connected groups of three or more
    /// states (multi-tone pumping); the rate model then ignores coherences.
    pub allow_lambda: bool,
}

/// Squared multipole amplitudes |d_q|^2 for every (lower, upper) pair of a
/// transition, indexed by q + rank.
struct AmplitudeTable {
    lower: std::ops::Range<usize>,
    upper: std::ops::Range<usize>,
    values: Vec<Vec<[f64; 5]>>,
}

impl AmplitudeTable {
    fn new(reg: &StateRegistry, lower: &str, upper: &str, rank: u32) -> Self {
        let lr = reg.level_range(lower).expect("registered");
        let ur = reg.level_range(upper).expect("registered");
        let r = rank as i32;
        let values = lr
            .clone()
            .map(|g| {
                ur.clone()
                    .map(|e| {
                        let mut d = [0.0; 5];
                        for q in -r..=r {
                            d[(q + 2) as usize] = multipole_amplitude(reg.state(g), reg.state(e), rank, q).powi(2);
                        }
                        d
                    })
                    .collect()
            })
            .collect();
        AmplitudeTable { lower: lr, upper: ur, values }
    }

    fn get(&self, g: usize, e: usize) -> &[f64; 5] {
        &self.values[g - self.lower.start][e - self.upper.start]
    }
}

/// Rate matrix for a set of simultaneously applied beams, refusing beam sets
/// that couple three or more states through distinct drives.
pub fn build_rate_matrix(beams: &[LaserBeam], registry: &StateRegistry) -> Result<RateMatrix> {
    build_rate_matrix_with(beams, registry, RateOptions::default())
}

pub fn build_rate_matrix_with(beams: &[LaserBeam], registry: &StateRegistry, options: RateOptions) -> Result<RateMatrix> {
    registry.check_closed()?;
    let n = registry.len();
    let mut rm = RateMatrix { matrix: DMatrix::zeros(n, n), beams: beams.iter().map(|b| b.name.clone()).collect() };
    let species = registry.species();

    // Spontaneous decay.
    for t in registry.internal_transitions() {
        if t.linewidth == 0.0 {
            continue;
        }
        let table = AmplitudeTable::new(registry, &t.lower, &t.upper, t.rank);
        for e in table.upper.clone() {
            for g in table.lower.clone() {
                let strength: f64 = table.get(g, e).iter().sum();
                if strength > 0.0 {
                    rm.add_transfer(e, g, t.linewidth * strength);
                }
            }
        }
    }

    // Stimulated absorption and emission.
    let mut links: Vec<Vec<(usize, usize, f64)>> = Vec::with_capacity(beams.len());
    for beam in beams {
        if !(beam.intensity >= 0.0) {
            return Err(Error::Config(format!("beam {}: intensity must be >= 0", beam.name)));
        }
        let t = species
            .transition(&beam.transition)
            .ok_or_else(|| Error::Config(format!("beam {}: unknown transition {}", beam.name, beam.transition)))?;
        if t.rank != 1 {
            return Err(Error::Config(format!("beam {}: only dipole transitions can be driven", beam.name)));
        }
        if !registry.has_level(&t.lower) || !registry.has_level(&t.upper) {
            return Err(Error::Config(format!("beam {}: levels of transition {} not registered", beam.name, t.name)));
        }
        let ga = registry.index(&t.lower, beam.anchor.0)?;
        let ea = registry.index(&t.upper, beam.anchor.1)?;
        let laser = registry.state(ea).energy - registry.state(ga).energy + beam.detuning;
        let natural = species.level(&t.upper).expect("validated").decay_rate();
        let table = AmplitudeTable::new(registry, &t.lower, &t.upper, t.rank);
        let weights = beam.polarization.weights();

        let mut beam_links = Vec::new();
        for g in table.lower.clone() {
            for e in table.upper.clone() {
                let d = table.get(g, e);
                let coupling: f64 = (0..3).map(|k| weights[k] * d[k + 1]).sum();
                if coupling == 0.0 || beam.intensity == 0.0 {
                    continue;
                }
                let delta = laser - (registry.state(e).energy - registry.state(g).energy);
                let shape = match beam.lineshape {
                    Lineshape::Natural => 1.0 / (1.0 + (2.0 * delta / natural).powi(2)),
                    Lineshape::Broadband => 1.0,
                };
                let rate = 0.5 * t.linewidth * beam.intensity * coupling * shape;
                rm.add_transfer(g, e, rate);
                rm.add_transfer(e, g, rate);
                beam_links.push((g, e, rate));
            }
        }
        links.push(beam_links);
    }

    if !options.allow_lambda {
        lambda_guard(beams, &links, registry)?;
    }
    rm.check()?;
    Ok(rm)
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut y = x;
    while parent[y] != r {
        let next = parent[y];
        parent[y] = r;
        y = next;
    }
    r
}

fn lambda_guard(beams: &[LaserBeam], links: &[Vec<(usize, usize, f64)>], registry: &StateRegistry) -> Result<()> {
    if beams.len() < 2 {
        return Ok(());
    }
    let n = registry.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut significant: Vec<Vec<(usize, usize)>> = Vec::new();
    for beam_links in links {
        let max = beam_links.iter().map(|l| l.2).fold(0.0, f64::max);
        let keep: Vec<(usize, usize)> = beam_links
            .iter()
            .filter(|l| l.2 > 0.0 && l.2 >= LAMBDA_GUARD_FRACTION * max)
            .map(|l| (l.0, l.1))
            .collect();
        for &(a, b) in &keep {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
            }
        }
        significant.push(keep);
    }
    let mut comp_beams: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (k, keep) in significant.iter().enumerate() {
        for &(a, _) in keep {
            let r = find(&mut parent, a);
            let entry = comp_beams.entry(r).or_default();
            if !entry.contains(&k) {
                entry.push(k);
            }
        }
    }
    for (root, bs) in comp_beams {
        if bs.len() >= 2 {
            let size = (0..n).filter(|&x| find(&mut parent, x) == root).count();
            if size >= 3 {
                let names: Vec<&str> = bs.iter().map(|&k| beams[k].name.as_str()).collect();
                let example = (0..n).find(|&x| find(&mut parent, x) == root).expect("non-empty");
                return Err(Error::LambdaGuard(format!(
                    "beams {names:?} jointly couple {size} states (including {}); apply them sequentially",
                    registry.describe(example)
                )));
            }
        }
    }
    Ok(())
}

/// exp(R t), the column-stochastic propagator over `duration` seconds.
pub fn propagator(rates: &RateMatrix, duration: f64) -> Result<DMatrix<f64>> {
    if !(duration >= 0.0) {
        return Err(Error::Config(format!("duration must be >= 0, got {duration}")));
    }
    if duration == 0.0 {
        return Ok(DMatrix::identity(rates.dim(), rates.dim()));
    }
    let m = (&rates.matrix * duration).exp();
    if m.iter().any(|x| !x.is_finite()) {
        let worst = (0..rates.dim()).map(|j| rates.out_rate(j)).fold(0.0, f64::max);
        return Err(Error::Numerical(format!(
            "matrix exponential is not finite (t = {duration:e} s, largest out-rate {worst:e} s^-1)"
        )));
    }
    // Scaling and squaring leaves O(1e-14) column-sum defects that compound
    // over long cycle sequences; project them out, refuse anything larger.
    let mut m = m;
    for j in 0..m.ncols() {
        let mut col = m.column_mut(j);
        for x in col.iter_mut() {
            if *x < 0.0 && *x > -1e-12 {
                *x = 0.0;
            }
        }
        let sum = col.sum();
        if (sum - 1.0).abs() > 1e-8 {
            return Err(Error::Numerical(format!("propagator column {j} sums to {sum}")));
        }
        col /= sum;
    }
    Ok(m)
}

/// p(t) = exp(R t) p0.
pub fn evolve(p0: &Occupations, rates: &RateMatrix, duration: f64) -> Result<Occupations> {
    if p0.len() != rates.dim() {
        return Err(Error::Config(format!("occupation length {} != rate matrix size {}", p0.len(), rates.dim())));
    }
    p0.apply(&propagator(rates, duration)?)
}

/// Same as [`evolve`] but by adaptive Dormand-Prince integration; an
/// independent route used to cross-check the matrix exponential.
pub fn evolve_ode(p0: &Occupations, rates: &RateMatrix, duration: f64, rtol: f64) -> Result<Occupations> {
    if !(duration >= 0.0) {
        return Err(Error::Config(format!("duration must be >= 0, got {duration}")));
    }
    let r = &rates.matrix;
    let f = |y: &DVector<f64>| r * y;
    let mut y = p0.0.clone();
    let mut t = 0.0;
    let scale = (0..rates.dim()).map(|j| rates.out_rate(j)).fold(0.0, f64::max).max(1e-300);
    let mut h = (0.1 / scale).min(duration);
    let atol = rtol * 1e-3;

    // Dormand-Prince 5(4) tableau.
    // The generator is autonomous, so the nodes c_i are not needed.
    const A21: f64 = 1.0 / 5.0;
    const A31: f64 = 3.0 / 40.0;
    const A32: f64 = 9.0 / 40.0;
    const A41: f64 = 44.0 / 45.0;
    const A42: f64 = -56.0 / 15.0;
    const A43: f64 = 32.0 / 9.0;
    const A51: f64 = 19372.0 / 6561.0;
    const A52: f64 = -25360.0 / 2187.0;
    const A53: f64 = 64448.0 / 6561.0;
    const A54: f64 = -212.0 / 729.0;
    const A61: f64 = 9017.0 / 3168.0;
    const A62: f64 = -355.0 / 33.0;
    const A63: f64 = 46732.0 / 5247.0;
    const A64: f64 = 49.0 / 176.0;
    const A65: f64 = -5103.0 / 18656.0;
    const B1: f64 = 35.0 / 384.0;
    const B3: f64 = 500.0 / 1113.0;
    const B4: f64 = 125.0 / 192.0;
    const B5: f64 = -2187.0 / 6784.0;
    const B6: f64 = 11.0 / 84.0;
    const E1: f64 = 71.0 / 57600.0;
    const E3: f64 = -71.0 / 16695.0;
    const E4: f64 = 71.0 / 1920.0;
    const E5: f64 = -17253.0 / 339200.0;
    const E6: f64 = 22.0 / 525.0;
    const E7: f64 = -1.0 / 40.0;

    let mut k1 = f(&y);
    let mut steps = 0usize;
    while t < duration {
        if t + h > duration {
            h = duration - t;
        }
        let k2 = f(&(&y + &k1 * (h * A21)));
        let k3 = f(&(&y + (&k1 * A31 + &k2 * A32) * h));
        let k4 = f(&(&y + (&k1 * A41 + &k2 * A42 + &k3 * A43) * h));
        let k5 = f(&(&y + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h));
        let k6 = f(&(&y + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h));
        let y_new = &y + (&k1 * B1 + &k3 * B3 + &k4 * B4 + &k5 * B5 + &k6 * B6) * h;
        let k7 = f(&y_new);
        let err_vec = (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;
        let err = err_vec
            .iter()
            .zip(y.iter().zip(y_new.iter()))
            .map(|(e, (a, b))| (e / (atol + rtol * a.abs().max(b.abs()))).powi(2))
            .sum::<f64>()
            / y.len() as f64;
        let err = err.sqrt();
        if !err.is_finite() {
            return Err(Error::Numerical("ODE integration produced non-finite values".into()));
        }
        if err <= 1.0 {
            t += h;
            y = y_new;
            k1 = k7;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
        steps += 1;
        if steps > 10_000_000 {
            return Err(Error::Numerical("ODE integration exceeded step budget".into()));
        }
    }
    clean(&mut y)?;
    Ok(Occupations(y))
}

/// Kernel of a rate matrix, one normalised vector per closed class.
#[derive(Clone, Debug)]
pub struct SteadyState {
    pub vectors: Vec<Occupations>,
    /// State indices of each closed communicating class.
    pub components: Vec<Vec<usize>>,
    /// Largest singular value attributed to the kernel and the next one up;
    /// a small ratio means the rank decision is unambiguous.
    pub singular_gap: (f64, f64),
}

impl SteadyState {
    /// The unique steady state when the kernel is one-dimensional.
    pub fn unique(&self) -> Option<&Occupations> {
        if self.vectors.len() == 1 {
            self.vectors.first()
        } else {
            None
        }
    }
}

/// Closed communicating classes of the transition graph (edge j -> i when
/// R[i][j] > 0).
fn closed_classes(r: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = r.nrows();
    let reach = |start: usize| -> Vec<bool> {
        let mut seen = vec![false; n];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(j) = stack.pop() {
            for i in 0..n {
                if i != j && r[(i, j)] > 0.0 && !seen[i] {
                    seen[i] = true;
                    stack.push(i);
                }
            }
        }
        seen
    };
    let reachable: Vec<Vec<bool>> = (0..n).map(reach).collect();
    let mut assigned = vec![false; n];
    let mut classes = Vec::new();
    for s in 0..n {
        if assigned[s] {
            continue;
        }
        // Closed iff everything reachable from s can reach s back.
        let closed = (0..n).all(|t| !reachable[s][t] || reachable[t][s]);
        let class: Vec<usize> = (0..n).filter(|&t| reachable[s][t] && reachable[t][s]).collect();
        for &t in &class {
            assigned[t] = true;
        }
        if closed {
            classes.push(class);
        }
    }
    classes
}

pub fn steady_state(rates: &RateMatrix) -> Result<SteadyState> {
    rates.check()?;
    let n = rates.dim();
    let classes = closed_classes(&rates.matrix);
    let mut vectors = Vec::with_capacity(classes.len());
    for class in &classes {
        let k = class.len();
        let mut a = DMatrix::from_fn(k, k, |i, j| rates.matrix[(class[i], class[j])]);
        let mut b = DVector::zeros(k);
        for j in 0..k {
            a[(k - 1, j)] = 1.0;
        }
        b[k - 1] = 1.0;
        let x = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Numerical("singular balance equations for a closed class".into()))?;
        let mut v = DVector::zeros(n);
        for (i, &s) in class.iter().enumerate() {
            v[s] = x[i].max(0.0);
        }
        let total = v.sum();
        vectors.push(Occupations(v / total));
    }

    let mut sv: Vec<f64> = rates.matrix.clone().singular_values().iter().copied().collect();
    sv.sort_by(f64::total_cmp);
    let kdim = classes.len();
    let gap = (
        if kdim > 0 { sv[kdim - 1] } else { 0.0 },
        sv.get(kdim).copied().unwrap_or(f64::INFINITY),
    );
    Ok(SteadyState { vectors, components: classes, singular_gap: gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::species::SpeciesData;
    use crate::structure::FieldConfig;

    fn ca_registry() -> StateRegistry {
        let ca = SpeciesData::builtin("Ca43").unwrap();
        StateRegistry::new(&ca, FieldConfig::from_millitesla(28.8).unwrap(), &["S1/2", "P1/2", "D3/2"]).unwrap()
    }

    #[test]
    fn linear_polarization_weights() {
        let w = linear_polarization(90.0).unwrap().weights();
        assert!((w[0] - 0.5).abs() < 1e-12 && w[1].abs() < 1e-12 && (w[2] - 0.5).abs() < 1e-12);
        let w = linear_polarization(45.0).unwrap().weights();
        assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12 && (w[2] - 0.25).abs() < 1e-12);
        let w = linear_polarization(0.0).unwrap().weights();
        assert!(w[0].abs() < 1e-12 && (w[1] - 1.0).abs() < 1e-12 && w[2].abs() < 1e-12);
        assert!(linear_polarization(91.0).is_err());
    }

    #[test]
    fn polarization_normalisation_enforced() {
        let c = |x| Complex::new(x, 0.0);
        assert!(Polarization::new(c(1.0), c(1.0), c(0.0)).is_err());
        assert!(Polarization::new(c(0.6), c(0.0), c(0.8)).is_ok());
    }

    #[test]
    fn decay_only_generator() {
        let reg = ca_registry();
        let r = build_rate_matrix(&[], &reg).unwrap();
        assert!(r.max_column_sum() < 1e-10);
        for g in reg.ground_range() {
            assert!(r.matrix.column(g).iter().all(|&x| x == 0.0));
        }
        let ss = steady_state(&r).unwrap();
        assert_eq!(ss.components.len(), 16);
        for v in &ss.vectors {
            let ground: f64 = reg.ground_range().map(|k| v.get(k)).sum();
            assert!((ground - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_guard_refuses_simultaneous_397_and_866() {
        let reg = ca_registry();
        let pol = linear_polarization(90.0).unwrap();
        let b397 = LaserBeam::new("397", (StateLabel::int(3, 3), StateLabel::int(4, 4)), 0.05, pol);
        let b866 = LaserBeam::new("866", (StateLabel::int(3, 3), StateLabel::int(4, 4)), 0.05, pol);
        let err = build_rate_matrix(&[b397.clone(), b866.clone()], &reg).unwrap_err();
        assert!(matches!(err, Error::LambdaGuard(_)), "{err}");
        assert!(build_rate_matrix_with(&[b397, b866], &reg, RateOptions { allow_lambda: true }).is_ok());
    }

    #[test]
    fn unknown_anchor_is_reported() {
        let reg = ca_registry();
        let b = LaserBeam::new("397", (StateLabel::int(5, 3), StateLabel::int(4, 4)), 0.05, Polarization::sigma_plus());
        assert!(matches!(build_rate_matrix(&[b], &reg), Err(Error::UnknownState(_))));
    }

    #[test]
    fn isolated_excited_state_decays_exponentially() {
        let ca = SpeciesData::builtin("Ca43").unwrap();
        let reg = StateRegistry::new(&ca, FieldConfig::from_millitesla(28.8).unwrap(), &["S1/2", "P1/2", "D3/2"]).unwrap();
        let r = build_rate_matrix(&[], &reg).unwrap();
        let e = reg.index("P1/2", StateLabel::int(4, 4)).unwrap();
        let tau = ca.level("P1/2").unwrap().lifetime;
        let p0 = Occupations::pure(reg.len(), e);
        for t in [0.0, 1e-9, 7e-9, 2e-8] {
            let p = evolve(&p0, &r, t).unwrap();
            assert!((p.get(e) - (-t / tau).exp()).abs() < 1e-9);
            assert!((p.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn far_detuned_anchor_excitation_is_suppressed() {
        let reg = ca_registry();
        let pol = linear_polarization(90.0).unwrap();
        let beam = LaserBeam::new("397", (StateLabel::int(3, 3), StateLabel::int(4, 4)), 0.05, pol);
        let r = build_rate_matrix(&[beam], &reg).unwrap();
        let s = reg.ground_index(StateLabel::int(4, 4)).unwrap();
        let pump = reg.ground_index(StateLabel::int(3, 3)).unwrap();
        let out_s = r.out_rate(s);
        let out_pump = r.out_rate(pump);
        assert!(out_pump / out_s > 4e4, "{}", out_pump / out_s);
    }
}
