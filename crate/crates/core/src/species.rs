//! Ion species data: nuclear spin, electronic levels and optical transitions.
//!
//! Species are loaded from TOML files with `[species]`, `[level.<name>]` and
//! `[transition.<name>]` sections. Frequencies are in MHz, wavelengths in nm
//! and lifetimes in seconds. The three species shipped with the crate are
//! also available through [`SpeciesData::builtin`].

use crate::angular::HalfInt;
use crate::error::{Error, Result};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

const BUILTIN: &[(&str, &str)] = &[
    ("Ca43", include_str!("../data/species/Ca43.toml")),
    ("Mg25", include_str!("../data/species/Mg25.toml")),
    ("Ba137", include_str!("../data/species/Ba137.toml")),
];

/// One fine-structure level, e.g. 4P1/2.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSpec {
    pub name: String,
    pub n: u32,
    pub l: u32,
    pub j: HalfInt,
    /// Magnetic-dipole hyperfine constant (MHz).
    pub a_mhz: f64,
    /// Electric-quadrupole hyperfine constant (MHz).
    pub b_mhz: f64,
    pub g_j: f64,
    /// Lifetime in seconds; `f64::INFINITY` for the ground level.
    pub lifetime: f64,
}

impl LevelSpec {
    /// Total decay rate 1/tau (s^-1).
    pub fn decay_rate(&self) -> f64 {
        if self.lifetime.is_infinite() {
            0.0
        } else {
            1.0 / self.lifetime
        }
    }
}

/// A radiative coupling between two levels.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionSpec {
    pub name: String,
    pub lower: String,
    pub upper: String,
    pub wavelength_nm: f64,
    /// Fraction of the upper level's decays that end in the lower level.
    pub branching: f64,
    /// Multipole rank of the coupling: 1 for E1, 2 for E2.
    pub rank: u32,
    /// Partial linewidth (angular frequency), branching / tau_upper.
    pub linewidth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeciesData {
    pub name: String,
    pub nuclear_spin: HalfInt,
    /// Nuclear g-factor in units of the Bohr magneton, sign convention
    /// H_Z = mu_B B (g_J J_z + g_I I_z).
    pub nuclear_g_factor: f64,
    pub ground_level: String,
    pub levels: Vec<LevelSpec>,
    pub optical_transitions: Vec<TransitionSpec>,
}

#[derive(Deserialize)]
struct RawFile {
    species: RawSpecies,
    level: BTreeMap<String, RawLevel>,
    #[serde(default)]
    transition: BTreeMap<String, RawTransition>,
}

#[derive(Deserialize)]
struct RawSpecies {
    name: String,
    nuclear_spin: f64,
    nuclear_g_factor: f64,
    ground_level: String,
}

#[derive(Deserialize)]
struct RawLevel {
    n: u32,
    l: u32,
    j: f64,
    a_mhz: f64,
    #[serde(default)]
    b_mhz: f64,
    g_j: f64,
    lifetime_s: f64,
}

#[derive(Deserialize)]
struct RawTransition {
    lower: String,
    upper: String,
    wavelength_nm: f64,
    branching: f64,
    #[serde(default = "default_rank")]
    rank: u32,
    /// Optional explicit partial linewidth, checked against branching / tau.
    linewidth_mhz: Option<f64>,
}

fn default_rank() -> u32 {
    1
}

impl SpeciesData {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawFile = toml::from_str(text).map_err(|e| Error::Config(format!("species file: {e}")))?;
        let nuclear_spin = HalfInt::from_f64(raw.species.nuclear_spin)
            .ok_or_else(|| Error::Config(format!("nuclear_spin {} is not a half-integer", raw.species.nuclear_spin)))?;

        let mut levels = Vec::with_capacity(raw.level.len());
        for (name, l) in raw.level {
            let j = HalfInt::from_f64(l.j).ok_or_else(|| Error::Config(format!("level {name}: j {} is not a half-integer", l.j)))?;
            levels.push(LevelSpec {
                name,
                n: l.n,
                l: l.l,
                j,
                a_mhz: l.a_mhz,
                b_mhz: l.b_mhz,
                g_j: l.g_j,
                lifetime: l.lifetime_s,
            });
        }

        let mut transitions = Vec::with_capacity(raw.transition.len());
        for (name, t) in raw.transition {
            let tau = levels
                .iter()
                .find(|l| l.name == t.upper)
                .map(|l| l.lifetime)
                .ok_or_else(|| Error::Config(format!("transition {name}: unknown upper level {}", t.upper)))?;
            let linewidth = t.branching / tau;
            if let Some(lw) = t.linewidth_mhz {
                let given = 2.0 * PI * lw * 1e6;
                if ((given - linewidth) / linewidth).abs() > 1e-6 {
                    return Err(Error::Config(format!(
                        "transition {name}: linewidth {lw} MHz inconsistent with branching/tau"
                    )));
                }
            }
            transitions.push(TransitionSpec {
                name,
                lower: t.lower,
                upper: t.upper,
                wavelength_nm: t.wavelength_nm,
                branching: t.branching,
                rank: t.rank,
                linewidth,
            });
        }

        let species = SpeciesData {
            name: raw.species.name,
            nuclear_spin,
            nuclear_g_factor: raw.species.nuclear_g_factor,
            ground_level: raw.species.ground_level,
            levels,
            optical_transitions: transitions,
        };
        species.validate()?;
        Ok(species)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// One of the species shipped with the crate ("Ca43", "Mg25", "Ba137").
    pub fn builtin(name: &str) -> Result<Self> {
        BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_toml_str(text))
            .unwrap_or_else(|| Err(Error::Config(format!("no built-in species named {name}"))))
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(n, _)| *n)
    }

    /// Loads `<dir>/<name>.toml` if it exists, otherwise the built-in copy.
    pub fn load(name: &str, dir: Option<&Path>) -> Result<Self> {
        if let Some(dir) = dir {
            let path = dir.join(format!("{name}.toml"));
            if path.exists() {
                return Self::from_file(&path);
            }
        }
        Self::builtin(name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nuclear_spin.twice() <= 1 {
            return Err(Error::Config(format!("{}: nuclear spin must exceed 1/2", self.name)));
        }
        for level in &self.levels {
            if level.j.twice() < 1 {
                return Err(Error::Config(format!("level {}: J must be at least 1/2", level.name)));
            }
            if !(level.lifetime > 0.0) {
                return Err(Error::Config(format!("level {}: lifetime must be positive", level.name)));
            }
        }
        if self.level(&self.ground_level).is_none() {
            return Err(Error::Config(format!("ground level {} not defined", self.ground_level)));
        }
        for t in &self.optical_transitions {
            if t.lower == t.upper {
                return Err(Error::Config(format!("transition {}: lower and upper level coincide", t.name)));
            }
            if self.level(&t.lower).is_none() || self.level(&t.upper).is_none() {
                return Err(Error::Config(format!("transition {}: references an unknown level", t.name)));
            }
            if !(t.wavelength_nm > 0.0) {
                return Err(Error::Config(format!("transition {}: wavelength must be positive", t.name)));
            }
            if !(0.0..=1.0).contains(&t.branching) {
                return Err(Error::Config(format!("transition {}: branching outside [0, 1]", t.name)));
            }
            if t.rank != 1 && t.rank != 2 {
                return Err(Error::Config(format!("transition {}: rank must be 1 or 2", t.name)));
            }
        }
        for level in &self.levels {
            if level.lifetime.is_infinite() {
                continue;
            }
            let total: f64 = self.decays_from(&level.name).map(|t| t.branching).sum();
            if (total - 1.0).abs() > 1e-10 {
                return Err(Error::Config(format!(
                    "level {}: branching fractions sum to {total}, expected 1",
                    level.name
                )));
            }
        }
        Ok(())
    }

    pub fn level(&self, name: &str) -> Option<&LevelSpec> {
        self.levels.iter().find(|l| l.name == name)
    }

    pub fn transition(&self, name: &str) -> Option<&TransitionSpec> {
        self.optical_transitions.iter().find(|t| t.name == name)
    }

    /// The transition connecting two levels, in either order.
    pub fn transition_between(&self, a: &str, b: &str) -> Option<&TransitionSpec> {
        self.optical_transitions
            .iter()
            .find(|t| (t.lower == a && t.upper == b) || (t.lower == b && t.upper == a))
    }

    pub fn decays_from<'a>(&'a self, upper: &'a str) -> impl Iterator<Item = &'a TransitionSpec> + 'a {
        self.optical_transitions.iter().filter(move |t| t.upper == upper)
    }

    /// Field-free ground hyperfine splitting in Hz, A (I + 1/2) for J = 1/2.
    pub fn ground_hyperfine_splitting_hz(&self) -> f64 {
        let ground = self.level(&self.ground_level).expect("validated");
        (ground.a_mhz * 1e6 * (self.nuclear_spin.value() + 0.5)).abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_validate() {
        for name in SpeciesData::builtin_names() {
            let s = SpeciesData::builtin(name).unwrap();
            assert_eq!(s.name, name);
            assert!(s.nuclear_spin.twice() > 1);
        }
    }

    #[test]
    fn ca43_linewidth_is_about_23_mhz() {
        let ca = SpeciesData::builtin("Ca43").unwrap();
        let p = ca.level("P1/2").unwrap();
        let gamma_mhz = p.decay_rate() / (2.0 * PI) / 1e6;
        assert!((gamma_mhz - 23.05).abs() < 0.1, "{gamma_mhz}");
        let t = ca.transition("397").unwrap();
        assert!((t.linewidth - t.branching / p.lifetime).abs() < 1e-6 * t.linewidth);
    }

    #[test]
    fn rejects_bad_branching() {
        let text = include_str!("../data/species/Mg25.toml").replace("branching = 1.0", "branching = 0.9");
        let err = SpeciesData::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("branching"), "{err}");
    }

    #[test]
    fn rejects_spin_half() {
        let text = include_str!("../data/species/Mg25.toml").replace("nuclear_spin = 2.5", "nuclear_spin = 0.5");
        assert!(SpeciesData::from_toml_str(&text).is_err());
    }

    #[test]
    fn rejects_unknown_level_in_transition() {
        let text = include_str!("../data/species/Mg25.toml").replace("lower = \"S1/2\"", "lower = \"X\"");
        assert!(SpeciesData::from_toml_str(&text).is_err());
    }

    #[test]
    fn rejects_inconsistent_linewidth() {
        let text = include_str!("../data/species/Mg25.toml")
            .replace("branching = 1.0", "branching = 1.0\nlinewidth_mhz = 30.0");
        assert!(SpeciesData::from_toml_str(&text).is_err());
        let ok = include_str!("../data/species/Mg25.toml")
            .replace("branching = 1.0", &format!("branching = 1.0\nlinewidth_mhz = {}", 1.0 / 3.854e-9 / (2.0 * PI) / 1e6));
        assert!(SpeciesData::from_toml_str(&ok).is_ok());
    }

    #[test]
    fn hyperfine_splittings() {
        let ca = SpeciesData::builtin("Ca43").unwrap();
        assert!((ca.ground_hyperfine_splitting_hz() - 3.2256e9).abs() < 1e6);
        let ba = SpeciesData::builtin("Ba137").unwrap();
        assert!((ba.ground_hyperfine_splitting_hz() - 8.0377e9).abs() < 1e6);
    }
}
