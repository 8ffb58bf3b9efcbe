//! Global index of dressed states across the levels taking part in a
//! simulation.

use crate::error::{Error, Result};
use crate::species::{SpeciesData, TransitionSpec};
use crate::structure::{dressed_states, DressedState, FieldConfig, ProductBasis, StateLabel};
use std::ops::Range;

#[derive(Clone, Debug)]
pub struct StateRegistry {
    species: SpeciesData,
    field: FieldConfig,
    levels: Vec<String>,
    ranges: Vec<Range<usize>>,
    states: Vec<DressedState>,
}

impl StateRegistry {
    /// Registers the dressed states of `levels` (in the order given).
    pub fn new(species: &SpeciesData, field: FieldConfig, levels: &[&str]) -> Result<Self> {
        let mut states = Vec::new();
        let mut ranges = Vec::new();
        let mut names = Vec::new();
        for &name in levels {
            if names.iter().any(|n| n == name) {
                return Err(Error::Config(format!("level {name} registered twice")));
            }
            let level = species
                .level(name)
                .ok_or_else(|| Error::Config(format!("{} has no level {name}", species.name)))?;
            let start = states.len();
            states.extend(dressed_states(level, species, &field)?);
            ranges.push(start..states.len());
            names.push(name.to_string());
        }
        Ok(StateRegistry { species: species.clone(), field, levels: names, ranges, states })
    }

    pub fn species(&self) -> &SpeciesData {
        &self.species
    }

    pub fn field(&self) -> FieldConfig {
        self.field
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[DressedState] {
        &self.states
    }

    pub fn state(&self, index: usize) -> &DressedState {
        &self.states[index]
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    pub fn has_level(&self, name: &str) -> bool {
        self.levels.iter().any(|l| l == name)
    }

    pub fn level_range(&self, name: &str) -> Option<Range<usize>> {
        self.levels.iter().position(|l| l == name).map(|k| self.ranges[k].clone())
    }

    pub fn ground_range(&self) -> Range<usize> {
        self.level_range(&self.species.ground_level).unwrap_or(0..0)
    }

    pub fn index(&self, level: &str, label: StateLabel) -> Result<usize> {
        let range = self
            .level_range(level)
            .ok_or_else(|| Error::UnknownState(format!("{level} (level not registered)")))?;
        range
            .clone()
            .find(|&k| self.states[k].label == label)
            .ok_or_else(|| Error::UnknownState(format!("{level} |{label}>")))
    }

    pub fn ground_index(&self, label: StateLabel) -> Result<usize> {
        let ground = self.species.ground_level.clone();
        self.index(&ground, label)
    }

    /// Transitions of the species whose two levels are both registered.
    pub fn internal_transitions(&self) -> impl Iterator<Item = &TransitionSpec> {
        self.species
            .optical_transitions
            .iter()
            .filter(|t| self.has_level(&t.lower) && self.has_level(&t.upper))
    }

    /// Fails if a registered level decays into a level that is not registered.
    pub fn check_closed(&self) -> Result<()> {
        for t in &self.species.optical_transitions {
            if self.has_level(&t.upper) && !self.has_level(&t.lower) && t.branching > 0.0 {
                return Err(Error::Config(format!(
                    "level {} decays to {} via {}, which is not registered",
                    t.upper, t.lower, t.name
                )));
            }
        }
        Ok(())
    }

    /// The same system at the reversed field: every M label negated, energies
    /// kept. Amplitudes are reflected (m_I, m_J) -> (-m_I, -m_J), which
    /// preserves all coupling strengths.
    pub fn mirrored(&self) -> Self {
        let mut states = Vec::with_capacity(self.states.len());
        for range in &self.ranges {
            let mut block: Vec<DressedState> = self.states[range.clone()]
                .iter()
                .map(|s| {
                    let basis = ProductBasis::new(s.i, s.j);
                    let mut amps = s.amplitudes.clone();
                    for k in 0..basis.dim() {
                        let (mi, mj) = basis.quantum_numbers(k);
                        let t = basis.index(-mi, -mj).expect("reflection stays in basis");
                        amps[t] = s.amplitudes[k];
                    }
                    DressedState { label: s.label.mirrored(), amplitudes: amps, ..s.clone() }
                })
                .collect();
            block.sort_by_key(|s| s.label);
            states.extend(block);
        }
        StateRegistry { states, ..self.clone() }
    }

    /// Human-readable name of a state, e.g. "S1/2|4,+4>".
    pub fn describe(&self, index: usize) -> String {
        let s = &self.states[index];
        format!("{}|{}>", s.level, s.label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_layout() {
        let ca = SpeciesData::builtin("Ca43").unwrap();
        let reg = StateRegistry::new(&ca, FieldConfig::from_millitesla(28.8).unwrap(), &["S1/2", "P1/2", "D3/2"]).unwrap();
        assert_eq!(reg.len(), 16 + 16 + 32);
        assert_eq!(reg.ground_range(), 0..16);
        let k = reg.ground_index(StateLabel::int(4, 4)).unwrap();
        assert_eq!(reg.describe(k), "S1/2|4,+4>");
        assert!(reg.ground_index(StateLabel::int(5, 0)).is_err());
        assert!(reg.check_closed().is_ok());
        assert_eq!(reg.internal_transitions().count(), 3);
    }

    #[test]
    fn open_decay_is_rejected() {
        let ca = SpeciesData::builtin("Ca43").unwrap();
        let reg = StateRegistry::new(&ca, FieldConfig::from_millitesla(28.8).unwrap(), &["S1/2", "P1/2"]).unwrap();
        assert!(reg.check_closed().is_err());
    }
}
