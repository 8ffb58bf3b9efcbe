//! Run configuration (TOML).
//!
//! Every section has defaults derived from the species and the target
//! state, so a minimal file only names the species. Frequencies are in MHz
//! or kHz, times in microseconds, fields in millitesla, as the key names
//! say.

use crate::error::{Error, Result};
use crate::microwave::{MwGroup, MwMode};
use crate::rates::Lineshape;
use crate::species::SpeciesData;
use crate::structure::StateLabel;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Default FSSP configuration for 43Ca+ at 28.8 mT.
pub const DEFAULT_CA43: &str = include_str!("../data/configs/ca43_fssp.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub species: String,
    /// Static field. When absent, the clock point of `clock_transition`
    /// (or the species' default clock transition) is used.
    #[serde(default)]
    pub field_mt: Option<f64>,
    /// Ground transition whose clock point sets the field, e.g. ["3,+1", "4,+1"].
    #[serde(default)]
    pub clock_transition: Option<[String; 2]>,
    /// State to prepare; defaults to the positive stretched state.
    #[serde(default)]
    pub target: Option<String>,
    /// "uniform" (equal population over the ground level) or "F,M".
    #[serde(default = "default_initial")]
    pub initial: String,
    #[serde(default)]
    pub pump: BeamConfig,
    #[serde(default = "default_repump")]
    pub repump: BeamConfig,
    #[serde(default)]
    pub microwave: MicrowaveConfig,
    #[serde(default)]
    pub cycle: CycleConfig,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
    #[serde(default)]
    pub pssp: PsspConfig,
    #[serde(default)]
    pub alternative: AlternativeConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default = "default_scan")]
    pub species_scan: Vec<ScanEntry>,
}

fn default_initial() -> String {
    "uniform".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    /// Species transition name; derived from the levels when absent.
    #[serde(default)]
    pub transition: Option<String>,
    /// Anchor ["F,M" lower, "F,M" upper]; derived from the target when absent.
    #[serde(default)]
    pub anchor: Option<[String; 2]>,
    #[serde(default)]
    pub detuning_mhz: f64,
    pub intensity: f64,
    /// Linear polarisation angle to the field (degrees).
    #[serde(default)]
    pub angle_deg: Option<f64>,
    /// Explicit intensity weights [sigma-, pi, sigma+]; overrides the angle.
    #[serde(default)]
    pub weights: Option<[f64; 3]>,
    pub duration_us: f64,
    #[serde(default)]
    pub lineshape: Lineshape,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            transition: None,
            anchor: None,
            detuning_mhz: 0.0,
            intensity: 0.05,
            angle_deg: Some(90.0),
            weights: None,
            duration_us: 0.15,
            lineshape: Lineshape::Natural,
        }
    }
}

fn default_repump() -> BeamConfig {
    BeamConfig {
        transition: None,
        anchor: None,
        detuning_mhz: 0.0,
        intensity: 10.0,
        angle_deg: None,
        weights: Some([1.0, 1.0, 1.0]),
        duration_us: 0.85,
        lineshape: Lineshape::Broadband,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToneConfig {
    pub group: MwGroup,
    /// One or two ["F,M", "F,M"] transitions driven by the tone.
    pub transitions: Vec<[String; 2]>,
    #[serde(default)]
    pub weak: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrowaveConfig {
    #[serde(default = "default_rabi_khz")]
    pub rabi_khz: f64,
    #[serde(default = "default_weak_factor")]
    pub weak_factor: f64,
    #[serde(default)]
    pub mode: MwMode,
    #[serde(default)]
    pub leakage: bool,
    /// Tones farther than this from the clock transition frequency are weak
    /// (used when `weak` is absent).
    #[serde(default = "default_weak_offset")]
    pub weak_offset_mhz: f64,
    /// Explicit weak transitions, matched against the tone plan.
    #[serde(default)]
    pub weak: Option<Vec<[String; 2]>>,
    /// Full tone plan; replaces the generated one.
    #[serde(default)]
    pub tones: Option<Vec<ToneConfig>>,
}

fn default_rabi_khz() -> f64 {
    1000.0
}

fn default_weak_factor() -> f64 {
    4.0
}

fn default_weak_offset() -> f64 {
    400.0
}

impl Default for MicrowaveConfig {
    fn default() -> Self {
        MicrowaveConfig {
            rabi_khz: default_rabi_khz(),
            weak_factor: default_weak_factor(),
            mode: MwMode::Ideal,
            leakage: false,
            weak_offset_mhz: default_weak_offset(),
            weak: None,
            tones: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleConfig {
    /// Step order; entries are "A", "B", "pump", "repump".
    #[serde(default = "default_order")]
    pub order: Vec<String>,
    #[serde(default)]
    pub dead_time_us: f64,
}

fn default_order() -> Vec<String> {
    ["A", "B", "pump", "repump"].iter().map(|s| s.to_string()).collect()
}

impl Default for CycleConfig {
    fn default() -> Self {
        CycleConfig { order: default_order(), dead_time_us: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_max_cycles")]
    pub max_cycles: usize,
}

fn default_threshold() -> f64 {
    1e-7
}

fn default_max_cycles() -> usize {
    100_000
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig { threshold: default_threshold(), max_cycles: default_max_cycles() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsspConfig {
    /// Carrier intensity (drives the target's own hyperfine manifold).
    #[serde(default = "default_pssp_intensity")]
    pub intensity: f64,
    /// Sideband / carrier intensity ratio.
    #[serde(default = "default_one")]
    pub sideband_ratio: f64,
    #[serde(default = "default_pssp_duration")]
    pub duration_us: f64,
    /// Intensity fraction outside the intended circular component, split
    /// equally between the other two.
    #[serde(default)]
    pub epsilon: f64,
    /// FSSP cycles appended after the pumping stage converges.
    #[serde(default = "default_correction")]
    pub correction_cycles: usize,
}

fn default_pssp_intensity() -> f64 {
    0.15
}

fn default_one() -> f64 {
    1.0
}

fn default_pssp_duration() -> f64 {
    100.0
}

fn default_correction() -> usize {
    1
}

impl Default for PsspConfig {
    fn default() -> Self {
        PsspConfig {
            intensity: default_pssp_intensity(),
            sideband_ratio: 1.0,
            duration_us: default_pssp_duration(),
            epsilon: 0.0,
            correction_cycles: default_correction(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlternativeConfig {
    #[serde(default = "default_low_field")]
    pub low_field_mt: f64,
    #[serde(default = "default_high_field")]
    pub high_field_mt: f64,
    /// Intensity of each 397 tone.
    #[serde(default = "default_alt_intensity")]
    pub intensity: f64,
    #[serde(default = "default_alt_duration")]
    pub pump_duration_us: f64,
    #[serde(default = "default_alt_rabi")]
    pub rabi_khz: f64,
    /// Number of cycles applied in both regimes.
    #[serde(default = "default_alt_cycles")]
    pub cycles: usize,
    /// Linear polarisation angle of the 397 tones to the field (degrees).
    #[serde(default)]
    pub angle_deg: f64,
    /// Target in the upper-F manifold; defaults to |F,0>.
    #[serde(default)]
    pub target: Option<String>,
}

fn default_low_field() -> f64 {
    0.5
}

fn default_high_field() -> f64 {
    28.8
}

fn default_alt_intensity() -> f64 {
    0.03
}

fn default_alt_duration() -> f64 {
    1.0
}

fn default_alt_rabi() -> f64 {
    100.0
}

fn default_alt_cycles() -> usize {
    100
}

impl Default for AlternativeConfig {
    fn default() -> Self {
        AlternativeConfig {
            low_field_mt: default_low_field(),
            high_field_mt: default_high_field(),
            intensity: default_alt_intensity(),
            pump_duration_us: default_alt_duration(),
            rabi_khz: default_alt_rabi(),
            cycles: default_alt_cycles(),
            angle_deg: 0.0,
            target: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_sweep")]
    pub intensities: Vec<f64>,
}

fn default_sweep() -> Vec<f64> {
    vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0]
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { intensities: default_sweep() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanEntry {
    pub species: String,
    #[serde(default)]
    pub field_mt: Option<f64>,
    #[serde(default)]
    pub target: Option<String>,
}

fn default_scan() -> Vec<ScanEntry> {
    vec![
        ScanEntry { species: "Ca43".into(), field_mt: Some(28.8), target: Some("4,+4".into()) },
        ScanEntry { species: "Mg25".into(), field_mt: None, target: Some("3,-3".into()) },
        ScanEntry { species: "Ba137".into(), field_mt: None, target: Some("2,+2".into()) },
    ]
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Built-in 43Ca+ configuration.
    pub fn default_ca43() -> Self {
        Self::from_toml_str(DEFAULT_CA43).expect("bundled config is valid")
    }

    /// Minimal configuration for a species with every section defaulted.
    pub fn for_species(species: &str) -> Self {
        RunConfig {
            species: species.to_string(),
            field_mt: None,
            clock_transition: None,
            target: None,
            initial: default_initial(),
            pump: BeamConfig::default(),
            repump: default_repump(),
            microwave: MicrowaveConfig::default(),
            cycle: CycleConfig::default(),
            convergence: ConvergenceConfig::default(),
            pssp: PsspConfig::default(),
            alternative: AlternativeConfig::default(),
            sweep: SweepConfig::default(),
            species_scan: default_scan(),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.field_mt {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(Error::Config(format!("field_mt must be >= 0, got {b}")));
            }
        }
        for (name, beam) in [("pump", &self.pump), ("repump", &self.repump)] {
            if !(beam.intensity >= 0.0) {
                return Err(Error::Config(format!("{name}.intensity must be >= 0")));
            }
            if !(beam.duration_us > 0.0) {
                return Err(Error::Config(format!("{name}.duration_us must be > 0")));
            }
        }
        if !(self.microwave.rabi_khz > 0.0) || !(self.microwave.weak_factor >= 1.0) {
            return Err(Error::Config("microwave.rabi_khz must be > 0 and weak_factor >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.pssp.epsilon) {
            return Err(Error::Config("pssp.epsilon must lie in [0, 1]".into()));
        }
        if !(self.convergence.threshold > 0.0) || self.convergence.max_cycles == 0 {
            return Err(Error::Config("convergence needs threshold > 0 and max_cycles > 0".into()));
        }
        for s in &self.sweep.intensities {
            if !(*s > 0.0 && *s <= 1.0) {
                return Err(Error::Config(format!("sweep intensity {s} outside (0, 1]")));
            }
        }
        for step in &self.cycle.order {
            if !["A", "B", "pump", "repump"].contains(&step.as_str()) {
                return Err(Error::Config(format!("unknown cycle step '{step}'")));
            }
        }
        Ok(())
    }

    /// Target label, defaulting to |I+1/2, +(I+1/2)>.
    pub fn target_label(&self, species: &SpeciesData) -> Result<StateLabel> {
        match &self.target {
            Some(t) => StateLabel::parse(t),
            None => {
                let ft = (species.nuclear_spin.twice() + 1) / 2;
                Ok(StateLabel::int(ft, ft))
            }
        }
    }
}

/// Parses a ["F,M", "F,M"] pair.
pub fn parse_pair(pair: &[String; 2]) -> Result<(StateLabel, StateLabel)> {
    Ok((StateLabel::parse(&pair[0])?, StateLabel::parse(&pair[1])?))
}
