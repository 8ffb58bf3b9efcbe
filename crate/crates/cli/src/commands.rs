use std::path::{Path, PathBuf};

use ionprep::budget::{BudgetInputs, BudgetReport};
use ionprep::config::RunConfig;
use ionprep::schemes::{self, FieldRegime, SchemeResult, Setup, SimulationTrace};
use ionprep::species::SpeciesData;
use ionprep::structure::dressed_states;
use serde::Serialize;

use crate::output::{field, opt_sci, sci, sha256_hex, Manifest, Output, VERSION};
use crate::CliError;

/// Resolved inputs of one run.
pub struct Run {
    pub command: String,
    pub config: RunConfig,
    pub budget: Option<BudgetInputs>,
    pub species_dir: Option<PathBuf>,
    pub allow_partial: bool,
}

/// Result of a run that completed: `partial` lists the points that did not
/// converge or failed.
#[derive(Default)]
pub struct Outcome {
    pub failed: Vec<String>,
    pub unconverged: Vec<String>,
}

impl Outcome {
    /// Exit code the run should finish with.
    pub fn status(&self, allow_partial: bool) -> Result<(), CliError> {
        if allow_partial {
            return Ok(());
        }
        if !self.failed.is_empty() {
            return Err(CliError { code: 3, message: format!("failed: {}", self.failed.join("; ")) });
        }
        if !self.unconverged.is_empty() {
            return Err(CliError { code: 4, message: format!("did not converge: {}", self.unconverged.join("; ")) });
        }
        Ok(())
    }
}

impl Run {
    fn load_species(&self, name: &str) -> ionprep::Result<SpeciesData> {
        SpeciesData::load(name, self.species_dir.as_deref())
    }

    fn config_text(&self) -> String {
        self.config.to_toml_string()
    }

    fn budget_text(&self) -> Option<String> {
        self.budget.as_ref().map(|b| toml::to_string(b).expect("budget inputs serialise"))
    }

    pub fn hash(&self) -> String {
        let mut bytes = self.config_text().into_bytes();
        if let Some(b) = self.budget_text() {
            bytes.extend_from_slice(b"\n# budget inputs\n");
            bytes.extend_from_slice(b.as_bytes());
        }
        sha256_hex(&bytes)
    }

    /// Runs the command, writes its files and the manifest into `dir`.
    pub fn execute(&self, dir: &Path) -> Result<(Manifest, Outcome), CliError> {
        let mut out = Output::create(dir, self.hash())?;
        let outcome = match self.command.as_str() {
            "levels" => self.levels(&mut out)?,
            "fssp" => self.fssp(&mut out)?,
            "pssp" => self.pssp(&mut out)?,
            "alt" => self.alt(&mut out)?,
            "sweep" => self.sweep(&mut out)?,
            "species-scan" => self.species_scan(&mut out)?,
            "budget" => self.budget(&mut out)?,
            other => return Err(CliError::config(format!("unknown command {other}"))),
        };
        let manifest = Manifest {
            tool: "ionprep".into(),
            version: VERSION.into(),
            command: self.command.clone(),
            config: self.config_text(),
            budget_inputs: self.budget_text(),
            config_sha256: out.hash.clone(),
            species_dir: self.species_dir.clone(),
            allow_partial: self.allow_partial,
            files: Default::default(),
        };
        Ok((out.finish(manifest)?, outcome))
    }

    fn setup(&self) -> Result<Setup, CliError> {
        let species = self.load_species(&self.config.species)?;
        Ok(Setup::new(&self.config, &species)?)
    }

    fn levels(&self, out: &mut Output) -> Result<Outcome, CliError> {
        let species = self.load_species(&self.config.species)?;
        let field_cfg = schemes::resolve_field(&self.config, &species)?;
        let mut rows = Vec::new();
        for level in &species.levels {
            for s in dressed_states(level, &species, &field_cfg)? {
                rows.push(vec![field(&level.name), s.label.f.to_string(), s.label.m.to_string(), sci(s.frequency_hz())]);
            }
        }
        out.csv("levels.csv", &["level", "F", "M", "energy_hz"], &rows)?;
        #[derive(Serialize)]
        struct Summary {
            species: String,
            field_tesla: f64,
            states: usize,
        }
        let s = Summary { species: species.name.clone(), field_tesla: field_cfg.field_tesla, states: rows.len() };
        out.summary("levels_summary.json", "levels", &self.config, &s)?;
        Ok(Outcome::default())
    }

    fn fssp(&self, out: &mut Output) -> Result<Outcome, CliError> {
        let setup = self.setup()?;
        let scheme = setup.fssp_scheme()?;
        let result = schemes::run_to_convergence(&scheme, &setup.initial()?, setup.convergence())?;
        let fixed_point_error = scheme.error(&scheme.fixed_point()?);
        write_trace(out, "fssp_trace.csv", &result.trace)?;

        let states = schemes::prepare_from_all_states(&setup)?;
        let rows: Vec<Vec<String>> = states
            .iter()
            .map(|(l, n)| vec![l.f.to_string(), l.m.to_string(), n.map(|n| n.to_string()).unwrap_or_default()])
            .collect();
        out.csv("fssp_initial_states.csv", &["F", "M", "cycles_to_1e"], &rows)?;

        #[derive(Serialize)]
        struct InitialRow {
            state: String,
            cycles_to_1e: Option<usize>,
        }
        #[derive(Serialize)]
        struct Summary {
            target: String,
            field_tesla: f64,
            initial: String,
            run: RunSummary,
            fixed_point_error: f64,
            initial_states: Vec<InitialRow>,
        }
        let mut outcome = Outcome::default();
        if !result.converged {
            outcome.unconverged.push(format!("FSSP after {} cycles", result.cycles));
        }
        for (l, n) in &states {
            if n.is_none() {
                outcome.unconverged.push(format!("initial {l} never reaches 1/e"));
            }
        }
        let s = Summary {
            target: setup.target.to_string(),
            field_tesla: setup.registry.field().field_tesla,
            initial: self.config.initial.clone(),
            run: RunSummary::from(&result),
            fixed_point_error,
            initial_states: states.iter().map(|(l, n)| InitialRow { state: l.to_string(), cycles_to_1e: *n }).collect(),
        };
        out.summary("fssp_summary.json", "fssp", &self.config, &s)?;
        Ok(outcome)
    }

    fn pssp(&self, out: &mut Output) -> Result<Outcome, CliError> {
        let setup = self.setup()?;
        let eps = self.config.pssp.epsilon;
        let result = schemes::run_pssp(&setup, eps, &setup.initial()?)?;
        write_trace(out, "pssp_trace.csv", &result.trace)?;
        #[derive(Serialize)]
        struct Summary {
            target: String,
            epsilon: f64,
            run: RunSummary,
        }
        let s = Summary { target: setup.target.to_string(), epsilon: eps, run: RunSummary::from(&result) };
        out.summary("pssp_summary.json", "pssp", &self.config, &s)?;
        let mut outcome = Outcome::default();
        if !result.converged {
            outcome.unconverged.push(format!("PSSP after {} blocks", result.cycles));
        }
        Ok(outcome)
    }

    fn alt(&self, out: &mut Output) -> Result<Outcome, CliError> {
        let species = self.load_species(&self.config.species)?;
        #[derive(Serialize)]
        struct Row {
            regime: FieldRegime,
            field_tesla: f64,
            run: RunSummary,
        }
        let mut rows = Vec::new();
        let mut csv = Vec::new();
        for regime in [FieldRegime::Low, FieldRegime::High] {
            let scheme = schemes::alternative_scheme(&self.config, &species, regime)?;
            let result = schemes::run_alternative(&self.config, &species, regime)?;
            let name = regime_name(regime);
            for (k, (e, t)) in result.trace.errors.iter().zip(&result.trace.times).enumerate() {
                csv.push(vec![name.to_string(), k.to_string(), sci(*t), sci(*e)]);
            }
            rows.push(Row { regime, field_tesla: scheme.registry.field().field_tesla, run: RunSummary::from(&result) });
        }
        out.csv("alt_traces.csv", &["regime", "cycle", "time_s", "error"], &csv)?;
        out.summary("alt_summary.json", "alt", &self.config, &rows)?;
        // A fixed cycle count is the scheme's definition, not a convergence run.
        Ok(Outcome::default())
    }

    fn sweep(&self, out: &mut Output) -> Result<Outcome, CliError> {
        let setup = self.setup()?;
        let rows = schemes::sweep_intensity(&setup, &self.config.sweep.intensities);
        let mut outcome = Outcome::default();
        let mut csv = Vec::new();
        #[derive(Serialize)]
        struct Row {
            intensity: f64,
            run: Option<RunSummary>,
            fixed_point_error: Option<f64>,
            error: Option<String>,
        }
        let mut json = Vec::new();
        for r in &rows {
            match &r.result {
                Ok(res) => {
                    if !res.converged {
                        outcome.unconverged.push(format!("s = {}", r.intensity));
                    }
                    csv.push(vec![
                        sci(r.intensity),
                        sci(res.steady_error),
                        opt_sci(r.fixed_point_error),
                        res.cycles.to_string(),
                        sci(res.duration),
                        res.converged.to_string(),
                        String::new(),
                    ]);
                }
                Err(e) => {
                    outcome.failed.push(format!("s = {}: {e}", r.intensity));
                    csv.push(vec![sci(r.intensity), String::new(), opt_sci(r.fixed_point_error), String::new(), String::new(), "false".into(), field(e)]);
                }
            }
            json.push(Row {
                intensity: r.intensity,
                run: r.result.as_ref().ok().map(RunSummary::from),
                fixed_point_error: r.fixed_point_error,
                error: r.result.as_ref().err().cloned(),
            });
        }
        let header = ["intensity", "steady_error", "fixed_point_error", "cycles", "duration_s", "converged", "errors"];
        out.csv("sweep.csv", &header, &csv)?;
        out.summary("sweep_summary.json", "sweep", &self.config, &json)?;
        Ok(outcome)
    }

    fn species_scan(&self, out: &mut Output) -> Result<Outcome, CliError> {
        let load = |name: &str| self.load_species(name);
        let rows = schemes::cross_species_errors(&self.config, &load);
        let mut outcome = Outcome::default();
        let mut csv = Vec::new();
        let mut traces = Vec::new();
        let mut points = Vec::new();
        #[derive(Serialize)]
        struct Row {
            species: String,
            target: String,
            field_tesla: f64,
            hyperfine_splitting_hz: f64,
            run: Option<RunSummary>,
            error: Option<String>,
        }
        let mut json = Vec::new();
        for r in &rows {
            let base = vec![field(&r.species), field(&r.target), sci(r.field_tesla), sci(r.hyperfine_splitting_hz)];
            let tail = match &r.result {
                Ok(res) => {
                    if !res.converged {
                        outcome.unconverged.push(r.species.clone());
                    }
                    points.push((r.hyperfine_splitting_hz, res.steady_error));
                    for (k, (e, t)) in res.trace.errors.iter().zip(&res.trace.times).enumerate() {
                        traces.push(vec![field(&r.species), k.to_string(), sci(*t), sci(*e)]);
                    }
                    vec![sci(res.steady_error), res.cycles.to_string(), sci(res.duration), res.converged.to_string(), String::new()]
                }
                Err(e) => {
                    outcome.failed.push(format!("{}: {e}", r.species));
                    vec![String::new(), String::new(), String::new(), "false".into(), field(e)]
                }
            };
            csv.push([base, tail].concat());
            json.push(Row {
                species: r.species.clone(),
                target: r.target.clone(),
                field_tesla: r.field_tesla,
                hyperfine_splitting_hz: r.hyperfine_splitting_hz,
                run: r.result.as_ref().ok().map(RunSummary::from),
                error: r.result.as_ref().err().cloned(),
            });
        }
        let header = [
            "species",
            "target",
            "field_tesla",
            "hyperfine_splitting_hz",
            "steady_error",
            "cycles",
            "duration_s",
            "converged",
            "errors",
        ];
        out.csv("species_scan.csv", &header, &csv)?;
        out.csv("species_traces.csv", &["species", "cycle", "time_s", "error"], &traces)?;
        #[derive(Serialize)]
        struct Summary {
            rows: Vec<Row>,
            loglog_slope: Option<f64>,
        }
        let s = Summary { rows: json, loglog_slope: schemes::loglog_slope(&points).ok() };
        out.summary("species_scan_summary.json", "species-scan", &self.config, &s)?;
        Ok(outcome)
    }

    fn budget(&self, out: &mut Output) -> Result<Outcome, CliError> {
        let inputs = self.budget.as_ref().expect("budget command carries inputs");
        let species = self.load_species(&inputs.species)?;
        let report: BudgetReport = inputs.report(&species)?;
        let csv = report.to_csv();
        out.text("budget.csv", &csv)?;
        out.text("budget.txt", &report.to_text())?;
        out.summary("budget_summary.json", "budget", &self.config, &report)?;
        Ok(Outcome::default())
    }
}

fn regime_name(r: FieldRegime) -> &'static str {
    match r {
        FieldRegime::Low => "low",
        FieldRegime::High => "high",
    }
}

fn write_trace(out: &mut Output, name: &str, trace: &SimulationTrace) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = trace
        .errors
        .iter()
        .zip(&trace.times)
        .enumerate()
        .map(|(k, (e, t))| vec![k.to_string(), sci(*t), sci(*e)])
        .collect();
    out.csv(name, &["cycle", "time_s", "error"], &rows)
}

#[derive(Serialize)]
struct RunSummary {
    steady_error: f64,
    cycles: usize,
    duration_s: f64,
    converged: bool,
}

impl From<&SchemeResult> for RunSummary {
    fn from(r: &SchemeResult) -> Self {
        RunSummary { steady_error: r.steady_error, cycles: r.cycles, duration_s: r.duration, converged: r.converged }
    }
}
