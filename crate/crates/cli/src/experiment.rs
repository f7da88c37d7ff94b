use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use ddrg_core::plants::reference_grid;
use ddrg_core::presets::{presets, ExperimentPreset};

use crate::CliResult;

pub const EXPERIMENT_FILE: &str = "experiment.json";

/// Experiment selection shared by the commands, with overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct ExperimentArgs {
    /// Built-in preset: paper-4.1, paper-4.2, paper-4.2-v20, paper-4.2-v27.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Experiment file (TOML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trajectories per reference.
    #[arg(long)]
    pub n_t: Option<usize>,
    /// Trajectory length in seconds.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Reference grid as `start:step:count`.
    #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
    pub references: Option<RefGrid>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub epsilon_scale: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub n_w: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefGrid(pub Vec<f64>);

fn parse_grid(s: &str) -> Result<RefGrid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("expected start:step:count, got {s:?}"));
    }
    let start: f64 = parts[0].parse().map_err(|e| format!("start: {e}"))?;
    let step: f64 = parts[1].parse().map_err(|e| format!("step: {e}"))?;
    let count: usize = parts[2].parse().map_err(|e| format!("count: {e}"))?;
    if count == 0 {
        return Err("count must be positive".into());
    }
    Ok(RefGrid(reference_grid(start, step, count)))
}

pub fn load_experiment(path: &Path) -> CliResult<ExperimentPreset> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    let exp = if is_toml { toml::from_str(&text)? } else { serde_json::from_str(&text)? };
    Ok(exp)
}

impl ExperimentArgs {
    /// Presets, then the config file, then `experiment.json` next to `beside`.
    pub fn resolve(&self, beside: Option<&Path>) -> CliResult<Vec<ExperimentPreset>> {
        let mut exps = if let Some(name) = &self.preset {
            presets(name)?
        } else if let Some(path) = &self.config {
            vec![load_experiment(path)?]
        } else if let Some(file) = beside {
            let path = file.parent().unwrap_or(Path::new(".")).join(EXPERIMENT_FILE);
            if !path.is_file() {
                return Err(format!("no --preset or --config given and no {} beside {}", EXPERIMENT_FILE, file.display()).into());
            }
            vec![load_experiment(&path)?]
        } else {
            return Err("one of --preset or --config is required".into());
        };
        for e in &mut exps {
            self.apply(e);
            e.synthesis.validate()?;
        }
        Ok(exps)
    }

    pub fn resolve_one(&self, beside: Option<&Path>) -> CliResult<ExperimentPreset> {
        let mut exps = self.resolve(beside)?;
        if exps.len() != 1 {
            let names: Vec<&str> = exps.iter().map(|e| e.name.as_str()).collect();
            return Err(format!("select a single experiment, one of {names:?}").into());
        }
        Ok(exps.remove(0))
    }

    fn apply(&self, e: &mut ExperimentPreset) {
        if let Some(v) = self.seed {
            e.seed = v;
        }
        if let Some(v) = self.n_t {
            e.n_t = v;
        }
        if let Some(v) = self.horizon {
            e.horizon_s = v;
        }
        if let Some(v) = &self.references {
            e.references = v.0.clone();
        }
        let s = &mut e.synthesis;
        if let Some(v) = self.gamma {
            s.gamma = v;
        }
        if let Some(v) = self.epsilon_scale {
            s.epsilon_scale = v;
        }
        if let Some(v) = self.lambda {
            s.lambda = v;
        }
        if let Some(v) = self.n_w {
            s.n_w = v;
            s.max_refinements = s.max_refinements.min(v.saturating_sub(1));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_argument() {
        assert_eq!(parse_grid("-0.2:0.1:5").unwrap().0, vec![-0.2, -0.1, 0.0, 0.1, 0.2]);
        assert!(parse_grid("1:2").is_err());
        assert!(parse_grid("0:0.1:0").is_err());
    }

    #[test]
    fn overrides_apply_to_every_preset() {
        let args = ExperimentArgs { preset: Some("paper-4.2".into()), seed: Some(9), gamma: Some(0.1), ..Default::default() };
        let exps = args.resolve(None).unwrap();
        assert_eq!(exps.len(), 2);
        assert!(exps.iter().all(|e| e.seed == 9 && e.synthesis.gamma == 0.1));
        assert!(args.resolve_one(None).is_err());
    }

    #[test]
    fn toml_and_json_configs_agree() {
        let dir = std::env::temp_dir().join(format!("ddrg-exp-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let exp = ddrg_core::presets::paper_4_1();
        fs::write(dir.join("e.toml"), toml::to_string(&exp).unwrap()).unwrap();
        fs::write(dir.join("e.json"), serde_json::to_string(&exp).unwrap()).unwrap();
        assert_eq!(load_experiment(&dir.join("e.toml")).unwrap(), exp);
        assert_eq!(load_experiment(&dir.join("e.json")).unwrap(), exp);
        fs::remove_dir_all(&dir).unwrap();
    }
}
