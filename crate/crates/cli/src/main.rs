//! `ddrg`: data generation, fitting, validation, governing and comparison
//! against the exact LTI admissible sets. Every command writes into a run
//! directory and records its outputs in `manifest.json`.

mod experiment;
mod manifest;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddrg_core::baseline::{compare_membership, lti_oracle, MoasResult, ORACLE_TOL};
use ddrg_core::presets::{bicycle_edge_scenario, bicycle_overtake_scenario, lti_scenario, ExperimentPreset};
use ddrg_core::*;
use serde::Serialize;
use serde_json::json;

use experiment::{ExperimentArgs, EXPERIMENT_FILE};
use manifest::{FileRecord, RunManifest, RunRecord};

pub type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

const EXIT_INFEASIBLE: i32 = 2;
const EXIT_VIOLATIONS: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "ddrg", version, about = "Data-driven invariant sets and reference governors")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate trajectories under constant references.
    GenData {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Expected plant kind, checked against the experiment.
        #[arg(long, value_parser = ["lti", "bicycle"])]
        plant: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one invariant set per reference.
    Fit {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe every set of a bundle for one-step invariance.
    Check {
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value_t = 10_000)]
        probes: usize,
        #[arg(long, default_value_t = 1)]
        probe_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a closed-loop scenario under the governor.
    Govern {
        /// Bundles in scenario order (repeat for scenarios that switch bundles).
        #[arg(long, required = true)]
        bundle: Vec<PathBuf>,
        /// lti, bicycle-edge, bicycle-overtake, or a scenario JSON file.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact admissible sets of the LTI plant.
    Baseline {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid comparison of a bundle (or another oracle file) against an oracle.
    Compare {
        #[arg(long, required_unless_present = "candidate_oracle")]
        bundle: Option<PathBuf>,
        #[arg(long, conflicts_with = "bundle")]
        candidate_oracle: Option<PathBuf>,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long, default_value_t = 200)]
        resolution: usize,
        /// Half-widths of the comparison box, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 6.0])]
        half_widths: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify manifests under a run directory and summarize the results found.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

/// Bookkeeping for one command invocation.
struct Run {
    dir: PathBuf,
    record: RunRecord,
}

impl Run {
    fn start(dir: &Path, command: &str) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            record: RunRecord {
                command: command.into(),
                args: std::env::args().skip(1).collect(),
                inputs: vec![],
                config: serde_json::Value::Null,
                seeds: vec![],
                started_unix: manifest::now_unix(),
                finished_unix: 0.0,
                exit_code: 0,
                files: vec![],
            },
        })
    }

    fn input(&mut self, path: &Path) -> CliResult<()> {
        let (sha256, bytes) = manifest::hash_file(path)?;
        self.record.inputs.push(FileRecord { path: path.display().to_string(), sha256, bytes });
        Ok(())
    }

    fn experiments(&mut self, exps: &[ExperimentPreset]) -> CliResult<()> {
        self.record.config = serde_json::to_value(exps)?;
        self.record.seeds = exps.iter().map(|e| e.seed).collect();
        Ok(())
    }

    fn path(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn wrote(&mut self, path: &Path) -> CliResult<()> {
        self.record.files.push(manifest::record(&self.dir, path)?);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> CliResult<PathBuf> {
        let p = self.path(rel)?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(&p)?), value)?;
        self.wrote(&p)?;
        Ok(p)
    }

    fn finish(mut self, code: i32) -> CliResult<i32> {
        self.record.finished_unix = manifest::now_unix();
        self.record.exit_code = code;
        let mut m = RunManifest::load_or_new(&self.dir)?;
        m.runs.push(self.record);
        m.save(&self.dir)?;
        Ok(code)
    }
}

fn plant_kind(p: &PlantConfig) -> &'static str {
    match p {
        PlantConfig::Lti(_) => "lti",
        PlantConfig::Bicycle(_) => "bicycle",
    }
}

fn gen_data(exp: &ExperimentArgs, plant: Option<&str>, out: &Path) -> CliResult<i32> {
    let exps = exp.resolve(None)?;
    if let Some(kind) = plant {
        if let Some(e) = exps.iter().find(|e| plant_kind(&e.plant) != kind) {
            return Err(format!("experiment {} uses the {} plant, not {kind}", e.name, plant_kind(&e.plant)).into());
        }
    }
    let mut run = Run::start(out, "gen-data")?;
    run.experiments(&exps)?;
    for e in &exps {
        let prefix = if exps.len() > 1 { format!("{}/", e.name) } else { String::new() };
        let ts = e.generate()?;
        let json = run.path(&format!("{prefix}dataset.json"))?;
        ts.save_json(&json)?;
        run.wrote(&json)?;
        let csv = run.path(&format!("{prefix}dataset.csv"))?;
        ts.write_csv(BufWriter::new(File::create(&csv)?))?;
        run.wrote(&csv)?;
        run.json(&format!("{prefix}{EXPERIMENT_FILE}"), e)?;
        let len = ts.entries.first().and_then(|r| r.trajectories.first()).map_or(0, Vec::len);
        println!("{}: {} references x {} trajectories x {} samples", e.name, ts.entries.len(), e.n_t, len);
    }
    run.finish(0)
}

#[derive(Serialize)]
struct FitSummary {
    experiment: String,
    n_references: usize,
    n_sets: usize,
    n_excluded: usize,
    nominal: bool,
}

fn write_feasibility(path: &Path, adm: &AdmissibleSet) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["r_bar", "status", "worst_decrease", "min_eig_lower", "min_eig_upper", "reason"])?;
    let mut rows: Vec<(f64, Vec<String>)> = Vec::new();
    for s in &adm.sets {
        let f = s.feasibility_report.as_ref();
        let num = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:e}"));
        rows.push((
            s.r_bar,
            vec![
                format!("{:?}", s.r_bar),
                if f.is_some_and(|f| f.passed) { "feasible" } else { "unverified" }.into(),
                num(f.map(|f| f.worst_decrease)),
                num(f.map(|f| f.min_eig_lower)),
                num(f.map(|f| f.min_eig_upper)),
                String::new(),
            ],
        ));
    }
    for e in &adm.excluded {
        rows.push((
            e.r_bar,
            vec![format!("{:?}", e.r_bar), "excluded".into(), String::new(), String::new(), String::new(), e.reason.clone()],
        ));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (_, r) in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn fit(dataset: &Path, exp: &ExperimentArgs, out: &Path) -> CliResult<i32> {
    let e = exp.resolve_one(Some(dataset))?;
    let mut run = Run::start(out, "fit")?;
    run.input(dataset)?;
    run.experiments(std::slice::from_ref(&e))?;
    let ts = TrajectorySet::load_json(dataset)?;
    let adm = match e.fit(&ts) {
        Ok(a) => a,
        Err(Error::NoAdmissibleReference) => {
            eprintln!("no reference admits an invariant set");
            return run.finish(EXIT_INFEASIBLE);
        }
        Err(err) => return Err(err.into()),
    };
    let bundle = run.path("bundle.json")?;
    adm.save_json(&bundle)?;
    run.wrote(&bundle)?;
    let feas = run.path("feasibility.csv")?;
    write_feasibility(&feas, &adm)?;
    run.wrote(&feas)?;
    run.json(EXPERIMENT_FILE, &e)?;
    let summary = FitSummary {
        experiment: e.name.clone(),
        n_references: ts.entries.len(),
        n_sets: adm.sets.len(),
        n_excluded: adm.excluded.len(),
        nominal: adm.nominal,
    };
    run.json("fit.json", &summary)?;
    println!(
        "{}: {} sets, {} excluded{}",
        e.name,
        summary.n_sets,
        summary.n_excluded,
        if adm.nominal { " (nominal, no tightening)" } else { "" }
    );
    run.finish(0)
}

#[derive(Serialize, serde::Deserialize)]
struct CheckReport {
    n_sets: usize,
    n_probe: usize,
    sets_with_violations: Vec<f64>,
    n_violations: usize,
    reports: Vec<InvarianceReport>,
}

fn check(bundle: &Path, exp: &ExperimentArgs, probes: usize, seed: u64, out: &Path) -> CliResult<i32> {
    let e = exp.resolve_one(Some(bundle))?;
    let mut run = Run::start(out, "check")?;
    run.input(bundle)?;
    run.experiments(std::slice::from_ref(&e))?;
    run.record.seeds.push(seed);
    let adm = AdmissibleSet::load_json(bundle)?;
    let plant = e.plant.build()?;
    let reports = adm
        .sets
        .iter()
        .map(|s| validate_invariance(s, &adm.dictionary, plant.as_ref(), probes, seed))
        .collect::<Result<Vec<_>>>()?;
    let bad: Vec<f64> = reports.iter().filter(|r| r.n_violations > 0).map(|r| r.r_bar).collect();
    let rep = CheckReport {
        n_sets: reports.len(),
        n_probe: probes,
        n_violations: reports.iter().map(|r| r.n_violations).sum(),
        sets_with_violations: bad,
        reports,
    };
    run.json("check.json", &rep)?;
    println!("{} sets probed, {} with violations ({} violating probes)", rep.n_sets, rep.sets_with_violations.len(), rep.n_violations);
    let code = if rep.n_violations > 0 { EXIT_VIOLATIONS } else { 0 };
    run.finish(code)
}

fn scenario_by_name(s: &str) -> CliResult<Scenario> {
    Ok(match s {
        "lti" => lti_scenario(),
        "bicycle-edge" => bicycle_edge_scenario(),
        "bicycle-overtake" => bicycle_overtake_scenario(),
        path => serde_json::from_str(&fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?)?,
    })
}

#[derive(Serialize)]
struct GovernSummary {
    steps: usize,
    max_abs_output: f64,
    max_g: f64,
    fallbacks: usize,
    fallbacks_after_first_step: usize,
    aborted: Option<String>,
}

fn govern_cmd(bundles: &[PathBuf], scenario: &str, out: &Path) -> CliResult<i32> {
    let sc = scenario_by_name(scenario)?;
    sc.validate()?;
    let mut run = Run::start(out, "govern")?;
    let mut bank = Vec::new();
    for b in bundles {
        run.input(b)?;
        bank.push(AdmissibleSet::load_json(b)?);
    }
    run.record.config = serde_json::to_value(&sc)?;
    run.json("scenario.json", &sc)?;
    let log = closed_loop_simulate(&sc, &bank)?;
    let csv = run.path("log.csv")?;
    log.write_csv(BufWriter::new(File::create(&csv)?))?;
    run.wrote(&csv)?;
    let summary = GovernSummary {
        steps: log.records.len(),
        max_abs_output: log.max_abs_output(),
        max_g: log.max_g(),
        fallbacks: log.fallbacks_after(0),
        fallbacks_after_first_step: log.fallbacks_after(1),
        aborted: log.aborted.clone(),
    };
    run.json("summary.json", &summary)?;
    println!(
        "{} steps, max |y| {:.4}, max g {:.4}, {} fallbacks",
        summary.steps, summary.max_abs_output, summary.max_g, summary.fallbacks
    );
    let code = if summary.max_g > 1.0 + 1e-6 || summary.aborted.is_some() { EXIT_VIOLATIONS } else { 0 };
    run.finish(code)
}

fn baseline(exp: &ExperimentArgs, out: &Path) -> CliResult<i32> {
    let e = exp.resolve_one(None)?;
    let PlantConfig::Lti(params) = e.plant else {
        return Err("the exact admissible sets are only available for the LTI plant".into());
    };
    let mut run = Run::start(out, "baseline")?;
    run.experiments(std::slice::from_ref(&e))?;
    let oracle = lti_oracle(&params, &e.references)?;
    run.json("oracle.json", &oracle)?;
    let nonempty = oracle.iter().filter(|o| !o.empty).count();
    println!("{} references, {} with nonempty admissible sets", oracle.len(), nonempty);
    run.finish(0)
}

fn load_oracle(path: &Path) -> CliResult<Vec<MoasResult>> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

#[allow(clippy::too_many_arguments)]
fn compare(
    bundle: Option<&Path>,
    candidate: Option<&Path>,
    baseline: &Path,
    resolution: usize,
    half_widths: &[f64],
    out: &Path,
) -> CliResult<i32> {
    let mut run = Run::start(out, "compare")?;
    run.input(baseline)?;
    let oracle = load_oracle(baseline)?;
    let region = BoxDomain::symmetric(half_widths)?;
    run.record.config = json!({ "resolution": resolution, "half_widths": half_widths });
    let rep = match (bundle, candidate) {
        (Some(b), _) => {
            run.input(b)?;
            compare_admissible_sets(&AdmissibleSet::load_json(b)?, &oracle, &region, resolution)?
        }
        (None, Some(c)) => {
            run.input(c)?;
            let other = load_oracle(c)?;
            let refs: Vec<f64> = other.iter().map(|o| o.r_bar).collect();
            let grid = region.grid(resolution);
            compare_membership(
                &refs,
                |i, g, _| !other[i].empty && other[i].polytope.contains(&grid[g], ORACLE_TOL),
                &oracle,
                &region,
                resolution,
            )?
        }
        (None, None) => return Err("--bundle or --candidate-oracle is required".into()),
    };
    run.json("comparison.json", &rep)?;
    let csv = run.path("comparison.csv")?;
    rep.write_csv(BufWriter::new(File::create(&csv)?))?;
    run.wrote(&csv)?;
    println!("{} false positives, coverage {:.4}", rep.false_positives, rep.coverage);
    run.finish(0)
}

fn read_json(path: &Path) -> Option<serde_json::Value> {
    serde_json::from_reader(std::io::BufReader::new(File::open(path).ok()?)).ok()
}

fn report(root: &Path) -> CliResult<i32> {
    let runs = manifest::find_runs(root)?;
    if runs.is_empty() {
        return Err(format!("no {} under {}", manifest::MANIFEST, root.display()).into());
    }
    let mut entries = Vec::new();
    let mut broken = 0;
    for dir in &runs {
        let m = RunManifest::load_or_new(dir)?;
        let bad = manifest::verify(dir, &m);
        broken += bad.len();
        let rel = dir.strip_prefix(root).unwrap_or(dir).display().to_string();
        let mut results = serde_json::Map::new();
        if let Some(v) = read_json(&dir.join("fit.json")) {
            results.insert("fit".into(), v);
        }
        if let Some(v) = read_json(&dir.join("summary.json")) {
            results.insert("govern".into(), v);
        }
        if let Some(v) = read_json(&dir.join("check.json")) {
            results.insert(
                "check".into(),
                json!({ "n_sets": v["n_sets"], "n_violations": v["n_violations"], "sets_with_violations": v["sets_with_violations"] }),
            );
        }
        if let Some(v) = read_json(&dir.join("comparison.json")) {
            results.insert("compare".into(), json!({ "false_positives": v["false_positives"], "coverage": v["coverage"] }));
        }
        let commands: Vec<String> = m.runs.iter().map(|r| format!("{} (exit {})", r.command, r.exit_code)).collect();
        println!("{}: {}{}", if rel.is_empty() { "." } else { &rel }, commands.join(", "), if bad.is_empty() { String::new() } else { format!(", {} files changed", bad.len()) });
        for (k, v) in &results {
            println!("  {k}: {v}");
        }
        entries.push(json!({ "dir": rel, "commands": commands, "changed_files": bad, "results": results }));
    }
    let mut run = Run::start(root, "report")?;
    run.json("report.json", &entries)?;
    run.finish(if broken > 0 { 1 } else { 0 })
}

fn dispatch(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::GenData { exp, plant, out } => gen_data(&exp, plant.as_deref(), &out),
        Command::Fit { dataset, exp, out } => fit(&dataset, &exp, &out),
        Command::Check { bundle, exp, probes, probe_seed, out } => check(&bundle, &exp, probes, probe_seed, &out),
        Command::Govern { bundle, scenario, out } => govern_cmd(&bundle, &scenario, &out),
        Command::Baseline { exp, out } => baseline(&exp, &out),
        Command::Compare { bundle, candidate_oracle, baseline, resolution, half_widths, out } => compare(
            bundle.as_deref(),
            candidate_oracle.as_deref(),
            &baseline,
            resolution,
            &half_widths,
            &out,
        ),
        Command::Report { run } => report(&run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
