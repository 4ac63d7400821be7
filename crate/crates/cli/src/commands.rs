//! Subcommand implementations.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use continuity::convergence::{self, ConvergenceReport, TestConfig};
use continuity::io::{self, TrajectoryMeta};
use continuity::odenet::{self, Checkpoint, ModelKind, TrainConfig, TrainedModel};
use continuity::sindy::{self, FdOrder, SindyModel};
use continuity::systems::{self, SystemSpec};
use continuity::theory::{self, LinearSetting};
use continuity::{SchemeKind, Trajectory, VectorField};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::output::{self, usage, Manifest, Outcome, Outputs};
use crate::{
    DiscoverArgs, GenerateArgs, SindyArgs, TestArgs, TestFlags, TheoryArgs, TrainArgs, TrainFlags,
};

/// Regular-spacing tolerance for validation files.
const SPACING_RTOL: f64 = 1e-9;

/// Invocation details shared by every command.
pub struct Context {
    pub argv: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub force: bool,
}

impl Context {
    fn write_manifest(
        &self,
        command: &str,
        inputs: &[PathBuf],
        outputs: &Outputs,
        path: &Path,
        config: &ExperimentConfig,
    ) -> anyhow::Result<()> {
        let manifest = Manifest {
            command,
            args: &self.argv,
            version: env!("CARGO_PKG_VERSION"),
            library_version: continuity::VERSION,
            config_file: self.config_path.as_deref(),
            inputs: output::display_paths(inputs),
            outputs: output::display_paths(outputs.paths()),
            seed: self.seed,
            rng: systems::RNG_NAME,
            config,
        };
        io::save_json(&manifest, path)?;
        Ok(())
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    flag.or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| usage("no output location; pass --out or set output_dir in the config"))
}

fn out_file(
    flag: Option<PathBuf>,
    cfg: &ExperimentConfig,
    default_name: &str,
) -> anyhow::Result<PathBuf> {
    match flag {
        Some(p) => Ok(p),
        None => Ok(out_dir(None, cfg)?.join(default_name)),
    }
}

fn parse_flag<T: std::str::FromStr>(value: &str, what: &str) -> anyhow::Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| usage(format!("bad {what} `{value}`: {e}")))
}

fn load_trajectories(paths: &[PathBuf]) -> anyhow::Result<Vec<Trajectory>> {
    output::require_inputs(paths)?;
    paths
        .iter()
        .map(|p| io::load_trajectory(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn write_curve(points: &[(f64, f64)], path: &Path) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    io::write_curve_csv(points, BufWriter::new(file))?;
    Ok(())
}

fn apply_train_flags(cfg: &mut TrainConfig, flags: &TrainFlags) -> anyhow::Result<()> {
    if let Some(s) = &flags.scheme {
        cfg.scheme = parse_flag(s, "scheme")?;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = flags.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    let hidden = flags.hidden.or(match cfg.model_kind {
        ModelKind::Shallow { hidden_dim } => Some(hidden_dim),
        ModelKind::Linear => None,
    });
    match flags
        .model
        .as_deref()
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("linear") => {
            if flags.hidden.is_some() {
                return Err(usage("--hidden does not apply to the linear model"));
            }
            cfg.model_kind = ModelKind::Linear;
        }
        Some("shallow") => {
            cfg.model_kind = ModelKind::Shallow {
                hidden_dim: hidden.unwrap_or(50),
            }
        }
        Some(other) => {
            return Err(usage(format!(
                "unknown model `{other}`; use linear or shallow"
            )))
        }
        None => {
            if let Some(h) = flags.hidden {
                cfg.model_kind = ModelKind::Shallow { hidden_dim: h };
            }
        }
    }
    cfg.validate()?;
    Ok(())
}

/// Applies flags and takes `dt` from the validation spacing.
fn prepare_test_config(
    cfg: &mut TestConfig,
    flags: &TestFlags,
    vals: &[Trajectory],
) -> anyhow::Result<()> {
    if let Some(v) = flags.m {
        cfg.m = v;
    }
    if let Some(v) = flags.epsilon {
        cfg.epsilon = v;
    }
    if let Some(s) = &flags.metric {
        cfg.metric = parse_flag(s, "metric")?;
    }
    if let Some(v) = flags.stride {
        cfg.stride = v;
    }
    let first = vals.first().ok_or_else(|| usage("no validation files"))?;
    cfg.dt = first.regular_spacing(SPACING_RTOL).ok_or_else(|| {
        continuity::Error::Data("validation trajectory must be regularly spaced".into())
    })?;
    cfg.validate()?;
    Ok(())
}

fn parse_ic(text: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(|v| parse_flag::<f64>(v.trim(), "initial condition"))
        .collect()
}

pub fn generate(
    ctx: &Context,
    mut cfg: ExperimentConfig,
    a: GenerateArgs,
) -> anyhow::Result<Outcome> {
    if let Some(name) = &a.system {
        cfg.system = SystemSpec::by_name(name)?;
    }
    if let Some(v) = a.dt {
        cfg.sampling.dt = v;
    }
    if let Some(v) = a.n_points {
        cfg.sampling.n_points = v;
    }
    if let Some(v) = a.jitter {
        cfg.sampling.jitter_frac = v;
    }
    if let Some(v) = a.skip_prob {
        cfg.sampling.skip_prob = v;
    }
    if !a.ics.is_empty() {
        cfg.initial_conditions = a
            .ics
            .iter()
            .map(|s| parse_ic(s))
            .collect::<anyhow::Result<_>>()?;
    }
    cfg.system.validate()?;
    cfg.sampling.validate()?;
    if cfg.initial_conditions.is_empty() {
        return Err(usage("no initial conditions"));
    }
    let dir = out_dir(a.out, &cfg)?;

    let mut outputs = Outputs::default();
    let files: Vec<(PathBuf, PathBuf)> = (0..cfg.initial_conditions.len())
        .map(|i| {
            (
                outputs.add(dir.join(format!("traj_{i}.csv"))),
                outputs.add(dir.join(format!("traj_{i}.meta.json"))),
            )
        })
        .collect();
    let manifest = outputs.add(output::manifest_path_for_dir(&dir));
    outputs.check(ctx.force)?;

    for (i, (x0, (csv, meta))) in cfg.initial_conditions.iter().zip(&files).enumerate() {
        // each trajectory gets its own jitter stream
        let mut sampling = cfg.sampling;
        sampling.seed = cfg.sampling.seed.wrapping_add(i as u64);
        let traj = systems::irregular_trajectory(cfg.system, x0, &sampling)?;
        io::save_trajectory(&traj, csv)?;
        io::save_json(&TrajectoryMeta::new(cfg.system, x0.clone(), sampling), meta)?;
        println!("wrote {} ({} samples)", csv.display(), traj.len());
    }
    ctx.write_manifest("generate", &[], &outputs, &manifest, &cfg)?;
    Ok(Outcome::Success)
}

pub fn train(ctx: &Context, mut cfg: ExperimentConfig, a: TrainArgs) -> anyhow::Result<Outcome> {
    apply_train_flags(&mut cfg.train, &a.train)?;
    let trajs = load_trajectories(&a.data)?;
    let path = out_file(a.out, &cfg, "checkpoint.json")?;
    let mut outputs = Outputs::default();
    outputs.add(path.clone());
    let manifest = outputs.add(output::manifest_path_for_file(&path));
    outputs.check(ctx.force)?;

    let pairs = odenet::make_pairs(&trajs)?;
    let model = odenet::train(&pairs, &cfg.train)?;
    io::save_json(&Checkpoint::from(&model), &path)?;
    ctx.write_manifest("train", &a.data, &outputs, &manifest, &cfg)?;
    println!(
        "trained {} model on {} pairs: final loss {:e}",
        model.scheme_used,
        pairs.len(),
        model.final_loss
    );
    if model.diverged {
        eprintln!("training diverged; the checkpoint holds the best finite parameters");
        return Ok(Outcome::Diverged);
    }
    Ok(Outcome::Success)
}

/// The model side of a test run.
enum Subject {
    Network(TrainedModel),
    Sindy(SindyModel),
    Exact(systems::SystemField),
}

impl Subject {
    fn field(&self) -> &dyn VectorField {
        match self {
            Subject::Network(m) => m,
            Subject::Sindy(m) => m,
            Subject::Exact(f) => f,
        }
    }

    fn default_scheme(&self, cfg: &ExperimentConfig) -> SchemeKind {
        match self {
            Subject::Network(m) => m.scheme_used,
            _ => cfg.train.scheme,
        }
    }
}

/// Writes `report.json`, `report.csv` and one `traj_k.csv` per validation
/// trajectory into `dir`, registering them first.
struct ReportFiles {
    json: PathBuf,
    csv: PathBuf,
    per_traj: Vec<PathBuf>,
}

impl ReportFiles {
    fn plan(dir: &Path, n_vals: usize, outputs: &mut Outputs) -> Self {
        Self {
            json: outputs.add(dir.join("report.json")),
            csv: outputs.add(dir.join("report.csv")),
            per_traj: (0..n_vals)
                .map(|k| outputs.add(dir.join(format!("report_traj_{k}.csv"))))
                .collect(),
        }
    }

    fn write(&self, report: &ConvergenceReport) -> anyhow::Result<()> {
        io::save_json(report, &self.json)?;
        write_curve(&report.curve(), &self.csv)?;
        for (k, path) in self.per_traj.iter().enumerate() {
            write_curve(&report.trajectory_curve(k), path)?;
        }
        Ok(())
    }
}

fn print_report(report: &ConvergenceReport) {
    println!(
        "{:?} with {}: Error(dt) = {:e}, plateau = {:e}",
        report.verdict, report.scheme, report.error_at_dt, report.plateau_b
    );
}

pub fn test(ctx: &Context, mut cfg: ExperimentConfig, a: TestArgs) -> anyhow::Result<Outcome> {
    let mut inputs = a.val.clone();
    let subject = if let Some(p) = &a.source.checkpoint {
        output::require_inputs(std::slice::from_ref(p))?;
        inputs.push(p.clone());
        let ckpt: Checkpoint =
            io::load_json(p).with_context(|| format!("reading {}", p.display()))?;
        Subject::Network(TrainedModel::try_from(ckpt)?)
    } else if let Some(p) = &a.source.sindy_model {
        output::require_inputs(std::slice::from_ref(p))?;
        inputs.push(p.clone());
        Subject::Sindy(io::load_json(p).with_context(|| format!("reading {}", p.display()))?)
    } else {
        let name = a.source.exact_field.as_deref().unwrap_or_default();
        cfg.system = SystemSpec::by_name(name)?;
        Subject::Exact(systems::field(cfg.system))
    };
    let vals = load_trajectories(&a.val)?;
    prepare_test_config(&mut cfg.test, &a.test, &vals)?;
    let scheme = match &a.scheme {
        Some(s) => parse_flag(s, "scheme")?,
        None => subject.default_scheme(&cfg),
    };
    cfg.train.scheme = scheme;

    let dir = out_dir(a.out, &cfg)?;
    let mut outputs = Outputs::default();
    let files = ReportFiles::plan(&dir, vals.len(), &mut outputs);
    let manifest = outputs.add(output::manifest_path_for_dir(&dir));
    outputs.check(ctx.force)?;

    let report = convergence::run_convergence_test(subject.field(), scheme, &vals, &cfg.test)?;
    files.write(&report)?;
    ctx.write_manifest("test", &inputs, &outputs, &manifest, &cfg)?;
    print_report(&report);
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct DiscoverySummary<'a> {
    converged: bool,
    order_used: u32,
    attempts: &'a [convergence::Attempt],
    notes: &'a [String],
}

pub fn discover(
    ctx: &Context,
    mut cfg: ExperimentConfig,
    a: DiscoverArgs,
) -> anyhow::Result<Outcome> {
    apply_train_flags(&mut cfg.train, &a.train)?;
    if let Some(q) = a.quit_order {
        cfg.quit_order = q;
    }
    let trajs = load_trajectories(&a.data)?;
    let vals = load_trajectories(&a.val)?;
    prepare_test_config(&mut cfg.test, &a.test, &vals)?;

    let dir = out_dir(a.out, &cfg)?;
    let mut outputs = Outputs::default();
    let model_path = outputs.add(dir.join("model.json"));
    let summary_path = outputs.add(dir.join("discovery.json"));
    let files = ReportFiles::plan(&dir, vals.len(), &mut outputs);
    let manifest = outputs.add(output::manifest_path_for_dir(&dir));
    outputs.check(ctx.force)?;

    let pairs = odenet::make_pairs(&trajs)?;
    let found = convergence::discover(&pairs, &vals, &cfg.train, &cfg.test, cfg.quit_order)?;
    io::save_json(&Checkpoint::from(&found.model), &model_path)?;
    files.write(&found.report)?;
    let summary = DiscoverySummary {
        converged: found.converged,
        order_used: found.order_used,
        attempts: &found.attempts,
        notes: &found.notes,
    };
    io::save_json(&summary, &summary_path)?;
    let inputs: Vec<PathBuf> = a.data.iter().chain(&a.val).cloned().collect();
    ctx.write_manifest("discover", &inputs, &outputs, &manifest, &cfg)?;
    for note in &found.notes {
        eprintln!("{note}");
    }
    print_report(&found.report);
    Ok(if found.converged {
        Outcome::Success
    } else {
        Outcome::Exhausted
    })
}

pub fn sindy(ctx: &Context, mut cfg: ExperimentConfig, a: SindyArgs) -> anyhow::Result<Outcome> {
    if let Some(v) = a.degree {
        cfg.sindy.degree = v;
    }
    if let Some(v) = a.fd_order {
        cfg.sindy.fd_order = FdOrder::from_order(v)
            .ok_or_else(|| usage(format!("finite-difference order {v} is not 1, 2 or 4")))?;
    }
    if let Some(v) = a.threshold {
        cfg.sindy.threshold = v;
    }
    if let Some(v) = a.ridge {
        cfg.sindy.ridge = v;
    }
    let trajs = load_trajectories(&a.data)?;
    let path = out_file(a.out, &cfg, "sindy_model.json")?;
    let mut outputs = Outputs::default();
    outputs.add(path.clone());
    let manifest = outputs.add(output::manifest_path_for_file(&path));
    outputs.check(ctx.force)?;

    let model = sindy::fit_many(&trajs, &cfg.sindy)?;
    io::save_json(&model, &path)?;
    ctx.write_manifest("sindy", &a.data, &outputs, &manifest, &cfg)?;
    for eq in model.equations() {
        println!("{eq}");
    }
    Ok(Outcome::Success)
}

fn log_grid(h_min: f64, h_max: f64, n: usize) -> anyhow::Result<Vec<f64>> {
    if !(h_min > 0.0 && h_max > h_min && h_max.is_finite()) || n < 2 {
        return Err(usage("need 0 < h-min < h-max and at least two points"));
    }
    let (a, b) = (h_min.ln(), h_max.ln());
    Ok((0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect())
}

pub fn theory(ctx: &Context, mut cfg: ExperimentConfig, a: TheoryArgs) -> anyhow::Result<Outcome> {
    let t = &mut cfg.theory;
    if let Some(v) = a.lambda {
        t.lambda = v;
    }
    if let Some(v) = a.dt {
        t.dt = v;
    }
    if let Some(v) = a.p {
        t.p = v;
    }
    if let Some(v) = a.q {
        t.q = v;
    }
    if let Some(v) = a.epsilon {
        t.epsilon = v;
    }
    if let Some(v) = a.k {
        t.k = v;
    }
    if let Some(v) = a.m {
        t.m = v;
    }
    let setting = LinearSetting {
        epsilon: t.epsilon,
        k: t.k,
        ..LinearSetting::new(t.lambda, t.dt, t.p, t.q)
    };
    setting.validate()?;
    let hs = match (a.h_min, a.h_max, a.n_h) {
        (Some(lo), Some(hi), Some(n)) => log_grid(lo, hi, n)?,
        _ => convergence::h_grid(t.dt, t.m),
    };

    let path = out_file(a.out, &cfg, "theory.csv")?;
    let mut outputs = Outputs::default();
    outputs.add(path.clone());
    let manifest = outputs.add(output::manifest_path_for_file(&path));
    outputs.check(ctx.force)?;

    let curve = theory::analytic_curve(&setting, &hs)?;
    write_curve(&curve, &path)?;
    ctx.write_manifest("theory", &[], &outputs, &manifest, &cfg)?;
    println!(
        "w = {}, plateau = {:e}",
        setting.w_tilde()?,
        theory::plateau_b(&setting)?
    );
    Ok(Outcome::Success)
}
