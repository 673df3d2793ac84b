//! Commands behind the `bodyfit` binary.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use bodyfit::ablation::{run_ablation, AblationKind};
use bodyfit::diffcore;
use bodyfit::fitter::{self, FitTrace, IterationRecord, GD_STEP_GRID};
use bodyfit::io::{self, FrameFit};
use bodyfit::metrics;
use bodyfit::params::param_dim;
use bodyfit::trainer::{self, Instance, LogRow, PoseSampler, PoseSource, TrainConfig, TrainObserver};
use bodyfit::updatenet::{InputMode, UpdateNetwork};
use bodyfit::{Error, Keypoints2D, ModelParams, Real, SkeletonModel};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

/// Seed of the shape basis of the built-in skeleton. Kept apart from the run
/// seed so checkpoints stay usable across seeds.
pub const BUILTIN_SKELETON_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FitterKind {
    Learned,
    Gd,
    Lift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    F32,
    F64,
}

/// Everything a command needs; loaded from TOML, then patched by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub iters: usize,
    pub fitter: FitterKind,
    pub out: PathBuf,
    pub skeleton: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub keypoints: Option<PathBuf>,
    /// Poses written by generate-data.
    pub count: usize,
    /// Fixed step size for the gradient-descent fitter; grid search when absent.
    pub gd_step: Option<f64>,
    pub validation_count: usize,
    pub eval_count: usize,
    /// Joints hidden per evaluation frame.
    pub eval_hidden: usize,
    pub gradcheck_instances: usize,
    pub gradcheck_tolerance: f64,
    pub fd_step: f64,
    pub ablation: String,
    /// Training arithmetic; checkpoints are always stored as f64.
    pub precision: Precision,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iters: fitter::DEFAULT_ITERATIONS,
            fitter: FitterKind::Learned,
            out: PathBuf::from("out"),
            skeleton: None,
            checkpoint: None,
            dataset: None,
            keypoints: None,
            count: 1000,
            gd_step: None,
            validation_count: 200,
            eval_count: 1000,
            eval_hidden: 0,
            gradcheck_instances: 100,
            gradcheck_tolerance: 1e-4,
            fd_step: diffcore::GRADCHECK_STEP,
            ablation: "all".into(),
            precision: Precision::F32,
            train: TrainConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub iters: Option<usize>,
    pub fitter: Option<FitterKind>,
    pub ablation: Option<String>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("gradient check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    /// 2 configuration, 3 data, 4 divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e {
                Error::Config(_) | Error::InvalidStep(_) => 2,
                Error::Divergence { .. } => 4,
                Error::Parse { .. }
                | Error::Format(_)
                | Error::Io(_)
                | Error::Shape { .. }
                | Error::InvalidInput(_)
                | Error::InvalidCamera(_)
                | Error::InvalidSkeleton(_)
                | Error::DegenerateTarget
                | Error::UnfittableFrame { .. }
                | Error::DegenerateAlignment(_)
                | Error::EmptyReport => 3,
                _ => 1,
            },
            CliError::CheckFailed(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Core(Error::Config(msg.into()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| config_err(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| config_err(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(n) = overrides.iters {
            cfg.iters = n;
        }
        if let Some(f) = overrides.fitter {
            cfg.fitter = f;
        }
        if let Some(a) = &overrides.ablation {
            cfg.ablation = a.clone();
        }
        if let Some(o) = &overrides.out {
            cfg.out = o.clone();
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        for p in [&self.skeleton, &self.checkpoint, &self.dataset, &self.keypoints].into_iter().flatten() {
            if !p.exists() {
                return Err(config_err(format!("input path {} does not exist", p.display())));
            }
        }
        if let Some(l) = self.gd_step {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(config_err("gd_step must be a finite non-negative number"));
            }
        }
        if !(self.fd_step > 0.0) {
            return Err(config_err("fd_step must be positive"));
        }
        self.ablation.parse::<AblationKind>()?;
        Ok(())
    }

    fn out_file(&self, name: &str) -> CliResult<BufWriter<File>> {
        fs::create_dir_all(&self.out).map_err(|e| config_err(format!("output dir {} not writable: {e}", self.out.display())))?;
        let path = self.out.join(name);
        let f = File::create(&path).map_err(|e| config_err(format!("cannot create {}: {e}", path.display())))?;
        Ok(BufWriter::new(f))
    }

    fn required<'a>(&self, p: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
        p.as_deref().ok_or_else(|| config_err(format!("{what} path required for this command")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenerateData,
    Train,
    Fit,
    Eval,
    Gradcheck,
    Ablate,
}

/// Runs `command` and returns a human-readable summary.
pub fn run(command: Command, cfg: &RunConfig) -> CliResult<String> {
    cfg.validate()?;
    match command {
        Command::GenerateData => cmd_generate_data(cfg),
        Command::Train => cmd_train(cfg),
        Command::Fit => cmd_fit(cfg),
        Command::Eval => cmd_eval(cfg),
        Command::Gradcheck => cmd_gradcheck(cfg),
        Command::Ablate => cmd_ablate(cfg),
    }
}

pub fn load_skeleton(cfg: &RunConfig) -> CliResult<SkeletonModel<f64>> {
    match &cfg.skeleton {
        Some(p) => Ok(io::skeleton_from_toml(&fs::read_to_string(p).map_err(Error::from)?)?),
        None => Ok(SkeletonModel::human(BUILTIN_SKELETON_SEED)),
    }
}

fn pose_source(cfg: &RunConfig, model: &SkeletonModel<f64>) -> CliResult<PoseSource> {
    match &cfg.dataset {
        Some(p) => {
            let (header, poses) = io::read_dataset(BufReader::new(File::open(p).map_err(Error::from)?))?;
            if header.skeleton != model.name || header.joints as usize != model.joint_count() {
                return Err(Error::Format(format!(
                    "dataset was made for skeleton '{}' with {} joints, not '{}' with {}",
                    header.skeleton,
                    header.joints,
                    model.name,
                    model.joint_count()
                ))
                .into());
            }
            Ok(PoseSource::Dataset(Arc::new(poses)))
        }
        None => Ok(PoseSource::Sampler(PoseSampler::new(model.joint_count(), &cfg.train.sampler, cfg.seed))),
    }
}

fn load_net(cfg: &RunConfig, model: &SkeletonModel<f64>) -> CliResult<UpdateNetwork<f64>> {
    let path = cfg.required(&cfg.checkpoint, "checkpoint")?;
    let net = UpdateNetwork::<f64>::load(BufReader::new(File::open(path).map_err(Error::from)?))?;
    let dim = param_dim(model.joint_count());
    if net.architecture().output != dim {
        return Err(Error::Shape { expected: dim, got: net.architecture().output }.into());
    }
    Ok(net)
}

fn cmd_generate_data(cfg: &RunConfig) -> CliResult<String> {
    let model = load_skeleton(cfg)?;
    let sampler = PoseSampler::new(model.joint_count(), &cfg.train.sampler, cfg.seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let poses: Vec<_> = (0..cfg.count).map(|_| sampler.sample(&mut rng)).collect();
    io::write_dataset(cfg.out_file("poses.bin")?, &model.name, model.joint_count(), cfg.seed, &poses)?;
    Ok(format!("wrote {} poses to {}", poses.len(), cfg.out.join("poses.bin").display()))
}

struct CheckpointWriter {
    dir: PathBuf,
    final_step: usize,
    written: Vec<PathBuf>,
}

impl<T: Real> TrainObserver<T> for CheckpointWriter {
    fn on_checkpoint(&mut self, step: usize, net: &UpdateNetwork<T>) -> bodyfit::Result<()> {
        if step == self.final_step {
            return Ok(());
        }
        let path = self.dir.join(format!("checkpoint-{step:06}.bin"));
        net.save(BufWriter::new(File::create(&path)?))?;
        self.written.push(path);
        Ok(())
    }
}

fn train_config_for(cfg: &RunConfig) -> CliResult<TrainConfig> {
    let mut tc = cfg.train.clone();
    tc.seed = cfg.seed;
    match cfg.fitter {
        FitterKind::Learned => {}
        FitterKind::Lift => {
            tc.input_mode = InputMode::TargetOnly;
            tc.unroll = 1;
        }
        FitterKind::Gd => return Err(config_err("the gradient-descent fitter has nothing to train")),
    }
    Ok(tc)
}

fn train_in<T: Real>(
    tc: &TrainConfig,
    model: &SkeletonModel<f64>,
    source: &PoseSource,
    observer: &mut CheckpointWriter,
) -> (UpdateNetwork<f64>, Vec<LogRow>, Option<Error>) {
    struct Logged<'a> {
        inner: &'a mut CheckpointWriter,
        rows: Vec<LogRow>,
    }
    impl<T: Real> TrainObserver<T> for Logged<'_> {
        fn on_step(&mut self, row: &LogRow) {
            self.rows.push(row.clone());
        }
        fn on_checkpoint(&mut self, step: usize, net: &UpdateNetwork<T>) -> bodyfit::Result<()> {
            self.inner.on_checkpoint(step, net)
        }
    }
    let mut net = UpdateNetwork::<T>::new(tc.architecture(), tc.seed).with_input_mode(tc.input_mode);
    let mut logged = Logged { inner: observer, rows: Vec::new() };
    let err = trainer::train(&mut net, tc, &model.cast::<T>(), source, &mut logged).err();
    (net.cast::<f64>(), logged.rows, err)
}

fn cmd_train(cfg: &RunConfig) -> CliResult<String> {
    let model = load_skeleton(cfg)?;
    let source = pose_source(cfg, &model)?;
    let tc = train_config_for(cfg)?;
    fs::create_dir_all(&cfg.out).map_err(|e| config_err(format!("output dir {} not writable: {e}", cfg.out.display())))?;
    let mut writer = CheckpointWriter { dir: cfg.out.clone(), final_step: tc.steps, written: Vec::new() };
    let (net, rows, err) = match cfg.precision {
        Precision::F32 => train_in::<f32>(&tc, &model, &source, &mut writer),
        Precision::F64 => train_in::<f64>(&tc, &model, &source, &mut writer),
    };
    io::write_metrics(cfg.out_file("metrics.csv")?, cfg.seed, &rows)?;
    let effective = RunConfig { train: tc.clone(), ..cfg.clone() };
    let text = toml::to_string(&effective).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(cfg.out.join("run.toml"), text).map_err(Error::from)?;
    if let Some(e) = err {
        // the net holds the last weights that were still finite
        net.save(cfg.out_file("checkpoint-last-good.bin")?)?;
        return Err(e.into());
    }
    net.save(cfg.out_file("checkpoint.bin")?)?;
    let last = rows.last().map(|r| r.train_loss).unwrap_or(f64::NAN);
    Ok(format!(
        "trained {} steps (final train loss {last:.4}); checkpoint {}",
        rows.len(),
        cfg.out.join("checkpoint.bin").display()
    ))
}

/// The fitter chosen by the config, ready to run on targets.
pub enum Fitter {
    Learned(UpdateNetwork<f64>),
    Gd(f64),
    Lift(UpdateNetwork<f64>),
}

impl Fitter {
    pub fn from_config(cfg: &RunConfig, model: &SkeletonModel<f64>) -> CliResult<Self> {
        Ok(match cfg.fitter {
            FitterKind::Learned => Fitter::Learned(load_net(cfg, model)?),
            FitterKind::Lift => Fitter::Lift(load_net(cfg, model)?),
            FitterKind::Gd => match cfg.gd_step {
                Some(step) => Fitter::Gd(step),
                None => {
                    let source = pose_source(cfg, model)?;
                    let validation = trainer::heldout_set(&source, &cfg.train, model, cfg.validation_count, cfg.seed ^ VALIDATION_SALT, 0.0)?;
                    let (best, _) = fitter::grid_search_gd_step(&validation, model, &GD_STEP_GRID, cfg.iters)?;
                    Fitter::Gd(best)
                }
            },
        })
    }

    pub fn fit(&self, target: &Keypoints2D<f64>, model: &SkeletonModel<f64>, iters: usize) -> fitter::FitResult<f64> {
        match self {
            Fitter::Learned(net) => fitter::fit_learned(net, target, model, iters),
            Fitter::Gd(step) => fitter::fit_vanilla_gd(target, model, *step, iters),
            Fitter::Lift(net) => {
                let start = Instant::now();
                let zero = ModelParams::zeros(model.joint_count());
                let lifted = || -> bodyfit::Result<FitTrace<f64>> {
                    let p = fitter::fit_direct_lifting(net, target, model)?;
                    let delta = p.flatten().iter().map(|v| v * v).sum::<f64>().sqrt();
                    let mut records = Vec::with_capacity(2);
                    for (params, delta_norm) in [(zero, 0.0), (p, delta)] {
                        let loss = bodyfit::reproj_loss(&params, target, model)?;
                        records.push(IterationRecord { params, loss, delta_norm, wall_us: start.elapsed().as_micros() as u64 });
                    }
                    Ok(FitTrace { records })
                };
                lifted().map_err(|error| fitter::FitFailure { error, trace: FitTrace { records: Vec::new() } })
            }
        }
    }
}

/// Salt separating the step-size validation split from other streams.
pub const VALIDATION_SALT: u64 = 0x7a11_da7e;

fn cmd_fit(cfg: &RunConfig) -> CliResult<String> {
    let model = load_skeleton(cfg)?;
    let path = cfg.required(&cfg.keypoints, "keypoints")?;
    let frames = io::read_keypoints(BufReader::new(File::open(path).map_err(Error::from)?), model.joint_count())?;
    let fitter = if frames.is_empty() { None } else { Some(Fitter::from_config(cfg, &model)?) };
    let mut rows = Vec::with_capacity(frames.len());
    let mut traces = Vec::new();
    let mut diverged = None;
    for f in &frames {
        let fitter = fitter.as_ref().expect("frames present");
        match fitter.fit(&f.keypoints, &model, cfg.iters) {
            Ok(trace) => {
                let last = trace.records.last().expect("trace holds the initial state");
                rows.push((f.frame, FrameFit::Fitted { loss: last.loss, params: last.params.clone() }));
                traces.push((f.frame, trace));
            }
            Err(failure) => {
                let reason = match &failure.error {
                    Error::UnfittableFrame { visible, .. } => format!("unfittable ({visible} visible joints)"),
                    other => other.to_string(),
                };
                if failure.error.is_divergence() && diverged.is_none() {
                    diverged = Some(failure.error);
                }
                rows.push((f.frame, FrameFit::Skipped { reason }));
                traces.push((f.frame, failure.trace));
            }
        }
    }
    io::write_fit_params(cfg.out_file("fit.csv")?, cfg.seed, param_dim(model.joint_count()), &rows)?;
    io::write_traces(cfg.out_file("trace.csv")?, cfg.seed, &traces)?;
    if let Some(e) = diverged {
        return Err(e.into());
    }
    let skipped = rows.iter().filter(|r| matches!(r.1, FrameFit::Skipped { .. })).count();
    Ok(format!("fitted {} frames, skipped {skipped}; results in {}", rows.len() - skipped, cfg.out.display()))
}

/// Held-out evaluation set for `cfg`, with `eval_hidden` joints hidden per frame.
pub fn eval_set(cfg: &RunConfig, model: &SkeletonModel<f64>) -> CliResult<Vec<Instance<f64>>> {
    let source = pose_source(cfg, model)?;
    let mut set = trainer::heldout_set(&source, &cfg.train, model, cfg.eval_count, cfg.seed ^ trainer::HELDOUT_SALT, 0.0)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    for (_, target) in set.iter_mut() {
        trainer::hide_random_joints(target, cfg.eval_hidden, &mut rng)?;
    }
    Ok(set)
}

fn cmd_eval(cfg: &RunConfig) -> CliResult<String> {
    let model = load_skeleton(cfg)?;
    let set = eval_set(cfg, &model)?;
    let fitter = Fitter::from_config(cfg, &model)?;
    let mut preds = Vec::with_capacity(set.len());
    let mut gts = Vec::with_capacity(set.len());
    for (gt, target) in &set {
        let trace = fitter.fit(target, &model, cfg.iters).map_err(Error::from)?;
        preds.push(trace.records.iter().map(|r| bodyfit::forward_kinematics(&model, &r.params.pose_shape)).collect::<bodyfit::Result<Vec<_>>>()?);
        gts.push(bodyfit::forward_kinematics(&model, &gt.pose_shape)?);
    }
    let report = metrics::evaluate(&preds, &gts)?;
    io::write_report(cfg.out_file("report.csv")?, cfg.seed, &report)?;
    let mut summary = format!("# bodyfit eval seed={}\n", cfg.seed);
    if let Fitter::Gd(step) = fitter {
        summary.push_str(&format!("gd step size: {step}\n"));
    }
    summary.push_str(&io::report_summary(&report));
    fs::write(cfg.out.join("summary.txt"), &summary).map_err(Error::from)?;
    Ok(summary)
}

fn cmd_gradcheck(cfg: &RunConfig) -> CliResult<String> {
    let model = load_skeleton(cfg)?;
    let start = Instant::now();
    let report = diffcore::gradcheck(&model, cfg.gradcheck_instances, cfg.seed, cfg.fd_step)?;
    let pass = report.passes(cfg.gradcheck_tolerance);
    let text = format!(
        "# bodyfit gradcheck seed={}\ninstances: {}\nmax relative error: {:e}\nworst instance: {}\nworst coordinate: {}\ntolerance: {:e}\nresult: {}\nelapsed_ms: {}\n",
        cfg.seed,
        cfg.gradcheck_instances,
        report.max_error,
        report.worst_instance,
        report.worst_coordinate,
        cfg.gradcheck_tolerance,
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_millis()
    );
    fs::create_dir_all(&cfg.out).map_err(|e| config_err(format!("output dir {} not writable: {e}", cfg.out.display())))?;
    fs::write(cfg.out.join("gradcheck.txt"), &text).map_err(Error::from)?;
    if pass {
        Ok(text)
    } else {
        Err(CliError::CheckFailed(text))
    }
}

fn cmd_ablate(cfg: &RunConfig) -> CliResult<String> {
    let model = load_skeleton(cfg)?;
    let kind: AblationKind = cfg.ablation.parse()?;
    let source = pose_source(cfg, &model)?;
    let heldout = trainer::heldout_set(&source, &cfg.train, &model, cfg.eval_count, cfg.seed ^ trainer::HELDOUT_SALT, 0.0)?;
    let mut tc = cfg.train.clone();
    tc.seed = cfg.seed;
    let report = |r: &bodyfit::ablation::AblationRow| eprintln!("{} {}: {:.2}", r.table, r.variant, r.heldout_pa_mpjpe);
    let rows = match cfg.precision {
        Precision::F32 => run_ablation::<f32>(kind, &tc, &model, &source, &heldout, report)?,
        Precision::F64 => run_ablation::<f64>(kind, &tc, &model, &source, &heldout, report)?,
    };
    io::write_ablation(cfg.out_file("ablation.csv")?, cfg.seed, &rows)?;
    let mut text = String::from("table,variant,heldout_pa_mpjpe\n");
    for r in &rows {
        text.push_str(&format!("{},{},{:.3}\n", r.table, r.variant, r.heldout_pa_mpjpe));
    }
    Ok(text)
}
