//! Command-line binding: JSON config resolution with dotted-path overrides,
//! and the train / eval / noise-sweep / gradcheck / orthcheck / paramcount
//! subcommands.
//!
//! Every run prints its resolved config and seed to standard error, so any
//! result can be reproduced from the log alone. Data goes to `--out` or
//! standard output; diagnostics go to standard error; the exit status is 0
//! exactly when the subcommand's contract holds.

use crate::data::{generate_synthetic, Dataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Model, ModelConfig, ParamMode};
use crate::orthogonal::{
    self, cayley, cayley_inverse, matrix_exp, orthogonality_error, retract, skew_symmetrize,
    tangent_project, OrthogonalMatrix,
};
use crate::training::{
    bench_orthogonality_paths, evaluate, gradcheck_token_model, train, write_metrics_csv,
    OptimizerKind, TrainConfig,
};
use crate::data::Rng;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Gaussian noise sweep applied by `noise-sweep`, clean baseline included.
pub const NOISE_SWEEP_STDS: [f64; 5] = [0.0, 0.05, 0.08, 0.1, 1.0];

#[derive(Debug, Parser)]
#[command(
    name = "orthoattn",
    version,
    about = "Orthogonally parameterized attention at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the synthetic stripe task; write per-epoch metrics CSV.
    Train(RunArgs),
    /// Train, then print test accuracy (optionally under eval.noise_std).
    Eval(RunArgs),
    /// Train, then evaluate across the noise sweep; one CSV row per std.
    NoiseSweep(RunArgs),
    /// Finite-difference check of the training-loss gradient per mode.
    Gradcheck(GradcheckArgs),
    /// Run the orthogonality invariant suite.
    Orthcheck(OrthcheckArgs),
    /// Print parameter accounting and per-step costs of both update paths.
    Paramcount(RunArgs),
}

#[derive(Debug, Args, Default, Clone)]
pub struct RunArgs {
    /// JSON config file. Omitting the flag means full defaults; naming a
    /// missing file is an error.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set model.heads=2`. Repeatable; applied
    /// in order after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Write CSV data here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Shorthand for `--set seed=<N>`, applied last.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shorthand for `--set model.mode=<MODE>`, applied last.
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Args, Clone)]
pub struct GradcheckArgs {
    /// Check a single mode (plain|cayley|exp|penalty); default is all four.
    #[arg(long)]
    pub mode: Option<String>,
    /// Hidden width of the two-token check model.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args, Clone)]
pub struct OrthcheckArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// Synthetic-data knobs for the CLI runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Pixel noise used when generating the dataset.
    pub noise_std: f64,
    /// When set, dump the generated datasets as IDX files into this
    /// directory before training.
    pub dump_idx_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_per_class: 100,
            test_per_class: 50,
            noise_std: 0.1,
            dump_idx_dir: None,
        }
    }
}

/// Evaluation knobs for `eval`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub noise_std: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { noise_std: 0.0 }
    }
}

/// The full JSON config: training hyperparameters plus CLI data/eval knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub penalty_lambda: f64,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            model: t.model,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            optimizer: t.optimizer,
            penalty_lambda: t.penalty_lambda,
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            optimizer: self.optimizer,
            penalty_lambda: self.penalty_lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.data.train_per_class == 0 || self.data.test_per_class == 0 {
            return Err(Error::Config {
                key: "data.train_per_class".into(),
                message: "per-class sample counts must be positive".into(),
            });
        }
        if self.eval.noise_std < 0.0 {
            return Err(Error::Config {
                key: "eval.noise_std".into(),
                message: "noise std must be >= 0".into(),
            });
        }
        Ok(())
    }
}

/// Loads the JSON config (defaults when `path` is `None`) and applies dotted
/// `key=value` overrides last. Unknown keys anywhere are rejected.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut root: Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                Error::InvalidArgument(format!("cannot read config {}: {e}", p.display()))
            })?;
            serde_json::from_str(&text)?
        }
        None => Value::Object(Default::default()),
    };
    if !root.is_object() {
        return Err(Error::Config {
            key: path
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "<config>".into()),
            message: "config must be a JSON object".into(),
        });
    }
    for entry in overrides {
        apply_override(&mut root, entry)?;
    }
    let config: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config {
        key: "<config>".into(),
        message: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

fn apply_override(root: &mut Value, entry: &str) -> Result<()> {
    let (key_path, raw_value) = entry.split_once('=').ok_or_else(|| Error::Config {
        key: entry.to_string(),
        message: "override must look like key=value".into(),
    })?;
    let value: Value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| Value::String(raw_value.to_string()));
    let mut cursor = root;
    let segments: Vec<&str> = key_path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        let map = cursor.as_object_mut().ok_or_else(|| Error::Config {
            key: key_path.to_string(),
            message: format!("`{}` is not an object", segments[..i].join(".")),
        })?;
        if i + 1 == segments.len() {
            map.insert(segment.to_string(), value);
            return Ok(());
        }
        cursor = map
            .entry(segment.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("override paths have at least one segment")
}

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(mode) = &args.mode {
        overrides.push(format!("model.mode={mode}"));
    }
    let config = parse_config(args.config.as_deref(), &overrides)?;
    eprintln!(
        "resolved config: {}",
        serde_json::to_string(&config).expect("config serializes")
    );
    eprintln!("seed: {}", config.seed);
    Ok(config)
}

fn make_datasets(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    if config.model.channels != 1 {
        return Err(Error::Config {
            key: "model.channels".into(),
            message: "the synthetic stripe task is single-channel".into(),
        });
    }
    let train_set = generate_synthetic(
        config.model.classes,
        config.data.train_per_class,
        config.model.image_side,
        config.data.noise_std,
        config.seed ^ 0x10,
    )?;
    let test_set = generate_synthetic(
        config.model.classes,
        config.data.test_per_class,
        config.model.image_side,
        config.data.noise_std,
        config.seed ^ 0x11,
    )?;
    if let Some(dir) = &config.data.dump_idx_dir {
        fs::create_dir_all(dir)?;
        for (name, set) in [("train", &train_set), ("test", &test_set)] {
            let (images, labels) = set.to_idx()?;
            fs::write(dir.join(format!("{name}-images.idx3-ubyte")), images)?;
            fs::write(dir.join(format!("{name}-labels.idx1-ubyte")), labels)?;
        }
        eprintln!("dumped IDX datasets to {}", dir.display());
    }
    Ok((train_set, test_set))
}

fn write_data(out: Option<&Path>, payload: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, payload)?,
        None => print!("{payload}"),
    }
    Ok(())
}

/// Executes a parsed invocation. Errors bubble up to [`run`], which turns
/// them into a nonzero exit status with the message on standard error.
pub fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Train(args) => {
            let config = resolve(args)?;
            let (train_set, test_set) = make_datasets(&config)?;
            let (metrics, _model) = train(&config.train_config(), &train_set, &test_set)?;
            let mut buf = Vec::new();
            write_metrics_csv(&metrics, &mut buf)?;
            write_data(args.out.as_deref(), &String::from_utf8_lossy(&buf))?;
            if let Some(last) = metrics.last() {
                eprintln!(
                    "epoch {}: train_acc {:.4}, test_acc {:.4}, max_orth_err {:.3e}",
                    last.epoch, last.train_acc, last.test_acc, last.max_orth_err
                );
            }
            Ok(())
        }
        Command::Eval(args) => {
            let config = resolve(args)?;
            let (train_set, test_set) = make_datasets(&config)?;
            let (_metrics, model) = train(&config.train_config(), &train_set, &test_set)?;
            let accuracy = evaluate(&model, &test_set, config.eval.noise_std, config.seed ^ 0xE0)?;
            write_data(args.out.as_deref(), &format!("{accuracy}\n"))?;
            Ok(())
        }
        Command::NoiseSweep(args) => {
            let config = resolve(args)?;
            let (train_set, test_set) = make_datasets(&config)?;
            let (_metrics, model) = train(&config.train_config(), &train_set, &test_set)?;
            let mut payload = String::from("noise_std,accuracy\n");
            for (i, &std) in NOISE_SWEEP_STDS.iter().enumerate() {
                let acc = evaluate(&model, &test_set, std, config.seed ^ (0xE0 + i as u64))?;
                payload.push_str(&format!("{std},{acc}\n"));
            }
            write_data(args.out.as_deref(), &payload)?;
            Ok(())
        }
        Command::Gradcheck(args) => {
            let modes: Vec<ParamMode> = match &args.mode {
                Some(m) => vec![m.parse()?],
                None => vec![
                    ParamMode::Plain,
                    ParamMode::Cayley,
                    ParamMode::Exp,
                    ParamMode::Penalty,
                ],
            };
            let mut worst: Option<(ParamMode, f64)> = None;
            for mode in modes {
                let err = gradcheck_token_model(args.dim, mode, args.seed, 1e-5)?;
                println!("mode={mode} dim={} max_rel_err={err:.3e}", args.dim);
                if err > worst.map(|(_, e)| e).unwrap_or(0.0) {
                    worst = Some((mode, err));
                }
            }
            match worst {
                Some((mode, err)) if err > 1e-5 => Err(Error::InvalidArgument(format!(
                    "gradient check failed: mode {mode} reached {err:.3e} > 1e-5"
                ))),
                _ => Ok(()),
            }
        }
        Command::Orthcheck(args) => run_orthcheck(args.seed, &mut std::io::stdout()),
        Command::Paramcount(args) => {
            let config = resolve(args)?;
            let model = Model::init(config.model, config.seed)?;
            let (stored, effective) = model.param_count();
            let d_k = config.model.d_k();
            let (cayley_s, retract_s) = bench_orthogonality_paths(d_k, 100, config.seed)?;
            let payload = format!(
                "stored_params={stored}\neffective_params={effective}\n\
                 cayley_raw_step_seconds={cayley_s:.6e}\n\
                 project_retract_step_seconds={retract_s:.6e}\n"
            );
            write_data(args.out.as_deref(), &payload)?;
            Ok(())
        }
    }
}

/// Runs [`dispatch`] and folds the outcome into a process exit status.
pub fn run(cli: &Cli) -> i32 {
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// The orthogonality invariant suite behind `orthcheck`: one printed line
/// per check, error on the first failure.
pub fn run_orthcheck(seed: u64, out: &mut impl Write) -> Result<()> {
    fn square(rng: &mut Rng, n: usize, scale: f64) -> Matrix {
        Matrix::from_fn(n, n, |_, _| rng.uniform(-scale, scale)).unwrap()
    }
    let rng = &mut Rng::new(seed);

    // Orthogonality of both maps across sizes.
    for n in [4usize, 16, 64] {
        for _ in 0..10 {
            let x = skew_symmetrize(&square(rng, n, 1.0))?;
            let c_err = orthogonality_error(cayley(&x).as_matrix())?;
            if c_err > orthogonal::orthogonality_tolerance(n) {
                return Err(Error::NotOrthogonal {
                    error: c_err,
                    tolerance: orthogonal::orthogonality_tolerance(n),
                });
            }
            let e_err = orthogonality_error(matrix_exp(&x).as_matrix())?;
            if e_err > 1e-9 * (n as f64).sqrt() {
                return Err(Error::NotOrthogonal {
                    error: e_err,
                    tolerance: 1e-9 * (n as f64).sqrt(),
                });
            }
        }
        writeln!(out, "ok: cayley and exp images orthogonal at n={n}")?;
    }

    // Metric invariance of the images.
    let n = 8;
    for _ in 0..200 {
        let w = cayley(&skew_symmetrize(&square(rng, n, 1.0))?);
        let x = Matrix::from_fn(1, n, |_, _| rng.uniform(-2.0, 2.0))?;
        let y = Matrix::from_fn(1, n, |_, _| rng.uniform(-2.0, 2.0))?;
        let xw = x.matmul(w.as_matrix())?;
        let yw = y.matmul(w.as_matrix())?;
        let dot = |a: &Matrix, b: &Matrix| -> f64 {
            a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
        };
        let (nx, ny) = (x.frobenius_norm(), y.frobenius_norm());
        let checks = [
            ((dot(&xw, &yw) - dot(&x, &y)).abs(), 1e-9 * nx * ny, "inner product"),
            ((xw.frobenius_norm() - nx).abs(), 1e-9 * nx, "length"),
            (
                (dot(&x, &y) / (nx * ny) - dot(&xw, &yw) / (xw.frobenius_norm() * yw.frobenius_norm()))
                    .abs(),
                1e-9,
                "angle",
            ),
            (
                (x.sub(&y)?.frobenius_norm() - xw.sub(&yw)?.frobenius_norm()).abs(),
                1e-9 * x.sub(&y)?.frobenius_norm(),
                "distance",
            ),
        ];
        for (err, tol, what) in checks {
            if err > tol {
                return Err(Error::InvalidArgument(format!(
                    "{what} invariance violated: {err:e} > {tol:e}"
                )));
            }
        }
    }
    writeln!(out, "ok: inner-product/length/angle/distance invariance")?;

    // Constructive roundtrip and the involution.
    for _ in 0..20 {
        let y = cayley(&skew_symmetrize(&square(rng, n, 1.0))?);
        let back = cayley(&cayley_inverse(&y)?);
        let diff = back.as_matrix().sub(y.as_matrix())?.frobenius_norm();
        if diff > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "cayley roundtrip drifted by {diff:e}"
            )));
        }
        let m = square(rng, n, 0.3);
        let twice = orthogonal::cayley_map(&orthogonal::cayley_map(&m)?)?;
        let drift = twice.sub(&m)?.frobenius_norm();
        if drift > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "involution drifted by {drift:e}"
            )));
        }
    }
    let minus_e = OrthogonalMatrix::new(Matrix::identity(4).scale(-1.0))?;
    if !matches!(cayley_inverse(&minus_e), Err(Error::Singular { .. })) {
        return Err(Error::InvalidArgument(
            "cayley_inverse(-E) must report the singularity".into(),
        ));
    }
    writeln!(out, "ok: constructive roundtrip, involution, -E singularity")?;

    // First-order agreement between the two maps.
    for _ in 0..10 {
        let x = skew_symmetrize(&square(rng, n, 1e-4))?;
        let norm = x.as_matrix().frobenius_norm();
        let lhs = cayley(&x);
        let rhs = matrix_exp(&crate::orthogonal::SkewMatrix::new(
            x.as_matrix().scale(-2.0),
        )?);
        let diff = lhs.as_matrix().sub(rhs.as_matrix())?.frobenius_norm();
        if diff > 10.0 * norm * norm {
            return Err(Error::InvalidArgument(format!(
                "first-order agreement violated: {diff:e}"
            )));
        }
    }
    writeln!(out, "ok: cayley(X) agrees with exp(-2X) to first order")?;

    // Tangent projection and retraction.
    for _ in 0..20 {
        let w = cayley(&skew_symmetrize(&square(rng, n, 1.0))?);
        let g = square(rng, n, 1.0);
        let h = tangent_project(&w, &g)?;
        let wth = w.as_matrix().transpose().matmul(&h)?;
        let resid = wth.add(&wth.transpose())?.max_abs();
        if resid > 1e-10 {
            return Err(Error::NotTangent {
                error: resid,
                tolerance: 1e-10,
            });
        }
        let moved = retract(&w, &h, 0.1)?;
        let err = orthogonality_error(moved.as_matrix())?;
        if err > orthogonal::orthogonality_tolerance(n) {
            return Err(Error::NotOrthogonal {
                error: err,
                tolerance: orthogonal::orthogonality_tolerance(n),
            });
        }
    }
    writeln!(out, "ok: tangent projection is tangent, retraction stays on O(n)")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let config = parse_config(None, &[]).unwrap();
        assert_eq!(config, RunConfig::default());
    }

    #[test]
    fn paper_hyperparameters_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        fs::write(&path, r#"{"lr": 5e-3, "momentum": 0.9, "weight_decay": 7e-4}"#).unwrap();
        let config = parse_config(Some(&path), &[]).unwrap();
        assert_eq!(config.lr, 5.0e-3);
        assert_eq!(config.momentum, 0.9);
        assert_eq!(config.weight_decay, 7.0e-4);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = parse_config(None, &["learning_rate=0.1".into()]).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("learning_rate"), "message: {message}");
    }

    #[test]
    fn invariant_violating_override_is_rejected() {
        let err = parse_config(None, &["model.heads=3".into()]).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn dotted_overrides_apply_last() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        fs::write(&path, r#"{"model": {"heads": 4}, "seed": 1}"#).unwrap();
        let config = parse_config(
            Some(&path),
            &["model.heads=2".into(), "model.mode=exp".into(), "seed=9".into()],
        )
        .unwrap();
        assert_eq!(config.model.heads, 2);
        assert_eq!(config.model.mode, ParamMode::Exp);
        assert_eq!(config.seed, 9);
    }

    #[test]
    fn missing_config_file_names_the_path() {
        let err = parse_config(Some(Path::new("/no/such/config.json")), &[]).unwrap_err();
        assert!(err.to_string().contains("/no/such/config.json"));
    }

    #[test]
    fn orthcheck_suite_passes() {
        let mut sink = Vec::new();
        run_orthcheck(7, &mut sink).unwrap();
        let text = String::from_utf8(sink).unwrap();
        assert!(text.lines().count() >= 5);
        assert!(text.lines().all(|l| l.starts_with("ok: ")));
    }
}
