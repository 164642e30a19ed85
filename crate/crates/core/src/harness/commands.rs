//! The CLI verbs as library functions. Every command writes its outputs and
//! a manifest into the run directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, FactorSource};
use super::csvio::{num, read_observations, write_csv};
use super::manifest::RunManifest;
use crate::error::{shape_err, Error, Result};
use crate::fluid::infer::{
    backward_recursion, filter_log_density, filter_step, kalman_beliefs, smooth_paths_from, KalmanPathSampler,
};
use crate::fluid::{train, FluidModel, TrainReport};
use crate::gaussian::{
    kalman_filter, kl_gaussian_vs_density, rows_to_dvectors, rts_smoother, GaussianBelief, LinearSsm,
};
use crate::metrics;
use crate::pf::{
    self, bootstrap_pf_step, initial_particles, pf_step, ress_series, AdaptedFactors, BootstrapFactors, EssReport,
    ExactFactors, ExactModel, LinearFactors, ParticleEnsemble, PfModel, Triples,
};
use crate::ssm::{make_dataset, Dataset};

pub const DATASET_FILE: &str = "dataset.flds";
pub const MODEL_FILE: &str = "model.fldm";
pub const PF_MODEL_FILE: &str = "pf_model.fldm";

/// Purposes of the seeded generator streams.
mod purpose {
    pub const FILTER: u64 = 1;
    pub const SMOOTH: u64 = 2;
    pub const KL: u64 = 3;
    pub const PF: u64 = 4;
    pub const ESS_SIM: u64 = 5;
    pub const ESS: u64 = 6;
}

/// Generator for `(purpose, trajectory, step)`. Streams never overlap, so
/// results do not depend on evaluation order or thread count.
pub fn stream_rng(seed: u64, purpose: u64, trajectory: usize, step: usize) -> ChaCha8Rng {
    let key = seed
        ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (trajectory as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(step as u64);
    rng
}

/// Maps `f` over `0..n` on scoped threads, keeping index order.
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = std::thread::available_parallelism()
        .map_or(1, |p| p.get())
        .min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<_> = slots.chunks_mut(n.div_ceil(threads)).collect();
        let mut start = 0;
        for chunk in chunks {
            let base = start;
            start += chunk.len();
            scope.spawn(move || {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(base + j));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// One experiment's configuration and output directory.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    started: Instant,
}

impl Run {
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        let out = out.into();
        std::fs::create_dir_all(&out)?;
        Ok(Run {
            cfg,
            out,
            started: Instant::now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish(&self, command: &str, artifacts: &[String]) -> Result<()> {
        let elapsed = self.started.elapsed().as_secs_f64();
        RunManifest::new(command, &self.cfg, &self.out, artifacts, elapsed)?.write(&self.out)
    }

    /// The generated dataset; it must match the configured system and seed.
    pub fn dataset(&self) -> Result<Dataset> {
        let p = self.path(DATASET_FILE);
        if !p.exists() {
            return Err(Error::Config(format!(
                "{} not found; run `generate` first",
                p.display()
            )));
        }
        let ds = Dataset::load(&p)?;
        if &ds.spec != self.cfg.system()? || ds.seed != self.cfg.seed {
            return Err(Error::Config(format!(
                "{} was generated from a different system or seed; rerun `generate`",
                p.display()
            )));
        }
        Ok(ds)
    }

    pub fn fluid_model(&self, path: Option<&Path>) -> Result<FluidModel> {
        let p = path.map_or_else(|| self.path(MODEL_FILE), Path::to_path_buf);
        if !p.exists() {
            return Err(Error::Config(format!("{} not found; run `train` first", p.display())));
        }
        FluidModel::load(&p)
    }

    fn seed(&self) -> u64 {
        self.cfg.seed
    }
}

fn test_count(ds: &Dataset, limit: Option<usize>) -> Result<usize> {
    let n = limit.map_or(ds.test.count(), |l| l.min(ds.test.count()));
    if n == 0 {
        return Err(Error::Empty("no test trajectories to evaluate".into()));
    }
    Ok(n)
}

// ---------------------------------------------------------------- generate

pub fn cmd_generate(run: &Run) -> Result<Dataset> {
    let c = &run.cfg;
    let d = &c.data;
    let ds = make_dataset(c.system()?, d.n_train, d.n_test, d.t_train, d.t_eval, c.seed)?;
    ds.save(&run.path(DATASET_FILE))?;
    run.finish("generate", &[DATASET_FILE.into()])?;
    Ok(ds)
}

// ------------------------------------------------------------------- train

/// Trains a fresh model, or continues the checkpoint at `resume_from`.
pub fn cmd_train(run: &Run, resume_from: Option<&Path>) -> Result<(FluidModel, TrainReport)> {
    let ds = run.dataset()?;
    let cfg = &run.cfg.train;
    let ckpt_dir = (cfg.checkpoint_every > 0).then_some(run.out.as_path());
    let log_path = run.path("train_log.csv");
    let (model, report, mut rows) = match resume_from {
        None => {
            let (m, r) = train::train(&ds.train, &ds.stats, &run.cfg.arch, cfg, ckpt_dir)?;
            (m, r, Vec::new())
        }
        Some(p) => {
            let start = FluidModel::load(p)?;
            let done = start.trained_epochs;
            // keep the logged history up to the checkpoint
            let kept = match super::csvio::read_csv(&log_path) {
                Ok(t) => {
                    let e = t.column("epoch")?;
                    t.rows
                        .into_iter()
                        .filter(|r| r[e].parse::<usize>().is_ok_and(|x| x <= done))
                        .collect()
                }
                Err(_) => Vec::new(),
            };
            let (m, r) = train::resume(start, &ds.train, cfg, ckpt_dir)?;
            (m, r, kept)
        }
    };
    if rows.is_empty() {
        if let Some((v, f, b)) = report.initial_val {
            rows.push(vec!["0".into(), String::new(), num(v), num(f), num(b), num(0.0)]);
        }
    }
    for e in &report.curve {
        let wall = if run.cfg.deterministic { 0.0 } else { e.wall_time };
        rows.push(vec![
            e.epoch.to_string(),
            num(e.train_nll),
            num(e.val_nll),
            num(e.val_filter_nll),
            num(e.val_backward_nll),
            num(wall),
        ]);
    }
    let header = [
        "epoch",
        "train_nll",
        "val_nll",
        "val_filter_nll",
        "val_backward_nll",
        "wall_time",
    ]
    .map(String::from);
    write_csv(&log_path, "train-log/1", &header, &rows)?;
    model.save(&run.path(MODEL_FILE), true)?;
    run.finish("train", &[MODEL_FILE.into(), "train_log.csv".into()])?;
    Ok((model, report))
}

// ------------------------------------------------------------------- infer

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum InferMode {
    Filter,
    Smooth,
}

impl InferMode {
    fn name(self) -> &'static str {
        match self {
            InferMode::Filter => "filter",
            InferMode::Smooth => "smooth",
        }
    }
}

#[derive(Debug, Clone)]
pub struct InferRequest {
    pub mode: InferMode,
    /// Use the first `t` observations (all when absent).
    pub t: Option<usize>,
    /// Observation CSV; the dataset's test trajectory otherwise.
    pub obs: Option<PathBuf>,
    pub trajectory: usize,
    pub model: Option<PathBuf>,
}

/// Filtering samples at steps `1..=T`, `(T, N, d_u)`. Step `k` draws from
/// its own stream.
pub fn fluid_filter(
    model: &FluidModel,
    ys: ArrayView2<f64>,
    n: usize,
    seed: u64,
    trajectory: usize,
) -> Result<Array3<f64>> {
    let t = ys.nrows();
    if t == 0 {
        return Err(Error::Empty("filtering needs at least one observation".into()));
    }
    let s = model.summaries(ys)?;
    let mut out = Array3::zeros((t, n, model.state_dim));
    for k in 0..t {
        let mut rng = stream_rng(seed, purpose::FILTER, trajectory, k + 1);
        out.index_axis_mut(Axis(0), k)
            .assign(&filter_step(model, s.view(), k, n, &mut rng)?);
    }
    Ok(out)
}

/// Smoothing marginals at steps `1..=T`, `(T, N, d_u)`. The terminal slice
/// is the filtering draw of step `T` from [`fluid_filter`].
pub fn fluid_smooth(
    model: &FluidModel,
    ys: ArrayView2<f64>,
    n: usize,
    seed: u64,
    trajectory: usize,
) -> Result<Array3<f64>> {
    let t = ys.nrows();
    if t == 1 {
        return fluid_filter(model, ys, n, seed, trajectory);
    }
    if t == 0 {
        return Err(Error::Empty("smoothing needs at least one observation".into()));
    }
    let s = model.summaries(ys)?;
    let mut rng = stream_rng(seed, purpose::FILTER, trajectory, t);
    let terminal = filter_step(model, s.view(), t - 1, n, &mut rng)?;
    let mut rng = stream_rng(seed, purpose::SMOOTH, trajectory, 0);
    Ok(smooth_paths_from(ys, model, terminal.view(), &mut rng)?.steps_major())
}

fn quantile_sorted(xs: &[f64], q: f64) -> f64 {
    let h = (xs.len() - 1) as f64 * q;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    xs[lo] + (h - lo as f64) * (xs[hi] - xs[lo])
}

/// Long-format rows `step, dim, mean, std, q05, q50, q95`.
pub fn summary_rows(samples: &Array3<f64>) -> Vec<Vec<String>> {
    let (t, n, d) = samples.dim();
    let mut rows = Vec::with_capacity(t * d);
    for k in 0..t {
        for j in 0..d {
            let mut xs: Vec<f64> = samples.slice(s![k, .., j]).to_vec();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            xs.sort_by(f64::total_cmp);
            rows.push(vec![
                (k + 1).to_string(),
                j.to_string(),
                num(mean),
                num(var.sqrt()),
                num(quantile_sorted(&xs, 0.05)),
                num(quantile_sorted(&xs, 0.5)),
                num(quantile_sorted(&xs, 0.95)),
            ]);
        }
    }
    rows
}

pub const SUMMARY_COLUMNS: [&str; 7] = ["step", "dim", "mean", "std", "q05", "q50", "q95"];

/// Writes `<mode>_summary.csv` (and `<mode>_samples.csv` when enabled);
/// returns the `(T, N, d_u)` samples.
pub fn cmd_infer(run: &Run, req: &InferRequest) -> Result<Array3<f64>> {
    let model = run.fluid_model(req.model.as_deref())?;
    let ys_full = match &req.obs {
        Some(p) => read_observations(p, model.obs_dim)?,
        None => {
            let ds = run.dataset()?;
            if req.trajectory >= ds.test.count() {
                return Err(Error::OutOfRange {
                    index: req.trajectory,
                    len: ds.test.count(),
                });
            }
            let ys = ds.test.obs_of(req.trajectory).to_owned();
            if ys.ncols() != model.obs_dim {
                return Err(shape_err("observations vs model", model.obs_dim, ys.ncols()));
            }
            ys
        }
    };
    let t = req.t.unwrap_or(ys_full.nrows());
    if t == 0 || t > ys_full.nrows() {
        return Err(Error::OutOfRange {
            index: t,
            len: ys_full.nrows(),
        });
    }
    let ys = ys_full.slice(s![..t, ..]);
    let n = run.cfg.infer.n_sample;
    let samples = match req.mode {
        InferMode::Filter => fluid_filter(&model, ys, n, run.seed(), req.trajectory)?,
        InferMode::Smooth => fluid_smooth(&model, ys, n, run.seed(), req.trajectory)?,
    };
    let name = req.mode.name();
    let summary = format!("{name}_summary.csv");
    let header = SUMMARY_COLUMNS.map(String::from);
    write_csv(&run.path(&summary), "infer-summary/1", &header, &summary_rows(&samples))?;
    let mut artifacts = vec![summary];
    if run.cfg.infer.save_samples {
        let file = format!("{name}_samples.csv");
        let (t, n, d) = samples.dim();
        let mut header = vec!["step".to_string(), "sample".to_string()];
        header.extend((0..d).map(|j| format!("u_{j}")));
        let mut rows = Vec::with_capacity(t * n);
        for k in 0..t {
            for i in 0..n {
                let mut r = vec![(k + 1).to_string(), i.to_string()];
                r.extend(samples.slice(s![k, i, ..]).iter().map(|&x| num(x)));
                rows.push(r);
            }
        }
        write_csv(&run.path(&file), "samples/1", &header, &rows)?;
        artifacts.push(file);
    }
    run.finish(&format!("infer-{name}"), &artifacts)?;
    Ok(samples)
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fluid,
    Kalman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    None,
    Kalman,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    /// `None` for the mean over trajectories.
    pub trajectory: Option<usize>,
    pub distribution: String,
    pub rmse: f64,
    pub mmd: f64,
    pub crps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<MetricRow>,
    /// Per-step `(mean KL, standard error)` when a reference is given.
    pub kl: Option<Vec<(f64, f64)>>,
}

impl Evaluation {
    pub fn aggregate(&self, distribution: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.trajectory.is_none() && r.distribution == distribution)
    }

    /// KL averaged over steps, with its standard error.
    pub fn mean_kl(&self) -> Option<(f64, f64)> {
        let kl = self.kl.as_ref()?;
        let n = kl.len() as f64;
        let v = kl.iter().map(|k| k.0).sum::<f64>() / n;
        let se = kl.iter().map(|k| k.1 * k.1).sum::<f64>().sqrt() / n;
        Some((v, se))
    }
}

struct TrajEval {
    filter: metrics::MetricReport,
    smooth: metrics::MetricReport,
    /// Kalman and RTS mean RMSE.
    exact_rmse: Option<(metrics::MetricSeries, metrics::MetricSeries)>,
    kl: Option<Vec<(f64, f64)>>,
}

fn mean_paths(means: &[GaussianBelief]) -> Array3<f64> {
    let d = means[0].dim();
    let mut out = Array3::zeros((means.len(), 1, d));
    for (k, b) in means.iter().enumerate() {
        for j in 0..d {
            out[[k, 0, j]] = b.mean[j];
        }
    }
    out
}

fn kalman_samples(beliefs: &[GaussianBelief], n: usize, seed: u64, trajectory: usize) -> Array3<f64> {
    let d = beliefs[0].dim();
    let mut out = Array3::zeros((beliefs.len(), n, d));
    for (k, b) in beliefs.iter().enumerate() {
        let mut rng = stream_rng(seed, purpose::FILTER, trajectory, k + 1);
        out.index_axis_mut(Axis(0), k).assign(&b.sample(n, &mut rng));
    }
    out
}

fn evaluate_one(
    run: &Run,
    ds: &Dataset,
    i: usize,
    method: Method,
    model: Option<&FluidModel>,
    ssm: Option<&LinearSsm>,
    reference: Reference,
) -> Result<TrajEval> {
    let ic = &run.cfg.infer;
    let ys = ds.test.obs_of(i);
    let truth = ds.test.states_of(i);
    let seed = run.seed();
    let beliefs = ssm.map(|m| kalman_beliefs(m, ys)).transpose()?;
    let (filt, smooth) = match method {
        Method::Fluid => {
            let m = model.expect("fluid model loaded");
            (
                fluid_filter(m, ys, ic.n_sample, seed, i)?,
                fluid_smooth(m, ys, ic.n_sample, seed, i)?,
            )
        }
        Method::Kalman => {
            let ssm = ssm.ok_or_else(|| Error::Config("the Kalman method needs a linear-Gaussian system".into()))?;
            let f = kalman_samples(beliefs.as_ref().expect("beliefs"), ic.n_sample, seed, i);
            let sampler = KalmanPathSampler::new(ssm, ys)?;
            let mut rng = stream_rng(seed, purpose::SMOOTH, i, 0);
            (f, backward_recursion(&sampler, ic.n_sample, &mut rng)?.steps_major())
        }
    };
    let filter = metrics::report(filt.view(), truth, ic.mmd_sigma)?;
    let smooth = metrics::report(smooth.view(), truth, ic.mmd_sigma)?;
    let mut out = TrajEval {
        filter,
        smooth,
        exact_rmse: None,
        kl: None,
    };
    if reference == Reference::Kalman {
        let ssm = ssm.ok_or_else(|| Error::Config("a Kalman reference needs a linear-Gaussian system".into()))?;
        let beliefs = beliefs.expect("beliefs computed for linear systems");
        let run_kf = kalman_filter(ssm, &rows_to_dvectors(ys))?;
        let smoothed = rts_smoother(ssm, &run_kf)?;
        out.exact_rmse = Some((
            metrics::rmse(mean_paths(&beliefs).view(), truth)?,
            metrics::rmse(mean_paths(&smoothed).view(), truth)?,
        ));
        let s = model.map(|m| m.summaries(ys)).transpose()?;
        let mut kl = Vec::with_capacity(beliefs.len());
        for (k, b) in beliefs.iter().enumerate() {
            let mut rng = stream_rng(seed, purpose::KL, i, k + 1);
            let est = match (method, &s) {
                (Method::Fluid, Some(s)) => {
                    let m = model.expect("model");
                    kl_gaussian_vs_density(b, |u| filter_log_density(m, s.row(k), u), ic.kl_samples, &mut rng)?
                }
                _ => kl_gaussian_vs_density(b, |u| b.log_density_rows(u), ic.kl_samples, &mut rng)?,
            };
            kl.push((est.value, est.std_error));
        }
        out.kl = Some(kl);
    }
    Ok(out)
}

fn row_strings(r: &MetricRow) -> Vec<String> {
    vec![
        r.trajectory.map_or("mean".into(), |i| i.to_string()),
        r.distribution.clone(),
        num(r.rmse),
        num(r.mmd),
        num(r.crps),
    ]
}

/// Metrics over the test trajectories; writes `metrics-<method>.csv`,
/// `metrics_per_step-<method>.csv` and, with a reference, `kl-<method>.csv`.
pub fn cmd_evaluate(run: &Run, method: Method, reference: Reference) -> Result<Evaluation> {
    let ds = run.dataset()?;
    let n = test_count(&ds, run.cfg.infer.trajectories)?;
    let model = match method {
        Method::Fluid => Some(run.fluid_model(None)?),
        Method::Kalman => None,
    };
    if let Some(m) = &model {
        if m.state_dim != ds.test.state_dim() || m.obs_dim != ds.test.obs_dim() {
            return Err(shape_err(
                "model vs dataset dimensions",
                format!("({}, {})", m.state_dim, m.obs_dim),
                format!("({}, {})", ds.test.state_dim(), ds.test.obs_dim()),
            ));
        }
    }
    let ssm = ds.spec.linear().transpose()?;
    let per = par_map(n, |i| {
        evaluate_one(run, &ds, i, method, model.as_ref(), ssm.as_ref(), reference)
    })?;

    let mut rows = Vec::new();
    let mut per_step: Vec<(String, Vec<[f64; 3]>)> = Vec::new();
    let mut push = |name: &str, items: Vec<(f64, f64, f64, Vec<[f64; 3]>)>| {
        let m = items.len() as f64;
        let mut agg = [0.0; 3];
        let mut steps = vec![[0.0; 3]; items[0].3.len()];
        for (i, (r, mm, c, st)) in items.iter().enumerate() {
            rows.push(MetricRow {
                trajectory: Some(i),
                distribution: name.into(),
                rmse: *r,
                mmd: *mm,
                crps: *c,
            });
            agg[0] += r / m;
            agg[1] += mm / m;
            agg[2] += c / m;
            for (a, b) in steps.iter_mut().zip(st) {
                for j in 0..3 {
                    a[j] += b[j] / m;
                }
            }
        }
        rows.push(MetricRow {
            trajectory: None,
            distribution: name.into(),
            rmse: agg[0],
            mmd: agg[1],
            crps: agg[2],
        });
        per_step.push((name.into(), steps));
    };
    let full = |r: &metrics::MetricReport| {
        let st = (0..r.rmse.per_step.len())
            .map(|k| [r.rmse.per_step[k], r.mmd.per_step[k], r.crps.per_step[k]])
            .collect();
        (r.rmse.value, r.mmd.value, r.crps.value, st)
    };
    let rmse_only = |s: &metrics::MetricSeries| {
        (
            s.value,
            f64::NAN,
            f64::NAN,
            s.per_step.iter().map(|&x| [x, f64::NAN, f64::NAN]).collect(),
        )
    };
    push("filter", per.iter().map(|p| full(&p.filter)).collect());
    push("smooth", per.iter().map(|p| full(&p.smooth)).collect());
    if per[0].exact_rmse.is_some() {
        push(
            "kalman-filter",
            per.iter()
                .map(|p| rmse_only(&p.exact_rmse.as_ref().unwrap().0))
                .collect(),
        );
        push(
            "rts-smoother",
            per.iter()
                .map(|p| rmse_only(&p.exact_rmse.as_ref().unwrap().1))
                .collect(),
        );
    }

    let tag = match method {
        Method::Fluid => "fluid",
        Method::Kalman => "kalman",
    };
    let mcols = ["trajectory", "distribution", "rmse", "mmd", "crps"].map(String::from);
    let mfile = format!("metrics-{tag}.csv");
    write_csv(
        &run.path(&mfile),
        "metrics/1",
        &mcols,
        &rows.iter().map(row_strings).collect::<Vec<_>>(),
    )?;
    let pcols = ["distribution", "step", "rmse", "mmd", "crps"].map(String::from);
    let prows: Vec<Vec<String>> = per_step
        .iter()
        .flat_map(|(name, st)| {
            st.iter()
                .enumerate()
                .map(move |(k, v)| vec![name.clone(), (k + 1).to_string(), num(v[0]), num(v[1]), num(v[2])])
        })
        .collect();
    let pfile = format!("metrics_per_step-{tag}.csv");
    write_csv(&run.path(&pfile), "metrics-per-step/1", &pcols, &prows)?;
    let mut artifacts = vec![mfile, pfile];

    let kl = if reference == Reference::Kalman {
        let t = per[0].kl.as_ref().map_or(0, Vec::len);
        let m = n as f64;
        let series: Vec<(f64, f64)> = (0..t)
            .map(|k| {
                let v = per.iter().map(|p| p.kl.as_ref().unwrap()[k].0).sum::<f64>() / m;
                let se = per
                    .iter()
                    .map(|p| p.kl.as_ref().unwrap()[k].1.powi(2))
                    .sum::<f64>()
                    .sqrt()
                    / m;
                (v, se)
            })
            .collect();
        let kfile = format!("kl-{tag}.csv");
        let krows: Vec<Vec<String>> = series
            .iter()
            .enumerate()
            .map(|(k, (v, se))| vec![(k + 1).to_string(), num(*v), num(*se)])
            .collect();
        write_csv(
            &run.path(&kfile),
            "kl/1",
            &["step", "kl", "std_error"].map(String::from),
            &krows,
        )?;
        artifacts.push(kfile);
        Some(series)
    } else {
        None
    };
    run.finish(&format!("evaluate-{tag}"), &artifacts)?;
    Ok(Evaluation { rows, kl })
}

// ---------------------------------------------------------------------- pf

#[derive(Debug, Clone)]
pub struct PfOptions {
    /// Retrain the factor flows even when a saved model exists.
    pub retrain: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfStepRow {
    pub trajectory: usize,
    pub step: usize,
    /// RESS of the weights that drove resampling.
    pub weight_ress: f64,
    /// RESS of the correction weights against the exact model; NaN when
    /// unavailable.
    pub exact_ress: f64,
    pub mean: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfOutput {
    pub steps: Vec<PfStepRow>,
    pub metrics: Vec<MetricRow>,
}

/// Loads `pf_model.fldm` or trains it on the dataset's training split.
pub fn pf_model(run: &Run, ds: &Dataset, retrain: bool) -> Result<(PfModel, Vec<String>)> {
    let p = run.path(PF_MODEL_FILE);
    let need_bootstrap = run.cfg.pf.bootstrap || run.cfg.pf.train.bootstrap;
    if p.exists() && !retrain {
        let m = PfModel::load(&p)?;
        if !need_bootstrap || m.has_bootstrap() {
            return Ok((m, Vec::new()));
        }
    }
    let mut tc = run.cfg.pf.train.clone();
    tc.bootstrap = need_bootstrap;
    let (m, curve) = pf::train_pf_flows(&Triples::from_trajectories(&ds.train), &ds.stats, &tc)?;
    m.save(&p)?;
    let width = curve.iter().map(|e| e.val_terms.len()).max().unwrap_or(0);
    let names = ["predictive", "proposal", "transition", "likelihood"];
    let mut header = vec!["epoch".to_string(), "train_nll".to_string()];
    header.extend(names[..width].iter().map(|n| format!("val_{n}_nll")));
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|e| {
            let mut r = vec![e.epoch.to_string(), num(e.train_nll)];
            r.extend((0..width).map(|j| num(e.val_terms.get(j).copied().unwrap_or(f64::NAN))));
            r
        })
        .collect();
    write_csv(&run.path("pf_train_log.csv"), "pf-train-log/1", &header, &rows)?;
    Ok((m, vec![PF_MODEL_FILE.into(), "pf_train_log.csv".into()]))
}

fn exact_ress_of<F: AdaptedFactors, E: ExactModel>(
    exact: &E,
    model: &F,
    parents: ArrayView2<f64>,
    u: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> Result<f64> {
    let log_w = exact.transition_log_density(u, parents)? + exact.likelihood_log_density(y, u)?
        - model.proposal_log_density(u, y, parents)?
        - model.predictive_log_density(y, parents)?;
    let w = pf::normalize_log_weights(&log_w)?;
    Ok(pf::ess(w.view()).1)
}

fn adapted_run<F: AdaptedFactors>(
    ys: ArrayView2<f64>,
    init: Array2<f64>,
    model: &F,
    exact: Option<&ExactFactors>,
    run: &Run,
    trajectory: usize,
) -> Result<(Vec<ParticleEnsemble>, Vec<f64>)> {
    let mut rng = stream_rng(run.seed(), purpose::PF, trajectory, 0);
    let mut ens = ParticleEnsemble::uniform(init)?;
    let (mut out, mut exact_ress) = (Vec::new(), Vec::new());
    for y in ys.outer_iter() {
        let next = pf_step(&ens, y, model, run.cfg.pf.resampler, &mut rng)?;
        let r = match exact {
            Some(e) => {
                let parents = ens.particles.select(Axis(0), &next.ancestors);
                exact_ress_of(e, model, parents.view(), next.particles.view(), y.insert_axis(Axis(0)))?
            }
            None => f64::NAN,
        };
        exact_ress.push(r);
        out.push(next.clone());
        ens = next;
    }
    Ok((out, exact_ress))
}

fn bootstrap_run<F: BootstrapFactors>(
    ys: ArrayView2<f64>,
    init: Array2<f64>,
    model: &F,
    run: &Run,
    trajectory: usize,
) -> Result<(Vec<ParticleEnsemble>, Vec<f64>)> {
    let mut rng = stream_rng(run.seed(), purpose::PF, trajectory, 0);
    let mut ens = ParticleEnsemble::uniform(init)?;
    let mut out = Vec::new();
    for y in ys.outer_iter() {
        ens = bootstrap_pf_step(&ens, y, model, run.cfg.pf.resampler, &mut rng)?;
        out.push(ens.clone());
    }
    let nan = vec![f64::NAN; out.len()];
    Ok((out, nan))
}

enum PfFactors {
    Learned(Box<PfModel>),
    ExactLinear(Box<LinearFactors>),
    ExactOther(ExactFactors),
}

/// Runs the particle filter over the test trajectories; writes `pf.csv`
/// (per-step RESS and means) and `pf_metrics.csv`.
pub fn cmd_pf(run: &Run, opts: &PfOptions) -> Result<PfOutput> {
    let ds = run.dataset()?;
    let pc = &run.cfg.pf;
    let n = test_count(&ds, pc.trajectories)?;
    if pc.particles == 0 {
        return Err(Error::Config("pf.particles must be >= 1".into()));
    }
    let mut artifacts = Vec::new();
    let factors = match pc.factors {
        FactorSource::Learned => {
            let (m, a) = pf_model(run, &ds, opts.retrain)?;
            artifacts.extend(a);
            PfFactors::Learned(Box::new(m))
        }
        FactorSource::Exact => match ds.spec.linear().transpose()? {
            Some(ssm) if !pc.bootstrap => PfFactors::ExactLinear(Box::new(LinearFactors::new(ssm)?)),
            _ if pc.bootstrap => PfFactors::ExactOther(ExactFactors::for_spec(&ds.spec)?),
            _ => {
                return Err(Error::Config(
                    "exact fully adapted factors exist only for linear-Gaussian systems; set pf.bootstrap = true"
                        .into(),
                ))
            }
        },
    };
    let exact = ExactFactors::for_spec(&ds.spec).ok();
    let per = par_map(n, |i| {
        let ys = ds.test.obs_of(i);
        let mut rng = stream_rng(run.seed(), purpose::PF, i, 1);
        let init = initial_particles(&ds.spec, pc.particles, &mut rng)?;
        let (ens, exact_ress) = match (&factors, pc.bootstrap) {
            (PfFactors::Learned(m), false) => adapted_run(ys, init, m.as_ref(), exact.as_ref(), run, i)?,
            (PfFactors::Learned(m), true) => bootstrap_run(ys, init, m.as_ref(), run, i)?,
            (PfFactors::ExactLinear(m), false) => adapted_run(ys, init, m.as_ref(), exact.as_ref(), run, i)?,
            (PfFactors::ExactLinear(m), true) => bootstrap_run(ys, init, m.as_ref(), run, i)?,
            (PfFactors::ExactOther(m), _) => bootstrap_run(ys, init, m, run, i)?,
        };
        let mut cloud = Array3::zeros((ens.len(), pc.particles, ds.test.state_dim()));
        for (k, e) in ens.iter().enumerate() {
            cloud.index_axis_mut(Axis(0), k).assign(&e.particles);
        }
        let report = metrics::report(cloud.view(), ds.test.states_of(i), run.cfg.infer.mmd_sigma)?;
        let steps: Vec<PfStepRow> = ens
            .iter()
            .zip(exact_ress)
            .enumerate()
            .map(|(k, (e, r))| PfStepRow {
                trajectory: i,
                step: k + 1,
                weight_ress: e.ress,
                exact_ress: r,
                mean: e.mean(),
            })
            .collect();
        Ok((steps, report))
    })?;

    let d = ds.test.state_dim();
    let mut header = ["trajectory", "step", "weight_ress", "exact_ress"]
        .map(String::from)
        .to_vec();
    header.extend((0..d).map(|j| format!("mean_{j}")));
    let mut steps = Vec::new();
    let mut metric_rows = Vec::new();
    for (i, (s, r)) in per.into_iter().enumerate() {
        metric_rows.push(MetricRow {
            trajectory: Some(i),
            distribution: "pf-filter".into(),
            rmse: r.rmse.value,
            mmd: r.mmd.value,
            crps: r.crps.value,
        });
        steps.extend(s);
    }
    let m = metric_rows.len() as f64;
    metric_rows.push(MetricRow {
        trajectory: None,
        distribution: "pf-filter".into(),
        rmse: metric_rows.iter().map(|r| r.rmse).sum::<f64>() / m,
        mmd: metric_rows.iter().map(|r| r.mmd).sum::<f64>() / m,
        crps: metric_rows.iter().map(|r| r.crps).sum::<f64>() / m,
    });
    let rows: Vec<Vec<String>> = steps
        .iter()
        .map(|r| {
            let mut v = vec![
                r.trajectory.to_string(),
                r.step.to_string(),
                num(r.weight_ress),
                num(r.exact_ress),
            ];
            v.extend(r.mean.iter().map(|&x| num(x)));
            v
        })
        .collect();
    write_csv(&run.path("pf.csv"), "pf/1", &header, &rows)?;
    let mcols = ["trajectory", "distribution", "rmse", "mmd", "crps"].map(String::from);
    write_csv(
        &run.path("pf_metrics.csv"),
        "metrics/1",
        &mcols,
        &metric_rows.iter().map(row_strings).collect::<Vec<_>>(),
    )?;
    artifacts.extend(["pf.csv".to_string(), "pf_metrics.csv".to_string()]);
    run.finish("pf", &artifacts)?;
    Ok(PfOutput {
        steps,
        metrics: metric_rows,
    })
}

// --------------------------------------------------------------------- ess

/// Weight diagnostic of the learned (or exact linear) adapted factors on
/// fresh simulated paths; writes `ess.csv`.
pub fn cmd_ess(run: &Run, opts: &PfOptions) -> Result<Vec<(usize, EssReport)>> {
    let ds = run.dataset()?;
    let pc = &run.cfg.pf;
    let exact = ExactFactors::for_spec(&ds.spec)?;
    if pc.ess_samples < 2 || pc.ess_steps == 0 {
        return Err(Error::Config("ESS needs ess_samples >= 2 and ess_steps >= 1".into()));
    }
    let mut sim_rng = stream_rng(run.seed(), purpose::ESS_SIM, 0, 0);
    let init = initial_particles(&ds.spec, pc.ess_samples, &mut sim_rng)?;
    let paths = ds.spec.simulate(pc.ess_steps, pc.ess_samples, &mut sim_rng)?;
    let mut artifacts = Vec::new();
    let mut rng = stream_rng(run.seed(), purpose::ESS, 0, 0);
    let series = match pc.factors {
        FactorSource::Learned => {
            let (m, a) = pf_model(run, &ds, opts.retrain)?;
            artifacts.extend(a);
            let mut out = vec![(1, pf::ess_diagnostic(init.view(), &exact, &m, &mut rng)?)];
            out.extend(ress_series(&paths.states, &exact, &m, &mut rng)?);
            out
        }
        FactorSource::Exact => {
            let ssm = ds.spec.linear().ok_or_else(|| {
                Error::Config("exact adapted factors exist only for linear-Gaussian systems".into())
            })??;
            let m = LinearFactors::new(ssm)?;
            let mut out = vec![(1, pf::ess_diagnostic(init.view(), &exact, &m, &mut rng)?)];
            out.extend(ress_series(&paths.states, &exact, &m, &mut rng)?);
            out
        }
    };
    let header = ["step", "ess", "ress", "chi2", "samples"].map(String::from);
    let rows: Vec<Vec<String>> = series
        .iter()
        .map(|(k, r)| {
            vec![
                k.to_string(),
                num(r.ess),
                num(r.ress),
                num(r.chi2),
                r.samples.to_string(),
            ]
        })
        .collect();
    write_csv(&run.path("ess.csv"), "ess/1", &header, &rows)?;
    artifacts.push("ess.csv".into());
    run.finish("ess", &artifacts)?;
    Ok(series)
}
