use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use latentwm::config::RunConfig;
use latentwm::env::{generate_dataset, load_dataset, save_dataset, Dataset, Perturbation};
use latentwm::eval::{
    embedding_stats, encode_dataset, fit_probe, latent_sequences, probe_agent_position, straightening,
    voe_test, write_embedding_stats_csv, write_probe_csv, write_straightening_csv, write_surprise_curves_csv,
    write_voe_csv, ProbeKind,
};
use latentwm::numerics::{DenseArray, SeededRng};
use latentwm::planner::plan_eval as run_plan_eval;
use latentwm::train::{self, write_train_log, LogRow, StepLoss};
use latentwm::worldmodel::{load_checkpoint, save_checkpoint, WorldModel};

use crate::{Axis, Common, ProbeTarget, Suite};

pub enum Failure {
    /// Bad invocation or config; exit code 1.
    Usage(String),
    /// Anything that failed while running; exit code 2.
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Resolved config and output directory for one invocation.
struct Run {
    cfg: RunConfig,
    out: PathBuf,
    started: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl Run {
    fn resolve(common: &Common) -> Result<Self, Failure> {
        let started = unix_now();
        let mut cfg = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
                RunConfig::from_text(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg = cfg.with_seed(seed).map_err(|e| usage(e.to_string()))?;
        }
        let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
        cfg.out_dir = out.display().to_string();
        Ok(Self { cfg, out, started })
    }

    fn prepare(&self) -> anyhow::Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        fs::write(self.out.join("config.toml"), self.cfg.to_text()?)?;
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Timestamps live only here, never in artifacts.
    fn finish(&self, command: &str) -> anyhow::Result<()> {
        let args: Vec<String> = std::env::args().collect();
        let info = format!(
            "command = {command}\nargs = {:?}\nstarted_unix = {}\nfinished_unix = {}\n",
            args.join(" "),
            self.started,
            unix_now()
        );
        fs::write(self.path("run_info.txt"), info)?;
        Ok(())
    }
}

fn read_dataset(path: &Path) -> anyhow::Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn read_model(path: &Path) -> anyhow::Result<WorldModel> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn subset(ds: &Dataset, max_episodes: usize) -> Dataset {
    let n = if max_episodes == 0 { ds.trajectories.len() } else { max_episodes.min(ds.trajectories.len()) };
    Dataset { trajectories: ds.trajectories[..n].to_vec(), ..ds.clone() }
}

pub fn generate(common: &Common, episodes: Option<usize>) -> Outcome {
    let run = Run::resolve(common)?;
    let n = episodes.unwrap_or(run.cfg.dataset.episodes);
    if n == 0 {
        return Err(usage("episodes must be at least 1"));
    }
    run.prepare()?;
    let ds = generate_dataset(&run.cfg.env, n, run.cfg.dataset.max_steps, run.cfg.dataset.seed)?;
    save_dataset(&ds, run.path("dataset.bin"))?;
    println!(
        "episodes {} mean_steps {:.2} success_rate {:.4}",
        ds.trajectories.len(),
        ds.mean_steps(),
        ds.success_rate()
    );
    run.finish("generate")?;
    Ok(())
}

fn train_into(run: &Run, cfg: &RunConfig, ds: &Dataset, dir: &Path) -> anyhow::Result<(WorldModel, Vec<LogRow>)> {
    fs::create_dir_all(dir)?;
    let model = WorldModel::new(cfg.model.clone(), cfg.model_seed)?;
    let (model, report) = train::train(model, ds, &cfg.train, &cfg.objective(), Some(&dir.join("checkpoints")))?;
    write_train_log(dir.join("train_log.csv"), &report.log)?;
    save_checkpoint(&model, dir.join("model.ckpt"))?;
    let _ = run;
    Ok((model, report.log))
}

pub fn train(common: &Common, dataset: &Path) -> Outcome {
    let run = Run::resolve(common)?;
    let ds = read_dataset(dataset)?;
    if ds.config != run.cfg.env {
        return Err(anyhow!("dataset was generated with a different env config than the run config").into());
    }
    run.prepare()?;
    let (_, log) = train_into(&run, &run.cfg, &ds, &run.out)?;
    if let Some(last) = log.last() {
        println!("steps {} final_total {:.6} final_pred {:.6}", log.len(), last.loss.total(), last.loss.pred());
    }
    run.finish("train")?;
    Ok(())
}

pub fn plan_eval(common: &Common, checkpoint: &Path, episodes: Option<usize>, budget: Option<usize>) -> Outcome {
    let mut run = Run::resolve(common)?;
    if let Some(n) = episodes {
        run.cfg.plan_eval.episodes = n;
    }
    if let Some(b) = budget {
        run.cfg.plan_eval.budget = b;
    }
    if run.cfg.plan_eval.episodes == 0 {
        return Err(usage("episodes must be at least 1"));
    }
    let model = read_model(checkpoint)?;
    run.prepare()?;
    let report = run_plan_eval(&model, &run.cfg.env, &run.cfg.cem, &run.cfg.plan_eval)?;
    let mut w = csv::Writer::from_path(run.path("plan_eval.csv"))?;
    w.write_record(["episode", "success", "steps_used", "plans"])?;
    for (i, e) in report.episodes.iter().enumerate() {
        w.write_record([i.to_string(), (e.success as u8).to_string(), e.steps_used.to_string(), e.plans.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(run.path("plan_eval_summary.csv"))?;
    w.write_record(["episodes", "successes", "success_rate", "std_error"])?;
    w.write_record([
        report.episodes.len().to_string(),
        report.successes.to_string(),
        report.success_rate.to_string(),
        report.std_error.to_string(),
    ])?;
    w.flush()?;
    println!("success_rate {:.4} std_error {:.4}", report.success_rate, report.std_error);
    run.finish("plan-eval")?;
    Ok(())
}

pub struct EvalInputs {
    pub checkpoint: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub latents: Option<PathBuf>,
    pub target: ProbeTarget,
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str, suite: &str) -> Result<&'a Path, Failure> {
    p.as_deref().ok_or_else(|| usage(format!("--{flag} is required for the {suite} suite")))
}

pub fn eval(common: &Common, suite: Suite, inputs: EvalInputs) -> Outcome {
    let run = Run::resolve(common)?;
    match suite {
        Suite::Probe => {
            let model = read_model(required(&inputs.checkpoint, "checkpoint", "probe")?)?;
            let ds = subset(&read_dataset(required(&inputs.dataset, "dataset", "probe")?)?, run.cfg.eval.max_episodes);
            run.prepare()?;
            let ev = &run.cfg.eval;
            let rows = match inputs.target {
                ProbeTarget::AgentXy => probe_agent_position(&model, &ds, ev.probe_split_seed, &ev.probe)?,
                ProbeTarget::Noise => {
                    let (z, _) = encode_dataset(&model, &ds)?;
                    let mut rng = SeededRng::new(ev.probe_split_seed ^ 0x6e6f_6973_65);
                    let y = DenseArray::matrix(z.rows(), 2, rng.normal_vec(2 * z.rows()));
                    [ProbeKind::Linear, ProbeKind::Nonlinear]
                        .into_iter()
                        .map(|k| fit_probe(&z, &y, "noise", k, ev.probe_split_seed, &ev.probe).map(|(_, r)| r))
                        .collect::<Result<Vec<_>, _>>()?
                }
            };
            write_probe_csv(run.path("probe.csv"), &rows)?;
            for r in &rows {
                println!("{} {} mse {:.6} r {:.4}", r.target_name, r.kind.as_str(), r.mse, r.pearson_r);
            }
        }
        Suite::Voe => {
            let model = read_model(required(&inputs.checkpoint, "checkpoint", "voe")?)?;
            let ds = read_dataset(required(&inputs.dataset, "dataset", "voe")?)?;
            run.prepare()?;
            let kinds = [Perturbation::Recolor, Perturbation::Teleport];
            let report = voe_test(&model, &ds, run.cfg.eval.voe_trials, &kinds, run.cfg.eval.voe_seed)?;
            write_voe_csv(run.path("voe.csv"), &report)?;
            write_surprise_curves_csv(run.path("surprise_curves.csv"), &report.example)?;
            for (k, t) in &report.tests {
                println!("{} t {:.4} p {:.3e}", latentwm::eval::perturbation_name(*k), t.t, t.p);
            }
        }
        Suite::Straighten => {
            let rows = straighten_rows(&run, &inputs)?;
            run.prepare()?;
            write_straightening_csv(run.path("straightening.csv"), &rows)?;
            for (step, s) in &rows {
                println!("step {step} S {s:.6}");
            }
        }
        Suite::Stats => {
            let model = read_model(required(&inputs.checkpoint, "checkpoint", "stats")?)?;
            let ds = subset(&read_dataset(required(&inputs.dataset, "dataset", "stats")?)?, run.cfg.eval.max_episodes);
            run.prepare()?;
            let (z, _) = encode_dataset(&model, &ds)?;
            let stats = embedding_stats(&z)?;
            write_embedding_stats_csv(run.path("embedding_stats.csv"), &stats)?;
            let mut w = csv::Writer::from_path(run.path("embedding_summary.csv"))?;
            w.write_record(["samples", "mean_std", "min_distance", "mean_distance", "max_distance"])?;
            w.write_record([
                z.rows().to_string(),
                stats.mean_std().to_string(),
                stats.min_distance.to_string(),
                stats.mean_distance.to_string(),
                stats.max_distance.to_string(),
            ])?;
            w.flush()?;
            println!("mean_std {:.6} mean_distance {:.6}", stats.mean_std(), stats.mean_distance);
        }
    }
    run.finish("eval")?;
    Ok(())
}

/// Latent sequences CSV: `sequence,t,z0,z1,...`, rows grouped by sequence.
fn read_latents(path: &Path) -> anyhow::Result<Vec<DenseArray>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut seqs: Vec<(String, Vec<Vec<f64>>)> = vec![];
    for rec in r.records() {
        let rec = rec?;
        let id = rec.get(0).ok_or_else(|| anyhow!("empty row"))?.to_string();
        let z = rec.iter().skip(2).map(|v| v.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>()?;
        match seqs.last_mut() {
            Some((last, rows)) if *last == id => rows.push(z),
            _ => seqs.push((id, vec![z])),
        }
    }
    seqs.into_iter().map(|(_, rows)| Ok(DenseArray::from_rows(&rows)?)).collect()
}

fn checkpoint_step(path: &Path) -> Option<u64> {
    path.file_stem()?.to_str()?.strip_prefix("step_")?.parse().ok()
}

fn straighten_rows(run: &Run, inputs: &EvalInputs) -> Result<Vec<(u64, f64)>, Failure> {
    if let Some(latents) = &inputs.latents {
        let seqs = read_latents(latents)?;
        return Ok(vec![(0, straightening(&seqs)?.value)]);
    }
    let ds = subset(&read_dataset(required(&inputs.dataset, "dataset", "straighten")?)?, run.cfg.eval.max_episodes);
    let mut models: Vec<(u64, PathBuf)> = vec![];
    if let Some(dir) = &inputs.checkpoints {
        for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            if let Some(step) = checkpoint_step(&path) {
                models.push((step, path));
            }
        }
        models.sort();
    } else if let Some(ckpt) = &inputs.checkpoint {
        models.push((checkpoint_step(ckpt).unwrap_or(0), ckpt.clone()));
    } else {
        return Err(usage("the straighten suite needs --latents, --checkpoints or --checkpoint"));
    }
    if models.is_empty() {
        return Err(anyhow!("no step_*.ckpt files found").into());
    }
    let mut rows = vec![];
    for (step, path) in models {
        let model = read_model(&path)?;
        rows.push((step, straightening(&latent_sequences(&model, &ds)?)?.value));
    }
    Ok(rows)
}

fn final_mean(log: &[LogRow], f: impl Fn(&StepLoss) -> Option<f64>) -> Option<f64> {
    let tail = &log[log.len().saturating_sub(10)..];
    let vals: Vec<f64> = tail.iter().filter_map(|r| f(&r.loss)).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn apply_axis(cfg: &mut RunConfig, axis: Axis, value: &str) -> Result<(), Failure> {
    let bad = || usage(format!("invalid value `{value}` for this axis"));
    match axis {
        Axis::Lambda => cfg.train.lambda_loss = value.trim().parse().map_err(|_| bad())?,
        Axis::Projections => cfg.train.num_projections = value.trim().parse().map_err(|_| bad())?,
        Axis::Knots => cfg.epps_pulley.knot_count = value.trim().parse().map_err(|_| bad())?,
        Axis::EmbedDim => cfg.model.embed_dim = value.trim().parse().map_err(|_| bad())?,
    }
    cfg.validate().map_err(|e| usage(e.to_string()))
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::Lambda => "lambda",
        Axis::Projections => "projections",
        Axis::Knots => "knots",
        Axis::EmbedDim => "embed_dim",
    }
}

pub fn sweep(common: &Common, axis: Axis, values: &[String], dataset: &Path) -> Outcome {
    let run = Run::resolve(common)?;
    if values.is_empty() || values.iter().any(|v| v.trim().is_empty()) {
        return Err(usage("--values must list at least one value"));
    }
    let mut points = vec![];
    for v in values {
        let mut cfg = run.cfg.clone();
        apply_axis(&mut cfg, axis, v)?;
        points.push((v.trim().to_string(), cfg));
    }
    let ds = read_dataset(dataset)?;
    if ds.config != run.cfg.env {
        return Err(anyhow!("dataset was generated with a different env config than the run config").into());
    }
    run.prepare()?;
    let name = axis_name(axis);
    let mut w = csv::Writer::from_path(run.path("sweep.csv"))?;
    w.write_record([
        "axis", "value", "final_total", "final_pred", "final_sigreg", "mean_std", "probe_r", "success_rate",
    ])?;
    for (value, cfg) in points {
        let dir = run.out.join(format!("{name}_{value}"));
        fs::create_dir_all(&dir)?;
        let mut point_cfg = cfg.clone();
        point_cfg.out_dir = dir.display().to_string();
        fs::write(dir.join("config.toml"), point_cfg.to_text()?)?;
        let (model, log) = train_into(&run, &cfg, &ds, &dir)?;
        let eval_ds = subset(&ds, cfg.eval.max_episodes);
        let (z, _) = encode_dataset(&model, &eval_ds)?;
        let mean_std = embedding_stats(&z)?.mean_std();
        let probe_r = match probe_agent_position(&model, &eval_ds, cfg.eval.probe_split_seed, &cfg.eval.probe) {
            Ok(rows) => rows[0].pearson_r.to_string(),
            // a collapsed encoder gives constant predictions, where r is undefined
            Err(_) => String::new(),
        };
        let success = if cfg.plan_eval.episodes > 0 {
            run_plan_eval(&model, &cfg.env, &cfg.cem, &cfg.plan_eval)?.success_rate.to_string()
        } else {
            String::new()
        };
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        w.write_record([
            name.to_string(),
            value.clone(),
            fmt(final_mean(&log, |l| Some(l.total()))),
            fmt(final_mean(&log, |l| Some(l.pred()))),
            fmt(final_mean(&log, |l| match l {
                StepLoss::Lewm { sigreg, .. } => Some(*sigreg),
                StepLoss::Pldm { .. } => None,
            })),
            mean_std.to_string(),
            probe_r,
            success,
        ])?;
        w.flush()?;
        println!("{name}={value} mean_std {mean_std:.4}");
    }
    run.finish("sweep")?;
    Ok(())
}
