//! Physical-understanding evaluations over a frozen model: probing,
//! violation-of-expectation surprise, latent path straightening and
//! collapse diagnostics.

mod latent;
mod probe;
pub mod stats;
mod surprise;

use std::path::Path;

pub use latent::{embedding_stats, straightening, EmbeddingStats, Straightness, MIN_VELOCITY_NORM};
pub use probe::{fit_probe, pearson, split_indices, Probe, ProbeConfig, ProbeKind, ProbeResult};
pub use stats::{paired_t_test, TTest};
pub use surprise::{
    perturbation_name, surprise_series, voe_test, LatentDynamics, SurpriseCurve, SurpriseSeries,
    VoeReport, VoeTrial, SURPRISE_WINDOW,
};

use crate::env::Dataset;
use crate::error::Result;
use crate::numerics::DenseArray;
use crate::worldmodel::WorldModel;

/// Every frame of every trajectory, encoded in eval mode, with the agent
/// position of each frame. Returns `(embeddings, agent_xy)`.
pub fn encode_dataset(model: &WorldModel, dataset: &Dataset) -> Result<(DenseArray, DenseArray)> {
    let mut frames = vec![];
    let mut xy = vec![];
    for traj in &dataset.trajectories {
        for t in 0..traj.len() {
            frames.push(traj.observation(t));
            xy.push(traj.states[t].agent.to_vec());
        }
    }
    let z = model.encode_eval(&DenseArray::from_rows(&frames)?)?;
    Ok((z, DenseArray::from_rows(&xy)?))
}

/// Per-trajectory eval-mode latent sequences (`T x d` each).
pub fn latent_sequences(model: &WorldModel, dataset: &Dataset) -> Result<Vec<DenseArray>> {
    dataset
        .trajectories
        .iter()
        .map(|traj| {
            let frames: Vec<Vec<f64>> = (0..traj.len()).map(|t| traj.observation(t)).collect();
            model.encode_eval(&DenseArray::from_rows(&frames)?)
        })
        .collect()
}

/// Linear and nonlinear agent-position probes on one split.
pub fn probe_agent_position(
    model: &WorldModel,
    dataset: &Dataset,
    split_seed: u64,
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeResult>> {
    let (z, xy) = encode_dataset(model, dataset)?;
    [ProbeKind::Linear, ProbeKind::Nonlinear]
        .into_iter()
        .map(|kind| fit_probe(&z, &xy, "agent_xy", kind, split_seed, cfg).map(|(_, r)| r))
        .collect()
}

pub fn write_probe_csv(path: impl AsRef<Path>, rows: &[ProbeResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["target", "kind", "mse", "mse_std", "r"])?;
    for r in rows {
        w.write_record([
            r.target_name.clone(),
            r.kind.as_str().to_string(),
            r.mse.to_string(),
            r.mse_std.to_string(),
            r.pearson_r.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per trial and kind; `t` and `p` repeat the kind's test result.
pub fn write_voe_csv(path: impl AsRef<Path>, report: &VoeReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["kind", "trial", "window_max_unperturbed", "window_max_perturbed", "t", "p"])?;
    for tr in &report.trials {
        let test = report.test(tr.kind).expect("every trial kind is tested");
        w.write_record([
            perturbation_name(tr.kind).to_string(),
            tr.trial.to_string(),
            tr.window_max_unperturbed.to_string(),
            tr.window_max_perturbed.to_string(),
            test.t.to_string(),
            test.p.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Plot-ready surprise curves: frame index then one column per series.
pub fn write_surprise_curves_csv(path: impl AsRef<Path>, series: &SurpriseSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string(), "unperturbed".to_string()];
    header.extend(series.perturbed.iter().map(|(k, _)| perturbation_name(*k).to_string()));
    w.write_record(&header)?;
    let base = &series.unperturbed;
    for (k, v) in base.values.iter().enumerate() {
        let t = base.start + k;
        let mut row = vec![t.to_string(), v.to_string()];
        row.extend(series.perturbed.iter().map(|(_, c)| c.at(t).map_or(String::new(), |x| x.to_string())));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_straightening_csv(path: impl AsRef<Path>, rows: &[(u64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["checkpoint_step", "S"])?;
    for (step, s) in rows {
        w.write_record([step.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_embedding_stats_csv(path: impl AsRef<Path>, stats: &EmbeddingStats) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dim", "mean", "std"])?;
    for (i, (m, s)) in stats.mean.iter().zip(&stats.std).enumerate() {
        w.write_record([i.to_string(), m.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
