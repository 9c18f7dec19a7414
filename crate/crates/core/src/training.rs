//! End-to-end training of the feature network through the unrolled solver.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_net::{forward_pyramid, Branch, ModelParams};
use crate::geometry::{wrap_angle, Pose};
use crate::lm_solver::{solve_coarse_to_fine, Problem, SolveTrace, SolverConfig};
use crate::seed;
use crate::synthetic::{ClientDataset, ClientSample};
use crate::tensor::{Graph, NodeId, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    /// Meters per radian of yaw error in the pose loss.
    pub rotation_weight: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub solver: SolverConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            local_epochs: 1,
            rotation_weight: 1.0,
            grad_clip: 10.0,
            solver: SolverConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !betas_ok || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "optimizer settings out of range: lr {}, betas ({}, {}), eps {}",
                self.lr, self.beta1, self.beta2, self.eps
            )));
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return Err(Error::Config(
                "batch_size and local_epochs must be at least 1".into(),
            ));
        }
        if !(self.rotation_weight >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config(
                "rotation_weight and grad_clip must be non-negative".into(),
            ));
        }
        self.solver.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pose_star: Pose,
}

impl GroundTruth {
    pub fn new(pose_star: Pose) -> Result<Self> {
        if !pose_star.is_finite() {
            return Err(Error::NonFinite(format!("ground-truth pose {pose_star:?}")));
        }
        Ok(GroundTruth { pose_star })
    }
}

fn entry_loss(p: &Pose, gt: &Pose, rho: f64) -> f64 {
    (p.x_m - gt.x_m).hypot(p.y_m - gt.y_m) + rho * wrap_angle(p.yaw_rad - gt.yaw_rad).abs()
}

/// Sum over every solver iteration of translation error (m) plus `rho`
/// times the absolute wrapped yaw error (rad). A level that converged early
/// keeps its pose for the iterations it skipped, which count too.
pub fn pose_loss(trace: &SolveTrace, gt: &GroundTruth, rho: f64) -> Result<f64> {
    if trace.entries.is_empty() {
        return Err(Error::InvalidArgument("pose loss of an empty trace".into()));
    }
    Ok(trace
        .entries
        .iter()
        .map(|e| {
            let repeats = if e.converged && trace.iters_per_level > e.iter {
                trace.iters_per_level - e.iter
            } else {
                1
            };
            repeats as f64 * entry_loss(&e.pose, &gt.pose_star, rho)
        })
        .sum())
}

/// Graph version of [`pose_loss`] over solver pose nodes.
pub fn pose_loss_node(
    g: &mut Graph,
    poses: &[NodeId],
    gt: &GroundTruth,
    rho: f64,
) -> Result<NodeId> {
    if poses.is_empty() {
        return Err(Error::InvalidArgument("pose loss of an empty trace".into()));
    }
    let target = g.constant(gt.pose_star.to_tensor());
    let mut total: Option<NodeId> = None;
    for &p in poses {
        let d = g.sub(p, target)?;
        let t = g.slice(d, 0, 2)?;
        let t = g.norm(t);
        let r = g.slice(d, 2, 1)?;
        let r = g.wrap_angle(r);
        let r = g.abs(r);
        let r = g.scale(r, rho as Real);
        let r = g.sum(r);
        let term = g.add(t, r)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty"))
}

/// Builds both pyramids for `sample` on `g` and runs the solver from the
/// sample's initial pose.
pub fn solve_sample(
    g: &mut Graph,
    params_nodes: &crate::feature_net::ModelNodes,
    sample: &ClientSample,
    cfg: &SolverConfig,
) -> Result<crate::lm_solver::SolveOutput> {
    let sat_img = g.constant(sample.aerial.clone());
    let grd_img = g.constant(sample.ground.clone());
    let sat = forward_pyramid(g, sat_img, params_nodes, Branch::Sat)?;
    let grd = forward_pyramid(g, grd_img, params_nodes, Branch::Grd)?;
    let problem = Problem::new(g, &sat, &grd, &sample.intrinsics, &sample.georef)?;
    let init = g.constant(sample.init_pose.to_tensor());
    solve_coarse_to_fine(g, &problem, init, cfg)
}

/// Pose loss of one sample and its gradient for every parameter.
pub fn loss_and_grad(
    params: &ModelParams,
    sample: &ClientSample,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let ctx = |e: Error| e.context(format!("sample {}", sample.id));
    let mut g = Graph::new();
    let nodes = params.to_graph(&mut g);
    let out = solve_sample(&mut g, &nodes, sample, &cfg.solver).map_err(ctx)?;
    let gt = GroundTruth::new(sample.gt_pose).map_err(ctx)?;
    let loss = pose_loss_node(&mut g, &out.loss_nodes, &gt, cfg.rotation_weight).map_err(ctx)?;
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss of sample {}", sample.id)));
    }
    g.backward(loss).map_err(ctx)?;
    let grads = nodes.grads(&g);
    if let Some(k) = grads.iter().position(|t| !t.all_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of {} for sample {}",
            params.names()[k],
            sample.id
        )));
    }
    Ok((value, grads))
}

/// Adam moments for every parameter, kept across epochs and rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[Tensor],
        cfg: &TrainConfig,
    ) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::shape(
                "adam",
                format!(
                    "{} params, {} grads, {} moments",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (k, p) in params.tensors_mut().iter_mut().enumerate() {
            let gk = grads[k].data();
            if gk.len() != p.numel() {
                return Err(Error::shape(
                    "adam",
                    format!(
                        "gradient {k} has {} elements, param {}",
                        gk.len(),
                        p.numel()
                    ),
                ));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = gk[i] as f64;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let upd = cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                *w = (*w as f64 - upd) as Real;
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as Real;
        for t in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub steps: usize,
    /// Mean loss over the samples that produced a gradient.
    pub mean_loss: f64,
    /// Samples skipped because the solver failed on them.
    pub skipped: usize,
    /// Mean loss of each minibatch, in order.
    pub batch_losses: Vec<f64>,
    pub wall_time_s: f64,
}

/// One pass over `data` in seeded random order, one Adam step per
/// minibatch on the mean gradient.
pub fn train_epoch(
    params: &mut ModelParams,
    opt: &mut Adam,
    data: &ClientDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<EpochStats> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "dataset {} is empty",
            data.name
        )));
    }
    let start = Instant::now();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seed::rng(seed, &[0x5f1e]));
    let mut batch_losses = Vec::new();
    let mut total = 0.0;
    let mut used = 0usize;
    for batch in order.chunks(cfg.batch_size) {
        let mut acc: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.dims()))
            .collect();
        let mut batch_loss = 0.0;
        let mut n = 0usize;
        for &i in batch {
            let (loss, grads) = match loss_and_grad(params, &data.samples[i], cfg) {
                Ok(r) => r,
                Err(e) if e.is_solver_failure() => {
                    log::warn!("skipping {e}");
                    continue;
                }
                Err(e) => return Err(e),
            };
            batch_loss += loss;
            n += 1;
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(x, y)| *x += y);
            }
        }
        if n == 0 {
            continue;
        }
        let inv = 1.0 / n as Real;
        acc.iter_mut()
            .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= inv));
        clip_global_norm(&mut acc, cfg.grad_clip);
        opt.step(params, &acc, cfg)?;
        total += batch_loss;
        used += n;
        batch_losses.push(batch_loss / n as f64);
    }
    Ok(EpochStats {
        steps: batch_losses.len(),
        mean_loss: if used == 0 {
            f64::NAN
        } else {
            total / used as f64
        },
        skipped: data.len() - used,
        batch_losses,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Absolute errors of one estimate, decomposed in the ground-truth frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Perpendicular to the ground-truth heading (m).
    pub lateral_m: f64,
    /// Along the ground-truth heading (m).
    pub longitudinal_m: f64,
    /// Wrapped heading difference in `[0, 180]` degrees.
    pub yaw_deg: f64,
}

pub fn pose_error(pred: &Pose, gt: &Pose) -> PoseError {
    let (dx, dy) = (pred.x_m - gt.x_m, pred.y_m - gt.y_m);
    let (f, r) = (gt.forward(), gt.right());
    PoseError {
        lateral_m: (dx * r.0 + dy * r.1).abs(),
        longitudinal_m: (dx * f.0 + dy * f.1).abs(),
        yaw_deg: wrap_angle(pred.yaw_rad - gt.yaw_rad).abs().to_degrees(),
    }
}

/// Runs the solver on every sample with frozen parameters. A sample on
/// which the solver fails is scored at its initial pose.
pub fn evaluate_pose_errors(
    params: &ModelParams,
    data: &ClientDataset,
    cfg: &SolverConfig,
) -> Result<Vec<PoseError>> {
    data.samples
        .iter()
        .map(|s| {
            let mut g = Graph::new();
            let nodes = params.to_graph_frozen(&mut g);
            let pose = match solve_sample(&mut g, &nodes, s, cfg) {
                Ok(out) => out.pose,
                Err(e) if e.is_solver_failure() => {
                    log::warn!("sample {}: {e}; scoring the initial pose", s.id);
                    s.init_pose
                }
                Err(e) => return Err(e.context(format!("sample {}", s.id))),
            };
            Ok(pose_error(&pose, &s.gt_pose))
        })
        .collect()
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub scenario: String,
    pub round: usize,
    pub client: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_time_s: f64,
}

pub fn append_log(path: &Path, records: &[TrainLogRecord]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}
