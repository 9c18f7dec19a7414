//! Coarse-to-fine Levenberg-Marquardt pose refinement over feature
//! pyramids.
//!
//! At each level the satellite features are warped into the ground view at
//! the current pose, compared with the ground features, and the pose is
//! updated from the Gauss-Newton normal equations with multiplicative
//! damping. Every quantity that feeds an accepted pose is a graph node, so
//! losses on the pose trace differentiate back into the feature maps.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_net::FeaturePyramid;
use crate::geometry::{wrap_angle, AerialGeoref, CameraIntrinsics, LevelGeometry, Pose};
use crate::tensor::{sample_bilinear, CustomOp, Graph, NodeId, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Iteration budget per pyramid level.
    pub max_iters_per_level: usize,
    pub damping_init: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Per-component step size `(x m, y m, yaw rad)` below which a level
    /// has converged.
    pub convergence_tol: [f64; 3],
    pub min_valid_fraction: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters_per_level: 5,
            damping_init: 1e-3,
            damping_up: 10.0,
            damping_down: 10.0,
            convergence_tol: [1e-3, 1e-3, 1e-4],
            min_valid_fraction: 0.05,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters_per_level == 0 || !(self.damping_init > 0.0) {
            return Err(Error::Config(format!(
                "solver needs max_iters_per_level >= 1 and damping_init > 0, got {} and {}",
                self.max_iters_per_level, self.damping_init
            )));
        }
        Ok(())
    }
}

/// One solver iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// 0 is the coarsest level.
    pub level: usize,
    pub iter: usize,
    /// Pose after the iteration.
    pub pose: Pose,
    /// Masked mean squared feature residual at `pose`.
    pub residual: f64,
    /// Damping used for this iteration's step.
    pub lambda: f64,
    pub valid_fraction: f64,
    pub accepted: bool,
    pub converged: bool,
    /// The normal equations were empty (no feature gradient).
    pub no_gradient: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub init: Option<Pose>,
    /// Iteration budget per level the solve ran with; 0 when unknown.
    #[serde(default)]
    pub iters_per_level: usize,
    pub entries: Vec<TraceEntry>,
}

impl SolveTrace {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Graph handles for one pyramid level.
#[derive(Clone, Debug)]
pub struct LevelProblem {
    pub sat: NodeId,
    pub grd: NodeId,
    sat_du: NodeId,
    sat_dv: NodeId,
    pub geom: LevelGeometry,
}

/// Both pyramids of one sample, with per-level warp geometry.
#[derive(Clone, Debug)]
pub struct Problem {
    pub levels: Vec<LevelProblem>,
}

impl Problem {
    pub fn new(
        g: &mut Graph,
        sat: &FeaturePyramid,
        grd: &FeaturePyramid,
        intr: &CameraIntrinsics,
        geo: &AerialGeoref,
    ) -> Result<Self> {
        if sat.levels.len() != grd.levels.len() || sat.scales != grd.scales || sat.levels.is_empty()
        {
            return Err(Error::shape(
                "solver",
                format!(
                    "pyramids must be level-aligned, got scales {:?} and {:?}",
                    sat.scales, grd.scales
                ),
            ));
        }
        let mut levels = Vec::with_capacity(sat.levels.len());
        for (l, (&s, &m)) in sat.levels.iter().zip(&grd.levels).enumerate() {
            let scale = sat.scales[l];
            let (cs, hs, ws) = g.value(s).chw()?;
            let (cg, hg, wg) = g.value(m).chw()?;
            let lgeo = geo.downscaled(scale);
            if cs != cg || hs != lgeo.height_px || ws != lgeo.width_px {
                return Err(Error::shape(
                    "solver",
                    format!(
                        "level {l}: satellite {cs}x{hs}x{ws} vs ground {cg}x{hg}x{wg}, aerial footprint {}x{}",
                        lgeo.height_px, lgeo.width_px
                    ),
                ));
            }
            let (du, dv) = g.spatial_gradient(s)?;
            levels.push(LevelProblem {
                sat: s,
                grd: m,
                sat_du: du,
                sat_dv: dv,
                geom: LevelGeometry::new(intr, geo, scale, (hg, wg)),
            });
        }
        Ok(Problem { levels })
    }
}

/// Masked residual value without building graph nodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cost {
    pub value: f64,
    pub valid: usize,
    pub fraction: f64,
}

/// Mean over valid pixels of the channel-summed squared residual, read from
/// the graph's current values.
pub fn residual_cost(g: &Graph, level: &LevelProblem, pose: &Pose) -> Result<Cost> {
    let coords = level.geom.coords(pose);
    let (warped, inb) = sample_bilinear(g.value(level.sat), &coords)?;
    let grd = g.value(level.grd);
    let n = inb.len();
    let c = warped.numel() / n;
    let mut sum = 0.0f64;
    let mut valid = 0usize;
    for i in 0..n {
        if !(inb[i] && level.geom.rays.valid[i]) {
            continue;
        }
        valid += 1;
        for ch in 0..c {
            let d = warped.data()[ch * n + i] as f64 - grd.data()[ch * n + i] as f64;
            sum += d * d;
        }
    }
    Ok(Cost {
        value: if valid > 0 { sum / valid as f64 } else { 0.0 },
        valid,
        fraction: valid as f64 / n as f64,
    })
}

/// Feature residual `warp(sat) - grd` at a pose node, zeroed outside the
/// valid mask (below the horizon and inside the aerial map).
pub fn residual(
    g: &mut Graph,
    problem: &Problem,
    level: usize,
    pose: NodeId,
    min_valid_fraction: f64,
) -> Result<(NodeId, Vec<bool>)> {
    let lp = problem
        .levels
        .get(level)
        .ok_or_else(|| Error::InvalidArgument(format!("level {level} out of range")))?;
    let grid = lp.geom.warp_node(g, pose);
    let (warped, inb) = g.grid_sample_bilinear(lp.sat, grid)?;
    let mask: Vec<bool> = inb
        .iter()
        .zip(&lp.geom.rays.valid)
        .map(|(&a, &b)| a && b)
        .collect();
    let count = mask.iter().filter(|&&m| m).count();
    let fraction = count as f64 / mask.len() as f64;
    if fraction < min_valid_fraction {
        return Err(Error::DegenerateView {
            level,
            fraction,
            min: min_valid_fraction,
        });
    }
    let e = g.sub(warped, lp.grd)?;
    let (h, w) = (lp.geom.rays.height, lp.geom.rays.width);
    let m = g.constant(Tensor::new(
        vec![1, h, w],
        mask.iter().map(|&b| b as u8 as Real).collect(),
    )?);
    let e = g.mul_bcast(e, m)?;
    Ok((e, mask))
}

/// Result of one damped step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Pose node after the step (the input pose when rejected).
    pub pose: NodeId,
    /// Applied update (zero when rejected).
    pub delta: [f64; 3],
    /// Solved update, whether or not it was applied.
    pub proposed: [f64; 3],
    pub lambda: f64,
    pub accepted: bool,
    pub no_gradient: bool,
    /// Cost at the returned pose.
    pub cost: Cost,
    /// Cost at the input pose.
    pub cost_before: Cost,
    /// Valid-pixel mask of the residual at the input pose.
    pub mask: Vec<bool>,
}

/// Trace of `H` below which the normal equations count as empty.
const NO_GRADIENT_TRACE: f64 = 1e-12;

/// One Levenberg-Marquardt iteration at `level` from the pose node `pose`.
pub fn lm_step(
    g: &mut Graph,
    problem: &Problem,
    level: usize,
    pose: NodeId,
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<StepOutcome> {
    let lp = problem.levels[level].clone();
    let (e, mask) = residual(g, problem, level, pose, cfg.min_valid_fraction)?;
    let current = Pose::from_tensor(g.value(pose));
    // Both sides of the accept test go through the same evaluation.
    let cost_before = residual_cost(g, &lp, &current)?;

    let grid = lp.geom.warp_node(g, pose);
    let (gu, _) = g.grid_sample_bilinear(lp.sat_du, grid)?;
    let (gv, _) = g.grid_sample_bilinear(lp.sat_dv, grid)?;
    let jac = lp.geom.jacobian_node(g, pose);
    let ne = normal_equations(g, gu, gv, jac, e, &mask)?;
    let nev: Vec<f64> = g.value(ne).data().iter().map(|&v| v as f64).collect();
    if nev[0] + nev[3] + nev[5] < NO_GRADIENT_TRACE {
        return Ok(StepOutcome {
            pose,
            delta: [0.0; 3],
            proposed: [0.0; 3],
            lambda,
            accepted: false,
            no_gradient: true,
            cost: cost_before,
            cost_before,
            mask,
        });
    }

    let hd = damped_hessian(g, ne, lambda);
    let b = g.slice(ne, 6, 3)?;
    let x = g.solve3(hd, b)?;
    let candidate = pose_update(g, pose, x);
    let cand_pose = Pose::from_tensor(g.value(candidate));
    let cand_cost = residual_cost(g, &lp, &cand_pose)?;
    let proposed = [
        cand_pose.x_m - current.x_m,
        cand_pose.y_m - current.y_m,
        wrap_angle(cand_pose.yaw_rad - current.yaw_rad),
    ];
    // The pose must stay observable at every level, not just this one, or
    // the finer levels would start from a degenerate view.
    let usable = cand_pose.is_finite()
        && cand_cost.value.is_finite()
        && problem
            .levels
            .iter()
            .all(|l| l.geom.valid_fraction(&cand_pose) >= cfg.min_valid_fraction);
    if usable && cand_cost.value < cost_before.value {
        Ok(StepOutcome {
            pose: candidate,
            delta: proposed,
            proposed,
            lambda: lambda / cfg.damping_down,
            accepted: true,
            no_gradient: false,
            cost: cand_cost,
            cost_before,
            mask,
        })
    } else {
        Ok(StepOutcome {
            pose,
            delta: [0.0; 3],
            proposed,
            lambda: lambda * cfg.damping_up,
            accepted: false,
            no_gradient: false,
            cost: cost_before,
            cost_before,
            mask,
        })
    }
}

/// Final pose and the per-iteration trace, with graph handles for both.
#[derive(Clone, Debug)]
pub struct SolveOutput {
    pub pose: Pose,
    pub pose_node: NodeId,
    pub trace: SolveTrace,
    /// Pose node after each trace entry.
    pub trace_nodes: Vec<NodeId>,
    /// `trace_nodes` with each level's converged pose repeated for the
    /// iterations it skipped, so every level contributes `tau` poses.
    pub loss_nodes: Vec<NodeId>,
    /// Hash of every discrete choice the solve made (accept/reject,
    /// convergence, valid masks). The unrolled loss is smooth in the
    /// parameters only while this stays fixed.
    pub branch: u64,
}

/// Runs [`lm_step`] up to `max_iters_per_level` times per level, coarse to
/// fine, carrying the pose between levels. Damping restarts at every level.
pub fn solve_coarse_to_fine(
    g: &mut Graph,
    problem: &Problem,
    init: NodeId,
    cfg: &SolverConfig,
) -> Result<SolveOutput> {
    cfg.validate()?;
    let mut pose = init;
    let mut trace = SolveTrace {
        init: Some(Pose::from_tensor(g.value(init))),
        iters_per_level: cfg.max_iters_per_level,
        entries: Vec::new(),
    };
    let mut nodes = Vec::new();
    let mut loss_nodes = Vec::new();
    let mut branch = DefaultHasher::new();
    for level in 0..problem.levels.len() {
        let mut lambda = cfg.damping_init;
        for iter in 0..cfg.max_iters_per_level {
            let step = lm_step(g, problem, level, pose, lambda, cfg)
                .map_err(|e| e.context(format!("level {level}, iteration {iter}")))?;
            // A step below tolerance ends the level even when rejected: the
            // pose is stationary either way.
            let converged = step.no_gradient
                || step
                    .proposed
                    .iter()
                    .zip(&cfg.convergence_tol)
                    .all(|(d, t)| d.abs() < *t);
            let p = Pose::from_tensor(g.value(step.pose));
            if !p.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pose at level {level}, iteration {iter}"
                )));
            }
            trace.entries.push(TraceEntry {
                level,
                iter,
                pose: p,
                residual: step.cost.value,
                lambda,
                valid_fraction: step.cost.fraction,
                accepted: step.accepted,
                converged,
                no_gradient: step.no_gradient,
            });
            (
                level,
                step.accepted,
                converged,
                step.no_gradient,
                &step.mask,
            )
                .hash(&mut branch);
            nodes.push(step.pose);
            pose = step.pose;
            lambda = step.lambda;
            if converged {
                loss_nodes
                    .extend(std::iter::repeat_n(step.pose, cfg.max_iters_per_level - iter));
                break;
            }
            loss_nodes.push(step.pose);
        }
    }
    Ok(SolveOutput {
        pose: Pose::from_tensor(g.value(pose)),
        pose_node: pose,
        trace,
        trace_nodes: nodes,
        loss_nodes,
        branch: branch.finish(),
    })
}

/// Normal equations `H = J^T J`, `b = J^T e` averaged over valid pixels,
/// with `J = [gu gv] * d(u, v)/d(x, y, yaw)` per pixel and channel.
/// Output: `[H00, H01, H02, H11, H12, H22, b0, b1, b2]`.
fn normal_equations(
    g: &mut Graph,
    gu: NodeId,
    gv: NodeId,
    jac: NodeId,
    e: NodeId,
    mask: &[bool],
) -> Result<NodeId> {
    let (c, h, w) = g.value(e).chw()?;
    let n = h * w;
    let count = mask.iter().filter(|&&m| m).count().max(1) as f64;
    let (gud, gvd, jd, ed) = (
        g.value(gu).data(),
        g.value(gv).data(),
        g.value(jac).data(),
        g.value(e).data(),
    );
    let mut acc = [0.0f64; 9];
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let ju = [jd[i] as f64, jd[n + i] as f64, jd[2 * n + i] as f64];
        let jv = [
            jd[3 * n + i] as f64,
            jd[4 * n + i] as f64,
            jd[5 * n + i] as f64,
        ];
        for ch in 0..c {
            let k = ch * n + i;
            let (a, b, r) = (gud[k] as f64, gvd[k] as f64, ed[k] as f64);
            let j = [
                a * ju[0] + b * jv[0],
                a * ju[1] + b * jv[1],
                a * ju[2] + b * jv[2],
            ];
            acc[0] += j[0] * j[0];
            acc[1] += j[0] * j[1];
            acc[2] += j[0] * j[2];
            acc[3] += j[1] * j[1];
            acc[4] += j[1] * j[2];
            acc[5] += j[2] * j[2];
            acc[6] += j[0] * r;
            acc[7] += j[1] * r;
            acc[8] += j[2] * r;
        }
    }
    let out = Tensor::from_vec(acc.iter().map(|&v| (v / count) as Real).collect());
    Ok(g.custom(
        &[gu, gv, jac, e],
        out,
        Box::new(NormalEquationsOp {
            mask: mask.to_vec(),
            count,
        }),
    ))
}

struct NormalEquationsOp {
    mask: Vec<bool>,
    count: f64,
}

impl CustomOp for NormalEquationsOp {
    fn name(&self) -> &str {
        "normal_equations"
    }

    fn vjp(&self, inputs: &[&Tensor], _output: &Tensor, go: &[Real]) -> Vec<Option<Vec<Real>>> {
        let (gu, gv, jac, e) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
        );
        let n = self.mask.len();
        let c = e.len() / n;
        let s = 1.0 / self.count;
        let hb = [
            [go[0] as f64 * s, go[1] as f64 * s, go[2] as f64 * s],
            [go[1] as f64 * s, go[3] as f64 * s, go[4] as f64 * s],
            [go[2] as f64 * s, go[4] as f64 * s, go[5] as f64 * s],
        ];
        let bb = [go[6] as f64 * s, go[7] as f64 * s, go[8] as f64 * s];
        let mut dgu = vec![0.0 as Real; gu.len()];
        let mut dgv = vec![0.0 as Real; gv.len()];
        let mut djac = vec![0.0 as Real; jac.len()];
        let mut de = vec![0.0 as Real; e.len()];
        for i in 0..n {
            if !self.mask[i] {
                continue;
            }
            let ju = [jac[i] as f64, jac[n + i] as f64, jac[2 * n + i] as f64];
            let jv = [
                jac[3 * n + i] as f64,
                jac[4 * n + i] as f64,
                jac[5 * n + i] as f64,
            ];
            let mut dju = [0.0f64; 3];
            let mut djv = [0.0f64; 3];
            for ch in 0..c {
                let k = ch * n + i;
                let (a, b, r) = (gu[k] as f64, gv[k] as f64, e[k] as f64);
                let j = [
                    a * ju[0] + b * jv[0],
                    a * ju[1] + b * jv[1],
                    a * ju[2] + b * jv[2],
                ];
                // Each output H_pq (p <= q) is sum J_p J_q, so its adjoint
                // reaches J_p through J_q, twice on the diagonal.
                let jb: [f64; 3] = std::array::from_fn(|p| {
                    (0..3).map(|q| hb[p][q] * j[q]).sum::<f64>() + hb[p][p] * j[p] + bb[p] * r
                });
                de[k] = (bb[0] * j[0] + bb[1] * j[1] + bb[2] * j[2]) as Real;
                dgu[k] = (jb[0] * ju[0] + jb[1] * ju[1] + jb[2] * ju[2]) as Real;
                dgv[k] = (jb[0] * jv[0] + jb[1] * jv[1] + jb[2] * jv[2]) as Real;
                for p in 0..3 {
                    dju[p] += jb[p] * a;
                    djv[p] += jb[p] * b;
                }
            }
            for p in 0..3 {
                djac[p * n + i] = dju[p] as Real;
                djac[(3 + p) * n + i] = djv[p] as Real;
            }
        }
        vec![Some(dgu), Some(dgv), Some(djac), Some(de)]
    }
}

/// `H + lambda * diag(H)` as a `3 x 3` node from the normal-equation vector.
fn damped_hessian(g: &mut Graph, ne: NodeId, lambda: f64) -> NodeId {
    let v: Vec<f64> = g.value(ne).data().iter().map(|&x| x as f64).collect();
    let d = 1.0 + lambda;
    let m = [
        v[0] * d,
        v[1],
        v[2],
        v[1],
        v[3] * d,
        v[4],
        v[2],
        v[4],
        v[5] * d,
    ];
    let out = Tensor::new(vec![3, 3], m.iter().map(|&x| x as Real).collect()).expect("3x3");
    g.custom(&[ne], out, Box::new(DampedHessianOp { lambda }))
}

struct DampedHessianOp {
    lambda: f64,
}

impl CustomOp for DampedHessianOp {
    fn name(&self) -> &str {
        "damped_hessian"
    }

    fn vjp(&self, _inputs: &[&Tensor], _output: &Tensor, go: &[Real]) -> Vec<Option<Vec<Real>>> {
        let d = (1.0 + self.lambda) as Real;
        let mut gi = vec![0.0 as Real; 9];
        gi[0] = go[0] * d;
        gi[1] = go[1] + go[3];
        gi[2] = go[2] + go[6];
        gi[3] = go[4] * d;
        gi[4] = go[5] + go[7];
        gi[5] = go[8] * d;
        vec![Some(gi)]
    }
}

/// `pose - x` with the yaw wrapped.
fn pose_update(g: &mut Graph, pose: NodeId, x: NodeId) -> NodeId {
    let p = g.value(pose).data().to_vec();
    let d = g.value(x).data().to_vec();
    let out = Tensor::from_vec(vec![
        p[0] - d[0],
        p[1] - d[1],
        wrap_angle(p[2] as f64 - d[2] as f64) as Real,
    ]);
    g.custom(&[pose, x], out, Box::new(PoseUpdateOp))
}

struct PoseUpdateOp;

impl CustomOp for PoseUpdateOp {
    fn name(&self) -> &str {
        "pose_update"
    }

    fn vjp(&self, _inputs: &[&Tensor], _output: &Tensor, go: &[Real]) -> Vec<Option<Vec<Real>>> {
        vec![Some(go.to_vec()), Some(go.iter().map(|v| -v).collect())]
    }
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use proptest::prelude::*;

    use super::*;
    use crate::feature_net::{identity_pyramid, identity_pyramid_with, IDENTITY_SCALES};
    use crate::synthetic::{
        gen_texture, make_sample, ClientSample, EnvironmentClass, EnvironmentKind, PerturbRange,
        Texture, TEXTURE_RES_M, TEXTURE_SIZE,
    };
    use crate::test_support::{max_grad_err, rand_tensor, FD_STEP, OP_TOL};

    fn textures() -> &'static [Texture] {
        static T: OnceLock<Vec<Texture>> = OnceLock::new();
        T.get_or_init(|| {
            EnvironmentKind::ALL
                .iter()
                .enumerate()
                .map(|(i, &k)| gen_texture(&EnvironmentClass::new(k), 900 + i as u64))
                .collect()
        })
    }

    fn sample(env: usize, gt: Pose, range: &PerturbRange, seed: u64) -> ClientSample {
        let kind = EnvironmentKind::ALL[env];
        make_sample(format!("t{seed}"), kind, &textures()[env], gt, range, seed).unwrap()
    }

    fn identity_problem(g: &mut Graph, s: &ClientSample) -> Problem {
        let ps = identity_pyramid(g, &s.aerial).unwrap();
        let pg = identity_pyramid(g, &s.ground).unwrap();
        Problem::new(g, &ps, &pg, &s.intrinsics, &s.georef).unwrap()
    }

    fn no_offset() -> PerturbRange {
        PerturbRange {
            xy_m: 0.0,
            yaw_deg: 0.0,
        }
    }

    /// Texture whose value depends only on the east coordinate.
    fn field_texture(f: impl Fn(f64) -> f64) -> Texture {
        let n = TEXTURE_SIZE;
        let half = n as f64 / 2.0;
        let raster = Tensor::from_fn(&[3, n, n], |i| {
            let col = i % n;
            f((col as f64 - half) * TEXTURE_RES_M) as Real
        });
        Texture::from_raster(raster, TEXTURE_RES_M).unwrap()
    }

    /// Ground features sampled from the satellite level at `pose`, so the
    /// residual there is exactly zero on every level.
    fn consistent_problem(g: &mut Graph, s: &ClientSample, pose: &Pose) -> Problem {
        let sat = identity_pyramid(g, &s.aerial).unwrap();
        let gh = s.ground.dims()[1];
        let mut grd = Vec::new();
        for (&node, &scale) in sat.levels.iter().zip(&sat.scales) {
            let hw = gh / scale as usize;
            let geom = LevelGeometry::new(&s.intrinsics, &s.georef, scale, (hw, hw));
            let (t, _) = sample_bilinear(g.value(node), &geom.coords(pose)).unwrap();
            grd.push(g.constant(t));
        }
        let grd = FeaturePyramid {
            levels: grd,
            scales: sat.scales.clone(),
        };
        Problem::new(g, &sat, &grd, &s.intrinsics, &s.georef).unwrap()
    }

    #[test]
    fn residual_vanishes_at_ground_truth_on_finest_level() {
        for env in 0..3 {
            let gt = Pose::new(10.0 * env as f64 - 7.0, 4.0, 0.3 + env as f64);
            let s = sample(env, gt, &PerturbRange::default(), env as u64);
            let mut g = Graph::new();
            let prob = identity_problem(&mut g, &s);
            let last = prob.levels.len() - 1;
            let pose = g.constant(gt.to_tensor());
            let (e, mask) = residual(&mut g, &prob, last, pose, 0.05).unwrap();
            assert!(mask.iter().any(|&m| m));
            let worst = g.value(e).data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(worst < 1e-4, "env {env}: max |e| = {worst}");
        }
    }

    #[test]
    fn crop_behind_camera_is_degenerate() {
        let s = sample(0, Pose::new(0.0, 0.0, 0.0), &no_offset(), 1);
        let mut g = Graph::new();
        let prob = identity_problem(&mut g, &s);
        // 20 m south of the crop center, looking south.
        let away = Pose::new(
            s.georef.center_x_m,
            s.georef.center_y_m - 20.0,
            std::f64::consts::PI,
        );
        let pose = g.constant(away.to_tensor());
        let err = residual(&mut g, &prob, 0, pose, 0.05).unwrap_err();
        assert!(matches!(err, Error::DegenerateView { fraction, .. } if fraction == 0.0));

        let err = solve_coarse_to_fine(&mut g, &prob, pose, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err.root(), Error::DegenerateView { level: 0, .. }));
        assert!(err.to_string().starts_with("level 0, iteration 0"), "{err}");
    }

    #[test]
    fn residual_grows_with_offset() {
        for seed in 0..6u64 {
            let env = seed as usize % 3;
            let gt = Pose::new(seed as f64 * 5.0 - 12.0, 3.0 - seed as f64, seed as f64);
            let s = sample(env, gt, &no_offset(), seed);
            let mut g = Graph::new();
            let prob = identity_problem(&mut g, &s);
            let fine = prob.levels.last().unwrap();
            // Averaged over directions: single directions can line up with
            // periodic structure (lane markings, street grids).
            let mean_at = |d: f64| {
                (0..8)
                    .map(|k| {
                        let a = k as f64 * std::f64::consts::FRAC_PI_4;
                        let p = Pose::new(gt.x_m + d * a.cos(), gt.y_m + d * a.sin(), gt.yaw_rad);
                        residual_cost(&g, fine, &p).unwrap().value
                    })
                    .sum::<f64>()
                    / 8.0
            };
            let (near, far) = (mean_at(0.5), mean_at(2.0));
            assert!(far > near, "seed {seed}: {far} <= {near}");
        }
    }

    #[test]
    fn zero_residual_gives_zero_step() {
        let gt = Pose::new(2.0, -3.0, 0.7);
        let s = sample(1, gt, &PerturbRange::default(), 5);
        let mut g = Graph::new();
        let prob = consistent_problem(&mut g, &s, &gt);
        let pose = g.constant(gt.to_tensor());
        let last = prob.levels.len() - 1;
        let step = lm_step(&mut g, &prob, last, pose, 1e-3, &SolverConfig::default()).unwrap();
        assert!(step.cost_before.value < 1e-12);
        assert!(
            step.proposed.iter().all(|d| d.abs() < 1e-6),
            "{:?}",
            step.proposed
        );
        assert_eq!(step.delta, [0.0; 3]);
        assert!(!step.no_gradient);
    }

    #[test]
    fn textureless_map_flags_no_gradient() {
        let flat = field_texture(|_| 0.4);
        let gt = Pose::new(1.0, 2.0, 0.2);
        let s = make_sample(
            "flat".into(),
            EnvironmentKind::RuralBlobs,
            &flat,
            gt,
            &PerturbRange::default(),
            3,
        )
        .unwrap();
        let mut g = Graph::new();
        let prob = identity_problem(&mut g, &s);
        let init = g.constant(s.init_pose.to_tensor());
        let step = lm_step(&mut g, &prob, 0, init, 1e-3, &SolverConfig::default()).unwrap();
        assert!(step.no_gradient);
        assert_eq!(step.delta, [0.0; 3]);

        let out = solve_coarse_to_fine(&mut g, &prob, init, &SolverConfig::default()).unwrap();
        assert_eq!(out.trace.entries.len(), prob.levels.len());
        assert!(out
            .trace
            .entries
            .iter()
            .all(|e| e.no_gradient && e.converged));
        assert_eq!(out.pose, Pose::from_tensor(&s.init_pose.to_tensor()));
    }

    #[test]
    fn lateral_ramp_converges_in_three_steps() {
        // On a ramp the warped value is linear in the east offset, so one
        // Gauss-Newton step is exact up to damping.
        let ramp = field_texture(|x| 0.5 + 0.002 * x);
        let gt = Pose::new(0.0, 0.0, 0.0);
        let mut s = make_sample(
            "ramp".into(),
            EnvironmentKind::HighwayStripes,
            &ramp,
            gt,
            &no_offset(),
            0,
        )
        .unwrap();
        s.init_pose = Pose::new(1.0, 0.0, 0.0);
        let mut g = Graph::new();
        let ps = identity_pyramid_with(&mut g, &s.aerial, &[1]).unwrap();
        let pg = identity_pyramid_with(&mut g, &s.ground, &[1]).unwrap();
        let prob = Problem::new(&mut g, &ps, &pg, &s.intrinsics, &s.georef).unwrap();
        let mut pose = g.constant(s.init_pose.to_tensor());
        let (mut lambda, mut accepted) = (1e-3, 0);
        let cfg = SolverConfig::default();
        for _ in 0..10 {
            let step = lm_step(&mut g, &prob, 0, pose, lambda, &cfg).unwrap();
            pose = step.pose;
            lambda = step.lambda;
            accepted += step.accepted as usize;
            if (Pose::from_tensor(g.value(pose)).x_m - gt.x_m).abs() < 0.01 {
                break;
            }
        }
        let p = Pose::from_tensor(g.value(pose));
        assert!((p.x_m - gt.x_m).abs() < 0.01, "x error {}", p.x_m - gt.x_m);
        assert!(accepted <= 3, "{accepted} accepted steps");
    }

    #[test]
    fn init_at_ground_truth_converges_immediately() {
        let gt = Pose::new(-4.0, 6.0, -1.2);
        let s = sample(2, gt, &PerturbRange::default(), 8);
        let mut g = Graph::new();
        let prob = consistent_problem(&mut g, &s, &gt);
        let init = g.constant(gt.to_tensor());
        let out = solve_coarse_to_fine(&mut g, &prob, init, &SolverConfig::default()).unwrap();
        assert_eq!(out.trace.entries.len(), IDENTITY_SCALES.len());
        assert!(out.trace.entries.iter().all(|e| e.converged && e.iter == 0));
        assert!((out.pose.x_m - gt.x_m).abs() < 1e-3 && (out.pose.y_m - gt.y_m).abs() < 1e-3);
        assert!(wrap_angle(out.pose.yaw_rad - gt.yaw_rad).abs() < 1e-4);
    }

    #[test]
    fn recovers_fixed_offset_on_textured_scenes() {
        let mut ok = 0;
        for seed in 0..30u64 {
            let env = seed as usize % 3;
            let gt = Pose::new(seed as f64 - 15.0, 20.0 - seed as f64, seed as f64 * 0.4);
            let mut s = sample(env, gt, &no_offset(), seed);
            s.init_pose = Pose::new(gt.x_m + 2.0, gt.y_m + 1.0, gt.yaw_rad + 5f64.to_radians());
            s.georef = crate::synthetic::aerial_georef_for(&s.init_pose);
            s.aerial = crate::synthetic::render_aerial(&textures()[env], &s.georef).unwrap();
            let mut g = Graph::new();
            let prob = identity_problem(&mut g, &s);
            let init = g.constant(s.init_pose.to_tensor());
            let p = solve_coarse_to_fine(&mut g, &prob, init, &SolverConfig::default())
                .unwrap()
                .pose;
            let good = (p.x_m - gt.x_m).abs() <= 0.1
                && (p.y_m - gt.y_m).abs() <= 0.1
                && wrap_angle(p.yaw_rad - gt.yaw_rad).abs() <= 0.5f64.to_radians();
            ok += good as usize;
        }
        assert!(ok >= 27, "{ok}/30 recovered");
    }

    #[test]
    fn trace_round_trips_through_json() {
        let gt = Pose::new(3.0, 3.0, 2.0);
        let s = sample(
            0,
            gt,
            &PerturbRange {
                xy_m: 2.0,
                yaw_deg: 5.0,
            },
            11,
        );
        let mut g = Graph::new();
        let prob = identity_problem(&mut g, &s);
        let init = g.constant(s.init_pose.to_tensor());
        let out = solve_coarse_to_fine(&mut g, &prob, init, &SolverConfig::default()).unwrap();
        let back: SolveTrace = serde_json::from_str(&out.trace.to_json().unwrap()).unwrap();
        assert_eq!(back, out.trace);
        assert_eq!(back.init, Some(Pose::from_tensor(&s.init_pose.to_tensor())));
    }

    #[test]
    fn config_rejects_empty_budget() {
        let bad = SolverConfig {
            max_iters_per_level: 0,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverConfig {
            damping_init: 0.0,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn normal_equations_gradients_match_finite_differences() {
        let (c, h, w) = (2, 3, 4);
        let mask: Vec<bool> = (0..h * w).map(|i| i % 5 != 2).collect();
        let inputs = [
            rand_tensor(&[c, h, w], 1),
            rand_tensor(&[c, h, w], 2),
            rand_tensor(&[6, h, w], 3),
            rand_tensor(&[c, h, w], 4),
        ];
        // Quartic in its inputs; a larger step keeps f32 rounding out of the
        // difference quotient while truncation stays below 1e-4.
        let err = max_grad_err(&inputs, 10.0 * FD_STEP, 1e-2, Some(5), |g, ids| {
            normal_equations(g, ids[0], ids[1], ids[2], ids[3], &mask).unwrap()
        });
        assert!(err < OP_TOL, "rel err {err}");
    }

    #[test]
    fn damped_hessian_and_pose_update_gradients_match_finite_differences() {
        let ne = rand_tensor(&[9], 6);
        let err = max_grad_err(&[ne], FD_STEP, 1e-2, Some(7), |g, ids| {
            damped_hessian(g, ids[0], 0.3)
        });
        assert!(err < OP_TOL, "damped_hessian rel err {err}");

        let pose = Tensor::from_vec(vec![1.5, -2.0, 0.4]);
        let x = rand_tensor(&[3], 8);
        let err = max_grad_err(&[pose, x], FD_STEP, 1e-2, Some(9), |g, ids| {
            pose_update(g, ids[0], ids[1])
        });
        assert!(err < OP_TOL, "pose_update rel err {err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn accepted_steps_never_increase_cost(
            env in 0usize..3,
            x in -40.0f64..40.0,
            y in -40.0f64..40.0,
            yaw in -3.1f64..3.1,
            seed in 0u64..1000,
        ) {
            let s = sample(env, Pose::new(x, y, yaw), &PerturbRange { xy_m: 3.0, yaw_deg: 10.0 }, seed);
            let mut g = Graph::new();
            let prob = identity_problem(&mut g, &s);
            let init = g.constant(s.init_pose.to_tensor());
            let cfg = SolverConfig::default();
            let out = solve_coarse_to_fine(&mut g, &prob, init, &cfg).unwrap();
            let entries = &out.trace.entries;
            prop_assert!(entries.len() <= prob.levels.len() * cfg.max_iters_per_level);
            prop_assert_eq!(entries.len(), out.trace_nodes.len());
            for (k, e) in entries.iter().enumerate() {
                prop_assert!(e.pose.is_finite());
                prop_assert!(e.pose.yaw_rad > -std::f64::consts::PI && e.pose.yaw_rad <= std::f64::consts::PI);
                let before = if k > 0 && entries[k - 1].level == e.level {
                    entries[k - 1].residual
                } else {
                    let start = if k == 0 { out.trace.init.unwrap() } else { entries[k - 1].pose };
                    residual_cost(&g, &prob.levels[e.level], &start).unwrap().value
                };
                prop_assert!(e.residual <= before, "entry {}: {} > {}", k, e.residual, before);
                if !e.accepted {
                    prop_assert_eq!(e.residual, before);
                }
            }
        }
    }
}
