//! Pose error, the system-identification, supervised and pixel losses, a
//! positivity-preserving parameterization of masses and friction, and the
//! Adam fitting loop.
//!
//! Rotation error uses the quaternion-log convention: `‖ln q‖` is half the
//! rotation angle of `q`.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen, Vector6};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    geodesic_angle, integrate_pose, integrate_pose_vjp, left_matrix, quat_log_norm, quat_log_norm_sq_grad, Pose,
    PoseGrad, Twist, Wrench,
};
use crate::error::{Error, Result};
use crate::render::{
    render_poses, render_with_pose_gradients, BlurOperator, BlurSchedule, Camera, Frame, PlanarGrad, PlanarPose,
    RenderAssets, Sprite,
};
use crate::scenarios::{average_velocity, Trajectory};
use crate::world::{rollout, rollout_with_pullbacks, State, StateGrad, World};

/// Offset keeping decoded masses strictly positive.
pub const MASS_EPS: f64 = 1e-4;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(1/N) Σ_t ‖ln(q₂ₜ⁻¹ q₁ₜ)‖² + ‖p₂ₜ − p₁ₜ‖²`.
pub fn pose_error(x1: &[Pose], x2: &[Pose]) -> Result<f64> {
    Ok(pose_error_grad(x1, x2)?.0)
}

/// [`pose_error`] and its gradient with respect to `x1`.
pub fn pose_error_grad(x1: &[Pose], x2: &[Pose]) -> Result<(f64, Vec<PoseGrad>)> {
    if x1.len() != x2.len() {
        return Err(Error::LengthMismatch(x1.len(), x2.len()));
    }
    if x1.is_empty() {
        return Err(Error::Config("pose sequences must not be empty".into()));
    }
    let n = x1.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(x1.len());
    for (a, b) in x1.iter().zip(x2) {
        let (e, g) = pose_term(a, b);
        total += e;
        grads.push(PoseGrad { q: g.q / n, p: g.p / n });
    }
    Ok((total / n, grads))
}

fn pose_term(a: &Pose, b: &Pose) -> (f64, PoseGrad) {
    let bc = b.q.conjugate();
    let rel = bc * a.q;
    let r = quat_log_norm(&rel);
    let dp = a.p - b.p;
    let g_q = left_matrix(&bc).transpose() * quat_log_norm_sq_grad(&rel);
    (r * r + dp.norm_squared(), PoseGrad { q: g_q, p: dp * 2.0 })
}

/// Pose error summed over bodies, with per-state gradients wrt `pred`.
fn states_error(pred: &[State], gt: &[State]) -> (f64, Vec<StateGrad>) {
    let n = pred.len().min(gt.len());
    let nb = gt[0].poses.len();
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(n);
    for t in 0..n {
        let mut g = StateGrad::zeros(nb);
        for b in 0..nb {
            let (e, gp) = pose_term(&pred[t].poses[b], &gt[t].poses[b]);
            total += e * scale;
            g.poses[b] = PoseGrad { q: gp.q * scale, p: gp.p * scale };
        }
        grads.push(g);
    }
    (total, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Mass(usize),
    /// Index into the friction table values.
    Friction(usize),
}

/// Masses and friction coefficients through softplus decoders:
/// `m = softplus(θ) + ε`, `μ = softplus(θ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnableParams {
    raw: Vec<f64>,
    pub kinds: Vec<ParamKind>,
    pub free: Vec<bool>,
    /// Value an entry was set to, kept until its raw coordinate moves so
    /// that set values decode without round-off.
    #[serde(default)]
    exact: Vec<Option<f64>>,
}

impl LearnableParams {
    /// All entries free.
    pub fn new(masses: &[f64], friction: &[f64]) -> Self {
        let mut raw = Vec::new();
        let mut kinds = Vec::new();
        for (i, m) in masses.iter().enumerate() {
            raw.push(softplus_inv((m - MASS_EPS).max(1e-12)));
            kinds.push(ParamKind::Mass(i));
        }
        for (k, mu) in friction.iter().enumerate() {
            raw.push(softplus_inv(mu.max(1e-12)));
            kinds.push(ParamKind::Friction(k));
        }
        let free = vec![true; raw.len()];
        let exact = masses.iter().chain(friction).map(|v| Some(*v)).collect();
        LearnableParams { raw, kinds, free, exact }
    }

    pub fn from_world(world: &World) -> Self {
        Self::new(&world.masses(), &world.friction.values())
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    fn decode(kind: ParamKind, raw: f64) -> f64 {
        match kind {
            ParamKind::Mass(_) => softplus(raw) + MASS_EPS,
            ParamKind::Friction(_) => softplus(raw),
        }
    }

    fn decoded(&self, i: usize) -> f64 {
        self.exact.get(i).copied().flatten().unwrap_or_else(|| Self::decode(self.kinds[i], self.raw[i]))
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    /// Applies `f` to the raw coordinates.
    pub fn update_raw(&mut self, f: impl FnOnce(&mut [f64])) {
        let before = self.raw.clone();
        f(&mut self.raw);
        for (i, (a, b)) in before.iter().zip(&self.raw).enumerate() {
            if a != b {
                if let Some(e) = self.exact.get_mut(i) {
                    *e = None;
                }
            }
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.decoded(i)).collect()
    }

    pub fn value(&self, kind: ParamKind) -> Option<f64> {
        self.position(kind).map(|i| self.decoded(i))
    }

    /// `∂value/∂raw` per entry.
    pub fn value_grads(&self) -> Vec<f64> {
        self.raw.iter().map(|r| sigmoid(*r)).collect()
    }

    pub fn masses(&self) -> Vec<f64> {
        (0..self.len()).filter(|&i| matches!(self.kinds[i], ParamKind::Mass(_))).map(|i| self.decoded(i)).collect()
    }

    pub fn friction(&self) -> Vec<f64> {
        (0..self.len()).filter(|&i| matches!(self.kinds[i], ParamKind::Friction(_))).map(|i| self.decoded(i)).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.kinds
            .iter()
            .map(|k| match k {
                ParamKind::Mass(i) => format!("mass_{i}"),
                ParamKind::Friction(i) => format!("mu_{i}"),
            })
            .collect()
    }

    /// Entry named like [`LearnableParams::names`] (`mass_0`, `mu_0`, ...).
    pub fn kind_of(name: &str) -> Option<ParamKind> {
        if let Some(i) = name.strip_prefix("mass_") {
            i.parse().ok().map(ParamKind::Mass)
        } else if let Some(i) = name.strip_prefix("mu_") {
            i.parse().ok().map(ParamKind::Friction)
        } else {
            None
        }
    }

    pub fn position(&self, kind: ParamKind) -> Option<usize> {
        self.kinds.iter().position(|k| *k == kind)
    }

    pub fn set_value(&mut self, kind: ParamKind, value: f64) {
        if let Some(i) = self.position(kind) {
            self.raw[i] = match kind {
                ParamKind::Mass(_) => softplus_inv((value - MASS_EPS).max(1e-12)),
                ParamKind::Friction(_) => softplus_inv(value.max(1e-12)),
            };
            if self.exact.len() != self.raw.len() {
                self.exact = vec![None; self.raw.len()];
            }
            self.exact[i] = Some(value);
        }
    }

    pub fn set_free(&mut self, kind: ParamKind, free: bool) {
        if let Some(i) = self.position(kind) {
            self.free[i] = free;
        }
    }

    /// Frees exactly the listed entries.
    pub fn free_only(&mut self, kinds: &[ParamKind]) {
        for (k, f) in self.kinds.iter().zip(self.free.iter_mut()) {
            *f = kinds.contains(k);
        }
    }

    pub fn n_free(&self) -> usize {
        self.free.iter().filter(|f| **f).count()
    }

    /// `base` with the decoded masses and friction values.
    pub fn world(&self, base: &World) -> World {
        let mut masses = base.masses();
        let mut friction = base.friction.values();
        for (j, k) in self.kinds.iter().enumerate() {
            match *k {
                ParamKind::Mass(i) => masses[i] = self.decoded(j),
                ParamKind::Friction(i) => friction[i] = self.decoded(j),
            }
        }
        base.with_params(&masses, &friction)
    }
}

/// Per-trajectory learnable initial poses and twists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialStateEstimate {
    pub states: Vec<State>,
    /// When false the twists stay at their initial value.
    pub learn_twist: bool,
    /// Learn only x, y and yaw of the poses; height, roll and pitch stay put.
    #[serde(default)]
    pub planar: bool,
}

/// Number of leading states compared by the initial-state branch. With a
/// single state the branch is the estimated initial pose itself.
pub const INIT_WINDOW: usize = 1;

impl InitialStateEstimate {
    /// First observed pose and the central-difference twist of the first
    /// three poses.
    pub fn from_observed(trajs: &[&Trajectory], h: f64) -> Self {
        let states = trajs
            .iter()
            .map(|t| {
                let nb = t.n_bodies();
                let poses = t.states[0].poses.clone();
                let twists = (0..nb)
                    .map(|b| {
                        if t.len() >= 3 {
                            average_velocity(&[t.states[0].poses[b], t.states[1].poses[b], t.states[2].poses[b]], h)
                        } else {
                            Twist::zero()
                        }
                    })
                    .collect();
                State { poses, twists }
            })
            .collect();
        InitialStateEstimate { states, learn_twist: true, planar: false }
    }

    /// First observed poses with zero, fixed twists. Objects at rest on the
    /// ground are seen from above, so only their planar poses are learned.
    pub fn at_rest(trajs: &[&Trajectory]) -> Self {
        let states = trajs.iter().map(|t| State::at_rest(t.states[0].poses.clone())).collect();
        InitialStateEstimate { states, learn_twist: false, planar: true }
    }

    pub fn from_truth(trajs: &[&Trajectory]) -> Self {
        InitialStateEstimate { states: trajs.iter().map(|t| t.states[0].clone()).collect(), learn_twist: true, planar: false }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Whether entry `i` of [`Self::flatten`] is updated during a fit.
    fn learnable(&self, i: usize) -> bool {
        match i % 13 {
            // quaternion w and z, position x and y
            0 | 3 | 4 | 5 => true,
            1 | 2 | 6 => !self.planar,
            _ => self.learn_twist,
        }
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for s in &self.states {
            for (p, t) in s.poses.iter().zip(&s.twists) {
                out.extend_from_slice(&p.to_array());
                out.extend(t.to_vector().iter());
            }
        }
        out
    }

    fn flatten_grads(&self, grads: &[StateGrad]) -> Vec<f64> {
        let mut out = Vec::new();
        for g in grads {
            for (p, t) in g.poses.iter().zip(&g.twists) {
                out.extend(p.q.iter());
                out.extend(p.p.iter());
                if self.learn_twist {
                    out.extend(t.iter());
                } else {
                    out.extend([0.0; 6]);
                }
            }
        }
        out
    }

    /// Writes back a flat vector and renormalizes the quaternions.
    fn unflatten(&mut self, v: &[f64]) {
        let mut k = 0;
        for s in &mut self.states {
            for (p, t) in s.poses.iter_mut().zip(s.twists.iter_mut()) {
                *p = Pose::from_array(&v[k..k + 7]);
                *t = Twist::from_vector(&Vector6::from_column_slice(&v[k + 7..k + 13]));
                k += 13;
            }
        }
    }
}

/// States of the initial-state branch: the estimate propagated with its
/// constant twist over `n` states.
fn branch_states(init: &State, h: f64, n: usize) -> Vec<State> {
    let mut out = vec![init.clone()];
    for t in 1..n {
        let prev: &State = &out[t - 1];
        let poses = prev.poses.iter().zip(&init.twists).map(|(p, x)| integrate_pose(p, x, h)).collect();
        out.push(State { poses, twists: init.twists.clone() });
    }
    out
}

fn branch_backward(states: &[State], h: f64, grads: &[StateGrad]) -> StateGrad {
    let nb = states[0].poses.len();
    let n = states.len();
    let mut carry = grads[n - 1].clone();
    let mut g_twist = vec![Vector6::zeros(); nb];
    for t in (1..n).rev() {
        let mut next = grads[t - 1].clone();
        for b in 0..nb {
            let (gp, gx) = integrate_pose_vjp(&states[t - 1].poses[b], &states[0].twists[b], h, &carry.poses[b]);
            next.poses[b].q += gp.q;
            next.poses[b].p += gp.p;
            g_twist[b] += gx.to_vector();
        }
        carry = next;
    }
    for b in 0..nb {
        carry.twists[b] = g_twist[b];
    }
    carry
}

/// A loss value with gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    /// `∂loss/∂value` per [`LearnableParams`] entry.
    pub grad: Vec<f64>,
    /// `∂loss/∂init` per trajectory (zeros where unused).
    pub init: Vec<StateGrad>,
    /// Trajectories skipped because their rollout or its gradient failed.
    pub skipped: Vec<usize>,
}

impl LossEval {
    fn new(params: &LearnableParams, n_traj: usize, nb: usize) -> Self {
        LossEval { loss: 0.0, grad: vec![0.0; params.len()], init: vec![StateGrad::zeros(nb); n_traj], skipped: Vec::new() }
    }

    fn add_param_grads(&mut self, params: &LearnableParams, masses: &[f64], friction: &[f64], scale: f64) {
        for (g, k) in self.grad.iter_mut().zip(&params.kinds) {
            *g += scale
                * match *k {
                    ParamKind::Mass(i) => masses[i],
                    ParamKind::Friction(i) => friction[i],
                };
        }
    }

    fn finish(mut self, n_traj: usize) -> Result<Self> {
        let used = n_traj - self.skipped.len();
        if used == 0 {
            return Err(Error::Config("every trajectory failed to roll out".into()));
        }
        let s = 1.0 / used as f64;
        self.loss *= s;
        self.grad.iter_mut().for_each(|g| *g *= s);
        for g in &mut self.init {
            for p in &mut g.poses {
                p.q *= s;
                p.p *= s;
            }
            for t in &mut g.twists {
                *t *= s;
            }
        }
        Ok(self)
    }
}

fn n_bodies(trajs: &[&Trajectory]) -> usize {
    trajs.first().map_or(0, |t| t.n_bodies())
}

/// Mean over trajectories of the pose error between the ground truth and a
/// rollout from the true initial state, summed over bodies.
pub fn sysid_loss(base: &World, trajs: &[&Trajectory], params: &LearnableParams) -> Result<LossEval> {
    let world = params.world(base);
    let mut out = LossEval::new(params, trajs.len(), n_bodies(trajs));
    for (i, gt) in trajs.iter().enumerate() {
        let res = rollout_with_pullbacks(&world, &gt.states[0], gt.step_forces()).and_then(|roll| {
            let (e, g) = states_error(&roll.states, &gt.states);
            Ok((e, roll.backward(&g)?))
        });
        match res {
            Ok((e, g)) => {
                out.loss += e;
                out.add_param_grads(params, &g.masses, &g.friction, 1.0);
            }
            Err(_) => out.skipped.push(i),
        }
    }
    out.finish(trajs.len())
}

/// `e(x_gt, x_branch) + α e(x_gt, x̂)` averaged over trajectories, where the
/// branch propagates each initial estimate over the first states and `x̂`
/// is a physics rollout from it.
pub fn supervised_loss(
    base: &World,
    trajs: &[&Trajectory],
    params: &LearnableParams,
    init: &InitialStateEstimate,
    alpha: f64,
) -> Result<LossEval> {
    if init.len() != trajs.len() {
        return Err(Error::LengthMismatch(init.len(), trajs.len()));
    }
    let world = params.world(base);
    let h = base.h;
    let mut out = LossEval::new(params, trajs.len(), n_bodies(trajs));
    for (i, (gt, est)) in trajs.iter().zip(&init.states).enumerate() {
        let k = INIT_WINDOW.min(gt.len());
        let branch = branch_states(est, h, k);
        let (e1, g1) = states_error(&branch, &gt.states[..k]);
        let mut g_init = branch_backward(&branch, h, &g1);
        let mut loss = e1;
        if alpha != 0.0 {
            let res = rollout_with_pullbacks(&world, est, gt.step_forces()).and_then(|roll| {
                let (e, g) = states_error(&roll.states, &gt.states);
                Ok((e, roll.backward(&g)?))
            });
            match res {
                Ok((e2, g2)) => {
                    loss += alpha * e2;
                    out.add_param_grads(params, &g2.masses, &g2.friction, alpha);
                    let mut scaled = g2.init;
                    scale_state_grad(&mut scaled, alpha);
                    g_init.add_assign(&scaled);
                }
                Err(_) => {
                    out.skipped.push(i);
                    continue;
                }
            }
        }
        out.loss += loss;
        out.init[i] = g_init;
    }
    out.finish(trajs.len())
}

fn scale_state_grad(g: &mut StateGrad, s: f64) {
    for p in &mut g.poses {
        p.q *= s;
        p.p *= s;
    }
    for t in &mut g.twists {
        *t *= s;
    }
}

/// Camera, sprites and background shared by all sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelScene {
    pub camera: Camera,
    pub sprites: Vec<Sprite>,
    pub background: Frame,
}

impl PixelScene {
    pub fn from_assets(assets: &RenderAssets, sprites: Vec<Sprite>) -> Self {
        PixelScene { camera: assets.camera, background: assets.background_frame(), sprites }
    }

    pub fn render(&self, poses: &[Pose]) -> Result<Frame> {
        render_poses(poses, &self.sprites, &self.background, &self.camera)
    }
}

/// Observed video of one trajectory and the forces applied during it.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSequence {
    /// Frames of the first [`INIT_WINDOW`] states.
    pub init_frames: Vec<Frame>,
    /// Frames of states `0, stride, 2·stride, …`.
    pub frames: Vec<Frame>,
    pub stride: usize,
    pub forces: Vec<Vec<Wrench>>,
}

impl PixelSequence {
    pub fn from_trajectory(traj: &Trajectory, scene: &PixelScene, stride: usize) -> Result<Self> {
        let stride = stride.max(1);
        let k = INIT_WINDOW.min(traj.len());
        let init_frames = traj.states[..k].iter().map(|s| scene.render(&s.poses)).collect::<Result<Vec<_>>>()?;
        let frames = traj.states.iter().step_by(stride).map(|s| scene.render(&s.poses)).collect::<Result<Vec<_>>>()?;
        Ok(PixelSequence { init_frames, frames, stride, forces: traj.step_forces().to_vec() })
    }

    fn n_steps(&self) -> usize {
        (self.frames.len() - 1) * self.stride
    }
}

fn frame_term(
    scene: &PixelScene,
    blur: &BlurOperator,
    target: &Frame,
    poses: &[Pose],
) -> Result<(f64, Vec<PoseGrad>)> {
    let planar: Vec<PlanarPose> = poses.iter().map(PlanarPose::from).collect();
    let (img, pb) = render_with_pose_gradients(&planar, &scene.sprites, &scene.background, &scene.camera)?;
    if !img.same_shape(target) {
        return Err(Error::RenderMismatch("observed frame size differs from the camera".into()));
    }
    let (loss, g) = blur.sq_diff_and_grad(target, &img);
    let grads: Vec<PlanarGrad> = pb.backward(&g);
    Ok((loss, grads.iter().zip(poses).map(|(g, p)| g.to_pose_grad(p)).collect()))
}

/// `(1/N)‖B(I^gt) − B(I^branch)‖² + (α/N)‖B(I^gt) − B(Î)‖²` averaged over
/// sequences, with `B` the blur operator.
pub fn pixel_loss(
    base: &World,
    videos: &[PixelSequence],
    params: &LearnableParams,
    init: &InitialStateEstimate,
    scene: &PixelScene,
    blur: &BlurOperator,
    alpha: f64,
) -> Result<LossEval> {
    if init.len() != videos.len() {
        return Err(Error::LengthMismatch(init.len(), videos.len()));
    }
    if scene.background.width != scene.camera.width || scene.background.height != scene.camera.height {
        return Err(Error::RenderMismatch("background does not match the camera".into()));
    }
    let world = params.world(base);
    let h = base.h;
    let nb = scene.sprites.len();
    let mut out = LossEval::new(params, videos.len(), nb);
    for (i, (video, est)) in videos.iter().zip(&init.states).enumerate() {
        if est.poses.len() != nb {
            return Err(Error::RenderMismatch(format!("{} sprites for {} bodies", nb, est.poses.len())));
        }
        let k = video.init_frames.len();
        let branch = branch_states(est, h, k);
        let mut g_branch = Vec::with_capacity(k);
        let mut loss = 0.0;
        for (s, target) in branch.iter().zip(&video.init_frames) {
            let (l, g) = frame_term(scene, blur, target, &s.poses)?;
            loss += l / k as f64;
            let mut sg = StateGrad::zeros(nb);
            for (a, b) in sg.poses.iter_mut().zip(g) {
                *a = PoseGrad { q: b.q / k as f64, p: b.p / k as f64 };
            }
            g_branch.push(sg);
        }
        let mut g_init = branch_backward(&branch, h, &g_branch);
        if alpha != 0.0 {
            let n_steps = video.n_steps().min(video.forces.len());
            let roll = match rollout_with_pullbacks(&world, est, &video.forces[..n_steps]) {
                Ok(r) => r,
                Err(_) => {
                    out.skipped.push(i);
                    continue;
                }
            };
            let nf = video.frames.len() as f64;
            let mut g_states = vec![StateGrad::zeros(nb); n_steps + 1];
            for (f, target) in video.frames.iter().enumerate() {
                let t = f * video.stride;
                if t > n_steps {
                    break;
                }
                let (l, g) = frame_term(scene, blur, target, &roll.states[t].poses)?;
                loss += alpha * l / nf;
                for (a, b) in g_states[t].poses.iter_mut().zip(g) {
                    *a = PoseGrad { q: b.q * (alpha / nf), p: b.p * (alpha / nf) };
                }
            }
            match roll.backward(&g_states) {
                Ok(g) => {
                    out.add_param_grads(params, &g.masses, &g.friction, 1.0);
                    g_init.add_assign(&g.init);
                }
                Err(_) => {
                    out.skipped.push(i);
                    continue;
                }
            }
        }
        out.loss += loss;
        out.init[i] = g_init;
    }
    out.finish(videos.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Sysid,
    Supervised,
    Pixel,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sysid" | "sys-id" => Ok(LossKind::Sysid),
            "supervised" => Ok(LossKind::Supervised),
            "pixel" => Ok(LossKind::Pixel),
            other => Err(Error::Config(format!("unknown loss '{other}'"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Sysid => "sysid",
            LossKind::Supervised => "supervised",
            LossKind::Pixel => "pixel",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr_params: f64,
    pub lr_init: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub alpha: f64,
    pub blur: BlurSchedule,
    /// Stop once the loss falls below this value.
    pub loss_tol: Option<f64>,
    /// Evaluate test errors every this many epochs (0: final only).
    pub eval_every: usize,
    /// Estimate the loss curvature at the solution when several parameters
    /// are free.
    pub observability_check: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 200,
            lr_params: 1e-2,
            lr_init: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            alpha: 0.1,
            blur: BlurSchedule::default(),
            loss_tol: None,
            eval_every: 1,
            observability_check: true,
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, lr: f64, cfg: &FitConfig) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr, b1: cfg.beta1, b2: cfg.beta2, eps: cfg.eps }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], mask: impl Fn(usize) -> bool) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for i in 0..x.len() {
            if !mask(i) {
                continue;
            }
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g[i] * g[i];
            x[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Training and evaluation data of a fit.
pub struct FitProblem<'a> {
    /// Scene structure; its parameters serve as ground truth when `truth` is set.
    pub world: World,
    pub train: Vec<&'a Trajectory>,
    /// Trajectories for the position and rotation error.
    pub test: Vec<&'a Trajectory>,
    pub object_size: f64,
    pub truth: Option<Vec<f64>>,
    /// Required for the pixel loss; one sequence per training trajectory.
    pub pixels: Option<(PixelScene, Vec<PixelSequence>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub params: Vec<f64>,
    pub loss: f64,
    pub pos_err: Option<f64>,
    pub rot_err: Option<f64>,
}

/// Curvature of the loss at the solution in raw-parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observability {
    pub eigenvalues: Vec<f64>,
    /// Smallest over largest absolute eigenvalue.
    pub ratio: f64,
    pub observable: bool,
}

/// A fit diverges once the loss exceeds this multiple of its initial value.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Initial losses below this are treated as this value when testing for
/// divergence, so that a start on the optimum can still take steps.
pub const DIVERGENCE_FLOOR: f64 = 1e-6;

/// Ratio below which the free parameters are reported as not jointly observable.
pub const OBSERVABILITY_RATIO: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub loss: LossKind,
    pub names: Vec<String>,
    pub free: Vec<bool>,
    pub truth: Option<Vec<f64>>,
    /// One row per epoch plus a final row after the last update.
    pub epochs: Vec<EpochRecord>,
    pub final_params: Vec<f64>,
    pub rel_errors: Option<Vec<f64>>,
    /// Mean position error over the test rollouts, as a fraction of object size.
    pub pos_err: f64,
    /// Mean geodesic rotation error over the test rollouts, degrees.
    pub rot_err: f64,
    pub diverged: bool,
    pub skipped: Vec<usize>,
    pub observability: Option<Observability>,
    #[serde(skip)]
    pub init: Option<InitialStateEstimate>,
}

impl FitReport {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.final_params[i])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["epoch".to_string()];
        header.extend(self.names.iter().cloned());
        header.extend(["loss", "pos_err", "rot_err"].map(String::from));
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.epochs {
            let mut row = vec![r.epoch.to_string()];
            row.extend(r.params.iter().map(|v| v.to_string()));
            row.push(r.loss.to_string());
            row.push(opt(r.pos_err));
            row.push(opt(r.rot_err));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Mean relative position error (fraction of `object_size`) and mean rotation
/// error (degrees) of rollouts from the true initial states. Trajectories
/// whose rollout fails are left out.
pub fn evaluate(world: &World, trajs: &[&Trajectory], object_size: f64) -> (f64, f64) {
    let mut pos = 0.0;
    let mut rot = 0.0;
    let mut n = 0usize;
    for gt in trajs {
        let Ok(states) = rollout(world, &gt.states[0], gt.step_forces()) else {
            continue;
        };
        for (s, g) in states.iter().zip(&gt.states) {
            for (a, b) in s.poses.iter().zip(&g.poses) {
                pos += (a.p - b.p).norm();
                rot += geodesic_angle(&a.q, &b.q).to_degrees();
                n += 1;
            }
        }
    }
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    (pos / n as f64 / object_size, rot / n as f64)
}

fn eval_loss(
    kind: LossKind,
    problem: &FitProblem,
    params: &LearnableParams,
    init: &InitialStateEstimate,
    blur: Option<&BlurOperator>,
    alpha: f64,
) -> Result<LossEval> {
    match kind {
        LossKind::Sysid => sysid_loss(&problem.world, &problem.train, params),
        LossKind::Supervised => supervised_loss(&problem.world, &problem.train, params, init, alpha),
        LossKind::Pixel => {
            let (scene, videos) = problem
                .pixels
                .as_ref()
                .ok_or_else(|| Error::Config("pixel loss needs rendered sequences".into()))?;
            pixel_loss(&problem.world, videos, params, init, scene, blur.expect("blur operator"), alpha)
        }
    }
}

fn blur_for(kind: LossKind, problem: &FitProblem, cfg: &FitConfig, epoch: usize) -> Option<BlurOperator> {
    if kind != LossKind::Pixel {
        return None;
    }
    let cam = problem.pixels.as_ref().map(|(s, _)| s.camera).unwrap_or_default();
    let (k, s) = cfg.blur.at(epoch.min(cfg.epochs.saturating_sub(1)), cfg.epochs);
    Some(BlurOperator::new(cam.width, cam.height, k, s))
}

/// Full-batch Adam on the free parameters (and on the initial-state
/// estimates for the supervised and pixel losses).
pub fn fit(
    kind: LossKind,
    problem: &FitProblem,
    mut params: LearnableParams,
    init: Option<InitialStateEstimate>,
    cfg: &FitConfig,
) -> Result<FitReport> {
    let mut init = match (kind, init) {
        (LossKind::Sysid, _) => InitialStateEstimate::from_truth(&problem.train),
        (_, Some(i)) => i,
        (LossKind::Supervised, None) => InitialStateEstimate::from_observed(&problem.train, problem.world.h),
        (LossKind::Pixel, None) => InitialStateEstimate::at_rest(&problem.train),
    };
    if init.len() != problem.train.len() {
        return Err(Error::LengthMismatch(init.len(), problem.train.len()));
    }
    let learn_init = kind != LossKind::Sysid;
    let mut adam_p = Adam::new(params.len(), cfg.lr_params, cfg);
    let mut init_flat = init.flatten();
    let mut adam_i = Adam::new(init_flat.len(), cfg.lr_init, cfg);

    let mut records = Vec::with_capacity(cfg.epochs + 1);
    let mut skipped = std::collections::BTreeSet::new();
    let mut initial_loss = None;
    let mut diverged = false;
    let mut epoch = 0;
    loop {
        let last = epoch == cfg.epochs;
        let blur = blur_for(kind, problem, cfg, epoch);
        let ev = eval_loss(kind, problem, &params, &init, blur.as_ref(), cfg.alpha)?;
        skipped.extend(ev.skipped.iter().copied());
        let l0 = *initial_loss.get_or_insert(ev.loss);
        let bad = !ev.loss.is_finite() || ev.loss > DIVERGENCE_FACTOR * l0.max(DIVERGENCE_FLOOR);
        let do_eval = last || bad || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        let (pos_err, rot_err) = if do_eval {
            let (p, r) = evaluate(&params.world(&problem.world), &problem.test, problem.object_size);
            (Some(p), Some(r))
        } else {
            (None, None)
        };
        records.push(EpochRecord { epoch, params: params.values(), loss: ev.loss, pos_err, rot_err });
        if bad {
            diverged = true;
            break;
        }
        let converged = cfg.loss_tol.is_some_and(|tol| ev.loss < tol);
        if last || converged {
            if converged && pos_err.is_none() {
                let (p, r) = evaluate(&params.world(&problem.world), &problem.test, problem.object_size);
                let rec = records.last_mut().expect("record");
                rec.pos_err = Some(p);
                rec.rot_err = Some(r);
            }
            break;
        }
        let dv = params.value_grads();
        let g_raw: Vec<f64> = ev.grad.iter().zip(&dv).map(|(g, d)| g * d).collect();
        let free = params.free.clone();
        params.update_raw(|raw| adam_p.step(raw, &g_raw, |i| free[i]));
        if learn_init {
            let g = init.flatten_grads(&ev.init);
            adam_i.step(&mut init_flat, &g, |i| init.learnable(i));
            init.unflatten(&init_flat);
            init_flat = init.flatten();
        }
        epoch += 1;
    }

    let final_params = params.values();
    let rel_errors = problem
        .truth
        .as_ref()
        .map(|t| final_params.iter().zip(t).map(|(v, t)| ((v - t) / t).abs()).collect());
    let last = records.last().expect("at least one epoch");
    let (pos_err, rot_err) = (last.pos_err.unwrap_or(f64::NAN), last.rot_err.unwrap_or(f64::NAN));
    let observability = if cfg.observability_check && params.n_free() >= 2 && !diverged {
        let blur = blur_for(kind, problem, cfg, cfg.epochs);
        Some(observability(kind, problem, &params, &init, blur.as_ref(), cfg.alpha)?)
    } else {
        None
    };
    Ok(FitReport {
        loss: kind,
        names: params.names(),
        free: params.free.clone(),
        truth: problem.truth.clone(),
        epochs: records,
        final_params,
        rel_errors,
        pos_err,
        rot_err,
        diverged,
        skipped: skipped.into_iter().collect(),
        observability,
        init: Some(init),
    })
}

/// Central-difference Hessian of the loss over the free raw parameters.
fn observability(
    kind: LossKind,
    problem: &FitProblem,
    params: &LearnableParams,
    init: &InitialStateEstimate,
    blur: Option<&BlurOperator>,
    alpha: f64,
) -> Result<Observability> {
    let free: Vec<usize> = (0..params.len()).filter(|i| params.free[*i]).collect();
    let n = free.len();
    let eps = 1e-4;
    let grad_raw = |p: &LearnableParams| -> Result<Vec<f64>> {
        let ev = eval_loss(kind, problem, p, init, blur, alpha)?;
        let dv = p.value_grads();
        Ok(free.iter().map(|&i| ev.grad[i] * dv[i]).collect())
    };
    let mut h = DMatrix::zeros(n, n);
    for (c, &i) in free.iter().enumerate() {
        let mut plus = params.clone();
        plus.update_raw(|r| r[i] += eps);
        let mut minus = params.clone();
        minus.update_raw(|r| r[i] -= eps);
        let gp = grad_raw(&plus)?;
        let gm = grad_raw(&minus)?;
        for r in 0..n {
            h[(r, c)] = (gp[r] - gm[r]) / (2.0 * eps);
        }
    }
    let h = (&h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(h);
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let max = ev.last().map_or(0.0, |v| v.abs());
    let ratio = if max > 0.0 { ev[0].abs() / max } else { 0.0 };
    Ok(Observability { eigenvalues: ev, ratio, observable: ratio >= OBSERVABILITY_RATIO })
}
