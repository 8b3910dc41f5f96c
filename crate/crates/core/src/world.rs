//! One simulation step (contact detection, LCP solve, pose integration),
//! multi-step rollouts, and their reverse-mode pullbacks.

use nalgebra::{DVector, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::contact::{
    build_constraints, detect_box_box, detect_box_plane, ContactPoint, ContactSettings, FrictionTable, PlaneGeom,
};
use crate::dynamics::{build_mass_matrix, integrate_pose, integrate_pose_vjp, right_matrix, BodyParams, Pose, PoseGrad, Twist, Wrench, GRAVITY};
use crate::error::{Error, Result};
use crate::lcp::{self, LcpGradients, LcpProblem, LcpPullback, SolveError, SolverSettings};

/// Static description of a scene: bodies, planes, friction and step settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub bodies: Vec<BodyParams>,
    pub planes: Vec<PlaneGeom>,
    pub friction: FrictionTable,
    pub h: f64,
    pub gravity: Vector3<f64>,
    #[serde(skip, default)]
    pub contact: ContactSettings,
    #[serde(skip, default = "default_solver")]
    pub solver: SolverSettings,
    /// Replace analytic step gradients with finite differences when the
    /// active set is degenerate; otherwise such steps are reported as errors.
    #[serde(skip, default = "default_true")]
    pub fd_fallback: bool,
}

fn default_solver() -> SolverSettings {
    SolverSettings::default()
}

fn default_true() -> bool {
    true
}

impl World {
    pub fn new(bodies: Vec<BodyParams>, planes: Vec<PlaneGeom>, friction: FrictionTable, h: f64) -> Self {
        World {
            bodies,
            planes,
            friction,
            h,
            gravity: Vector3::new(0.0, 0.0, -GRAVITY),
            contact: ContactSettings::default(),
            solver: SolverSettings::default(),
            fd_fallback: true,
        }
    }

    pub fn n_bodies(&self) -> usize {
        self.bodies.len()
    }

    pub fn masses(&self) -> Vec<f64> {
        self.bodies.iter().map(|b| b.mass).collect()
    }

    /// Copy with new masses (inertia scaled along) and friction table values.
    pub fn with_params(&self, masses: &[f64], friction: &[f64]) -> Self {
        let mut out = self.clone();
        for (b, m) in out.bodies.iter_mut().zip(masses) {
            *b = b.with_mass(*m);
        }
        out.friction = self.friction.with_values(friction);
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {}", self.h)));
        }
        for (i, b) in self.bodies.iter().enumerate() {
            b.validate().map_err(|e| Error::Config(format!("body {i}: {e}")))?;
        }
        if self.friction.values().iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::Config("friction coefficients must be non-negative".into()));
        }
        Ok(())
    }

    /// Contacts for the current state. The activation distance is widened by
    /// how far the involved vertices can travel in one step.
    pub fn detect_contacts(&self, state: &State) -> Result<Vec<ContactPoint>> {
        self.detect_contacts_reaching(state, &state.twists)
    }

    /// As [`World::detect_contacts`], also covering the travel at the given
    /// end-of-step twists.
    pub fn detect_contacts_reaching(&self, state: &State, ahead: &[Twist]) -> Result<Vec<ContactPoint>> {
        let reach = |i: usize| {
            let r = self.bodies[i].half_extents.norm();
            let travel = |t: &Twist| t.linear.norm() + t.angular.norm() * r;
            self.h * travel(&state.twists[i]).max(travel(&ahead[i]))
        };
        let margin = |r: f64| {
            if self.contact.speculative {
                self.contact.activation_tol + r
            } else {
                self.contact.activation_tol
            }
        };
        let mut out = Vec::new();
        for i in 0..self.n_bodies() {
            for plane in &self.planes {
                out.extend(detect_box_plane(i, &state.poses[i], &self.bodies[i], plane, margin(reach(i))));
            }
        }
        for i in 0..self.n_bodies() {
            for j in i + 1..self.n_bodies() {
                out.extend(detect_box_box(
                    i,
                    &state.poses[i],
                    &self.bodies[i],
                    j,
                    &state.poses[j],
                    &self.bodies[j],
                    margin(reach(i) + reach(j)),
                )?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub poses: Vec<Pose>,
    pub twists: Vec<Twist>,
}

impl State {
    pub fn at_rest(poses: Vec<Pose>) -> Self {
        let twists = vec![Twist::zero(); poses.len()];
        State { poses, twists }
    }

    fn stacked_twist(&self) -> DVector<f64> {
        stack(self.twists.iter().map(|t| t.to_vector()))
    }
}

/// Cotangent of a [`State`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrad {
    pub poses: Vec<PoseGrad>,
    pub twists: Vec<Vector6<f64>>,
}

impl StateGrad {
    pub fn zeros(n: usize) -> Self {
        StateGrad { poses: vec![PoseGrad::default(); n], twists: vec![Vector6::zeros(); n] }
    }

    pub fn add_assign(&mut self, other: &StateGrad) {
        for (a, b) in self.poses.iter_mut().zip(&other.poses) {
            a.q += b.q;
            a.p += b.p;
        }
        for (a, b) in self.twists.iter_mut().zip(&other.twists) {
            *a += b;
        }
    }
}

/// Gradients of a loss with respect to the inputs of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrads {
    pub state: StateGrad,
    pub forces: Vec<Vector6<f64>>,
    pub masses: Vec<f64>,
    /// One entry per friction-table value.
    pub friction: Vec<f64>,
}

fn stack(it: impl Iterator<Item = Vector6<f64>>) -> DVector<f64> {
    let v: Vec<f64> = it.flat_map(|s| s.iter().copied().collect::<Vec<_>>()).collect();
    DVector::from_vec(v)
}

fn segment(v: &DVector<f64>, i: usize) -> Vector6<f64> {
    Vector6::from_iterator(v.rows(6 * i, 6).iter().copied())
}

/// Everything needed to differentiate one step after the fact.
pub struct StepPullback {
    h: f64,
    gravity: Vector3<f64>,
    masses: Vec<f64>,
    mass_blocks: Vec<Matrix6<f64>>,
    poses: Vec<Pose>,
    xi_t: DVector<f64>,
    xi_next: DVector<f64>,
    j_c: nalgebra::DMatrix<f64>,
    restitution: DVector<f64>,
    gap_rate: DVector<f64>,
    friction_index: Vec<usize>,
    n_friction: usize,
    lcp: LcpGradientSource,
}

enum LcpGradientSource {
    Analytic(LcpPullback),
    FiniteDifference { problem: Box<LcpProblem>, settings: SolverSettings, need_c: bool },
}

impl StepPullback {
    /// Whether this step falls back to finite differences.
    pub fn uses_finite_differences(&self) -> bool {
        matches!(self.lcp, LcpGradientSource::FiniteDifference { .. })
    }

    pub fn backward(&self, g_next: &StateGrad) -> Result<StepGrads, SolveError> {
        let nb = self.masses.len();
        let h = self.h;
        let mut g_x = DVector::zeros(6 * nb);
        let mut g_poses = Vec::with_capacity(nb);
        for i in 0..nb {
            let xi = Twist::from_vector(&segment(&self.xi_next, i));
            let (gp, gt) = integrate_pose_vjp(&self.poses[i], &xi, h, &g_next.poses[i]);
            g_poses.push(gp);
            let gi = g_next.twists[i] + gt.to_vector();
            g_x.rows_mut(6 * i, 6).copy_from(&gi);
        }

        let grads = match &self.lcp {
            LcpGradientSource::Analytic(pb) => pb.backward(&g_x)?,
            LcpGradientSource::FiniteDifference { problem, settings, need_c } => {
                lcp::finite_difference_gradients(problem, settings, &g_x, *need_c)?
            }
        };
        Ok(self.chain(&grads, g_poses))
    }

    fn chain(&self, g: &LcpGradients, mut g_poses: Vec<PoseGrad>) -> StepGrads {
        let nb = self.masses.len();
        let h = self.h;
        // The contact bias depends on the signed distance, whose first-order
        // change under a small world-frame displacement is the contact row.
        if !g.c.is_empty() {
            let g_disp = self.j_c.transpose() * g.c.component_mul(&self.gap_rate);
            for (i, gp) in g_poses.iter_mut().enumerate() {
                let d = segment(&g_disp, i);
                gp.p += d.fixed_rows::<3>(3);
                // dθ = 2 vec(dq ⊗ q̄)
                let r = right_matrix(&self.poses[i].q.conjugate());
                let rot = r.fixed_rows::<3>(1).transpose() * d.fixed_rows::<3>(0) * 2.0;
                gp.q += rot;
            }
        }
        let kv = if g.c.is_empty() { DVector::zeros(0) } else { g.c.component_mul(&self.restitution) };
        let restitution_term = if kv.is_empty() { DVector::zeros(6 * nb) } else { self.j_c.transpose() * kv };
        let mut twists = Vec::with_capacity(nb);
        let mut forces = Vec::with_capacity(nb);
        let mut masses = Vec::with_capacity(nb);
        let mut g_lin = Vector6::zeros();
        g_lin.fixed_rows_mut::<3>(3).copy_from(&self.gravity);
        for i in 0..nb {
            let v1 = segment(&g.q, i);
            let xi_t = segment(&self.xi_t, i);
            twists.push(self.mass_blocks[i] * v1 + segment(&restitution_term, i));
            forces.push(v1 * h);
            let m = self.masses[i];
            let dq_dm = self.mass_blocks[i] / m * xi_t + g_lin * h;
            masses.push(g.mass_scale[i] / m + v1.dot(&dq_dm));
        }
        let mut friction = vec![0.0; self.n_friction];
        for (c, &k) in self.friction_index.iter().enumerate() {
            friction[k] += g.mu[c];
        }
        StepGrads { state: StateGrad { poses: g_poses, twists }, forces, masses, friction }
    }
}

/// Diagnostics of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub n_contacts: usize,
    pub iterations: usize,
    /// Total complementarity of the accepted solve.
    pub complementarity: f64,
    pub residual: f64,
    pub max_penetration: f64,
    pub degenerate: bool,
}

fn assemble(world: &World, state: &State, forces: &[Wrench]) -> Result<(LcpProblem, Vec<ContactPoint>, crate::contact::ConstraintSet)> {
    if forces.len() != world.n_bodies() || state.poses.len() != world.n_bodies() {
        return Err(Error::LengthMismatch(forces.len().min(state.poses.len()), world.n_bodies()));
    }
    let mass: Vec<Matrix6<f64>> =
        world.bodies.iter().zip(&state.poses).map(|(b, p)| build_mass_matrix(b, &p.q).0).collect();
    let q_blocks: Vec<Vector6<f64>> = (0..world.n_bodies())
        .map(|i| {
            let mut f = forces[i].to_vector();
            for k in 0..3 {
                f[3 + k] += world.bodies[i].mass * world.gravity[k];
            }
            mass[i] * state.twists[i].to_vector() + f * world.h
        })
        .collect();
    // Unconstrained end-of-step twists bound how far bodies can close.
    let free: Vec<Twist> = mass
        .iter()
        .zip(&q_blocks)
        .zip(&state.twists)
        .map(|((m, q), t)| m.try_inverse().map_or(*t, |inv| Twist::from_vector(&(inv * q))))
        .collect();
    let contacts = world.detect_contacts_reaching(state, &free)?;
    let set = build_constraints(&contacts, &state.poses, &state.twists, &world.bodies, &world.friction, world.h, &world.contact);
    let q = stack(q_blocks.into_iter());
    Ok((LcpProblem::new(mass, q, &set), contacts, set))
}

fn advance(world: &World, state: &State, xi: &DVector<f64>) -> State {
    let twists: Vec<Twist> = (0..world.n_bodies()).map(|i| Twist::from_vector(&segment(xi, i))).collect();
    let poses = state.poses.iter().zip(&twists).map(|(p, t)| integrate_pose(p, t, world.h)).collect();
    State { poses, twists }
}

fn info(sol: &lcp::LcpSolution, contacts: &[ContactPoint], degenerate: bool) -> StepInfo {
    StepInfo {
        n_contacts: contacts.len(),
        iterations: sol.diagnostics.iterations,
        complementarity: sol.s.dot(&sol.z),
        residual: sol.diagnostics.residual(),
        max_penetration: contacts.iter().map(|c| c.penetration).fold(0.0, f64::max),
        degenerate,
    }
}

/// Advances the world by one step under the given applied wrenches.
pub fn step(world: &World, state: &State, forces: &[Wrench]) -> Result<(State, StepInfo)> {
    let (problem, contacts, _) = assemble(world, state, forces)?;
    let sol = lcp::solve(&problem, &world.solver).map_err(|e| Error::Solver { step: 0, source: Box::new(e) })?;
    let next = advance(world, state, &sol.xi);
    if next.twists.iter().any(|t| !t.is_finite()) {
        return Err(Error::Solver { step: 0, source: Box::new(SolveError::SingularKkt) });
    }
    Ok((next, info(&sol, &contacts, false)))
}

/// As [`step`], additionally returning the pullback of the step.
pub fn step_with_pullback(world: &World, state: &State, forces: &[Wrench]) -> Result<(State, StepInfo, StepPullback)> {
    let (problem, contacts, set) = assemble(world, state, forces)?;
    let wrap = |e| Error::Solver { step: 0, source: Box::new(e) };
    let (sol, pb) = lcp::solve_with_gradients(&problem, &world.solver).map_err(wrap)?;
    let degenerate = pb.degenerate_pairs() > 0;
    let source = if degenerate {
        if !world.fd_fallback {
            return Err(wrap(pb.check_degeneracy().unwrap_err()));
        }
        let need_c = set.restitution.iter().chain(set.gap_rate.iter()).any(|k| *k != 0.0);
        LcpGradientSource::FiniteDifference { problem: Box::new(problem.clone()), settings: world.solver, need_c }
    } else {
        LcpGradientSource::Analytic(pb)
    };
    let next = advance(world, state, &sol.xi);
    if next.twists.iter().any(|t| !t.is_finite()) {
        return Err(wrap(SolveError::SingularKkt));
    }
    let pullback = StepPullback {
        h: world.h,
        gravity: world.gravity,
        masses: world.masses(),
        mass_blocks: problem.mass.clone(),
        poses: state.poses.clone(),
        xi_t: state.stacked_twist(),
        xi_next: sol.xi.clone(),
        j_c: set.j_c.clone(),
        restitution: set.restitution.clone(),
        gap_rate: set.gap_rate.clone(),
        friction_index: set.friction_index.clone(),
        n_friction: world.friction.len(),
        lcp: source,
    };
    Ok((next, info(&sol, &contacts, degenerate), pullback))
}

fn tag_step(e: Error, t: usize) -> Error {
    match e {
        Error::Solver { source, .. } => Error::Solver { step: t, source },
        other => other,
    }
}

/// States `x_0 .. x_N` for `N = forces.len()` steps.
pub fn rollout(world: &World, init: &State, forces: &[Vec<Wrench>]) -> Result<Vec<State>> {
    let mut states = Vec::with_capacity(forces.len() + 1);
    states.push(init.clone());
    for (t, f) in forces.iter().enumerate() {
        let (next, _) = step(world, &states[t], f).map_err(|e| tag_step(e, t))?;
        states.push(next);
    }
    Ok(states)
}

/// A rollout with per-step pullbacks retained for reverse-mode differentiation.
pub struct Rollout {
    pub states: Vec<State>,
    pub info: Vec<StepInfo>,
    pullbacks: Vec<StepPullback>,
}

/// Gradients of a rollout loss with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGrads {
    pub init: StateGrad,
    pub forces: Vec<Vec<Vector6<f64>>>,
    pub masses: Vec<f64>,
    pub friction: Vec<f64>,
}

pub fn rollout_with_pullbacks(world: &World, init: &State, forces: &[Vec<Wrench>]) -> Result<Rollout> {
    let mut states = Vec::with_capacity(forces.len() + 1);
    let mut infos = Vec::with_capacity(forces.len());
    let mut pullbacks = Vec::with_capacity(forces.len());
    states.push(init.clone());
    for (t, f) in forces.iter().enumerate() {
        let (next, info, pb) = step_with_pullback(world, &states[t], f).map_err(|e| tag_step(e, t))?;
        states.push(next);
        infos.push(info);
        pullbacks.push(pb);
    }
    Ok(Rollout { states, info: infos, pullbacks })
}

impl Rollout {
    pub fn n_steps(&self) -> usize {
        self.pullbacks.len()
    }

    /// Steps whose gradients were obtained by finite differences.
    pub fn fd_steps(&self) -> usize {
        self.pullbacks.iter().filter(|p| p.uses_finite_differences()).count()
    }

    /// `state_grads[t]` is `∂L/∂x_t` for `t = 0..=N`; entries beyond the
    /// provided slice are taken as zero.
    pub fn backward(&self, state_grads: &[StateGrad]) -> Result<RolloutGrads> {
        let nb = self.states[0].poses.len();
        let n = self.n_steps();
        let mut carry = state_grads.get(n).cloned().unwrap_or_else(|| StateGrad::zeros(nb));
        let mut forces = vec![Vec::new(); n];
        let mut masses = vec![0.0; nb];
        let mut friction: Vec<f64> = Vec::new();
        for t in (0..n).rev() {
            let g = self.pullbacks[t]
                .backward(&carry)
                .map_err(|e| Error::Solver { step: t, source: Box::new(e) })?;
            for (a, b) in masses.iter_mut().zip(&g.masses) {
                *a += b;
            }
            if friction.is_empty() {
                friction = vec![0.0; g.friction.len()];
            }
            for (a, b) in friction.iter_mut().zip(&g.friction) {
                *a += b;
            }
            forces[t] = g.forces;
            carry = g.state;
            if let Some(extra) = state_grads.get(t) {
                carry.add_assign(extra);
            }
        }
        if friction.is_empty() {
            friction = vec![0.0; self.pullbacks.first().map_or(0, |p| p.n_friction)];
        }
        Ok(RolloutGrads { init: carry, forces, masses, friction })
    }
}
