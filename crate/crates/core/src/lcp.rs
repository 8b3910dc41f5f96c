//! Primal-dual interior-point solver for the mixed LCP of one time step and
//! its implicit backward pass.
//!
//! Unknowns: velocities `x`, equality impulses `y`, and the complementary
//! pairs `z = (λ_c, λ_f, γ) ≥ 0`, `s = (a, σ, ζ) ≥ 0` with
//!
//! ```text
//! M x − J_eᵀ y − Bᵀ z = q        B = [J_c; J_f; 0]
//! J_e x = 0
//! s = B x + C z + d              C = [[0, 0, 0], [0, 0, E], [μ, −Eᵀ, 0]],  d = [c; 0; 0]
//! sᵀ z = 0
//! ```

use nalgebra::{DMatrix, DVector, Matrix6, Vector6, LU};

use crate::contact::ConstraintSet;

#[derive(Debug, Clone, thiserror::Error)]
pub enum SolveError {
    #[error("interior point did not converge in {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        best: Box<LcpSolution>,
    },
    #[error("singular reduced KKT system")]
    SingularKkt,
    #[error("degenerate active set ({count} weakly complementary pairs)")]
    DegenerateActiveSet { count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Bound on residual norms and on the mean complementarity gap.
    pub tol: f64,
    pub max_iter: usize,
    /// Fraction of the distance to the boundary taken per step.
    pub step_fraction: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { tol: 1e-10, max_iter: 50, step_fraction: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LcpProblem {
    /// Diagonal blocks of the mass matrix, one per body.
    pub mass: Vec<Matrix6<f64>>,
    pub q: DVector<f64>,
    pub j_e: DMatrix<f64>,
    pub j_c: DMatrix<f64>,
    pub j_f: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub c: DVector<f64>,
}

impl LcpProblem {
    pub fn new(mass: Vec<Matrix6<f64>>, q: DVector<f64>, set: &ConstraintSet) -> Self {
        LcpProblem {
            mass,
            q,
            j_e: set.j_e.clone(),
            j_c: set.j_c.clone(),
            j_f: set.j_f.clone(),
            e: set.e.clone(),
            mu: set.mu.clone(),
            c: set.c.clone(),
        }
    }

    pub fn n_contacts(&self) -> usize {
        self.j_c.nrows()
    }

    fn n_complementary(&self) -> usize {
        2 * self.j_c.nrows() + self.j_f.nrows()
    }

    /// `[J_e; J_c; J_f; 0]`.
    fn g_matrix(&self) -> DMatrix<f64> {
        let n = self.q.len();
        let (ne, nc, nf) = (self.j_e.nrows(), self.j_c.nrows(), self.j_f.nrows());
        let mut g = DMatrix::zeros(ne + 2 * nc + nf, n);
        g.rows_mut(0, ne).copy_from(&self.j_e);
        g.rows_mut(ne, nc).copy_from(&self.j_c);
        g.rows_mut(ne + nc, nf).copy_from(&self.j_f);
        g
    }

    fn c_matrix(&self) -> DMatrix<f64> {
        let (nc, nf) = (self.j_c.nrows(), self.j_f.nrows());
        let m = self.n_complementary();
        let mut c = DMatrix::zeros(m, m);
        c.view_mut((nc, nc + nf), (nf, nc)).copy_from(&self.e);
        for i in 0..nc {
            c[(nc + nf + i, i)] = self.mu[i];
        }
        c.view_mut((nc + nf, nc), (nc, nf)).copy_from(&(-self.e.transpose()));
        c
    }

    fn d_vector(&self) -> DVector<f64> {
        let mut d = DVector::zeros(self.n_complementary());
        d.rows_mut(0, self.c.len()).copy_from(&self.c);
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LcpSolution {
    pub xi: DVector<f64>,
    pub lambda_e: DVector<f64>,
    /// `(λ_c, λ_f, γ)`.
    pub z: DVector<f64>,
    /// `(a, σ, ζ)`.
    pub s: DVector<f64>,
    pub n_contacts: usize,
    pub diagnostics: SolveDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    IterationLimit,
}

/// Convergence measures of the returned iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    /// Max-norm of the equality and slack-definition residuals.
    pub primal_residual: f64,
    /// Max-norm of the momentum residual.
    pub dual_residual: f64,
    /// Mean complementarity product `sᵀz / m`.
    pub gap: f64,
    pub status: SolveStatus,
}

impl SolveDiagnostics {
    pub fn residual(&self) -> f64 {
        self.primal_residual.max(self.dual_residual)
    }

    /// Total complementarity `aᵀλ_c + σᵀλ_f + ζᵀγ`.
    pub fn complementarity(&self, m: usize) -> f64 {
        self.gap * m as f64
    }
}

impl LcpSolution {
    pub fn lambda_c(&self) -> DVector<f64> {
        self.z.rows(0, self.n_contacts).into_owned()
    }

    pub fn lambda_f(&self) -> DVector<f64> {
        self.z.rows(self.n_contacts, 4 * self.n_contacts).into_owned()
    }

    pub fn gamma(&self) -> DVector<f64> {
        self.z.rows(5 * self.n_contacts, self.n_contacts).into_owned()
    }

    pub fn normal_slack(&self) -> DVector<f64> {
        self.s.rows(0, self.n_contacts).into_owned()
    }
}

/// Gradients of a scalar loss with respect to the LCP inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LcpGradients {
    pub q: DVector<f64>,
    pub c: DVector<f64>,
    /// One entry per contact.
    pub mu: DVector<f64>,
    /// Derivative with respect to a multiplicative scale on each mass block.
    pub mass_scale: DVector<f64>,
}

struct Blocks {
    inv: Vec<Matrix6<f64>>,
}

impl Blocks {
    fn new(mass: &[Matrix6<f64>]) -> Result<Self, SolveError> {
        let inv = mass
            .iter()
            .map(|m| m.cholesky().map(|c| c.inverse()).ok_or(SolveError::SingularKkt))
            .collect::<Result<_, _>>()?;
        Ok(Blocks { inv })
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for (i, inv) in self.inv.iter().enumerate() {
            let seg = Vector6::from_iterator(v.rows(6 * i, 6).iter().copied());
            out.rows_mut(6 * i, 6).copy_from(&(inv * seg));
        }
        out
    }

    fn apply_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for (i, inv) in self.inv.iter().enumerate() {
            let rows = inv * m.rows(6 * i, 6);
            out.rows_mut(6 * i, 6).copy_from(&rows);
        }
        out
    }
}

/// State needed to pull loss gradients back through a solved LCP.
pub struct LcpPullback {
    minv: Blocks,
    mass: Vec<Matrix6<f64>>,
    g: DMatrix<f64>,
    lu_t: Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    x: DVector<f64>,
    z: DVector<f64>,
    ne: usize,
    nc: usize,
    degenerate: usize,
}

impl LcpPullback {
    /// Number of complementary pairs whose members are both near zero.
    pub fn degenerate_pairs(&self) -> usize {
        self.degenerate
    }

    pub fn check_degeneracy(&self) -> Result<(), SolveError> {
        if self.degenerate > 0 {
            Err(SolveError::DegenerateActiveSet { count: self.degenerate })
        } else {
            Ok(())
        }
    }

    /// Implicit differentiation of the (relaxed) KKT conditions at the solution.
    pub fn backward(&self, g_x: &DVector<f64>) -> Result<LcpGradients, SolveError> {
        let nb = self.mass.len();
        let nc = self.nc;
        let minv_g = self.minv.apply(g_x);
        let (v1, u) = match &self.lu_t {
            None => (minv_g, DVector::zeros(0)),
            Some(lu) => {
                let rhs = -(&self.g * &minv_g);
                let u = lu.solve(&rhs).ok_or(SolveError::SingularKkt)?;
                let v1 = self.minv.apply(&(g_x + self.g.transpose() * &u));
                (v1, u)
            }
        };
        let v3 = if u.is_empty() { DVector::zeros(0) } else { u.rows(self.ne, u.len() - self.ne).into_owned() };
        let c = if nc > 0 { v3.rows(0, nc).into_owned() } else { DVector::zeros(0) };
        let mu = DVector::from_iterator(nc, (0..nc).map(|i| v3[5 * nc + i] * self.z[i]));
        let mass_scale = DVector::from_iterator(
            nb,
            (0..nb).map(|i| {
                let xi = Vector6::from_iterator(self.x.rows(6 * i, 6).iter().copied());
                let vi = Vector6::from_iterator(v1.rows(6 * i, 6).iter().copied());
                -vi.dot(&(self.mass[i] * xi))
            }),
        );
        Ok(LcpGradients { q: v1, c, mu, mass_scale })
    }
}

/// Smallest ratio of the two members of a complementary pair at which the
/// pair counts as degenerate.
const DEGENERATE_RATIO: f64 = 1e-2;

pub fn solve(problem: &LcpProblem, settings: &SolverSettings) -> Result<LcpSolution, SolveError> {
    solve_inner(problem, settings).map(|(sol, _)| sol)
}

pub fn solve_with_gradients(
    problem: &LcpProblem,
    settings: &SolverSettings,
) -> Result<(LcpSolution, LcpPullback), SolveError> {
    let (sol, parts) = solve_inner(problem, settings)?;
    let SolverParts { minv, g, gmg, cm } = parts;
    let ne = problem.j_e.nrows();
    let m = problem.n_complementary();
    let lu_t = if ne + m == 0 {
        None
    } else {
        let mut h = gmg;
        for i in 0..m {
            for j in 0..m {
                h[(ne + i, ne + j)] += cm[(i, j)];
            }
            h[(ne + i, ne + i)] += sol.s[i] / sol.z[i];
        }
        Some(h.transpose().lu())
    };
    let threshold = (100.0 * sol.diagnostics.gap.max(0.0).sqrt()).max(1e-9);
    let nc = problem.n_contacts();
    let mut degenerate = 0;
    for i in (0..nc).chain(5 * nc..6 * nc) {
        // Both members small and of comparable size: neither side of the
        // pair is decided.
        let (lo, hi) = (sol.s[i].min(sol.z[i]), sol.s[i].max(sol.z[i]));
        if hi < threshold && lo >= DEGENERATE_RATIO * hi {
            degenerate += 1;
        }
    }
    let pullback = LcpPullback {
        minv,
        mass: problem.mass.clone(),
        g,
        lu_t,
        x: sol.xi.clone(),
        z: sol.z.clone(),
        ne,
        nc,
        degenerate,
    };
    Ok((sol, pullback))
}

/// Central finite differences of `g_xᵀ x` with respect to the LCP inputs,
/// used when the active set is degenerate. Solves are tightened so that
/// solver error stays well below the perturbation.
pub fn finite_difference_gradients(
    problem: &LcpProblem,
    settings: &SolverSettings,
    g_x: &DVector<f64>,
    need_c: bool,
) -> Result<LcpGradients, SolveError> {
    let tight = SolverSettings { tol: settings.tol.min(1e-13), max_iter: settings.max_iter.max(100), ..*settings };
    let eval = |p: &LcpProblem| -> Result<f64, SolveError> {
        match solve(p, &tight) {
            Ok(sol) => Ok(sol.xi.dot(g_x)),
            Err(SolveError::NonConvergence { best, .. }) => Ok(best.xi.dot(g_x)),
            Err(e) => Err(e),
        }
    };
    let central = |perturb: &dyn Fn(&mut LcpProblem, f64), eps: f64| -> Result<f64, SolveError> {
        let mut a = problem.clone();
        let mut b = problem.clone();
        perturb(&mut a, eps);
        perturb(&mut b, -eps);
        Ok((eval(&a)? - eval(&b)?) / (2.0 * eps))
    };
    let nb = problem.mass.len();
    let nc = problem.n_contacts();
    let eps_q = 1e-6 * problem.q.amax().max(1.0);
    let mut q = DVector::zeros(problem.q.len());
    for k in 0..problem.q.len() {
        q[k] = central(&|p, e| p.q[k] += e, eps_q)?;
    }
    let mut mass_scale = DVector::zeros(nb);
    for i in 0..nb {
        mass_scale[i] = central(&|p, e| p.mass[i] *= 1.0 + e, 1e-6)?;
    }
    let mut mu = DVector::zeros(nc);
    for i in 0..nc {
        mu[i] = central(&|p, e| p.mu[i] += e, 1e-6)?;
    }
    let mut c = DVector::zeros(nc);
    if need_c {
        for i in 0..nc {
            c[i] = central(&|p, e| p.c[i] += e, 1e-6)?;
        }
    }
    Ok(LcpGradients { q, c, mu, mass_scale })
}

struct SolverParts {
    minv: Blocks,
    g: DMatrix<f64>,
    gmg: DMatrix<f64>,
    cm: DMatrix<f64>,
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .fold(1.0f64, |a, (x, d)| a.min(-x / d))
}

fn solve_inner(problem: &LcpProblem, settings: &SolverSettings) -> Result<(LcpSolution, SolverParts), SolveError> {
    let n = problem.q.len();
    let ne = problem.j_e.nrows();
    let m = problem.n_complementary();
    let nc = problem.n_contacts();
    let minv = Blocks::new(&problem.mass)?;
    let g = problem.g_matrix();
    let minv_gt = minv.apply_columns(&g.transpose());
    let gmg = &g * &minv_gt;
    let cm = problem.c_matrix();
    let d = problem.d_vector();
    let b = g.rows(ne, m).into_owned();
    let j_e = g.rows(0, ne).into_owned();

    let mut x = minv.apply(&problem.q);
    let mut y = DVector::zeros(ne);
    let mut z = DVector::from_element(m, 1.0);
    let mut s = DVector::from_element(m, 1.0);

    let mass_times = |v: &DVector<f64>| {
        let mut out = DVector::zeros(n);
        for (i, mi) in problem.mass.iter().enumerate() {
            let seg = Vector6::from_iterator(v.rows(6 * i, 6).iter().copied());
            out.rows_mut(6 * i, 6).copy_from(&(mi * seg));
        }
        out
    };

    let mut best: Option<(f64, LcpSolution)> = None;
    for iter in 0..=settings.max_iter {
        let r1 = mass_times(&x) - j_e.transpose() * &y - b.transpose() * &z - &problem.q;
        let r2 = &j_e * &x;
        let r3 = &s - &b * &x - &cm * &z - &d;
        let primal = r2.amax().max(r3.amax());
        let dual = r1.amax();
        let res = primal.max(dual);
        let gap = if m > 0 { s.dot(&z) / m as f64 } else { 0.0 };
        let converged = res <= settings.tol && gap <= settings.tol;
        let current = LcpSolution {
            xi: x.clone(),
            lambda_e: y.clone(),
            z: z.clone(),
            s: s.clone(),
            n_contacts: nc,
            diagnostics: SolveDiagnostics {
                iterations: iter,
                primal_residual: primal,
                dual_residual: dual,
                gap,
                status: if converged { SolveStatus::Converged } else { SolveStatus::IterationLimit },
            },
        };
        if !res.is_finite() || !gap.is_finite() {
            break;
        }
        if converged {
            return Ok((current, SolverParts { minv, g, gmg, cm }));
        }
        let merit = res.max(gap);
        if best.as_ref().map_or(true, |(bm, _)| merit < *bm) {
            best = Some((merit, current));
        }
        if iter == settings.max_iter {
            break;
        }

        let mut h = gmg.clone();
        for i in 0..m {
            for j in 0..m {
                h[(ne + i, ne + j)] += cm[(i, j)];
            }
            h[(ne + i, ne + i)] += s[i] / z[i];
        }
        let lu = h.lu();
        let minv_r1 = minv.apply(&r1);
        let base = &g * &minv_r1;
        let direction = |r4: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            let mut rhs = base.clone();
            for i in 0..ne {
                rhs[i] -= r2[i];
            }
            for i in 0..m {
                rhs[ne + i] += r3[i] - r4[i] / z[i];
            }
            let du = lu.solve(&rhs)?;
            let dx = minv.apply(&(g.transpose() * &du - &r1));
            let dy = du.rows(0, ne).into_owned();
            let dz = du.rows(ne, m).into_owned();
            let ds = DVector::from_iterator(m, (0..m).map(|i| -(r4[i] + s[i] * dz[i]) / z[i]));
            Some((dx, dy, dz, ds))
        };

        let r4_aff = s.component_mul(&z);
        let (_, _, dz_a, ds_a) = direction(&r4_aff).ok_or(SolveError::SingularKkt)?;
        let (dx, dy, dz, ds) = if m == 0 {
            direction(&r4_aff).ok_or(SolveError::SingularKkt)?
        } else {
            let a_aff = max_step(&z, &dz_a).min(max_step(&s, &ds_a));
            let gap_aff = (&s + &ds_a * a_aff).dot(&(&z + &dz_a * a_aff)) / m as f64;
            let sigma = (gap_aff / gap).powi(3).clamp(0.0, 1.0);
            let r4 = DVector::from_iterator(
                m,
                (0..m).map(|i| s[i] * z[i] + ds_a[i] * dz_a[i] - sigma * gap),
            );
            direction(&r4).ok_or(SolveError::SingularKkt)?
        };
        let alpha = if m == 0 {
            1.0
        } else {
            (settings.step_fraction * max_step(&z, &dz).min(max_step(&s, &ds))).min(1.0)
        };
        x += dx * alpha;
        y += dy * alpha;
        z += dz * alpha;
        s += ds * alpha;
    }
    let (residual, best) = match best {
        Some((_, b)) => (b.diagnostics.residual().max(b.diagnostics.gap), b),
        None => return Err(SolveError::SingularKkt),
    };
    Err(SolveError::NonConvergence { iterations: settings.max_iter, residual, best: Box::new(best) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::{build_constraints, detect_box_plane, ContactSettings, FrictionTable, PlaneGeom};
    use crate::dynamics::{build_mass_matrix, BodyParams, Pose, Twist};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    fn resting_problem(v0: Vector3<f64>, mu: f64, push: f64) -> LcpProblem {
        let body = BodyParams::solid_box(1.0, Vector3::repeat(0.5), 0.0);
        let pose = Pose::from_position(Vector3::new(0.0, 0.0, 0.5));
        let twist = Twist::linear(v0);
        let contacts = detect_box_plane(0, &pose, &body, &PlaneGeom::ground(), 1e-3);
        let h = 0.01;
        let set = build_constraints(&contacts, &[pose], &[twist], &[body.clone()], &FrictionTable::uniform(mu), h, &ContactSettings::default());
        let mass = build_mass_matrix(&body, &pose.q).0;
        let f = Vector6::new(0.0, 0.0, 0.0, push, 0.0, -9.81);
        let q = mass * twist.to_vector() + f * h;
        LcpProblem::new(vec![mass], DVector::from_column_slice(q.as_slice()), &set)
    }

    #[test]
    fn unconstrained_problem_is_direct_solve() {
        let mass = Matrix6::from_diagonal(&Vector6::new(1.0, 1.0, 1.0, 2.0, 2.0, 2.0));
        let q = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.4, 0.0, 0.0]);
        let p = LcpProblem::new(vec![mass], q, &ConstraintSet::unconstrained(1));
        let sol = solve(&p, &SolverSettings::default()).unwrap();
        assert_relative_eq!(sol.xi[3], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn unloaded_touching_contact_is_degenerate() {
        let mut p = resting_problem(Vector3::zeros(), 0.3, 0.0);
        p.q.fill(0.0);
        let (_, pb) = solve_with_gradients(&p, &SolverSettings::default()).unwrap();
        assert!(pb.degenerate_pairs() > 0);
        assert!(matches!(pb.check_degeneracy(), Err(SolveError::DegenerateActiveSet { .. })));
        let sliding = resting_problem(Vector3::new(1.0, 0.0, 0.0), 0.3, 0.0);
        let (_, pb) = solve_with_gradients(&sliding, &SolverSettings::default()).unwrap();
        assert_eq!(pb.degenerate_pairs(), 0);
    }

    #[test]
    fn box_resting_on_ground_stays_put() {
        let p = resting_problem(Vector3::zeros(), 0.5, 0.0);
        let sol = solve(&p, &SolverSettings::default()).unwrap();
        assert!(sol.xi.amax() < 1e-8, "{}", sol.xi);
        assert_relative_eq!(sol.lambda_c().sum(), 9.81 * 0.01, epsilon = 1e-8);
        assert_eq!(sol.diagnostics.status, SolveStatus::Converged);
    }

    #[test]
    fn sliding_box_decelerates_at_mu_g() {
        let mu = 0.3;
        let p = resting_problem(Vector3::new(1.0, 0.0, 0.0), mu, 0.0);
        let sol = solve(&p, &SolverSettings::default()).unwrap();
        assert_relative_eq!(sol.xi[3], 1.0 - mu * 9.81 * 0.01, epsilon = 1e-8);
        assert!(sol.xi[5].abs() < 1e-8);
        assert!(sol.xi[4].abs() < 1e-8);
    }

    #[test]
    fn weak_push_sticks() {
        let p = resting_problem(Vector3::zeros(), 0.5, 2.0);
        let sol = solve(&p, &SolverSettings::default()).unwrap();
        // Velocities on the central path are accurate to roughly gap / impulse.
        assert!(sol.xi.amax() < 1e-6, "{}", sol.xi);
    }

    #[test]
    fn complementarity_holds() {
        let p = resting_problem(Vector3::new(0.7, -0.2, 0.0), 0.2, 3.0);
        let sol = solve(&p, &SolverSettings::default()).unwrap();
        assert!(sol.z.min() >= 0.0 && sol.s.min() >= 0.0);
        assert!(sol.s.dot(&sol.z) < 1e-8);
    }

    fn fd_check(p: &LcpProblem, weights: &DVector<f64>) {
        let settings = SolverSettings { tol: 1e-13, max_iter: 100, ..Default::default() };
        let loss = |p: &LcpProblem| solve(p, &settings).unwrap().xi.dot(weights);
        let (_, pb) = solve_with_gradients(p, &settings).unwrap();
        let grads = pb.backward(weights).unwrap();
        let eps = 1e-6;
        for k in 0..p.q.len() {
            let mut a = p.clone();
            let mut b = p.clone();
            a.q[k] += eps;
            b.q[k] -= eps;
            let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
            assert_relative_eq!(grads.q[k], fd, epsilon = 1e-5, max_relative = 1e-4);
        }
        let mut a = p.clone();
        let mut b = p.clone();
        a.mu.add_scalar_mut(eps);
        b.mu.add_scalar_mut(-eps);
        let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
        assert_relative_eq!(grads.mu.sum(), fd, epsilon = 1e-5, max_relative = 1e-4);
        let mut a = p.clone();
        let mut b = p.clone();
        a.mass[0] *= 1.0 + eps;
        b.mass[0] *= 1.0 - eps;
        let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
        assert_relative_eq!(grads.mass_scale[0], fd, epsilon = 1e-5, max_relative = 1e-4);
    }

    #[test]
    fn sliding_gradients_match_finite_differences() {
        let p = resting_problem(Vector3::new(1.0, 0.3, 0.0), 0.3, 0.0);
        let w = DVector::from_vec(vec![0.1, -0.2, 0.3, 1.0, 0.5, 0.2]);
        fd_check(&p, &w);
    }

    #[test]
    fn free_flight_gradients_match() {
        let p = resting_problem(Vector3::new(1.0, 0.0, 3.0), 0.3, 0.0);
        let w = DVector::from_vec(vec![0.1, -0.2, 0.3, 1.0, 0.5, 0.2]);
        fd_check(&p, &w);
    }
}
