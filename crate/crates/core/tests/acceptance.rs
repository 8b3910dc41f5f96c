//! Acceptance criteria AC-1 .. AC-10, one PASS/FAIL line each.
//!
//! Runs as a plain binary: `cargo test --test acceptance` runs everything,
//! `cargo test --test acceptance -- AC-1 AC-7` runs a subset.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use diffphys::contact::{FrictionTable, PlaneGeom};
use diffphys::dynamics::{BodyParams, Pose, PoseGrad, Twist, Wrench};
use diffphys::identification::{
    fit, sysid_loss, FitConfig, FitProblem, FitReport, LearnableParams, LossKind, ParamKind, PixelScene,
    PixelSequence,
};
use diffphys::render::{
    render_with_pose_gradients, scenario_assets, BlurOperator, Camera, Frame, PlanarPose,
};
use diffphys::scenarios::{Dataset, ScenarioConfig, Trajectory, OBJECT_SIZE};
use diffphys::world::{rollout, rollout_with_pullbacks, step, step_with_pullback, State, StateGrad, World};
use nalgebra::{Vector3, Vector4, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, &'static str, Option<Duration>, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    ("AC-1", "solver matches closed-form reductions", Some(Duration::from_secs(10)), ac1),
    ("AC-2", "push friction identification", Some(Duration::from_secs(300)), ac2),
    ("AC-3", "collide joint mass/friction identification", Some(Duration::from_secs(600)), ac3),
    ("AC-4", "mass and friction not jointly observable under constant push", None, ac4),
    ("AC-5", "incline friction identification", None, ac5),
    ("AC-6", "gradients match finite differences", Some(Duration::from_secs(60)), ac6),
    ("AC-7", "physical invariants", None, ac7),
    ("AC-8", "pixel-loss friction identification", Some(Duration::from_secs(1200)), ac8),
    ("AC-9", "video prediction", None, ac9),
    ("AC-10", "determinism", None, ac10),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (id, title, budget, run) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| f.eq_ignore_ascii_case(id)) {
            continue;
        }
        let t0 = Instant::now();
        let out = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome { pass: false, detail: format!("panicked: {msg}") }
        });
        let took = t0.elapsed();
        let in_time = budget.is_none_or(|b| took <= b);
        let pass = out.pass && in_time;
        let budget = budget.map(|b| format!(" / {}s", b.as_secs())).unwrap_or_default();
        println!(
            "{id:<6} {} {title}: {} [{:.1}s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64()
        );
        if !pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}

fn cube(mass: f64) -> BodyParams {
    BodyParams::solid_box(mass, Vector3::repeat(OBJECT_SIZE / 2.0), 0.0)
}

const HALF: f64 = OBJECT_SIZE / 2.0;
const AXES: [[f64; 2]; 4] = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];

fn axis(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let a = AXES[rng.gen_range(0..4)];
    Vector3::new(a[0], a[1], 0.0)
}

// ---------------------------------------------------------------- AC-1

fn ac1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1.0 / 60.0;
    let mut worst = [0.0f64; 4];
    let mut failures = 0;
    for r in 0..4 {
        let mut n = 0;
        while n < 1000 {
            let res = match r {
                0 => ac1_push(&mut rng, h),
                1 => ac1_collide(&mut rng, h, true),
                2 => ac1_collide(&mut rng, h, false),
                _ => ac1_incline(&mut rng, h),
            };
            match res {
                Some(Some(e)) => {
                    worst[r] = worst[r].max(e);
                    n += 1;
                }
                Some(None) => {
                    failures += 1;
                    n += 1;
                }
                None => {}
            }
        }
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    Outcome {
        pass: max <= 1e-6 && failures == 0,
        detail: format!(
            "max |v - v_oracle| push {:.1e}, collide(contact) {:.1e}, collide(apart) {:.1e}, incline {:.1e} m/s (tol 1e-6), {failures} failed steps",
            worst[0], worst[1], worst[2], worst[3]
        ),
    }
}

/// `None`: configuration not kinetic, resample. `Some(None)`: the step failed.
fn ac1_push(rng: &mut ChaCha8Rng, h: f64) -> Option<Option<f64>> {
    let (m, mu) = (rng.gen_range(0.5..5.0), rng.gen_range(0.05..0.5));
    let (v, f) = (rng.gen_range(0.05..2.0), rng.gen_range(1.0..10.0));
    let world = World::new(vec![cube(m)], vec![PlaneGeom::ground()], FrictionTable::uniform(mu), h);
    let g = world.gravity.norm();
    let expect = v + h * (f / m - mu * g);
    if expect < 0.01 {
        return None;
    }
    let e = axis(rng);
    let start = State { poses: vec![Pose::from_position(Vector3::new(0.3, -0.2, HALF))], twists: vec![Twist::linear(e * v)] };
    Some(step(&world, &start, &[Wrench::force(e * f)]).ok().map(|(s, _)| (s.twists[0].linear - e * expect).norm()))
}

fn ac1_collide(rng: &mut ChaCha8Rng, h: f64, touching: bool) -> Option<Option<f64>> {
    let (m1, m2, mu) = (rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen_range(0.05..0.5));
    let f = rng.gen_range(1.0..10.0);
    let v2 = rng.gen_range(0.2..1.5);
    let v1 = if touching { v2 + rng.gen_range(0.0..1.0) } else { rng.gen_range(0.05..2.0) };
    let world = World::new(vec![cube(m1), cube(m2)], vec![PlaneGeom::ground()], FrictionTable::uniform(mu), h);
    let g = world.gravity.norm();
    let (e1, e2) = if touching {
        let vc = (m1 * v1 + m2 * v2 + h * f) / (m1 + m2) - mu * g * h;
        (vc, vc)
    } else {
        (v1 + h * (f / m1 - mu * g), v2 - mu * g * h)
    };
    if e1.min(e2) < 0.01 {
        return None;
    }
    let e = axis(rng);
    let p1 = Vector3::new(0.1, 0.2, HALF);
    let p2 = p1 + e * (OBJECT_SIZE + if touching { 0.0 } else { rng.gen_range(0.2..0.5) });
    let start = State {
        poses: vec![Pose::from_position(p1), Pose::from_position(p2)],
        twists: vec![Twist::linear(e * v1), Twist::linear(e * v2)],
    };
    Some(step(&world, &start, &[Wrench::force(e * f), Wrench::zero()]).ok().map(|(s, _)| {
        (s.twists[0].linear - e * e1).norm().max((s.twists[1].linear - e * e2).norm())
    }))
}

fn ac1_incline(rng: &mut ChaCha8Rng, h: f64) -> Option<Option<f64>> {
    let theta = rng.gen_range(15f64..40.0).to_radians();
    let mu = rng.gen_range(0.0..0.9) * theta.tan();
    let (m, v) = (rng.gen_range(0.5..5.0), rng.gen_range(0.05..2.0));
    let plane = PlaneGeom::incline(theta);
    let world = World::new(vec![cube(m)], vec![plane], FrictionTable::uniform(mu), h);
    let g = world.gravity.norm();
    let expect = v + h * g * (theta.sin() - mu * theta.cos());
    let down = Vector3::new(-theta.cos(), 0.0, -theta.sin());
    let start = State {
        poses: vec![Pose::from_axis_angle(Vector3::y(), -theta, plane.normal * HALF + down * rng.gen_range(-1.0..1.0))],
        twists: vec![Twist::linear(down * v)],
    };
    Some(step(&world, &start, &[Wrench::zero()]).ok().map(|(s, _)| (s.twists[0].linear - down * expect).norm()))
}

// ---------------------------------------------------------------- AC-2 .. AC-5

struct SysidRun {
    report: FitReport,
    truth_loss: f64,
}

fn sysid_run(cfg: &ScenarioConfig, n: usize, init: &[f64], free: &[ParamKind]) -> SysidRun {
    let ds = Dataset::generate(cfg, n).expect("dataset");
    let world = ds.world();
    let truth = LearnableParams::from_world(&world).values();
    let nb = world.n_bodies();
    let mut params = LearnableParams::new(&init[..nb], &init[nb..]);
    params.free_only(free);
    let train: Vec<&Trajectory> = ds.train().collect();
    let truth_loss = sysid_loss(&world, &train, &LearnableParams::new(&truth[..nb], &truth[nb..])).expect("loss").loss;
    let problem = FitProblem {
        world,
        train,
        test: ds.test().collect(),
        object_size: OBJECT_SIZE,
        truth: Some(truth.clone()),
        pixels: None,
    };
    let report = fit(LossKind::Sysid, &problem, params, None, &FitConfig::default()).expect("fit");
    SysidRun { report, truth_loss }
}

fn ac2() -> Outcome {
    let mut cfg = ScenarioConfig::push();
    cfg.seed = 1;
    let r = sysid_run(&cfg, 50, &[2.0, 0.4], &[ParamKind::Friction(0)]).report;
    let err = r.rel_errors.as_ref().expect("truth")[1];
    Outcome {
        pass: err <= 0.02 && r.pos_err <= 0.02 && !r.diverged,
        detail: format!(
            "mu {:.5} (err {:.3}%, tol 2%), test position error {:.3}% of size (tol 2%), {} epochs",
            r.final_params[1],
            100.0 * err,
            100.0 * r.pos_err,
            r.epochs.len() - 1
        ),
    }
}

fn ac3() -> Outcome {
    let mut cfg = ScenarioConfig::collide();
    cfg.seed = 2;
    let r = sysid_run(&cfg, 20, &[2.0, 1.5, 0.4], &[ParamKind::Mass(0), ParamKind::Friction(0)]).report;
    let e = r.rel_errors.as_ref().expect("truth");
    Outcome {
        pass: e[0] <= 0.05 && e[2] <= 0.05 && !r.diverged,
        detail: format!(
            "m1 {:.4} (err {:.2}%), mu {:.4} (err {:.2}%), tol 5%",
            r.final_params[0],
            100.0 * e[0],
            r.final_params[2],
            100.0 * e[2]
        ),
    }
}

fn ac4() -> Outcome {
    // Under a constant push only f/m - mu g shows up in the trajectories.
    let mut cfg = ScenarioConfig::push();
    cfg.seed = 5;
    cfg.force_range = [8.0, 8.0];
    let g = 9.81;
    let mut found = Vec::new();
    let mut loss_gap = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 1.2 + 0.6 * seed as f64 + rng.gen_range(0.0..0.2);
        let mu = rng.gen_range(0.1..0.3f64).min(0.6 * 8.0 / (m * g));
        let run = sysid_run(&cfg, 20, &[m, mu], &[ParamKind::Mass(0), ParamKind::Friction(0)]);
        loss_gap = loss_gap.max((run.report.final_loss() - run.truth_loss).abs());
        let obs = run.report.observability.as_ref().is_some_and(|o| o.observable);
        found.push((run.report.final_params[0], run.report.final_params[1], obs));
    }
    let mut min_diff = f64::INFINITY;
    for i in 0..found.len() {
        for j in i + 1..found.len() {
            let (a, b) = (found[i], found[j]);
            let d = ((a.0 - b.0) / a.0.min(b.0)).abs().max(((a.1 - b.1) / a.1.min(b.1)).abs());
            min_diff = min_diff.min(d);
        }
    }
    let flagged = found.iter().filter(|f| !f.2).count();
    let pairs: Vec<String> = found.iter().map(|f| format!("({:.3}, {:.4})", f.0, f.1)).collect();
    Outcome {
        pass: loss_gap <= 1e-6 && min_diff > 0.10,
        detail: format!(
            "max |loss - optimum| {loss_gap:.1e} (tol 1e-6), min pairwise difference {:.1}% (need > 10%), {flagged}/5 flagged unobservable, pairs {}",
            100.0 * min_diff,
            pairs.join(" ")
        ),
    }
}

fn ac5() -> Outcome {
    let mut cfg = ScenarioConfig::incline();
    cfg.seed = 4;
    let r = sysid_run(&cfg, 20, &[1.0, 0.4], &[ParamKind::Friction(0)]).report;
    let err = r.rel_errors.as_ref().expect("truth")[1];
    Outcome {
        pass: err <= 0.05 && !r.diverged,
        detail: format!("mu {:.5} (err {:.3}%, tol 5%), test position error {:.3}%", r.final_params[1], 100.0 * err, 100.0 * r.pos_err),
    }
}

// ---------------------------------------------------------------- AC-6

fn rand_vec6(rng: &mut ChaCha8Rng) -> Vector6<f64> {
    Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0))
}

fn random_cotangent(rng: &mut ChaCha8Rng, n: usize) -> StateGrad {
    let mut g = StateGrad::zeros(n);
    for i in 0..n {
        g.twists[i] = rand_vec6(rng);
        g.poses[i] = PoseGrad {
            q: Vector4::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
            p: Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
        };
    }
    g
}

fn dot_state(g: &StateGrad, s: &State) -> f64 {
    let mut acc = 0.0;
    for i in 0..s.poses.len() {
        let q = s.poses[i].q;
        acc += g.twists[i].dot(&s.twists[i].to_vector())
            + g.poses[i].p.dot(&s.poses[i].p)
            + g.poses[i].q.dot(&Vector4::new(q.w, q.i, q.j, q.k));
    }
    acc
}

/// A sliding configuration: one pushed block, two blocks in contact, or a
/// block sliding down an incline. Velocities stay well inside the kinetic
/// regime so finite differences do not cross an active-set change.
fn gradient_scene(rng: &mut ChaCha8Rng, kind: usize) -> (World, State, Vec<Wrench>) {
    let h = 1.0 / 60.0;
    let mu = rng.gen_range(0.1..0.4);
    match kind {
        0 => {
            let e = axis(rng);
            let world = World::new(vec![cube(rng.gen_range(1.0..3.0))], vec![PlaneGeom::ground()], FrictionTable::uniform(mu), h);
            let s = State {
                poses: vec![Pose::from_position(Vector3::new(0.0, 0.0, HALF))],
                twists: vec![Twist::linear(e * rng.gen_range(0.5..2.0))],
            };
            (world, s, vec![Wrench::force(e * rng.gen_range(1.0..10.0))])
        }
        1 => {
            let e = axis(rng);
            let world = World::new(
                vec![cube(rng.gen_range(1.0..3.0)), cube(rng.gen_range(1.0..3.0))],
                vec![PlaneGeom::ground()],
                FrictionTable::uniform(mu),
                h,
            );
            let v2 = rng.gen_range(0.5..1.5);
            let p1 = Vector3::new(0.0, 0.0, HALF);
            let s = State {
                poses: vec![Pose::from_position(p1), Pose::from_position(p1 + e * OBJECT_SIZE)],
                twists: vec![Twist::linear(e * (v2 + rng.gen_range(0.1..1.0))), Twist::linear(e * v2)],
            };
            (world, s, vec![Wrench::force(e * rng.gen_range(1.0..10.0)), Wrench::zero()])
        }
        _ => {
            let theta = rng.gen_range(25f64..40.0).to_radians();
            let mu = rng.gen_range(0.1..0.4);
            let plane = PlaneGeom::incline(theta);
            let world = World::new(vec![cube(rng.gen_range(0.5..3.0))], vec![plane], FrictionTable::uniform(mu), h);
            let down = Vector3::new(-theta.cos(), 0.0, -theta.sin());
            let s = State {
                poses: vec![Pose::from_axis_angle(Vector3::y(), -theta, plane.normal * HALF)],
                twists: vec![Twist::linear(down * rng.gen_range(0.5..2.0))],
            };
            (world, s, vec![Wrench::force(down * rng.gen_range(0.0..5.0))])
        }
    }
}

fn vec_rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

fn ac6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let eps = 1e-6;
    let mut worst_step = 0.0f64;
    let mut n = 0;
    let mut tries = 0;
    while n < 100 && tries < 1000 {
        tries += 1;
        let (world, s0, f0) = gradient_scene(&mut rng, n % 3);
        let Ok((_, info, pb)) = step_with_pullback(&world, &s0, &f0) else { continue };
        if info.degenerate || pb.uses_finite_differences() {
            continue;
        }
        let g = random_cotangent(&mut rng, s0.poses.len());
        let Ok(an) = pb.backward(&g) else { continue };
        let eval = |w: &World, s: &State, f: &[Wrench]| -> Option<f64> {
            let (next, i) = step(w, s, f).ok()?;
            (i.n_contacts == info.n_contacts).then(|| dot_state(&g, &next))
        };
        let central = |plus: Option<f64>, minus: Option<f64>| Some((plus? - minus?) / (2.0 * eps));
        let masses = world.masses();
        let friction = LearnableParams::from_world(&world).friction();
        let mut errs = Vec::new();
        let mut ok = true;
        // masses
        let mut fd = Vec::new();
        for i in 0..masses.len() {
            let (mut a, mut b) = (masses.clone(), masses.clone());
            a[i] += eps;
            b[i] -= eps;
            fd.push(central(eval(&world.with_params(&a, &friction), &s0, &f0), eval(&world.with_params(&b, &friction), &s0, &f0)));
        }
        match fd.into_iter().collect::<Option<Vec<f64>>>() {
            Some(fd) => errs.push(vec_rel(&an.masses, &fd)),
            None => ok = false,
        }
        // friction
        let mut fd = Vec::new();
        for i in 0..friction.len() {
            let (mut a, mut b) = (friction.clone(), friction.clone());
            a[i] += eps;
            b[i] -= eps;
            fd.push(central(eval(&world.with_params(&masses, &a), &s0, &f0), eval(&world.with_params(&masses, &b), &s0, &f0)));
        }
        match fd.into_iter().collect::<Option<Vec<f64>>>() {
            Some(fd) => errs.push(vec_rel(&an.friction, &fd)),
            None => ok = false,
        }
        // external wrenches and twists
        for body in 0..s0.poses.len() {
            let mut fd_f = Vec::new();
            let mut fd_t = Vec::new();
            for k in 0..6 {
                let bump_f = |d: f64| {
                    let mut f = f0.clone();
                    let mut v = f[body].to_vector();
                    v[k] += d;
                    f[body] = Wrench::from_vector(&v);
                    eval(&world, &s0, &f)
                };
                fd_f.push(central(bump_f(eps), bump_f(-eps)));
                let bump_t = |d: f64| {
                    let mut s = s0.clone();
                    let mut v = s.twists[body].to_vector();
                    v[k] += d;
                    s.twists[body] = Twist::from_vector(&v);
                    eval(&world, &s, &f0)
                };
                fd_t.push(central(bump_t(eps), bump_t(-eps)));
            }
            match (fd_f.into_iter().collect::<Option<Vec<f64>>>(), fd_t.into_iter().collect::<Option<Vec<f64>>>()) {
                (Some(ff), Some(ft)) => {
                    errs.push(vec_rel(an.forces[body].as_slice(), &ff));
                    errs.push(vec_rel(an.state.twists[body].as_slice(), &ft));
                }
                _ => ok = false,
            }
        }
        if !ok {
            continue;
        }
        worst_step = errs.into_iter().fold(worst_step, f64::max);
        n += 1;
    }

    let worst_roll = ac6_rollouts(&mut rng);
    let worst_render = ac6_render(&mut rng);
    Outcome {
        pass: n == 100 && worst_step <= 1e-4 && worst_roll <= 1e-3 && worst_render <= 1e-2,
        detail: format!(
            "step {worst_step:.1e} over {n} configs (tol 1e-4), 10-step rollout {worst_roll:.1e} (tol 1e-3), render {worst_render:.1e} (tol 1e-2)"
        ),
    }
}

fn ac6_rollouts(rng: &mut ChaCha8Rng) -> f64 {
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for k in 0..12 {
        let (world, s0, f0) = gradient_scene(rng, k % 3);
        let forces = vec![f0; 10];
        let roll = rollout_with_pullbacks(&world, &s0, &forces).expect("rollout");
        let gs: Vec<StateGrad> = (0..=10).map(|_| random_cotangent(rng, s0.poses.len())).collect();
        let an = roll.backward(&gs).expect("backward");
        let loss = |w: &World, s: &State| -> f64 {
            let states = rollout(w, s, &forces).expect("rollout");
            states.iter().zip(&gs).map(|(s, g)| dot_state(g, s)).sum()
        };
        let masses = world.masses();
        let friction = LearnableParams::from_world(&world).friction();
        let mut fd = Vec::new();
        for i in 0..masses.len() {
            let (mut a, mut b) = (masses.clone(), masses.clone());
            a[i] += eps;
            b[i] -= eps;
            fd.push((loss(&world.with_params(&a, &friction), &s0) - loss(&world.with_params(&b, &friction), &s0)) / (2.0 * eps));
        }
        worst = worst.max(vec_rel(&an.masses, &fd));
        let (mut a, mut b) = (friction.clone(), friction.clone());
        a[0] += eps;
        b[0] -= eps;
        let fd = (loss(&world.with_params(&masses, &a), &s0) - loss(&world.with_params(&masses, &b), &s0)) / (2.0 * eps);
        worst = worst.max(vec_rel(&an.friction[..1], &[fd]));
        // Contact geometry is held fixed in the backward pass, so twist
        // gradients are compared only against a plane, whose normal cannot
        // turn with the body.
        if k % 3 == 1 {
            continue;
        }
        for body in 0..s0.poses.len() {
            let mut fd = Vec::new();
            for j in 0..6 {
                let bump = |d: f64| {
                    let mut s = s0.clone();
                    let mut v = s.twists[body].to_vector();
                    v[j] += d;
                    s.twists[body] = Twist::from_vector(&v);
                    loss(&world, &s)
                };
                fd.push((bump(eps) - bump(-eps)) / (2.0 * eps));
            }
            worst = worst.max(vec_rel(an.init.twists[body].as_slice(), &fd));
        }
    }
    worst
}

fn ac6_render(rng: &mut ChaCha8Rng) -> f64 {
    let cam = Camera::default();
    let (assets, sprites) = scenario_assets(2, OBJECT_SIZE, &cam);
    let bg = assets.background_frame();
    let mut worst = 0.0f64;
    for (k, sigma) in [(5usize, 2.0), (17, 4.0)] {
        let blur = BlurOperator::new(cam.width, cam.height, k, sigma);
        for _ in 0..5 {
            let mut pose = || PlanarPose { x: rng.gen_range(-0.6..0.6), y: rng.gen_range(-0.6..0.6), yaw: rng.gen_range(-0.5..0.5) };
            let (a, b) = (vec![pose(), pose()], vec![pose(), pose()]);
            let (target, _) = render_with_pose_gradients(&b, &sprites, &bg, &cam).expect("render");
            let loss = |p: &[PlanarPose]| -> f64 {
                let (img, _) = render_with_pose_gradients(p, &sprites, &bg, &cam).expect("render");
                blur.sq_diff_and_grad(&target, &img).0
            };
            let (img, pb) = render_with_pose_gradients(&a, &sprites, &bg, &cam).expect("render");
            let (_, g) = blur.sq_diff_and_grad(&target, &img);
            let an: Vec<f64> = pb.backward(&g).iter().flat_map(|g| [g.x, g.y, g.yaw]).collect();
            let eps = 1e-6;
            let mut fd = Vec::new();
            for i in 0..a.len() {
                for c in 0..3 {
                    let bump = |d: f64| {
                        let mut p = a.clone();
                        match c {
                            0 => p[i].x += d,
                            1 => p[i].y += d,
                            _ => p[i].yaw += d,
                        }
                        loss(&p)
                    };
                    fd.push((bump(eps) - bump(-eps)) / (2.0 * eps));
                }
            }
            worst = worst.max(vec_rel(&an, &fd));
        }
    }
    worst
}

// ---------------------------------------------------------------- AC-7

fn kinetic_energy(world: &World, s: &State) -> f64 {
    world
        .bodies
        .iter()
        .zip(&s.twists)
        .zip(&s.poses)
        .map(|((b, t), p)| {
            let r = p.rotation();
            let inertia = r * b.inertia_body * r.transpose();
            0.5 * b.mass * t.linear.norm_squared() + 0.5 * t.angular.dot(&(inertia * t.angular))
        })
        .sum()
}

fn ac7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1.0 / 60.0;
    let mut worst_comp = 0.0f64;
    let mut failed = 0;
    let mut record = |info: &diffphys::world::StepInfo| worst_comp = worst_comp.max(info.complementarity);

    // Frictionless collisions: horizontal momentum is untouched by the ground.
    let mut worst_mom = 0.0f64;
    for _ in 0..30 {
        let (m1, m2) = (rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0));
        let world = World::new(vec![cube(m1), cube(m2)], vec![PlaneGeom::ground()], FrictionTable::uniform(0.0), h);
        let e = axis(&mut rng);
        let p1 = Vector3::new(0.0, 0.0, HALF);
        let mut s = State {
            poses: vec![
                Pose::from_yaw(rng.gen_range(-0.3..0.3), p1),
                Pose::from_yaw(rng.gen_range(-0.3..0.3), p1 + e * rng.gen_range(0.4..0.6)),
            ],
            twists: vec![Twist::linear(e * rng.gen_range(1.0..3.0)), Twist::linear(-e * rng.gen_range(0.0..1.0))],
        };
        let momentum = |s: &State| (s.twists[0].linear * m1 + s.twists[1].linear * m2).xy();
        for _ in 0..60 {
            match step(&world, &s, &[Wrench::zero(), Wrench::zero()]) {
                Ok((next, info)) => {
                    record(&info);
                    worst_mom = worst_mom.max((momentum(&next) - momentum(&s)).norm());
                    s = next;
                }
                Err(_) => {
                    failed += 1;
                    break;
                }
            }
        }
    }

    // Sliding and spinning blocks with friction and no applied force.
    let mut worst_ke = 0.0f64;
    for k in 0..30 {
        let (world, mut s, _) = gradient_scene(&mut rng, k % 2);
        for t in &mut s.twists {
            t.angular.z = rng.gen_range(-3.0..3.0);
        }
        let zero = vec![Wrench::zero(); s.poses.len()];
        let mut ke = kinetic_energy(&world, &s);
        for _ in 0..90 {
            match step(&world, &s, &zero) {
                Ok((next, info)) => {
                    record(&info);
                    let k1 = kinetic_energy(&world, &next);
                    worst_ke = worst_ke.max(k1 - ke);
                    ke = k1;
                    s = next;
                }
                Err(_) => {
                    failed += 1;
                    break;
                }
            }
        }
    }

    // A two-block stack resting on the ground.
    let world = World::new(vec![cube(1.0), cube(0.5)], vec![PlaneGeom::ground()], FrictionTable::uniform(0.5), h);
    let tol = world.contact.activation_tol;
    let mut s = State::at_rest(vec![
        Pose::from_position(Vector3::new(0.0, 0.0, HALF)),
        Pose::from_position(Vector3::new(0.0, 0.0, 3.0 * HALF)),
    ]);
    let mut worst_pen = 0.0f64;
    for _ in 0..1000 {
        match step(&world, &s, &[Wrench::zero(), Wrench::zero()]) {
            Ok((next, info)) => {
                record(&info);
                worst_pen = worst_pen.max(info.max_penetration);
                s = next;
            }
            Err(_) => {
                failed += 1;
                break;
            }
        }
    }

    let pass = worst_mom <= 1e-8 && worst_ke <= 1e-10 && worst_pen <= 2.0 * tol && worst_comp <= 1e-8 && failed == 0;
    Outcome {
        pass,
        detail: format!(
            "momentum drift {worst_mom:.1e}/step (tol 1e-8), max KE increase {worst_ke:.1e} J, stack penetration {worst_pen:.1e} m (tol {:.0e}), complementarity {worst_comp:.1e} (tol 1e-8), {failed} failed solves",
            2.0 * tol
        ),
    }
}

// ---------------------------------------------------------------- AC-8, AC-9

struct PixelRun {
    dataset: Dataset,
    scene: PixelScene,
    report: FitReport,
    init_mu: f64,
}

fn pixel_config() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::push();
    cfg.seed = 8;
    cfg.h = 1.0 / 120.0;
    cfg.n_steps = 151;
    cfg.upstream_start = true;
    cfg.init_speed_max = 0.0;
    cfg
}

fn pixel_run() -> &'static PixelRun {
    static RUN: OnceLock<PixelRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dataset = Dataset::generate(&pixel_config(), 22).expect("dataset");
        let world = dataset.world();
        let (assets, sprites) = scenario_assets(1, OBJECT_SIZE, &Camera::default());
        let scene = PixelScene::from_assets(&assets, sprites);
        let train: Vec<&Trajectory> = dataset.train().collect();
        let seqs = train.iter().map(|t| PixelSequence::from_trajectory(t, &scene, 5)).collect::<Result<Vec<_>, _>>().expect("video");
        let truth = LearnableParams::from_world(&world).values();
        let init_mu = 2.0 * truth[1];
        let mut params = LearnableParams::new(&[truth[0]], &[init_mu]);
        params.free_only(&[ParamKind::Friction(0)]);
        let problem = FitProblem {
            world,
            train,
            test: dataset.test().collect(),
            object_size: OBJECT_SIZE,
            truth: Some(truth),
            pixels: Some((scene.clone(), seqs)),
        };
        let report = fit(LossKind::Pixel, &problem, params, None, &FitConfig::default()).expect("fit");
        drop(problem);
        PixelRun { dataset, scene, report, init_mu }
    })
}

fn ac8() -> Outcome {
    let run = pixel_run();
    let r = &run.report;
    let err = r.rel_errors.as_ref().expect("truth")[1];
    Outcome {
        pass: err <= 0.15 && r.pos_err <= 0.12 && !r.diverged,
        detail: format!(
            "mu {:.4} (err {:.2}%, tol 15%), test position error {:.2}% of size (tol 12%), {} train sequences",
            r.final_params[1],
            100.0 * err,
            100.0 * r.pos_err,
            run.dataset.split.train.len()
        ),
    }
}

fn frame_error(world: &World, scene: &PixelScene, traj: &Trajectory, t: usize) -> f64 {
    let states = rollout(world, &traj.states[0], &traj.step_forces()[..t]).expect("rollout");
    let a = scene.render(&states[t].poses).expect("render");
    let b = scene.render(&traj.states[t].poses).expect("render");
    a.mean_abs_error(&b)
}

fn ac9() -> Outcome {
    // Self-consistency on every test frame with the true parameters.
    let ds = Dataset::generate(&pixel_config(), 22).expect("dataset");
    let world = ds.world();
    let (assets, sprites) = scenario_assets(1, OBJECT_SIZE, &Camera::default());
    let scene = PixelScene::from_assets(&assets, sprites);
    let mut self_err = 0.0f64;
    for traj in ds.test() {
        let states = rollout(&world, &traj.states[0], traj.step_forces()).expect("rollout");
        for (s, gt) in states.iter().zip(&traj.states) {
            let a: Frame = scene.render(&s.poses).expect("render");
            self_err = self_err.max(a.mean_abs_error(&scene.render(&gt.poses).expect("render")));
        }
    }

    let run = pixel_run();
    let base = run.dataset.world();
    let fitted = base.with_params(&[run.report.final_params[0]], &[run.report.final_params[1]]);
    let initial = base.with_params(&[run.report.final_params[0]], &[run.init_mu]);
    let test: Vec<&Trajectory> = run.dataset.test().collect();
    let mean = |w: &World| test.iter().map(|t| frame_error(w, &run.scene, t, 120)).sum::<f64>() / test.len() as f64;
    let (e_fit, e_init) = (mean(&fitted), mean(&initial));
    Outcome {
        pass: self_err <= 1e-6 && e_fit * 10.0 <= e_init,
        detail: format!(
            "self-consistency {self_err:.1e} (tol 1e-6), frame-120 error fitted {e_fit:.2e} vs initial {e_init:.2e} ({:.1}x, need 10x)",
            e_init / e_fit.max(f64::MIN_POSITIVE)
        ),
    }
}

// ---------------------------------------------------------------- AC-10

fn ac10() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut outputs = Vec::new();
    for k in 0..2 {
        let mut cfg = ScenarioConfig::collide();
        cfg.seed = 10;
        cfg.n_steps = 40;
        let ds = Dataset::generate(&cfg, 6).expect("dataset");
        let data = dir.path().join(format!("data_{k}.json"));
        ds.save(&data).expect("save");
        let ds = Dataset::load(&data).expect("load");
        let world = ds.world();
        let mut params = LearnableParams::new(&[2.0, 1.5], &[0.4]);
        params.free_only(&[ParamKind::Mass(0), ParamKind::Friction(0)]);
        let problem = FitProblem {
            world,
            train: ds.train().collect(),
            test: ds.test().collect(),
            object_size: OBJECT_SIZE,
            truth: None,
            pixels: None,
        };
        let cfg = FitConfig { epochs: 15, eval_every: 5, ..FitConfig::default() };
        let report = fit(LossKind::Sysid, &problem, params, None, &cfg).expect("fit");
        let csv = dir.path().join(format!("report_{k}.csv"));
        report.write_csv(&csv).expect("csv");
        outputs.push((std::fs::read(&data).expect("read"), std::fs::read(&csv).expect("read")));
    }
    let same_data = outputs[0].0 == outputs[1].0;
    let same_csv = outputs[0].1 == outputs[1].1;
    Outcome {
        pass: same_data && same_csv,
        detail: format!("dataset identical: {same_data}, report.csv identical: {same_csv}"),
    }
}
