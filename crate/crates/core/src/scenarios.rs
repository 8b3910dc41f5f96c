//! The push, collide and incline scenarios: configuration, randomized
//! trajectory sampling, simulation, closed-form 1-D oracles, the
//! average-velocity estimator and dataset persistence.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Quaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contact::{detect_box_box, FrictionTable, PlaneGeom};
use crate::dynamics::{BodyParams, Pose, Twist, Wrench, GRAVITY};
use crate::error::{Error, Result};
use crate::world::{rollout, State, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Push,
    Collide,
    Incline,
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "push" => Ok(ScenarioKind::Push),
            "collide" => Ok(ScenarioKind::Collide),
            "incline" => Ok(ScenarioKind::Incline),
            other => Err(Error::Config(format!("unknown scenario '{other}'"))),
        }
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScenarioKind::Push => "push",
            ScenarioKind::Collide => "collide",
            ScenarioKind::Incline => "incline",
        })
    }
}

/// Scenario definition including ground-truth physical parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub bodies: Vec<BodyParams>,
    pub friction: FrictionTable,
    /// Plane inclination, radians; zero except for the incline.
    pub theta: f64,
    pub h: f64,
    /// Number of recorded states per trajectory.
    pub n_steps: usize,
    /// Bounds of the uniformly sampled force magnitude, N.
    pub force_range: [f64; 2],
    pub seed: u64,
    /// Side length of the square region initial positions are drawn from, m.
    pub workspace: f64,
    /// Upper bound of the initial speed along the force axis, m/s.
    #[serde(default)]
    pub init_speed_max: f64,
    /// Start objects upstream along their force axis so they stay in view.
    #[serde(default)]
    pub upstream_start: bool,
    /// Incline only: height of the initial drop above the plane, m.
    #[serde(default)]
    pub drop_height: f64,
    /// Collide only: face-to-face gap between the blocks, m.
    #[serde(default)]
    pub gap_range: [f64; 2],
}

/// Cube edge length of the scenario objects, m.
pub const OBJECT_SIZE: f64 = 0.25;

impl ScenarioConfig {
    fn base(kind: ScenarioKind, bodies: Vec<BodyParams>, mu: f64) -> Self {
        ScenarioConfig {
            kind,
            bodies,
            friction: FrictionTable::uniform(mu),
            theta: 0.0,
            h: 1.0 / 60.0,
            n_steps: 100,
            force_range: [1.0, 10.0],
            seed: 0,
            workspace: 2.0,
            init_speed_max: 0.0,
            upstream_start: false,
            drop_height: 0.0,
            gap_range: [0.0, 0.0],
        }
    }

    fn cube(mass: f64) -> BodyParams {
        BodyParams::solid_box(mass, Vector3::repeat(OBJECT_SIZE / 2.0), 0.0)
    }

    /// One 2 kg block on the ground, μ = 0.2.
    pub fn push() -> Self {
        Self::base(ScenarioKind::Push, vec![Self::cube(2.0)], 0.2)
    }

    /// A pushed 1 kg block running into a 1.5 kg block, μ = 0.2 for all pairs.
    pub fn collide() -> Self {
        let mut c = Self::base(ScenarioKind::Collide, vec![Self::cube(1.0), Self::cube(1.5)], 0.2);
        c.gap_range = [0.3, 0.6];
        c
    }

    /// A 1 kg block dropped 0.3 m onto a 30° incline, μ = 0.2.
    pub fn incline() -> Self {
        let mut c = Self::base(ScenarioKind::Incline, vec![Self::cube(1.0)], 0.2);
        c.theta = 30f64.to_radians();
        c.drop_height = 0.3;
        c
    }

    pub fn for_kind(kind: ScenarioKind) -> Self {
        match kind {
            ScenarioKind::Push => Self::push(),
            ScenarioKind::Collide => Self::collide(),
            ScenarioKind::Incline => Self::incline(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.h > 0.0) {
            return bad("h must be positive");
        }
        if self.n_steps < 2 {
            return bad("n_steps must be at least 2");
        }
        let [lo, hi] = self.force_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad("force range must satisfy 0 < min <= max < inf");
        }
        let expected = if self.kind == ScenarioKind::Collide { 2 } else { 1 };
        if self.bodies.len() != expected {
            return Err(Error::Config(format!("{} needs {expected} bodies, got {}", self.kind, self.bodies.len())));
        }
        if self.kind != ScenarioKind::Incline && self.theta != 0.0 {
            return bad("push and collide use a flat plane");
        }
        if self.kind == ScenarioKind::Collide && !(self.gap_range[0] >= 0.0 && self.gap_range[1] >= self.gap_range[0]) {
            return bad("invalid gap range");
        }
        for (i, b) in self.bodies.iter().enumerate() {
            b.validate().map_err(|e| Error::Config(format!("body {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn plane(&self) -> PlaneGeom {
        match self.kind {
            ScenarioKind::Incline => PlaneGeom::incline(self.theta),
            _ => PlaneGeom::ground(),
        }
    }

    pub fn world(&self) -> World {
        World::new(self.bodies.clone(), vec![self.plane()], self.friction.clone(), self.h)
    }

    /// Deterministic generator for trajectory `index`.
    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

/// Initial state and applied wrenches of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub init: State,
    /// Unit direction of the applied force (zero for the incline).
    pub force_axis: Vector3<f64>,
    /// `n_steps - 1` wrench sets, one per simulated step.
    pub forces: Vec<Vec<Wrench>>,
}

const AXES: [[f64; 3]; 4] = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]];

pub fn sample_trajectory_spec(config: &ScenarioConfig, index: u64) -> TrajectorySpec {
    let mut rng = config.rng(index);
    let half = 0.4 * config.workspace;
    let n_force_steps = config.n_steps - 1;
    match config.kind {
        ScenarioKind::Push | ScenarioKind::Collide => {
            let axis = Vector3::from(AXES[rng.gen_range(0..4)]);
            let lateral = Vector3::new(-axis.y, axis.x, 0.0);
            let mut along = rng.gen_range(-half..=half);
            if config.upstream_start {
                along = rng.gen_range(-half..=-0.25 * half);
            }
            let across = rng.gen_range(-half..=half);
            let b0 = &config.bodies[0];
            let p0 = axis * along + lateral * across + Vector3::z() * b0.half_extents.z;
            let speed = if config.init_speed_max > 0.0 { rng.gen_range(0.0..=config.init_speed_max) } else { 0.0 };
            let mut poses = Vec::new();
            let mut twists = Vec::new();
            if config.kind == ScenarioKind::Push {
                let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                poses.push(Pose::from_yaw(yaw, p0));
            } else {
                poses.push(Pose::from_position(p0));
            }
            twists.push(Twist::linear(axis * speed));
            if config.kind == ScenarioKind::Collide {
                let b1 = &config.bodies[1];
                let gap = rng.gen_range(config.gap_range[0]..=config.gap_range[1]);
                let dist = b0.half_extents.x + b1.half_extents.x + gap;
                let p1 = Vector3::new(p0.x, p0.y, b1.half_extents.z) + axis * dist;
                poses.push(Pose::from_position(p1));
                twists.push(Twist::zero());
            }
            let [lo, hi] = config.force_range;
            let forces = (0..n_force_steps)
                .map(|_| {
                    let mag = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                    let mut w = vec![Wrench::force(axis * mag)];
                    if config.kind == ScenarioKind::Collide {
                        w.push(Wrench::zero());
                    }
                    w
                })
                .collect();
            TrajectorySpec { init: State { poses, twists }, force_axis: axis, forces }
        }
        ScenarioKind::Incline => {
            let plane = config.plane();
            let b = &config.bodies[0];
            let down = Vector3::new(-config.theta.cos(), 0.0, -config.theta.sin());
            let along = rng.gen_range(-half..=half);
            let across = rng.gen_range(-half..=half);
            let on_plane = -down * along + Vector3::y() * across;
            let p = on_plane + plane.normal * b.half_extents.z + Vector3::z() * config.drop_height;
            let pose = Pose::from_axis_angle(Vector3::y(), -config.theta, p);
            let forces = vec![vec![Wrench::zero()]; n_force_steps];
            TrajectorySpec { init: State::at_rest(vec![pose]), force_axis: Vector3::zeros(), forces }
        }
    }
}

/// Recorded states and applied wrenches. `forces[t]` acts between states
/// `t` and `t + 1`; the final entry is zero padding so all series share a length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TrajectoryRecord", try_from = "TrajectoryRecord")]
pub struct Trajectory {
    pub states: Vec<State>,
    pub forces: Vec<Vec<Wrench>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_bodies(&self) -> usize {
        self.states.first().map_or(0, |s| s.poses.len())
    }

    /// The wrenches of the simulated steps (without the trailing padding).
    pub fn step_forces(&self) -> &[Vec<Wrench>] {
        &self.forces[..self.states.len().saturating_sub(1)]
    }

    pub fn body_poses(&self, body: usize) -> Vec<Pose> {
        self.states.iter().map(|s| s.poses[body]).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    poses: Vec<Vec<f64>>,
    twists: Vec<Vec<f64>>,
    forces: Vec<Vec<f64>>,
}

impl From<Trajectory> for TrajectoryRecord {
    fn from(t: Trajectory) -> Self {
        TrajectoryRecord {
            poses: t.states.iter().map(|s| s.poses.iter().flat_map(|p| p.to_array()).collect()).collect(),
            twists: t
                .states
                .iter()
                .map(|s| s.twists.iter().flat_map(|x| x.to_vector().iter().copied().collect::<Vec<_>>()).collect())
                .collect(),
            forces: t
                .forces
                .iter()
                .map(|f| f.iter().flat_map(|w| w.to_vector().iter().copied().collect::<Vec<_>>()).collect())
                .collect(),
        }
    }
}

impl TryFrom<TrajectoryRecord> for Trajectory {
    type Error = String;

    fn try_from(r: TrajectoryRecord) -> std::result::Result<Self, String> {
        if r.poses.len() != r.twists.len() || r.poses.len() != r.forces.len() {
            return Err(format!("series lengths differ: {} poses, {} twists, {} forces", r.poses.len(), r.twists.len(), r.forces.len()));
        }
        let mut states = Vec::with_capacity(r.poses.len());
        let mut forces = Vec::with_capacity(r.forces.len());
        for ((p, t), f) in r.poses.iter().zip(&r.twists).zip(&r.forces) {
            if p.len() % 7 != 0 || t.len() != p.len() / 7 * 6 || f.len() != t.len() {
                return Err("inconsistent per-step vector sizes".into());
            }
            states.push(State {
                poses: p.chunks(7).map(Pose::from_array).collect(),
                twists: t.chunks(6).map(|c| Twist::from_vector(&nalgebra::Vector6::from_column_slice(c))).collect(),
            });
            forces.push(f.chunks(6).map(|c| Wrench::from_vector(&nalgebra::Vector6::from_column_slice(c))).collect());
        }
        Ok(Trajectory { states, forces })
    }
}

/// Rolls out `forces` from `init` and packs the result.
pub fn simulate_from(world: &World, init: &State, forces: &[Vec<Wrench>]) -> Result<Trajectory> {
    let states = rollout(world, init, forces)?;
    let mut forces = forces.to_vec();
    forces.push(vec![Wrench::zero(); init.poses.len()]);
    Ok(Trajectory { states, forces })
}

/// Optional replacement of the ground-truth parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamsOverride {
    pub masses: Vec<f64>,
    pub friction: Vec<f64>,
}

/// Simulates trajectory `index` of the scenario.
pub fn simulate(config: &ScenarioConfig, index: u64, params: Option<&ParamsOverride>) -> Result<Trajectory> {
    config.validate()?;
    let mut world = config.world();
    if let Some(p) = params {
        world = world.with_params(&p.masses, &p.friction);
    }
    let spec = sample_trajectory_spec(config, index);
    simulate_from(&world, &spec.init, &spec.forces)
}

/// Whether the two blocks of a collide trajectory ever touch.
pub fn has_block_contact(config: &ScenarioConfig, traj: &Trajectory) -> bool {
    if traj.n_bodies() < 2 {
        return false;
    }
    traj.states.iter().any(|s| {
        detect_box_box(0, &s.poses[0], &config.bodies[0], 1, &s.poses[1], &config.bodies[1], 1e-3)
            .map(|c| !c.is_empty())
            .unwrap_or(false)
    })
}

/// One step of a block sliding along +x under `f_ext`:
/// `v_t + (f_ext / m) h − μ g h`.
pub fn oracle_push(v_t: f64, f_ext: f64, m: f64, mu: f64, h: f64) -> Result<f64> {
    if v_t < 0.0 {
        return Err(Error::Regime(format!("velocity {v_t} is not along the force")));
    }
    if v_t == 0.0 && f_ext < mu * m * GRAVITY {
        return Err(Error::Regime(format!("static friction holds: f = {f_ext} < μmg = {}", mu * m * GRAVITY)));
    }
    let v = v_t + f_ext / m * h - mu * GRAVITY * h;
    if v < 0.0 {
        return Err(Error::Regime("block comes to rest within the step".into()));
    }
    Ok(v)
}

/// Two blocks on a line, block 1 pushed toward block 2. In contact they
/// merge inelastically and decelerate together.
pub fn oracle_collide(
    v1: f64,
    v2: f64,
    m1: f64,
    m2: f64,
    mu: f64,
    f_ext: f64,
    h: f64,
    in_contact: bool,
) -> Result<(f64, f64)> {
    if in_contact {
        let vc = (m1 * v1 + m2 * v2) / (m1 + m2);
        let v = oracle_push(vc, f_ext, m1 + m2, mu, h)?;
        return Ok((v, v));
    }
    let v1n = oracle_push(v1, f_ext, m1, mu, h)?;
    let v2n = if v2 == 0.0 { 0.0 } else { oracle_push(v2, 0.0, m2, mu, h)? };
    Ok((v1n, v2n))
}

/// Downhill speed after one step: `v_t + g (sin θ − μ cos θ) h`.
pub fn oracle_incline(v_t: f64, theta: f64, mu: f64, h: f64) -> Result<f64> {
    if v_t < 0.0 {
        return Err(Error::Regime("block moves uphill".into()));
    }
    if v_t == 0.0 && theta.tan() <= mu {
        return Err(Error::Regime(format!("block sticks: tan θ = {} <= μ = {mu}", theta.tan())));
    }
    let v = v_t + GRAVITY * (theta.sin() - mu * theta.cos()) * h;
    if v < 0.0 {
        return Err(Error::Regime("block comes to rest within the step".into()));
    }
    Ok(v)
}

/// Central-difference twist over three poses spaced `h` apart. The angular
/// part is the world-frame rotation `q₃ q₁⁻¹` divided by `2h`.
pub fn average_velocity(poses: &[Pose; 3], h: f64) -> Twist {
    let linear = (poses[2].p - poses[0].p) / (2.0 * h);
    let rel = poses[2].q * poses[0].q.conjugate();
    let rel = if rel.w < 0.0 { -rel } else { rel };
    let v = rel.imag();
    let s = v.norm();
    let angular = if s < 1e-15 {
        v * (2.0 / (2.0 * h))
    } else {
        let angle = 2.0 * s.atan2(rel.w);
        v / s * (angle / (2.0 * h))
    };
    Twist::new(angular, linear)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random 9:1 train/test split; at least one test trajectory when `n >= 2`.
pub fn split_indices(n: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    idx.shuffle(&mut rng);
    let n_test = if n >= 2 { (n / 10).max(1) } else { 0 };
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Split { train, test }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyRecord {
    pub params: BodyParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: ScenarioConfig,
    pub bodies: Vec<BodyRecord>,
    pub trajectories: Vec<Trajectory>,
    pub split: Split,
}

impl Dataset {
    pub fn generate(config: &ScenarioConfig, n_trajectories: usize) -> Result<Self> {
        config.validate()?;
        let trajectories = (0..n_trajectories as u64)
            .map(|i| simulate(config, i, None))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            config: config.clone(),
            bodies: config.bodies.iter().map(|b| BodyRecord { params: b.clone() }).collect(),
            trajectories,
            split: split_indices(n_trajectories, config.seed),
        })
    }

    pub fn train(&self) -> impl Iterator<Item = &Trajectory> {
        self.split.train.iter().map(|&i| &self.trajectories[i])
    }

    pub fn test(&self) -> impl Iterator<Item = &Trajectory> {
        self.split.test.iter().map(|&i| &self.trajectories[i])
    }

    pub fn world(&self) -> World {
        self.config.world()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ds: Dataset = serde_json::from_reader(BufReader::new(file))?;
        ds.config.validate()?;
        Ok(ds)
    }
}

/// Generates `n_trajectories` and writes them to `out_path` as JSON.
pub fn generate_dataset(config: &ScenarioConfig, n_trajectories: usize, out_path: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(config, n_trajectories)?;
    ds.save(out_path)?;
    Ok(ds)
}

/// Quaternion of a rotation about z, for tests and sprite layouts.
pub fn yaw_quaternion(yaw: f64) -> Quaternion<f64> {
    Pose::from_yaw(yaw, Vector3::zeros()).q
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn push_oracle_examples() {
        assert_relative_eq!(oracle_push(0.0, 1.0, 1.0, 0.0, 0.01).unwrap(), 0.01, epsilon = 1e-15);
        assert_relative_eq!(oracle_push(0.0, 2.0, 1.0, 0.1, 0.01).unwrap(), 0.01019, epsilon = 1e-12);
        let f = 0.3 * 2.0 * GRAVITY;
        assert_relative_eq!(oracle_push(0.7, f, 2.0, 0.3, 0.01).unwrap(), 0.7, epsilon = 1e-14);
        assert!(matches!(oracle_push(0.0, 0.5, 1.0, 0.1, 0.01), Err(Error::Regime(_))));
    }

    #[test]
    fn collide_oracle_examples() {
        let (a, b) = oracle_collide(2.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.01, true).unwrap();
        assert_relative_eq!(a, 1.0);
        assert_relative_eq!(b, 1.0);
        let (a, b) = oracle_collide(4.0, 0.0, 1.0, 3.0, 0.0, 0.0, 0.01, true).unwrap();
        assert_relative_eq!(a, 1.0);
        assert_relative_eq!(b, 1.0);
        assert_eq!(oracle_collide(1.5, 0.5, 1.0, 1.0, 0.0, 0.0, 0.01, false).unwrap(), (1.5, 0.5));
    }

    #[test]
    fn incline_oracle_examples() {
        let theta = 30f64.to_radians();
        assert_relative_eq!(oracle_incline(1.0, theta, 0.2, 0.01).unwrap(), 1.03206, epsilon = 1e-5);
        assert_relative_eq!(oracle_incline(0.4, theta, theta.tan(), 0.01).unwrap(), 0.4, epsilon = 1e-14);
        assert!(matches!(oracle_incline(0.0, theta, 0.7, 0.01), Err(Error::Regime(_))));
    }

    #[test]
    fn average_velocity_examples() {
        let h = 0.1;
        let v = Vector3::new(0.3, -0.2, 0.0);
        let poses = [0.0, 1.0, 2.0].map(|k| Pose::from_position(v * (k * h)));
        assert_relative_eq!(average_velocity(&poses, h).linear, v, epsilon = 1e-14);

        let a = 2.0;
        let poses = [0.0, 1.0, 2.0].map(|k: f64| Pose::from_position(Vector3::x() * (0.5 * a * (k * h).powi(2))));
        let est = average_velocity(&poses, h).linear.x;
        let final_v = a * 2.0 * h;
        assert_relative_eq!(final_v - est, 0.5 * a * (2.0 * h), epsilon = 1e-12);

        let w = 1.3;
        let poses = [0.0, 1.0, 2.0].map(|k| Pose::from_yaw(w * k * h, Vector3::zeros()));
        assert_relative_eq!(average_velocity(&poses, h).angular, Vector3::z() * w, epsilon = 1e-12);
    }

    #[test]
    fn split_ratio() {
        let s = split_indices(10, 3);
        assert_eq!((s.train.len(), s.test.len()), (9, 1));
        assert!(s.test.iter().all(|t| !s.train.contains(t)));
        let s = split_indices(50, 3);
        assert_eq!((s.train.len(), s.test.len()), (45, 5));
    }

    #[test]
    fn frictionless_push_accelerates_linearly() {
        let mut c = ScenarioConfig::push();
        c.bodies = vec![BodyParams::solid_box(1.0, Vector3::repeat(0.125), 0.0)];
        c.friction = FrictionTable::uniform(0.0);
        c.h = 0.01;
        c.n_steps = 4;
        let world = c.world();
        let init = State::at_rest(vec![Pose::from_position(Vector3::new(0.0, 0.0, 0.125))]);
        let forces = vec![vec![Wrench::force(Vector3::x())]; 3];
        let traj = simulate_from(&world, &init, &forces).unwrap();
        for (k, expected) in [0.01, 0.02, 0.03].iter().enumerate() {
            assert_relative_eq!(traj.states[k + 1].twists[0].linear.x, *expected, epsilon = 1e-8);
        }
    }

    #[test]
    fn trajectory_json_roundtrip_preserves_values() {
        let mut c = ScenarioConfig::collide();
        c.n_steps = 5;
        let t = simulate(&c, 0, None).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        let back: Trajectory = serde_json::from_str(&s).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back.forces, t.forces);
        for (a, b) in back.states.iter().zip(&t.states) {
            assert_eq!(a.twists, b.twists);
            for (pa, pb) in a.poses.iter().zip(&b.poses) {
                assert!((pa.p - pb.p).norm() == 0.0);
                assert!((pa.q - pb.q).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn incline_starts_above_plane_aligned() {
        let c = ScenarioConfig::incline();
        let spec = sample_trajectory_spec(&c, 0);
        let pose = spec.init.poses[0];
        let n = c.plane().normal;
        let local_z = pose.rotation() * Vector3::z();
        assert_relative_eq!(local_z, n, epsilon = 1e-12);
        assert!(c.plane().signed_distance(&pose.p) > c.bodies[0].half_extents.z);
    }
}
