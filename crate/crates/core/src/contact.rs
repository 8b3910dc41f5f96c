//! Contact detection for box–plane and box–box pairs and assembly of the
//! contact and friction Jacobians of the velocity-level LCP.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{BodyParams, Pose, Twist};
use crate::error::{Error, Result};

/// Friction directions per contact: `+t1, -t1, +t2, -t2`.
pub const FRICTION_DIRS: usize = 4;

/// Identifies the second body of a contact; planes are static and belong to the world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BodyRef {
    Body(usize),
    World,
}

/// Static plane `{x : n·x = d}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneGeom {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl PlaneGeom {
    pub fn new(normal: Vector3<f64>, offset: f64) -> Self {
        let norm = normal.norm();
        PlaneGeom { normal: normal / norm, offset: offset / norm }
    }

    pub fn ground() -> Self {
        PlaneGeom { normal: Vector3::z(), offset: 0.0 }
    }

    /// Plane through the origin rising toward +x at angle `theta`; downhill is -x.
    pub fn incline(theta: f64) -> Self {
        PlaneGeom { normal: Vector3::new(-theta.sin(), 0.0, theta.cos()), offset: 0.0 }
    }

    pub fn inclination(&self) -> f64 {
        self.normal.z.clamp(-1.0, 1.0).acos()
    }

    pub fn signed_distance(&self, x: &Vector3<f64>) -> f64 {
        self.normal.dot(x) - self.offset
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactPoint {
    pub body_a: usize,
    pub body_b: BodyRef,
    /// World-frame contact location.
    pub point: Vector3<f64>,
    /// Unit normal pointing from `body_b` toward `body_a`.
    pub normal: Vector3<f64>,
    /// Overlap depth, zero when separated.
    pub penetration: f64,
    /// Gap width for contacts activated before touching, zero when overlapping.
    pub separation: f64,
    pub tangents: [Vector3<f64>; 2],
}

/// Orthonormal tangents for `n`: the first is the projection of the world
/// axis least aligned with `n`, the second completes a right-handed frame.
pub fn tangent_basis(n: &Vector3<f64>) -> [Vector3<f64>; 2] {
    let axes = [Vector3::x(), Vector3::y(), Vector3::z()];
    let mut best = 0;
    for k in 1..3 {
        if n.dot(&axes[k]).abs() < n.dot(&axes[best]).abs() - 1e-12 {
            best = k;
        }
    }
    let e = axes[best];
    let t1 = (e - n * n.dot(&e)).normalize();
    let t2 = n.cross(&t1);
    [t1, t2]
}

fn box_vertices(pose: &Pose, half: &Vector3<f64>) -> [Vector3<f64>; 8] {
    let r = pose.rotation();
    let mut out = [Vector3::zeros(); 8];
    for (i, v) in out.iter_mut().enumerate() {
        let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
        let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
        let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
        *v = pose.p + r * Vector3::new(sx * half.x, sy * half.y, sz * half.z);
    }
    out
}

/// One contact per box vertex whose signed distance to the plane is at most `tol`.
pub fn detect_box_plane(
    body: usize,
    pose: &Pose,
    params: &BodyParams,
    plane: &PlaneGeom,
    tol: f64,
) -> Vec<ContactPoint> {
    let tangents = tangent_basis(&plane.normal);
    box_vertices(pose, &params.half_extents)
        .iter()
        .filter_map(|v| {
            let sd = plane.signed_distance(v);
            (sd <= tol).then(|| ContactPoint {
                body_a: body,
                body_b: BodyRef::World,
                point: *v,
                normal: plane.normal,
                penetration: (-sd).max(0.0),
                separation: sd.max(0.0),
                tangents,
            })
        })
        .collect()
}

struct Obb {
    c: Vector3<f64>,
    r: Matrix3<f64>,
    h: Vector3<f64>,
}

impl Obb {
    fn axis(&self, i: usize) -> Vector3<f64> {
        self.r.column(i).into_owned()
    }

    fn radius(&self, l: &Vector3<f64>) -> f64 {
        (0..3).map(|i| self.h[i] * l.dot(&self.axis(i)).abs()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
enum SatAxis {
    FaceA(usize),
    FaceB(usize),
    Edge(usize, usize),
}

/// Separating-axis test over the 15 candidate axes followed by face clipping
/// (or an edge–edge closest-point contact). Normals point from `b` toward `a`.
pub fn detect_box_box(
    id_a: usize,
    pose_a: &Pose,
    params_a: &BodyParams,
    id_b: usize,
    pose_b: &Pose,
    params_b: &BodyParams,
    tol: f64,
) -> Result<Vec<ContactPoint>> {
    let a = Obb { c: pose_a.p, r: pose_a.rotation(), h: params_a.half_extents };
    let b = Obb { c: pose_b.p, r: pose_b.rotation(), h: params_b.half_extents };
    let d = b.c - a.c;
    if d.norm() < 1e-12 {
        return Err(Error::Geometry(format!("bodies {id_a} and {id_b} have coincident centers")));
    }

    let separation = |l: &Vector3<f64>| d.dot(l).abs() - a.radius(l) - b.radius(l);
    let mut face_a = (f64::NEG_INFINITY, 0);
    let mut face_b = (f64::NEG_INFINITY, 0);
    let mut edge = (f64::NEG_INFINITY, 0, 0);
    for i in 0..3 {
        let s = separation(&a.axis(i));
        if s > tol {
            return Ok(Vec::new());
        }
        if s > face_a.0 {
            face_a = (s, i);
        }
        let s = separation(&b.axis(i));
        if s > tol {
            return Ok(Vec::new());
        }
        if s > face_b.0 {
            face_b = (s, i);
        }
    }
    for i in 0..3 {
        for j in 0..3 {
            let l = a.axis(i).cross(&b.axis(j));
            let len = l.norm();
            if len < 1e-6 {
                continue;
            }
            let s = separation(&(l / len));
            if s > tol {
                return Ok(Vec::new());
            }
            if s > edge.0 {
                edge = (s, i, j);
            }
        }
    }

    let scale = a.h.min().min(b.h.min());
    let tie = 1e-9 * scale.max(1.0);
    // Tie-break on geometry rather than argument order so that swapping the
    // bodies yields the same manifold.
    let face = if face_a.0 > face_b.0 + tie {
        (face_a.0, SatAxis::FaceA(face_a.1))
    } else if face_b.0 > face_a.0 + tie {
        (face_b.0, SatAxis::FaceB(face_b.1))
    } else if lex_less(&a.c, &b.c) {
        (face_a.0, SatAxis::FaceA(face_a.1))
    } else {
        (face_b.0, SatAxis::FaceB(face_b.1))
    };
    let axis = if edge.0 > face.0 + 1e-3 * scale { SatAxis::Edge(edge.1, edge.2) } else { face.1 };

    let contacts = match axis {
        SatAxis::FaceA(i) => face_contacts(&a, &b, i, true, tol),
        SatAxis::FaceB(i) => face_contacts(&b, &a, i, false, tol),
        SatAxis::Edge(i, j) => edge_contact(&a, &b, i, j, tol).into_iter().collect(),
    };
    Ok(contacts
        .into_iter()
        .map(|(point, normal, depth)| ContactPoint {
            body_a: id_a,
            body_b: BodyRef::Body(id_b),
            point,
            normal,
            penetration: depth.max(0.0),
            separation: (-depth).max(0.0),
            tangents: tangent_basis(&normal),
        })
        .collect())
}

fn lex_less(a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
    for k in 0..3 {
        if a[k] != b[k] {
            return a[k] < b[k];
        }
    }
    false
}

/// Clips the incident face of `inc` against face `axis` of `reference`.
/// Returns `(point, normal from b to a, signed depth)`.
fn face_contacts(
    reference: &Obb,
    inc: &Obb,
    axis: usize,
    reference_is_a: bool,
    tol: f64,
) -> Vec<(Vector3<f64>, Vector3<f64>, f64)> {
    let mut n = reference.axis(axis);
    if n.dot(&(inc.c - reference.c)) < 0.0 {
        n = -n;
    }
    let face_offset = n.dot(&reference.c) + reference.h[axis];

    let mut m = 0;
    for k in 1..3 {
        if inc.axis(k).dot(&n).abs() > inc.axis(m).dot(&n).abs() {
            m = k;
        }
    }
    let s = -inc.axis(m).dot(&n).signum();
    let face_center = inc.c + inc.axis(m) * (s * inc.h[m]);
    let (u, v) = ((m + 1) % 3, (m + 2) % 3);
    let eu = inc.axis(u) * inc.h[u];
    let ev = inc.axis(v) * inc.h[v];
    let mut poly = vec![
        face_center + eu + ev,
        face_center - eu + ev,
        face_center - eu - ev,
        face_center + eu - ev,
    ];

    for k in 0..3 {
        if k == axis {
            continue;
        }
        let side = reference.axis(k);
        let lim = reference.h[k];
        for sign in [1.0, -1.0] {
            let dir = side * sign;
            let off = dir.dot(&reference.c) + lim;
            poly = clip_polygon(&poly, &dir, off);
            if poly.is_empty() {
                return Vec::new();
            }
        }
    }

    let normal = if reference_is_a { -n } else { n };
    let mut pts: Vec<_> = poly
        .into_iter()
        .filter_map(|p| {
            let sep = n.dot(&p) - face_offset;
            (sep <= tol).then(|| (p - n * (0.5 * sep), normal, -sep))
        })
        .collect();
    if pts.len() > 4 {
        pts = reduce_manifold(pts);
    }
    pts
}

/// Sutherland–Hodgman clip keeping `dir·x <= off`.
fn clip_polygon(poly: &[Vector3<f64>], dir: &Vector3<f64>, off: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        let dp = dir.dot(&p) - off;
        let dq = dir.dot(&q) - off;
        if dp <= 0.0 {
            out.push(p);
        }
        if (dp < 0.0 && dq > 0.0) || (dp > 0.0 && dq < 0.0) {
            let t = dp / (dp - dq);
            out.push(p + (q - p) * t);
        }
    }
    out
}

type ManifoldPoint = (Vector3<f64>, Vector3<f64>, f64);

fn reduce_manifold(pts: Vec<ManifoldPoint>) -> Vec<ManifoldPoint> {
    let deepest = (0..pts.len())
        .max_by(|&i, &j| pts[i].2.total_cmp(&pts[j].2))
        .unwrap();
    let far = (0..pts.len())
        .max_by(|&i, &j| {
            (pts[i].0 - pts[deepest].0).norm_squared().total_cmp(&(pts[j].0 - pts[deepest].0).norm_squared())
        })
        .unwrap();
    let n = pts[0].1;
    let area = |k: usize| (pts[far].0 - pts[deepest].0).cross(&(pts[k].0 - pts[deepest].0)).dot(&n);
    let third = (0..pts.len()).max_by(|&i, &j| area(i).total_cmp(&area(j))).unwrap();
    let fourth = (0..pts.len()).min_by(|&i, &j| area(i).total_cmp(&area(j))).unwrap();
    let mut keep = vec![deepest, far, third, fourth];
    keep.sort_unstable();
    keep.dedup();
    keep.into_iter().map(|k| pts[k]).collect()
}

fn edge_contact(a: &Obb, b: &Obb, i: usize, j: usize, tol: f64) -> Option<ManifoldPoint> {
    let d = b.c - a.c;
    let mut l = a.axis(i).cross(&b.axis(j)).normalize();
    if l.dot(&d) < 0.0 {
        l = -l;
    }
    let mut pa = a.c;
    for k in 0..3 {
        if k != i {
            pa += a.axis(k) * (a.h[k] * l.dot(&a.axis(k)).signum());
        }
    }
    let mut pb = b.c;
    for k in 0..3 {
        if k != j {
            pb -= b.axis(k) * (b.h[k] * l.dot(&b.axis(k)).signum());
        }
    }
    let (ua, ub) = (a.axis(i), b.axis(j));
    let r = pa - pb;
    let c = ua.dot(&ub);
    let denom = 1.0 - c * c;
    if denom < 1e-12 {
        return None;
    }
    let (e, f) = (ua.dot(&r), ub.dot(&r));
    let s = ((c * f - e) / denom).clamp(-a.h[i], a.h[i]);
    let t = (f + c * s).clamp(-b.h[j], b.h[j]);
    let qa = pa + ua * s;
    let qb = pb + ub * t;
    let sep = (qb - qa).dot(&l);
    (sep <= tol).then(|| ((qa + qb) * 0.5, -l, -sep))
}

/// Friction coefficients per body pair with a shared default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrictionTable {
    pub default: f64,
    #[serde(default)]
    pub pairs: Vec<FrictionPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrictionPair {
    pub a: BodyRef,
    pub b: BodyRef,
    pub mu: f64,
}

impl FrictionTable {
    pub fn uniform(mu: f64) -> Self {
        FrictionTable { default: mu, pairs: Vec::new() }
    }

    /// Index into [`FrictionTable::values`]: 0 is the default, `k + 1` is `pairs[k]`.
    pub fn index_of(&self, a: BodyRef, b: BodyRef) -> usize {
        self.pairs
            .iter()
            .position(|p| (p.a == a && p.b == b) || (p.a == b && p.b == a))
            .map_or(0, |k| k + 1)
    }

    pub fn values(&self) -> Vec<f64> {
        std::iter::once(self.default).chain(self.pairs.iter().map(|p| p.mu)).collect()
    }

    pub fn with_values(&self, values: &[f64]) -> Self {
        let mut out = self.clone();
        out.default = values[0];
        for (p, v) in out.pairs.iter_mut().zip(&values[1..]) {
            p.mu = *v;
        }
        out
    }

    pub fn len(&self) -> usize {
        self.pairs.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactSettings {
    /// Contact activation distance, meters.
    pub activation_tol: f64,
    /// Fraction of penetration removed per step.
    pub baumgarte: f64,
    /// Widen detection by the distance bodies can close within one step and
    /// let the constraint close existing gaps exactly.
    pub speculative: bool,
}

impl Default for ContactSettings {
    fn default() -> Self {
        ContactSettings { activation_tol: 1e-3, baumgarte: 0.2, speculative: true }
    }
}

/// Jacobians and offsets of the contact and friction constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub n_bodies: usize,
    pub j_e: DMatrix<f64>,
    pub j_c: DMatrix<f64>,
    pub j_f: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub c: DVector<f64>,
    /// Restitution per contact, for `∂c/∂ξ_t = diag(k) J_c`.
    pub restitution: DVector<f64>,
    /// Friction-table entry of each contact.
    pub friction_index: Vec<usize>,
    /// `∂c/∂d` for the signed distance `d` of each contact.
    pub gap_rate: DVector<f64>,
}

impl ConstraintSet {
    pub fn unconstrained(n_bodies: usize) -> Self {
        let n = 6 * n_bodies;
        ConstraintSet {
            n_bodies,
            j_e: DMatrix::zeros(0, n),
            j_c: DMatrix::zeros(0, n),
            j_f: DMatrix::zeros(0, n),
            e: DMatrix::zeros(0, 0),
            mu: DVector::zeros(0),
            c: DVector::zeros(0),
            restitution: DVector::zeros(0),
            friction_index: Vec::new(),
            gap_rate: DVector::zeros(0),
        }
    }

    pub fn n_contacts(&self) -> usize {
        self.j_c.nrows()
    }
}

fn write_row(
    j: &mut DMatrix<f64>,
    row: usize,
    contact: &ContactPoint,
    dir: &Vector3<f64>,
    poses: &[Pose],
) {
    let ra = contact.point - poses[contact.body_a].p;
    let col = 6 * contact.body_a;
    let ang = ra.cross(dir);
    for k in 0..3 {
        j[(row, col + k)] += ang[k];
        j[(row, col + 3 + k)] += dir[k];
    }
    if let BodyRef::Body(b) = contact.body_b {
        let rb = contact.point - poses[b].p;
        let col = 6 * b;
        let ang = rb.cross(dir);
        for k in 0..3 {
            j[(row, col + k)] -= ang[k];
            j[(row, col + 3 + k)] -= dir[k];
        }
    }
}

/// Assembles `J_c`, `J_f`, `E`, per-contact friction and the offsets
/// `c = k·J_c ξ_t + bias`, where the bias pushes penetrations out at rate
/// `β·penetration/h` and, for speculative contacts, lets gaps close in one step.
pub fn build_constraints(
    contacts: &[ContactPoint],
    poses: &[Pose],
    twists: &[Twist],
    params: &[BodyParams],
    friction: &FrictionTable,
    h: f64,
    settings: &ContactSettings,
) -> ConstraintSet {
    let nb = poses.len();
    let nc = contacts.len();
    let n = 6 * nb;
    let mut j_c = DMatrix::zeros(nc, n);
    let mut j_f = DMatrix::zeros(FRICTION_DIRS * nc, n);
    let mut e = DMatrix::zeros(FRICTION_DIRS * nc, nc);
    let mut mu = DVector::zeros(nc);
    let mut c = DVector::zeros(nc);
    let mut restitution = DVector::zeros(nc);
    let mut friction_index = Vec::with_capacity(nc);
    let mut gap_rate = DVector::zeros(nc);
    let xi = DVector::from_iterator(n, twists.iter().flat_map(|t| t.to_vector().into_iter().copied().collect::<Vec<_>>()));

    let values = friction.values();
    for (i, contact) in contacts.iter().enumerate() {
        write_row(&mut j_c, i, contact, &contact.normal, poses);
        let [t1, t2] = contact.tangents;
        for (k, dir) in [t1, -t1, t2, -t2].iter().enumerate() {
            write_row(&mut j_f, FRICTION_DIRS * i + k, contact, dir, poses);
            e[(FRICTION_DIRS * i + k, i)] = 1.0;
        }
        let idx = friction.index_of(BodyRef::Body(contact.body_a), contact.body_b);
        friction_index.push(idx);
        mu[i] = values[idx];
        let k = match contact.body_b {
            BodyRef::Body(b) => params[contact.body_a].restitution.max(params[b].restitution),
            BodyRef::World => params[contact.body_a].restitution,
        };
        restitution[i] = k;
        let vn = j_c.row(i).dot(&xi.transpose());
        let (bias, rate) = if contact.penetration > 0.0 {
            (-settings.baumgarte * contact.penetration / h, settings.baumgarte / h)
        } else if settings.speculative {
            (contact.separation / h, 1.0 / h)
        } else {
            (0.0, 0.0)
        };
        gap_rate[i] = rate;
        c[i] = k * vn + bias;
    }

    ConstraintSet {
        n_bodies: nb,
        j_e: DMatrix::zeros(0, n),
        j_c,
        j_f,
        e,
        mu,
        c,
        restitution,
        friction_index,
        gap_rate,
    }
}
