//! Differentiable top-down sprite compositing with Gaussian blur.
//!
//! Image coordinates: `u` grows with world x, `v` grows with world −y, pixel
//! `(row i, col j)` has its center at `(u, v) = (j + 0.5, i + 0.5)`.

use std::path::Path;

use nalgebra::{DMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{yaw_grad, Pose, PoseGrad};
use crate::error::{Error, Result};

/// Orthographic top-down camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub meters_per_pixel: f64,
    /// World point imaged at the image center.
    pub center: [f64; 2],
}

impl Default for Camera {
    fn default() -> Self {
        Camera { width: 128, height: 128, meters_per_pixel: 2.0 / 128.0, center: [0.0, 0.0] }
    }
}

impl Camera {
    pub fn world_to_image(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.width as f64 / 2.0 + (x - self.center[0]) / self.meters_per_pixel,
            self.height as f64 / 2.0 - (y - self.center[1]) / self.meters_per_pixel,
        )
    }

    pub fn image_to_world(&self, u: f64, v: f64) -> (f64, f64) {
        (
            self.center[0] + (u - self.width as f64 / 2.0) * self.meters_per_pixel,
            self.center[1] - (v - self.height as f64 / 2.0) * self.meters_per_pixel,
        )
    }
}

/// RGB image with values in `[0, 1]`, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Frame { width, height, data }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Frame { width, height, data: vec![0.0; width * height * 3] }
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        (i * self.width + j) * 3
    }

    pub fn pixel(&self, i: usize, j: usize) -> [f64; 3] {
        let k = self.idx(i, j);
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn abs_diff(&self, other: &Frame) -> Frame {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).collect();
        Frame { width: self.width, height: self.height, data }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Mean absolute difference over all pixels and channels.
    pub fn mean_abs_error(&self, other: &Frame) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len() as f64
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |j, i| {
            let p = self.pixel(i as usize, j as usize);
            image::Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let mut data = Vec::with_capacity((w * h * 3) as usize);
        for px in img.pixels() {
            data.extend(px.0.iter().map(|v| *v as f64 / 255.0));
        }
        Frame { width: w as usize, height: h as usize, data }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Frame::from_rgb8(&img))
    }
}

/// Premultiplied RGBA patch with a physical footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct Sprite {
    pub width: usize,
    pub height: usize,
    /// `[r·a, g·a, b·a, a]` per texel, row-major.
    pub rgba: Vec<[f64; 4]>,
    /// Extent along the body's local x and y axes, meters.
    pub size: [f64; 2],
}

impl Sprite {
    /// Opaque rectangle in `rgb` with a darker stripe on the local +x side so
    /// that yaw is visible.
    pub fn striped_block(px: usize, size: f64, rgb: [u8; 3]) -> Self {
        let stripe = (px / 4).max(1);
        let mut rgba = Vec::with_capacity(px * px);
        for _i in 0..px {
            for j in 0..px {
                let c = if j >= px - stripe { rgb.map(|v| v / 2) } else { rgb };
                rgba.push([c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0, 1.0]);
            }
        }
        Sprite { width: px, height: px, rgba, size: [size, size] }
    }

    /// Sprite with a disc-shaped alpha mask of uniform color.
    pub fn disc(px: usize, size: f64, rgb: [f64; 3]) -> Self {
        let mut rgba = Vec::with_capacity(px * px);
        let c = px as f64 / 2.0;
        for i in 0..px {
            for j in 0..px {
                let d = ((i as f64 + 0.5 - c).powi(2) + (j as f64 + 0.5 - c).powi(2)).sqrt();
                let a = (c - d).clamp(0.0, 1.0);
                rgba.push([rgb[0] * a, rgb[1] * a, rgb[2] * a, a]);
            }
        }
        Sprite { width: px, height: px, rgba, size: [size, size] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rgba.len() != self.width * self.height {
            return Err(Error::RenderMismatch("sprite texel count does not match its dimensions".into()));
        }
        if !(self.size[0] > 0.0 && self.size[1] > 0.0) {
            return Err(Error::RenderMismatch("sprite size must be positive".into()));
        }
        if self.rgba.iter().any(|t| !(0.0..=1.0).contains(&t[3])) {
            return Err(Error::RenderMismatch("sprite alpha outside [0, 1]".into()));
        }
        Ok(())
    }

    fn texel(&self, a: isize, b: isize) -> [f64; 4] {
        if a < 0 || b < 0 || a >= self.width as isize || b >= self.height as isize {
            [0.0; 4]
        } else {
            self.rgba[b as usize * self.width + a as usize]
        }
    }

    /// Bilinear sample at sprite coordinates `(su, sv)` (texel centers at
    /// half-integers) with its derivatives along `su` and `sv`.
    fn sample(&self, su: f64, sv: f64) -> ([f64; 4], [f64; 4], [f64; 4]) {
        let fx = su - 0.5;
        let fy = sv - 0.5;
        let a0 = fx.floor();
        let b0 = fy.floor();
        let tx = fx - a0;
        let ty = fy - b0;
        let (a0, b0) = (a0 as isize, b0 as isize);
        let t00 = self.texel(a0, b0);
        let t10 = self.texel(a0 + 1, b0);
        let t01 = self.texel(a0, b0 + 1);
        let t11 = self.texel(a0 + 1, b0 + 1);
        let mut v = [0.0; 4];
        let mut du = [0.0; 4];
        let mut dv = [0.0; 4];
        for c in 0..4 {
            v[c] = (1.0 - ty) * ((1.0 - tx) * t00[c] + tx * t10[c]) + ty * ((1.0 - tx) * t01[c] + tx * t11[c]);
            du[c] = (1.0 - ty) * (t10[c] - t00[c]) + ty * (t11[c] - t01[c]);
            dv[c] = (1.0 - tx) * (t01[c] - t00[c]) + tx * (t11[c] - t10[c]);
        }
        (v, du, dv)
    }

    pub fn texel_size(&self) -> [f64; 2] {
        [self.size[0] / self.width as f64, self.size[1] / self.height as f64]
    }

    /// Stores straight (non-premultiplied) RGBA.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbaImage::from_fn(self.width as u32, self.height as u32, |j, i| {
            let t = self.rgba[i as usize * self.width + j as usize];
            let a = t[3];
            let un = |v: f64| if a > 0.0 { (v / a).clamp(0.0, 1.0) } else { 0.0 };
            image::Rgba([un(t[0]), un(t[1]), un(t[2]), a].map(|v| (v * 255.0).round() as u8))
        });
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path, size: [f64; 2]) -> Result<Self> {
        let img = image::open(path)?.to_rgba8();
        let (w, h) = img.dimensions();
        let rgba = img
            .pixels()
            .map(|p| {
                let a = p.0[3] as f64 / 255.0;
                [p.0[0] as f64 / 255.0 * a, p.0[1] as f64 / 255.0 * a, p.0[2] as f64 / 255.0 * a, a]
            })
            .collect();
        let s = Sprite { width: w as usize, height: h as usize, rgba, size };
        s.validate()?;
        Ok(s)
    }
}

/// In-plane pose used for rendering: position and yaw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl From<&Pose> for PlanarPose {
    fn from(p: &Pose) -> Self {
        PlanarPose { x: p.p.x, y: p.p.y, yaw: p.yaw() }
    }
}

/// Cotangent of a [`PlanarPose`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlanarGrad {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl PlanarGrad {
    /// Pulls back to the full pose (the render ignores height, roll and pitch).
    pub fn to_pose_grad(&self, pose: &Pose) -> PoseGrad {
        PoseGrad { q: yaw_grad(&pose.q) * self.yaw, p: Vector3::new(self.x, self.y, 0.0) }
    }
}

/// Pixel-space rectangle `rows × cols`, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl Region {
    pub fn is_empty(&self) -> bool {
        self.r0 >= self.r1 || self.c0 >= self.c1
    }

    pub fn union(&self, o: &Region) -> Region {
        if self.is_empty() {
            return *o;
        }
        if o.is_empty() {
            return *self;
        }
        Region { r0: self.r0.min(o.r0), r1: self.r1.max(o.r1), c0: self.c0.min(o.c0), c1: self.c1.max(o.c1) }
    }
}

fn footprint(camera: &Camera, sprite: &Sprite, pose: &PlanarPose) -> Region {
    let (c, s) = (pose.yaw.cos(), pose.yaw.sin());
    let hx = sprite.size[0] / 2.0;
    let hy = sprite.size[1] / 2.0;
    let mut umin = f64::INFINITY;
    let mut umax = f64::NEG_INFINITY;
    let mut vmin = f64::INFINITY;
    let mut vmax = f64::NEG_INFINITY;
    for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        let x = pose.x + c * sx * hx - s * sy * hy;
        let y = pose.y + s * sx * hx + c * sy * hy;
        let (u, v) = camera.world_to_image(x, y);
        umin = umin.min(u);
        umax = umax.max(u);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    let clip = |lo: f64, hi: f64, n: usize| {
        let a = (lo - 1.0).floor().max(0.0);
        let b = (hi + 1.0).ceil().min(n as f64);
        if b <= a {
            (0, 0)
        } else {
            (a as usize, b as usize)
        }
    };
    let (c0, c1) = clip(umin, umax, camera.width);
    let (r0, r1) = clip(vmin, vmax, camera.height);
    Region { r0, r1, c0, c1 }
}

struct Warp {
    cos: f64,
    sin: f64,
    inv_texel: [f64; 2],
    half: [f64; 2],
}

impl Warp {
    fn new(sprite: &Sprite, pose: &PlanarPose) -> Self {
        let ts = sprite.texel_size();
        Warp {
            cos: pose.yaw.cos(),
            sin: pose.yaw.sin(),
            inv_texel: [1.0 / ts[0], 1.0 / ts[1]],
            half: [sprite.width as f64 / 2.0, sprite.height as f64 / 2.0],
        }
    }

    /// Local body-frame coordinates and sprite coordinates of a world point.
    fn map(&self, pose: &PlanarPose, x: f64, y: f64) -> (Vector2<f64>, f64, f64) {
        let dx = x - pose.x;
        let dy = y - pose.y;
        let lx = self.cos * dx + self.sin * dy;
        let ly = -self.sin * dx + self.cos * dy;
        (Vector2::new(lx, ly), lx * self.inv_texel[0] + self.half[0], -ly * self.inv_texel[1] + self.half[1])
    }
}

fn check_inputs(poses: &[PlanarPose], sprites: &[Sprite], background: &Frame, camera: &Camera) -> Result<()> {
    if poses.len() != sprites.len() {
        return Err(Error::RenderMismatch(format!("{} poses for {} sprites", poses.len(), sprites.len())));
    }
    if background.width != camera.width || background.height != camera.height {
        return Err(Error::RenderMismatch(format!(
            "background is {}x{}, camera expects {}x{}",
            background.width, background.height, camera.width, camera.height
        )));
    }
    Ok(())
}

fn composite_layer(out: &mut Frame, camera: &Camera, sprite: &Sprite, pose: &PlanarPose) -> Region {
    let region = footprint(camera, sprite, pose);
    let warp = Warp::new(sprite, pose);
    for i in region.r0..region.r1 {
        for j in region.c0..region.c1 {
            let (x, y) = camera.image_to_world(j as f64 + 0.5, i as f64 + 0.5);
            let (_, su, sv) = warp.map(pose, x, y);
            let (t, _, _) = sprite.sample(su, sv);
            if t[3] == 0.0 && t[0] == 0.0 && t[1] == 0.0 && t[2] == 0.0 {
                continue;
            }
            let k = out.idx(i, j);
            for c in 0..3 {
                out.data[k + c] = t[c] + (1.0 - t[3]) * out.data[k + c];
            }
        }
    }
    region
}

/// Alpha-over composite of the sprites, in index order, onto the background.
pub fn render(poses: &[PlanarPose], sprites: &[Sprite], background: &Frame, camera: &Camera) -> Result<Frame> {
    check_inputs(poses, sprites, background, camera)?;
    let mut out = background.clone();
    for (pose, sprite) in poses.iter().zip(sprites) {
        composite_layer(&mut out, camera, sprite, pose);
    }
    Ok(out)
}

pub fn render_poses(poses: &[Pose], sprites: &[Sprite], background: &Frame, camera: &Camera) -> Result<Frame> {
    let planar: Vec<PlanarPose> = poses.iter().map(PlanarPose::from).collect();
    render(&planar, sprites, background, camera)
}

/// Retains the intermediate composites of a render for the backward pass.
pub struct RenderPullback {
    camera: Camera,
    poses: Vec<PlanarPose>,
    sprites: Vec<Sprite>,
    /// `below[k]` is the composite before sprite `k` was drawn.
    below: Vec<Frame>,
    regions: Vec<Region>,
}

impl RenderPullback {
    /// Union of the pixel footprints of all objects.
    pub fn support(&self) -> Region {
        self.regions.iter().fold(Region { r0: 0, r1: 0, c0: 0, c1: 0 }, |a, r| a.union(r))
    }

    /// `∂L/∂(x, y, yaw)` per object given `∂L/∂pixels`.
    pub fn backward(&self, g: &Frame) -> Vec<PlanarGrad> {
        let n = self.poses.len();
        let mut out = vec![PlanarGrad::default(); n];
        let cam = &self.camera;
        // Cotangent of the composite after each layer, restricted to later
        // layers' attenuation.
        let mut g_cur = g.clone();
        for k in (0..n).rev() {
            let pose = &self.poses[k];
            let sprite = &self.sprites[k];
            let warp = Warp::new(sprite, pose);
            let region = self.regions[k];
            let below = &self.below[k];
            let mut acc = PlanarGrad::default();
            for i in region.r0..region.r1 {
                for j in region.c0..region.c1 {
                    let (x, y) = cam.image_to_world(j as f64 + 0.5, i as f64 + 0.5);
                    let (local, su, sv) = warp.map(pose, x, y);
                    let (t, du, dv) = sprite.sample(su, sv);
                    let idx = g_cur.idx(i, j);
                    let gp = [g_cur.data[idx], g_cur.data[idx + 1], g_cur.data[idx + 2]];
                    let b = [below.data[idx], below.data[idx + 1], below.data[idx + 2]];
                    // d out_c = d t_c − d t_a · below_c
                    let mut g_su = 0.0;
                    let mut g_sv = 0.0;
                    for c in 0..3 {
                        g_su += gp[c] * (du[c] - du[3] * b[c]);
                        g_sv += gp[c] * (dv[c] - dv[3] * b[c]);
                    }
                    if g_su != 0.0 || g_sv != 0.0 {
                        // su = lx/ts + cw, sv = −ly/ts + ch; lx, ly from R(−yaw)(w − p).
                        let g_lx = g_su * warp.inv_texel[0];
                        let g_ly = -g_sv * warp.inv_texel[1];
                        acc.x += g_lx * (-warp.cos) + g_ly * warp.sin;
                        acc.y += g_lx * (-warp.sin) + g_ly * (-warp.cos);
                        acc.yaw += g_lx * local.y - g_ly * local.x;
                    }
                    for c in 0..3 {
                        g_cur.data[idx + c] *= 1.0 - t[3];
                    }
                }
            }
            out[k] = acc;
        }
        out
    }
}

pub fn render_with_pose_gradients(
    poses: &[PlanarPose],
    sprites: &[Sprite],
    background: &Frame,
    camera: &Camera,
) -> Result<(Frame, RenderPullback)> {
    check_inputs(poses, sprites, background, camera)?;
    let mut out = background.clone();
    let mut below = Vec::with_capacity(poses.len());
    let mut regions = Vec::with_capacity(poses.len());
    for (pose, sprite) in poses.iter().zip(sprites) {
        below.push(out.clone());
        regions.push(composite_layer(&mut out, camera, sprite, pose));
    }
    let pb = RenderPullback { camera: *camera, poses: poses.to_vec(), sprites: sprites.to_vec(), below, regions };
    Ok((out, pb))
}

/// Normalized 1-D Gaussian of odd length.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    assert!(size % 2 == 1, "kernel size must be odd");
    let r = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|k| (-(k as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Rounds an even kernel size up to the next odd one.
pub fn odd_kernel_size(size: usize) -> usize {
    if size % 2 == 0 {
        size + 1
    } else {
        size.max(1)
    }
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(frame: &Frame, kernel_size: usize, sigma: f64) -> Frame {
    let k = gaussian_kernel(kernel_size, sigma);
    let r = (kernel_size / 2) as isize;
    let (w, h) = (frame.width, frame.height);
    let mut tmp = Frame::zeros(w, h);
    for i in 0..h {
        for j in 0..w {
            let mut acc = [0.0; 3];
            for (t, kv) in k.iter().enumerate() {
                let jj = reflect(j as isize + t as isize - r, w);
                let idx = frame.idx(i, jj);
                for c in 0..3 {
                    acc[c] += kv * frame.data[idx + c];
                }
            }
            let idx = tmp.idx(i, j);
            tmp.data[idx..idx + 3].copy_from_slice(&acc);
        }
    }
    let mut out = Frame::zeros(w, h);
    for i in 0..h {
        for j in 0..w {
            let mut acc = [0.0; 3];
            for (t, kv) in k.iter().enumerate() {
                let ii = reflect(i as isize + t as isize - r, h);
                let idx = tmp.idx(ii, j);
                for c in 0..3 {
                    acc[c] += kv * tmp.data[idx + c];
                }
            }
            let idx = out.idx(i, j);
            out.data[idx..idx + 3].copy_from_slice(&acc);
        }
    }
    out
}

/// Dense matrix `B` with `(B x)_i = Σ_t k_t x_{reflect(i + t − r)}`.
pub fn blur_matrix(n: usize, kernel_size: usize, sigma: f64) -> DMatrix<f64> {
    let k = gaussian_kernel(kernel_size, sigma);
    let r = (kernel_size / 2) as isize;
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for (t, kv) in k.iter().enumerate() {
            m[(i, reflect(i as isize + t as isize - r, n))] += kv;
        }
    }
    m
}

/// A blur in matrix form, `B_h · I_c · B_wᵀ` per channel, for evaluating
/// blurred squared differences restricted to where two images differ.
pub struct BlurOperator {
    pub kernel_size: usize,
    pub sigma: f64,
    bh: DMatrix<f64>,
    bw: DMatrix<f64>,
}

impl BlurOperator {
    /// `kernel_size <= 1` gives the identity.
    pub fn new(width: usize, height: usize, kernel_size: usize, sigma: f64) -> Self {
        if kernel_size <= 1 || sigma <= 0.0 {
            return BlurOperator { kernel_size: 1, sigma: 0.0, bh: DMatrix::identity(height, height), bw: DMatrix::identity(width, width) };
        }
        BlurOperator {
            kernel_size,
            sigma,
            bh: blur_matrix(height, kernel_size, sigma),
            bw: blur_matrix(width, kernel_size, sigma),
        }
    }

    pub fn apply(&self, f: &Frame) -> Frame {
        let full = Region { r0: 0, r1: f.height, c0: 0, c1: f.width };
        let mut out = Frame::zeros(f.width, f.height);
        for c in 0..3 {
            let y = self.bh.clone() * channel(f, c, &full) * self.bw.transpose();
            put_channel(&mut out, c, &full, &y);
        }
        out
    }

    /// `Σ ‖B(a − b)‖²` and its gradient with respect to `b`, evaluated only
    /// over the rectangle where `a` and `b` differ.
    pub fn sq_diff_and_grad(&self, a: &Frame, b: &Frame) -> (f64, Frame) {
        let mut grad = Frame::zeros(b.width, b.height);
        let Some(region) = diff_support(a, b) else {
            return (0.0, grad);
        };
        let rows = region.r0..region.r1;
        let cols = region.c0..region.c1;
        let out_rows = support_range(&self.bh, rows.clone());
        let out_cols = support_range(&self.bw, cols.clone());
        let bh = self.bh.view((out_rows.start, rows.start), (out_rows.len(), rows.len()));
        let bw = self.bw.view((out_cols.start, cols.start), (out_cols.len(), cols.len()));
        let mut loss = 0.0;
        for c in 0..3 {
            let mut d = DMatrix::zeros(rows.len(), cols.len());
            for (ri, i) in rows.clone().enumerate() {
                for (ci, j) in cols.clone().enumerate() {
                    let k = a.idx(i, j) + c;
                    d[(ri, ci)] = a.data[k] - b.data[k];
                }
            }
            let y = &bh * d * bw.transpose();
            loss += y.norm_squared();
            let g = (bh.transpose() * y * &bw) * -2.0;
            put_channel(&mut grad, c, &region, &g);
        }
        (loss, grad)
    }
}

fn channel(f: &Frame, c: usize, r: &Region) -> DMatrix<f64> {
    DMatrix::from_fn(r.r1 - r.r0, r.c1 - r.c0, |i, j| f.data[f.idx(r.r0 + i, r.c0 + j) + c])
}

fn put_channel(f: &mut Frame, c: usize, r: &Region, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let k = f.idx(r.r0 + i, r.c0 + j) + c;
            f.data[k] = m[(i, j)];
        }
    }
}

fn support_range(b: &DMatrix<f64>, cols: std::ops::Range<usize>) -> std::ops::Range<usize> {
    let mut lo = b.nrows();
    let mut hi = 0;
    for j in cols {
        for i in 0..b.nrows() {
            if b[(i, j)] != 0.0 {
                lo = lo.min(i);
                hi = hi.max(i + 1);
            }
        }
    }
    if hi <= lo {
        0..0
    } else {
        lo..hi
    }
}

fn diff_support(a: &Frame, b: &Frame) -> Option<Region> {
    let mut r = Region { r0: a.height, r1: 0, c0: a.width, c1: 0 };
    for i in 0..a.height {
        for j in 0..a.width {
            let k = a.idx(i, j);
            if a.data[k] != b.data[k] || a.data[k + 1] != b.data[k + 1] || a.data[k + 2] != b.data[k + 2] {
                r.r0 = r.r0.min(i);
                r.r1 = r.r1.max(i + 1);
                r.c0 = r.c0.min(j);
                r.c1 = r.c1.max(j + 1);
            }
        }
    }
    (!r.is_empty()).then_some(r)
}

/// Linear anneal of kernel size and sigma over the epoch budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurSchedule {
    pub start_kernel: usize,
    pub start_sigma: f64,
    pub end_kernel: usize,
    pub end_sigma: f64,
}

impl Default for BlurSchedule {
    fn default() -> Self {
        BlurSchedule { start_kernel: 128, start_sigma: 128.0, end_kernel: 5, end_sigma: 2.0 }
    }
}

impl BlurSchedule {
    pub fn none() -> Self {
        BlurSchedule { start_kernel: 1, start_sigma: 0.0, end_kernel: 1, end_sigma: 0.0 }
    }

    pub fn constant(kernel: usize, sigma: f64) -> Self {
        BlurSchedule { start_kernel: kernel, start_sigma: sigma, end_kernel: kernel, end_sigma: sigma }
    }

    /// Odd kernel size and sigma at `epoch` of `epochs`.
    pub fn at(&self, epoch: usize, epochs: usize) -> (usize, f64) {
        let t = if epochs <= 1 { 1.0 } else { epoch as f64 / (epochs - 1) as f64 };
        let k = self.start_kernel as f64 + (self.end_kernel as f64 - self.start_kernel as f64) * t;
        let s = self.start_sigma + (self.end_sigma - self.start_sigma) * t;
        (odd_kernel_size(k.round() as usize), s)
    }
}

/// Frames of every `stride`-th state, starting with state 0.
pub fn render_video(
    poses: &[Vec<Pose>],
    sprites: &[Sprite],
    background: &Frame,
    camera: &Camera,
    stride: usize,
) -> Result<Vec<Frame>> {
    let stride = stride.max(1);
    poses.iter().step_by(stride).map(|p| render_poses(p, sprites, background, camera)).collect()
}

pub fn difference_images(a: &[Frame], b: &[Frame]) -> Result<Vec<Frame>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x.abs_diff(y)).collect())
}

/// Recovers a sprite by sampling `frame` over the footprint of an object at
/// `pose`, with alpha taken from `mask` (row-major, sprite resolution).
pub fn extract_sprite(
    frame: &Frame,
    camera: &Camera,
    pose: &PlanarPose,
    mask: &[f64],
    width: usize,
    height: usize,
    size: [f64; 2],
) -> Result<Sprite> {
    if mask.len() != width * height {
        return Err(Error::RenderMismatch("mask size does not match sprite dimensions".into()));
    }
    let ts = [size[0] / width as f64, size[1] / height as f64];
    let (c, s) = (pose.yaw.cos(), pose.yaw.sin());
    let mut rgba = Vec::with_capacity(width * height);
    for b in 0..height {
        for a in 0..width {
            let lx = (a as f64 + 0.5 - width as f64 / 2.0) * ts[0];
            let ly = -(b as f64 + 0.5 - height as f64 / 2.0) * ts[1];
            let x = pose.x + c * lx - s * ly;
            let y = pose.y + s * lx + c * ly;
            let (u, v) = camera.world_to_image(x, y);
            let rgb = sample_frame(frame, u, v);
            let alpha = mask[b * width + a];
            rgba.push([rgb[0] * alpha, rgb[1] * alpha, rgb[2] * alpha, alpha]);
        }
    }
    Ok(Sprite { width, height, rgba, size })
}

fn sample_frame(f: &Frame, u: f64, v: f64) -> [f64; 3] {
    let fx = u - 0.5;
    let fy = v - 0.5;
    let j0 = fx.floor();
    let i0 = fy.floor();
    let tx = fx - j0;
    let ty = fy - i0;
    let get = |i: f64, j: f64| {
        let ii = (i.max(0.0) as usize).min(f.height - 1);
        let jj = (j.max(0.0) as usize).min(f.width - 1);
        f.pixel(ii, jj)
    };
    let (p00, p10, p01, p11) = (get(i0, j0), get(i0, j0 + 1.0), get(i0 + 1.0, j0), get(i0 + 1.0, j0 + 1.0));
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = (1.0 - ty) * ((1.0 - tx) * p00[c] + tx * p10[c]) + ty * ((1.0 - tx) * p01[c] + tx * p11[c]);
    }
    out
}

/// Asset sidecar: camera, sprite files with physical sizes, background color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderAssets {
    pub camera: Camera,
    pub background: [f64; 3],
    pub sprites: Vec<SpriteAsset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteAsset {
    pub file: String,
    pub size: [f64; 2],
}

impl RenderAssets {
    pub fn background_frame(&self) -> Frame {
        Frame::filled(self.camera.width, self.camera.height, self.background)
    }

    /// Writes sprite PNGs and `assets.json` into `dir`.
    pub fn save(&self, dir: &Path, sprites: &[Sprite]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (a, s) in self.sprites.iter().zip(sprites) {
            s.save_png(&dir.join(&a.file))?;
        }
        let path = dir.join("assets.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, Vec<Sprite>)> {
        let path = dir.join("assets.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let assets: RenderAssets = serde_json::from_str(&text)?;
        let sprites = assets
            .sprites
            .iter()
            .map(|a| Sprite::load_png(&dir.join(&a.file), a.size))
            .collect::<Result<Vec<_>>>()?;
        Ok((assets, sprites))
    }
}

/// Sprites for `n` scenario blocks of edge `size`, one texel per camera pixel.
pub fn scenario_assets(n: usize, size: f64, camera: &Camera) -> (RenderAssets, Vec<Sprite>) {
    const COLORS: [[u8; 3]; 3] = [[204, 51, 51], [51, 102, 204], [51, 153, 51]];
    let px = (size / camera.meters_per_pixel).round().max(1.0) as usize;
    let sprites: Vec<Sprite> = (0..n).map(|i| Sprite::striped_block(px, size, COLORS[i % COLORS.len()])).collect();
    let assets = RenderAssets {
        camera: *camera,
        background: [230.0 / 255.0; 3],
        sprites: (0..n).map(|i| SpriteAsset { file: format!("sprite_{i}.png"), size: [size, size] }).collect(),
    };
    (assets, sprites)
}
