//! Differentiable software rasterizer for Gaussian splats.
//!
//! Forward: EWA projection of each splat to a 2D Gaussian, tile-based (16x16)
//! front-to-back alpha compositing over a black background. Backward: exact
//! chain rule from a pixel cotangent to every splat parameter (position,
//! rotation, log-scale, opacity logit, color), recomputing the forward pass
//! per tile instead of storing per-pixel splat lists.
//!
//! Output is bit-identical for any worker count: tiles are independent and
//! the cross-tile gradient reduction runs in fixed tile order.

use crate::image_buf::Image;
use crate::scene::{Camera, GaussianScene, Splat, PARAMS_PER_SPLAT};
use nalgebra::{Matrix2, Matrix3, Matrix2x3, Vector2, Vector3};
use rayon::prelude::*;

pub const TILE_SIZE: usize = 16;
const BLUR: f64 = 0.3;
const NEAR_PLANE: f64 = 0.01;
const ALPHA_CLAMP: f64 = 0.99;
const ALPHA_SKIP: f64 = 1.0 / 255.0;

#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub pixels: Image,
    /// 1 - transmittance per pixel.
    pub alpha: Vec<f64>,
}

/// Per-splat partials of a scalar loss, laid out exactly like
/// `GaussianScene::flatten`.
#[derive(Debug, Clone)]
pub struct SplatGradients {
    pub data: Vec<f64>,
}

impl SplatGradients {
    pub fn zeros(n_splats: usize) -> Self {
        SplatGradients {
            data: vec![0.0; n_splats * PARAMS_PER_SPLAT],
        }
    }

    pub fn n_splats(&self) -> usize {
        self.data.len() / PARAMS_PER_SPLAT
    }

    pub fn splat(&self, i: usize) -> &[f64] {
        &self.data[i * PARAMS_PER_SPLAT..(i + 1) * PARAMS_PER_SPLAT]
    }

    pub fn splat_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * PARAMS_PER_SPLAT..(i + 1) * PARAMS_PER_SPLAT]
    }

    pub fn add_scaled(&mut self, other: &SplatGradients, scale: f64) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.data.iter_mut() {
            *v *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Camera-derived quantities shared by projection and back-projection.
struct CameraFrame {
    view: Matrix3<f64>, // world -> camera (x right, y down, z forward)
    eye: Vector3<f64>,
    focal: f64,
    cx: f64,
    cy: f64,
}

impl CameraFrame {
    fn new(camera: &Camera) -> Self {
        let eye = Vector3::from(camera.eye);
        let forward = (Vector3::from(camera.look_at) - eye).normalize();
        let right = forward.cross(&Vector3::from(camera.up)).normalize();
        let up = right.cross(&forward);
        let view = Matrix3::from_rows(&[
            right.transpose(),
            (-up).transpose(),
            forward.transpose(),
        ]);
        let focal = camera.height as f64 / (2.0 * (camera.fov_y / 2.0).tan());
        CameraFrame {
            view,
            eye,
            focal,
            cx: camera.width as f64 / 2.0,
            cy: camera.height as f64 / 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub culled: bool,
}

/// Forward-mode working state for one splat under one camera.
struct PreparedSplat {
    index: usize,
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
    depth: f64,
    color: Vector3<f64>,
    opacity: f64,
    radius: f64,
    // retained for the backward pass
    cov2d: Matrix2<f64>,
    cam_pos: Vector3<f64>,
    rot_unit: [f64; 4],
    rot_norm: f64,
    scales: [f64; 3],
    rot_mat: Matrix3<f64>,
}

fn quat_normalize(q: [f32; 4]) -> ([f64; 4], f64) {
    let q = [q[0] as f64, q[1] as f64, q[2] as f64, q[3] as f64];
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n == 0.0 {
        ([1.0, 0.0, 0.0, 0.0], 1.0)
    } else {
        ([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n)
    }
}

fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial of the rotation matrix w.r.t. each unit-quaternion component.
fn quat_matrix_partials(q: [f64; 4]) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

fn perspective_jacobian(t: &Vector3<f64>, focal: f64) -> Matrix2x3<f64> {
    let z = t.z;
    Matrix2x3::new(
        focal / z,
        0.0,
        -focal * t.x / (z * z),
        0.0,
        focal / z,
        -focal * t.y / (z * z),
    )
}

/// EWA projection of one splat: 2D mean, 2D covariance (with the
/// anti-aliasing blur floor), view depth, or a culled flag when the splat is
/// behind the near plane.
pub fn project_splat(splat: &Splat, camera: &Camera) -> Projection {
    let frame = CameraFrame::new(camera);
    let (proj, _) = prepare_splat(splat, 0, &frame);
    match proj {
        Some(p) => Projection {
            mean2d: p.mean2d,
            cov2d: p.cov2d,
            depth: p.depth,
            culled: false,
        },
        None => Projection {
            mean2d: Vector2::zeros(),
            cov2d: Matrix2::identity(),
            depth: 0.0,
            culled: true,
        },
    }
}

fn prepare_splat(
    splat: &Splat,
    index: usize,
    frame: &CameraFrame,
) -> (Option<PreparedSplat>, ()) {
    let p = Vector3::new(
        splat.position[0] as f64,
        splat.position[1] as f64,
        splat.position[2] as f64,
    );
    let t = frame.view * (p - frame.eye);
    if t.z <= NEAR_PLANE {
        return (None, ());
    }
    let (q, qn) = quat_normalize(splat.rotation);
    let rot = quat_to_matrix(q);
    let scales = splat.scale();
    let s = Matrix3::from_diagonal(&Vector3::new(scales[0], scales[1], scales[2]));
    let m = rot * s;
    let cov3d = m * m.transpose();
    let j = perspective_jacobian(&t, frame.focal);
    let t2 = j * frame.view;
    let mut cov2d = t2 * cov3d * t2.transpose();
    cov2d[(0, 0)] += BLUR;
    cov2d[(1, 1)] += BLUR;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
    if det <= 0.0 {
        return (None, ());
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let mean2d = Vector2::new(
        frame.cx + frame.focal * t.x / t.z,
        frame.cy + frame.focal * t.y / t.z,
    );
    let tr = cov2d[(0, 0)] + cov2d[(1, 1)];
    let lambda_max = 0.5 * tr + (0.25 * tr * tr - det).max(0.0).sqrt();
    // Extent chosen so that alpha < ALPHA_SKIP everywhere outside it: the
    // tile cutoff then never truncates a contribution the compositor would
    // keep, which keeps the render continuous in position and scale.
    let opacity = splat.opacity();
    let radius = lambda_max.sqrt() * (2.0 * (opacity / ALPHA_SKIP).max(1.0).ln()).sqrt() + 1.0;
    (
        Some(PreparedSplat {
            index,
            mean2d,
            conic,
            depth: t.z,
            color: Vector3::new(
                splat.color[0] as f64,
                splat.color[1] as f64,
                splat.color[2] as f64,
            ),
            opacity,
            radius,
            cov2d,
            cam_pos: t,
            rot_unit: q,
            rot_norm: qn,
            scales,
            rot_mat: rot,
        }),
        (),
    )
}

fn prepare_scene(scene: &GaussianScene, frame: &CameraFrame) -> Vec<PreparedSplat> {
    scene
        .splats
        .iter()
        .enumerate()
        .filter_map(|(i, s)| prepare_splat(s, i, frame).0)
        .collect()
}

/// Per-tile splat index lists, each sorted by depth ascending with ties
/// broken by splat index.
fn build_tile_lists(
    prepared: &[PreparedSplat],
    width: usize,
    height: usize,
) -> (usize, usize, Vec<Vec<usize>>) {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); tiles_x * tiles_y];
    for (pi, p) in prepared.iter().enumerate() {
        let x0 = ((p.mean2d.x - p.radius).floor().max(0.0) as usize) / TILE_SIZE;
        let y0 = ((p.mean2d.y - p.radius).floor().max(0.0) as usize) / TILE_SIZE;
        let x1 = (p.mean2d.x + p.radius).ceil().min((width - 1) as f64) as usize / TILE_SIZE;
        let y1 = (p.mean2d.y + p.radius).ceil().min((height - 1) as f64) as usize / TILE_SIZE;
        if p.mean2d.x + p.radius < 0.0 || p.mean2d.y + p.radius < 0.0 {
            continue;
        }
        if p.mean2d.x - p.radius > width as f64 || p.mean2d.y - p.radius > height as f64 {
            continue;
        }
        for ty in y0..=y1.min(tiles_y - 1) {
            for tx in x0..=x1.min(tiles_x - 1) {
                lists[ty * tiles_x + tx].push(pi);
            }
        }
    }
    for list in lists.iter_mut() {
        list.sort_by(|&a, &b| {
            prepared[a]
                .depth
                .partial_cmp(&prepared[b].depth)
                .unwrap()
                .then(prepared[a].index.cmp(&prepared[b].index))
        });
    }
    (tiles_x, tiles_y, lists)
}

/// Front-to-back compositing of one pixel; calls `visit` per surviving splat
/// with (list position, alpha, gaussian value, transmittance before).
#[inline]
fn composite_pixel(
    prepared: &[PreparedSplat],
    list: &[usize],
    px: f64,
    py: f64,
    mut visit: impl FnMut(usize, f64, f64, f64),
) -> (Vector3<f64>, f64) {
    let mut color = Vector3::zeros();
    let mut transmittance = 1.0;
    for (k, &pi) in list.iter().enumerate() {
        let p = &prepared[pi];
        let d = Vector2::new(px - p.mean2d.x, py - p.mean2d.y);
        let power = -0.5 * (d.transpose() * p.conic * d)[(0, 0)];
        if power < -20.0 {
            continue;
        }
        let g = power.exp();
        let alpha = (p.opacity * g).min(ALPHA_CLAMP);
        if alpha < ALPHA_SKIP {
            continue;
        }
        visit(k, alpha, g, transmittance);
        color += p.color * (alpha * transmittance);
        transmittance *= 1.0 - alpha;
    }
    (color, transmittance)
}

/// Deterministic forward render: black background, alpha = 1 - transmittance.
pub fn render(scene: &GaussianScene, camera: &Camera) -> RenderedImage {
    let (w, h) = (camera.width, camera.height);
    let frame = CameraFrame::new(camera);
    let prepared = prepare_scene(scene, &frame);
    let (tiles_x, tiles_y, lists) = build_tile_lists(&prepared, w, h);

    let tile_results: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|ti| {
            let (tx, ty) = (ti % tiles_x, ti / tiles_x);
            let (px0, py0) = (tx * TILE_SIZE, ty * TILE_SIZE);
            let tw = TILE_SIZE.min(w - px0);
            let th = TILE_SIZE.min(h - py0);
            let mut pix = vec![0.0; tw * th * 3];
            let mut alpha = vec![0.0; tw * th];
            for y in 0..th {
                for x in 0..tw {
                    let (c, t) = composite_pixel(
                        &prepared,
                        &lists[ti],
                        (px0 + x) as f64 + 0.5,
                        (py0 + y) as f64 + 0.5,
                        |_, _, _, _| {},
                    );
                    let o = (y * tw + x) * 3;
                    pix[o] = c.x;
                    pix[o + 1] = c.y;
                    pix[o + 2] = c.z;
                    alpha[y * tw + x] = 1.0 - t;
                }
            }
            (ti, pix, alpha)
        })
        .collect();

    let mut pixels = Image::zeros(w, h);
    let mut alpha = vec![0.0; w * h];
    for (ti, pix, a) in tile_results {
        let (tx, ty) = (ti % tiles_x, ti / tiles_x);
        let (px0, py0) = (tx * TILE_SIZE, ty * TILE_SIZE);
        let tw = TILE_SIZE.min(w - px0);
        let th = TILE_SIZE.min(h - py0);
        for y in 0..th {
            for x in 0..tw {
                let o = (y * tw + x) * 3;
                pixels.set_pixel(px0 + x, py0 + y, [pix[o], pix[o + 1], pix[o + 2]]);
                alpha[(py0 + y) * w + px0 + x] = a[y * tw + x];
            }
        }
    }
    RenderedImage { pixels, alpha }
}

/// Image-space gradients for one splat, to be chained through projection.
#[derive(Clone, Copy, Default)]
struct ScreenGrads {
    d_mean: Vector2<f64>,
    d_cov: Matrix2<f64>,
    d_color: Vector3<f64>,
    d_opacity: f64,
}

/// Analytic backward pass: pixel cotangent to per-splat parameter gradients.
/// Culled splats receive exactly zero gradient.
pub fn render_backward(
    scene: &GaussianScene,
    camera: &Camera,
    d_pixels: &Image,
) -> SplatGradients {
    let (w, h) = (camera.width, camera.height);
    assert_eq!(d_pixels.width, w);
    assert_eq!(d_pixels.height, h);
    let frame = CameraFrame::new(camera);
    let prepared = prepare_scene(scene, &frame);
    let (tiles_x, tiles_y, lists) = build_tile_lists(&prepared, w, h);

    // per-tile screen-space gradients, reduced in fixed tile order
    let tile_grads: Vec<Vec<(usize, ScreenGrads)>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|ti| {
            let (tx, ty) = (ti % tiles_x, ti / tiles_x);
            let (px0, py0) = (tx * TILE_SIZE, ty * TILE_SIZE);
            let tw = TILE_SIZE.min(w - px0);
            let th = TILE_SIZE.min(h - py0);
            let list = &lists[ti];
            let mut grads: Vec<ScreenGrads> = vec![ScreenGrads::default(); list.len()];
            for y in 0..th {
                for x in 0..tw {
                    let px = (px0 + x) as f64 + 0.5;
                    let py = (py0 + y) as f64 + 0.5;
                    let g_pix = Vector3::from(d_pixels.pixel(px0 + x, py0 + y));
                    if g_pix == Vector3::zeros() {
                        continue;
                    }
                    // forward pass for the total color
                    let (c_total, _) = composite_pixel(&prepared, list, px, py, |_, _, _, _| {});
                    // second pass with suffix bookkeeping
                    let mut prefix = Vector3::zeros();
                    composite_pixel(&prepared, list, px, py, |k, alpha, g, trans| {
                        let p = &prepared[list[k]];
                        let weight = alpha * trans;
                        prefix += p.color * weight;
                        let suffix = c_total - prefix;
                        // dC/d_alpha = color * T - suffix / (1 - alpha)
                        let d_alpha_vec = p.color * trans - suffix / (1.0 - alpha);
                        let d_alpha = g_pix.dot(&d_alpha_vec);
                        let gr = &mut grads[k];
                        gr.d_color += g_pix * weight;
                        if p.opacity * g < ALPHA_CLAMP {
                            gr.d_opacity += d_alpha * g;
                            let d_g = d_alpha * p.opacity;
                            let d = Vector2::new(px - p.mean2d.x, py - p.mean2d.y);
                            let conic_d = p.conic * d;
                            gr.d_mean += conic_d * (d_g * g);
                            gr.d_cov += (conic_d * conic_d.transpose()) * (0.5 * d_g * g);
                        }
                    });
                }
            }
            list.iter()
                .zip(grads)
                .map(|(&pi, g)| (pi, g))
                .collect()
        })
        .collect();

    let mut screen: Vec<ScreenGrads> = vec![ScreenGrads::default(); prepared.len()];
    for tile in tile_grads {
        for (pi, g) in tile {
            let s = &mut screen[pi];
            s.d_mean += g.d_mean;
            s.d_cov += g.d_cov;
            s.d_color += g.d_color;
            s.d_opacity += g.d_opacity;
        }
    }

    let mut out = SplatGradients::zeros(scene.splats.len());
    for (p, sg) in prepared.iter().zip(&screen) {
        let base = p.index * PARAMS_PER_SPLAT;
        let g = backproject_gradients(p, sg, &frame);
        out.data[base..base + PARAMS_PER_SPLAT].copy_from_slice(&g);
    }
    out
}

/// Chain screen-space (mean2d, cov2d, color, opacity) gradients down to the
/// 14 raw splat parameters.
fn backproject_gradients(p: &PreparedSplat, sg: &ScreenGrads, frame: &CameraFrame) -> [f64; 14] {
    let mut out = [0.0; 14];

    // color and opacity activations
    out[11] = sg.d_color.x;
    out[12] = sg.d_color.y;
    out[13] = sg.d_color.z;
    out[10] = sg.d_opacity * p.opacity * (1.0 - p.opacity);

    let t = p.cam_pos;
    let j = perspective_jacobian(&t, frame.focal);
    let t2 = j * frame.view;
    let s_mat = Matrix3::from_diagonal(&Vector3::new(p.scales[0], p.scales[1], p.scales[2]));
    let m = p.rot_mat * s_mat;
    let cov3d = m * m.transpose();

    let g2 = 0.5 * (sg.d_cov + sg.d_cov.transpose());

    // cov2d = T2 cov3d T2^T + blur I
    let d_cov3d = t2.transpose() * g2 * t2;
    let d_t2 = 2.0 * g2 * t2 * cov3d;
    let d_j = d_t2 * frame.view.transpose();

    // camera-space position gradient from J, then mean2d
    let z = t.z;
    let f = frame.focal;
    let mut d_t = Vector3::zeros();
    d_t.x += d_j[(0, 2)] * (-f / (z * z));
    d_t.y += d_j[(1, 2)] * (-f / (z * z));
    d_t.z += d_j[(0, 0)] * (-f / (z * z))
        + d_j[(1, 1)] * (-f / (z * z))
        + d_j[(0, 2)] * (2.0 * f * t.x / (z * z * z))
        + d_j[(1, 2)] * (2.0 * f * t.y / (z * z * z));
    d_t.x += sg.d_mean.x * f / z;
    d_t.y += sg.d_mean.y * f / z;
    d_t.z += -(f / (z * z)) * (t.x * sg.d_mean.x + t.y * sg.d_mean.y);

    let d_pos = frame.view.transpose() * d_t;
    out[0] = d_pos.x;
    out[1] = d_pos.y;
    out[2] = d_pos.z;

    // cov3d = M M^T with M = R S
    let d_m = 2.0 * d_cov3d * m;
    let d_r = d_m * s_mat;
    for k in 0..3 {
        let mut d_s = 0.0;
        for i in 0..3 {
            d_s += p.rot_mat[(i, k)] * d_m[(i, k)];
        }
        out[7 + k] = d_s * p.scales[k]; // d/d log_scale = d/d s * s
    }

    // rotation through the unit-quaternion map and its normalization
    let partials = quat_matrix_partials(p.rot_unit);
    let mut d_q_unit = [0.0; 4];
    for k in 0..4 {
        d_q_unit[k] = (partials[k].component_mul(&d_r)).sum();
    }
    let dot: f64 = (0..4).map(|k| d_q_unit[k] * p.rot_unit[k]).sum();
    for k in 0..4 {
        out[3 + k] = (d_q_unit[k] - dot * p.rot_unit[k]) / p.rot_norm;
    }

    out
}
