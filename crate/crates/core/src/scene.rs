//! Gaussian-splat scene representation: per-splat parameters, the template
//! mesh the splats adhere to, cameras, and PLY/OBJ I/O.
//!
//! Splat parameters are stored as f32 (matching the on-disk PLY layout
//! exactly, so round trips are bit-identical); all math downstream widens
//! to f64.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::io::Write;

pub const PARAMS_PER_SPLAT: usize = 14;

/// One anisotropic 3D Gaussian primitive. Opacity and scale are stored
/// pre-activation (logit / log) so optimization is unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat {
    pub position: [f32; 3],
    /// Unit quaternion (w, x, y, z); renormalized after every optimizer step.
    pub rotation: [f32; 4],
    pub log_scale: [f32; 3],
    pub opacity_logit: f32,
    /// Linear RGB, each in [0,1] after clamping activation.
    pub color: [f32; 3],
}

impl Splat {
    pub fn opacity(&self) -> f64 {
        1.0 / (1.0 + (-(self.opacity_logit as f64)).exp())
    }

    pub fn scale(&self) -> [f64; 3] {
        [
            (self.log_scale[0] as f64).exp(),
            (self.log_scale[1] as f64).exp(),
            (self.log_scale[2] as f64).exp(),
        ]
    }

    pub fn renormalize_rotation(&mut self) {
        let q = self.rotation;
        let n = ((q[0] as f64).powi(2)
            + (q[1] as f64).powi(2)
            + (q[2] as f64).powi(2)
            + (q[3] as f64).powi(2))
        .sqrt();
        if n > 0.0 {
            #[allow(clippy::needless_range_loop)]
            for i in 0..4 {
                self.rotation[i] = (q[i] as f64 / n) as f32;
            }
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub splats: Vec<Splat>,
    /// Per-splat index into the template mesh vertices.
    pub binding: Vec<usize>,
}

impl GaussianScene {
    pub fn parameter_count(&self) -> usize {
        self.splats.len() * PARAMS_PER_SPLAT
    }

    /// Lossless flatten of all optimizable parameters; `unflatten` is the
    /// exact inverse.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for s in &self.splats {
            out.extend_from_slice(&s.position);
            out.extend_from_slice(&s.rotation);
            out.extend_from_slice(&s.log_scale);
            out.push(s.opacity_logit);
            out.extend_from_slice(&s.color);
        }
        out
    }

    pub fn unflatten(&mut self, params: &[f32]) {
        assert_eq!(params.len(), self.parameter_count());
        for (i, s) in self.splats.iter_mut().enumerate() {
            let p = &params[i * PARAMS_PER_SPLAT..(i + 1) * PARAMS_PER_SPLAT];
            s.position.copy_from_slice(&p[0..3]);
            s.rotation.copy_from_slice(&p[3..7]);
            s.log_scale.copy_from_slice(&p[7..10]);
            s.opacity_logit = p[10];
            s.color.copy_from_slice(&p[11..14]);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TemplateMesh {
    /// Vertex coordinates, quantized through f32 so splat initialization on a
    /// vertex is exact.
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    /// Per-vertex neighbor sets (symmetric, sorted).
    pub adjacency: Vec<Vec<usize>>,
    pub frontal_camera: Camera,
}

impl TemplateMesh {
    pub fn centroid(&self) -> [f64; 3] {
        let n = self.vertices.len() as f64;
        let mut c = [0.0; 3];
        for v in &self.vertices {
            for k in 0..3 {
                c[k] += v[k] / n;
            }
        }
        c
    }

    pub fn bounding_radius(&self) -> f64 {
        let c = self.centroid();
        self.vertices
            .iter()
            .map(|v| {
                ((v[0] - c[0]).powi(2) + (v[1] - c[1]).powi(2) + (v[2] - c[2]).powi(2)).sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Mean length of edges incident to `vertex`.
    pub fn mean_incident_edge_length(&self, vertex: usize) -> f64 {
        let nbrs = &self.adjacency[vertex];
        if nbrs.is_empty() {
            return 0.1;
        }
        let v = self.vertices[vertex];
        let sum: f64 = nbrs
            .iter()
            .map(|&n| {
                let u = self.vertices[n];
                ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2) + (u[2] - v[2]).powi(2)).sqrt()
            })
            .sum();
        sum / nbrs.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AzimuthLabel {
    Front,
    Side,
    Back,
}

impl AzimuthLabel {
    /// Bin an azimuth in degrees: front [-45,45], side +/-(45,135], back otherwise.
    pub fn from_azimuth_deg(az: f64) -> Self {
        let az = wrap_deg(az);
        let a = az.abs();
        if a <= 45.0 {
            AzimuthLabel::Front
        } else if a <= 135.0 {
            AzimuthLabel::Side
        } else {
            AzimuthLabel::Back
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AzimuthLabel::Front => "front",
            AzimuthLabel::Side => "side",
            AzimuthLabel::Back => "back",
        }
    }
}

fn wrap_deg(az: f64) -> f64 {
    let mut a = az % 360.0;
    if a > 180.0 {
        a -= 360.0;
    }
    if a < -180.0 {
        a += 360.0;
    }
    a
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub eye: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub azimuth_label: AzimuthLabel,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.eye == self.look_at {
            return Err(Error::InvalidConfig("camera eye equals look_at".into()));
        }
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidConfig("fov_y out of (0, pi)".into()));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidConfig("image size below 8 px".into()));
        }
        Ok(())
    }

    pub fn with_size(&self, width: usize, height: usize) -> Camera {
        Camera {
            width,
            height,
            ..self.clone()
        }
    }
}

/// Spherical camera sampling around the mesh centroid.
#[derive(Debug, Clone)]
pub struct CameraPolicy {
    pub center: [f64; 3],
    pub radius: f64,
    pub azimuth_range_deg: (f64, f64),
    pub elevation_range_deg: (f64, f64),
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraPolicy {
    /// Policy whose radius keeps the mesh bounding sphere fully in frustum.
    pub fn for_mesh(mesh: &TemplateMesh, width: usize, height: usize) -> CameraPolicy {
        let fov_y = 50.0_f64.to_radians();
        let radius = frustum_safe_distance(mesh.bounding_radius(), fov_y) ;
        CameraPolicy {
            center: mesh.centroid(),
            radius,
            azimuth_range_deg: (-180.0, 180.0),
            elevation_range_deg: (-30.0, 30.0),
            fov_y,
            width,
            height,
        }
    }
}

fn frustum_safe_distance(bounding_radius: f64, fov_y: f64) -> f64 {
    // sin(half_fov) = r / d puts the sphere tangent to the frustum planes;
    // 1.1 margin keeps it strictly inside.
    1.1 * bounding_radius / (fov_y / 2.0).sin()
}

/// Camera at (azimuth, elevation) degrees on the policy sphere. Azimuth 0 is
/// the +Z frontal direction.
pub fn camera_at(policy: &CameraPolicy, azimuth_deg: f64, elevation_deg: f64) -> Camera {
    let az = azimuth_deg.to_radians();
    let el = elevation_deg.to_radians();
    let dir = [az.sin() * el.cos(), el.sin(), az.cos() * el.cos()];
    let eye = [
        policy.center[0] + policy.radius * dir[0],
        policy.center[1] + policy.radius * dir[1],
        policy.center[2] + policy.radius * dir[2],
    ];
    Camera {
        eye,
        look_at: policy.center,
        up: [0.0, 1.0, 0.0],
        fov_y: policy.fov_y,
        width: policy.width,
        height: policy.height,
        azimuth_label: AzimuthLabel::from_azimuth_deg(azimuth_deg),
    }
}

pub fn sample_camera(rng: &mut impl Rng, policy: &CameraPolicy) -> Camera {
    let az = rng.gen_range(policy.azimuth_range_deg.0..=policy.azimuth_range_deg.1);
    let el = rng.gen_range(policy.elevation_range_deg.0..=policy.elevation_range_deg.1);
    camera_at(policy, az, el)
}

// ---------------------------------------------------------------------------
// Template construction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum TemplateKind {
    Icosphere { subdivisions: usize },
    ObjFile { path: std::path::PathBuf },
}

pub fn make_template(kind: &TemplateKind) -> Result<TemplateMesh> {
    let (vertices, faces) = match kind {
        TemplateKind::Icosphere { subdivisions } => {
            if *subdivisions > 4 {
                return Err(Error::InvalidConfig(format!(
                    "subdivisions {} out of [0,4]",
                    subdivisions
                )));
            }
            icosphere(*subdivisions)
        }
        TemplateKind::ObjFile { path } => {
            let text = std::fs::read_to_string(path)?;
            parse_obj(&text)?
        }
    };
    build_mesh(vertices, faces)
}

fn build_mesh(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<TemplateMesh> {
    if vertices.is_empty() {
        return Err(Error::EmptyMesh("mesh has no vertices".into()));
    }
    // quantize through f32 so splats initialized on vertices match exactly
    let vertices: Vec<[f64; 3]> = vertices
        .iter()
        .map(|v| [v[0] as f32 as f64, v[1] as f32 as f64, v[2] as f32 as f64])
        .collect();
    let n = vertices.len();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (fi, f) in faces.iter().enumerate() {
        for &v in f {
            if v >= n {
                return Err(Error::ObjParse {
                    line: 0,
                    message: format!("face {fi} references vertex {v} of {n}"),
                });
            }
        }
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            adj[a].insert(b);
            adj[b].insert(a);
        }
    }
    let adjacency: Vec<Vec<usize>> = adj.into_iter().map(|s| s.into_iter().collect()).collect();
    if !is_connected(n, &adjacency) {
        return Err(Error::EmptyMesh("mesh is not connected".into()));
    }
    let mut mesh = TemplateMesh {
        vertices,
        faces,
        adjacency,
        frontal_camera: Camera {
            eye: [0.0, 0.0, 1.0],
            look_at: [0.0, 0.0, 0.0],
            up: [0.0, 1.0, 0.0],
            fov_y: 50.0_f64.to_radians(),
            width: 128,
            height: 128,
            azimuth_label: AzimuthLabel::Front,
        },
    };
    let c = mesh.centroid();
    let d = frustum_safe_distance(mesh.bounding_radius().max(1e-6), mesh.frontal_camera.fov_y);
    mesh.frontal_camera.eye = [c[0], c[1], c[2] + d];
    mesh.frontal_camera.look_at = c;
    Ok(mesh)
}

fn is_connected(n: usize, adjacency: &[Vec<usize>]) -> bool {
    if n == 0 {
        return false;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &u in &adjacency[v] {
            if !seen[u] {
                seen[u] = true;
                stack.push(u);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Unit icosphere: 12-vertex icosahedron with `subdivisions` rounds of 4-way
/// face splitting, vertices projected to the unit sphere.
pub fn icosphere(subdivisions: usize) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut vertices: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ]
    .into_iter()
    .map(normalize3)
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint = std::collections::BTreeMap::new();
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let m: Vec<usize> = (0..3)
                .map(|k| {
                    let (a, b) = (f[k], f[(k + 1) % 3]);
                    let key = (a.min(b), a.max(b));
                    *midpoint.entry(key).or_insert_with(|| {
                        let va = vertices[a];
                        let vb = vertices[b];
                        vertices.push(normalize3([
                            (va[0] + vb[0]) / 2.0,
                            (va[1] + vb[1]) / 2.0,
                            (va[2] + vb[2]) / 2.0,
                        ]));
                        vertices.len() - 1
                    })
                })
                .collect();
            new_faces.push([f[0], m[0], m[2]]);
            new_faces.push([f[1], m[1], m[0]]);
            new_faces.push([f[2], m[2], m[1]]);
            new_faces.push([m[0], m[1], m[2]]);
        }
        faces = new_faces;
    }
    (vertices, faces)
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Minimal OBJ reader: `v` and triangular `f` records only.
#[allow(clippy::type_complexity)]
pub fn parse_obj(text: &str) -> Result<(Vec<[f64; 3]>, Vec<[usize; 3]>)> {
    let mut vertices = Vec::new();
    let mut faces: Vec<(usize, [usize; 3])> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_num = lineno + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let mut coords = [0.0f64; 3];
                for c in coords.iter_mut() {
                    let tok = toks.next().ok_or_else(|| Error::ObjParse {
                        line: line_num,
                        message: "vertex record needs 3 coordinates".into(),
                    })?;
                    // parse through f32 to match the mesh quantization
                    *c = tok.parse::<f32>().map_err(|_| Error::ObjParse {
                        line: line_num,
                        message: format!("bad coordinate {tok:?}"),
                    })? as f64;
                }
                vertices.push(coords);
            }
            Some("f") => {
                let idx: Vec<usize> = toks
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or(t);
                        first
                            .parse::<usize>()
                            .ok()
                            .and_then(|i| i.checked_sub(1))
                            .ok_or_else(|| Error::ObjParse {
                                line: line_num,
                                message: format!("bad face index {t:?}"),
                            })
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(Error::ObjParse {
                        line: line_num,
                        message: format!("face has {} indices, expected 3", idx.len()),
                    });
                }
                faces.push((line_num, [idx[0], idx[1], idx[2]]));
            }
            _ => {} // other record types ignored
        }
    }
    for (line, f) in &faces {
        for &v in f {
            if v >= vertices.len() {
                return Err(Error::ObjParse {
                    line: *line,
                    message: format!(
                        "face at line {line} references vertex {} of {}",
                        v + 1,
                        vertices.len()
                    ),
                });
            }
        }
    }
    Ok((vertices, faces.into_iter().map(|(_, f)| f).collect()))
}

// ---------------------------------------------------------------------------
// Scene initialization
// ---------------------------------------------------------------------------

/// One splat centered at each template vertex (plus jittered extras when
/// `splats_per_vertex > 1`), neutral gray, opacity logit 0, isotropic scale
/// at half the mean incident edge length.
pub fn init_scene(
    mesh: &TemplateMesh,
    splats_per_vertex: usize,
    rng_seed: u64,
) -> Result<GaussianScene> {
    if mesh.vertices.is_empty() {
        return Err(Error::EmptyMesh("cannot initialize scene on empty mesh".into()));
    }
    assert!(splats_per_vertex >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut splats = Vec::new();
    let mut binding = Vec::new();
    for copy in 0..splats_per_vertex {
        for (vi, v) in mesh.vertices.iter().enumerate() {
            let scale = 0.5 * mesh.mean_incident_edge_length(vi);
            let mut position = [v[0] as f32, v[1] as f32, v[2] as f32];
            if copy > 0 {
                for p in position.iter_mut() {
                    let jitter: f64 = rng.gen_range(-0.5..0.5) * scale;
                    *p += jitter as f32;
                }
            }
            splats.push(Splat {
                position,
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: [scale.max(1e-6).ln() as f32; 3],
                opacity_logit: 0.0,
                color: [0.5, 0.5, 0.5],
            });
            binding.push(vi);
        }
    }
    Ok(GaussianScene { splats, binding })
}

// ---------------------------------------------------------------------------
// Binary PLY
// ---------------------------------------------------------------------------

const PLY_PROPERTIES: [&str; 15] = [
    "x",
    "y",
    "z",
    "rot_w",
    "rot_x",
    "rot_y",
    "rot_z",
    "log_scale_x",
    "log_scale_y",
    "log_scale_z",
    "opacity_logit",
    "r",
    "g",
    "b",
    "binding_index",
];

/// Binary little-endian PLY with one float32 property per parameter column.
pub fn save_ply(scene: &GaussianScene) -> Vec<u8> {
    let mut out = Vec::new();
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement splat {}\n",
        scene.splats.len()
    )
    .unwrap();
    for p in PLY_PROPERTIES {
        writeln!(out, "property float {p}").unwrap();
    }
    out.extend_from_slice(b"end_header\n");
    for (s, &b) in scene.splats.iter().zip(&scene.binding) {
        let row: [f32; 15] = [
            s.position[0],
            s.position[1],
            s.position[2],
            s.rotation[0],
            s.rotation[1],
            s.rotation[2],
            s.rotation[3],
            s.log_scale[0],
            s.log_scale[1],
            s.log_scale[2],
            s.opacity_logit,
            s.color[0],
            s.color[1],
            s.color[2],
            b as f32,
        ];
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_ply(bytes: &[u8]) -> Result<GaussianScene> {
    let header_end = find_header_end(bytes)?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Ply("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(Error::Ply("missing ply magic".into()));
    }
    let mut count: Option<usize> = None;
    let mut columns: Vec<String> = Vec::new();
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::Ply(format!("unsupported format {fmt}")));
                }
            }
            ["element", "splat", n] => {
                count = Some(n.parse().map_err(|_| Error::Ply("bad element count".into()))?);
            }
            ["element", other, _] => {
                return Err(Error::Ply(format!("unexpected element {other}")));
            }
            ["property", "float", name] => columns.push(name.to_string()),
            ["property", ty, _] => {
                return Err(Error::Ply(format!("unsupported property type {ty}")));
            }
            ["comment", ..] | ["end_header"] => {}
            _ => return Err(Error::Ply(format!("unrecognized header line {line:?}"))),
        }
    }
    let count = count.ok_or_else(|| Error::Ply("missing element splat".into()))?;
    let mut col_index = Vec::with_capacity(PLY_PROPERTIES.len());
    for want in PLY_PROPERTIES {
        let idx = columns
            .iter()
            .position(|c| c == want)
            .ok_or_else(|| Error::MissingProperty(want.to_string()))?;
        col_index.push(idx);
    }
    let row_bytes = columns.len() * 4;
    let body = &bytes[header_end..];
    if body.len() < count * row_bytes {
        return Err(Error::Ply(format!(
            "body truncated: need {} bytes, have {}",
            count * row_bytes,
            body.len()
        )));
    }
    let mut splats = Vec::with_capacity(count);
    let mut binding = Vec::with_capacity(count);
    for i in 0..count {
        let row = &body[i * row_bytes..(i + 1) * row_bytes];
        let get = |c: usize| -> f32 {
            let o = col_index[c] * 4;
            f32::from_le_bytes([row[o], row[o + 1], row[o + 2], row[o + 3]])
        };
        splats.push(Splat {
            position: [get(0), get(1), get(2)],
            rotation: [get(3), get(4), get(5), get(6)],
            log_scale: [get(7), get(8), get(9)],
            opacity_logit: get(10),
            color: [get(11), get(12), get(13)],
        });
        binding.push(get(14) as usize);
    }
    Ok(GaussianScene { splats, binding })
}

fn find_header_end(bytes: &[u8]) -> Result<usize> {
    let needle = b"end_header\n";
    bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + needle.len())
        .ok_or_else(|| Error::Ply("missing end_header".into()))
}
