//! Synthetic multi-view data: procedural meshes with baked vertex colors, a
//! poke-and-rotate animation, a classical z-buffer ground-truth renderer,
//! and the PSNR/SSIM metrics used for evaluation.

use crate::camera::Camera;
use crate::mesh::TriMesh;
use crate::raster::FeatureImage;
use nalgebra::{Matrix3, Vector3};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    Sphere,
    Cube,
    Strip,
}

impl std::str::FromStr for SceneKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sphere" => Ok(SceneKind::Sphere),
            "cube" => Ok(SceneKind::Cube),
            "strip" => Ok(SceneKind::Strip),
            other => Err(format!("unknown scene kind '{other}'")),
        }
    }
}

/// Procedural unit-scale mesh plus per-vertex colors in [0,1]³: a checker
/// pattern multiplied onto smooth seed-phased gradients. Deterministic.
pub fn make_scene(kind: SceneKind, subdiv: usize, seed: u64) -> (TriMesh, Vec<Vector3<f64>>) {
    let mesh = match kind {
        SceneKind::Sphere => icosphere(subdiv),
        SceneKind::Cube => cube(subdiv),
        SceneKind::Strip => strip(subdiv),
    };
    assert!(mesh.n_vertices() <= 5000, "scene too large");
    let colors = mesh
        .rest_vertices
        .iter()
        .map(|p| vertex_color(p, seed))
        .collect();
    (mesh, colors)
}

fn vertex_color(p: &Vector3<f64>, seed: u64) -> Vector3<f64> {
    let phase = (seed % 97) as f64 * 0.13;
    let freq = 3.0;
    let checker = ((p.x * freq).floor() + (p.y * freq).floor() + (p.z * freq).floor()) as i64;
    let fac = if checker.rem_euclid(2) == 0 { 1.0 } else { 0.45 };
    let g = |w: f64, k: Vector3<f64>| 0.5 + 0.5 * (p.dot(&k) * 2.5 + w + phase).sin();
    Vector3::new(
        (fac * g(0.0, Vector3::new(1.0, 0.4, 0.2))).clamp(0.0, 1.0),
        (fac * g(2.1, Vector3::new(-0.3, 1.0, 0.5))).clamp(0.0, 1.0),
        (fac * g(4.2, Vector3::new(0.2, -0.5, 1.0))).clamp(0.0, 1.0),
    )
}

fn icosphere(subdiv: usize) -> TriMesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut tris: Vec<[usize; 3]> = vec![
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
    for _ in 0..subdiv {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(tris.len() * 4);
        for t in &tris {
            let mut mid = [0usize; 3];
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoints.entry(key).or_insert_with(|| {
                    let m = ((verts[a] + verts[b]) / 2.0).normalize();
                    verts.push(m);
                    verts.len() - 1
                });
            }
            next.push([t[0], mid[0], mid[2]]);
            next.push([t[1], mid[1], mid[0]]);
            next.push([t[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        tris = next;
    }
    TriMesh::new(verts, tris).expect("icosphere is valid")
}

fn cube(subdiv: usize) -> TriMesh {
    let n = 1usize << subdiv; // segments per edge
    let mut verts: Vec<Vector3<f64>> = Vec::new();
    let mut index: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut tris = Vec::new();
    let quant = |v: f64| (v * 1e6).round() as i64;
    let mut vertex = |p: Vector3<f64>| {
        let key = (quant(p.x), quant(p.y), quant(p.z));
        *index.entry(key).or_insert_with(|| {
            verts.push(p);
            verts.len() - 1
        })
    };
    // Six faces: normal axis, two tangent axes.
    let faces = [
        (Vector3::x(), Vector3::y(), Vector3::z()),
        (-Vector3::x(), Vector3::z(), Vector3::y()),
        (Vector3::y(), Vector3::z(), Vector3::x()),
        (-Vector3::y(), Vector3::x(), Vector3::z()),
        (Vector3::z(), Vector3::x(), Vector3::y()),
        (-Vector3::z(), Vector3::y(), Vector3::x()),
    ];
    for (normal, tu, tv) in faces {
        let n3: Vector3<f64> = normal;
        for i in 0..n {
            for j in 0..n {
                let corner = |a: usize, b: usize| {
                    let u = 2.0 * a as f64 / n as f64 - 1.0;
                    let v = 2.0 * b as f64 / n as f64 - 1.0;
                    n3 + tu * u + tv * v
                };
                let p00 = vertex(corner(i, j));
                let p10 = vertex(corner(i + 1, j));
                let p01 = vertex(corner(i, j + 1));
                let p11 = vertex(corner(i + 1, j + 1));
                tris.push([p00, p10, p11]);
                tris.push([p00, p11, p01]);
            }
        }
    }
    TriMesh::new(verts, tris).expect("cube is valid")
}

fn strip(subdiv: usize) -> TriMesh {
    let len = 12 * (subdiv + 1);
    let mut verts = Vec::new();
    for i in 0..=len {
        let t = i as f64 / len as f64;
        let x = 2.0 * t - 1.0;
        let arc = 0.25 * (std::f64::consts::PI * t).sin();
        verts.push(Vector3::new(x, arc, -0.15));
        verts.push(Vector3::new(x, arc, 0.15));
    }
    let mut tris = Vec::new();
    for i in 0..len {
        let a = 2 * i;
        tris.push([a, a + 2, a + 1]);
        tris.push([a + 1, a + 2, a + 3]);
    }
    TriMesh::new(verts, tris).expect("strip is valid")
}

/// Maximum poke depth as a fraction of the bounding radius.
pub const POKE_AMPLITUDE: f64 = 0.15;
const POKE_WIDTH: f64 = 0.45;

/// Pose at `frame` of `total`: a Gaussian-bump inward poke whose center
/// orbits the surface, composed with a slow global rotation. Frame 0 is the
/// rest pose exactly; everything is smooth in the frame index.
pub fn animate(mesh: &TriMesh, frame: usize, total: usize) -> Vec<Vector3<f64>> {
    assert!(frame < total, "frame {frame} out of {total}");
    let theta = 2.0 * std::f64::consts::PI * frame as f64 / total as f64;
    let radius = mesh.bounding_radius();
    let normals = mesh.rest_vertex_normals();
    let amp = POKE_AMPLITUDE * radius * (0.5 * theta).sin().powi(2);
    let center = Vector3::new(
        (2.0 * theta).cos(),
        0.4 * (3.0 * theta).sin(),
        (2.0 * theta).sin(),
    )
    .normalize()
        * radius;
    let two_w2 = 2.0 * (POKE_WIDTH * radius).powi(2);
    let rot = rotation_y(theta * 0.8);
    mesh.rest_vertices
        .iter()
        .zip(normals.iter())
        .map(|(p, n)| {
            let falloff = (-(p - center).norm_squared() / two_w2).exp();
            rot * (p - n * (amp * falloff))
        })
        .collect()
}

fn rotation_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Classical ground-truth render: screen-space barycentric rasterization
/// with a z-buffer, Lambertian shading max(0, n·l) on smoothed vertex
/// normals, and per-vertex color interpolation. Returns (RGB, binary mask).
pub fn gt_render(
    mesh: &TriMesh,
    colors: &[Vector3<f64>],
    cam: &Camera,
    light: Vector3<f64>,
) -> (FeatureImage, FeatureImage) {
    let (w, h) = (cam.width, cam.height);
    let mut rgb = FeatureImage::zeros(w, h, 3);
    let mut mask = FeatureImage::zeros(w, h, 1);
    let mut inv_z = vec![0.0f64; w * h]; // 0 = empty, larger = closer
    let light = light.normalize();

    // Posed normals: rotate/deform via per-vertex recomputation.
    let mut normals = vec![Vector3::zeros(); mesh.n_vertices()];
    for t in &mesh.triangles {
        let n = (mesh.vertices[t[1]] - mesh.vertices[t[0]])
            .cross(&(mesh.vertices[t[2]] - mesh.vertices[t[0]]));
        for &v in t {
            normals[v] += n;
        }
    }
    for n in &mut normals {
        let l = n.norm();
        if l > 1e-12 {
            *n /= l;
        }
    }

    let projected: Vec<Option<(f64, f64, f64)>> =
        mesh.vertices.iter().map(|&p| cam.project(p)).collect();

    for tri in &mesh.triangles {
        let (Some(a), Some(b), Some(c)) = (projected[tri[0]], projected[tri[1]], projected[tri[2]])
        else {
            continue;
        };
        let area2 = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
        if area2.abs() < 1e-12 {
            continue;
        }
        let min_x = a.0.min(b.0).min(c.0).floor().max(0.0) as usize;
        let max_x = (a.0.max(b.0).max(c.0).ceil() as usize).min(w.saturating_sub(1));
        let min_y = a.1.min(b.1).min(c.1).floor().max(0.0) as usize;
        let max_y = (a.1.max(b.1).max(c.1).ceil() as usize).min(h.saturating_sub(1));
        if min_x > max_x || min_y > max_y {
            continue;
        }
        let inv_za = 1.0 / a.2;
        let inv_zb = 1.0 / b.2;
        let inv_zc = 1.0 / c.2;
        for py in min_y..=max_y {
            for px in min_x..=max_x {
                let x = px as f64 + 0.5;
                let y = py as f64 + 0.5;
                let w0 = ((b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)) / area2;
                let w1 = ((c.0 - b.0) * (y - b.1) - (c.1 - b.1) * (x - b.0)) / area2;
                let w2 = 1.0 - w0 - w1;
                // Inside test consistent for either winding via the shared
                // normalization by the signed area.
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                // Barycentric weights relative to (a, b, c).
                let (ba, bb, bc) = (w1, w2, w0);
                let z_inv = ba * inv_za + bb * inv_zb + bc * inv_zc;
                let idx = py * w + px;
                if z_inv <= inv_z[idx] {
                    continue;
                }
                inv_z[idx] = z_inv;
                // Perspective-correct attribute interpolation.
                let pa = ba * inv_za / z_inv;
                let pb = bb * inv_zb / z_inv;
                let pc = bc * inv_zc / z_inv;
                let normal = (normals[tri[0]] * pa + normals[tri[1]] * pb + normals[tri[2]] * pc)
                    .normalize();
                let shade = normal.dot(&light).max(0.0);
                let color = colors[tri[0]] * pa + colors[tri[1]] * pb + colors[tri[2]] * pc;
                let out = &mut rgb.data[3 * idx..3 * idx + 3];
                out[0] = (color.x * shade).clamp(0.0, 1.0);
                out[1] = (color.y * shade).clamp(0.0, 1.0);
                out[2] = (color.z * shade).clamp(0.0, 1.0);
                mask.data[idx] = 1.0;
            }
        }
    }
    (rgb, mask)
}

/// PSNR in dB for [0,1] images; +∞ for identical inputs.
pub fn psnr(a: &FeatureImage, b: &FeatureImage) -> f64 {
    assert!(a.same_shape(b));
    let mse: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over channels and
/// all fully valid window positions. Computed separably.
pub fn ssim(a: &FeatureImage, b: &FeatureImage) -> f64 {
    assert!(a.same_shape(b));
    assert!(
        a.width >= SSIM_WINDOW && a.height >= SSIM_WINDOW,
        "image smaller than the SSIM window"
    );
    let kernel = gaussian_kernel();
    let c1 = (SSIM_K1 * SSIM_K1) as f64;
    let c2 = (SSIM_K2 * SSIM_K2) as f64;
    let (w, h) = (a.width, a.height);
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;

    // Separable Gaussian filter producing valid-mode outputs.
    let filter = |plane: &[f64]| -> Vec<f64> {
        let mut rows = vec![0.0; h * ow];
        for y in 0..h {
            for x in 0..ow {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * plane[y * w + x + k];
                }
                rows[y * ow + x] = acc;
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * rows[(y + k) * ow + x];
                }
                out[y * ow + x] = acc;
            }
        }
        out
    };

    let mut total = 0.0;
    for c in 0..a.channels {
        let plane = |img: &FeatureImage| -> Vec<f64> {
            (0..w * h).map(|i| img.data[i * img.channels + c]).collect()
        };
        let pa = plane(a);
        let pb = plane(b);
        let pa2: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let pb2: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let pab: Vec<f64> = pa.iter().zip(pb.iter()).map(|(x, y)| x * y).collect();
        let mu_a = filter(&pa);
        let mu_b = filter(&pb);
        let m_a2 = filter(&pa2);
        let m_b2 = filter(&pb2);
        let m_ab = filter(&pab);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let va = m_a2[i] - mu_a[i] * mu_a[i];
            let vb = m_b2[i] - mu_b[i] * mu_b[i];
            let cov = m_ab[i] - mu_a[i] * mu_b[i];
            acc += ((2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2))
                / ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
        }
        total += acc / (oh * ow) as f64;
    }
    total / a.channels as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn icosphere_counts() {
        let (mesh, colors) = make_scene(SceneKind::Sphere, 2, 1);
        assert_eq!(mesh.n_vertices(), 162);
        assert_eq!(mesh.n_triangles(), 320);
        assert_eq!(colors.len(), 162);
    }

    #[test]
    fn colors_in_unit_cube_and_deterministic() {
        for kind in [SceneKind::Sphere, SceneKind::Cube, SceneKind::Strip] {
            let (m1, c1) = make_scene(kind, 1, 7);
            let (_, c2) = make_scene(kind, 1, 7);
            for (a, b) in c1.iter().zip(c2.iter()) {
                assert_eq!(a, b);
                for k in 0..3 {
                    assert!((0.0..=1.0).contains(&a[k]));
                }
            }
            assert!(m1.n_vertices() >= 3);
        }
    }

    #[test]
    fn cube_is_watertight() {
        // Every edge of a closed 2-manifold appears in exactly two triangles.
        let (mesh, _) = make_scene(SceneKind::Cube, 1, 1);
        let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &mesh.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *edge_count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        assert!(edge_count.values().all(|&c| c == 2));
    }

    #[test]
    fn animate_frame_zero_is_rest() {
        let (mesh, _) = make_scene(SceneKind::Sphere, 1, 1);
        let posed = animate(&mesh, 0, 24);
        for (p, r) in posed.iter().zip(mesh.rest_vertices.iter()) {
            assert_relative_eq!(p, r, epsilon = 1e-12);
        }
    }

    #[test]
    fn animate_is_smooth_and_bounded() {
        let (mesh, _) = make_scene(SceneKind::Sphere, 2, 1);
        let total = 24;
        let radius = mesh.bounding_radius();
        let mut prev = animate(&mesh, 0, total);
        for f in 1..total {
            let cur = animate(&mesh, f, total);
            let step: f64 = cur
                .iter()
                .zip(prev.iter())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            // One frame advances the phase by 2π/24; displacement and
            // rotation speeds bound the per-vertex motion well below r/2.
            assert!(step < 0.5 * radius, "frame {f} jumped {step}");
            prev = cur;
        }
    }

    #[test]
    fn animate_never_degenerates_triangles() {
        let total = 40;
        for kind in [SceneKind::Sphere, SceneKind::Cube] {
            let (mut mesh, _) = make_scene(kind, 2, 1);
            for f in 0..total {
                let posed = animate(&mesh, f, total);
                mesh.set_pose(posed).unwrap();
                for i in 0..mesh.n_triangles() {
                    assert!(mesh.area(i) > 1e-10, "{kind:?} frame {f} triangle {i}");
                }
            }
        }
    }

    fn test_camera(w: usize, h: usize) -> Camera {
        Camera::look_at(
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            45.0,
            w,
            h,
        )
    }

    #[test]
    fn mesh_behind_camera_renders_empty() {
        let (mesh, colors) = make_scene(SceneKind::Sphere, 1, 1);
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::new(0.0, 0.0, -6.0), // looking away
            Vector3::new(0.0, 1.0, 0.0),
            45.0,
            32,
            32,
        );
        let (_, mask) = gt_render(&mesh, &colors, &cam, Vector3::new(0.0, 0.0, -1.0));
        assert!(mask.data.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn frontoparallel_triangle_full_lambert() {
        // Triangle facing the camera straight on, light along the normal:
        // shading factor is exactly 1 so pixels show interpolated colors.
        let mesh = TriMesh::new(
            vec![
                Vector3::new(-1.0, -1.0, 0.0),
                Vector3::new(1.0, -1.0, 0.0),
                Vector3::new(0.0, 1.5, 0.0),
            ],
            vec![[0, 2, 1]], // normal toward the camera at -z
        )
        .unwrap();
        let colors = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ];
        let cam = test_camera(48, 48);
        let (rgb, mask) = gt_render(&mesh, &colors, &cam, Vector3::new(0.0, 0.0, -1.0));
        let mut checked = 0;
        for py in 0..48 {
            for px in 0..48 {
                if mask.pixel(px, py)[0] == 0.0 {
                    continue;
                }
                let p = rgb.pixel(px, py);
                let sum = p[0] + p[1] + p[2];
                // Barycentric interpolation of the three unit colors sums to 1.
                assert!((sum - 1.0).abs() < 1e-9, "({px},{py}) sum {sum}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn mask_area_matches_projected_triangle() {
        let mesh = TriMesh::new(
            vec![
                Vector3::new(-0.8, -0.5, 0.0),
                Vector3::new(0.7, -0.4, 0.0),
                Vector3::new(0.0, 0.9, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let colors = vec![Vector3::new(1.0, 1.0, 1.0); 3];
        let cam = test_camera(64, 64);
        let (_, mask) = gt_render(&mesh, &colors, &cam, Vector3::new(0.0, 0.0, -1.0));
        let count: f64 = mask.data.iter().sum();
        // Analytic projected area in pixels (all vertices share one depth).
        let p: Vec<(f64, f64)> = mesh
            .vertices
            .iter()
            .map(|&v| {
                let (x, y, _) = cam.project(v).unwrap();
                (x, y)
            })
            .collect();
        let area = 0.5
            * ((p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[1].1 - p[0].1) * (p[2].0 - p[0].0))
                .abs();
        let perimeter = [(0, 1), (1, 2), (2, 0)]
            .iter()
            .map(|&(i, j)| ((p[i].0 - p[j].0).powi(2) + (p[i].1 - p[j].1).powi(2)).sqrt())
            .sum::<f64>();
        assert!(
            (count - area).abs() <= perimeter,
            "mask {count} px vs area {area} ± {perimeter}"
        );
    }

    #[test]
    fn psnr_values() {
        let mut a = FeatureImage::zeros(8, 8, 3);
        a.data.fill(0.5);
        assert!(psnr(&a, &a).is_infinite());
        let mut b = a.clone();
        for v in b.data.iter_mut() {
            *v += 0.1; // MSE = 0.01
        }
        assert_relative_eq!(psnr(&a, &b), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut a = FeatureImage::zeros(16, 16, 3);
        for v in a.data.iter_mut() {
            *v = rng.gen();
        }
        assert_relative_eq!(ssim(&a, &a), 1.0, epsilon = 1e-9);
    }

    /// Direct windowed double-loop SSIM used as the oracle.
    fn ssim_naive(a: &FeatureImage, b: &FeatureImage) -> f64 {
        let kernel = gaussian_kernel();
        let (w, h) = (a.width, a.height);
        let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let mut total = 0.0;
        for c in 0..a.channels {
            let mut acc = 0.0;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for ky in 0..SSIM_WINDOW {
                        for kx in 0..SSIM_WINDOW {
                            let wgt = kernel[ky] * kernel[kx];
                            let va = a.pixel(ox + kx, oy + ky)[c];
                            let vb = b.pixel(ox + kx, oy + ky)[c];
                            ma += wgt * va;
                            mb += wgt * vb;
                            maa += wgt * va * va;
                            mbb += wgt * vb * vb;
                            mab += wgt * va * vb;
                        }
                    }
                    let va = maa - ma * ma;
                    let vb = mbb - mb * mb;
                    let cov = mab - ma * mb;
                    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                }
            }
            total += acc / (oh * ow) as f64;
        }
        total / a.channels as f64
    }

    #[test]
    fn ssim_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let mut a = FeatureImage::zeros(32, 32, 3);
        let mut b = FeatureImage::zeros(32, 32, 3);
        for v in a.data.iter_mut().chain(b.data.iter_mut()) {
            *v = rng.gen();
        }
        let fast = ssim(&a, &b);
        let slow = ssim_naive(&a, &b);
        assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
    }
}
