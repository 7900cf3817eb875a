//! Triangle meshes, per-polygon rigid+scale frames, and ASCII OBJ I/O.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const DEGENERATE_AREA: f64 = 1e-12;

/// Triangle mesh carrying both a posed and a rest (canonical) vertex set over
/// shared connectivity.
#[derive(Clone, Debug)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub rest_vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    /// Builds a mesh whose pose starts at the rest configuration.
    pub fn new(rest_vertices: Vec<Vector3<f64>>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if rest_vertices.len() < 3 {
            return Err(Error::InvalidMesh(format!(
                "need at least 3 vertices, got {}",
                rest_vertices.len()
            )));
        }
        for (i, t) in triangles.iter().enumerate() {
            for &v in t {
                if v >= rest_vertices.len() {
                    return Err(Error::InvalidMesh(format!(
                        "triangle {i} references vertex {v} out of {}",
                        rest_vertices.len()
                    )));
                }
            }
        }
        let mesh = TriMesh {
            vertices: rest_vertices.clone(),
            rest_vertices,
            triangles,
        };
        for i in 0..mesh.triangles.len() {
            let a = mesh.rest_area(i);
            if a <= DEGENERATE_AREA {
                return Err(Error::DegenerateTriangle { index: i, area: a });
            }
        }
        Ok(mesh)
    }

    pub fn n_vertices(&self) -> usize {
        self.rest_vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Replaces the posed vertices, keeping rest pose and connectivity.
    pub fn set_pose(&mut self, vertices: Vec<Vector3<f64>>) -> Result<()> {
        if vertices.len() != self.rest_vertices.len() {
            return Err(Error::ConnectivityMismatch(format!(
                "pose has {} vertices, mesh has {}",
                vertices.len(),
                self.rest_vertices.len()
            )));
        }
        self.vertices = vertices;
        Ok(())
    }

    pub fn posed(&self, vertices: Vec<Vector3<f64>>) -> Result<TriMesh> {
        let mut m = self.clone();
        m.set_pose(vertices)?;
        Ok(m)
    }

    fn tri_verts(&self, verts: &[Vector3<f64>], i: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.triangles[i];
        [verts[a], verts[b], verts[c]]
    }

    pub fn area(&self, i: usize) -> f64 {
        let [a, b, c] = self.tri_verts(&self.vertices, i);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn rest_area(&self, i: usize) -> f64 {
        let [a, b, c] = self.tri_verts(&self.rest_vertices, i);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn centroid(&self, i: usize) -> Vector3<f64> {
        let [a, b, c] = self.tri_verts(&self.vertices, i);
        (a + b + c) / 3.0
    }

    pub fn rest_centroid(&self, i: usize) -> Vector3<f64> {
        let [a, b, c] = self.tri_verts(&self.rest_vertices, i);
        (a + b + c) / 3.0
    }

    /// Mean edge length of triangle `i` in the rest pose.
    pub fn rest_mean_edge(&self, i: usize) -> f64 {
        let [a, b, c] = self.tri_verts(&self.rest_vertices, i);
        ((b - a).norm() + (c - b).norm() + (a - c).norm()) / 3.0
    }

    /// Area-weighted rest-pose vertex normals.
    pub fn rest_vertex_normals(&self) -> Vec<Vector3<f64>> {
        let mut normals = vec![Vector3::zeros(); self.n_vertices()];
        for t in &self.triangles {
            let [a, b, c] = [
                self.rest_vertices[t[0]],
                self.rest_vertices[t[1]],
                self.rest_vertices[t[2]],
            ];
            let n = (b - a).cross(&(c - a)); // length = 2 * area
            for &v in t {
                normals[v] += n;
            }
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 1e-12 {
                *n /= len;
            }
        }
        normals
    }

    pub fn bounding_radius(&self) -> f64 {
        self.rest_vertices
            .iter()
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }
}

/// Per-triangle rigid+scale transformation carrying anchored primitives with
/// the deforming surface.
#[derive(Clone, Copy, Debug)]
pub struct PolygonFrame {
    /// Posed triangle centroid.
    pub t: Vector3<f64>,
    /// Rotation from the rest canonical frame to the posed canonical frame.
    pub r: Matrix3<f64>,
    /// Isotropic stretch, sqrt of the posed/rest area ratio.
    pub k: f64,
}

/// Canonical orthonormal frame of a triangle: x along the first edge,
/// z along the face normal, y = z × x. Columns of the returned matrix.
pub fn canonical_frame(v0: Vector3<f64>, v1: Vector3<f64>, v2: Vector3<f64>) -> Matrix3<f64> {
    let e = v1 - v0;
    let x = e.normalize();
    let n = e.cross(&(v2 - v0));
    let z = n.normalize();
    let y = z.cross(&x);
    Matrix3::from_columns(&[x, y, z])
}

pub fn polygon_frame(mesh: &TriMesh, tri_index: usize) -> Result<PolygonFrame> {
    let area = mesh.area(tri_index);
    if area < DEGENERATE_AREA {
        return Err(Error::DegenerateTriangle {
            index: tri_index,
            area,
        });
    }
    let [p0, p1, p2] = mesh.tri_verts(&mesh.vertices, tri_index);
    let [r0, r1, r2] = mesh.tri_verts(&mesh.rest_vertices, tri_index);
    let posed = canonical_frame(p0, p1, p2);
    let rest = canonical_frame(r0, r1, r2);
    Ok(PolygonFrame {
        t: mesh.centroid(tri_index),
        r: posed * rest.transpose(),
        k: (area / mesh.rest_area(tri_index)).sqrt(),
    })
}

pub fn polygon_frames(mesh: &TriMesh) -> Result<Vec<PolygonFrame>> {
    (0..mesh.n_triangles())
        .map(|i| polygon_frame(mesh, i))
        .collect()
}

/// Loads the `v`/`f` subset of ASCII OBJ. Faces must be triangles; `a/b/c`
/// style face indices keep only the vertex reference.
pub fn load_obj(path: &Path) -> Result<(Vec<Vector3<f64>>, Vec<[usize; 3]>)> {
    let file = std::fs::File::open(path)?;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut c = [0.0; 3];
                for slot in &mut c {
                    *slot = it
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::DataError(format!("bad vertex at line {ln}")))?;
                }
                vertices.push(Vector3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|tok| {
                        tok.split('/')
                            .next()
                            .and_then(|s| s.parse::<usize>().ok())
                            .ok_or_else(|| Error::DataError(format!("bad face at line {ln}")))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(Error::DataError(format!(
                        "face at line {ln} has {} vertices; only triangles supported",
                        idx.len()
                    )));
                }
                triangles.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    Ok((vertices, triangles))
}

pub fn save_obj(path: &Path, vertices: &[Vector3<f64>], triangles: &[[usize; 3]]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in vertices {
        writeln!(f, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for t in triangles {
        writeln!(f, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{rot_from_unit_quat, Quat};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_triangle() -> TriMesh {
        TriMesh::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.2, 0.9, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
        Quat::new(
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
        )
        .normalized()
    }

    #[test]
    fn frame_identity_for_rest_pose() {
        let mesh = single_triangle();
        let f = polygon_frame(&mesh, 0).unwrap();
        assert_relative_eq!(f.t, mesh.rest_centroid(0), epsilon = 1e-15);
        assert_relative_eq!(f.r, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(f.k, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn frame_uniform_scale() {
        let mut mesh = single_triangle();
        let scaled: Vec<_> = mesh.rest_vertices.iter().map(|v| v * 2.0).collect();
        mesh.set_pose(scaled).unwrap();
        let f = polygon_frame(&mesh, 0).unwrap();
        assert_relative_eq!(f.k, 2.0, epsilon = 1e-12);
        assert_relative_eq!(f.r, Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn frame_recovers_known_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let q = random_quat(&mut rng);
            let rot = rot_from_unit_quat(&q);
            let mut mesh = single_triangle();
            let posed: Vec<_> = mesh.rest_vertices.iter().map(|v| rot * v).collect();
            mesh.set_pose(posed).unwrap();
            let f = polygon_frame(&mesh, 0).unwrap();
            assert_relative_eq!(f.r, rot, epsilon = 1e-9);
            assert_relative_eq!(f.k, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn frame_orthonormal_det_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let mut mesh = single_triangle();
            let posed: Vec<_> = mesh
                .rest_vertices
                .iter()
                .map(|v| {
                    v + Vector3::new(
                        0.3 * (rng.gen::<f64>() - 0.5),
                        0.3 * (rng.gen::<f64>() - 0.5),
                        0.3 * (rng.gen::<f64>() - 0.5),
                    )
                })
                .collect();
            mesh.set_pose(posed).unwrap();
            let f = polygon_frame(&mesh, 0).unwrap();
            assert_relative_eq!(f.r * f.r.transpose(), Matrix3::identity(), epsilon = 1e-6);
            assert_relative_eq!(f.r.determinant(), 1.0, epsilon = 1e-6);
            assert!(f.k > 0.0);
        }
    }

    #[test]
    fn frame_rigid_equivariance() {
        // Transforming the posed mesh by (Q, t) maps T -> Q T + t, R -> Q R.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let mut mesh = single_triangle();
            let posed: Vec<_> = mesh
                .rest_vertices
                .iter()
                .map(|v| v + Vector3::new(0.1, -0.2, 0.3 * rng.gen::<f64>()))
                .collect();
            mesh.set_pose(posed.clone()).unwrap();
            let base = polygon_frame(&mesh, 0).unwrap();

            let q = random_quat(&mut rng);
            let rot = rot_from_unit_quat(&q);
            let shift = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let moved: Vec<_> = posed.iter().map(|v| rot * v + shift).collect();
            mesh.set_pose(moved).unwrap();
            let f = polygon_frame(&mesh, 0).unwrap();

            assert_relative_eq!(f.t, rot * base.t + shift, epsilon = 1e-9);
            assert_relative_eq!(f.r, rot * base.r, epsilon = 1e-9);
            assert_relative_eq!(f.k, base.k, epsilon = 1e-9);
        }
    }

    #[test]
    fn degenerate_posed_triangle_rejected() {
        let mut mesh = single_triangle();
        let collapsed = vec![Vector3::zeros(); 3];
        mesh.set_pose(collapsed).unwrap();
        assert!(matches!(
            polygon_frame(&mesh, 0),
            Err(Error::DegenerateTriangle { .. })
        ));
    }

    #[test]
    fn obj_roundtrip() {
        let mesh = single_triangle();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        save_obj(&path, &mesh.rest_vertices, &mesh.triangles).unwrap();
        let (v, t) = load_obj(&path).unwrap();
        assert_eq!(t, mesh.triangles);
        for (a, b) in v.iter().zip(mesh.rest_vertices.iter()) {
            assert_eq!(a, b);
        }
    }
}
