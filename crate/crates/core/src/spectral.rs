//! Cotangent Laplacian and low-frequency spectral coordinates of the rest mesh.

use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use nalgebra::{DMatrix, DVector, Vector3};

/// Cotangent clamp keeping weights finite on sliver triangles.
pub const COT_CLAMP: f64 = 1e4;
/// Residual above which the solver reports failure.
const EIGEN_TOL: f64 = 1e-6;
/// Residual the iteration actually drives toward; tighter than EIGEN_TOL so
/// eigenvectors stay accurate even across small spectral gaps.
const EIGEN_TARGET: f64 = 1e-10;
const MAX_POWER_ITERS: usize = 500;
/// Above this vertex count the solver switches from a dense
/// eigendecomposition to deflated inverse iteration.
pub const DENSE_LIMIT: usize = 500;

/// Symmetric sparse matrix in per-row adjacency form (diagonal included).
#[derive(Clone, Debug)]
pub struct SparseSym {
    pub n: usize,
    pub rows: Vec<Vec<(u32, f64)>>,
}

impl SparseSym {
    fn zeros(n: usize) -> Self {
        SparseSym {
            n,
            rows: vec![Vec::new(); n],
        }
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let row = &mut self.rows[i];
        match row.iter_mut().find(|(c, _)| *c as usize == j) {
            Some((_, slot)) => *slot += v,
            None => row.push((j as u32, v)),
        }
    }

    fn sort_rows(&mut self) {
        for row in &mut self.rows {
            row.sort_by_key(|(c, _)| *c);
        }
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            let mut acc = 0.0;
            for &(j, v) in row {
                acc += v * x[j as usize];
            }
            out[i] = acc;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                m[(i, j as usize)] = v;
            }
        }
        m
    }
}

/// Assembles the cotangent Laplacian of the rest mesh. Off-diagonal entries
/// are -(cot α + cot β)/2 with cotangents clamped to ±`COT_CLAMP`; diagonal
/// makes every row sum to zero, so the constant vector spans the nullspace.
pub fn cotangent_laplacian(mesh: &TriMesh) -> SparseSym {
    let n = mesh.n_vertices();
    let mut l = SparseSym::zeros(n);
    for tri in &mesh.triangles {
        let v = [
            mesh.rest_vertices[tri[0]],
            mesh.rest_vertices[tri[1]],
            mesh.rest_vertices[tri[2]],
        ];
        // Corner c is opposite the edge (a, b).
        for c in 0..3 {
            let a = (c + 1) % 3;
            let b = (c + 2) % 3;
            let e1: Vector3<f64> = v[a] - v[c];
            let e2: Vector3<f64> = v[b] - v[c];
            let cross = e1.cross(&e2).norm();
            let cot = if cross > 1e-300 {
                (e1.dot(&e2) / cross).clamp(-COT_CLAMP, COT_CLAMP)
            } else {
                COT_CLAMP
            };
            let w = 0.5 * cot;
            l.add(tri[a], tri[b], -w);
            l.add(tri[b], tri[a], -w);
            l.add(tri[a], tri[a], w);
            l.add(tri[b], tri[b], w);
        }
    }
    l.sort_rows();
    l
}

/// Per-vertex low-frequency eigen-coordinates: columns are eigenvectors
/// 2..m+1 of the cotangent Laplacian (constant mode skipped), each rescaled
/// to max amplitude 1 with the first significantly nonzero entry positive.
#[derive(Clone, Debug)]
pub struct SpectralCoords {
    pub n_vertices: usize,
    pub m: usize,
    /// Row-major n_vertices × m.
    pub coords: Vec<f64>,
}

impl SpectralCoords {
    pub fn vertex(&self, v: usize) -> &[f64] {
        &self.coords[v * self.m..(v + 1) * self.m]
    }
}

pub fn spectral_coords(mesh: &TriMesh, m: usize) -> Result<SpectralCoords> {
    let n = mesh.n_vertices();
    if m >= n {
        return Err(Error::InvalidMesh(format!(
            "requested {m} spectral coordinates on a {n}-vertex mesh"
        )));
    }
    let lap = cotangent_laplacian(mesh);
    let vectors = if n <= DENSE_LIMIT {
        dense_low_eigvecs(&lap, m)
    } else {
        sparse_low_eigvecs(&lap, m)?
    };

    let mut coords = vec![0.0; n * m];
    for (k, v) in vectors.iter().enumerate() {
        let mut v = v.clone();
        canonical_sign(&mut v);
        let max = v.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        if max > 0.0 {
            for x in &mut v {
                *x /= max;
            }
        }
        for i in 0..n {
            coords[i * m + k] = v[i];
        }
    }
    Ok(SpectralCoords {
        n_vertices: n,
        m,
        coords,
    })
}

fn canonical_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * max.max(1e-300)) {
        if *first < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    }
}

fn dense_low_eigvecs(lap: &SparseSym, m: usize) -> Vec<Vec<f64>> {
    let dense = lap.to_dense();
    let eig = dense.symmetric_eigen();
    let mut order: Vec<usize> = (0..lap.n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    // order[0] is the constant nullspace mode; skip it.
    order[1..=m]
        .iter()
        .map(|&idx| eig.eigenvectors.column(idx).iter().copied().collect())
        .collect()
}

/// Deflated inverse iteration for the m smallest non-constant eigenpairs.
/// Each inner solve L y = v runs conjugate gradients restricted to the
/// complement of the constant vector and previously found eigenvectors.
fn sparse_low_eigvecs(lap: &SparseSym, m: usize) -> Result<Vec<Vec<f64>>> {
    let n = lap.n;
    let mut found: Vec<DVector<f64>> = Vec::new();

    let project = |x: &mut DVector<f64>, found: &[DVector<f64>]| {
        let mean = x.sum() / n as f64;
        x.add_scalar_mut(-mean);
        for f in found {
            let d = f.dot(x);
            *x -= f * d;
        }
    };

    for k in 0..m {
        // Deterministic start vector, different per k.
        let mut v = DVector::from_fn(n, |i, _| ((i as f64 + 1.0) * (k as f64 + 2.0)).sin());
        project(&mut v, &found);
        let nv = v.norm();
        if nv < 1e-12 {
            v = DVector::from_fn(n, |i, _| (i as f64 * 0.7 + k as f64).cos());
            project(&mut v, &found);
        }
        v /= v.norm();

        let mut residual = f64::INFINITY;
        for _ in 0..MAX_POWER_ITERS {
            let mut y = cg_solve(lap, &v, &found, 4 * n, 1e-14);
            project(&mut y, &found);
            let ny = y.norm();
            if ny < 1e-300 {
                break;
            }
            v = y / ny;
            let mut lv = vec![0.0; n];
            lap.mul_vec(v.as_slice(), &mut lv);
            let lv = DVector::from_vec(lv);
            let lambda = v.dot(&lv);
            residual = (&lv - &v * lambda).norm();
            if residual < EIGEN_TARGET {
                break;
            }
        }
        if residual > EIGEN_TOL {
            return Err(Error::ConvergenceFailure {
                residual,
                iters: MAX_POWER_ITERS,
            });
        }
        found.push(v);
    }
    Ok(found.into_iter().map(|v| v.as_slice().to_vec()).collect())
}

/// CG for L y = b on the subspace orthogonal to {1} ∪ found. L restricted to
/// that subspace is positive definite for a connected mesh.
fn cg_solve(
    lap: &SparseSym,
    b: &DVector<f64>,
    found: &[DVector<f64>],
    max_iters: usize,
    tol: f64,
) -> DVector<f64> {
    let n = lap.n;
    let project = |x: &mut DVector<f64>| {
        let mean = x.sum() / n as f64;
        x.add_scalar_mut(-mean);
        for f in found {
            let d = f.dot(x);
            *x -= f * d;
        }
    };
    let mut b = b.clone();
    project(&mut b);
    let bnorm = b.norm().max(1e-300);

    let mut x = DVector::zeros(n);
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let mut scratch = vec![0.0; n];
    for _ in 0..max_iters {
        if rs.sqrt() <= tol * bnorm {
            break;
        }
        lap.mul_vec(p.as_slice(), &mut scratch);
        let mut ap = DVector::from_column_slice(&scratch);
        project(&mut ap);
        let pap = p.dot(&ap);
        if pap.abs() < 1e-300 {
            break;
        }
        let alpha = rs / pap;
        x += &p * alpha;
        r -= &ap * alpha;
        let rs_new = r.dot(&r);
        let beta = rs_new / rs;
        p = &r + &p * beta;
        rs = rs_new;
    }
    project(&mut x);
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    fn icosahedron() -> TriMesh {
        let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
        let verts = vec![
            Vector3::new(-1.0, phi, 0.0),
            Vector3::new(1.0, phi, 0.0),
            Vector3::new(-1.0, -phi, 0.0),
            Vector3::new(1.0, -phi, 0.0),
            Vector3::new(0.0, -1.0, phi),
            Vector3::new(0.0, 1.0, phi),
            Vector3::new(0.0, -1.0, -phi),
            Vector3::new(0.0, 1.0, -phi),
            Vector3::new(phi, 0.0, -1.0),
            Vector3::new(phi, 0.0, 1.0),
            Vector3::new(-phi, 0.0, -1.0),
            Vector3::new(-phi, 0.0, 1.0),
        ];
        let tris: Vec<[usize; 3]> = vec![
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
        TriMesh::new(verts, tris).unwrap()
    }

    /// Open strip: (len+1) × 2 vertices, 2·len triangles, path-like topology.
    fn strip_mesh(len: usize) -> TriMesh {
        let mut verts = Vec::new();
        for i in 0..=len {
            let x = i as f64 * 0.5;
            verts.push(Vector3::new(x, 0.0, 0.0));
            verts.push(Vector3::new(x, 0.45, 0.02 * (i as f64).sin()));
        }
        let mut tris = Vec::new();
        for i in 0..len {
            let a = 2 * i;
            tris.push([a, a + 2, a + 1]);
            tris.push([a + 1, a + 2, a + 3]);
        }
        TriMesh::new(verts, tris).unwrap()
    }

    #[test]
    fn laplacian_annihilates_constants() {
        let mesh = icosahedron();
        let lap = cotangent_laplacian(&mesh);
        let ones = vec![1.0; lap.n];
        let mut out = vec![0.0; lap.n];
        lap.mul_vec(&ones, &mut out);
        for v in out {
            assert!(v.abs() < 1e-9, "row sum {v}");
        }
    }

    #[test]
    fn laplacian_symmetric() {
        let mesh = strip_mesh(9);
        let d = cotangent_laplacian(&mesh).to_dense();
        assert_relative_eq!(d.clone(), d.transpose(), epsilon = 1e-12);
    }

    #[test]
    fn equilateral_triangle_equal_weights() {
        let mesh = TriMesh::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.5, 3.0f64.sqrt() / 2.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let d = cotangent_laplacian(&mesh).to_dense();
        let w = d[(0, 1)];
        assert_relative_eq!(d[(0, 2)], w, epsilon = 1e-12);
        assert_relative_eq!(d[(1, 2)], w, epsilon = 1e-12);
        // cot(60°)/2 per triangle corner, one triangle only.
        assert_relative_eq!(w, -0.5 / 3.0f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn icosahedron_spectrum_matches_graph_laplacian() {
        // All triangles equilateral, so L = w (D - A) with w = cot(60°) = 1/√3
        // and the icosahedral graph spectrum gives eigenvalues
        // w·{0, 5-√5 (×3), 6 (×5), 5+√5 (×3)}.
        let mesh = icosahedron();
        let lap = cotangent_laplacian(&mesh);
        let eig = lap.to_dense().symmetric_eigen();
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(f64::total_cmp);
        let w = 1.0 / 3.0f64.sqrt();
        let s5 = 5.0f64.sqrt();
        let mut expected = vec![0.0];
        expected.extend(std::iter::repeat(w * (5.0 - s5)).take(3));
        expected.extend(std::iter::repeat(w * 6.0).take(5));
        expected.extend(std::iter::repeat(w * (5.0 + s5)).take(3));
        for (got, want) in vals.iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-6, "eigenvalue {got} vs {want}");
        }
    }

    #[test]
    fn laplacian_positive_semidefinite() {
        for mesh in [icosahedron(), strip_mesh(12)] {
            let eig = cotangent_laplacian(&mesh).to_dense().symmetric_eigen();
            let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
            assert!(min >= -1e-8, "min eigenvalue {min}");
        }
    }

    #[test]
    fn fiedler_vector_monotone_on_strip() {
        let mesh = strip_mesh(24);
        let sc = spectral_coords(&mesh, 1).unwrap();
        // Average the two cross-strip vertices per station; the Fiedler vector
        // of a path-like domain is monotone along it.
        let stations: Vec<f64> = (0..=24)
            .map(|i| (sc.vertex(2 * i)[0] + sc.vertex(2 * i + 1)[0]) / 2.0)
            .collect();
        let increasing = stations.windows(2).all(|w| w[1] >= w[0] - 1e-9);
        let decreasing = stations.windows(2).all(|w| w[1] <= w[0] + 1e-9);
        assert!(
            increasing || decreasing,
            "Fiedler vector not monotone: {stations:?}"
        );
    }

    #[test]
    fn coords_orthogonal_normalized_residual() {
        let mesh = icosahedron();
        let m = 4;
        let sc = spectral_coords(&mesh, m).unwrap();
        let n = mesh.n_vertices();
        let lap = cotangent_laplacian(&mesh);
        for a in 0..m {
            let col_a: Vec<f64> = (0..n).map(|i| sc.coords[i * m + a]).collect();
            let norm_a = col_a.iter().map(|x| x * x).sum::<f64>().sqrt();
            // Orthogonal to constant.
            let mean: f64 = col_a.iter().sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-6 * norm_a);
            // Rescaled to max amplitude 1.
            let max = col_a.iter().fold(0.0f64, |x, &y| x.max(y.abs()));
            assert_relative_eq!(max, 1.0, epsilon = 1e-12);
            // Residual of the eigen-equation with the Rayleigh quotient.
            let mut lv = vec![0.0; n];
            lap.mul_vec(&col_a, &mut lv);
            let lambda = col_a
                .iter()
                .zip(lv.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / (norm_a * norm_a);
            let res: f64 = col_a
                .iter()
                .zip(lv.iter())
                .map(|(v, l)| (l - lambda * v) * (l - lambda * v))
                .sum::<f64>()
                .sqrt()
                / norm_a;
            assert!(res < 1e-6, "residual {res}");
            for b in (a + 1)..m {
                let col_b: Vec<f64> = (0..n).map(|i| sc.coords[i * m + b]).collect();
                let norm_b = col_b.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = col_a.iter().zip(col_b.iter()).map(|(x, y)| x * y).sum();
                assert!(
                    dot.abs() < 1e-5 * norm_a * norm_b,
                    "columns {a},{b} not orthogonal: {dot}"
                );
            }
        }
    }

    #[test]
    fn deterministic_across_calls() {
        let mesh = strip_mesh(20);
        let a = spectral_coords(&mesh, 3).unwrap();
        let b = spectral_coords(&mesh, 3).unwrap();
        assert_eq!(a.coords.len(), b.coords.len());
        for (x, y) in a.coords.iter().zip(b.coords.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn sparse_path_matches_dense_oracle() {
        // 301 stations × 2 = 602 vertices: above DENSE_LIMIT, irregular
        // geometry so the low spectrum is simple.
        let mesh = strip_mesh(300);
        assert!(mesh.n_vertices() > DENSE_LIMIT);
        let m = 3;
        let sc = spectral_coords(&mesh, m).unwrap();

        let lap = cotangent_laplacian(&mesh);
        let dense = dense_low_eigvecs(&lap, m);
        let n = mesh.n_vertices();
        for k in 0..m {
            let got: Vec<f64> = (0..n).map(|i| sc.coords[i * m + k]).collect();
            let mut want = dense[k].clone();
            canonical_sign(&mut want);
            let max = want.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            for x in &mut want {
                *x /= max;
            }
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-5, "column {k}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn dense_brute_force_agreement_small_meshes() {
        // Direct comparison against an independently assembled dense matrix
        // fed to the dense symmetric eigensolver.
        let mesh = strip_mesh(40); // 82 vertices
        let m = 3;
        let sc = spectral_coords(&mesh, m).unwrap();
        let n = mesh.n_vertices();

        // Brute-force Laplacian assembly: dense accumulation, no sparsity.
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for tri in &mesh.triangles {
            let v = [
                mesh.rest_vertices[tri[0]],
                mesh.rest_vertices[tri[1]],
                mesh.rest_vertices[tri[2]],
            ];
            for c in 0..3 {
                let a = (c + 1) % 3;
                let b = (c + 2) % 3;
                let e1 = v[a] - v[c];
                let e2 = v[b] - v[c];
                let cot = (e1.dot(&e2) / e1.cross(&e2).norm()).clamp(-COT_CLAMP, COT_CLAMP);
                let w = 0.5 * cot;
                dense[(tri[a], tri[b])] -= w;
                dense[(tri[b], tri[a])] -= w;
                dense[(tri[a], tri[a])] += w;
                dense[(tri[b], tri[b])] += w;
            }
        }
        let eig = dense.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        for k in 0..m {
            let col = eig.eigenvectors.column(order[k + 1]);
            let mut want: Vec<f64> = col.iter().copied().collect();
            canonical_sign(&mut want);
            let max = want.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            for x in &mut want {
                *x /= max;
            }
            for i in 0..n {
                let g = sc.coords[i * m + k];
                assert!((g - want[i]).abs() < 1e-5, "k={k} i={i}: {g} vs {}", want[i]);
            }
        }
    }
}
