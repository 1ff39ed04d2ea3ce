//! Finite-element matrices for linear elements on a triangulation.
//!
//! For each triangle with vertices p0, p1, p2 and opposite edge vectors
//! e_i = p_{i+2} - p_{i+1} (cyclic), the element stiffness is
//! (e_i . e_j) / (4 A) and the lumped mass puts A/3 on each vertex.

use crate::error::{CoreError, Result};
use crate::mesh::SpdeMesh;
use crate::sparse::SparseSym;

/// Lumped mass diagonal (node areas) and stiffness matrix.
pub fn fem_matrices(mesh: &SpdeMesh) -> Result<(Vec<f64>, SparseSym)> {
    let n = mesh.n_nodes();
    let mut c = vec![0.0f64; n];
    let mut trips: Vec<(usize, usize, f64)> = Vec::with_capacity(9 * mesh.n_triangles());
    for (k, t) in mesh.triangles().iter().enumerate() {
        let p = [&mesh.nodes()[t[0]], &mesh.nodes()[t[1]], &mesh.nodes()[t[2]]];
        let e = [
            (p[2].x_km - p[1].x_km, p[2].y_km - p[1].y_km),
            (p[0].x_km - p[2].x_km, p[0].y_km - p[2].y_km),
            (p[1].x_km - p[0].x_km, p[1].y_km - p[0].y_km),
        ];
        let area = 0.5 * (e[2].0 * (-e[1].1) - e[2].1 * (-e[1].0)).abs();
        if area <= 1e-12 {
            return Err(CoreError::invalid(format!("triangle {k} is degenerate")));
        }
        for i in 0..3 {
            c[t[i]] += area / 3.0;
            for j in 0..3 {
                let g = (e[i].0 * e[j].0 + e[i].1 * e[j].1) / (4.0 * area);
                trips.push((t[i], t[j], g));
            }
        }
    }
    let g = SparseSym::from_triplets(n, &trips)?;
    Ok((c, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::KmPoint;
    use approx::assert_relative_eq;

    fn km(x: f64, y: f64) -> KmPoint {
        KmPoint { x_km: x, y_km: y }
    }

    #[test]
    fn unit_right_triangle_exact() {
        let mesh = SpdeMesh::from_parts(
            vec![km(0.0, 0.0), km(1.0, 0.0), km(0.0, 1.0)],
            vec![[0, 1, 2]],
            vec![true; 3],
        )
        .unwrap();
        let (c, g) = fem_matrices(&mesh).unwrap();
        // All quantities are exactly representable, so compare bitwise.
        assert_eq!(c, vec![1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0]);
        let expect = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g.get(i, j), expect[i][j], "G[{i}][{j}]");
            }
        }
    }

    #[test]
    fn stiffness_annihilates_constants() {
        let mesh = SpdeMesh::regular(7, 6, -3.0, 2.0, 11.0, 9.0).unwrap();
        let (_, g) = fem_matrices(&mesh).unwrap();
        let ones = vec![1.0; mesh.n_nodes()];
        for v in g.mul_vec(&ones) {
            assert!(v.abs() < 1e-12, "G.1 component {v}");
        }
    }

    #[test]
    fn mass_sums_to_total_area() {
        let mesh = SpdeMesh::regular(9, 5, 0.0, 0.0, 16.0, 6.0).unwrap();
        let (c, _) = fem_matrices(&mesh).unwrap();
        assert!(c.iter().all(|&v| v > 0.0));
        assert_relative_eq!(c.iter().sum::<f64>(), 16.0 * 6.0, epsilon = 1e-9);
    }

    #[test]
    fn stiffness_symmetric_with_adjacency_pattern() {
        let mesh = SpdeMesh::regular(5, 5, 0.0, 0.0, 4.0, 4.0).unwrap();
        let (_, g) = fem_matrices(&mesh).unwrap();
        // Symmetry.
        for i in 0..mesh.n_nodes() {
            for j in 0..mesh.n_nodes() {
                assert_relative_eq!(g.get(i, j), g.get(j, i), epsilon = 1e-12);
            }
        }
        // Pattern = node adjacency: nonzero only for nodes sharing a triangle.
        let mut adjacent = vec![vec![false; mesh.n_nodes()]; mesh.n_nodes()];
        for t in mesh.triangles() {
            for &a in t {
                for &b in t {
                    adjacent[a][b] = true;
                }
            }
        }
        for i in 0..mesh.n_nodes() {
            for j in 0..mesh.n_nodes() {
                if g.get(i, j) != 0.0 {
                    assert!(adjacent[i][j], "G[{i}][{j}] nonzero but not adjacent");
                }
            }
        }
    }
}
