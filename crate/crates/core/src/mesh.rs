//! Triangulations for the finite-element field representation.
//!
//! Meshes are structured: a uniform node lattice over the outer boundary's
//! bounding box, each cell split into two triangles with a consistent
//! diagonal. For a lattice this is a valid Delaunay tessellation (all four
//! cell corners are cocircular, so either diagonal is admissible), it is
//! conforming by construction, and point location is O(1). The edge-length
//! parameter controls the lattice pitch; cell diagonals exceed it by sqrt(2).

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::geo::KmPoint;

/// Simple (non-self-intersecting) closed polygon in km coordinates.
#[derive(Debug, Clone)]
pub struct Polygon {
    vertices: Vec<KmPoint>,
}

fn orient(a: &KmPoint, b: &KmPoint, c: &KmPoint) -> f64 {
    (b.x_km - a.x_km) * (c.y_km - a.y_km) - (b.y_km - a.y_km) * (c.x_km - a.x_km)
}

fn on_segment(a: &KmPoint, b: &KmPoint, p: &KmPoint, eps: f64) -> bool {
    let cross = orient(a, b, p);
    let len = a.dist(b).max(1e-300);
    if cross.abs() / len > eps {
        return false;
    }
    let dot = (p.x_km - a.x_km) * (b.x_km - a.x_km) + (p.y_km - a.y_km) * (b.y_km - a.y_km);
    dot >= -eps * len && dot <= len * len + eps * len
}

fn segments_cross(a: &KmPoint, b: &KmPoint, c: &KmPoint, d: &KmPoint) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

impl Polygon {
    pub fn new(vertices: Vec<KmPoint>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(CoreError::invalid(format!(
                "polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        let n = vertices.len();
        for i in 0..n {
            for j in 0..n {
                // Non-adjacent edge pairs must not cross.
                if j == i || (j + 1) % n == i || (i + 1) % n == j {
                    continue;
                }
                let (a, b) = (&vertices[i], &vertices[(i + 1) % n]);
                let (c, d) = (&vertices[j], &vertices[(j + 1) % n]);
                if segments_cross(a, b, c, d) {
                    return Err(CoreError::invalid(format!(
                        "polygon self-intersects: edge {i} crosses edge {j}"
                    )));
                }
            }
        }
        Ok(Polygon { vertices })
    }

    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x1 > x0 && y1 > y0) {
            return Err(CoreError::invalid(format!(
                "degenerate rectangle [{x0},{x1}]x[{y0},{y1}]"
            )));
        }
        Polygon::new(vec![
            KmPoint { x_km: x0, y_km: y0 },
            KmPoint { x_km: x1, y_km: y0 },
            KmPoint { x_km: x1, y_km: y1 },
            KmPoint { x_km: x0, y_km: y1 },
        ])
    }

    pub fn vertices(&self) -> &[KmPoint] {
        &self.vertices
    }

    /// (x_min, y_min, x_max, y_max).
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            b.0 = b.0.min(v.x_km);
            b.1 = b.1.min(v.y_km);
            b.2 = b.2.max(v.x_km);
            b.3 = b.3.max(v.y_km);
        }
        b
    }

    /// Ray-casting containment; boundary points count as inside.
    pub fn contains(&self, p: &KmPoint) -> bool {
        let n = self.vertices.len();
        let eps = 1e-9;
        for i in 0..n {
            if on_segment(&self.vertices[i], &self.vertices[(i + 1) % n], p, eps) {
                return true;
            }
        }
        let mut inside = false;
        for i in 0..n {
            let a = &self.vertices[i];
            let b = &self.vertices[(i + 1) % n];
            if (a.y_km > p.y_km) != (b.y_km > p.y_km) {
                let x_cross = a.x_km + (p.y_km - a.y_km) / (b.y_km - a.y_km) * (b.x_km - a.x_km);
                if p.x_km < x_cross {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

#[derive(Debug, Clone, Copy)]
struct Lattice {
    nx: usize,
    ny: usize,
    x0: f64,
    y0: f64,
    dx: f64,
    dy: f64,
}

/// Triangulation with linear (hat-function) elements.
#[derive(Debug, Clone)]
pub struct SpdeMesh {
    nodes: Vec<KmPoint>,
    triangles: Vec<[usize; 3]>,
    /// true = study-area node, false = extension node.
    study: Vec<bool>,
    lattice: Option<Lattice>,
}

impl SpdeMesh {
    /// Uniform nx x ny node lattice over [x0, x0+width] x [y0, y0+height];
    /// all nodes flagged study-area.
    pub fn regular(nx: usize, ny: usize, x0: f64, y0: f64, width: f64, height: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(CoreError::invalid(format!(
                "lattice needs at least 2x2 nodes, got {nx}x{ny}"
            )));
        }
        if !(width > 0.0 && height > 0.0) {
            return Err(CoreError::invalid(format!(
                "degenerate lattice extent {width}x{height}"
            )));
        }
        let dx = width / (nx - 1) as f64;
        let dy = height / (ny - 1) as f64;
        let mut nodes = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                nodes.push(KmPoint {
                    x_km: x0 + i as f64 * dx,
                    y_km: y0 + j as f64 * dy,
                });
            }
        }
        let mut triangles = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let a = j * nx + i;
                let b = j * nx + i + 1;
                let c = (j + 1) * nx + i;
                let d = (j + 1) * nx + i + 1;
                triangles.push([a, b, d]);
                triangles.push([a, d, c]);
            }
        }
        let study = vec![true; nodes.len()];
        Ok(SpdeMesh {
            nodes,
            triangles,
            study,
            lattice: Some(Lattice { nx, ny, x0, y0, dx, dy }),
        })
    }

    /// Mesh for a data window: lattice over the outer boundary's bounding
    /// box at the study-area pitch, study flags from the inner boundary.
    /// The extension pitch acts as a cap (the mesh is uniform; conforming
    /// transitions between pitches are not worth their complexity here).
    pub fn build(
        sites: &[KmPoint],
        inner: &Polygon,
        outer: &Polygon,
        max_edge_study: f64,
        max_edge_ext: f64,
    ) -> Result<Self> {
        if !(max_edge_study > 0.0 && max_edge_ext > 0.0) {
            return Err(CoreError::invalid(
                "edge-length bounds must be positive".to_string(),
            ));
        }
        for v in inner.vertices() {
            if !outer.contains(v) {
                return Err(CoreError::invalid(
                    "outer boundary does not contain the inner boundary".to_string(),
                ));
            }
        }
        let (x0, y0, x1, y1) = outer.bbox();
        let h = max_edge_study.min(max_edge_ext);
        let (w, ht) = (x1 - x0, y1 - y0);
        if !(w > 0.0 && ht > 0.0) {
            return Err(CoreError::invalid("outer boundary has zero area".to_string()));
        }
        let nx = ((w / h).ceil() as usize + 1).max(2);
        let ny = ((ht / h).ceil() as usize + 1).max(2);
        let mut mesh = SpdeMesh::regular(nx, ny, x0, y0, w, ht)?;
        for (k, node) in mesh.nodes.iter().enumerate() {
            mesh.study[k] = inner.contains(node);
        }
        for (i, s) in sites.iter().enumerate() {
            if mesh.locate(s).is_err() {
                return Err(CoreError::invalid(format!(
                    "site {i} at ({:.2}, {:.2}) falls outside the mesh domain",
                    s.x_km, s.y_km
                )));
            }
        }
        Ok(mesh)
    }

    /// Arbitrary node/triangle mesh (tests, reorder checks). Point location
    /// falls back to a linear scan.
    pub fn from_parts(nodes: Vec<KmPoint>, triangles: Vec<[usize; 3]>, study: Vec<bool>) -> Result<Self> {
        if study.len() != nodes.len() {
            return Err(CoreError::dimension(format!(
                "{} study flags for {} nodes",
                study.len(),
                nodes.len()
            )));
        }
        for (k, t) in triangles.iter().enumerate() {
            for &v in t {
                if v >= nodes.len() {
                    return Err(CoreError::invalid(format!(
                        "triangle {k} references node {v} of {}",
                        nodes.len()
                    )));
                }
            }
            let area = 0.5 * orient(&nodes[t[0]], &nodes[t[1]], &nodes[t[2]]).abs();
            if area <= 1e-12 {
                return Err(CoreError::invalid(format!("triangle {k} is degenerate")));
            }
        }
        Ok(SpdeMesh {
            nodes,
            triangles,
            study,
            lattice: None,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn nodes(&self) -> &[KmPoint] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn is_study(&self, node: usize) -> bool {
        self.study[node]
    }

    pub fn n_study(&self) -> usize {
        self.study.iter().filter(|&&s| s).count()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        0.5 * orient(&self.nodes[a], &self.nodes[b], &self.nodes[c]).abs()
    }

    /// Containing triangle and barycentric weights for a point; error when
    /// the point lies outside the mesh.
    pub fn locate(&self, p: &KmPoint) -> Result<(usize, [(usize, f64); 3])> {
        match self.lattice {
            Some(l) => self.locate_lattice(&l, p),
            None => self.locate_scan(p),
        }
    }

    fn locate_lattice(&self, l: &Lattice, p: &KmPoint) -> Result<(usize, [(usize, f64); 3])> {
        let (w, h) = ((l.nx - 1) as f64 * l.dx, (l.ny - 1) as f64 * l.dy);
        let ex = 1e-9 * (w + 1.0);
        let ey = 1e-9 * (h + 1.0);
        if p.x_km < l.x0 - ex
            || p.x_km > l.x0 + w + ex
            || p.y_km < l.y0 - ey
            || p.y_km > l.y0 + h + ey
        {
            return Err(CoreError::invalid(format!(
                "point ({:.3}, {:.3}) lies outside the mesh hull",
                p.x_km, p.y_km
            )));
        }
        let fx = ((p.x_km - l.x0) / l.dx).clamp(0.0, (l.nx - 1) as f64);
        let fy = ((p.y_km - l.y0) / l.dy).clamp(0.0, (l.ny - 1) as f64);
        let ix = (fx.floor() as usize).min(l.nx - 2);
        let iy = (fy.floor() as usize).min(l.ny - 2);
        let u = (fx - ix as f64).clamp(0.0, 1.0);
        let v = (fy - iy as f64).clamp(0.0, 1.0);
        let a = iy * l.nx + ix;
        let b = a + 1;
        let c = a + l.nx;
        let d = c + 1;
        let cell = iy * (l.nx - 1) + ix;
        if u >= v {
            // Lower-right triangle (a, b, d): weights sum to one exactly.
            Ok((2 * cell, [(a, 1.0 - u), (b, u - v), (d, v)]))
        } else {
            Ok((2 * cell + 1, [(a, 1.0 - v), (d, u), (c, v - u)]))
        }
    }

    fn locate_scan(&self, p: &KmPoint) -> Result<(usize, [(usize, f64); 3])> {
        for (k, t) in self.triangles.iter().enumerate() {
            let (pa, pb, pc) = (&self.nodes[t[0]], &self.nodes[t[1]], &self.nodes[t[2]]);
            let denom = orient(pa, pb, pc);
            let wa = orient(p, pb, pc) / denom;
            let wb = orient(pa, p, pc) / denom;
            let wc = 1.0 - wa - wb;
            let tol = -1e-9;
            if wa >= tol && wb >= tol && wc >= tol {
                return Ok((
                    k,
                    [
                        (t[0], wa.max(0.0)),
                        (t[1], wb.max(0.0)),
                        (t[2], wc.max(0.0)),
                    ],
                ));
            }
        }
        Err(CoreError::invalid(format!(
            "point ({:.3}, {:.3}) lies outside the mesh hull",
            p.x_km, p.y_km
        )))
    }

    /// Plain-text export: node block (x y study), then triangle block.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# nodes {}", self.nodes.len())?;
        for (k, n) in self.nodes.iter().enumerate() {
            writeln!(w, "{} {} {}", n.x_km, n.y_km, u8::from(self.study[k]))?;
        }
        writeln!(w, "# triangles {}", self.triangles.len())?;
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        w.flush()?;
        Ok(())
    }
}
