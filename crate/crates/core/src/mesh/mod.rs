//! Conforming simplicial meshes of the unit d-cube, d = 1, 2, 3.
//!
//! The initial mesh is the Kuhn/Freudenthal subdivision of a uniform lattice
//! (d! simplices per cell, all sharing the cell diagonal). Uniform refinement
//! is red refinement (octasection in 3d, with the interior diagonal fixed to
//! the shortest one), adaptive refinement is Maubach-style newest-vertex
//! bisection with conforming closure. Element vertex tuples are kept in the
//! Maubach path order so that bisection stays compatible across refinements.

mod refine;

pub use refine::Prolongation;

use crate::{Error, Result};
use std::collections::HashMap;
use std::io::Write;

/// Tolerance for detecting vertices on the boundary of the unit cube.
pub const BOUNDARY_TOL: f64 = 1e-14;

/// A conforming simplicial mesh of `[0,1]^d` with refinement history.
#[derive(Debug, Clone)]
pub struct Mesh {
    dim: usize,
    /// Vertex coordinates, `dim` entries per vertex.
    vertices: Vec<f64>,
    /// Element vertex indices, `dim + 1` entries per element, Maubach order.
    elements: Vec<u32>,
    boundary_vertex: Vec<bool>,
    /// Refinement depth of each element (0 on the initial mesh).
    element_generation: Vec<u32>,
    /// Maubach tag in `1..=dim`; the refinement edge of element `e` connects
    /// its local vertices `0` and `tag(e)`.
    refinement_tag: Vec<u8>,
}

impl Mesh {
    /// Builds the Kuhn/Freudenthal triangulation of the unit cube with `n`
    /// cells per axis: `(n+1)^d` lattice vertices and `d! * n^d` simplices.
    pub fn unit_cube(n: usize, dim: usize) -> Result<Mesh> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidParameter(format!(
                "dimension must be 1, 2 or 3, got {dim}"
            )));
        }
        if n == 0 {
            return Err(Error::InvalidParameter("cells per axis must be >= 1".into()));
        }
        let nv_axis = n + 1;
        let n_vertices = nv_axis.pow(dim as u32);
        if n_vertices > u32::MAX as usize {
            return Err(Error::InvalidParameter(format!(
                "lattice with {n_vertices} vertices exceeds index range"
            )));
        }

        let mut vertices = Vec::with_capacity(n_vertices * dim);
        let h = 1.0 / n as f64;
        let mut idx = vec![0usize; dim];
        for flat in 0..n_vertices {
            let mut rest = flat;
            for k in 0..dim {
                idx[k] = rest % nv_axis;
                rest /= nv_axis;
            }
            for k in 0..dim {
                vertices.push(idx[k] as f64 * h);
            }
        }

        let lattice = |ijk: &[usize]| -> u32 {
            let mut flat = 0usize;
            for k in (0..dim).rev() {
                flat = flat * nv_axis + ijk[k];
            }
            flat as u32
        };

        let perms = permutations(dim);
        let n_elements = perms.len() * n.pow(dim as u32);
        let mut elements = Vec::with_capacity(n_elements * (dim + 1));
        let mut cell = vec![0usize; dim];
        for flat in 0..n.pow(dim as u32) {
            let mut rest = flat;
            for k in 0..dim {
                cell[k] = rest % n;
                rest /= n;
            }
            for perm in &perms {
                // Path from the cell corner to the opposite corner, one axis
                // per step: the Kuhn simplex for this permutation.
                let mut corner = cell.clone();
                elements.push(lattice(&corner));
                for &axis in perm {
                    corner[axis] += 1;
                    elements.push(lattice(&corner));
                }
            }
        }

        let boundary_vertex = boundary_flags(&vertices, dim);
        Ok(Mesh {
            dim,
            vertices,
            elements,
            boundary_vertex,
            element_generation: vec![0; n_elements],
            refinement_tag: vec![dim as u8; n_elements],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len() / self.dim
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len() / (self.dim + 1)
    }

    pub fn vertex(&self, v: usize) -> &[f64] {
        &self.vertices[v * self.dim..(v + 1) * self.dim]
    }

    pub fn element(&self, e: usize) -> &[u32] {
        &self.elements[e * (self.dim + 1)..(e + 1) * (self.dim + 1)]
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.boundary_vertex[v]
    }

    pub fn element_generation(&self, e: usize) -> u32 {
        self.element_generation[e]
    }

    /// Local vertex pair forming the refinement edge of element `e`.
    pub fn refinement_edge(&self, e: usize) -> (usize, usize) {
        (0, self.refinement_tag[e] as usize)
    }

    /// Element diameter `h_tau` (longest edge).
    pub fn element_size(&self, e: usize) -> f64 {
        let verts = self.element(e);
        let mut h2: f64 = 0.0;
        for i in 0..verts.len() {
            for j in i + 1..verts.len() {
                let a = self.vertex(verts[i] as usize);
                let b = self.vertex(verts[j] as usize);
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                h2 = h2.max(d2);
            }
        }
        h2.sqrt()
    }

    pub fn element_volume(&self, e: usize) -> f64 {
        let verts = self.element(e);
        let mut coords = [[0.0f64; 3]; 4];
        for (k, &v) in verts.iter().enumerate() {
            coords[k][..self.dim].copy_from_slice(self.vertex(v as usize));
        }
        simplex_volume(self.dim, &coords[..verts.len()])
    }

    /// Kahan-compensated volume sum; plain accumulation drifts above 1e-12
    /// on meshes with millions of elements.
    pub fn total_volume(&self) -> f64 {
        let mut sum = 0.0f64;
        let mut carry = 0.0f64;
        for e in 0..self.n_elements() {
            let value = self.element_volume(e) - carry;
            let next = sum + value;
            carry = (next - sum) - value;
            sum = next;
        }
        sum
    }

    /// All element diameters; the mesh-adapted regularization is built on these.
    pub fn element_sizes(&self) -> Vec<f64> {
        (0..self.n_elements()).map(|e| self.element_size(e)).collect()
    }

    /// Uniform red refinement: every simplex is replaced by `2^d` children.
    pub fn refine_uniform(&self) -> (Mesh, Prolongation) {
        refine::refine_uniform(self)
    }

    /// Newest-vertex bisection of the `marked` elements plus the conforming
    /// closure. An empty marked set returns a copy of the mesh with the
    /// identity prolongation.
    pub fn refine_adaptive(&self, marked: &[usize]) -> Result<(Mesh, Prolongation)> {
        refine::refine_adaptive(self, marked)
    }

    /// Vertex -> incident elements adjacency in CSR layout.
    pub fn vertex_to_elements(&self) -> (Vec<usize>, Vec<u32>) {
        let nv = self.n_vertices();
        let mut counts = vec![0usize; nv + 1];
        for &v in &self.elements {
            counts[v as usize + 1] += 1;
        }
        for i in 0..nv {
            counts[i + 1] += counts[i];
        }
        let mut entries = vec![0u32; self.elements.len()];
        let mut cursor = counts.clone();
        for (e, verts) in self.elements.chunks(self.dim + 1).enumerate() {
            for &v in verts {
                entries[cursor[v as usize]] = e as u32;
                cursor[v as usize] += 1;
            }
        }
        (counts, entries)
    }

    /// Structural conformity check: every (d-1)-face is shared by exactly two
    /// elements or lies on the boundary of the cube, volumes are positive and
    /// sum to the domain measure.
    pub fn check_conforming(&self) -> Result<()> {
        let d = self.dim;
        for e in 0..self.n_elements() {
            let vol = self.element_volume(e);
            if !(vol > 0.0) {
                return Err(Error::Mesh(format!("element {e} has volume {vol:.3e}")));
            }
        }
        let vol_sum = self.total_volume();
        if (vol_sum - 1.0).abs() > 1e-12 {
            return Err(Error::Mesh(format!(
                "element volumes sum to {vol_sum:.15} instead of 1"
            )));
        }

        let mut faces: HashMap<[u32; 3], u32> = HashMap::new();
        for e in 0..self.n_elements() {
            let verts = self.element(e);
            // a (d-1)-face is the element with one vertex dropped
            for skip in 0..verts.len() {
                let mut face = [u32::MAX; 3];
                let mut k = 0;
                for (i, &v) in verts.iter().enumerate() {
                    if i != skip {
                        face[k] = v;
                        k += 1;
                    }
                }
                face[..d].sort_unstable();
                *faces.entry(face).or_insert(0) += 1;
            }
        }
        for (face, count) in &faces {
            match count {
                1 => {
                    if !self.is_boundary_face(&face[..d]) {
                        return Err(Error::Mesh(format!(
                            "interior face {:?} has a single owner (hanging node)",
                            &face[..d]
                        )));
                    }
                }
                2 => {}
                _ => {
                    return Err(Error::Mesh(format!(
                        "face {:?} shared by {count} elements",
                        &face[..d]
                    )));
                }
            }
        }
        Ok(())
    }

    /// True iff all given vertices lie on a common axis-aligned face of the cube.
    fn is_boundary_face(&self, face: &[u32]) -> bool {
        for axis in 0..self.dim {
            for value in [0.0, 1.0] {
                if face
                    .iter()
                    .all(|&v| (self.vertex(v as usize)[axis] - value).abs() <= 1e-12)
                {
                    return true;
                }
            }
        }
        false
    }

    /// Plain-text dump: header `dim nv ne`, vertex coordinate lines, element
    /// index lines (0-based). Debug/golden-test format.
    pub fn write_text<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{} {} {}", self.dim, self.n_vertices(), self.n_elements())?;
        for v in 0..self.n_vertices() {
            let coords: Vec<String> = self.vertex(v).iter().map(|x| format!("{x:.17}")).collect();
            writeln!(out, "{}", coords.join(" "))?;
        }
        for e in 0..self.n_elements() {
            let ids: Vec<String> = self.element(e).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", ids.join(" "))?;
        }
        Ok(())
    }

    pub(crate) fn from_parts(
        dim: usize,
        vertices: Vec<f64>,
        elements: Vec<u32>,
        boundary_vertex: Vec<bool>,
        element_generation: Vec<u32>,
        refinement_tag: Vec<u8>,
    ) -> Mesh {
        Mesh {
            dim,
            vertices,
            elements,
            boundary_vertex,
            element_generation,
            refinement_tag,
        }
    }

    pub(crate) fn vertices_flat(&self) -> &[f64] {
        &self.vertices
    }

    pub(crate) fn elements_flat(&self) -> &[u32] {
        &self.elements
    }

    pub(crate) fn boundary_flags(&self) -> &[bool] {
        &self.boundary_vertex
    }

    pub(crate) fn generations(&self) -> &[u32] {
        &self.element_generation
    }

    pub(crate) fn tags(&self) -> &[u8] {
        &self.refinement_tag
    }
}

/// Dörfler (bulk) marking: smallest index set carrying a `theta` fraction of
/// the squared indicators, greedy by descending indicator, ties broken by
/// lower element index. Returns ascending element indices.
pub fn mark_doerfler(indicators: &[f64], theta: f64) -> Result<Vec<usize>> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "Doerfler fraction must lie in (0,1], got {theta}"
        )));
    }
    if indicators.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "error indicators must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = indicators.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..indicators.len()).collect();
    order.sort_by(|&a, &b| {
        indicators[b]
            .partial_cmp(&indicators[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let target = theta * total;
    let mut acc = 0.0;
    let mut selected = Vec::new();
    for &idx in &order {
        selected.push(idx);
        acc += indicators[idx] * indicators[idx];
        if acc >= target {
            break;
        }
    }
    selected.sort_unstable();
    Ok(selected)
}

/// Lexicographically ordered permutations of `0..d`.
fn permutations(d: usize) -> Vec<Vec<usize>> {
    match d {
        1 => vec![vec![0]],
        2 => vec![vec![0, 1], vec![1, 0]],
        3 => vec![
            vec![0, 1, 2],
            vec![0, 2, 1],
            vec![1, 0, 2],
            vec![1, 2, 0],
            vec![2, 0, 1],
            vec![2, 1, 0],
        ],
        _ => unreachable!("dimension checked on construction"),
    }
}

pub(crate) fn boundary_flags(vertices: &[f64], dim: usize) -> Vec<bool> {
    vertices
        .chunks(dim)
        .map(|coords| {
            coords
                .iter()
                .any(|&x| x.abs() <= BOUNDARY_TOL || (x - 1.0).abs() <= BOUNDARY_TOL)
        })
        .collect()
}

pub(crate) fn is_boundary_point(coords: &[f64]) -> bool {
    coords
        .iter()
        .any(|&x| x.abs() <= BOUNDARY_TOL || (x - 1.0).abs() <= BOUNDARY_TOL)
}

/// Unsigned volume of a d-simplex, |det J| / d!.
pub(crate) fn simplex_volume(dim: usize, coords: &[[f64; 3]]) -> f64 {
    match dim {
        1 => (coords[1][0] - coords[0][0]).abs(),
        2 => {
            let ax = coords[1][0] - coords[0][0];
            let ay = coords[1][1] - coords[0][1];
            let bx = coords[2][0] - coords[0][0];
            let by = coords[2][1] - coords[0][1];
            (ax * by - ay * bx).abs() / 2.0
        }
        3 => {
            let mut m = [[0.0f64; 3]; 3];
            for i in 0..3 {
                for k in 0..3 {
                    m[i][k] = coords[i + 1][k] - coords[0][k];
                }
            }
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            det.abs() / 6.0
        }
        _ => unreachable!(),
    }
}
