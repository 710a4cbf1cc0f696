//! P1 finite element assembly on simplicial meshes.
//!
//! Stiffness matrices take a per-element diffusion coefficient (the
//! regularization `rho`), mass matrices are integrated exactly, and the
//! discontinuous box target is handled by exact simplex/box clipping rather
//! than quadrature, so the convergence studies are not polluted by
//! integration error. Dirichlet conditions are imposed by eliminating
//! boundary vertices from the assembled systems.

mod clip;

use crate::linalg::{block_sum, CsrMatrix, DiagonalMatrix};
use crate::mesh::{simplex_volume, Mesh, Prolongation};
use crate::{Error, Result};
use rayon::prelude::*;

/// Elements per work chunk in parallel assembly loops.
const CHUNK: usize = 16_384;

/// Map between mesh vertices and free (non-Dirichlet) degrees of freedom.
#[derive(Debug, Clone)]
pub struct DofMap {
    n_vertices: usize,
    free: Vec<u32>,
    full_to_free: Vec<Option<u32>>,
}

impl DofMap {
    /// Eliminates every boundary vertex (homogeneous Dirichlet conditions).
    pub fn with_dirichlet(mesh: &Mesh) -> DofMap {
        let n = mesh.n_vertices();
        let mut free = Vec::new();
        let mut full_to_free = vec![None; n];
        for v in 0..n {
            if !mesh.is_boundary_vertex(v) {
                full_to_free[v] = Some(free.len() as u32);
                free.push(v as u32);
            }
        }
        DofMap {
            n_vertices: n,
            free,
            full_to_free,
        }
    }

    /// Keeps every vertex; used for whole-space checks (kernel of the
    /// stiffness matrix, partition of unity of the mass matrix).
    pub fn all_free(mesh: &Mesh) -> DofMap {
        let n = mesh.n_vertices();
        DofMap {
            n_vertices: n,
            free: (0..n as u32).collect(),
            full_to_free: (0..n as u32).map(Some).collect(),
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    pub fn free(&self) -> &[u32] {
        &self.free
    }

    pub fn free_index(&self, vertex: u32) -> Option<u32> {
        self.full_to_free[vertex as usize]
    }

    /// Scatters a free-dof vector into a full vertex vector, zero on the
    /// eliminated (boundary) vertices.
    pub fn expand(&self, free_values: &[f64]) -> Vec<f64> {
        assert_eq!(free_values.len(), self.free.len(), "free vector length");
        let mut full = vec![0.0; self.n_vertices];
        for (k, &v) in self.free.iter().enumerate() {
            full[v as usize] = free_values[k];
        }
        full
    }

    pub fn restrict(&self, full_values: &[f64]) -> Vec<f64> {
        assert_eq!(full_values.len(), self.n_vertices, "full vector length");
        self.free.iter().map(|&v| full_values[v as usize]).collect()
    }
}

/// The discontinuous desired state: `inside_value` on an axis-aligned box,
/// `outside_value` elsewhere.
#[derive(Debug, Clone)]
pub struct BoxTarget {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub inside_value: f64,
    pub outside_value: f64,
}

impl BoxTarget {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<BoxTarget> {
        if lower.len() != upper.len() || lower.is_empty() || lower.len() > 3 {
            return Err(Error::InvalidParameter("box dimension must be 1..=3".into()));
        }
        for (l, u) in lower.iter().zip(&upper) {
            if !(l < u) || *l < 0.0 || *u > 1.0 {
                return Err(Error::InvalidParameter(format!(
                    "box [{l}, {u}] must be nondegenerate and inside [0,1]"
                )));
            }
        }
        Ok(BoxTarget {
            lower,
            upper,
            inside_value: 1.0,
            outside_value: 0.0,
        })
    }

    /// `y_d = 1` on `(0.25, 0.75)^d`, zero elsewhere.
    pub fn centered_box(dim: usize) -> BoxTarget {
        BoxTarget::new(vec![0.25; dim], vec![0.75; dim]).expect("static bounds")
    }

    fn jump(&self) -> f64 {
        self.inside_value - self.outside_value
    }
}

/// Quadrature on the reference simplex in barycentric coordinates.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    /// Barycentric coordinates, `dim + 1` entries per point.
    pub points: Vec<[f64; 4]>,
    /// Weights relative to the element measure, summing to one.
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// A rule exact for polynomials of degree two.
    pub fn degree2(dim: usize) -> QuadratureRule {
        match dim {
            1 => {
                let g = 0.5 / 3.0f64.sqrt();
                QuadratureRule {
                    points: vec![
                        [0.5 + g, 0.5 - g, 0.0, 0.0],
                        [0.5 - g, 0.5 + g, 0.0, 0.0],
                    ],
                    weights: vec![0.5, 0.5],
                }
            }
            2 => QuadratureRule {
                points: vec![
                    [0.5, 0.5, 0.0, 0.0],
                    [0.5, 0.0, 0.5, 0.0],
                    [0.0, 0.5, 0.5, 0.0],
                ],
                weights: vec![1.0 / 3.0; 3],
            },
            3 => {
                let a = 0.585_410_196_624_968_5;
                let b = 0.138_196_601_125_010_5;
                QuadratureRule {
                    points: vec![
                        [a, b, b, b],
                        [b, a, b, b],
                        [b, b, a, b],
                        [b, b, b, a],
                    ],
                    weights: vec![0.25; 4],
                }
            }
            _ => unreachable!("dimension checked on mesh construction"),
        }
    }

    /// Integrates `f` over the simplex with the given vertex coordinates.
    pub fn integrate(
        &self,
        dim: usize,
        coords: &[[f64; 3]],
        f: impl Fn(&[f64; 3]) -> f64,
    ) -> f64 {
        let vol = simplex_volume(dim, coords);
        let mut acc = 0.0;
        for (point, w) in self.points.iter().zip(&self.weights) {
            let mut x = [0.0f64; 3];
            for (k, c) in coords.iter().enumerate().take(dim + 1) {
                for a in 0..dim {
                    x[a] += point[k] * c[a];
                }
            }
            acc += w * f(&x);
        }
        vol * acc
    }
}

/// Per-element diffusion coefficient.
#[derive(Debug, Clone, Copy)]
pub enum Coeff<'a> {
    Constant(f64),
    PerElement(&'a [f64]),
}

impl Coeff<'_> {
    fn value(&self, e: usize) -> f64 {
        match self {
            Coeff::Constant(c) => *c,
            Coeff::PerElement(v) => v[e],
        }
    }

    fn validate_positive(&self, n_elements: usize) -> Result<()> {
        match self {
            Coeff::Constant(c) if *c > 0.0 && c.is_finite() => Ok(()),
            Coeff::Constant(c) => Err(Error::InvalidParameter(format!(
                "diffusion coefficient must be positive, got {c}"
            ))),
            Coeff::PerElement(v) => {
                if v.len() != n_elements {
                    return Err(Error::DimensionMismatch {
                        expected: n_elements,
                        got: v.len(),
                    });
                }
                match v.iter().find(|&&c| !(c > 0.0) || !c.is_finite()) {
                    Some(c) => Err(Error::InvalidParameter(format!(
                        "diffusion coefficient must be positive, got {c}"
                    ))),
                    None => Ok(()),
                }
            }
        }
    }
}

/// Affine geometry of one element: volume, the constant barycentric
/// gradients and the data to evaluate barycentric coordinates at points.
struct ElementGeometry {
    dim: usize,
    vol: f64,
    grads: [[f64; 3]; 4],
    origin: [f64; 3],
}

impl ElementGeometry {
    fn new(dim: usize, coords: &[[f64; 3]]) -> ElementGeometry {
        let mut grads = [[0.0f64; 3]; 4];
        let vol;
        match dim {
            1 => {
                let j = coords[1][0] - coords[0][0];
                vol = j.abs();
                grads[1][0] = 1.0 / j;
                grads[0][0] = -grads[1][0];
            }
            2 => {
                let a = coords[1][0] - coords[0][0];
                let c = coords[1][1] - coords[0][1];
                let b = coords[2][0] - coords[0][0];
                let d = coords[2][1] - coords[0][1];
                let det = a * d - b * c;
                vol = det.abs() / 2.0;
                // rows of the inverse Jacobian
                grads[1] = [d / det, -b / det, 0.0];
                grads[2] = [-c / det, a / det, 0.0];
                for k in 0..2 {
                    grads[0][k] = -grads[1][k] - grads[2][k];
                }
            }
            3 => {
                let mut j = [[0.0f64; 3]; 3];
                for col in 0..3 {
                    for k in 0..3 {
                        j[k][col] = coords[col + 1][k] - coords[0][k];
                    }
                }
                let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                vol = det.abs() / 6.0;
                let inv = |r: usize, c: usize| -> f64 {
                    let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
                    let (c1, c2) = ((c + 1) % 3, (c + 2) % 3);
                    (j[c1][r1] * j[c2][r2] - j[c1][r2] * j[c2][r1]) / det
                };
                for i in 0..3 {
                    for k in 0..3 {
                        grads[i + 1][k] = inv(i, k);
                    }
                    for k in 0..3 {
                        grads[0][k] -= grads[i + 1][k];
                    }
                }
            }
            _ => unreachable!(),
        }
        ElementGeometry {
            dim,
            vol,
            grads,
            origin: coords[0],
        }
    }

    /// Barycentric coordinates of an arbitrary point.
    fn barycentric(&self, x: &[f64; 3]) -> [f64; 4] {
        let mut lambda = [0.0f64; 4];
        lambda[0] = 1.0;
        for i in 0..=self.dim {
            for k in 0..self.dim {
                lambda[i] += self.grads[i][k] * (x[k] - self.origin[k]);
            }
        }
        lambda
    }
}

fn element_coords(mesh: &Mesh, e: usize) -> [[f64; 3]; 4] {
    let mut coords = [[0.0f64; 3]; 4];
    for (k, &v) in mesh.element(e).iter().enumerate() {
        coords[k][..mesh.dim()].copy_from_slice(mesh.vertex(v as usize));
    }
    coords
}

/// Exact element mass matrix entry factor: `vol * (1 + delta_ij) / ((d+1)(d+2))`.
fn mass_entry(dim: usize, vol: f64, i: usize, j: usize) -> f64 {
    let scale = vol / (((dim + 1) * (dim + 2)) as f64);
    if i == j {
        2.0 * scale
    } else {
        scale
    }
}

/// Generic row-owner assembly on free dofs: each row gathers the
/// contributions of its incident elements in mesh order, so the result is
/// independent of the thread count.
fn assemble_rows(
    mesh: &Mesh,
    dofmap: &DofMap,
    fill: impl Fn(usize, &ElementGeometry, &mut [[f64; 4]; 4]) + Sync,
) -> CsrMatrix {
    let (offsets, incident) = mesh.vertex_to_elements();
    let nf = dofmap.n_free();
    let nv1 = mesh.dim() + 1;
    let rows: Vec<Vec<(u32, f64)>> = dofmap
        .free()
        .par_iter()
        .map(|&v| {
            let mut row: Vec<(u32, f64)> = Vec::with_capacity(2 * nv1 * nv1);
            let mut local = [[0.0f64; 4]; 4];
            for &e in &incident[offsets[v as usize]..offsets[v as usize + 1]] {
                let e = e as usize;
                let verts = mesh.element(e);
                let geo = ElementGeometry::new(mesh.dim(), &element_coords(mesh, e));
                fill(e, &geo, &mut local);
                let li = verts.iter().position(|&w| w == v).expect("incident element");
                for (lj, &vj) in verts.iter().enumerate() {
                    if let Some(fj) = dofmap.free_index(vj) {
                        let val = local[li][lj];
                        match row.iter_mut().find(|(c, _)| *c == fj) {
                            Some((_, acc)) => *acc += val,
                            None => row.push((fj, val)),
                        }
                    }
                }
            }
            row
        })
        .collect();
    CsrMatrix::from_rows(nf, rows)
}

/// Stiffness matrix with per-element coefficient: `(coeff grad u, grad v)`.
pub fn assemble_stiffness(mesh: &Mesh, dofmap: &DofMap, coeff: Coeff) -> Result<CsrMatrix> {
    coeff.validate_positive(mesh.n_elements())?;
    let dim = mesh.dim();
    Ok(assemble_rows(mesh, dofmap, |e, geo, local| {
        let c = coeff.value(e) * geo.vol;
        for i in 0..=dim {
            for j in 0..=dim {
                let mut g = 0.0;
                for k in 0..dim {
                    g += geo.grads[i][k] * geo.grads[j][k];
                }
                local[i][j] = c * g;
            }
        }
    }))
}

/// Consistent mass matrix `(u, v)` with exact barycentric integration.
pub fn assemble_mass(mesh: &Mesh, dofmap: &DofMap) -> CsrMatrix {
    let dim = mesh.dim();
    assemble_rows(mesh, dofmap, |_, geo, local| {
        for i in 0..=dim {
            for j in 0..=dim {
                local[i][j] = mass_entry(dim, geo.vol, i, j);
            }
        }
    })
}

/// Fused operator `K_rho + M` assembled in one pass; the primal system matrix.
pub fn assemble_operator(mesh: &Mesh, dofmap: &DofMap, rho: Coeff) -> Result<CsrMatrix> {
    rho.validate_positive(mesh.n_elements())?;
    let dim = mesh.dim();
    Ok(assemble_rows(mesh, dofmap, |e, geo, local| {
        let c = rho.value(e) * geo.vol;
        for i in 0..=dim {
            for j in 0..=dim {
                let mut g = 0.0;
                for k in 0..dim {
                    g += geo.grads[i][k] * geo.grads[j][k];
                }
                local[i][j] = c * g + mass_entry(dim, geo.vol, i, j);
            }
        }
    }))
}

/// Lumped mass: diagonal of row sums. Fails on nonpositive row sums.
pub fn lump_mass(mass: &CsrMatrix) -> Result<DiagonalMatrix> {
    let sums = mass.row_sums();
    if let Some(bad) = sums.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Numerical(format!(
            "lumped mass requires positive row sums, got {bad:.3e}"
        )));
    }
    DiagonalMatrix::new(sums)
}

/// `diag(M)` on free dofs without assembling `M`.
pub fn mass_diagonal(mesh: &Mesh, dofmap: &DofMap) -> DiagonalMatrix {
    let dim = mesh.dim();
    let mut diag = vec![0.0; dofmap.n_free()];
    for e in 0..mesh.n_elements() {
        let vol = mesh.element_volume(e);
        let entry = mass_entry(dim, vol, 0, 0);
        for &v in mesh.element(e) {
            if let Some(f) = dofmap.free_index(v) {
                diag[f as usize] += entry;
            }
        }
    }
    DiagonalMatrix::new(diag).expect("element volumes are positive")
}

/// `lump(M)` on free dofs without assembling `M`; identical to
/// `lump_mass(assemble_mass(..))`.
pub fn lumped_mass_diagonal(mesh: &Mesh, dofmap: &DofMap) -> DiagonalMatrix {
    let dim = mesh.dim();
    let mut diag = vec![0.0; dofmap.n_free()];
    for e in 0..mesh.n_elements() {
        let verts = mesh.element(e);
        let vol = mesh.element_volume(e);
        let n_free = verts.iter().filter(|&&v| dofmap.free_index(v).is_some()).count();
        // row sum of the element mass matrix over the free columns
        let row_sum = vol * (n_free + 1) as f64 / (((dim + 1) * (dim + 2)) as f64);
        for &v in verts {
            if let Some(f) = dofmap.free_index(v) {
                diag[f as usize] += row_sum;
            }
        }
    }
    DiagonalMatrix::new(diag).expect("element volumes are positive")
}

/// Lumped mass with a per-element weight: row sums of the matrix
/// `(w u, v)` on free dofs. The L2-regularization operator `D_{1/rho}`
/// is this with `w = 1/rho_tau`.
pub fn weighted_lumped_mass_diagonal(
    mesh: &Mesh,
    dofmap: &DofMap,
    weight: Coeff,
) -> Result<DiagonalMatrix> {
    weight.validate_positive(mesh.n_elements())?;
    let dim = mesh.dim();
    let mut diag = vec![0.0; dofmap.n_free()];
    for e in 0..mesh.n_elements() {
        let verts = mesh.element(e);
        let vol = mesh.element_volume(e);
        let n_free = verts.iter().filter(|&&v| dofmap.free_index(v).is_some()).count();
        let row_sum =
            weight.value(e) * vol * (n_free + 1) as f64 / (((dim + 1) * (dim + 2)) as f64);
        for &v in verts {
            if let Some(f) = dofmap.free_index(v) {
                diag[f as usize] += row_sum;
            }
        }
    }
    DiagonalMatrix::new(diag)
}

/// True if the element bounding box overlaps the target box with positive measure.
fn bbox_overlap(dim: usize, coords: &[[f64; 3]], target: &BoxTarget) -> (bool, bool) {
    let mut overlap = true;
    let mut contained = true;
    for a in 0..dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in coords.iter().take(dim + 1) {
            lo = lo.min(c[a]);
            hi = hi.max(c[a]);
        }
        overlap &= lo < target.upper[a] && hi > target.lower[a];
        contained &= lo >= target.lower[a] - clip_tol() && hi <= target.upper[a] + clip_tol();
    }
    (overlap, contained)
}

fn clip_tol() -> f64 {
    1e-14
}

/// Load contributions `(y_d, phi_i)` of one element, exactly integrated.
fn element_load(
    dim: usize,
    coords: &[[f64; 3]],
    geo: &ElementGeometry,
    target: &BoxTarget,
) -> [f64; 4] {
    let base = target.outside_value * geo.vol / (dim + 1) as f64;
    let mut out = [0.0f64; 4];
    for v in out.iter_mut().take(dim + 1) {
        *v = base;
    }
    let (overlap, contained) = bbox_overlap(dim, coords, target);
    if !overlap {
        return out;
    }
    let jump = target.jump();
    if contained {
        for v in out.iter_mut().take(dim + 1) {
            *v += jump * geo.vol / (dim + 1) as f64;
        }
        return out;
    }
    let full: clip::Piece = [coords[0], coords[1], coords[2], coords[3]];
    for piece in clip::clip_simplex_box(dim, &full, &target.lower, &target.upper) {
        let pvol = simplex_volume(dim, &piece[..dim + 1]);
        let mut mean = [0.0f64; 4];
        for p in piece.iter().take(dim + 1) {
            let lambda = geo.barycentric(p);
            for i in 0..=dim {
                mean[i] += lambda[i];
            }
        }
        for i in 0..=dim {
            out[i] += jump * pvol * mean[i] / (dim + 1) as f64;
        }
    }
    out
}

/// Right-hand side `(y_d, phi_i)` on free dofs with exact clipped integration.
pub fn assemble_load_box_target(
    mesh: &Mesh,
    dofmap: &DofMap,
    target: &BoxTarget,
) -> Result<Vec<f64>> {
    if target.lower.len() != mesh.dim() {
        return Err(Error::DimensionMismatch {
            expected: mesh.dim(),
            got: target.lower.len(),
        });
    }
    let dim = mesh.dim();
    let ne = mesh.n_elements();
    let mut load = vec![0.0; dofmap.n_free()];
    let mut chunk_results: Vec<[f64; 4]> = Vec::new();
    for chunk_start in (0..ne).step_by(CHUNK) {
        let chunk_end = (chunk_start + CHUNK).min(ne);
        (chunk_start..chunk_end)
            .into_par_iter()
            .map(|e| {
                let coords = element_coords(mesh, e);
                let geo = ElementGeometry::new(dim, &coords);
                element_load(dim, &coords, &geo, target)
            })
            .collect_into_vec(&mut chunk_results);
        // deterministic scatter in element order
        for (k, contrib) in chunk_results.iter().enumerate() {
            let verts = mesh.element(chunk_start + k);
            for (l, &v) in verts.iter().enumerate() {
                if let Some(f) = dofmap.free_index(v) {
                    load[f as usize] += contrib[l];
                }
            }
        }
    }
    Ok(load)
}

/// `int_P (y_h - value)^2` over a clip piece, exact for the linear `y_h`.
fn piece_sq_integral(
    dim: usize,
    piece: &clip::Piece,
    geo: &ElementGeometry,
    yvals: &[f64; 4],
    value: f64,
) -> f64 {
    let pvol = simplex_volume(dim, &piece[..dim + 1]);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for p in piece.iter().take(dim + 1) {
        let lambda = geo.barycentric(p);
        let mut y = 0.0;
        for i in 0..=dim {
            y += yvals[i] * lambda[i];
        }
        let c = y - value;
        sum += c;
        sum_sq += c * c;
    }
    pvol * (sum * sum + sum_sq) / (((dim + 1) * (dim + 2)) as f64)
}

/// Squared L2 distance of the element's linear interpolant to the target.
fn element_eta_sq(
    dim: usize,
    coords: &[[f64; 3]],
    geo: &ElementGeometry,
    yvals: &[f64; 4],
    target: &BoxTarget,
) -> f64 {
    let against = |value: f64| -> f64 {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for &y in yvals.iter().take(dim + 1) {
            let c = y - value;
            sum += c;
            sum_sq += c * c;
        }
        geo.vol * (sum * sum + sum_sq) / (((dim + 1) * (dim + 2)) as f64)
    };
    let (overlap, contained) = bbox_overlap(dim, coords, target);
    if !overlap {
        return against(target.outside_value);
    }
    if contained {
        return against(target.inside_value);
    }
    let full_outside = against(target.outside_value);
    let piece_arr: clip::Piece = [coords[0], coords[1], coords[2], coords[3]];
    let mut inside_vs_out = 0.0;
    let mut inside_vs_in = 0.0;
    for piece in clip::clip_simplex_box(dim, &piece_arr, &target.lower, &target.upper) {
        inside_vs_out += piece_sq_integral(dim, &piece, geo, yvals, target.outside_value);
        inside_vs_in += piece_sq_integral(dim, &piece, geo, yvals, target.inside_value);
    }
    (full_outside - inside_vs_out + inside_vs_in).max(0.0)
}

fn eta_sq_all(mesh: &Mesh, dofmap: &DofMap, y_free: &[f64], target: &BoxTarget) -> Vec<f64> {
    let dim = mesh.dim();
    let y_full = dofmap.expand(y_free);
    (0..mesh.n_elements())
        .into_par_iter()
        .map(|e| {
            let coords = element_coords(mesh, e);
            let geo = ElementGeometry::new(dim, &coords);
            let mut yvals = [0.0f64; 4];
            for (k, &v) in mesh.element(e).iter().enumerate() {
                yvals[k] = y_full[v as usize];
            }
            element_eta_sq(dim, &coords, &geo, &yvals, target)
        })
        .collect()
}

/// `||y_h - y_d||_{L2}` with exact clipped integration.
pub fn l2_error_box_target(
    mesh: &Mesh,
    dofmap: &DofMap,
    y_free: &[f64],
    target: &BoxTarget,
) -> f64 {
    block_sum(&eta_sq_all(mesh, dofmap, y_free, target)).sqrt()
}

/// Per-element error contributions `eta_tau = ||y_h - y_d||_{L2(tau)}`.
pub fn element_error_indicators(
    mesh: &Mesh,
    dofmap: &DofMap,
    y_free: &[f64],
    target: &BoxTarget,
) -> Vec<f64> {
    eta_sq_all(mesh, dofmap, y_free, target)
        .into_iter()
        .map(f64::sqrt)
        .collect()
}

/// Interpolates a coarse free-dof vector onto the fine free dofs; boundary
/// values are zero on both levels.
pub fn prolongate(
    prolongation: &Prolongation,
    coarse: &DofMap,
    fine: &DofMap,
    y_coarse_free: &[f64],
) -> Vec<f64> {
    let full_coarse = coarse.expand(y_coarse_free);
    let full_fine = prolongation.apply(&full_coarse);
    fine.restrict(&full_fine)
}
