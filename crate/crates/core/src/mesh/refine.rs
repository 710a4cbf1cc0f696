//! Red (uniform) refinement and Maubach newest-vertex bisection.

use super::{is_boundary_point, Mesh};
use crate::{Error, Result};
use std::collections::{BTreeSet, HashMap};

/// Interpolation of coarse P1 nodal vectors onto a refined mesh.
///
/// Row `f` lists `(coarse vertex, weight)` pairs with weights summing to one:
/// a surviving vertex keeps a single weight-1 pair, an edge midpoint carries
/// the two endpoints with weight 1/2 each. Midpoints of edges whose endpoints
/// were themselves created during the same adaptive sweep resolve recursively
/// to coarse vertices, so rows always reference the coarse mesh.
#[derive(Debug, Clone)]
pub struct Prolongation {
    coarse_dofs: usize,
    fine_dofs: usize,
    offsets: Vec<usize>,
    pairs: Vec<(u32, f64)>,
}

impl Prolongation {
    pub fn identity(n: usize) -> Prolongation {
        Prolongation {
            coarse_dofs: n,
            fine_dofs: n,
            offsets: (0..=n).collect(),
            pairs: (0..n).map(|i| (i as u32, 1.0)).collect(),
        }
    }

    pub fn coarse_dofs(&self) -> usize {
        self.coarse_dofs
    }

    pub fn fine_dofs(&self) -> usize {
        self.fine_dofs
    }

    pub fn row(&self, fine: usize) -> &[(u32, f64)] {
        &self.pairs[self.offsets[fine]..self.offsets[fine + 1]]
    }

    /// Interpolates a full (all-vertex) coarse vector to the fine mesh.
    pub fn apply(&self, coarse: &[f64]) -> Vec<f64> {
        assert_eq!(coarse.len(), self.coarse_dofs, "coarse vector length");
        (0..self.fine_dofs)
            .map(|f| self.row(f).iter().map(|&(c, w)| w * coarse[c as usize]).sum())
            .collect()
    }
}

/// Growing vertex set shared by both refinement algorithms. Tracks midpoint
/// identity (exact, via sorted index pairs), boundary flags and the
/// prolongation rows of every vertex.
struct VertexPool {
    dim: usize,
    coarse_n: usize,
    coords: Vec<f64>,
    boundary: Vec<bool>,
    rows: Vec<Vec<(u32, f64)>>,
    midpoints: HashMap<(u32, u32), u32>,
}

impl VertexPool {
    fn from_mesh(mesh: &Mesh) -> VertexPool {
        let n = mesh.n_vertices();
        VertexPool {
            dim: mesh.dim(),
            coarse_n: n,
            coords: mesh.vertices_flat().to_vec(),
            boundary: mesh.boundary_flags().to_vec(),
            rows: (0..n).map(|i| vec![(i as u32, 1.0)]).collect(),
            midpoints: HashMap::new(),
        }
    }

    /// Returns the midpoint vertex of edge `(a, b)`, creating it on first use.
    fn midpoint(&mut self, a: u32, b: u32) -> (u32, bool) {
        let key = (a.min(b), a.max(b));
        if let Some(&m) = self.midpoints.get(&key) {
            return (m, false);
        }
        let d = self.dim;
        let mut point = [0.0f64; 3];
        for k in 0..d {
            point[k] = 0.5 * (self.coords[a as usize * d + k] + self.coords[b as usize * d + k]);
        }
        let m = self.rows.len() as u32;
        self.coords.extend_from_slice(&point[..d]);
        self.boundary.push(is_boundary_point(&point[..d]));
        let row = self.combine_halves(a, b);
        self.rows.push(row);
        self.midpoints.insert(key, m);
        (m, true)
    }

    fn combine_halves(&self, a: u32, b: u32) -> Vec<(u32, f64)> {
        let mut row: Vec<(u32, f64)> = Vec::with_capacity(2);
        for &(src, w) in self.rows[a as usize].iter().chain(&self.rows[b as usize]) {
            match row.iter_mut().find(|(c, _)| *c == src) {
                Some((_, acc)) => *acc += 0.5 * w,
                None => row.push((src, 0.5 * w)),
            }
        }
        row.sort_unstable_by_key(|&(c, _)| c);
        row
    }

    fn has_midpoint(&self, a: u32, b: u32) -> bool {
        self.midpoints.contains_key(&(a.min(b), a.max(b)))
    }

    fn prolongation(&self) -> Prolongation {
        let mut offsets = Vec::with_capacity(self.rows.len() + 1);
        let mut pairs = Vec::with_capacity(self.rows.len() * 2);
        offsets.push(0);
        for row in &self.rows {
            pairs.extend_from_slice(row);
            offsets.push(pairs.len());
        }
        Prolongation {
            coarse_dofs: self.coarse_n,
            fine_dofs: self.rows.len(),
            offsets,
            pairs,
        }
    }
}

/// Restores the Maubach path order of a Kuhn child: its vertices form a chain
/// in the componentwise partial order, recovered by sorting on the coordinate
/// sum. Falls back to the constructed order if the child is not a chain.
fn normalize_order(pool: &VertexPool, verts: &mut [u32]) {
    let d = pool.dim;
    let sum = |v: u32| -> f64 { (0..d).map(|k| pool.coords[v as usize * d + k]).sum() };
    let mut sorted = verts.to_vec();
    sorted.sort_by(|&a, &b| sum(a).partial_cmp(&sum(b)).unwrap());
    for w in sorted.windows(2) {
        let (a, b) = (w[0] as usize, w[1] as usize);
        for k in 0..d {
            if pool.coords[a * d + k] > pool.coords[b * d + k] + 1e-12 {
                return; // not a chain, keep constructed order
            }
        }
    }
    verts.copy_from_slice(&sorted);
}

pub(super) fn refine_uniform(mesh: &Mesh) -> (Mesh, Prolongation) {
    let d = mesh.dim();
    let mut pool = VertexPool::from_mesh(mesh);
    let ne = mesh.n_elements();
    let children_per = 1usize << d;
    let mut elements = Vec::with_capacity(ne * children_per * (d + 1));
    let mut generations = Vec::with_capacity(ne * children_per);
    let mut tags = Vec::with_capacity(ne * children_per);

    for e in 0..ne {
        let verts = mesh.element(e);
        let gen = mesh.element_generation(e) + 1;
        let children = red_children(&mut pool, verts);
        for mut child in children {
            normalize_order(&pool, &mut child[..d + 1]);
            elements.extend_from_slice(&child[..d + 1]);
            generations.push(gen);
            tags.push(d as u8);
        }
    }

    let prolongation = pool.prolongation();
    let boundary = pool.boundary;
    let mesh = Mesh::from_parts(d, pool.coords, elements, boundary, generations, tags);
    (mesh, prolongation)
}

/// Red children of one simplex; 2^d per element. In 3d the interior
/// octahedron is split around its shortest diagonal, ties resolved by the
/// fixed candidate order, which reproduces the Kuhn triangulation of the
/// eight subcells on lattice meshes.
fn red_children(pool: &mut VertexPool, verts: &[u32]) -> Vec<[u32; 4]> {
    let d = pool.dim;
    match d {
        1 => {
            let (m, _) = pool.midpoint(verts[0], verts[1]);
            vec![[verts[0], m, 0, 0], [m, verts[1], 0, 0]]
        }
        2 => {
            let (v0, v1, v2) = (verts[0], verts[1], verts[2]);
            let (m01, _) = pool.midpoint(v0, v1);
            let (m02, _) = pool.midpoint(v0, v2);
            let (m12, _) = pool.midpoint(v1, v2);
            vec![
                [v0, m01, m02, 0],
                [v1, m01, m12, 0],
                [v2, m02, m12, 0],
                [m01, m12, m02, 0],
            ]
        }
        3 => {
            let (v0, v1, v2, v3) = (verts[0], verts[1], verts[2], verts[3]);
            let (m01, _) = pool.midpoint(v0, v1);
            let (m02, _) = pool.midpoint(v0, v2);
            let (m03, _) = pool.midpoint(v0, v3);
            let (m12, _) = pool.midpoint(v1, v2);
            let (m13, _) = pool.midpoint(v1, v3);
            let (m23, _) = pool.midpoint(v2, v3);

            // inner octahedron diagonals with their equator cycles
            let candidates = [
                ((m01, m23), [m02, m03, m13, m12]),
                ((m02, m13), [m01, m03, m23, m12]),
                ((m03, m12), [m01, m02, m23, m13]),
            ];
            let dist2 = |a: u32, b: u32| -> f64 {
                let (a, b) = (a as usize * 3, b as usize * 3);
                (0..3)
                    .map(|k| (pool.coords[a + k] - pool.coords[b + k]).powi(2))
                    .sum()
            };
            let mut best = 0;
            for i in 1..3 {
                if dist2(candidates[i].0 .0, candidates[i].0 .1)
                    < dist2(candidates[best].0 .0, candidates[best].0 .1) - 1e-15
                {
                    best = i;
                }
            }
            let ((a, b), eq) = candidates[best];

            let mut out = vec![
                [v0, m01, m02, m03],
                [v1, m01, m12, m13],
                [v2, m02, m12, m23],
                [v3, m03, m13, m23],
            ];
            for i in 0..4 {
                out.push([a, b, eq[i], eq[(i + 1) % 4]]);
            }
            out
        }
        _ => unreachable!(),
    }
}

/// Working state of one adaptive refinement sweep.
struct Bisector {
    dim: usize,
    pool: VertexPool,
    elements: Vec<u32>,
    tags: Vec<u8>,
    generations: Vec<u32>,
    alive: Vec<bool>,
    incidence: Vec<Vec<u32>>,
    pending: BTreeSet<u32>,
}

impl Bisector {
    fn new(mesh: &Mesh) -> Bisector {
        let nv = mesh.n_vertices();
        let mut incidence: Vec<Vec<u32>> = vec![Vec::new(); nv];
        for (e, verts) in mesh.elements_flat().chunks(mesh.dim() + 1).enumerate() {
            for &v in verts {
                incidence[v as usize].push(e as u32);
            }
        }
        Bisector {
            dim: mesh.dim(),
            pool: VertexPool::from_mesh(mesh),
            elements: mesh.elements_flat().to_vec(),
            tags: mesh.tags().to_vec(),
            generations: mesh.generations().to_vec(),
            alive: vec![true; mesh.n_elements()],
            incidence: Vec::from_iter(incidence),
            pending: BTreeSet::new(),
        }
    }

    fn element(&self, e: u32) -> &[u32] {
        let base = e as usize * (self.dim + 1);
        &self.elements[base..base + self.dim + 1]
    }

    fn has_hanging_edge(&self, verts: &[u32]) -> bool {
        for i in 0..verts.len() {
            for j in i + 1..verts.len() {
                if self.pool.has_midpoint(verts[i], verts[j]) {
                    return true;
                }
            }
        }
        false
    }

    /// Maubach bisection of element `e`. Returns the split edge if its
    /// midpoint was created by this call.
    fn bisect(&mut self, e: u32) -> Option<(u32, u32)> {
        let d = self.dim;
        let k = self.tags[e as usize] as usize;
        let verts: Vec<u32> = self.element(e).to_vec();
        let (a, b) = (verts[0], verts[k]);
        let (m, created) = self.pool.midpoint(a, b);

        let mut child1 = verts.clone();
        child1[k] = m;
        let mut child2: Vec<u32> = Vec::with_capacity(d + 1);
        child2.extend_from_slice(&verts[1..=k]);
        child2.push(m);
        child2.extend_from_slice(&verts[k + 1..]);

        let new_tag = if k > 1 { (k - 1) as u8 } else { d as u8 };
        let gen = self.generations[e as usize] + 1;
        self.alive[e as usize] = false;

        for child in [child1, child2] {
            let id = (self.elements.len() / (d + 1)) as u32;
            self.elements.extend_from_slice(&child);
            self.tags.push(new_tag);
            self.generations.push(gen);
            self.alive.push(true);
            for &v in &child {
                if v as usize >= self.incidence.len() {
                    self.incidence.resize(v as usize + 1, Vec::new());
                }
                self.incidence[v as usize].push(id);
            }
            if self.has_hanging_edge(&child) {
                self.pending.insert(id);
            }
        }
        created.then_some((a, b))
    }

    /// Flags every live element still containing the split edge `(a, b)`.
    fn flag_edge_owners(&mut self, a: u32, b: u32) {
        for idx in 0..self.incidence[a as usize].len() {
            let e = self.incidence[a as usize][idx];
            if self.alive[e as usize] && self.element(e).contains(&b) {
                self.pending.insert(e);
            }
        }
    }
}

pub(super) fn refine_adaptive(mesh: &Mesh, marked: &[usize]) -> Result<(Mesh, Prolongation)> {
    let ne = mesh.n_elements();
    for &e in marked {
        if e >= ne {
            return Err(Error::InvalidParameter(format!(
                "marked element {e} out of range (mesh has {ne} elements)"
            )));
        }
    }
    if marked.is_empty() {
        return Ok((mesh.clone(), Prolongation::identity(mesh.n_vertices())));
    }

    let mut bis = Bisector::new(mesh);
    bis.pending.extend(marked.iter().map(|&e| e as u32));

    let mut rounds = 0usize;
    while !bis.pending.is_empty() {
        rounds += 1;
        if rounds > 10_000 {
            return Err(Error::Mesh(
                "conforming closure did not terminate within 10000 rounds".into(),
            ));
        }
        let current: Vec<u32> = std::mem::take(&mut bis.pending).into_iter().collect();
        let mut split_edges = Vec::new();
        for e in current {
            if bis.alive[e as usize] {
                if let Some(edge) = bis.bisect(e) {
                    split_edges.push(edge);
                }
            }
        }
        for (a, b) in split_edges {
            bis.flag_edge_owners(a, b);
        }
    }

    // compact live elements in creation order
    let d = mesh.dim();
    let n_total = bis.alive.len();
    let mut elements = Vec::new();
    let mut tags = Vec::new();
    let mut generations = Vec::new();
    for e in 0..n_total {
        if bis.alive[e] {
            elements.extend_from_slice(bis.element(e as u32));
            tags.push(bis.tags[e]);
            generations.push(bis.generations[e]);
        }
    }

    let prolongation = bis.pool.prolongation();
    let boundary = bis.pool.boundary;
    let refined = Mesh::from_parts(d, bis.pool.coords, elements, boundary, generations, tags);
    debug_assert_eq!(refined.n_vertices(), prolongation.fine_dofs());
    Ok((refined, prolongation))
}
