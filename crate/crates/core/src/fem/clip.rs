//! Exact clipping of simplices against axis-aligned boxes.
//!
//! The target `y_d` is piecewise constant with a box-shaped jump, so load and
//! error integrals need the geometry of `tau ∩ box` exactly. The element is
//! clipped against the 2d half-spaces of the box one at a time; every
//! intermediate piece is kept simplicial (a clipped simplex is re-triangulated
//! by coning the faces of the convex remainder), so the pieces can be
//! integrated with closed-form simplex formulas afterwards.

use crate::mesh::simplex_volume;

/// Vertices on the clip plane within this distance count as inside, which
/// keeps box faces that lie exactly on mesh planes from generating slivers.
const PLANE_TOL: f64 = 1e-14;

pub(crate) type Piece = [[f64; 3]; 4];

/// Pieces of `simplex ∩ box`. Pieces smaller than `1e-15` times the element
/// volume are dropped.
pub(crate) fn clip_simplex_box(
    dim: usize,
    simplex: &Piece,
    lower: &[f64],
    upper: &[f64],
) -> Vec<Piece> {
    let vol_floor = 1e-15 * simplex_volume(dim, &simplex[..dim + 1]);
    let mut pieces = vec![*simplex];
    for axis in 0..dim {
        for (bound, sign) in [(lower[axis], -1.0), (upper[axis], 1.0)] {
            if pieces.is_empty() {
                return pieces;
            }
            let mut next = Vec::with_capacity(pieces.len() + 2);
            for piece in &pieces {
                clip_piece(dim, piece, axis, bound, sign, &mut next);
            }
            next.retain(|p| simplex_volume(dim, &p[..dim + 1]) > vol_floor);
            pieces = next;
        }
    }
    pieces
}

/// Clips one simplex against the half-space `sign * (x_axis - bound) <= 0`.
fn clip_piece(dim: usize, piece: &Piece, axis: usize, bound: f64, sign: f64, out: &mut Vec<Piece>) {
    let nv = dim + 1;
    let mut s = [0.0f64; 4];
    let mut inside = [false; 4];
    let mut n_inside = 0;
    for k in 0..nv {
        s[k] = sign * (piece[k][axis] - bound);
        inside[k] = s[k] <= PLANE_TOL;
        if inside[k] {
            n_inside += 1;
        }
    }
    if n_inside == nv {
        out.push(*piece);
        return;
    }
    if n_inside == 0 {
        return;
    }

    let mut ins = [0usize; 4];
    let mut outs = [0usize; 4];
    let (mut ni, mut no) = (0, 0);
    for k in 0..nv {
        if inside[k] {
            ins[ni] = k;
            ni += 1;
        } else {
            outs[no] = k;
            no += 1;
        }
    }
    let cut = |i: usize, j: usize| -> [f64; 3] {
        let t = s[i] / (s[i] - s[j]);
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = piece[i][k] + t * (piece[j][k] - piece[i][k]);
        }
        p
    };

    match (dim, ni) {
        (1, 1) => {
            out.push([piece[ins[0]], cut(ins[0], outs[0]), [0.0; 3], [0.0; 3]]);
        }
        (2, 1) => {
            let v = ins[0];
            out.push([piece[v], cut(v, outs[0]), cut(v, outs[1]), [0.0; 3]]);
        }
        (2, 2) => {
            // quad (v1, v2, c2, c1) split along (v1, c2)
            let (v1, v2, w) = (ins[0], ins[1], outs[0]);
            let c1 = cut(v1, w);
            let c2 = cut(v2, w);
            out.push([piece[v1], piece[v2], c2, [0.0; 3]]);
            out.push([piece[v1], c2, c1, [0.0; 3]]);
        }
        (3, 1) => {
            let v = ins[0];
            out.push([piece[v], cut(v, outs[0]), cut(v, outs[1]), cut(v, outs[2])]);
        }
        (3, 3) => {
            // frustum: cone the faces that do not contain v1
            let (v1, v2, v3, w) = (ins[0], ins[1], ins[2], outs[0]);
            let c1 = cut(v1, w);
            let c2 = cut(v2, w);
            let c3 = cut(v3, w);
            out.push([piece[v1], c1, c2, c3]);
            out.push([piece[v1], piece[v2], piece[v3], c3]);
            out.push([piece[v1], piece[v2], c3, c2]);
        }
        (3, 2) => {
            // wedge over the planar cut quad (c11, c21, c22, c12)
            let (v1, v2, w1, w2) = (ins[0], ins[1], outs[0], outs[1]);
            let c11 = cut(v1, w1);
            let c12 = cut(v1, w2);
            let c21 = cut(v2, w1);
            let c22 = cut(v2, w2);
            out.push([piece[v1], piece[v2], c21, c22]);
            out.push([piece[v1], c11, c21, c22]);
            out.push([piece[v1], c11, c22, c12]);
        }
        _ => unreachable!("covered all inside counts for d <= 3"),
    }
}
