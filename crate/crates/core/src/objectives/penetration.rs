//! Two-hand interpenetration penalty.

use crate::geometry::Vec3;
use crate::mesh::MeshIndex;

/// Indices of `points` strictly inside `mesh`.
pub fn intersected(points: &[Vec3], mesh: &MeshIndex) -> Vec<usize> {
    let (lo, hi) = mesh.bounds();
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            p.x > lo.x && p.y > lo.y && p.z > lo.z && p.x < hi.x && p.y < hi.y && p.z < hi.z && mesh.contains(p)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Nearest-neighbour correspondences behind one frame's penetration loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PenetrationPairs {
    /// (right vertex inside the left mesh, closest left target).
    pub right_to_left: Vec<(usize, usize)>,
    /// (left vertex inside the right mesh, closest right target).
    pub left_to_right: Vec<(usize, usize)>,
}

fn nearest(src: &[Vec3], src_idx: &[usize], dst: &[Vec3], dst_idx: &[usize]) -> Vec<(usize, usize)> {
    src_idx
        .iter()
        .filter_map(|&i| {
            let mut best = (f64::INFINITY, None);
            for &k in dst_idx {
                let d2 = (dst[k] - src[i]).norm_squared();
                if d2 < best.0 {
                    best = (d2, Some(k));
                }
            }
            best.1.map(|k| (i, k))
        })
        .collect()
}

/// Intersected vertices of each hand and their nearest neighbours on the other hand.
///
/// Sources are the vertices of each hand inside the other mesh. Their nearest
/// neighbours are searched among the other hand's intersected vertices, or among
/// all of its vertices when that set is empty.
pub fn pairs(left: &MeshIndex, right: &MeshIndex) -> PenetrationPairs {
    let (vl, vr) = (left.vertices(), right.vertices());
    let in_l = intersected(vl, right);
    let in_r = intersected(vr, left);
    if in_l.is_empty() && in_r.is_empty() {
        return PenetrationPairs::default();
    }
    let all = |n: usize| (0..n).collect::<Vec<_>>();
    let tgt_l = if in_l.is_empty() { all(vl.len()) } else { in_l.clone() };
    let tgt_r = if in_r.is_empty() { all(vr.len()) } else { in_r.clone() };
    PenetrationPairs {
        right_to_left: nearest(vr, &in_r, vl, &tgt_l),
        left_to_right: nearest(vl, &in_l, vr, &tgt_r),
    }
}

/// Sum of squared pair distances with gradients w.r.t. both vertex sets.
pub fn loss_from_pairs(vl: &[Vec3], vr: &[Vec3], p: &PenetrationPairs) -> (f64, Vec<Vec3>, Vec<Vec3>) {
    let mut dl = vec![Vec3::zeros(); vl.len()];
    let mut dr = vec![Vec3::zeros(); vr.len()];
    let mut a = 0.0;
    for &(i, k) in &p.right_to_left {
        let d = vr[i] - vl[k];
        a += d.norm_squared();
        dr[i] += d * 2.0;
        dl[k] -= d * 2.0;
    }
    let mut b = 0.0;
    for &(i, k) in &p.left_to_right {
        let d = vl[i] - vr[k];
        b += d.norm_squared();
        dl[i] += d * 2.0;
        dr[k] -= d * 2.0;
    }
    (a + b, dl, dr)
}

fn aabb(points: &[Vec3]) -> (Vec3, Vec3) {
    points.iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    )
}

/// Correspondences for raw vertex sets. Skips building the mesh indices when
/// the bounding boxes are disjoint, which is the common case.
pub fn frame_pairs(vl: &[Vec3], fl: &[[u32; 3]], vr: &[Vec3], fr: &[[u32; 3]]) -> PenetrationPairs {
    let ((llo, lhi), (rlo, rhi)) = (aabb(vl), aabb(vr));
    let disjoint = (0..3).any(|k| lhi[k] <= rlo[k] || rhi[k] <= llo[k]);
    if disjoint {
        return PenetrationPairs::default();
    }
    pairs(&MeshIndex::new(vl.to_vec(), fl), &MeshIndex::new(vr.to_vec(), fr))
}

/// Penetration loss for one frame with gradients w.r.t. both hands' vertices.
///
/// Correspondences are held fixed for the gradient, which is the gradient of
/// the loss wherever the nearest neighbours are unique.
pub fn loss_pen(left: &MeshIndex, right: &MeshIndex) -> (f64, Vec<Vec3>, Vec<Vec3>) {
    loss_from_pairs(left.vertices(), right.vertices(), &pairs(left, right))
}
