//! Quadric-error edge collapse restricted to endpoint placement, so the coarse
//! mesh keeps a subset of the fine vertices.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::sync::Arc;

use super::{CoarsenError, SamplingOperator};
use crate::mesh::{SparseMatrix, TriMesh};

/// Symmetric 4x4 quadric stored as its upper triangle.
#[derive(Debug, Clone, Copy, Default)]
struct Quadric([f64; 10]);

impl Quadric {
    fn from_plane(n: [f64; 3], d: f64) -> Self {
        let [a, b, c] = n;
        Self([a * a, a * b, a * c, a * d, b * b, b * c, b * d, c * c, c * d, d * d])
    }

    fn add(&self, o: &Quadric) -> Quadric {
        let mut q = *self;
        for (x, y) in q.0.iter_mut().zip(&o.0) {
            *x += y;
        }
        q
    }

    fn eval(&self, p: [f64; 3]) -> f64 {
        let q = &self.0;
        let [x, y, z] = p;
        q[0] * x * x
            + 2.0 * q[1] * x * y
            + 2.0 * q[2] * x * z
            + 2.0 * q[3] * x
            + q[4] * y * y
            + 2.0 * q[5] * y * z
            + 2.0 * q[6] * y
            + q[7] * z * z
            + 2.0 * q[8] * z
            + q[9]
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn face_normal(p: &[[f64; 3]], f: [usize; 3]) -> [f64; 3] {
    cross(sub(p[f[1]], p[f[0]]), sub(p[f[2]], p[f[0]]))
}

/// Collapse of `remove` onto `keep`.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    cost: f64,
    keep: usize,
    remove: usize,
    stamps: (u64, u64),
}

impl Candidate {
    fn key(&self) -> (usize, usize, usize) {
        (self.keep.min(self.remove), self.keep.max(self.remove), self.remove)
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // reversed: BinaryHeap pops the cheapest, then the smallest (min, max) edge
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.key().cmp(&self.key()))
            .then_with(|| other.stamps.cmp(&self.stamps))
    }
}

struct Collapser {
    pos: Vec<[f64; 3]>,
    faces: Vec<Option<[usize; 3]>>,
    incident: Vec<BTreeSet<usize>>,
    quadric: Vec<Quadric>,
    alive: Vec<bool>,
    stamp: Vec<u64>,
    heap: BinaryHeap<Candidate>,
}

impl Collapser {
    fn new(mesh: &TriMesh) -> Self {
        let n = mesh.num_vertices();
        let pos = mesh.vertices().to_vec();
        let mut incident = vec![BTreeSet::new(); n];
        let mut quadric = vec![Quadric::default(); n];
        for (fi, &f) in mesh.faces().iter().enumerate() {
            for &v in &f {
                incident[v].insert(fi);
            }
            let nrm = face_normal(&pos, f);
            let len = dot(nrm, nrm).sqrt();
            if len > 0.0 {
                let unit = nrm.map(|x| x / len);
                let q = Quadric::from_plane(unit, -dot(unit, pos[f[0]]));
                for &v in &f {
                    quadric[v] = quadric[v].add(&q);
                }
            }
        }
        let mut c = Self {
            pos,
            faces: mesh.faces().iter().map(|&f| Some(f)).collect(),
            incident,
            quadric,
            alive: vec![true; n],
            stamp: vec![0; n],
            heap: BinaryHeap::new(),
        };
        for (a, b) in mesh.edges() {
            c.push_edge(a, b);
        }
        c
    }

    fn neighbors(&self, v: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for &fi in &self.incident[v] {
            if let Some(f) = self.faces[fi] {
                out.extend(f.iter().copied().filter(|&w| w != v));
            }
        }
        out
    }

    fn push_edge(&mut self, a: usize, b: usize) {
        let q = self.quadric[a].add(&self.quadric[b]);
        for (keep, remove) in [(a, b), (b, a)] {
            self.heap.push(Candidate {
                cost: q.eval(self.pos[keep]),
                keep,
                remove,
                stamps: (self.stamp[keep], self.stamp[remove]),
            });
        }
    }

    fn is_current(&self, c: &Candidate) -> bool {
        self.alive[c.keep]
            && self.alive[c.remove]
            && (self.stamp[c.keep], self.stamp[c.remove]) == c.stamps
    }

    /// Link condition plus a face-orientation check around `remove`.
    fn is_valid(&self, keep: usize, remove: usize) -> bool {
        let nk = self.neighbors(keep);
        let nr = self.neighbors(remove);
        let shared_faces = self.incident[remove]
            .iter()
            .filter(|&&fi| self.faces[fi].is_some_and(|f| f.contains(&keep)))
            .count();
        if nk.intersection(&nr).count() != shared_faces {
            return false;
        }
        for &fi in &self.incident[remove] {
            let Some(f) = self.faces[fi] else { continue };
            if f.contains(&keep) {
                continue;
            }
            let before = face_normal(&self.pos, f);
            let after = face_normal(&self.pos, f.map(|v| if v == remove { keep } else { v }));
            let area_after = dot(after, after).sqrt();
            if area_after <= 1e-12 * dot(before, before).sqrt() || dot(before, after) <= 0.0 {
                return false;
            }
        }
        true
    }

    fn collapse(&mut self, keep: usize, remove: usize) {
        let faces: Vec<usize> = self.incident[remove].iter().copied().collect();
        for fi in faces {
            let Some(f) = self.faces[fi] else { continue };
            if f.contains(&keep) {
                self.faces[fi] = None;
                for v in f {
                    self.incident[v].remove(&fi);
                }
            } else {
                self.faces[fi] = Some(f.map(|v| if v == remove { keep } else { v }));
                self.incident[keep].insert(fi);
            }
        }
        self.incident[remove].clear();
        self.alive[remove] = false;
        self.quadric[keep] = self.quadric[keep].add(&self.quadric[remove]);

        let mut touched: Vec<usize> = vec![keep];
        touched.extend(self.neighbors(keep));
        for &v in &touched {
            self.stamp[v] += 1;
        }
        let mut edges = BTreeSet::new();
        for &v in &touched {
            for w in self.neighbors(v) {
                edges.insert((v.min(w), v.max(w)));
            }
        }
        for (a, b) in edges {
            self.push_edge(a, b);
        }
    }
}

/// Closest point on triangle `abc` to `p`, as barycentric weights.
pub(crate) fn closest_barycentric(p: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return [0.0, 1.0, 0.0];
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return [1.0 - v, v, 0.0];
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return [0.0, 0.0, 1.0];
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return [1.0 - w, 0.0, w];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [0.0, 1.0 - w, w];
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [1.0 - v - w, v, w]
}

/// Barycentric upsampling rows for every fine vertex given the coarse mesh.
/// `coarse_of[v]` is the coarse index of retained fine vertex `v`.
pub(crate) fn barycentric_up(
    fine: &[[f64; 3]],
    coarse: &TriMesh,
    coarse_of: &[Option<usize>],
) -> SparseMatrix {
    let cv = coarse.vertices();
    let mut triplets = Vec::new();
    for (v, &p) in fine.iter().enumerate() {
        if let Some(c) = coarse_of[v] {
            triplets.push((v, c, 1.0));
            continue;
        }
        let mut best: Option<(f64, [usize; 3], [f64; 3])> = None;
        for &f in coarse.faces() {
            let w = closest_barycentric(p, cv[f[0]], cv[f[1]], cv[f[2]]);
            let q: [f64; 3] =
                std::array::from_fn(|k| w[0] * cv[f[0]][k] + w[1] * cv[f[1]][k] + w[2] * cv[f[2]][k]);
            let d = sub(p, q);
            let dist = dot(d, d);
            if best.as_ref().is_none_or(|b| dist < b.0) {
                best = Some((dist, f, w));
            }
        }
        let (_, f, w) = best.expect("coarse mesh has faces");
        let w = w.map(|x| x.clamp(0.0, 1.0));
        let total: f64 = w.iter().sum();
        for k in 0..3 {
            if w[k] > 0.0 {
                triplets.push((v, f[k], w[k] / total));
            }
        }
    }
    SparseMatrix::from_triplets(fine.len(), cv.len(), triplets).expect("distinct triangle corners")
}

pub(crate) fn selection_down(selected: &[usize], fine_count: usize) -> SparseMatrix {
    let triplets = selected.iter().enumerate().map(|(r, &c)| (r, c, 1.0)).collect();
    SparseMatrix::from_triplets(selected.len(), fine_count, triplets).expect("one entry per row")
}

/// Collapses edges in quadric-cost order until `target_count` vertices remain.
pub fn decimate(mesh: &TriMesh, target_count: usize) -> Result<(TriMesh, SamplingOperator), CoarsenError> {
    let n = mesh.num_vertices();
    if target_count < 4 {
        return Err(CoarsenError::TargetTooSmall { target: target_count });
    }
    if target_count >= n {
        return Err(CoarsenError::TargetNotSmaller { target: target_count, vertices: n });
    }
    let mut state = Collapser::new(mesh);
    let mut remaining = n;
    let mut last_blocked = None;
    while remaining > target_count {
        let Some(c) = state.heap.pop() else { break };
        if !state.is_current(&c) {
            continue;
        }
        if !state.is_valid(c.keep, c.remove) {
            last_blocked = Some((c.keep.min(c.remove), c.keep.max(c.remove)));
            continue;
        }
        state.collapse(c.keep, c.remove);
        remaining -= 1;
    }
    if remaining > target_count + 2 {
        return Err(CoarsenError::CollapseBlocked {
            edge: last_blocked.unwrap_or((0, 0)),
            reached: remaining,
            target: target_count,
        });
    }

    let kept: Vec<usize> = (0..n).filter(|&v| state.alive[v]).collect();
    let mut coarse_of = vec![None; n];
    for (ci, &v) in kept.iter().enumerate() {
        coarse_of[v] = Some(ci);
    }
    let vertices = kept.iter().map(|&v| mesh.vertices()[v]).collect();
    let faces = state
        .faces
        .iter()
        .flatten()
        .map(|f| f.map(|v| coarse_of[v].expect("faces reference live vertices")))
        .collect();
    let coarse = TriMesh::new(vertices, faces).map_err(CoarsenError::Mesh)?;
    let up = barycentric_up(mesh.vertices(), &coarse, &coarse_of);
    let down = selection_down(&kept, n);
    let op = SamplingOperator {
        down: Arc::new(down),
        up: Arc::new(up),
        source_level: 0,
        target_level: 1,
    };
    Ok((coarse, op))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closest_point_inside_and_outside() {
        let (a, b, c) = ([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        let w = closest_barycentric([0.25, 0.25, 1.0], a, b, c);
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.25).abs() < 1e-12);
        assert_eq!(closest_barycentric([-1.0, -1.0, 0.0], a, b, c), [1.0, 0.0, 0.0]);
        let e = closest_barycentric([0.5, -1.0, 0.0], a, b, c);
        assert!((e[1] - 0.5).abs() < 1e-12 && e[2] == 0.0);
    }

    #[test]
    fn rejects_bad_targets() {
        let m = TriMesh::icosahedron();
        assert!(matches!(decimate(&m, 3), Err(CoarsenError::TargetTooSmall { target: 3 })));
        assert!(matches!(decimate(&m, 12), Err(CoarsenError::TargetNotSmaller { .. })));
    }

    #[test]
    fn single_collapse_keeps_other_vertices() {
        let m = TriMesh::icosahedron();
        let (coarse, op) = decimate(&m, 11).unwrap();
        assert_eq!(coarse.num_vertices(), 11);
        assert_eq!(coarse.num_faces(), 18);
        let removed: Vec<usize> = (0..12).filter(|&v| op.up.row_nnz(v) != 1 || op.up.row(v).next().unwrap().1 != 1.0).collect();
        assert!(removed.len() <= 1);
        let mut identity_rows = 0;
        for v in 0..12 {
            let row: Vec<_> = op.up.row(v).collect();
            if row.len() == 1 && row[0].1 == 1.0 && coarse.vertices()[row[0].0] == m.vertices()[v] {
                identity_rows += 1;
            }
        }
        assert!(identity_rows >= 11);
    }
}
