//! Quickhull for 3D point sets.
//!
//! Plane-side tests use a fixed absolute tolerance, so callers are expected to
//! feed coordinates of roughly unit scale. Points lying on the final hull surface
//! (within tolerance) but not at a corner are tracked separately so callers can
//! decide whether they count as hull members.

use std::collections::HashMap;

use thiserror::Error;

use crate::geometry::Vec3;

pub const DEFAULT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HullError {
    #[error("need at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("point {0} is not finite")]
    NonFinite(usize),
    #[error("input is degenerate: {0}")]
    DegenerateGeometry(&'static str),
    #[error("hull construction failed: {0}")]
    Internal(&'static str),
}

const NONE: u32 = u32::MAX;

struct Facet {
    v: [u32; 3],
    /// `adj[k]` shares the edge `v[k] -> v[(k + 1) % 3]`.
    adj: [u32; 3],
    normal: Vec3,
    offset: f64,
    outside: Vec<u32>,
    coplanar: Vec<u32>,
    alive: bool,
    mark: u64,
}

impl Facet {
    fn new(v: [u32; 3], points: &[Vec3]) -> Self {
        let a = points[v[0] as usize];
        let b = points[v[1] as usize];
        let c = points[v[2] as usize];
        let n = (b - a).cross(&(c - a));
        let norm = n.norm();
        let normal = if norm > 0.0 { n / norm } else { Vec3::zeros() };
        // Average the vertices for a slightly better-conditioned offset.
        let offset = normal.dot(&((a + b + c) / 3.0));
        Self {
            v,
            adj: [NONE; 3],
            normal,
            offset,
            outside: Vec::new(),
            coplanar: Vec::new(),
            alive: true,
            mark: 0,
        }
    }

    #[inline]
    fn distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// Result of a hull computation over point ids `0..n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hull {
    /// Outward-oriented triangles.
    pub facets: Vec<[usize; 3]>,
    /// Sorted ids of hull corners.
    pub vertices: Vec<usize>,
    /// Sorted ids of non-corner points within tolerance of the hull surface.
    pub on_surface: Vec<usize>,
}

impl Hull {
    /// Per-point flag: corner, or on the surface when `include_surface` is set.
    pub fn membership(&self, n: usize, include_surface: bool) -> Vec<bool> {
        let mut mask = vec![false; n];
        for &i in &self.vertices {
            mask[i] = true;
        }
        if include_surface {
            for &i in &self.on_surface {
                mask[i] = true;
            }
        }
        mask
    }
}

/// Ids of the convex hull vertices, sorted ascending.
pub fn convex_hull_3d(points: &[Vec3]) -> Result<Vec<usize>, HullError> {
    Ok(quickhull(points, DEFAULT_TOLERANCE)?.vertices)
}

pub fn quickhull(points: &[Vec3], tolerance: f64) -> Result<Hull, HullError> {
    if points.len() < 4 {
        return Err(HullError::TooFewPoints(points.len()));
    }
    if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(HullError::NonFinite(i));
    }
    Builder::new(points, tolerance)?.run()
}

struct Builder<'a> {
    points: &'a [Vec3],
    tol: f64,
    facets: Vec<Facet>,
    epoch: u64,
}

fn argmax_by<F: Fn(usize) -> f64>(n: usize, f: F) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..n {
        let d = f(i);
        if d > best.1 {
            best = (i, d);
        }
    }
    best
}

impl<'a> Builder<'a> {
    fn new(points: &'a [Vec3], tol: f64) -> Result<Self, HullError> {
        let mut b = Self {
            points,
            tol,
            facets: Vec::new(),
            epoch: 0,
        };
        b.init_simplex()?;
        Ok(b)
    }

    fn init_simplex(&mut self) -> Result<(), HullError> {
        let pts = self.points;
        let n = pts.len();
        let mut extremes = Vec::with_capacity(6);
        for axis in 0..3 {
            extremes.push(argmax_by(n, |i| -pts[i][axis]).0);
            extremes.push(argmax_by(n, |i| pts[i][axis]).0);
        }
        let mut best = (extremes[0], extremes[0], -1.0);
        for (k, &i) in extremes.iter().enumerate() {
            for &j in &extremes[k + 1..] {
                let d = (pts[i] - pts[j]).norm();
                if d > best.2 {
                    best = (i.min(j), i.max(j), d);
                }
            }
        }
        let (i0, i1, span) = best;
        if span <= self.tol {
            return Err(HullError::DegenerateGeometry("all points coincide"));
        }
        let dir = (pts[i1] - pts[i0]) / span;
        let (i2, line_dist) = argmax_by(n, |i| {
            let d = pts[i] - pts[i0];
            (d - dir * d.dot(&dir)).norm()
        });
        if line_dist <= self.tol {
            return Err(HullError::DegenerateGeometry("points are collinear"));
        }
        let normal = (pts[i1] - pts[i0]).cross(&(pts[i2] - pts[i0])).normalize();
        let (i3, plane_dist) = argmax_by(n, |i| normal.dot(&(pts[i] - pts[i0])).abs());
        if plane_dist <= self.tol {
            return Err(HullError::DegenerateGeometry("points are coplanar"));
        }

        let simplex = [i0, i1, i2, i3].map(|i| i as u32);
        let centroid = simplex.iter().map(|&i| pts[i as usize]).sum::<Vec3>() / 4.0;
        for skip in 0..4 {
            let mut tri: Vec<u32> = (0..4).filter(|&k| k != skip).map(|k| simplex[k]).collect();
            let f = Facet::new([tri[0], tri[1], tri[2]], pts);
            if f.distance(&centroid) > 0.0 {
                tri.swap(1, 2);
            }
            self.facets.push(Facet::new([tri[0], tri[1], tri[2]], pts));
        }
        let mut edges = HashMap::new();
        for (fi, f) in self.facets.iter().enumerate() {
            for k in 0..3 {
                edges.insert((f.v[k], f.v[(k + 1) % 3]), fi as u32);
            }
        }
        for fi in 0..4 {
            for k in 0..3 {
                let (a, b) = (self.facets[fi].v[k], self.facets[fi].v[(k + 1) % 3]);
                self.facets[fi].adj[k] = edges[&(b, a)];
            }
        }

        let new_facets: Vec<u32> = (0..4).collect();
        let candidates = (0..n as u32).filter(|i| !simplex.contains(i));
        self.distribute(candidates, &new_facets);
        Ok(())
    }

    /// Assigns each point to the outside set (or surface set) of the new facet it is
    /// furthest above. Points clearly inside are dropped.
    fn distribute(&mut self, candidates: impl IntoIterator<Item = u32>, new_facets: &[u32]) {
        for p in candidates {
            let pt = &self.points[p as usize];
            let mut best = (NONE, f64::NEG_INFINITY);
            for &f in new_facets {
                let d = self.facets[f as usize].distance(pt);
                if d > best.1 {
                    best = (f, d);
                }
            }
            if best.1 > self.tol {
                self.facets[best.0 as usize].outside.push(p);
            } else if best.1 >= -self.tol {
                self.facets[best.0 as usize].coplanar.push(p);
            }
        }
    }

    fn furthest(&self, f: u32) -> u32 {
        let facet = &self.facets[f as usize];
        let mut best = (NONE, f64::NEG_INFINITY);
        for &p in &facet.outside {
            let d = facet.distance(&self.points[p as usize]);
            if d > best.1 || (d == best.1 && p < best.0) {
                best = (p, d);
            }
        }
        best.0
    }

    fn run(mut self) -> Result<Hull, HullError> {
        let mut pending: Vec<u32> = (0..self.facets.len() as u32)
            .filter(|&f| !self.facets[f as usize].outside.is_empty())
            .rev()
            .collect();
        while let Some(f) = pending.pop() {
            if !self.facets[f as usize].alive || self.facets[f as usize].outside.is_empty() {
                continue;
            }
            let eye = self.furthest(f);
            let new_facets = self.add_point(f, eye)?;
            for &nf in new_facets.iter().rev() {
                if !self.facets[nf as usize].outside.is_empty() {
                    pending.push(nf);
                }
            }
        }

        let mut is_vertex = vec![false; self.points.len()];
        let mut facets = Vec::new();
        let mut on_surface = Vec::new();
        for f in self.facets.iter().filter(|f| f.alive) {
            for &v in &f.v {
                is_vertex[v as usize] = true;
            }
            facets.push(f.v.map(|v| v as usize));
            on_surface.extend(f.coplanar.iter().map(|&p| p as usize));
        }
        let vertices: Vec<usize> = (0..self.points.len()).filter(|&i| is_vertex[i]).collect();
        on_surface.retain(|&p| !is_vertex[p]);
        on_surface.sort_unstable();
        on_surface.dedup();
        Ok(Hull {
            facets,
            vertices,
            on_surface,
        })
    }

    fn add_point(&mut self, start: u32, eye: u32) -> Result<Vec<u32>, HullError> {
        self.epoch += 1;
        let visible_mark = self.epoch * 2;
        let hidden_mark = visible_mark + 1;
        let eye_pt = self.points[eye as usize];

        let mut visible = vec![start];
        self.facets[start as usize].mark = visible_mark;
        let mut horizon: Vec<(u32, u32, u32)> = Vec::new();
        let mut cursor = 0;
        while cursor < visible.len() {
            let g = visible[cursor];
            cursor += 1;
            for k in 0..3 {
                let nb = self.facets[g as usize].adj[k];
                let mark = self.facets[nb as usize].mark;
                if mark == visible_mark {
                    continue;
                }
                let is_visible = mark != hidden_mark && self.facets[nb as usize].distance(&eye_pt) > self.tol;
                if is_visible {
                    self.facets[nb as usize].mark = visible_mark;
                    visible.push(nb);
                } else {
                    self.facets[nb as usize].mark = hidden_mark;
                    let gv = self.facets[g as usize].v;
                    horizon.push((gv[k], gv[(k + 1) % 3], nb));
                }
            }
        }

        let first_new = self.facets.len() as u32;
        let mut by_start = HashMap::with_capacity(horizon.len());
        let mut by_end = HashMap::with_capacity(horizon.len());
        for (i, &(a, b, nb)) in horizon.iter().enumerate() {
            let id = first_new + i as u32;
            let mut facet = Facet::new([a, b, eye], self.points);
            facet.adj[0] = nb;
            let nbf = &mut self.facets[nb as usize];
            let k = (0..3)
                .find(|&k| nbf.v[k] == b && nbf.v[(k + 1) % 3] == a)
                .ok_or(HullError::Internal("horizon edge missing on neighbor"))?;
            nbf.adj[k] = id;
            if by_start.insert(a, id).is_some() || by_end.insert(b, id).is_some() {
                return Err(HullError::Internal("horizon is not a simple cycle"));
            }
            self.facets.push(facet);
        }
        let new_ids: Vec<u32> = (first_new..self.facets.len() as u32).collect();
        for &id in &new_ids {
            let [a, b, _] = self.facets[id as usize].v;
            let next = *by_start.get(&b).ok_or(HullError::Internal("open horizon"))?;
            let prev = *by_end.get(&a).ok_or(HullError::Internal("open horizon"))?;
            self.facets[id as usize].adj[1] = next;
            self.facets[id as usize].adj[2] = prev;
        }

        let mut orphans = Vec::new();
        for &g in &visible {
            let facet = &mut self.facets[g as usize];
            facet.alive = false;
            orphans.append(&mut facet.outside);
            orphans.append(&mut facet.coplanar);
        }
        orphans.retain(|&p| p != eye);
        self.distribute(orphans, &new_ids);
        Ok(new_ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: a point is a hull vertex iff it belongs to some triple
    /// whose plane has every other point on one side.
    pub(crate) fn brute_force_vertices(points: &[Vec3]) -> Vec<usize> {
        let n = points.len();
        let mut is_vertex = vec![false; n];
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    let normal = (points[j] - points[i]).cross(&(points[k] - points[i]));
                    if normal.norm() < 1e-12 {
                        continue;
                    }
                    let (mut pos, mut neg) = (false, false);
                    for (m, p) in points.iter().enumerate() {
                        if m == i || m == j || m == k {
                            continue;
                        }
                        let s = normal.dot(&(p - points[i]));
                        pos |= s > 1e-12;
                        neg |= s < -1e-12;
                        if pos && neg {
                            break;
                        }
                    }
                    if !(pos && neg) {
                        is_vertex[i] = true;
                        is_vertex[j] = true;
                        is_vertex[k] = true;
                    }
                }
            }
        }
        (0..n).filter(|&i| is_vertex[i]).collect()
    }

    fn ball(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let p = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if p.norm() <= 1.0 {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn cube_with_interior_point() {
        let mut pts = vec![Vec3::new(0.5, 0.5, 0.5)];
        for i in 0..8 {
            pts.push(Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64));
        }
        assert_eq!(convex_hull_3d(&pts).unwrap(), (1..9).collect::<Vec<_>>());
    }

    #[test]
    fn cube_face_centers_are_surface_points() {
        let mut pts: Vec<Vec3> = (0..8)
            .map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
            .collect();
        pts.push(Vec3::new(0.5, 0.5, 1.0));
        pts.push(Vec3::new(0.5, 0.5, 0.5));
        let hull = quickhull(&pts, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(hull.vertices, (0..8).collect::<Vec<_>>());
        assert_eq!(hull.on_surface, vec![8]);
        assert_eq!(hull.facets.len(), 12);
    }

    #[test]
    fn tetrahedron() {
        let s = 1.0 / 2f64.sqrt();
        let pts = vec![
            Vec3::new(1.0, 0.0, -s),
            Vec3::new(-1.0, 0.0, -s),
            Vec3::new(0.0, 1.0, s),
            Vec3::new(0.0, -1.0, s),
        ];
        assert_eq!(convex_hull_3d(&pts).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn degenerate_inputs() {
        let flat: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, (i * i) as f64, 0.0)).collect();
        assert!(matches!(convex_hull_3d(&flat), Err(HullError::DegenerateGeometry(_))));
        let line: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(convex_hull_3d(&line), Err(HullError::DegenerateGeometry(_))));
        assert!(matches!(convex_hull_3d(&line[..3]), Err(HullError::TooFewPoints(3))));
    }

    #[test]
    fn matches_brute_force_on_ball_subsamples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let big = ball(&mut rng, 1000);
        let full = convex_hull_3d(&big).unwrap();
        assert!(!full.is_empty());
        for chunk in big.chunks(50) {
            assert_eq!(convex_hull_3d(chunk).unwrap(), brute_force_vertices(chunk));
        }
    }

    #[test]
    fn sphere_points_are_all_vertices_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> = ball(&mut rng, 3000).into_iter().map(|p| p.normalize()).collect();
        let a = quickhull(&pts, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(a.vertices.len(), pts.len());
        assert_eq!(a, quickhull(&pts, DEFAULT_TOLERANCE).unwrap());
        // Euler: a triangulated sphere with V vertices has 2V - 4 faces.
        assert_eq!(a.facets.len(), 2 * pts.len() - 4);
    }
}
