//! Mesh utilities: OBJ loading, area-weighted surface sampling, brute-force
//! ray-cast visibility, choosing the least occluded of four yaws, and
//! farthest point sampling.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

pub const RAY_EPS: f64 = 1e-7;
pub const DEFAULT_SURFACE_POINTS: usize = 5000;
pub const CANDIDATE_YAWS: [f64; 4] = [0.0, 90.0, 180.0, 270.0];
pub const VIEW_PITCH: f64 = 30.0;
pub const VIEW_RADIUS: f64 = 2.0;
pub const VIEW_FOV: f64 = 40.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
}

fn cross_area2(a: &Point, b: &Point, c: &Point) -> f64 {
    (b - a).cross(&(c - a)).norm()
}

impl TriMesh {
    /// Validates indices and drops zero-area triangles.
    pub fn new(vertices: Vec<Point>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::Range(format!("triangle {t:?} indexes past {} vertices", vertices.len())));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("mesh vertex".into()));
        }
        let triangles: Vec<[usize; 3]> = triangles
            .into_iter()
            .filter(|t| cross_area2(&vertices[t[0]], &vertices[t[1]], &vertices[t[2]]) > 0.0)
            .collect();
        if triangles.is_empty() {
            return Err(Error::EmptyMesh);
        }
        Ok(Self { vertices, triangles })
    }

    /// ASCII OBJ subset: `v x y z` and triangular `f` lines. Face entries may
    /// carry `/vt/vn` suffixes and negative (relative) indices.
    pub fn parse_obj(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let bad = |what: &str| Error::format(format!("line {}: {what}", lineno + 1));
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it.take(3).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad vertex"))?;
                    if c.len() != 3 {
                        return Err(bad("vertex needs three coordinates"));
                    }
                    vertices.push(Point::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let idx = it
                        .map(|tok| {
                            let first = tok.split('/').next().unwrap_or("");
                            let i: i64 = first.parse().map_err(|_| bad("bad face index"))?;
                            let n = vertices.len() as i64;
                            let resolved = if i < 0 { n + i } else { i - 1 };
                            if i == 0 || resolved < 0 || resolved >= n {
                                return Err(bad("face index out of range"));
                            }
                            Ok(resolved as usize)
                        })
                        .collect::<Result<Vec<usize>>>()?;
                    if idx.len() != 3 {
                        return Err(bad("only triangular faces are supported"));
                    }
                    triangles.push([idx[0], idx[1], idx[2]]);
                }
                _ => {}
            }
        }
        Self::new(vertices, triangles)
    }

    pub fn load_obj(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_obj(&std::fs::read_to_string(path)?)
    }

    pub fn triangle(&self, i: usize) -> [Point; 3] {
        let t = self.triangles[i];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    pub fn area(&self, i: usize) -> f64 {
        let [a, b, c] = self.triangle(i);
        0.5 * cross_area2(&a, &b, &c)
    }

    /// Bounding-box centre moved to the origin, farthest vertex at distance 1.
    pub fn normalized(&self) -> Self {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        let centre = (lo + hi) * 0.5;
        let r = self.vertices.iter().map(|v| (v - centre).norm()).fold(0.0, f64::max);
        let s = if r > 0.0 { 1.0 / r } else { 1.0 };
        Self { vertices: self.vertices.iter().map(|v| (v - centre) * s).collect(), triangles: self.triangles.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSample {
    pub points: Vec<Point>,
    /// Triangle each point was drawn from.
    pub faces: Vec<usize>,
}

/// `n` points, triangles picked by area and positions by uniform barycentrics.
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<SurfaceSample> {
    if mesh.triangles.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for i in 0..mesh.triangles.len() {
        acc += mesh.area(i);
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut faces = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(0.0..acc);
        let f = cdf.partition_point(|&c| c <= x).min(cdf.len() - 1);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let (u, v) = (1.0 - s, s * r2);
        let [a, b, c] = mesh.triangle(f);
        points.push(a * u + b * (1.0 - u - v) + c * v);
        faces.push(f);
    }
    Ok(SurfaceSample { points, faces })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub yaw: f64,
    pub pitch: f64,
    pub radius: f64,
    pub fov: f64,
}

impl CameraPose {
    pub fn candidate(yaw: f64) -> Self {
        Self { yaw, pitch: VIEW_PITCH, radius: VIEW_RADIUS, fov: VIEW_FOV }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !(self.fov > 0.0 && self.fov < 180.0) {
            return Err(Error::Range(format!("camera radius {} / fov {} out of range", self.radius, self.fov)));
        }
        Ok(())
    }
}

/// `(cos, sin)` of an angle in degrees, exact at multiples of 90.
fn cos_sin_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    match r {
        0.0 => (1.0, 0.0),
        90.0 => (0.0, 1.0),
        180.0 => (-1.0, 0.0),
        270.0 => (0.0, -1.0),
        _ => {
            let rad = r.to_radians();
            (rad.cos(), rad.sin())
        }
    }
}

/// Camera centre on the sphere of `radius`, looking at the origin.
pub fn camera_position(pose: &CameraPose) -> Point {
    let (cy, sy) = cos_sin_deg(pose.yaw);
    let (cp, sp) = cos_sin_deg(pose.pitch);
    Point::new(pose.radius * cp * cy, pose.radius * cp * sy, pose.radius * sp)
}

/// Möller–Trumbore. Returns the ray parameter `t` of the hit (a distance
/// when `dir` is unit length), or `None` for misses, near-parallel rays and
/// hits behind the origin.
pub fn ray_triangle(origin: &Point, dir: &Point, tri: &[Point; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < RAY_EPS {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > RAY_EPS).then_some(t)
}

/// Whether the segment from `cam` to `p` is free of triangles, ignoring hits
/// within `eps` of the point itself.
fn visible_from(mesh: &TriMesh, cam: &Point, p: &Point, eps: f64) -> bool {
    let delta = p - cam;
    let dist = delta.norm();
    if dist == 0.0 {
        return true;
    }
    let dir = delta / dist;
    (0..mesh.triangles.len()).all(|i| ray_triangle(cam, &dir, &mesh.triangle(i)).is_none_or(|t| t >= dist - eps))
}

pub fn count_visible(mesh: &TriMesh, points: &[Point], pose: &CameraPose) -> Result<usize> {
    if mesh.triangles.is_empty() {
        return Err(Error::EmptyMesh);
    }
    pose.validate()?;
    let cam = camera_position(pose);
    let eps = 1e-4 * pose.radius;
    Ok(points.iter().filter(|p| visible_from(mesh, &cam, p, eps)).count())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSelection {
    pub yaw: f64,
    /// Visible point count per candidate yaw, in [`CANDIDATE_YAWS`] order.
    pub counts: [(f64, usize); 4],
}

/// Best yaw for an already normalised mesh and a fixed point set.
pub fn select_view_with_points(mesh: &TriMesh, points: &[Point]) -> Result<ViewSelection> {
    let mut counts = [(0.0, 0usize); 4];
    for (slot, &yaw) in counts.iter_mut().zip(&CANDIDATE_YAWS) {
        *slot = (yaw, count_visible(mesh, points, &CameraPose::candidate(yaw))?);
    }
    // Strictly greater keeps the lowest yaw on ties.
    let best = counts.iter().fold(counts[0], |b, &c| if c.1 > b.1 { c } else { b });
    Ok(ViewSelection { yaw: best.0, counts })
}

/// Normalises the mesh, samples its surface and picks the yaw (of 0, 90,
/// 180, 270) that sees the most sampled points.
pub fn select_view(mesh: &TriMesh, seed: u64) -> Result<ViewSelection> {
    let m = mesh.normalized();
    let s = sample_surface(&m, DEFAULT_SURFACE_POINTS, seed)?;
    select_view_with_points(&m, &s.points)
}

/// Indices of `k` points chosen greedily to maximise the distance to the
/// already chosen set, starting from the point farthest from the centroid.
pub fn fps(points: &[Point], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(Error::Range(format!("k = {k} not in 1..={}", points.len())));
    }
    let centroid = points.iter().fold(Point::zeros(), |a, p| a + p) / points.len() as f64;
    let argmax = |d: &[f64]| d.iter().enumerate().fold(0, |b, (i, &v)| if v > d[b] { i } else { b });
    let from_centroid: Vec<f64> = points.iter().map(|p| (p - centroid).norm_squared()).collect();
    let mut chosen = vec![argmax(&from_centroid)];
    let mut min_d: Vec<f64> = points.iter().map(|p| (p - points[chosen[0]]).norm_squared()).collect();
    while chosen.len() < k {
        let next = argmax(&min_d);
        chosen.push(next);
        for (d, p) in min_d.iter_mut().zip(points) {
            *d = d.min((p - points[next]).norm_squared());
        }
    }
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64, z: f64) -> Point {
        Point::new(x, y, z)
    }

    fn quad(v: &mut Vec<Point>, t: &mut Vec<[usize; 3]>, corners: [Point; 4]) {
        let b = v.len();
        v.extend(corners);
        t.push([b, b + 1, b + 2]);
        t.push([b, b + 2, b + 3]);
    }

    /// Axis-aligned box `[lo, hi]` as 12 triangles.
    fn cuboid(v: &mut Vec<Point>, t: &mut Vec<[usize; 3]>, lo: Point, hi: Point) {
        let c = |i: usize| p(if i & 1 == 0 { lo.x } else { hi.x }, if i & 2 == 0 { lo.y } else { hi.y }, if i & 4 == 0 { lo.z } else { hi.z });
        for face in [[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]] {
            quad(v, t, [c(face[0]), c(face[1]), c(face[2]), c(face[3])]);
        }
    }

    /// Brute-force visibility with triangles in the outer loop.
    fn oracle_count(mesh: &TriMesh, points: &[Point], pose: &CameraPose) -> usize {
        let cam = camera_position(pose);
        let eps = 1e-4 * pose.radius;
        let mut blocked = vec![false; points.len()];
        for i in (0..mesh.triangles.len()).rev() {
            let tri = mesh.triangle(i);
            for (b, pt) in blocked.iter_mut().zip(points) {
                let dist = (pt - cam).norm();
                let dir = (pt - cam) / dist;
                if let Some(t) = ray_triangle(&cam, &dir, &tri) {
                    if t < dist - eps {
                        *b = true;
                    }
                }
            }
        }
        blocked.iter().filter(|b| !**b).count()
    }

    #[test]
    fn obj_parsing() {
        let m = TriMesh::parse_obj("# tri\nv 0 0 0\nv 1 0 0\nv 0 1 0\nv 2 2 2\nf 1/1 2/2 3/3\nf -4 -3 -2\nf 1 1 2\n").unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 1, 2]]);
        assert!(matches!(TriMesh::parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n"), Err(Error::Format(_))));
        assert!(matches!(TriMesh::parse_obj("v 0 0 0\nf 1 2 3\n"), Err(Error::Format(_))));
        assert!(matches!(TriMesh::parse_obj("v 0 0 0\nv 1 1 1\nv 2 2 2\nf 1 2 3\n"), Err(Error::EmptyMesh)));
        assert!(matches!(TriMesh::parse_obj(""), Err(Error::EmptyMesh)));
    }

    #[test]
    fn normalisation_fits_unit_sphere() {
        let m = TriMesh::new(vec![p(1.0, 1.0, 1.0), p(5.0, 1.0, 1.0), p(1.0, 3.0, 1.0)], vec![[0, 1, 2]]).unwrap().normalized();
        let r = m.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!((r - 1.0).abs() < 1e-12);
        let c = (m.vertices.iter().fold(p(f64::MAX, f64::MAX, f64::MAX), |a, v| a.inf(v))
            + m.vertices.iter().fold(p(f64::MIN, f64::MIN, f64::MIN), |a, v| a.sup(v)))
            * 0.5;
        assert!(c.norm() < 1e-12);
    }

    #[test]
    fn samples_lie_in_their_triangle() {
        let (a, b, c) = (p(0.0, 0.0, 0.0), p(2.0, 0.0, 0.0), p(0.0, 1.0, 0.0));
        let m = TriMesh::new(vec![a, b, c], vec![[0, 1, 2]]).unwrap();
        let s = sample_surface(&m, 2000, 4).unwrap();
        for q in &s.points {
            assert!(q.z == 0.0 && q.x >= 0.0 && q.y >= 0.0 && q.x / 2.0 + q.y <= 1.0 + 1e-12);
        }
        assert_eq!(s, sample_surface(&m, 2000, 4).unwrap());
        assert_ne!(s, sample_surface(&m, 2000, 5).unwrap());
    }

    #[test]
    fn sampling_follows_area() {
        let v = vec![p(0.0, 0.0, 0.0), p(3.0, 0.0, 0.0), p(0.0, 3.0, 0.0), p(5.0, 0.0, 0.0), p(6.0, 0.0, 0.0), p(5.0, 1.0, 0.0)];
        let m = TriMesh::new(v, vec![[0, 1, 2], [3, 4, 5]]).unwrap();
        let n = 100_000;
        let s = sample_surface(&m, n, 1).unwrap();
        let big = s.faces.iter().filter(|&&f| f == 0).count() as f64;
        let ratio = big / (n as f64 - big);
        assert!((ratio / 9.0 - 1.0).abs() < 0.02, "{ratio}");
    }

    #[test]
    fn camera_placements() {
        let c = camera_position(&CameraPose { yaw: 0.0, pitch: 0.0, radius: 2.0, fov: 40.0 });
        assert_eq!(c, p(2.0, 0.0, 0.0));
        let c = camera_position(&CameraPose { yaw: 90.0, pitch: 0.0, radius: 2.0, fov: 40.0 });
        assert!((c - p(0.0, 2.0, 0.0)).norm() < 1e-9);
        let c = camera_position(&CameraPose::candidate(0.0));
        assert!((c - p(3f64.sqrt(), 0.0, 1.0)).norm() < 1e-9);
        assert!(CameraPose { fov: 180.0, ..CameraPose::candidate(0.0) }.validate().is_err());
        assert!(CameraPose { radius: 0.0, ..CameraPose::candidate(0.0) }.validate().is_err());
    }

    #[test]
    fn ray_triangle_cases() {
        let tri = [p(0.0, 0.0, 0.0), p(3.0, 0.0, 0.0), p(0.0, 3.0, 0.0)];
        let centroid = p(1.0, 1.0, 0.0);
        let origin = p(1.0, 1.0, 4.5);
        let t = ray_triangle(&origin, &p(0.0, 0.0, -1.0), &tri).unwrap();
        assert!((t - (origin - centroid).norm()).abs() < 1e-12);
        // Oblique ray against the analytic plane crossing z = 0.
        let dir = p(0.2, -0.1, -1.0).normalize();
        let t = ray_triangle(&origin, &dir, &tri).unwrap();
        assert!((t - 4.5 / -dir.z).abs() < 1e-12);
        assert!(ray_triangle(&origin, &p(1.0, 0.0, 0.0), &tri).is_none());
        assert!(ray_triangle(&origin, &p(0.0, 0.0, 1.0), &tri).is_none());
        assert!(ray_triangle(&p(5.0, 5.0, 1.0), &p(0.0, 0.0, -1.0), &tri).is_none());
    }

    #[test]
    fn front_facing_triangle_sees_itself() {
        let m = TriMesh::new(vec![p(0.0, -0.5, -0.5), p(0.0, 0.5, -0.5), p(0.0, 0.0, 0.6)], vec![[0, 1, 2]]).unwrap();
        let s = sample_surface(&m, 500, 2).unwrap();
        let pose = CameraPose::candidate(0.0);
        assert_eq!(count_visible(&m, &s.points, &pose).unwrap(), 500);
    }

    #[test]
    fn wall_hides_points_behind_it() {
        let (mut v, mut t) = (Vec::new(), Vec::new());
        quad(&mut v, &mut t, [p(0.5, -3.0, -3.0), p(0.5, 3.0, -3.0), p(0.5, 3.0, 3.0), p(0.5, -3.0, 3.0)]);
        let m = TriMesh::new(v, t).unwrap();
        let grid: Vec<Point> = (0..10).flat_map(|i| (0..10).map(move |j| p(-0.5, -0.5 + 0.1 * i as f64, -0.5 + 0.1 * j as f64))).collect();
        let pose = CameraPose::candidate(0.0);
        assert_eq!(count_visible(&m, &grid, &pose).unwrap(), 0);
        assert_eq!(oracle_count(&m, &grid, &pose), 0);
        assert_eq!(count_visible(&m, &grid, &CameraPose::candidate(180.0)).unwrap(), 100);
    }

    #[test]
    fn counts_match_oracle_on_small_meshes() {
        let (mut v, mut t) = (Vec::new(), Vec::new());
        cuboid(&mut v, &mut t, p(-0.3, -0.3, -0.3), p(0.3, 0.3, 0.3));
        cuboid(&mut v, &mut t, p(0.4, -0.6, -0.2), p(0.5, 0.1, 0.4));
        quad(&mut v, &mut t, [p(-0.8, -0.8, -0.5), p(0.8, -0.8, -0.5), p(0.8, 0.8, -0.5), p(-0.8, 0.8, -0.5)]);
        let m = TriMesh::new(v, t).unwrap().normalized();
        assert!(m.triangles.len() <= 50);
        let s = sample_surface(&m, 1500, 3).unwrap();
        for yaw in [0.0, 45.0, 90.0, 180.0, 270.0] {
            let pose = CameraPose::candidate(yaw);
            assert_eq!(count_visible(&m, &s.points, &pose).unwrap(), oracle_count(&m, &s.points, &pose), "yaw {yaw}");
        }
    }

    #[test]
    fn single_triangle_facing_plus_x_selects_zero() {
        let m = TriMesh::new(vec![p(0.0, -0.5, -0.5), p(0.0, 0.5, -0.5), p(0.0, 0.0, 0.6)], vec![[0, 1, 2]]).unwrap();
        let sel = select_view(&m, 1).unwrap();
        assert_eq!(sel.yaw, 0.0);
    }

    #[test]
    fn selection_ignores_vertex_order() {
        let (mut v, mut t) = (Vec::new(), Vec::new());
        cuboid(&mut v, &mut t, p(-0.3, -0.3, -0.3), p(0.3, 0.3, 0.3));
        quad(&mut v, &mut t, [p(-0.6, -1.0, -1.0), p(-0.6, 1.0, -1.0), p(-0.6, 1.0, 1.0), p(-0.6, -1.0, 1.0)]);
        let m = TriMesh::new(v.clone(), t.clone()).unwrap().normalized();
        let pts = sample_surface(&m, 800, 9).unwrap().points;
        let n = v.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut v2 = vec![Point::zeros(); n];
        for (old, &new) in perm.iter().enumerate() {
            v2[new] = m.vertices[old];
        }
        let t2: Vec<[usize; 3]> = m.triangles.iter().rev().map(|tr| [perm[tr[0]], perm[tr[1]], perm[tr[2]]]).collect();
        let m2 = TriMesh::new(v2, t2).unwrap();
        assert_eq!(select_view_with_points(&m, &pts).unwrap(), select_view_with_points(&m2, &pts).unwrap());
    }

    #[test]
    fn four_fold_symmetric_scene_ties_to_lowest_yaw() {
        let (mut v, mut t) = (Vec::new(), Vec::new());
        cuboid(&mut v, &mut t, p(-0.5, -0.5, -0.5), p(0.5, 0.5, 0.5));
        let m = TriMesh::new(v, t).unwrap().normalized();
        let base = sample_surface(&m, 300, 12).unwrap().points;
        let rot = |q: &Point| p(-q.y, q.x, q.z);
        let mut pts = base.clone();
        let mut cur = base;
        for _ in 0..3 {
            cur = cur.iter().map(rot).collect();
            pts.extend(cur.iter().copied());
        }
        let sel = select_view_with_points(&m, &pts).unwrap();
        assert!(sel.counts.iter().all(|c| c.1 == sel.counts[0].1), "{:?}", sel.counts);
        assert_eq!(sel.yaw, 0.0);
    }

    #[test]
    fn empty_mesh_errors() {
        let m = TriMesh { vertices: vec![], triangles: vec![] };
        assert!(matches!(sample_surface(&m, 10, 0), Err(Error::EmptyMesh)));
        assert!(matches!(count_visible(&m, &[Point::zeros()], &CameraPose::candidate(0.0)), Err(Error::EmptyMesh)));
    }

    #[test]
    fn fps_fixtures() {
        let line: Vec<Point> = (0..10).map(|i| p(i as f64, 0.0, 0.0)).collect();
        let mut two = fps(&line, 2).unwrap();
        two.sort();
        assert_eq!(two, vec![0, 9]);
        let mut all = fps(&line, 10).unwrap();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let pts = vec![p(0.0, 0.0, 0.0), p(0.1, 0.0, 0.0), p(-3.0, 0.0, 0.0), p(0.2, 0.0, 0.0)];
        assert_eq!(fps(&pts, 1).unwrap(), vec![2]);
        assert!(matches!(fps(&line, 0), Err(Error::Range(_))));
        assert!(matches!(fps(&line, 11), Err(Error::Range(_))));
    }

    #[test]
    fn fps_min_distance_never_grows() {
        let m = TriMesh::new(vec![p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0), p(0.0, 1.0, 0.3)], vec![[0, 1, 2]]).unwrap();
        let pts = sample_surface(&m, 300, 8).unwrap().points;
        let order = fps(&pts, 60).unwrap();
        let mut prev = f64::INFINITY;
        for k in 2..=60 {
            let sel = &order[..k];
            let mut min = f64::INFINITY;
            for i in 0..k {
                for j in i + 1..k {
                    min = min.min((pts[sel[i]] - pts[sel[j]]).norm());
                }
            }
            assert!(min <= prev + 1e-15);
            prev = min;
        }
    }
}
