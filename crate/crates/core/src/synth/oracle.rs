//! Exact visibility and keypoint-depth ground truth by ray casting.

use rayon::prelude::*;

use super::{pixel_ray, raycast, Rect};
use crate::geometry::{project_world, CameraIntrinsics, Pixel, Point3, Pose};

/// A surface closer than this to the endpoint does not block a point.
pub const ENDPOINT_EPSILON_M: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct Oracle<'a> {
    surfaces: &'a [Rect],
}

impl<'a> Oracle<'a> {
    pub fn new(surfaces: &'a [Rect]) -> Self {
        Self { surfaces }
    }

    /// True when no surface crosses the open segment from `center` to `p`.
    pub fn unoccluded(&self, center: &Point3, p: &Point3) -> bool {
        let dir = p - center;
        let len = dir.norm();
        if len <= ENDPOINT_EPSILON_M {
            return true;
        }
        // `dir` is unnormalized, so the ray parameter of `p` itself is 1.
        self.surfaces
            .iter()
            .filter_map(|r| r.intersect(center, &dir))
            .all(|s| s * len >= len - ENDPOINT_EPSILON_M)
    }

    /// Exact visibility from the camera: inside the image and unoccluded.
    pub fn visibility(&self, points: &[Point3], pose: &Pose, intr: &CameraIntrinsics) -> Vec<bool> {
        let center = pose.center();
        points
            .par_iter()
            .map(|p| {
                project_world(pose, intr, p).is_some_and(|px| intr.contains(&px)) && self.unoccluded(&center, p)
            })
            .collect()
    }

    /// Visibility from the camera center in every direction, ignoring the image bounds.
    pub fn visibility_omni(&self, points: &[Point3], pose: &Pose) -> Vec<bool> {
        let center = pose.center();
        points.par_iter().map(|p| self.unoccluded(&center, p)).collect()
    }

    /// First surface point on the ray through `kp`.
    pub fn keypoint_3d(&self, pose: &Pose, intr: &CameraIntrinsics, kp: &Pixel) -> Option<Point3> {
        let (o, d) = pixel_ray(pose, intr, kp);
        raycast(self.surfaces, &o, &d).map(|(_, s)| o + d * s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::synth::{generate, scene};
    use proptest::prelude::*;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(200.0, 200.0, 160.0, 120.0, 320, 240).unwrap()
    }

    /// Segment-rectangle crossing written independently of `Rect::intersect`:
    /// the endpoints straddle the plane and the crossing lies inside the bounds.
    fn crosses(r: &Rect, a: &Point3, b: &Point3) -> bool {
        let (da, db) = (a[r.axis] - r.offset, b[r.axis] - r.offset);
        if da * db >= 0.0 || db.abs() < 1e-6 {
            return false;
        }
        let t = da / (da - db);
        let p = a + (b - a) * t;
        let (i, j) = r.plane_axes();
        p[i] >= r.min[0] && p[i] <= r.max[0] && p[j] >= r.min[1] && p[j] <= r.max[1]
    }

    #[test]
    fn single_wall_all_visible() {
        let spec = scene("wall", 1).unwrap();
        let data = generate(&spec).unwrap();
        let view = &data.references[0];
        let vis = data.oracle().visibility(&data.cloud.points, &view.pose, &view.intrinsics);
        for (p, v) in data.cloud.points.iter().zip(&vis) {
            let inside = project_world(&view.pose, &view.intrinsics, p).is_some_and(|px| view.intrinsics.contains(&px));
            assert_eq!(*v, inside);
        }
        assert!(vis.iter().any(|&v| v));
    }

    #[test]
    fn far_wall_behind_near_wall_is_hidden() {
        let near = Rect::new(2, 2.0, [-1.0, -1.0], [1.0, 1.0], 0);
        let far = Rect::new(2, 5.0, [-3.0, -3.0], [3.0, 3.0], 1);
        let surfaces = [near, far];
        let oracle = Oracle::new(&surfaces);
        let c = Point3::origin();
        assert!(!oracle.unoccluded(&c, &Point3::new(0.5, 0.5, 5.0)));
        assert!(oracle.unoccluded(&c, &Point3::new(2.9, 0.0, 5.0)));
        assert!(oracle.unoccluded(&c, &Point3::new(0.5, 0.5, 2.0)));
    }

    #[test]
    fn principal_ray_hits_frontal_wall_at_depth_two() {
        let surfaces = [Rect::new(2, 2.0, [-1.0, -1.0], [1.0, 1.0], 0)];
        let oracle = Oracle::new(&surfaces);
        let hit = oracle.keypoint_3d(&Pose::identity(), &intr(), &Pixel::new(160.0, 120.0)).unwrap();
        assert!((hit - Point3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
        let away = Pose::look_at(&Point3::origin(), &Point3::new(0.0, 0.0, -1.0), &Vec3::y());
        assert_eq!(oracle.keypoint_3d(&away, &intr(), &Pixel::new(160.0, 120.0)), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn prop_visibility_matches_segment_recheck(seed in 0u64..1000, which in 0usize..3) {
            let name = ["two-walls", "room", "two-floor"][which];
            let mut spec = scene(name, seed).unwrap();
            spec.density = 4.0;
            spec.references.truncate(1);
            spec.queries.clear();
            let data = generate(&spec).unwrap();
            let pose = data.references[0].pose;
            let c = pose.center();
            let vis = data.oracle().visibility_omni(&data.cloud.points, &pose);
            for (k, (p, v)) in data.cloud.points.iter().zip(&vis).enumerate() {
                let own = data.point_surface[k];
                let blocked = spec.surfaces.iter().enumerate().any(|(j, r)| j != own && crosses(r, &c, p));
                prop_assert_eq!(*v, !blocked, "point {}", k);
            }
        }
    }
}
