//! The standard scene suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mix, Rect, SceneSpec, SynthError};
use crate::geometry::{CameraIntrinsics, Point3, Pose, Vec3};

pub const SCENE_NAMES: [&str; 5] = ["wall", "two-walls", "room", "two-floor", "park"];

pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(220.0, 220.0, 160.0, 120.0, 320, 240).unwrap()
}

/// Looks from `eye` along compass heading `yaw_deg` (0 = +x, 90 = +y) tilted by `pitch_deg`.
pub fn heading_pose(eye: Point3, yaw_deg: f64, pitch_deg: f64) -> Pose {
    let (yaw, pitch) = (yaw_deg.to_radians(), pitch_deg.to_radians());
    let dir = Vec3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), pitch.sin());
    Pose::look_at(&eye, &(eye + dir), &Vec3::z())
}

/// Axis-aligned box faces, without the bottom.
fn boxed(min: [f64; 3], max: [f64; 3], seed: &mut impl FnMut() -> u64) -> Vec<Rect> {
    vec![
        Rect::new(0, min[0], [min[1], min[2]], [max[1], max[2]], seed()),
        Rect::new(0, max[0], [min[1], min[2]], [max[1], max[2]], seed()),
        Rect::new(1, min[1], [min[0], min[2]], [max[0], max[2]], seed()),
        Rect::new(1, max[1], [min[0], min[2]], [max[0], max[2]], seed()),
        Rect::new(2, max[2], [min[0], min[1]], [max[0], max[1]], seed()),
    ]
}

/// Floor, ceiling and four walls of `[x0, x1] x [y0, y1] x [z0, z1]`.
fn shell(x: [f64; 2], y: [f64; 2], z: [f64; 2], seed: &mut impl FnMut() -> u64) -> Vec<Rect> {
    vec![
        Rect::new(2, z[0], [x[0], y[0]], [x[1], y[1]], seed()),
        Rect::new(2, z[1], [x[0], y[0]], [x[1], y[1]], seed()),
        Rect::new(0, x[0], [y[0], z[0]], [y[1], z[1]], seed()),
        Rect::new(0, x[1], [y[0], z[0]], [y[1], z[1]], seed()),
        Rect::new(1, y[0], [x[0], z[0]], [x[1], z[1]], seed()),
        Rect::new(1, y[1], [x[0], z[0]], [x[1], z[1]], seed()),
    ]
}

fn spec(name: &str, seed: u64, surfaces: Vec<Rect>, density: f64, references: Vec<Pose>, queries: Vec<Pose>) -> SceneSpec {
    SceneSpec {
        name: name.to_string(),
        seed,
        surfaces,
        density,
        jitter_m: 0.0,
        intrinsics: default_intrinsics(),
        references,
        queries,
        background: 0.5,
    }
}

/// A scene of the standard suite by name.
pub fn scene(name: &str, seed: u64) -> Result<SceneSpec, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x7363_656e_6573));
    let mut counter = 0u64;
    let mut tex = || {
        counter += 1;
        mix(seed.wrapping_mul(0x100_0000).wrapping_add(counter))
    };
    let s = match name {
        "wall" => {
            let surfaces = vec![Rect::new(1, 3.0, [-2.0, 0.0], [2.0, 3.0], tex())];
            let at = |x: f64, yaw: f64| heading_pose(Point3::new(x, 0.0, 1.5), 90.0 + yaw, 0.0);
            let refs = (0..5).map(|i| at(-1.0 + 0.5 * i as f64, 0.0)).collect();
            let queries = vec![at(-0.25, 3.0), at(0.4, -4.0)];
            spec(name, seed, surfaces, 2000.0, refs, queries)
        }
        "two-walls" => {
            let surfaces = vec![
                Rect::new(1, 3.0, [-1.0, 0.5], [1.0, 2.5], tex()),
                Rect::new(1, 6.0, [-5.0, 0.0], [5.0, 5.0], tex()),
            ];
            let at = |x: f64, yaw: f64| heading_pose(Point3::new(x, 0.0, 1.5), 90.0 + yaw, 0.0);
            let refs = (0..5).map(|i| at(-0.5 + 0.25 * i as f64, 0.0)).collect();
            let queries = vec![at(-0.1, 4.0), at(0.3, -5.0)];
            spec(name, seed, surfaces, 1000.0, refs, queries)
        }
        "room" => room(seed, &mut rng, &mut tex),
        "two-floor" => two_floor(seed, &mut rng, &mut tex),
        "park" => park(seed, &mut rng, &mut tex),
        other => return Err(SynthError::UnknownScene(other.to_string())),
    };
    Ok(s)
}

/// 8 x 6 x 3 m room with a pillar and a cabinet. Its 50 references sit in the
/// four 5 m grid quadrants around the origin, 12 or 13 per quadrant with
/// evenly spread headings, so no two share a cell and a viewing direction.
fn room(seed: u64, rng: &mut impl Rng, tex: &mut impl FnMut() -> u64) -> SceneSpec {
    let mut surfaces = shell([-4.0, 4.0], [-3.0, 3.0], [0.0, 3.0], tex);
    // Pillar and cabinet.
    surfaces.extend(boxed([2.4, 1.7, 0.0], [2.8, 2.1, 3.0], tex).into_iter().take(4));
    surfaces.extend(boxed([-3.9, -1.0, 0.0], [-3.3, 0.2, 1.8], tex));
    let quadrants = [(1.0, 1.0, 13), (-1.0, 1.0, 13), (-1.0, -1.0, 12), (1.0, -1.0, 12)];
    let mut stations = Vec::new();
    for (qi, &(sx, sy, n)) in quadrants.iter().enumerate() {
        let offset = rng.gen_range(0.0..360.0);
        for k in 0..n {
            let eye = Point3::new(
                sx * rng.gen_range(0.9..2.1),
                sy * rng.gen_range(0.7..1.6),
                rng.gen_range(1.3..1.7),
            );
            let yaw = offset + 360.0 * k as f64 / n as f64 + 7.0 * qi as f64;
            stations.push((eye, yaw, rng.gen_range(-8.0..8.0)));
        }
    }
    let refs = stations.iter().map(|&(eye, yaw, pitch)| heading_pose(eye, yaw, pitch)).collect();
    // Queries revisit the surveyed stations with a small offset, as a second
    // walk along the mapping route would.
    let queries = (0..20)
        .map(|_| {
            let (eye, yaw, pitch): (Point3, f64, f64) = stations[rng.gen_range(0..stations.len())];
            let mut eye = eye + Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.1..0.1));
            eye.x = eye.x.signum() * eye.x.abs().clamp(0.8, 2.3);
            eye.y = eye.y.signum() * eye.y.abs().clamp(0.6, 1.7);
            heading_pose(eye, yaw + rng.gen_range(-12.0..12.0), pitch + rng.gen_range(-4.0..4.0))
        })
        .collect();
    spec("room", seed, surfaces, 3000.0, refs, queries)
}

/// Two stacked 8 x 6 m floors separated by a 0.2 m slab, each split into
/// four rooms by crossing partitions that meet in an open doorway. A
/// surrounding enclosure, foundation and roof stand in for neighbouring
/// structure, so nearly every ray has hidden geometry behind its first hit.
fn two_floor(seed: u64, rng: &mut impl Rng, tex: &mut impl FnMut() -> u64) -> SceneSpec {
    let mut surfaces = shell([-6.0, 6.0], [-5.0, 5.0], [-1.0, 7.5], tex);
    let floors = [[0.0, 3.0], [3.2, 6.2]];
    for z in floors {
        surfaces.extend(shell([-4.0, 4.0], [-3.0, 3.0], z, tex));
        for face in [-0.05, 0.05] {
            surfaces.push(Rect::new(0, face, [-3.0, z[0]], [-0.5, z[1]], tex()));
            surfaces.push(Rect::new(0, face, [0.5, z[0]], [3.0, z[1]], tex()));
            surfaces.push(Rect::new(1, face, [-4.0, z[0]], [-0.5, z[1]], tex()));
            surfaces.push(Rect::new(1, face, [0.5, z[0]], [4.0, z[1]], tex()));
        }
    }
    let mut stations = Vec::new();
    for floor in floors {
        for (sx, sy) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)] {
            let offset = rng.gen_range(0.0..360.0);
            for k in 0..3 {
                let eye = Point3::new(
                    sx * rng.gen_range(1.5..2.5),
                    sy * rng.gen_range(1.0..2.0),
                    floor[0] + rng.gen_range(1.3..1.7),
                );
                stations.push((eye, offset + 120.0 * k as f64, rng.gen_range(-25.0..25.0)));
            }
        }
    }
    let refs = stations.iter().map(|&(eye, yaw, pitch)| heading_pose(eye, yaw, pitch)).collect();
    let queries = (0..8)
        .map(|_| {
            let (eye, yaw, pitch): (Point3, f64, f64) = stations[rng.gen_range(0..stations.len())];
            let eye = eye + Vec3::new(rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25), rng.gen_range(-0.1..0.1));
            heading_pose(eye, yaw + rng.gen_range(-10.0..10.0), pitch + rng.gen_range(-4.0..4.0))
        })
        .collect();
    spec("two-floor", seed, surfaces, 500.0, refs, queries)
}

/// Open 40 x 40 m ground with a dozen sparse box obstacles.
fn park(seed: u64, rng: &mut impl Rng, tex: &mut impl FnMut() -> u64) -> SceneSpec {
    let mut surfaces = vec![Rect::new(2, 0.0, [-20.0, -20.0], [20.0, 20.0], tex())];
    let mut placed: Vec<(f64, f64)> = Vec::new();
    while placed.len() < 12 {
        let (x, y): (f64, f64) = (rng.gen_range(-12.0..12.0), rng.gen_range(-12.0..12.0));
        if x.abs() < 3.0 && y.abs() < 3.0 || placed.iter().any(|&(a, b)| (a - x).hypot(b - y) < 3.0) {
            continue;
        }
        placed.push((x, y));
        let (w, d, h) = (rng.gen_range(0.6..1.5), rng.gen_range(0.6..1.5), rng.gen_range(1.5..3.0));
        surfaces.extend(boxed([x - w / 2.0, y - d / 2.0, 0.0], [x + w / 2.0, y + d / 2.0, h], tex));
    }
    let mut cams = |n: usize| -> Vec<Pose> {
        (0..n)
            .map(|_| {
                let eye = Point3::new(rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5), 1.6);
                heading_pose(eye, rng.gen_range(0.0..360.0), rng.gen_range(-20.0..-5.0))
            })
            .collect()
    };
    let refs = cams(20);
    let queries = cams(6);
    let mut s = spec("park", seed, surfaces, 100.0, refs, queries);
    s.background = 0.75;
    s
}

/// Appends exact copies of the given references to the reference list.
pub fn with_duplicates(mut spec: SceneSpec, of: &[usize]) -> SceneSpec {
    for &i in of {
        spec.references.push(spec.references[i]);
    }
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rir::{global_similarity, grid_index};

    #[test]
    fn every_scene_builds_and_validates() {
        for name in SCENE_NAMES {
            let s = scene(name, 1).unwrap();
            s.validate().unwrap();
            assert!(!s.references.is_empty() && !s.queries.is_empty(), "{name}");
        }
        assert!(matches!(scene("moon", 1), Err(SynthError::UnknownScene(_))));
    }

    #[test]
    fn room_has_fifty_references_and_twenty_queries() {
        let s = scene("room", 1).unwrap();
        assert_eq!((s.references.len(), s.queries.len()), (50, 20));
    }

    #[test]
    fn room_cameras_stay_inside_free_space() {
        let s = scene("room", 4).unwrap();
        for p in s.references.iter().chain(&s.queries) {
            let c = p.center();
            assert!(c.x.abs() < 3.0 && c.y.abs() < 2.0 && c.z > 1.0 && c.z < 2.0);
            // Clear of the pillar (2.4..2.8, 1.7..2.1).
            assert!(!(c.x > 2.2 && c.y > 1.5));
        }
    }

    #[test]
    fn room_references_are_not_redundant_by_pose() {
        for seed in 0..5 {
            let s = scene("room", seed).unwrap();
            let keyed: Vec<(u32, &Pose)> = s.references.iter().enumerate().map(|(i, p)| (i as u32, p)).collect();
            for ids in grid_index(&keyed, 5.0).values() {
                for (k, &i) in ids.iter().enumerate() {
                    for &j in &ids[k + 1..] {
                        let c = global_similarity(&s.references[i as usize], &s.references[j as usize]);
                        assert!(c < 0.95, "seed {seed}: {i} vs {j} cosine {c}");
                    }
                }
            }
        }
    }

    #[test]
    fn heading_convention() {
        let p = heading_pose(Point3::origin(), 90.0, 0.0);
        assert!((p.viewing_direction() - Vec3::y()).norm() < 1e-12);
        // Image up is world up.
        let up_in_cam = p.rotation() * Vec3::z();
        assert!(up_in_cam.y < -0.99);
    }
}
