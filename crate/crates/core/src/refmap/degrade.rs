//! Controlled map degradations for sensitivity experiments.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ReferenceMap;

/// Removes `floor(fraction * n_i)` assigned keypoints from every image, chosen
/// uniformly at random per image. The removed keypoints are dropped together
/// with their descriptors; everything else is left untouched.
///
/// # Panics
/// If `fraction` is outside `[0, 1)`.
pub fn degrade_reduce_keypoints(map: &ReferenceMap, fraction: f64, seed: u64) -> ReferenceMap {
    assert!((0.0..1.0).contains(&fraction), "fraction must be in [0, 1), got {fraction}");
    let mut out = map.clone();
    let mut removed = 0;
    for record in &mut out.records {
        let assigned: Vec<usize> = (0..record.assignments.len())
            .filter(|&i| record.assignments[i].is_some())
            .collect();
        let k = (fraction * assigned.len() as f64).floor() as usize;
        if k == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(record.image_id as u64);
        let mut drop = vec![false; record.assignments.len()];
        for j in sample(&mut rng, assigned.len(), k) {
            drop[assigned[j]] = true;
        }
        let keep: Vec<usize> = (0..drop.len()).filter(|&i| !drop[i]).collect();
        record.features = record.features.select(&keep);
        record.assignments = keep.iter().map(|&i| record.assignments[i]).collect();
        removed += k;
    }
    out.metadata
        .degradations
        .push(format!("reduce_keypoints fraction={fraction} seed={seed} removed={removed}"));
    out
}

/// Moves every assigned keypoint's 3D position by `shift_m` along one world
/// axis. A seeded shuffle splits the points into thirds for x, y and z, and
/// each point gets its own random sign.
///
/// # Panics
/// If `shift_m` is negative or not finite.
pub fn degrade_shift_positions(map: &ReferenceMap, shift_m: f64, seed: u64) -> ReferenceMap {
    assert!(shift_m >= 0.0 && shift_m.is_finite(), "shift must be a finite non-negative length");
    let mut out = map.clone();
    let mut slots: Vec<(usize, usize)> = out
        .records
        .iter()
        .enumerate()
        .flat_map(|(r, rec)| {
            rec.assignments
                .iter()
                .enumerate()
                .filter(|(_, a)| a.is_some())
                .map(move |(i, _)| (r, i))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    slots.shuffle(&mut rng);
    let n = slots.len();
    for (k, &(r, i)) in slots.iter().enumerate() {
        let axis = if k < n / 3 {
            0
        } else if k < 2 * n / 3 {
            1
        } else {
            2
        };
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        if shift_m > 0.0 {
            let a = out.records[r].assignments[i].as_mut().unwrap();
            a.world_position[axis] += sign * shift_m;
        }
    }
    out.metadata
        .degradations
        .push(format!("shift_positions shift_m={shift_m} seed={seed} points={n}"));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refmap::tests::sample_map;
    use proptest::prelude::*;

    fn strip(mut m: ReferenceMap) -> ReferenceMap {
        m.metadata.degradations.clear();
        m
    }

    #[test]
    fn zero_degradations_leave_the_map_alone() {
        let map = sample_map(5, 3, 60);
        assert_eq!(strip(degrade_reduce_keypoints(&map, 0.0, 1)), map);
        assert_eq!(strip(degrade_shift_positions(&map, 0.0, 1)), map);
    }

    #[test]
    fn half_of_one_hundred_remain() {
        let mut map = sample_map(1, 1, 100);
        for a in &mut map.records[0].assignments {
            if a.is_none() {
                *a = Some(crate::refmap::Assignment {
                    point_id: 0,
                    world_position: crate::geometry::Point3::origin(),
                });
            }
        }
        let out = degrade_reduce_keypoints(&map, 0.5, 3);
        assert_eq!(out.records[0].assigned_count(), 50);
        assert_eq!(out.records[0].keypoint_count(), 50);
        assert_eq!(out.metadata.degradations.len(), 1);
    }

    #[test]
    fn same_seed_same_result() {
        let map = sample_map(9, 4, 80);
        assert_eq!(degrade_reduce_keypoints(&map, 0.3, 11), degrade_reduce_keypoints(&map, 0.3, 11));
        assert_eq!(degrade_shift_positions(&map, 0.1, 11), degrade_shift_positions(&map, 0.1, 11));
        assert_ne!(degrade_shift_positions(&map, 0.1, 11), degrade_shift_positions(&map, 0.1, 12));
    }

    #[test]
    #[should_panic]
    fn fraction_one_is_rejected() {
        degrade_reduce_keypoints(&ReferenceMap::default(), 1.0, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn prop_reduce_counts_and_untouched_rows(seed in any::<u64>(), f in 0.0f64..0.99) {
            let map = sample_map(seed, 3, 50);
            let out = degrade_reduce_keypoints(&map, f, seed);
            for (a, b) in map.records.iter().zip(&out.records) {
                let n = a.assigned_count();
                let k = (f * n as f64).floor() as usize;
                prop_assert_eq!(b.assigned_count(), n - k);
                prop_assert_eq!(b.unassigned_count(), a.unassigned_count());
                // Surviving rows are bit-identical and keep their order.
                let mut cursor = 0;
                for i in 0..b.keypoint_count() {
                    while a.features.keypoints[cursor] != b.features.keypoints[i]
                        || a.assignments[cursor] != b.assignments[i]
                    {
                        cursor += 1;
                    }
                    prop_assert_eq!(a.features.descriptors.binary_row(cursor), b.features.descriptors.binary_row(i));
                    cursor += 1;
                }
            }
        }

        #[test]
        fn prop_shift_is_axis_aligned_and_balanced(seed in any::<u64>(), s in 0.001f64..0.5) {
            let map = sample_map(seed, 3, 50);
            let out = degrade_shift_positions(&map, s, seed ^ 7);
            let mut per_axis = [0usize; 3];
            let mut n = 0;
            for (a, b) in map.records.iter().zip(&out.records) {
                prop_assert_eq!(&a.features, &b.features);
                for (x, y) in a.assignments.iter().zip(&b.assignments) {
                    match (x, y) {
                        (None, None) => {}
                        (Some(x), Some(y)) => {
                            n += 1;
                            prop_assert_eq!(x.point_id, y.point_id);
                            let d = y.world_position - x.world_position;
                            prop_assert!((d.norm() - s).abs() <= 1e-12 * (1.0 + x.world_position.coords.norm()));
                            let moved: Vec<usize> = (0..3).filter(|&k| d[k] != 0.0).collect();
                            prop_assert_eq!(moved.len(), 1);
                            per_axis[moved[0]] += 1;
                        }
                        _ => prop_assert!(false, "assignment presence changed"),
                    }
                }
            }
            for c in per_axis {
                prop_assert!((c as f64 - n as f64 / 3.0).abs() <= 2.0, "{per_axis:?} of {n}");
            }
        }
    }
}
