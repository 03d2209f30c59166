//! Simulated annotation noise: tight instance boxes are enlarged by a factor
//! `lambda` of their extent and their corners jittered.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{InstanceBox, Point3, Scene};

#[derive(Debug, Error, PartialEq)]
pub enum BoxNoiseError {
    #[error("instance {0} has no points in the ground-truth labels")]
    EmptyInstance(i32),
    #[error("scene has no ground-truth labels")]
    MissingGroundTruth,
    #[error("noise rate {0} outside the supported range [0, 1]")]
    LambdaOutOfRange(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub lambda: f64,
    pub seed: u64,
    #[serde(default = "default_clamp")]
    pub clamp_to_cover: bool,
}

fn default_clamp() -> bool {
    true
}

impl NoiseConfig {
    pub fn new(lambda: f64, seed: u64) -> Self {
        Self { lambda, seed, clamp_to_cover: true }
    }

    pub fn check(&self) -> Result<(), BoxNoiseError> {
        if (0.0..=1.0).contains(&self.lambda) {
            Ok(())
        } else {
            Err(BoxNoiseError::LambdaOutOfRange(self.lambda))
        }
    }
}

/// Random stream for one instance: ChaCha8 seeded with `seed XOR instance_id`
/// (the id sign-extended to 64 bits).
pub fn instance_rng(seed: u64, instance_id: i32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (instance_id as i64 as u64))
}

/// Minimum axis-aligned box around the points labeled `instance_id`.
pub fn tight_box(scene: &Scene, instance_id: i32) -> Result<InstanceBox, BoxNoiseError> {
    let labels = scene.gt_labels.as_ref().ok_or(BoxNoiseError::MissingGroundTruth)?;
    let (lo, hi) = labels
        .iter()
        .zip(&scene.points)
        .filter(|(&l, _)| l == instance_id)
        .fold(None, |acc: Option<(Point3, Point3)>, (_, &p)| match acc {
            None => Some((p, p)),
            Some((lo, hi)) => Some((lo.component_min(p), hi.component_max(p))),
        })
        .ok_or(BoxNoiseError::EmptyInstance(instance_id))?;
    let semantic_class = scene.boxes.iter().find(|b| b.instance_id == instance_id).map_or(-1, |b| b.semantic_class);
    Ok(InstanceBox { instance_id, semantic_class, c_min: lo, c_max: hi })
}

/// Enlarges and jitters `tight` using standard-normal draws from `rng`.
///
/// Draw order is `c_min.x, c_min.y, c_min.z, c_max.x, c_max.y, c_max.z`.
pub fn perturb_box<R: Rng + ?Sized>(tight: &InstanceBox, cfg: &NoiseConfig, rng: &mut R) -> InstanceBox {
    let mut draws = [0.0; 6];
    for d in &mut draws {
        *d = rng.sample(StandardNormal);
    }
    perturb_box_with_draws(tight, cfg.lambda, cfg.clamp_to_cover, &draws)
}

/// Deterministic core of [`perturb_box`] given the six standard-normal draws.
///
/// Per axis `X = lambda * (c_max - c_min)`; the box becomes
/// `[c_min - X/2, c_max + X/2]` and every corner coordinate is shifted by
/// `0.5 * lambda * X * draw`.
pub fn perturb_box_with_draws(tight: &InstanceBox, lambda: f64, clamp_to_cover: bool, draws: &[f64; 6]) -> InstanceBox {
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for axis in 0..3 {
        let (a, b) = (tight.c_min.axis(axis), tight.c_max.axis(axis));
        let extent = lambda * (b - a);
        let sigma = 0.5 * lambda * extent;
        let mut new_lo = a - 0.5 * extent + sigma * draws[axis];
        let mut new_hi = b + 0.5 * extent + sigma * draws[axis + 3];
        if new_lo > new_hi {
            std::mem::swap(&mut new_lo, &mut new_hi);
        }
        if clamp_to_cover {
            new_lo = new_lo.min(a);
            new_hi = new_hi.max(b);
        }
        lo[axis] = new_lo;
        hi[axis] = new_hi;
    }
    InstanceBox { c_min: lo.into(), c_max: hi.into(), ..*tight }
}

/// One noisy box per ground-truth instance, ordered by instance id.
pub fn perturb_scene_boxes(scene: &Scene, cfg: &NoiseConfig) -> Result<Vec<InstanceBox>, BoxNoiseError> {
    cfg.check()?;
    if scene.gt_labels.is_none() {
        return Err(BoxNoiseError::MissingGroundTruth);
    }
    scene
        .gt_instance_ids()
        .into_iter()
        .map(|id| {
            let tight = tight_box(scene, id)?;
            Ok(perturb_box(&tight, cfg, &mut instance_rng(cfg.seed, id)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::BACKGROUND;
    use proptest::prelude::*;

    fn unit_box() -> InstanceBox {
        InstanceBox {
            instance_id: 1,
            semantic_class: 0,
            c_min: Point3::new(0.0, 0.0, 0.0),
            c_max: Point3::new(1.0, 2.0, 1.0),
        }
    }

    fn two_instance_scene() -> Scene {
        Scene {
            points: vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 2.0, 1.0),
                Point3::new(5.0, 5.0, 0.0),
                Point3::new(5.5, 6.0, 0.5),
                Point3::new(9.0, 9.0, 9.0),
            ],
            gt_labels: Some(vec![0, 0, 3, 3, BACKGROUND]),
            ..Scene::default()
        }
    }

    #[test]
    fn tight_box_spans_instance() {
        let scene = two_instance_scene();
        let b = tight_box(&scene, 0).unwrap();
        assert_eq!((b.c_min, b.c_max), (Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 2.0, 1.0)));
    }

    #[test]
    fn single_point_instance_is_degenerate() {
        let mut scene = two_instance_scene();
        scene.gt_labels = Some(vec![0, 1, 1, 1, 1]);
        let b = tight_box(&scene, 0).unwrap();
        assert_eq!(b.c_min, b.c_max);
    }

    #[test]
    fn absent_instance_is_error() {
        assert_eq!(tight_box(&two_instance_scene(), 42), Err(BoxNoiseError::EmptyInstance(42)));
    }

    #[test]
    fn zero_lambda_is_identity() {
        let mut rng = instance_rng(7, 1);
        let out = perturb_box(&unit_box(), &NoiseConfig::new(0.0, 7), &mut rng);
        assert_eq!(out, unit_box());
    }

    #[test]
    fn enlargement_without_jitter() {
        let out = perturb_box_with_draws(&unit_box(), 0.2, true, &[0.0; 6]);
        let close = |a: Point3, b: Point3| (a.to_vector() - b.to_vector()).norm() < 1e-12;
        assert!(close(out.c_min, Point3::new(-0.1, -0.2, -0.1)));
        assert!(close(out.c_max, Point3::new(1.1, 2.2, 1.1)));
    }

    #[test]
    fn jitter_scales_with_lambda_squared() {
        // X_x = 0.2, sigma_x = 0.5 * 0.2 * 0.2 = 0.02
        let out = perturb_box_with_draws(&unit_box(), 0.2, false, &[1.0, 0.0, 0.0, 0.0, 0.0, -1.0]);
        assert!((out.c_min.x - (-0.1 + 0.02)).abs() < 1e-12);
        assert!((out.c_max.z - (1.1 - 0.02)).abs() < 1e-12);
    }

    #[test]
    fn clamping_restores_cover() {
        let out = perturb_box_with_draws(&unit_box(), 0.3, true, &[10.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(out.c_min.x <= 0.0 && out.c_max.x >= 1.0);
        let unclamped = perturb_box_with_draws(&unit_box(), 0.3, false, &[10.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(unclamped.c_min.x > 0.0);
        assert!(unclamped.is_ordered());
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let cfg = NoiseConfig::new(0.3, 1234);
        let a = perturb_box(&unit_box(), &cfg, &mut instance_rng(cfg.seed, 1));
        let b = perturb_box(&unit_box(), &cfg, &mut instance_rng(cfg.seed, 1));
        assert_eq!(a, b);
    }

    #[test]
    fn scene_boxes_at_zero_noise_are_tight() {
        let scene = two_instance_scene();
        let boxes = perturb_scene_boxes(&scene, &NoiseConfig::new(0.0, 1)).unwrap();
        assert_eq!(boxes, vec![tight_box(&scene, 0).unwrap(), tight_box(&scene, 3).unwrap()]);
    }

    #[test]
    fn clamped_scene_boxes_cover_instances() {
        let scene = two_instance_scene();
        let boxes = perturb_scene_boxes(&scene, &NoiseConfig::new(0.3, 99)).unwrap();
        let labels = scene.gt_labels.as_ref().unwrap();
        for b in &boxes {
            for (p, &l) in scene.points.iter().zip(labels) {
                if l == b.instance_id {
                    assert!(b.contains(p));
                }
            }
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_boxes() {
        let scene = two_instance_scene();
        let mut seen = std::collections::HashSet::new();
        for seed in 0..100u64 {
            let boxes = perturb_scene_boxes(&scene, &NoiseConfig::new(0.1, seed)).unwrap();
            let key: Vec<u64> = boxes
                .iter()
                .flat_map(|b| b.c_min.to_array().into_iter().chain(b.c_max.to_array()))
                .map(f64::to_bits)
                .collect();
            assert!(seen.insert(key), "seed {seed} collided");
        }
    }

    #[test]
    fn lambda_range_checked() {
        let scene = two_instance_scene();
        assert_eq!(perturb_scene_boxes(&scene, &NoiseConfig::new(1.5, 0)), Err(BoxNoiseError::LambdaOutOfRange(1.5)));
    }

    proptest! {
        #[test]
        fn volume_monotone_in_lambda(l1 in 0.0f64..1.0, l2 in 0.0f64..1.0) {
            let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
            let small = perturb_box_with_draws(&unit_box(), lo, false, &[0.0; 6]);
            let large = perturb_box_with_draws(&unit_box(), hi, false, &[0.0; 6]);
            prop_assert!(large.volume() >= small.volume());
        }

        #[test]
        fn scene_boxes_deterministic(lambda in 0.0f64..0.5, seed in any::<u64>()) {
            let scene = two_instance_scene();
            let cfg = NoiseConfig::new(lambda, seed);
            prop_assert_eq!(perturb_scene_boxes(&scene, &cfg), perturb_scene_boxes(&scene, &cfg));
        }
    }
}
