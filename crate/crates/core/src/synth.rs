//! Deterministic synthetic LiDAR sequences.
//!
//! The world is an endless strip along +x, generated tile by tile from the seed:
//! a ground plane (class 0), tall strongly-returning structures (class 1) and
//! low weakly-returning vegetation (class 2). The sensor drives along the x axis
//! following a piecewise-constant motion profile, so static segments render
//! identical frames and moving segments do not.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pc_io::{Point, PointCloud, RangeImage, RangeProjection};

pub const CLASS_GROUND: u32 = 0;
pub const CLASS_STRUCTURE: u32 = 1;
pub const CLASS_VEGETATION: u32 = 2;
pub const SYNTH_CLASSES: usize = 3;

const TILE_LENGTH: f64 = 10.0;
const GROUND_Z: f64 = -1.73;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSegment {
    pub frames: usize,
    /// Sensor displacement along x per frame, meters.
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Motion profile, repeated cyclically when shorter than the sequence.
    pub segments: Vec<MotionSegment>,
    pub sensor_range: f64,
    pub min_range: f64,
    /// Ground points per square meter.
    pub ground_density: f64,
    pub objects_per_tile: usize,
    pub points_per_object: usize,
    pub projection: RangeProjection,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            segments: vec![MotionSegment {
                frames: 1,
                speed: 1.0,
            }],
            sensor_range: 20.0,
            min_range: 2.5,
            ground_density: 1.0,
            objects_per_tile: 3,
            points_per_object: 120,
            projection: RangeProjection::default(),
        }
    }
}

impl SceneSpec {
    pub fn static_scene() -> Self {
        Self::moving(0.0)
    }

    pub fn moving(speed: f64) -> Self {
        Self {
            segments: vec![MotionSegment { frames: 1, speed }],
            ..Self::default()
        }
    }

    /// `static_frames` stationary frames followed by `moving_frames` at `speed`.
    pub fn two_regime(static_frames: usize, moving_frames: usize, speed: f64) -> Self {
        Self {
            segments: vec![
                MotionSegment {
                    frames: static_frames,
                    speed: 0.0,
                },
                MotionSegment {
                    frames: moving_frames,
                    speed,
                },
            ],
            ..Self::default()
        }
    }

    /// Stop-and-go traffic: segments cycling through several speeds.
    pub fn mixed() -> Self {
        let speeds = [0.0, 0.25, 1.0, 0.05, 2.0, 0.5, 0.0, 1.5];
        Self {
            segments: speeds
                .iter()
                .enumerate()
                .map(|(i, &speed)| MotionSegment {
                    frames: 7 + 3 * (i % 4),
                    speed,
                })
                .collect(),
            ..Self::default()
        }
    }

    fn speed_at(&self, frame: usize) -> f64 {
        let total: usize = self.segments.iter().map(|s| s.frames).sum();
        if total == 0 {
            return 0.0;
        }
        let mut t = frame % total;
        for s in &self.segments {
            if t < s.frames {
                return s.speed;
            }
            t -= s.frames;
        }
        unreachable!("frame index reduced modulo the profile length")
    }

    /// Sensor x position for every frame; frame 0 sits at the origin.
    pub fn trajectory(&self, n_frames: usize) -> Vec<f64> {
        let mut pos = Vec::with_capacity(n_frames);
        let mut x = 0.0;
        for t in 0..n_frames {
            if t > 0 {
                x += self.speed_at(t);
            }
            pos.push(x);
        }
        pos
    }
}

#[derive(Debug, Clone, Copy)]
struct WorldPoint {
    x: f64,
    y: f64,
    z: f64,
    /// Material return strength; intensity falls off as strength / r².
    strength: f64,
    label: u32,
}

fn tile_seed(seed: u64, tile: i64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ (tile as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn generate_tile(spec: &SceneSpec, seed: u64, tile: i64) -> Vec<WorldPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(tile_seed(seed, tile));
    let x0 = tile as f64 * TILE_LENGTH;
    let half_width = spec.sensor_range;
    let mut pts = Vec::new();

    let n_ground = (spec.ground_density * TILE_LENGTH * 2.0 * half_width).round() as usize;
    for _ in 0..n_ground {
        pts.push(WorldPoint {
            x: x0 + rng.gen::<f64>() * TILE_LENGTH,
            y: rng.gen_range(-half_width..half_width),
            z: GROUND_Z + rng.gen_range(-0.03..0.03),
            strength: rng.gen_range(0.3..0.7),
            label: CLASS_GROUND,
        });
    }

    for _ in 0..spec.objects_per_tile {
        let structure = rng.gen_bool(0.5);
        let (footprint, top, strength, label) = if structure {
            (
                rng.gen_range(0.3..1.2),
                rng.gen_range(0.3..1.0),
                (2.4, 3.2),
                CLASS_STRUCTURE,
            )
        } else {
            (
                rng.gen_range(1.2..2.5),
                rng.gen_range(-1.1..-0.6),
                (1.0, 1.6),
                CLASS_VEGETATION,
            )
        };
        let cx = x0 + rng.gen::<f64>() * TILE_LENGTH;
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let cy = side * rng.gen_range(3.5..(half_width - 1.0).max(4.0));
        let bottom = GROUND_Z + 0.05;
        for _ in 0..spec.points_per_object {
            pts.push(WorldPoint {
                x: cx + rng.gen_range(-0.5..0.5) * footprint,
                y: cy + rng.gen_range(-0.5..0.5) * footprint,
                z: rng.gen_range(bottom..top),
                strength: rng.gen_range(strength.0..strength.1),
                label,
            });
        }
    }
    pts
}

/// Renders `n_frames` labeled frames and their range images; a pure function of its inputs.
pub fn synth_sequence(
    spec: &SceneSpec,
    n_frames: usize,
    seed: u64,
) -> Vec<(PointCloud, RangeImage)> {
    let mut tiles: HashMap<i64, Vec<WorldPoint>> = HashMap::new();
    let range2 = spec.sensor_range * spec.sensor_range;
    spec.trajectory(n_frames)
        .into_iter()
        .enumerate()
        .map(|(frame, sx)| {
            let first = ((sx - spec.sensor_range) / TILE_LENGTH).floor() as i64;
            let last = ((sx + spec.sensor_range) / TILE_LENGTH).floor() as i64;
            let mut points = Vec::new();
            let mut labels = Vec::new();
            for tile in first..=last {
                let world = tiles
                    .entry(tile)
                    .or_insert_with(|| generate_tile(spec, seed, tile));
                for wp in world.iter() {
                    let (x, y, z) = (wp.x - sx, wp.y, wp.z);
                    if x * x + y * y > range2 {
                        continue;
                    }
                    let r2 = x * x + y * y + z * z;
                    if r2 < spec.min_range * spec.min_range {
                        continue;
                    }
                    let intensity = (wp.strength / r2).clamp(0.0, 1.0);
                    points.push(Point::new(x as f32, y as f32, z as f32, intensity as f32));
                    labels.push(wp.label);
                }
            }
            let pc = PointCloud::new(points, Some(labels))
                .expect("synthetic points are finite")
                .with_ids(0, frame as u32);
            let img = spec
                .projection
                .project(&pc)
                .expect("projection parameters validated by construction");
            (pc, img)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(mut spec: SceneSpec) -> SceneSpec {
        spec.projection = RangeProjection {
            width: 128,
            height: 32,
            vfov_deg: (-25.0, 3.0),
        };
        spec
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = small_spec(SceneSpec::moving(1.0));
        assert_eq!(synth_sequence(&spec, 3, 7), synth_sequence(&spec, 3, 7));
        assert_ne!(
            synth_sequence(&spec, 1, 7)[0].0,
            synth_sequence(&spec, 1, 8)[0].0
        );
    }

    #[test]
    fn static_profile_renders_identical_range_images() {
        let frames = synth_sequence(&small_spec(SceneSpec::static_scene()), 4, 3);
        for w in frames.windows(2) {
            assert_eq!(w[0].1, w[1].1);
        }
    }

    #[test]
    fn moving_profile_changes_range_images() {
        let frames = synth_sequence(&small_spec(SceneSpec::moving(1.0)), 4, 3);
        for w in frames.windows(2) {
            let differing = w[0]
                .1
                .values()
                .iter()
                .zip(w[1].1.values())
                .filter(|(a, b)| a != b)
                .count();
            assert!(differing >= 1);
        }
    }

    #[test]
    fn frames_are_labeled_with_all_classes() {
        let (pc, img) = &synth_sequence(&small_spec(SceneSpec::default()), 1, 11)[0];
        let labels = pc.labels().unwrap();
        for c in 0..SYNTH_CLASSES as u32 {
            assert!(labels.contains(&c), "class {c} missing");
        }
        assert!(img.returns() <= pc.len());
        assert!(pc
            .points()
            .iter()
            .all(|p| (0.0..=1.0).contains(&p.intensity)));
    }

    #[test]
    fn trajectory_follows_profile() {
        let spec = SceneSpec::two_regime(3, 2, 1.5);
        assert_eq!(spec.trajectory(6), vec![0.0, 0.0, 0.0, 1.5, 3.0, 3.0]);
    }
}
