//! Per-object point extraction and resampling to a fixed point count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Frame, OrientedBox3, Point3, PointCloud};

pub const DEFAULT_POINTS_PER_OBJECT: usize = 128;

/// Exactly `points.len()` box-local points; entries past `valid_count` are
/// zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPoints {
    pub points: Vec<Point3>,
    pub valid_count: usize,
}

impl ObjectPoints {
    pub fn empty(capacity: usize) -> Self {
        Self {
            points: vec![Point3::ZERO; capacity],
            valid_count: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.points.len()
    }

    pub fn valid(&self) -> &[Point3] {
        &self.points[..self.valid_count]
    }
}

/// Collects the cloud points inside `bbox`, expressed in the box frame, and
/// resamples them to `capacity` points.
///
/// More than `capacity` interior points are downsampled uniformly without
/// replacement; the draw depends only on `seed`. Fewer are zero-padded.
pub fn crop_object(cloud: &PointCloud, bbox: &OrientedBox3, capacity: usize, seed: u64) -> ObjectPoints {
    assert!(capacity >= 1, "points per object must be at least 1");
    let interior: Vec<Point3> = cloud
        .points
        .iter()
        .filter(|p| bbox.contains(p))
        .map(|p| bbox.to_local(p))
        .collect();

    let mut out = ObjectPoints::empty(capacity);
    if interior.len() > capacity {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, interior.len(), capacity).into_vec();
        picked.sort_unstable();
        for (slot, &k) in picked.iter().enumerate() {
            out.points[slot] = interior[k];
        }
        out.valid_count = capacity;
    } else {
        out.points[..interior.len()].copy_from_slice(&interior);
        out.valid_count = interior.len();
    }
    out
}

/// Seed for one object slot of one frame.
pub fn slot_seed(seed: u64, frame_index: u64, slot: usize) -> u64 {
    seed ^ mix64(mix64(frame_index) ^ (slot as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

// splitmix64 finalizer
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One crop per detection, in detection order.
pub fn crop_frame(frame: &Frame, capacity: usize, seed: u64) -> Vec<ObjectPoints> {
    frame
        .detections
        .iter()
        .enumerate()
        .map(|(slot, d)| crop_object(&frame.cloud, &d.bbox, capacity, slot_seed(seed, frame.index, slot)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Detection;
    use rand::Rng;

    fn unit_box() -> OrientedBox3 {
        OrientedBox3::new(Point3::ZERO, 1.0, 1.0, 1.0, 0.0).unwrap()
    }

    #[test]
    fn empty_cloud_gives_zeros() {
        let o = crop_object(&PointCloud::default(), &unit_box(), 16, 1);
        assert_eq!(o.valid_count, 0);
        assert!(o.points.iter().all(|p| *p == Point3::ZERO));
        assert_eq!(o.capacity(), 16);
    }

    #[test]
    fn identity_frame_with_padding() {
        let pts = vec![Point3::new(0.1, 0.2, 0.3), Point3::new(-0.4, 0.0, 0.1), Point3::new(0.5, -0.5, -0.5)];
        let o = crop_object(&PointCloud::new(0, pts.clone()), &unit_box(), 4, 3);
        assert_eq!(o.valid_count, 3);
        assert_eq!(&o.points[..3], &pts[..]);
        assert_eq!(o.points[3], Point3::ZERO);
    }

    fn interior_cloud(n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = (0..n)
            .map(|_| Point3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect();
        PointCloud::new(0, pts)
    }

    #[test]
    fn downsampling_is_seeded_and_distinct() {
        let cloud = interior_cloud(1000);
        let a = crop_object(&cloud, &unit_box(), 128, 42);
        let b = crop_object(&cloud, &unit_box(), 128, 42);
        assert_eq!(a, b);
        assert_eq!(a.valid_count, 128);
        // every pick is a source point and no source point is picked twice
        let mut idx: Vec<usize> = a
            .points
            .iter()
            .map(|p| cloud.points.iter().position(|q| q == p).expect("picked point not in source"))
            .collect();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 128);
        let c = crop_object(&cloud, &unit_box(), 128, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn frame_crops_follow_detection_order() {
        let cloud = interior_cloud(50);
        let far = OrientedBox3::new(Point3::new(10.0, 0.0, 0.0), 1.0, 1.0, 1.0, 0.0).unwrap();
        let frame = Frame {
            index: 3,
            cloud,
            detections: vec![
                Detection::new(far, 0.9, None).unwrap(),
                Detection::new(unit_box(), 0.8, None).unwrap(),
            ],
        };
        let crops = crop_frame(&frame, 32, 9);
        assert_eq!(crops.len(), 2);
        assert_eq!(crops[0].valid_count, 0);
        assert_eq!(crops[1].valid_count, 32);
        assert_eq!(crops, crop_frame(&frame, 32, 9));
        assert!(crop_frame(&Frame::default(), 32, 9).is_empty());
    }

    #[test]
    fn slot_seeds_differ() {
        assert_ne!(slot_seed(1, 0, 0), slot_seed(1, 0, 1));
        assert_ne!(slot_seed(1, 0, 0), slot_seed(1, 1, 0));
        assert_eq!(slot_seed(1, 4, 2), slot_seed(1, 4, 2));
    }

    proptest::proptest! {
        #[test]
        fn local_points_inside_extents_and_translation_invariant(
            yaw in -3.1f64..3.1, tx in -40.0f64..40.0, ty in -40.0f64..40.0, seed in 0u64..1000,
        ) {
            let b = OrientedBox3::new(Point3::new(1.0, 2.0, 0.0), 2.0, 1.0, 1.5, yaw).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Point3> = (0..300)
                .map(|_| Point3::new(rng.random_range(-1.0..3.0), rng.random_range(0.0..4.0), rng.random_range(-1.0..1.0)))
                .collect();
            let o = crop_object(&PointCloud::new(0, pts.clone()), &b, 64, seed);
            for v in o.valid() {
                proptest::prop_assert!(v.x.abs() <= 1.0 + 1e-9 && v.y.abs() <= 0.5 + 1e-9 && v.z.abs() <= 0.75 + 1e-9);
            }
            for v in &o.points[o.valid_count..] {
                proptest::prop_assert_eq!(*v, Point3::ZERO);
            }
            let t = Point3::new(tx, ty, 0.0);
            let moved_box = OrientedBox3::new(b.center.add(&t), 2.0, 1.0, 1.5, yaw).unwrap();
            let moved: Vec<Point3> = pts.iter().map(|p| p.add(&t)).collect();
            let o2 = crop_object(&PointCloud::new(0, moved), &moved_box, 64, seed);
            // translation by large offsets can flip points lying within rounding of a face
            if o2.valid_count == o.valid_count {
                for (a, b) in o.valid().iter().zip(o2.valid()) {
                    proptest::prop_assert!(a.distance(b) < 1e-9);
                }
            }
        }
    }
}
