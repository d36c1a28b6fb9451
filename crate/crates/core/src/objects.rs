//! Bundled example objects.
//!
//! Eight household items approximated as solid boxes. Masses and dimensions
//! are plausible hand-measured values, not calibrated data. Each object gets
//! ten named keypoints: the eight box corners plus two asymmetric face
//! landmarks so that no two keypoints are interchangeable under a symmetry.

use nalgebra::Vector3;

use crate::physics::{Keypoint, ObjectModel};

/// Name, mass (kg) and full box extents (m).
const ROSTER: [(&str, f64, [f64; 3]); 8] = [
    ("toy_airplane", 0.17, [0.24, 0.22, 0.07]),
    ("skillet", 0.95, [0.42, 0.26, 0.05]),
    ("pitcher", 0.60, [0.17, 0.13, 0.24]),
    ("power_drill", 0.90, [0.19, 0.06, 0.19]),
    ("mustard_bottle", 0.43, [0.09, 0.06, 0.19]),
    ("bleach_cleanser", 1.13, [0.10, 0.07, 0.25]),
    ("mug", 0.12, [0.12, 0.09, 0.08]),
    ("tomato_soup_can", 0.35, [0.07, 0.07, 0.10]),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    ROSTER.iter().map(|(n, _, _)| *n)
}

/// Looks up a bundled object by name.
pub fn named_object(name: &str) -> Option<ObjectModel> {
    let (n, mass, ext) = ROSTER.iter().find(|(n, _, _)| *n == name)?;
    Some(box_object(n, *mass, Vector3::from(*ext)))
}

/// Box-shaped object with corner and face keypoints.
pub fn box_object(name: &str, mass: f64, extents: Vector3<f64>) -> ObjectModel {
    let half = extents / 2.0;
    let mut keypoints = Vec::with_capacity(10);
    for (i, sx) in [-1.0, 1.0].into_iter().enumerate() {
        for (j, sy) in [-1.0, 1.0].into_iter().enumerate() {
            for (l, sz) in [-1.0, 1.0].into_iter().enumerate() {
                keypoints.push(Keypoint {
                    name: format!("corner_{i}{j}{l}"),
                    position: Vector3::new(sx * half.x, sy * half.y, sz * half.z),
                });
            }
        }
    }
    keypoints.push(Keypoint {
        name: "top_marker".into(),
        position: Vector3::new(0.3 * half.x, -0.2 * half.y, half.z),
    });
    keypoints.push(Keypoint {
        name: "side_marker".into(),
        position: Vector3::new(half.x, 0.4 * half.y, -0.1 * half.z),
    });
    ObjectModel {
        name: Some(name.to_string()),
        mass,
        inertia_body: ObjectModel::box_inertia(mass, extents),
        keypoints,
    }
}
