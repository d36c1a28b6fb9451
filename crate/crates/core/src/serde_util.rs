//! Serde adapters that fix the on-disk layout of nalgebra values:
//! vectors as plain arrays, quaternions as `[w, x, y, z]`, matrices row-major.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Quaternions within this distance of unit norm are taken verbatim so that
/// a load/save cycle preserves every bit.
const VERBATIM_NORM_TOL: f64 = 1e-12;
const RENORMALIZE_NORM_TOL: f64 = 1e-6;

pub mod vec3 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vector3::from(a))
    }
}

pub mod vec3_list {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[Vector3<f64>], s: S) -> Result<S::Ok, S::Error> {
        let raw: Vec<[f64; 3]> = v.iter().map(|p| [p.x, p.y, p.z]).collect();
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vector3<f64>>, D::Error> {
        let raw = Vec::<[f64; 3]>::deserialize(d)?;
        Ok(raw.into_iter().map(Vector3::from).collect())
    }
}

pub mod opt_vec2_list {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[Option<Vector2<f64>>], s: S) -> Result<S::Ok, S::Error> {
        let raw: Vec<Option<[f64; 2]>> = v.iter().map(|p| p.map(|p| [p.x, p.y])).collect();
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Option<Vector2<f64>>>, D::Error> {
        let raw = Vec::<Option<[f64; 2]>>::deserialize(d)?;
        Ok(raw.into_iter().map(|p| p.map(Vector2::from)).collect())
    }
}

pub mod unit_quat {
    use super::*;

    pub fn serialize<S: Serializer>(q: &UnitQuaternion<f64>, s: S) -> Result<S::Ok, S::Error> {
        [q.w, q.i, q.j, q.k].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<UnitQuaternion<f64>, D::Error> {
        let [w, x, y, z] = <[f64; 4]>::deserialize(d)?;
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if (n - 1.0).abs() <= VERBATIM_NORM_TOL {
            Ok(UnitQuaternion::new_unchecked(q))
        } else if (n - 1.0).abs() <= RENORMALIZE_NORM_TOL {
            Ok(UnitQuaternion::new_normalize(q))
        } else {
            Err(D::Error::custom(format!("quaternion norm {n} is not 1")))
        }
    }
}

pub mod mat3 {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3<f64>, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Matrix3::from_fn(|r, c| rows[r][c]))
    }
}

pub mod vec3_nested {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[Vec<Vector3<f64>>], s: S) -> Result<S::Ok, S::Error> {
        let raw: Vec<Vec<[f64; 3]>> = v.iter().map(|f| f.iter().map(|p| [p.x, p.y, p.z]).collect()).collect();
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<Vector3<f64>>>, D::Error> {
        let raw = Vec::<Vec<[f64; 3]>>::deserialize(d)?;
        Ok(raw.into_iter().map(|f| f.into_iter().map(Vector3::from).collect()).collect())
    }
}

pub mod opt_vec3_list {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<Vec<Vector3<f64>>>, s: S) -> Result<S::Ok, S::Error> {
        let raw: Option<Vec<[f64; 3]>> = v.as_ref().map(|v| v.iter().map(|p| [p.x, p.y, p.z]).collect());
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<Vector3<f64>>>, D::Error> {
        let raw = Option::<Vec<[f64; 3]>>::deserialize(d)?;
        Ok(raw.map(|v| v.into_iter().map(Vector3::from).collect()))
    }
}

pub mod opt_vec3_nested {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<Vec<Vec<Vector3<f64>>>>, s: S) -> Result<S::Ok, S::Error> {
        let raw: Option<Vec<Vec<[f64; 3]>>> =
            v.as_ref().map(|v| v.iter().map(|f| f.iter().map(|p| [p.x, p.y, p.z]).collect()).collect());
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<Vec<Vector3<f64>>>>, D::Error> {
        let raw = Option::<Vec<Vec<[f64; 3]>>>::deserialize(d)?;
        Ok(raw.map(|v| v.into_iter().map(|f| f.into_iter().map(Vector3::from).collect()).collect()))
    }
}
