use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Per-node displacement vectors in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub u: Vec<Vec3>,
}

impl DisplacementField {
    pub fn zeros(n: usize) -> Self {
        Self {
            u: vec![Vec3::zeros(); n],
        }
    }

    pub fn new(u: Vec<Vec3>) -> Self {
        Self { u }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().all(|v| v.iter().all(|c| c.is_finite()))
    }

    /// Row-major `[x0, y0, z0, x1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.u.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::Shape(format!(
                "flat field length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Ok(Self {
            u: flat
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
        })
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.u
            .iter()
            .flat_map(|v| [v.x as f32, v.y as f32, v.z as f32])
            .collect()
    }

    pub fn from_f32(flat: &[f32]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::Shape(format!(
                "flat field length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Ok(Self {
            u: flat
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64))
                .collect(),
        })
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            u: self.u.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn add(&self, other: &DisplacementField) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "field lengths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(Self {
            u: self.u.iter().zip(&other.u).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &DisplacementField) -> Result<Self> {
        self.add(&other.scaled(-1.0))
    }

    pub fn max_norm(&self) -> f64 {
        self.u.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// Serde adapter storing a [`Vec3`] as `[x, y, z]`.
pub mod serde_vec3 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Vec3;

    pub fn serialize<S: Serializer>(v: &Vec3, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec3, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vec3::new(a[0], a[1], a[2]))
    }
}
