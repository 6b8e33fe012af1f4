//! Part-based shape classes: a shared chair-like base plus one
//! class-specific discriminant part.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::BoxPart;
use crate::error::{Error, Result};

pub const MAX_CLASSES: usize = 8;

pub const CLASS_NAMES: [&str; MAX_CLASSES] = [
    "backrest",
    "armrest",
    "pole",
    "seatbox",
    "crossbar",
    "skirt",
    "sideblock",
    "headrest",
];

const BASE: [BoxPart; 3] = [
    // seat
    BoxPart {
        center: [0.0, 0.0, 0.0],
        half: [0.3, 0.04, 0.3],
    },
    // post
    BoxPart {
        center: [0.0, -0.2, 0.0],
        half: [0.04, 0.16, 0.04],
    },
    // foot plate
    BoxPart {
        center: [0.0, -0.4, 0.0],
        half: [0.25, 0.03, 0.25],
    },
];

const DISCRIMINANT: [BoxPart; MAX_CLASSES] = [
    BoxPart {
        center: [0.0, 0.25, -0.27],
        half: [0.28, 0.2, 0.03],
    },
    BoxPart {
        center: [-0.33, 0.12, 0.0],
        half: [0.03, 0.08, 0.25],
    },
    BoxPart {
        center: [0.22, 0.25, 0.22],
        half: [0.04, 0.22, 0.04],
    },
    BoxPart {
        center: [0.0, 0.14, 0.05],
        half: [0.12, 0.09, 0.12],
    },
    BoxPart {
        center: [0.0, 0.08, 0.0],
        half: [0.47, 0.03, 0.04],
    },
    BoxPart {
        center: [0.0, -0.12, 0.33],
        half: [0.25, 0.1, 0.03],
    },
    BoxPart {
        center: [0.38, -0.22, 0.0],
        half: [0.08, 0.12, 0.1],
    },
    BoxPart {
        center: [0.0, 0.43, 0.0],
        half: [0.1, 0.05, 0.25],
    },
];

/// Relative jitter bound on part positions and sizes.
pub const JITTER: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub shape_id: String,
    pub class_id: usize,
    pub parts: Vec<BoxPart>,
    pub discriminant_part_index: usize,
    pub jitter_seed: u64,
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::Argument(format!("shape {} has no parts", self.shape_id)));
        }
        if self.discriminant_part_index >= self.parts.len() {
            return Err(Error::Argument(format!(
                "shape {}: discriminant index {} out of {} parts",
                self.shape_id,
                self.discriminant_part_index,
                self.parts.len()
            )));
        }
        if let Some(p) = self.parts.iter().find(|p| !p.intersects_unit_cube()) {
            return Err(Error::Argument(format!(
                "shape {}: part {p:?} misses the unit cube",
                self.shape_id
            )));
        }
        if self.parts.iter().any(|p| p.half.iter().any(|&h| h.is_nan() || h <= 0.0)) {
            return Err(Error::Argument(format!("shape {}: degenerate part", self.shape_id)));
        }
        Ok(())
    }

    /// Axis-aligned bounds `(min, max)` over all parts.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.parts {
            let (a, b) = (p.min(), p.max());
            for i in 0..3 {
                lo[i] = lo[i].min(a[i]);
                hi[i] = hi[i].max(b[i]);
            }
        }
        (lo, hi)
    }

    /// Centre and edge length of the smallest axis-aligned cube around the shape.
    pub fn bounding_cube(&self) -> ([f64; 3], f64) {
        let (lo, hi) = self.bounds();
        let center = std::array::from_fn(|i| 0.5 * (lo[i] + hi[i]));
        let edge = (0..3).map(|i| hi[i] - lo[i]).fold(0.0, f64::max);
        (center, edge)
    }

    pub fn rotated_y(&self, angle: f64) -> ShapeSpec {
        ShapeSpec {
            parts: self.parts.iter().map(|p| p.rotated_y(angle)).collect(),
            ..self.clone()
        }
    }
}

/// 64-bit seed derived from a global seed and a string key.
pub fn derive_seed(global_seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

pub fn shape_id(class_id: usize, index: usize) -> String {
    format!("c{class_id:02}_s{index:03}")
}

fn jittered<R: Rng + ?Sized>(p: &BoxPart, rng: &mut R) -> BoxPart {
    let mut out = *p;
    for a in 0..3 {
        out.center[a] += rng.gen_range(-JITTER..=JITTER) * p.half[a];
        out.half[a] *= 1.0 + rng.gen_range(-JITTER..=JITTER);
    }
    out
}

/// Parts of one class instance drawn from `rng`; the discriminant part is last.
pub fn sample_parts<R: Rng + ?Sized>(class_id: usize, rng: &mut R) -> Result<Vec<BoxPart>> {
    let disc = DISCRIMINANT.get(class_id).ok_or_else(|| {
        Error::Argument(format!("class id {class_id} exceeds the {MAX_CLASSES} available classes"))
    })?;
    let mut parts: Vec<BoxPart> = BASE.iter().map(|p| jittered(p, rng)).collect();
    parts.push(jittered(disc, rng));
    Ok(parts)
}

/// Deterministic shape `index` of `class_id` under `global_seed`.
pub fn make_shape(global_seed: u64, class_id: usize, index: usize) -> Result<ShapeSpec> {
    make_shape_with_id(global_seed, class_id, &shape_id(class_id, index))
}

/// Shape of `class_id` whose jitter stream is keyed by `id`.
pub fn make_shape_with_id(global_seed: u64, class_id: usize, id: &str) -> Result<ShapeSpec> {
    use rand::SeedableRng;
    let id = id.to_string();
    let jitter_seed = derive_seed(global_seed, &id);
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
    let parts = sample_parts(class_id, &mut rng)?;
    let spec = ShapeSpec {
        shape_id: id,
        class_id,
        discriminant_part_index: parts.len() - 1,
        parts,
        jitter_seed,
    };
    spec.validate()?;
    Ok(spec)
}
