//! Orthographic ray-cast depth rendering of axis-aligned boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ELEVATION_DEG: f64 = 30.0;
/// Half side of the square image window in world units.
pub const WINDOW_HALF: f64 = 0.9;
/// Distance of the ray origins from the world origin.
const EYE_DISTANCE: f64 = 3.0;
/// Depth range mapped onto pixel intensities.
const DEPTH_RANGE: f64 = 3.0;
const MIN_INTENSITY: f64 = 0.05;

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPart {
    pub center: [f64; 3],
    pub half: [f64; 3],
}

impl BoxPart {
    pub fn new(center: [f64; 3], half: [f64; 3]) -> Self {
        BoxPart { center, half }
    }

    pub fn min(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.center[i] - self.half[i])
    }

    pub fn max(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.center[i] + self.half[i])
    }

    /// Entry distance of the ray `origin + t·dir`, if it hits.
    pub fn hit(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let (lo, hi) = (self.min(), self.max());
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < lo[a] || origin[a] > hi[a] {
                    return None;
                }
            } else {
                let ta = (lo[a] - origin[a]) / dir[a];
                let tb = (hi[a] - origin[a]) / dir[a];
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        (t0 <= t1 && t1 >= 0.0).then_some(t0.max(0.0))
    }

    /// Rotation about the vertical axis by `angle` radians.
    pub fn rotated_y(&self, angle: f64) -> BoxPart {
        let (s, c) = snapped_sin_cos(angle);
        let [x, y, z] = self.center;
        let center = [x * c + z * s, y, -x * s + z * c];
        let [hx, hy, hz] = self.half;
        let half = [
            (hx * c).abs() + (hz * s).abs(),
            hy,
            (hx * s).abs() + (hz * c).abs(),
        ];
        BoxPart { center, half }
    }

    pub fn intersects_unit_cube(&self) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|a| lo[a] <= 0.5 && hi[a] >= -0.5)
    }
}

/// `sin`/`cos` with quarter-turn values made exact.
pub fn snapped_sin_cos(angle: f64) -> (f64, f64) {
    let snap = |v: f64| {
        if v.abs() < 1e-12 {
            0.0
        } else if (v.abs() - 1.0).abs() < 1e-12 {
            v.signum()
        } else {
            v
        }
    };
    (snap(angle.sin()), snap(angle.cos()))
}

/// Orthographic camera on the azimuth ring at the fixed elevation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    /// Unit vector from the origin towards the camera.
    pub toward: [f64; 3],
    pub right: [f64; 3],
    pub up: [f64; 3],
}

impl Camera {
    pub fn at_azimuth(azimuth: f64) -> Camera {
        let (st, ct) = snapped_sin_cos(azimuth);
        let (sp, cp) = snapped_sin_cos(ELEVATION_DEG.to_radians());
        Camera {
            toward: [cp * st, sp, cp * ct],
            right: [ct, 0.0, -st],
            up: [-sp * st, cp, -sp * ct],
        }
    }

    /// Ray origin for the centre of pixel `(row, col)`; rays travel along `-toward`.
    pub fn ray_origin(&self, row: usize, col: usize, size: usize) -> [f64; 3] {
        let pix = 2.0 * WINDOW_HALF / size as f64;
        let a = (col as f64 + 0.5) * pix - WINDOW_HALF;
        let b = WINDOW_HALF - (row as f64 + 0.5) * pix;
        std::array::from_fn(|i| a * self.right[i] + b * self.up[i] + EYE_DISTANCE * self.toward[i])
    }

    pub fn ray_dir(&self) -> [f64; 3] {
        self.toward.map(|v| -v)
    }

    /// Projection of a world point onto the ray axis (larger is farther).
    pub fn depth_of(&self, p: [f64; 3]) -> f64 {
        -(0..3).map(|i| p[i] * self.toward[i]).sum::<f64>()
    }
}

/// Which scene element a pixel shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Hit {
    Background,
    Subject { part: usize },
    Occluder,
    Clutter,
}

/// A scene to render: subject parts plus optional nuisance geometry.
#[derive(Clone, Debug, Default)]
pub struct Scene<'a> {
    pub subject: &'a [BoxPart],
    pub occluder: Option<BoxPart>,
    pub clutter: Vec<BoxPart>,
}

/// One rendered view: intensities in `[0,1]` and the per-pixel hit labels.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: Tensor,
    pub hits: Vec<Hit>,
}

fn intensity(t: f64) -> f64 {
    let nearest = EYE_DISTANCE - 3f64.sqrt() / 2.0;
    let v = (1.0 - (t - nearest) / DEPTH_RANGE).clamp(MIN_INTENSITY, 1.0);
    v as f32 as f64
}

/// Renders `scene` from `camera`. Ties in depth go to the subject, then the
/// occluder, then clutter.
pub fn render_scene(scene: &Scene<'_>, camera: &Camera, size: usize) -> Result<Rendered> {
    if size == 0 {
        return Err(Error::Argument("image size must be positive".into()));
    }
    let dir = camera.ray_dir();
    let mut data = vec![0.0; size * size];
    let mut hits = vec![Hit::Background; size * size];
    for row in 0..size {
        for col in 0..size {
            let o = camera.ray_origin(row, col, size);
            let mut best: Option<(f64, Hit)> = None;
            let mut consider = |t: Option<f64>, h: Hit| {
                if let Some(t) = t {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, h));
                    }
                }
            };
            for (k, p) in scene.subject.iter().enumerate() {
                consider(p.hit(o, dir), Hit::Subject { part: k });
            }
            if let Some(occ) = &scene.occluder {
                consider(occ.hit(o, dir), Hit::Occluder);
            }
            for c in &scene.clutter {
                consider(c.hit(o, dir), Hit::Clutter);
            }
            if let Some((t, h)) = best {
                data[row * size + col] = intensity(t);
                hits[row * size + col] = h;
            }
        }
    }
    Ok(Rendered {
        image: Tensor::new(&[1, size, size], data)?,
        hits,
    })
}

/// Inclusive `[x0, y0, x1, y1]` (column, row) extent of the pixels showing
/// subject part `part`, or `None` when the part is not visible.
pub fn part_bbox(hits: &[Hit], size: usize, part: usize) -> Option<[u32; 4]> {
    let mut bb: Option<[u32; 4]> = None;
    for (i, h) in hits.iter().enumerate() {
        if *h == (Hit::Subject { part }) {
            let (x, y) = ((i % size) as u32, (i / size) as u32);
            bb = Some(match bb {
                None => [x, y, x, y],
                Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x), y1.max(y)],
            });
        }
    }
    bb
}

/// Azimuth of view `k` out of `n`.
pub fn azimuth(k: usize, n: usize) -> f64 {
    2.0 * std::f64::consts::PI * k as f64 / n as f64
}
