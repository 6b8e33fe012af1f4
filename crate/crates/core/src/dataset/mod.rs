//! Procedural multi-view dataset: part-based box shapes rendered as depth
//! views on an azimuth ring, the robustness noise protocols, and the
//! on-disk manifest and view-image formats.

mod io;
pub mod render;
pub mod shapes;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{
    generate_dataset, load_manifest, read_view_image, write_view_image, DatasetManifest, DatasetMeta,
    GenerateOptions, ManifestRecord, Split,
};
use render::{azimuth, part_bbox, render_scene, BoxPart, Camera, Hit, Rendered, Scene};
pub use shapes::{derive_seed, make_shape, ShapeSpec, CLASS_NAMES, MAX_CLASSES};

pub const DEFAULT_VIEWS: usize = 12;

/// Ordered views of one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSequence {
    pub shape_id: String,
    /// `1 × H × W` images.
    pub views: Vec<Tensor>,
    pub camera_azimuths: Vec<f64>,
}

impl ViewSequence {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub missing_view_count: usize,
    pub occluder_scale: f64,
    pub clutter_count: usize,
    pub noise_seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            missing_view_count: 0,
            occluder_scale: 0.0,
            clutter_count: 0,
            noise_seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.missing_view_count > n {
            return Err(Error::Argument(format!(
                "missing_view_count {} exceeds {n} views",
                self.missing_view_count
            )));
        }
        if !(self.occluder_scale >= 0.0 && self.occluder_scale.is_finite()) {
            return Err(Error::Argument(format!(
                "occluder_scale must be finite and >= 0, got {}",
                self.occluder_scale
            )));
        }
        Ok(())
    }

    pub fn is_clean(&self) -> bool {
        self.missing_view_count == 0 && self.occluder_scale == 0.0 && self.clutter_count == 0
    }
}

fn render_all<'s>(
    spec: &'s ShapeSpec,
    n: usize,
    size: usize,
    mut scene_for: impl FnMut(&Camera) -> Scene<'s>,
) -> Result<Vec<Rendered>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Argument("view count must be positive".into()));
    }
    (0..n)
        .map(|k| {
            let cam = Camera::at_azimuth(azimuth(k, n));
            render_scene(&scene_for(&cam), &cam, size)
        })
        .collect()
}

fn to_sequence(spec: &ShapeSpec, rendered: Vec<Rendered>) -> ViewSequence {
    let n = rendered.len();
    ViewSequence {
        shape_id: spec.shape_id.clone(),
        views: rendered.into_iter().map(|r| r.image).collect(),
        camera_azimuths: (0..n).map(|k| azimuth(k, n)).collect(),
    }
}

/// Clean depth views of `spec` from `n` azimuths.
pub fn render_views(spec: &ShapeSpec, n: usize, image_size: usize) -> Result<ViewSequence> {
    let r = render_all(spec, n, image_size, |_| Scene {
        subject: &spec.parts,
        ..Scene::default()
    })?;
    Ok(to_sequence(spec, r))
}

/// Clean views plus the per-view image-space bbox of the discriminant part.
pub fn render_views_with_bboxes(
    spec: &ShapeSpec,
    n: usize,
    image_size: usize,
) -> Result<(ViewSequence, Vec<Option<[u32; 4]>>)> {
    let r = render_all(spec, n, image_size, |_| Scene {
        subject: &spec.parts,
        ..Scene::default()
    })?;
    let boxes = r
        .iter()
        .map(|v| part_bbox(&v.hits, image_size, spec.discriminant_part_index))
        .collect();
    Ok((to_sequence(spec, r), boxes))
}

/// Replaces `count` distinct seeded view indices with all-zero images.
pub fn apply_view_missing(seq: &ViewSequence, count: usize, seed: u64) -> Result<ViewSequence> {
    let n = seq.len();
    if count > n {
        return Err(Error::Argument(format!("cannot drop {count} of {n} views")));
    }
    let mut out = seq.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("{}/missing", seq.shape_id)));
    for k in sample(&mut rng, n, count) {
        out.views[k] = Tensor::zeros(seq.views[k].shape());
    }
    Ok(out)
}

/// Occluder cube for `spec`: seeded horizontal offset from the shape's
/// bounding-cube centre, edge `scale × bounding edge`.
pub fn occluder_for(spec: &ShapeSpec, scale: f64, seed: u64) -> Option<BoxPart> {
    if scale <= 0.0 {
        return None;
    }
    let (c, edge) = spec.bounding_cube();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("{}/occluder", spec.shape_id)));
    let psi = rng.gen_range(0.0..std::f64::consts::TAU);
    let rho = rng.gen_range(0.4..0.7) * edge;
    let h = 0.5 * scale * edge;
    Some(BoxPart::new(
        [c[0] + rho * psi.cos(), c[1], c[2] + rho * psi.sin()],
        [h, h, h],
    ))
}

pub fn apply_occlusion(
    spec: &ShapeSpec,
    n: usize,
    image_size: usize,
    occluder_scale: f64,
    seed: u64,
) -> Result<ViewSequence> {
    render_noisy(
        spec,
        n,
        image_size,
        &NoiseConfig {
            occluder_scale,
            noise_seed: seed,
            ..NoiseConfig::default()
        },
        MAX_CLASSES,
    )
}

pub fn apply_clutter(
    spec: &ShapeSpec,
    n: usize,
    image_size: usize,
    clutter_count: usize,
    seed: u64,
    class_count: usize,
) -> Result<ViewSequence> {
    render_noisy(
        spec,
        n,
        image_size,
        &NoiseConfig {
            clutter_count,
            noise_seed: seed,
            ..NoiseConfig::default()
        },
        class_count,
    )
}

/// Distractor part-sets at half scale, each with a lateral image-plane slot.
struct Distractor {
    parts: Vec<BoxPart>,
    lateral: (f64, f64),
}

const CLUTTER_SCALE: f64 = 0.5;
const CLUTTER_MARGIN: f64 = 0.05;

fn distractors(spec: &ShapeSpec, count: usize, seed: u64, class_count: usize) -> Result<Vec<Distractor>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let others: Vec<usize> = (0..class_count.min(MAX_CLASSES))
        .filter(|&c| c != spec.class_id)
        .collect();
    if others.is_empty() {
        return Err(Error::Argument("clutter needs at least one other class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("{}/clutter", spec.shape_id)));
    (0..count)
        .map(|j| {
            let class = others[rng.gen_range(0..others.len())];
            let parts = shapes::sample_parts(class, &mut rng)?
                .into_iter()
                .map(|p| BoxPart::new(p.center.map(|v| v * CLUTTER_SCALE), p.half.map(|v| v * CLUTTER_SCALE)))
                .collect();
            let angle = std::f64::consts::TAU * (j as f64 + rng.gen_range(0.0..0.5)) / count as f64;
            let radius = rng.gen_range(0.45..0.65);
            Ok(Distractor {
                parts,
                lateral: (radius * angle.cos(), radius * angle.sin()),
            })
        })
        .collect()
}

fn corners(p: &BoxPart) -> impl Iterator<Item = [f64; 3]> + '_ {
    (0..8).map(move |m| {
        std::array::from_fn(|a| p.center[a] + if m >> a & 1 == 1 { p.half[a] } else { -p.half[a] })
    })
}

/// Places each distractor in the camera's lateral slot, entirely farther
/// along the view ray than every subject point.
fn place_behind(subject: &[BoxPart], ds: &[Distractor], cam: &Camera) -> Vec<BoxPart> {
    let far = subject
        .iter()
        .flat_map(corners)
        .map(|c| cam.depth_of(c))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::new();
    for d in ds {
        let near_rel = d
            .parts
            .iter()
            .flat_map(corners)
            .map(|c| cam.depth_of(c))
            .fold(f64::INFINITY, f64::min);
        let back = far - near_rel + CLUTTER_MARGIN;
        let (a, b) = d.lateral;
        let shift: [f64; 3] =
            std::array::from_fn(|i| a * cam.right[i] + b * cam.up[i] - back * cam.toward[i]);
        out.extend(
            d.parts
                .iter()
                .map(|p| BoxPart::new(std::array::from_fn(|i| p.center[i] + shift[i]), p.half)),
        );
    }
    out
}

/// Renders `spec` under `noise`: occluder and clutter enter the scene, then
/// the missing-view protocol zeroes the selected views.
pub fn render_noisy(
    spec: &ShapeSpec,
    n: usize,
    image_size: usize,
    noise: &NoiseConfig,
    class_count: usize,
) -> Result<ViewSequence> {
    noise.validate(n)?;
    let occluder = occluder_for(spec, noise.occluder_scale, noise.noise_seed);
    let ds = distractors(spec, noise.clutter_count, noise.noise_seed, class_count)?;
    let r = render_all(spec, n, image_size, |cam| Scene {
        subject: &spec.parts,
        occluder,
        clutter: place_behind(&spec.parts, &ds, cam),
    })?;
    let seq = to_sequence(spec, r);
    if noise.missing_view_count == 0 {
        return Ok(seq);
    }
    apply_view_missing(&seq, noise.missing_view_count, noise.noise_seed)
}

/// Fraction of pixels where the occluder is the nearest surface, averaged over views.
pub fn occluded_fraction(spec: &ShapeSpec, n: usize, image_size: usize, scale: f64, seed: u64) -> Result<f64> {
    let occluder = occluder_for(spec, scale, seed);
    let r = render_all(spec, n, image_size, |_| Scene {
        subject: &spec.parts,
        occluder,
        ..Scene::default()
    })?;
    let total = (n * image_size * image_size) as f64;
    let hidden = r
        .iter()
        .flat_map(|v| v.hits.iter())
        .filter(|h| **h == Hit::Occluder)
        .count();
    Ok(hidden as f64 / total)
}
