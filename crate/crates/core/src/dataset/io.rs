//! Dataset generation, manifest files and the PVWI view-image format.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::shapes::{make_shape_with_id, ShapeSpec, CLASS_NAMES, MAX_CLASSES};
use super::{render_views_with_bboxes, ViewSequence, DEFAULT_VIEWS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PVWI_MAGIC: &[u8; 4] = b"PVWI";
const PVWI_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "dataset.json";

pub fn write_view_image(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = match image.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("view image must be H×W, got {s:?}"))),
    };
    let mut buf = Vec::with_capacity(16 + 4 * h * w);
    buf.extend_from_slice(PVWI_MAGIC);
    buf.extend_from_slice(&PVWI_VERSION.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in image.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a PVWI file as a `1 × H × W` tensor.
pub fn read_view_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != PVWI_MAGIC {
        return Err(Error::format(path, "missing PVWI header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
    if word(4) != PVWI_VERSION {
        return Err(Error::format(path, format!("unsupported PVWI version {}", word(4))));
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    if h == 0 || w == 0 || bytes.len() != 16 + 4 * h * w {
        return Err(Error::format(
            path,
            format!("{h}×{w} image needs {} bytes, file has {}", 16 + 4 * h * w, bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    Tensor::new(&[1, h, w], data).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub shape_id: String,
    pub class_id: usize,
    pub split: Split,
    /// View file paths relative to the manifest directory.
    pub views: Vec<String>,
    pub bboxes: Vec<Option<[u32; 4]>>,
}

/// Generation parameters, stored next to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub global_seed: u64,
    pub class_count: usize,
    pub shapes_per_class: usize,
    pub image_size: usize,
    pub views_per_shape: usize,
    pub train_per_class: usize,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub records: Vec<ManifestRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub global_seed: u64,
    pub class_count: usize,
    pub shapes_per_class: usize,
    pub image_size: usize,
    pub views: usize,
    pub train_fraction: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            global_seed: 0,
            class_count: 8,
            shapes_per_class: 40,
            image_size: 32,
            views: DEFAULT_VIEWS,
            train_fraction: 0.5,
        }
    }
}

impl GenerateOptions {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.class_count) {
            return Err(Error::Config(format!(
                "class_count must lie in 2..={MAX_CLASSES}, got {}",
                self.class_count
            )));
        }
        if self.shapes_per_class < 2 {
            return Err(Error::Config(format!(
                "shapes_per_class must be at least 2, got {}",
                self.shapes_per_class
            )));
        }
        if self.image_size < 4 || self.views == 0 {
            return Err(Error::Config("image_size must be >= 4 and views >= 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// Shapes per class assigned to the training split (at least one of each split).
    pub fn train_per_class(&self) -> usize {
        let k = (self.shapes_per_class as f64 * self.train_fraction).round() as usize;
        k.clamp(1, self.shapes_per_class - 1)
    }
}

fn view_path(id: &str, k: usize) -> String {
    format!("views/{id}/view_{k:02}.pvwi")
}

/// Renders every shape, writes views, `manifest.jsonl` and `dataset.json` under `out`.
pub fn generate_dataset(opts: &GenerateOptions, out: &Path) -> Result<DatasetManifest> {
    opts.validate()?;
    let train_per_class = opts.train_per_class();
    let meta = DatasetMeta {
        global_seed: opts.global_seed,
        class_count: opts.class_count,
        shapes_per_class: opts.shapes_per_class,
        image_size: opts.image_size,
        views_per_shape: opts.views,
        train_per_class,
        class_names: CLASS_NAMES[..opts.class_count].iter().map(|s| s.to_string()).collect(),
    };
    let mut records = Vec::new();
    for class_id in 0..opts.class_count {
        for i in 0..opts.shapes_per_class {
            let spec = super::make_shape(opts.global_seed, class_id, i)?;
            let (seq, bboxes) = render_views_with_bboxes(&spec, opts.views, opts.image_size)?;
            let dir = out.join("views").join(&spec.shape_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let views: Vec<String> = (0..opts.views).map(|k| view_path(&spec.shape_id, k)).collect();
            for (img, rel) in seq.views.iter().zip(&views) {
                write_view_image(&out.join(rel), img)?;
            }
            records.push(ManifestRecord {
                shape_id: spec.shape_id,
                class_id,
                split: if i < train_per_class { Split::Train } else { Split::Test },
                views,
                bboxes,
            });
        }
    }
    let mut lines = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut lines, r).map_err(|e| Error::format(out.join(MANIFEST_FILE), e.to_string()))?;
        lines.push(b'\n');
    }
    let mpath = out.join(MANIFEST_FILE);
    fs::write(&mpath, lines).map_err(|e| Error::io(&mpath, e))?;
    let meta_path = out.join(META_FILE);
    let mut f = fs::File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    serde_json::to_writer_pretty(&mut f, &meta).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    f.write_all(b"\n").map_err(|e| Error::io(&meta_path, e))?;
    Ok(DatasetManifest {
        root: out.to_path_buf(),
        meta,
        records,
    })
}

/// Loads a manifest from its directory (or the `manifest.jsonl` path itself).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let root = if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let meta_path = root.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta =
        serde_json::from_str(&meta_text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let mpath = root.join(MANIFEST_FILE);
    let file = fs::File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&mpath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(&mpath, format!("line {}: {e}", lineno + 1)))?;
        if !seen.insert(r.shape_id.clone()) {
            return Err(Error::format(&mpath, format!("duplicate shape_id {}", r.shape_id)));
        }
        if r.class_id >= meta.class_count {
            return Err(Error::format(&mpath, format!("{}: class {} out of range", r.shape_id, r.class_id)));
        }
        if r.bboxes.len() != r.views.len() {
            return Err(Error::format(&mpath, format!("{}: bbox count differs from view count", r.shape_id)));
        }
        for v in &r.views {
            let p = root.join(v);
            if !p.is_file() {
                return Err(Error::io(
                    &p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "view file listed in manifest is missing"),
                ));
            }
        }
        records.push(r);
    }
    Ok(DatasetManifest { root, meta, records })
}

impl DatasetManifest {
    pub fn global_seed(&self) -> u64 {
        self.meta.global_seed
    }

    pub fn class_names(&self) -> &[String] {
        &self.meta.class_names
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn load_views(&self, record: &ManifestRecord) -> Result<ViewSequence> {
        let views = record
            .views
            .iter()
            .map(|v| read_view_image(&self.root.join(v)))
            .collect::<Result<Vec<_>>>()?;
        let n = views.len();
        Ok(ViewSequence {
            shape_id: record.shape_id.clone(),
            views,
            camera_azimuths: (0..n).map(|k| super::render::azimuth(k, n)).collect(),
        })
    }

    /// Regenerates the 3D spec behind a record (for re-rendering under noise).
    pub fn shape_spec(&self, record: &ManifestRecord) -> Result<ShapeSpec> {
        make_shape_with_id(self.meta.global_seed, record.class_id, &record.shape_id)
    }
}
