//! Manifest parsing, mask and image files, overlays.
//!
//! Manifest schema (paths relative to the manifest's directory):
//!
//! ```json
//! {
//!   "categories": ["cat", "dog"],
//!   "images": [{
//!     "path": "img/0001.png", "width": 128, "height": 96,
//!     "instances":  [{"box": [x0, y0, x1, y1], "class": 0, "mask": "gt/0001_0.png"}],
//!     "detections": [{"box": [x0, y0, x1, y1], "class": 1, "score": 0.87}]
//!   }]
//! }
//! ```
//!
//! Boxes are half-open pixel ranges. `mask` is optional and only needed for
//! evaluation; `detections` is optional and feeds the small-object branch.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{Detection, Validity};
use crate::types::{BBox, Image, MaskInstance, Rgb8};

pub const SIDECAR_NAME: &str = "masks.json";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("image record {record}, field `{field}`: {message}")]
    Record {
        record: usize,
        field: String,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> DataError + '_ {
    move |source| DataError::Image {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedInstance {
    /// Carries the class id.
    pub bbox: BBox,
    /// Ground-truth mask file, relative to the manifest root.
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<AnnotatedInstance>,
    pub detections: Vec<Detection>,
}

impl AnnotationRecord {
    /// File stem used to name per-image artifacts.
    pub fn stem(&self) -> String {
        file_stem(&self.path)
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.instances.iter().map(|i| i.bbox).collect()
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub categories: Vec<String>,
    pub images: Vec<AnnotationRecord>,
}

impl CorpusManifest {
    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    pub fn load_image(&self, record: &AnnotationRecord) -> Result<Image, DataError> {
        load_image(&self.resolve(&record.path))
    }

    /// Ground-truth masks of one record, or an error if any instance lacks one.
    pub fn load_gt_masks(&self, record_index: usize) -> Result<Vec<MaskInstance>, DataError> {
        let record = &self.images[record_index];
        record
            .instances
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                let rel = inst.mask.as_ref().ok_or_else(|| DataError::Record {
                    record: record_index,
                    field: format!("instances[{i}].mask"),
                    message: "ground-truth mask required".into(),
                })?;
                let m = load_mask_png(&self.resolve(rel), inst.bbox.class_id(), 1.0)?;
                if m.width() != record.width || m.height() != record.height {
                    return Err(DataError::Record {
                        record: record_index,
                        field: format!("instances[{i}].mask"),
                        message: format!("mask is {}x{}, image is {}x{}", m.width(), m.height(), record.width, record.height),
                    });
                }
                Ok(m)
            })
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    categories: Vec<String>,
    images: Vec<RawImage>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImage {
    path: String,
    width: u32,
    height: u32,
    #[serde(default)]
    instances: Vec<RawInstance>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    detections: Vec<RawDetection>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    #[serde(rename = "box")]
    bbox: [u32; 4],
    class: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetection {
    #[serde(rename = "box")]
    bbox: [u32; 4],
    class: u32,
    score: f64,
}

fn raw_box(b: &BBox) -> [u32; 4] {
    [b.x_min(), b.y_min(), b.x_max(), b.y_max()]
}

struct Validator<'a> {
    root: &'a Path,
    record: usize,
    width: u32,
    height: u32,
    categories: usize,
}

impl Validator<'_> {
    fn fail(&self, field: String, message: impl Into<String>) -> DataError {
        DataError::Record {
            record: self.record,
            field,
            message: message.into(),
        }
    }

    fn bbox(&self, field: &str, raw: [u32; 4], class: u32) -> Result<BBox, DataError> {
        if class as usize >= self.categories {
            return Err(self.fail(format!("{field}.class"), format!("class {class} not in the category table")));
        }
        let b = BBox::new(raw[0], raw[1], raw[2], raw[3], class)
            .map_err(|e| self.fail(format!("{field}.box"), e.to_string()))?;
        b.check_within(self.width, self.height)
            .map_err(|e| self.fail(format!("{field}.box"), e.to_string()))?;
        Ok(b)
    }

    fn existing_file(&self, field: String, rel: &str) -> Result<PathBuf, DataError> {
        let rel = PathBuf::from(rel);
        if rel.is_absolute() {
            return Err(self.fail(field, "path must be relative to the manifest"));
        }
        if !self.root.join(&rel).is_file() {
            return Err(self.fail(field, format!("file {} not found", self.root.join(&rel).display())));
        }
        Ok(rel)
    }
}

fn validate(root: &Path, raw: RawManifest) -> Result<CorpusManifest, DataError> {
    let mut seen_paths = HashSet::new();
    let mut seen_stems = HashSet::new();
    let mut images = Vec::with_capacity(raw.images.len());
    for (record, img) in raw.images.into_iter().enumerate() {
        let v = Validator {
            root,
            record,
            width: img.width,
            height: img.height,
            categories: raw.categories.len(),
        };
        if img.width == 0 || img.height == 0 {
            return Err(v.fail("width".into(), "image dimensions must be positive"));
        }
        let path = v.existing_file("path".into(), &img.path)?;
        if !seen_paths.insert(path.clone()) {
            return Err(v.fail("path".into(), "duplicate image path"));
        }
        if !seen_stems.insert(file_stem(&path)) {
            return Err(v.fail("path".into(), "duplicate file stem; artifact names would collide"));
        }
        let (w, h) = image::image_dimensions(root.join(&path)).map_err(|e| v.fail("path".into(), e.to_string()))?;
        if (w, h) != (img.width, img.height) {
            return Err(v.fail("width".into(), format!("declared {}x{}, file is {w}x{h}", img.width, img.height)));
        }

        let mut instances = Vec::with_capacity(img.instances.len());
        for (i, inst) in img.instances.iter().enumerate() {
            let field = format!("instances[{i}]");
            let bbox = v.bbox(&field, inst.bbox, inst.class)?;
            let mask = match &inst.mask {
                Some(m) => Some(v.existing_file(format!("{field}.mask"), m)?),
                None => None,
            };
            instances.push(AnnotatedInstance { bbox, mask });
        }
        let mut detections = Vec::with_capacity(img.detections.len());
        for (i, det) in img.detections.iter().enumerate() {
            let field = format!("detections[{i}]");
            let bbox = v.bbox(&field, det.bbox, det.class)?;
            let d = Detection::new(bbox, det.score).map_err(|e| v.fail(format!("{field}.score"), e.to_string()))?;
            detections.push(d);
        }
        images.push(AnnotationRecord {
            path,
            width: img.width,
            height: img.height,
            instances,
            detections,
        });
    }
    Ok(CorpusManifest {
        root: root.to_path_buf(),
        categories: raw.categories,
        images,
    })
}

/// Parses and fully validates a manifest; referenced files must exist.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let raw: RawManifest = serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    validate(&root, raw)
}

/// Writes the manifest as JSON. Paths stay relative, so the file belongs in
/// `manifest.root`.
pub fn save_manifest(manifest: &CorpusManifest, path: &Path) -> Result<(), DataError> {
    let raw = RawManifest {
        categories: manifest.categories.clone(),
        images: manifest
            .images
            .iter()
            .map(|r| RawImage {
                path: r.path.to_string_lossy().into_owned(),
                width: r.width,
                height: r.height,
                instances: r
                    .instances
                    .iter()
                    .map(|i| RawInstance {
                        bbox: raw_box(&i.bbox),
                        class: i.bbox.class_id(),
                        mask: i.mask.as_ref().map(|m| m.to_string_lossy().into_owned()),
                    })
                    .collect(),
                detections: r
                    .detections
                    .iter()
                    .map(|d| RawDetection {
                        bbox: raw_box(&d.bbox),
                        class: d.class_id(),
                        score: d.score,
                    })
                    .collect(),
            })
            .collect(),
    };
    write_json(path, &raw)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads an RGB image from PNG or binary PPM.
pub fn load_image(path: &Path) -> Result<Image, DataError> {
    let rgb = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = rgb.pixels().map(|p| p.0).collect();
    Image::new(w, h, pixels).map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))
}

pub fn save_image_png(image: &Image, path: &Path) -> Result<(), DataError> {
    let buf: Vec<u8> = image.pixels().iter().flatten().copied().collect();
    let rgb = RgbImage::from_raw(image.width(), image.height(), buf).expect("buffer matches dimensions");
    rgb.save_with_format(path, image::ImageFormat::Png).map_err(image_err(path))
}

/// 8-bit grayscale PNG, 0 for background and 255 for foreground.
pub fn save_mask_png(mask: &MaskInstance, path: &Path) -> Result<(), DataError> {
    let buf = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let gray = GrayImage::from_raw(mask.width(), mask.height(), buf).expect("buffer matches dimensions");
    gray.save_with_format(path, image::ImageFormat::Png).map_err(image_err(path))
}

/// Any value >= 128 reads as foreground.
pub fn load_mask_png(path: &Path, class_id: u32, score: f64) -> Result<MaskInstance, DataError> {
    let gray = image::open(path).map_err(image_err(path))?.to_luma8();
    let (w, h) = gray.dimensions();
    let bits = gray.pixels().map(|&Luma([v])| v >= 128).collect();
    MaskInstance::from_bits(w, h, bits, class_id, score).map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))
}

/// A mask together with its naming key and its optional bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    /// Stem of the source image file.
    pub image: String,
    /// Instance position within its image.
    pub index: usize,
    pub mask: MaskInstance,
    /// Box the mask was seeded from.
    pub source_box: Option<BBox>,
    pub validity: Option<Validity>,
}

impl MaskRecord {
    pub fn file_name(&self) -> String {
        mask_file_name(&self.image, self.index, self.mask.class_id())
    }
}

pub fn mask_file_name(image_stem: &str, index: usize, class_id: u32) -> String {
    format!("{image_stem}_{index}_{class_id}.png")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub file: String,
    pub image: String,
    pub index: usize,
    pub class: u32,
    pub score: f64,
    pub width: u32,
    pub height: u32,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub source_box: Option<[u32; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity: Option<Validity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub instances: Vec<SidecarEntry>,
}

/// One PNG per record plus the `masks.json` sidecar. Returns the PNG paths in
/// record order.
pub fn save_masks(records: &[MaskRecord], dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut names = HashSet::new();
    let mut paths = Vec::with_capacity(records.len());
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let file = r.file_name();
        if !names.insert(file.clone()) {
            return Err(DataError::Invalid(format!("duplicate mask name {file}")));
        }
        let path = dir.join(&file);
        save_mask_png(&r.mask, &path)?;
        paths.push(path);
        entries.push(SidecarEntry {
            file,
            image: r.image.clone(),
            index: r.index,
            class: r.mask.class_id(),
            score: r.mask.score(),
            width: r.mask.width(),
            height: r.mask.height(),
            source_box: r.source_box.as_ref().map(raw_box),
            validity: r.validity,
        });
    }
    write_json(&dir.join(SIDECAR_NAME), &Sidecar { instances: entries })?;
    Ok(paths)
}

/// Reads a directory written by [`save_masks`].
pub fn load_masks(dir: &Path) -> Result<Vec<MaskRecord>, DataError> {
    let sidecar_path = dir.join(SIDECAR_NAME);
    let sidecar: Sidecar = read_json(&sidecar_path)?;
    sidecar
        .instances
        .into_iter()
        .map(|e| {
            let mask = load_mask_png(&dir.join(&e.file), e.class, e.score)?;
            if (mask.width(), mask.height()) != (e.width, e.height) {
                return Err(DataError::Invalid(format!(
                    "{}: size differs from sidecar entry {}",
                    e.file,
                    sidecar_path.display()
                )));
            }
            let source_box = e
                .source_box
                .map(|b| BBox::new(b[0], b[1], b[2], b[3], e.class))
                .transpose()
                .map_err(|err| DataError::Invalid(format!("{}: {err}", e.file)))?;
            Ok(MaskRecord {
                image: e.image,
                index: e.index,
                mask,
                source_box,
                validity: e.validity,
            })
        })
        .collect()
}

const PALETTE: [Rgb8; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub const FILL_ALPHA: f64 = 0.45;
pub const OUTLINE_ALPHA: f64 = 0.9;

pub fn instance_color(index: usize) -> Rgb8 {
    PALETTE[index % PALETTE.len()]
}

fn blend(base: Rgb8, color: Rgb8, alpha: f64) -> Rgb8 {
    std::array::from_fn(|c| ((1.0 - alpha) * base[c] as f64 + alpha * color[c] as f64).round() as u8)
}

fn on_outline(b: &BBox, x: u32, y: u32) -> bool {
    b.contains(x, y) && (x == b.x_min() || x + 1 == b.x_max() || y == b.y_min() || y + 1 == b.y_max())
}

/// Colors each mask by its list position; see [`render_overlay_colored`].
pub fn render_overlay(image: &Image, masks: &[MaskInstance]) -> Image {
    let colored: Vec<(&MaskInstance, Rgb8)> = masks.iter().enumerate().map(|(i, m)| (m, instance_color(i))).collect();
    render_overlay_colored(image, &colored)
}

/// Alpha-blended fill plus a stronger outline of each mask's box. Where
/// several masks or outlines cover a pixel the smallest color wins, so the
/// result does not depend on the list order. Outlines draw above fills.
pub fn render_overlay_colored(image: &Image, masks: &[(&MaskInstance, Rgb8)]) -> Image {
    let boxes: Vec<Option<BBox>> = masks.iter().map(|(m, _)| m.bbox()).collect();
    Image::from_fn(image.width(), image.height(), |x, y| {
        let base = image.get(x, y);
        let outline = masks
            .iter()
            .zip(&boxes)
            .filter(|(_, b)| b.as_ref().is_some_and(|b| on_outline(b, x, y)))
            .map(|((_, c), _)| *c)
            .min();
        if let Some(c) = outline {
            return blend(base, c, OUTLINE_ALPHA);
        }
        let fill = masks
            .iter()
            .filter(|(m, _)| m.width() == image.width() && m.height() == image.height() && m.get(x, y))
            .map(|(_, c)| *c)
            .min();
        match fill {
            Some(c) => blend(base, c, FILL_ALPHA),
            None => base,
        }
    })
    .expect("dimensions come from a valid image")
}
