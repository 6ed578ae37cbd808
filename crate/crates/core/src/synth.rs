//! Seeded synthetic scenes and corpora with known ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{save_image_png, save_manifest, save_mask_png, AnnotatedInstance, AnnotationRecord, CorpusManifest, DataError};
use crate::pipeline::{size_class, Detection, SizeClass, Validity};
use crate::types::{BBox, Image, MaskInstance, Rgb8};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    /// Pixel-center membership.
    pub fn contains(&self, x: u32, y: u32) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            Shape::Disk { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Ellipse { cx, cy, rx, ry } => ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0,
            Shape::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
        }
    }

    /// Axis-aligned extent `(x0, y0, x1, y1)` in continuous coordinates.
    fn extent(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Disk { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
            Shape::Ellipse { cx, cy, rx, ry } => (cx - rx, cy - ry, cx + rx, cy + ry),
            Shape::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Rgb8,
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    /// Ground-truth masks in object order; later objects occlude earlier ones.
    pub masks: Vec<MaskInstance>,
}

impl Scene {
    /// Tight boxes of the non-empty masks, index-aligned with `masks`.
    pub fn boxes(&self) -> Vec<Option<BBox>> {
        self.masks.iter().map(MaskInstance::bbox).collect()
    }
}

/// Renders objects over a flat background with uniform per-channel noise of
/// amplitude `noise`.
pub fn render_scene(width: u32, height: u32, background: Rgb8, objects: &[SceneObject], noise: u8, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let owner = |x: u32, y: u32| objects.iter().rposition(|o| o.shape.contains(x, y));
    let image = Image::from_fn(width, height, |x, y| {
        let base = owner(x, y).map_or(background, |i| objects[i].color);
        let n = noise as i16;
        std::array::from_fn(|c| {
            let jitter = if n > 0 { rng.gen_range(-n..=n) } else { 0 };
            (base[c] as i16 + jitter).clamp(0, 255) as u8
        })
    })
    .expect("positive dimensions");
    let masks = objects
        .iter()
        .enumerate()
        .map(|(i, o)| MaskInstance::from_fn(width, height, o.class_id, 1.0, |x, y| owner(x, y) == Some(i)).expect("positive dimensions"))
        .collect();
    Scene { image, masks }
}

fn random_color(rng: &mut impl Rng) -> Rgb8 {
    std::array::from_fn(|_| rng.gen_range(0..=255))
}

fn color_distance(a: Rgb8, b: Rgb8) -> f64 {
    (0..3).map(|c| (a[c] as f64 - b[c] as f64).powi(2)).sum::<f64>().sqrt()
}

/// A color at least `min_distance` away from every color in `avoid`.
fn contrasting_color(rng: &mut impl Rng, avoid: &[Rgb8], min_distance: f64) -> Rgb8 {
    loop {
        let c = random_color(rng);
        if avoid.iter().all(|&a| color_distance(a, c) >= min_distance) {
            return c;
        }
    }
}

fn random_shape(rng: &mut impl Rng, cx: f64, cy: f64, radius: f64) -> Shape {
    match rng.gen_range(0..3) {
        0 => Shape::Disk { cx, cy, r: radius },
        1 => Shape::Ellipse {
            cx,
            cy,
            rx: radius,
            ry: radius * rng.gen_range(0.6..1.0),
        },
        _ => {
            let hw = radius * rng.gen_range(0.7..1.0);
            let hh = radius * rng.gen_range(0.7..1.0);
            Shape::Rect {
                x0: cx - hw,
                y0: cy - hh,
                x1: cx + hw,
                y1: cy + hh,
            }
        }
    }
}

/// One solid or lightly noised shape on a contrasting background, fully
/// inside the frame with at least 8 px of margin.
pub fn single_object_scene(seed: u64, side: u32) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side_f = side as f64;
    let radius = rng.gen_range(side_f * 0.12..side_f * 0.28);
    let margin = radius + 8.0;
    let cx = rng.gen_range(margin..side_f - margin);
    let cy = rng.gen_range(margin..side_f - margin);
    let shape = random_shape(&mut rng, cx, cy, radius);
    let background = random_color(&mut rng);
    let color = contrasting_color(&mut rng, &[background], 160.0);
    let noise = if rng.gen_bool(0.5) { rng.gen_range(1..=6) } else { 0 };
    let object = SceneObject { shape, color, class_id: 0 };
    render_scene(side, side, background, &[object], noise, rng.gen())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub images: usize,
    pub width: u32,
    pub height: u32,
    pub max_objects: usize,
    pub categories: usize,
    /// Radius range of generated shapes in pixels.
    pub radius: (f64, f64),
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            images: 4,
            width: 160,
            height: 120,
            max_objects: 3,
            categories: 3,
            radius: (10.0, 40.0),
            seed: 0,
        }
    }
}

fn overlaps(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64), gap: f64) -> bool {
    a.0 < b.2 + gap && b.0 < a.2 + gap && a.1 < b.3 + gap && b.1 < a.3 + gap
}

/// A multi-object scene with mutually separated objects. Some objects get a
/// color close to the background, which makes their GrabCut masks unreliable.
pub fn random_scene(rng: &mut impl Rng, spec: &CorpusSpec) -> Scene {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let background = random_color(rng);
    let wanted = rng.gen_range(1..=spec.max_objects.max(1));
    let mut objects: Vec<SceneObject> = Vec::new();
    for _ in 0..wanted * 20 {
        if objects.len() == wanted {
            break;
        }
        let r = rng.gen_range(spec.radius.0..spec.radius.1).min(w.min(h) / 2.0 - 3.0);
        let cx = rng.gen_range(r + 2.0..w - r - 2.0);
        let cy = rng.gen_range(r + 2.0..h - r - 2.0);
        let shape = random_shape(rng, cx, cy, r);
        if objects.iter().any(|o| overlaps(o.shape.extent(), shape.extent(), 6.0)) {
            continue;
        }
        let color = if rng.gen_bool(0.2) {
            std::array::from_fn(|c| background[c].saturating_add(rng.gen_range(0..12)))
        } else {
            contrasting_color(rng, &[background], 140.0)
        };
        let class_id = rng.gen_range(0..spec.categories as u32);
        objects.push(SceneObject { shape, color, class_id });
    }
    let noise = rng.gen_range(0..=4);
    render_scene(spec.width, spec.height, background, &objects, noise, rng.gen())
}

fn jitter_box(rng: &mut impl Rng, b: &BBox, width: u32, height: u32, amount: i64) -> BBox {
    let j = |v: u32, lo: i64, hi: i64, rng: &mut dyn rand::RngCore| (v as i64 + rng.gen_range(-amount..=amount)).clamp(lo, hi) as u32;
    let x0 = j(b.x_min(), 0, b.x_max() as i64 - 1, rng);
    let y0 = j(b.y_min(), 0, b.y_max() as i64 - 1, rng);
    let x1 = j(b.x_max(), x0 as i64 + 1, width as i64, rng);
    let y1 = j(b.y_max(), y0 as i64 + 1, height as i64, rng);
    BBox::new(x0, y0, x1, y1, b.class_id()).expect("clamped to a non-empty box")
}

/// Writes images, ground-truth masks and `manifest.json` under `dir`.
///
/// Instances are annotated with their tight mask box. Detections are the
/// ground-truth boxes jittered by up to 2 px with seeded scores, plus the
/// occasional false positive on plain background.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec) -> Result<CorpusManifest, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for sub in ["images", "gt"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|source| DataError::Io { path: p.clone(), source })?;
    }
    let mut records = Vec::with_capacity(spec.images);
    for i in 0..spec.images {
        let scene = random_scene(&mut rng, spec);
        let stem = format!("img{i:04}");
        let rel = PathBuf::from("images").join(format!("{stem}.png"));
        save_image_png(&scene.image, &dir.join(&rel))?;

        let mut instances = Vec::new();
        let mut detections = Vec::new();
        for (k, mask) in scene.masks.iter().enumerate() {
            let Some(bbox) = mask.bbox() else { continue };
            let mask_rel = PathBuf::from("gt").join(format!("{stem}_{k}.png"));
            save_mask_png(mask, &dir.join(&mask_rel))?;
            instances.push(AnnotatedInstance {
                bbox,
                mask: Some(mask_rel),
            });
            let det_box = jitter_box(&mut rng, &bbox, spec.width, spec.height, 2);
            let score = (rng.gen_range(0.5..1.0f64) * 1000.0).round() / 1000.0;
            detections.push(Detection::new(det_box, score).expect("score in range"));
        }
        if rng.gen_bool(0.3) {
            let (bw, bh) = (rng.gen_range(8..24), rng.gen_range(8..24));
            let x0 = rng.gen_range(0..spec.width - bw);
            let y0 = rng.gen_range(0..spec.height - bh);
            let b = BBox::new(x0, y0, x0 + bw, y0 + bh, rng.gen_range(0..spec.categories as u32)).expect("non-empty");
            let clear = scene.masks.iter().all(|m| (y0..y0 + bh).all(|y| (x0..x0 + bw).all(|x| !m.get(x, y))));
            if clear {
                detections.push(Detection::new(b, 0.3).expect("score in range"));
            }
        }
        records.push(AnnotationRecord {
            path: rel,
            width: spec.width,
            height: spec.height,
            instances,
            detections,
        });
    }
    let manifest = CorpusManifest {
        root: dir.to_path_buf(),
        categories: (0..spec.categories).map(|c| format!("class{c}")).collect(),
        images: records,
    };
    save_manifest(&manifest, &dir.join("manifest.json"))?;
    Ok(manifest)
}

/// A (pseudo-mask, annotated box) pair with the labels it was built to have.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedInstance {
    pub mask: MaskInstance,
    pub gt_box: BBox,
    pub validity: Validity,
    pub size: SizeClass,
}

pub const PLANTED_CANVAS: u32 = 320;

/// Pairs whose validity and size class are fixed by construction: valid masks
/// fill the annotated box, invalid ones are empty or cover one quadrant of it
/// (box IoU 1/4). Box areas span every histogram bucket.
pub fn planted_stats_corpus(seed: u64, count: usize, size_area: u64) -> Vec<PlantedInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = PLANTED_CANVAS;
    (0..count)
        .map(|_| {
            let side_max = if rng.gen_bool(0.5) { 64 } else { 300 };
            let bw = rng.gen_range(2..=side_max);
            let bh = rng.gen_range(2..=side_max);
            let x0 = rng.gen_range(0..=c - bw);
            let y0 = rng.gen_range(0..=c - bh);
            let class = rng.gen_range(0..4);
            let gt_box = BBox::new(x0, y0, x0 + bw, y0 + bh, class).expect("non-empty");
            let validity = if rng.gen_bool(0.6) { Validity::Valid } else { Validity::Invalid };
            let mask = match validity {
                Validity::Valid => MaskInstance::from_fn(c, c, class, 1.0, |x, y| gt_box.contains(x, y)),
                Validity::Invalid if rng.gen_bool(0.3) => MaskInstance::empty(c, c, class, 1.0),
                Validity::Invalid => {
                    let q = BBox::new(x0, y0, x0 + bw / 2, y0 + bh / 2, class).expect("non-empty");
                    // odd sides make the quadrant slightly more than 1/4; still < 1/2
                    MaskInstance::from_fn(c, c, class, 1.0, |x, y| q.contains(x, y))
                }
            }
            .expect("positive dimensions");
            PlantedInstance {
                size: size_class(&gt_box, size_area),
                mask,
                gt_box,
                validity,
            }
        })
        .collect()
}
