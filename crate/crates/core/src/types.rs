//! Raster and geometry primitives shared by every stage.
//!
//! Boxes are half-open pixel rectangles `[x_min, x_max) x [y_min, y_max)`, so
//! the area is the plain product of the side lengths.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("raster of {width}x{height} needs {expected} samples, got {actual}")]
    LengthMismatch {
        width: u32,
        height: u32,
        expected: usize,
        actual: usize,
    },
    #[error("degenerate box [{x_min}, {x_max}) x [{y_min}, {y_max})")]
    DegenerateBox {
        x_min: u32,
        y_min: u32,
        x_max: u32,
        y_max: u32,
    },
    #[error("box {bbox:?} is outside a {width}x{height} image")]
    OutOfBounds { bbox: BBox, width: u32, height: u32 },
}

pub type Rgb8 = [u8; 3];

/// Dense RGB raster in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    pixels: Vec<Rgb8>,
}

impl Image {
    pub fn new(width: u32, height: u32, pixels: Vec<Rgb8>) -> Result<Self, GeometryError> {
        check_dims(width, height)?;
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(GeometryError::LengthMismatch {
                width,
                height,
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, color: Rgb8) -> Result<Self, GeometryError> {
        Self::new(width, height, vec![color; width as usize * height as usize])
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> Rgb8,
    ) -> Result<Self, GeometryError> {
        check_dims(width, height)?;
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[Rgb8] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> Rgb8 {
        self.pixels[self.index(x, y)]
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y as usize * self.width as usize + x as usize
    }

    pub fn into_pixels(self) -> Vec<Rgb8> {
        self.pixels
    }
}

fn check_dims(width: u32, height: u32) -> Result<(), GeometryError> {
    if width == 0 || height == 0 {
        Err(GeometryError::EmptyImage { width, height })
    } else {
        Ok(())
    }
}

/// Axis-aligned half-open pixel box with a category index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    x_min: u32,
    y_min: u32,
    x_max: u32,
    y_max: u32,
    class_id: u32,
}

impl BBox {
    pub fn new(
        x_min: u32,
        y_min: u32,
        x_max: u32,
        y_max: u32,
        class_id: u32,
    ) -> Result<Self, GeometryError> {
        if x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::DegenerateBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
            class_id,
        })
    }

    pub fn x_min(&self) -> u32 {
        self.x_min
    }
    pub fn y_min(&self) -> u32 {
        self.y_min
    }
    pub fn x_max(&self) -> u32 {
        self.x_max
    }
    pub fn y_max(&self) -> u32 {
        self.y_max
    }
    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn with_class(self, class_id: u32) -> Self {
        Self { class_id, ..self }
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    pub fn check_within(&self, width: u32, height: u32) -> Result<(), GeometryError> {
        if self.fits_within(width, height) {
            Ok(())
        } else {
            Err(GeometryError::OutOfBounds {
                bbox: *self,
                width,
                height,
            })
        }
    }

    /// Pixel area shared with `other`.
    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min));
        let h = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min));
        w as u64 * h as u64
    }

    /// Intersection over union in pixel-area units. Class ids are ignored.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }
}

/// Free-function form of [`BBox::iou`].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Binary foreground map for one object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskInstance {
    width: u32,
    height: u32,
    bits: Vec<bool>,
    class_id: u32,
    score: f64,
}

impl MaskInstance {
    pub fn empty(width: u32, height: u32, class_id: u32, score: f64) -> Result<Self, GeometryError> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
            class_id,
            score,
        })
    }

    pub fn from_bits(
        width: u32,
        height: u32,
        bits: Vec<bool>,
        class_id: u32,
        score: f64,
    ) -> Result<Self, GeometryError> {
        check_dims(width, height)?;
        let expected = width as usize * height as usize;
        if bits.len() != expected {
            return Err(GeometryError::LengthMismatch {
                width,
                height,
                expected,
                actual: bits.len(),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
            class_id,
            score,
        })
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        class_id: u32,
        score: f64,
        mut f: impl FnMut(u32, u32) -> bool,
    ) -> Result<Self, GeometryError> {
        check_dims(width, height)?;
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            bits,
            class_id,
            score,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn class_id(&self) -> u32 {
        self.class_id
    }
    pub fn score(&self) -> f64 {
        self.score
    }
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn with_score(self, score: f64) -> Self {
        Self { score, ..self }
    }

    pub fn with_class(self, class_id: u32) -> Self {
        Self { class_id, ..self }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_dims(&self, other: &MaskInstance) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Tightest box around the foreground, `None` for an all-zero mask.
    pub fn bbox(&self) -> Option<BBox> {
        let w = self.width as usize;
        let mut x_min = u32::MAX;
        let mut y_min = u32::MAX;
        let mut x_max = 0;
        let mut y_max = 0;
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let x = (i % w) as u32;
            let y = (i / w) as u32;
            x_min = x_min.min(x);
            y_min = y_min.min(y);
            x_max = x_max.max(x + 1);
            y_max = y_max.max(y + 1);
        }
        if x_min == u32::MAX {
            None
        } else {
            Some(BBox {
                x_min,
                y_min,
                x_max,
                y_max,
                class_id: self.class_id,
            })
        }
    }
}

/// Free-function form of [`MaskInstance::bbox`].
pub fn bbox_of_mask(mask: &MaskInstance) -> Option<BBox> {
    mask.bbox()
}

/// Pixelwise IoU of two masks; 0 when both are empty.
///
/// # Panics
///
/// Panics if the masks have different dimensions.
pub fn mask_iou(a: &MaskInstance, b: &MaskInstance) -> f64 {
    assert!(
        a.same_dims(b),
        "mask_iou on {}x{} vs {}x{} masks",
        a.width,
        a.height,
        b.width,
        b.height
    );
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.bits.iter().zip(&b.bits) {
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Ellipse inscribed in `bbox`, rasterized on a `width x height` canvas.
///
/// A pixel is set when its center satisfies the ellipse inequality or when it
/// lies on one of the two principal axes of the box (its center is within half
/// a pixel of the axis line). The axis pixels keep the ellipse tangent to all
/// four box sides for elongated boxes, where center sampling alone misses the
/// extreme rows or columns.
pub fn rasterize_ellipse(bbox: &BBox, width: u32, height: u32) -> Result<MaskInstance, GeometryError> {
    check_dims(width, height)?;
    bbox.check_within(width, height)?;
    let cx = (bbox.x_min + bbox.x_max) as f64 / 2.0;
    let cy = (bbox.y_min + bbox.y_max) as f64 / 2.0;
    let a = bbox.width() as f64 / 2.0;
    let b = bbox.height() as f64 / 2.0;
    MaskInstance::from_fn(width, height, bbox.class_id, 1.0, |x, y| {
        if !bbox.contains(x, y) {
            return false;
        }
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        let on_axis = dx.abs() <= 0.5 || dy.abs() <= 0.5;
        on_axis || (dx / a).powi(2) + (dy / b).powi(2) <= 1.0
    })
}

/// GrabCut seed label of one pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrimapLabel {
    DefiniteBackground,
    ProbableBackground,
    ProbableForeground,
    DefiniteForeground,
}

impl TrimapLabel {
    pub fn is_foreground(self) -> bool {
        matches!(self, Self::ProbableForeground | Self::DefiniteForeground)
    }

    pub fn is_definite(self) -> bool {
        matches!(self, Self::DefiniteBackground | Self::DefiniteForeground)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trimap {
    width: u32,
    height: u32,
    labels: Vec<TrimapLabel>,
}

impl Trimap {
    pub fn from_labels(
        width: u32,
        height: u32,
        labels: Vec<TrimapLabel>,
    ) -> Result<Self, GeometryError> {
        check_dims(width, height)?;
        let expected = width as usize * height as usize;
        if labels.len() != expected {
            return Err(GeometryError::LengthMismatch {
                width,
                height,
                expected,
                actual: labels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    /// Box seeding: inside is probable foreground, outside definite background.
    pub fn from_box(bbox: &BBox, width: u32, height: u32) -> Result<Self, GeometryError> {
        check_dims(width, height)?;
        bbox.check_within(width, height)?;
        let mut labels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                labels.push(if bbox.contains(x, y) {
                    TrimapLabel::ProbableForeground
                } else {
                    TrimapLabel::DefiniteBackground
                });
            }
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn labels(&self) -> &[TrimapLabel] {
        &self.labels
    }
    pub fn get(&self, x: u32, y: u32) -> TrimapLabel {
        self.labels[y as usize * self.width as usize + x as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1, 0).unwrap()
    }

    #[test]
    fn rejects_degenerate_boxes_and_rasters() {
        assert!(BBox::new(3, 0, 3, 4, 0).is_err());
        assert!(BBox::new(0, 5, 2, 1, 0).is_err());
        assert!(Image::new(0, 4, vec![]).is_err());
        assert!(Image::new(2, 2, vec![[0; 3]; 3]).is_err());
        assert!(MaskInstance::from_bits(2, 2, vec![true; 5], 0, 1.0).is_err());
    }

    #[test]
    fn bbox_of_empty_mask_is_none() {
        let m = MaskInstance::empty(8, 8, 0, 1.0).unwrap();
        assert_eq!(bbox_of_mask(&m), None);
    }

    #[test]
    fn bbox_of_single_pixel() {
        let m = MaskInstance::from_fn(8, 8, 0, 1.0, |x, y| (x, y) == (3, 5)).unwrap();
        assert_eq!(bbox_of_mask(&m), Some(bx(3, 5, 4, 6)));
    }

    #[test]
    fn bbox_of_filled_rectangle() {
        // rows 2..6, cols 1..4
        let m = MaskInstance::from_fn(8, 8, 0, 1.0, |x, y| (1..4).contains(&x) && (2..6).contains(&y))
            .unwrap();
        assert_eq!(bbox_of_mask(&m), Some(bx(1, 2, 4, 6)));
    }

    #[test]
    fn iou_examples() {
        let a = bx(0, 0, 10, 10);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(10, 0, 20, 10)), 0.0);
        assert_eq!(iou(&a, &bx(5, 0, 15, 10)), 1.0 / 3.0);
    }

    #[test]
    fn mask_iou_examples() {
        let four = MaskInstance::from_fn(4, 4, 0, 1.0, |x, y| x < 2 && y < 2).unwrap();
        let two = MaskInstance::from_fn(4, 4, 0, 1.0, |x, y| x < 2 && y == 0).unwrap();
        let other = MaskInstance::from_fn(4, 4, 0, 1.0, |x, y| x >= 2 && y >= 2).unwrap();
        let empty = MaskInstance::empty(4, 4, 0, 1.0).unwrap();
        assert_eq!(mask_iou(&four, &four), 1.0);
        assert_eq!(mask_iou(&four, &other), 0.0);
        assert_eq!(mask_iou(&four, &two), 0.5);
        assert_eq!(mask_iou(&empty, &empty), 0.0);
    }

    #[test]
    #[should_panic(expected = "mask_iou")]
    fn mask_iou_dimension_mismatch_panics() {
        let a = MaskInstance::empty(4, 4, 0, 1.0).unwrap();
        let b = MaskInstance::empty(4, 5, 0, 1.0).unwrap();
        mask_iou(&a, &b);
    }

    #[test]
    fn ellipse_single_pixel() {
        let m = rasterize_ellipse(&bx(2, 3, 3, 4), 6, 6).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(2, 3));
    }

    #[test]
    fn ellipse_area_close_to_closed_form() {
        let m = rasterize_ellipse(&bx(10, 10, 110, 110), 128, 128).unwrap();
        let expected = std::f64::consts::PI * 50.0 * 50.0;
        let rel = (m.count() as f64 - expected).abs() / expected;
        assert!(rel < 0.02, "count {} vs {expected}", m.count());
    }

    #[test]
    fn ellipse_of_elongated_box_touches_every_side() {
        let b = bx(0, 3, 100, 5);
        let m = rasterize_ellipse(&b, 100, 8).unwrap();
        assert_eq!(m.bbox(), Some(b));
    }

    #[test]
    fn ellipse_outside_canvas_is_rejected() {
        assert!(rasterize_ellipse(&bx(0, 0, 9, 4), 8, 8).is_err());
    }

    #[test]
    fn box_trimap_has_no_definite_foreground() {
        let t = Trimap::from_box(&bx(2, 2, 4, 4), 8, 8).unwrap();
        let fg = t
            .labels()
            .iter()
            .filter(|&&l| l == TrimapLabel::ProbableForeground)
            .count();
        assert_eq!(fg, 4);
        assert!(!t.labels().contains(&TrimapLabel::DefiniteForeground));
    }

    fn arb_box(limit: u32) -> impl Strategy<Value = BBox> {
        (0..limit, 0..limit, 1..=limit, 1..=limit).prop_filter_map("degenerate", move |(x, y, w, h)| {
            let (x1, y1) = (x + w, y + h);
            (x1 <= limit && y1 <= limit).then(|| bx(x, y, x1, y1))
        })
    }

    fn brute_mask_iou(a: &[bool], b: &[bool]) -> f64 {
        let inter = (0..a.len()).filter(|&i| a[i] && b[i]).count();
        let union = (0..a.len()).filter(|&i| a[i] || b[i]).count();
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(a in arb_box(40), b in arb_box(40)) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&iou(&a, &b)));
        }

        #[test]
        fn nested_iou_is_area_ratio(outer in arb_box(40), fx in 0.0f64..1.0, fy in 0.0f64..1.0, fw in 0.0f64..1.0, fh in 0.0f64..1.0) {
            let w = 1 + ((outer.width() - 1) as f64 * fw) as u32;
            let h = 1 + ((outer.height() - 1) as f64 * fh) as u32;
            let x = outer.x_min() + ((outer.width() - w) as f64 * fx) as u32;
            let y = outer.y_min() + ((outer.height() - h) as f64 * fy) as u32;
            let inner = bx(x, y, x + w, y + h);
            prop_assert_eq!(iou(&inner, &outer), inner.area() as f64 / outer.area() as f64);
            prop_assert_eq!(iou(&outer, &outer), 1.0);
        }

        #[test]
        fn ellipse_bbox_is_input_box(b in arb_box(48)) {
            prop_assume!(b.width() >= 2 && b.height() >= 2);
            let m = rasterize_ellipse(&b, 48, 48).unwrap();
            prop_assert_eq!(m.bbox(), Some(b));
        }

        #[test]
        fn mask_iou_matches_pixel_count(a in proptest::collection::vec(any::<bool>(), 256), b in proptest::collection::vec(any::<bool>(), 256)) {
            let ma = MaskInstance::from_bits(16, 16, a.clone(), 0, 1.0).unwrap();
            let mb = MaskInstance::from_bits(16, 16, b.clone(), 0, 1.0).unwrap();
            prop_assert_eq!(mask_iou(&ma, &mb), brute_mask_iou(&a, &b));
        }
    }
}
