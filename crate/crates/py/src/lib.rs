//! Python module `pyboxseg`.
//!
//! Images are row sequences of `(r, g, b)` triples and masks are row
//! sequences of truthy values, so nested lists and numpy arrays both work.
//! Boxes are half-open `(x0, y0, x1, y1)` tuples.

use boxseg::efpn::build_enhanced_fpn;
use boxseg::eval::{evaluate as evaluate_masks, GroundTruthImage, GroundTruthSet};
use boxseg::grabcut::{run as run_grabcut, GrabCutConfig};
use boxseg::maxflow::{self, FlowGraph, Side};
use boxseg::pipeline::{self, segment_detection, Detection, MaskOrigin, SizeClass};
use boxseg::types::{self, BBox, Image, MaskInstance, Rgb8};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

type BoxTuple = (u32, u32, u32, u32);
type Rows = Vec<Vec<bool>>;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_box(b: BoxTuple, class_id: u32) -> PyResult<BBox> {
    BBox::new(b.0, b.1, b.2, b.3, class_id).map_err(value_err)
}

fn rows_of<T>(obj: &Bound<'_, PyAny>, mut cell: impl FnMut(&Bound<'_, PyAny>) -> PyResult<T>) -> PyResult<(u32, u32, Vec<T>)> {
    let mut out = Vec::new();
    let (mut width, mut height) = (None, 0u32);
    for row in obj.try_iter()? {
        let mut n = 0u32;
        for v in row?.try_iter()? {
            out.push(cell(&v?)?);
            n += 1;
        }
        match width {
            None => width = Some(n),
            Some(w) if w != n => return Err(value_err(format!("row {height} has {n} cells, expected {w}"))),
            _ => {}
        }
        height += 1;
    }
    Ok((width.unwrap_or(0), height, out))
}

/// Converts a row sequence of truthy values into a mask.
pub fn mask_from_rows(obj: &Bound<'_, PyAny>, class_id: u32, score: f64) -> PyResult<MaskInstance> {
    let (w, h, bits) = rows_of(obj, |v| v.is_truthy())?;
    MaskInstance::from_bits(w, h, bits, class_id, score).map_err(value_err)
}

pub fn image_from_rows(obj: &Bound<'_, PyAny>) -> PyResult<Image> {
    let (w, h, pixels) = rows_of(obj, |v| {
        let c: Vec<u8> = v.extract()?;
        <Rgb8>::try_from(c.as_slice()).map_err(|_| value_err("pixels must have 3 channels"))
    })?;
    Image::new(w, h, pixels).map_err(value_err)
}

pub fn mask_rows(mask: &MaskInstance) -> Rows {
    mask.bits().chunks(mask.width() as usize).map(<[bool]>::to_vec).collect()
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// GrabCut seeded from a box; returns `(mask_rows, energy_trace, iterations)`.
#[pyfunction]
#[pyo3(signature = (image, bbox, k = 5, gamma = 50.0, max_iters = 5, seed = 0))]
fn grabcut(image: &Bound<'_, PyAny>, bbox: BoxTuple, k: usize, gamma: f64, max_iters: usize, seed: u64) -> PyResult<(Rows, Vec<f64>, usize)> {
    let img = image_from_rows(image)?;
    let cfg = GrabCutConfig { k, gamma, max_iters, seed };
    let r = run_grabcut(&img, &to_box(bbox, 0)?, &cfg).map_err(value_err)?;
    Ok((mask_rows(&r.mask), r.energy_trace, r.iterations_run))
}

/// Minimum s-t cut; returns `(flow, on_source_side)`.
#[pyfunction]
#[pyo3(signature = (num_nodes, t_links, n_links = Vec::new()))]
fn min_cut(num_nodes: usize, t_links: Vec<(f64, f64)>, n_links: Vec<(usize, usize, f64)>) -> PyResult<(f64, Vec<bool>)> {
    if t_links.len() > num_nodes {
        return Err(value_err(format!("{} t-links for {num_nodes} nodes", t_links.len())));
    }
    let mut g = FlowGraph::new(num_nodes);
    for (i, (s, t)) in t_links.into_iter().enumerate() {
        g.set_t_links(i, s, t).map_err(value_err)?;
    }
    for (a, b, c) in n_links {
        g.add_n_link(a, b, c).map_err(value_err)?;
    }
    let cut = maxflow::min_cut(&g);
    Ok((cut.flow, cut.side.iter().map(|s| *s == Side::Source).collect()))
}

#[pyfunction]
fn mask_iou(a: &Bound<'_, PyAny>, b: &Bound<'_, PyAny>) -> PyResult<f64> {
    let (a, b) = (mask_from_rows(a, 0, 1.0)?, mask_from_rows(b, 0, 1.0)?);
    if !a.same_dims(&b) {
        return Err(value_err("masks differ in size"));
    }
    Ok(types::mask_iou(&a, &b))
}

#[pyfunction]
fn box_iou(a: BoxTuple, b: BoxTuple) -> PyResult<f64> {
    Ok(to_box(a, 0)?.iou(&to_box(b, 0)?))
}

/// True when the mask's bounding box overlaps `bbox` by at least `threshold`.
#[pyfunction]
#[pyo3(signature = (mask, bbox, threshold = pipeline::DEFAULT_VALIDITY_IOU))]
fn is_valid(mask: &Bound<'_, PyAny>, bbox: BoxTuple, threshold: f64) -> PyResult<bool> {
    Ok(pipeline::validity(&mask_from_rows(mask, 0, 1.0)?, &to_box(bbox, 0)?, threshold).is_valid())
}

#[pyfunction]
#[pyo3(signature = (bbox, area = pipeline::DEFAULT_SIZE_AREA))]
fn size_class(bbox: BoxTuple, area: u64) -> PyResult<&'static str> {
    Ok(match pipeline::size_class(&to_box(bbox, 0)?, area) {
        SizeClass::Small => "small",
        SizeClass::Large => "large",
    })
}

#[pyfunction]
fn ellipse(bbox: BoxTuple, width: u32, height: u32) -> PyResult<Rows> {
    let m = types::rasterize_ellipse(&to_box(bbox, 0)?, width, height).map_err(value_err)?;
    Ok(mask_rows(&m))
}

/// Small-object branch on `(box, class, score)` detections; returns
/// `(mask_rows, origin)` pairs with origin `"grabcut"` or `"ellipse"`.
#[pyfunction]
#[pyo3(signature = (image, detections, threshold = pipeline::DEFAULT_VALIDITY_IOU, seed = 0))]
fn small_branch(image: &Bound<'_, PyAny>, detections: Vec<(BoxTuple, u32, f64)>, threshold: f64, seed: u64) -> PyResult<Vec<(Rows, &'static str)>> {
    let img = image_from_rows(image)?;
    let cfg = GrabCutConfig { seed, ..GrabCutConfig::default() };
    detections
        .into_iter()
        .map(|(b, class, score)| {
            let det = Detection::new(to_box(b, class)?, score).map_err(value_err)?;
            let (mask, origin) = segment_detection(&img, &det, &cfg, threshold).map_err(value_err)?;
            let origin = match origin {
                MaskOrigin::GrabCut => "grabcut",
                MaskOrigin::Ellipse => "ellipse",
            };
            Ok((mask_rows(&mask), origin))
        })
        .collect()
}

/// mAP at 0.5 and 0.75 plus ABO. `predictions[i]` holds `(mask, class, score)`
/// and `ground_truth[i]` holds `(mask, class)` for image `i`.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    predictions: Vec<Vec<(Bound<'py, PyAny>, u32, f64)>>,
    ground_truth: Vec<Vec<(Bound<'py, PyAny>, u32)>>,
) -> PyResult<Bound<'py, PyAny>> {
    let preds = predictions
        .iter()
        .map(|img| img.iter().map(|(m, c, s)| mask_from_rows(m, *c, *s)).collect::<PyResult<Vec<_>>>())
        .collect::<PyResult<Vec<_>>>()?;
    let mut gts = Vec::with_capacity(ground_truth.len());
    for (i, img) in ground_truth.iter().enumerate() {
        let instances = img.iter().map(|(m, c)| mask_from_rows(m, *c, 1.0)).collect::<PyResult<Vec<_>>>()?;
        let dims = instances
            .first()
            .or_else(|| preds.get(i).and_then(|p| p.first()))
            .map_or((1, 1), |m| (m.width(), m.height()));
        gts.push(GroundTruthImage { width: dims.0, height: dims.1, instances });
    }
    let gt = GroundTruthSet::new(gts).map_err(value_err)?;
    json_to_py(py, &evaluate_masks(&preds, &gt).map_err(value_err)?)
}

/// Enhanced-FPN shape report for an image of the given size.
#[pyfunction]
#[pyo3(signature = (height, width, backbone_channels = [256, 512, 1024, 2048], out_channels = 256))]
fn efpn_report<'py>(py: Python<'py>, height: usize, width: usize, backbone_channels: [usize; 4], out_channels: usize) -> PyResult<Bound<'py, PyAny>> {
    let g = build_enhanced_fpn(backbone_channels, out_channels).map_err(value_err)?;
    json_to_py(py, &g.report(height, width).map_err(value_err)?)
}

#[pymodule]
pub fn pyboxseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(grabcut, m)?)?;
    m.add_function(wrap_pyfunction!(min_cut, m)?)?;
    m.add_function(wrap_pyfunction!(mask_iou, m)?)?;
    m.add_function(wrap_pyfunction!(box_iou, m)?)?;
    m.add_function(wrap_pyfunction!(is_valid, m)?)?;
    m.add_function(wrap_pyfunction!(size_class, m)?)?;
    m.add_function(wrap_pyfunction!(ellipse, m)?)?;
    m.add_function(wrap_pyfunction!(small_branch, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(efpn_report, m)?)?;
    Ok(())
}
