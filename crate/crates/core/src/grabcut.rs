//! Box-seeded GrabCut.
//!
//! Each iteration refits both color models from the current labeling, builds
//! the graph, solves the min cut and relabels the probable pixels. The joint
//! energy (data terms + severed smoothness terms) is recorded after every cut
//! and cannot increase between iterations.

use log::debug;
use thiserror::Error;

use crate::gmm::{reassign_and_refit, to_rgb, GmmError, GmmPair};
use crate::maxflow::{build_graph, min_cut, smoothness_pairs, FlowError, NeighborPair, Side};
use crate::types::{BBox, GeometryError, Image, MaskInstance, Trimap, TrimapLabel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrabCutError {
    #[error("invalid GrabCut configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrabCutConfig {
    /// Mixture components per side.
    pub k: usize,
    /// Smoothness weight.
    pub gamma: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for GrabCutConfig {
    fn default() -> Self {
        Self {
            k: 5,
            gamma: 50.0,
            max_iters: 5,
            seed: 0,
        }
    }
}

impl GrabCutConfig {
    pub fn validate(&self) -> Result<(), GrabCutError> {
        if self.k == 0 {
            return Err(GrabCutError::InvalidConfig("k must be >= 1".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(GrabCutError::InvalidConfig(format!(
                "gamma must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        if self.max_iters == 0 {
            return Err(GrabCutError::InvalidConfig("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrabCutResult {
    pub mask: MaskInstance,
    /// Total energy after each iteration's cut, in nats.
    pub energy_trace: Vec<f64>,
    pub iterations_run: usize,
}

/// Probable foreground inside the box, definite background outside.
pub fn seed_trimap(bbox: &BBox, width: u32, height: u32) -> Result<Trimap, GeometryError> {
    Trimap::from_box(bbox, width, height)
}

/// Joint energy of a labeling: every pixel's data term under the model of its
/// side plus the smoothness weight of every pair split by the labeling.
pub fn total_energy(image: &Image, trimap: &Trimap, models: &GmmPair, pairs: &[NeighborPair]) -> f64 {
    let labels = trimap.labels();
    let data: f64 = image
        .pixels()
        .iter()
        .zip(labels)
        .map(|(px, l)| models.side(l.is_foreground()).data_energy(&to_rgb(px)))
        .sum();
    let smooth: f64 = pairs
        .iter()
        .filter(|p| labels[p.a].is_foreground() != labels[p.b].is_foreground())
        .map(|p| p.weight)
        .sum();
    data + smooth
}

/// Runs GrabCut from `bbox`. The mask inherits the box class with score 1.
///
/// A box that leaves no background pixels, or a cut that empties the
/// foreground, yields an empty mask rather than an error.
pub fn run(image: &Image, bbox: &BBox, config: &GrabCutConfig) -> Result<GrabCutResult, GrabCutError> {
    config.validate()?;
    let (w, h) = (image.width(), image.height());
    let mut trimap = seed_trimap(bbox, w, h)?;
    let empty = || MaskInstance::empty(w, h, bbox.class_id(), 1.0);

    let mut models = match GmmPair::init(image, &trimap, config.k, config.seed) {
        Ok(m) => m,
        Err(GmmError::EmptySide { side }) => {
            debug!("grabcut: box {bbox:?} leaves no {side} pixels, returning empty mask");
            return Ok(GrabCutResult {
                mask: empty()?,
                energy_trace: Vec::new(),
                iterations_run: 0,
            });
        }
        Err(e) => return Err(e.into()),
    };
    let pairs = smoothness_pairs(image, config.gamma);

    let mut energy_trace = Vec::with_capacity(config.max_iters);
    for iteration in 1..=config.max_iters {
        models = match reassign_and_refit(&models, image, &trimap) {
            Ok(m) => m,
            Err(GmmError::EmptySide { .. }) => break,
            Err(e) => return Err(e.into()),
        };
        let graph = build_graph(image, &trimap, &models, config.gamma)?;
        let cut = min_cut(&graph);

        let mut changed = 0usize;
        let labels: Vec<TrimapLabel> = trimap
            .labels()
            .iter()
            .zip(&cut.side)
            .map(|(&old, side)| {
                if old.is_definite() {
                    return old;
                }
                let new = match side {
                    Side::Source => TrimapLabel::ProbableForeground,
                    Side::Sink => TrimapLabel::ProbableBackground,
                };
                changed += (new != old) as usize;
                new
            })
            .collect();
        trimap = Trimap::from_labels(w, h, labels)?;

        let energy = total_energy(image, &trimap, &models, &pairs);
        debug!("grabcut: iteration {iteration} energy {energy:.6} changed {changed}");
        energy_trace.push(energy);
        if changed == 0 {
            break;
        }
    }

    let bits = trimap
        .labels()
        .iter()
        .map(|&l| l == TrimapLabel::ProbableForeground)
        .collect();
    Ok(GrabCutResult {
        mask: MaskInstance::from_bits(w, h, bits, bbox.class_id(), 1.0)?,
        iterations_run: energy_trace.len(),
        energy_trace,
    })
}

/// One independent GrabCut run per box, in box order.
pub fn generate_pseudo_masks(
    image: &Image,
    boxes: &[BBox],
    config: &GrabCutConfig,
) -> Result<Vec<MaskInstance>, GrabCutError> {
    config.validate()?;
    for b in boxes {
        b.check_within(image.width(), image.height())?;
    }
    boxes
        .iter()
        .map(|b| run(image, b, config).map(|r| r.mask))
        .collect()
}
