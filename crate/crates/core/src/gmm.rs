//! Gaussian mixture color models over raw 0-255 RGB.
//!
//! GrabCut uses hard component assignment. The per-pixel energy that the
//! assignment and refit steps minimize is
//!
//! ```text
//! D(z) = min_k [ -ln w_k - ln N(z; mu_k, S_k) + (eps / 2) tr(S_k^-1) ]
//! ```
//!
//! The trace term is the penalty whose exact minimizer is the regularized
//! covariance `sample_cov + eps * I`, so refitting from a fixed assignment can
//! never raise `D` summed over the assigned pixels.

use std::collections::HashSet;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::types::{Image, Trimap};

pub type Rgb = [f64; 3];

/// Diagonal loading added to every fitted covariance, in RGB^2 units.
pub const COVARIANCE_FLOOR: f64 = 1e-2;

const KMEANS_MAX_ITERS: usize = 20;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GmmError {
    #[error("cannot fit a color model from zero pixels")]
    NoPixels,
    #[error("component count must be at least 1")]
    ZeroComponents,
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("weight {0} is outside [0, 1]")]
    InvalidWeight(f64),
    #[error("trimap has no {side} pixels")]
    EmptySide { side: &'static str },
    #[error("trimap is {trimap_w}x{trimap_h} but image is {image_w}x{image_h}")]
    DimensionMismatch {
        trimap_w: u32,
        trimap_h: u32,
        image_w: u32,
        image_h: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    weight: f64,
    mean: Vector3<f64>,
    covariance: Matrix3<f64>,
    inverse: Matrix3<f64>,
    log_det: f64,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: Rgb, covariance: [[f64; 3]; 3]) -> Result<Self, GmmError> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(GmmError::InvalidWeight(weight));
        }
        let cov = Matrix3::from_fn(|r, c| covariance[r][c]);
        Self::from_parts(weight, Vector3::from(mean), cov)
    }

    fn from_parts(weight: f64, mean: Vector3<f64>, covariance: Matrix3<f64>) -> Result<Self, GmmError> {
        let chol = covariance
            .cholesky()
            .ok_or(GmmError::NotPositiveDefinite)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self {
            weight,
            mean,
            covariance,
            inverse: chol.inverse(),
            log_det,
        })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn mean(&self) -> Rgb {
        [self.mean.x, self.mean.y, self.mean.z]
    }

    pub fn covariance(&self) -> [[f64; 3]; 3] {
        let c = &self.covariance;
        [
            [c[(0, 0)], c[(0, 1)], c[(0, 2)]],
            [c[(1, 0)], c[(1, 1)], c[(1, 2)]],
            [c[(2, 0)], c[(2, 1)], c[(2, 2)]],
        ]
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `ln N(pixel; mean, covariance)`, ignoring the weight.
    pub fn log_density(&self, pixel: &Rgb) -> f64 {
        let d = Vector3::from(*pixel) - self.mean;
        let maha = d.dot(&(self.inverse * d));
        -0.5 * (3.0 * LN_2PI + self.log_det + maha)
    }

    /// Hard-assignment energy of `pixel` under this component.
    pub fn assignment_energy(&self, pixel: &Rgb) -> f64 {
        if self.weight <= 0.0 {
            return f64::INFINITY;
        }
        -self.weight.ln() - self.log_density(pixel) + 0.5 * COVARIANCE_FLOOR * self.inverse.trace()
    }
}

/// Mean and regularized population covariance of `pixels`, with weight 1.
pub fn fit_component(pixels: &[Rgb]) -> Result<GaussianComponent, GmmError> {
    if pixels.is_empty() {
        return Err(GmmError::NoPixels);
    }
    let n = pixels.len() as f64;
    let mean = pixels
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p))
        / n;
    let mut cov = Matrix3::zeros();
    for p in pixels {
        let d = Vector3::from(*p) - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    cov += Matrix3::identity() * COVARIANCE_FLOOR;
    GaussianComponent::from_parts(1.0, mean, cov)
}

/// Mixture negative log-likelihood `-ln sum_k w_k N(pixel; k)` in nats.
pub fn neg_log_likelihood(model: &[GaussianComponent], pixel: &Rgb) -> f64 {
    let logs: Vec<f64> = model
        .iter()
        .filter(|c| c.weight > 0.0)
        .map(|c| c.weight.ln() + c.log_density(pixel))
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    -(max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
}

/// One side's mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    components: Vec<GaussianComponent>,
}

impl Gmm {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self, GmmError> {
        if components.is_empty() {
            return Err(GmmError::ZeroComponents);
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn neg_log_likelihood(&self, pixel: &Rgb) -> f64 {
        neg_log_likelihood(&self.components, pixel)
    }

    /// Lowest-energy component for `pixel`; ties go to the lower index.
    pub fn best_component(&self, pixel: &Rgb) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.components.iter().enumerate() {
            let e = c.assignment_energy(pixel);
            if e < best.1 {
                best = (k, e);
            }
        }
        best
    }

    /// The GrabCut data term: energy of the best component.
    pub fn data_energy(&self, pixel: &Rgb) -> f64 {
        self.best_component(pixel).1
    }

    /// Seeded k-means clustering followed by one fit per cluster.
    pub fn from_kmeans(pixels: &[Rgb], k: usize, seed: u64) -> Result<Self, GmmError> {
        let km = kmeans_init(pixels, k, seed)?;
        Self::fit_assigned(pixels, &km.assignments, km.k)
    }

    /// Fits one component per assignment label. Labels with no pixels are
    /// dropped, so the result may hold fewer than `k` components.
    pub fn fit_assigned(pixels: &[Rgb], assignments: &[usize], k: usize) -> Result<Self, GmmError> {
        debug_assert_eq!(pixels.len(), assignments.len());
        if pixels.is_empty() {
            return Err(GmmError::NoPixels);
        }
        let mut groups: Vec<Vec<Rgb>> = vec![Vec::new(); k];
        for (p, &a) in pixels.iter().zip(assignments) {
            groups[a].push(*p);
        }
        let total = pixels.len() as f64;
        let components = groups
            .iter()
            .filter(|g| !g.is_empty())
            .map(|g| fit_component(g).map(|c| c.with_weight(g.len() as f64 / total)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(components)
    }

    pub fn weight_sum(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }
}

/// Result of seeded Lloyd's k-means.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Effective cluster count after clamping to the distinct-color count.
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centers: Vec<Rgb>,
}

fn dist2(a: &Rgb, b: &Rgb) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn nearest(centers: &[Rgb], p: &Rgb) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = dist2(c, p);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// k-means++ seeding then Lloyd iterations until the assignment stops
/// changing or 20 rounds pass. `k` is clamped to the number of distinct colors
/// and no cluster is left empty.
pub fn kmeans_init(pixels: &[Rgb], k: usize, seed: u64) -> Result<KMeans, GmmError> {
    if pixels.is_empty() {
        return Err(GmmError::NoPixels);
    }
    if k == 0 {
        return Err(GmmError::ZeroComponents);
    }
    let distinct: HashSet<[u64; 3]> = pixels
        .iter()
        .map(|p| [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()])
        .collect();
    let k = k.min(distinct.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = vec![pixels[rng.gen_range(0..pixels.len())]];
    let mut d2: Vec<f64> = pixels.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = pixels[pick];
        for (slot, p) in d2.iter_mut().zip(pixels) {
            *slot = slot.min(dist2(p, &c));
        }
        centers.push(c);
    }

    let mut assignments: Vec<usize> = pixels.iter().map(|p| nearest(&centers, p)).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        reseed_empty_clusters(pixels, &mut centers, &mut assignments);
        centers = cluster_means(pixels, &assignments, k);
        let next: Vec<usize> = pixels.iter().map(|p| nearest(&centers, p)).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    reseed_empty_clusters(pixels, &mut centers, &mut assignments);
    centers = cluster_means(pixels, &assignments, k);
    Ok(KMeans {
        k,
        assignments,
        centers,
    })
}

fn cluster_means(pixels: &[Rgb], assignments: &[usize], k: usize) -> Vec<Rgb> {
    let mut sums = vec![[0.0; 3]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in pixels.iter().zip(assignments) {
        for c in 0..3 {
            sums[a][c] += p[c];
        }
        counts[a] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| {
            let n = n.max(1) as f64;
            [s[0] / n, s[1] / n, s[2] / n]
        })
        .collect()
}

/// Moves the point farthest from its own center into each empty cluster.
fn reseed_empty_clusters(pixels: &[Rgb], centers: &mut [Rgb], assignments: &mut [usize]) {
    let k = centers.len();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let means = cluster_means(pixels, assignments, k);
        let (far, _) = pixels
            .iter()
            .enumerate()
            .filter(|(i, _)| counts[assignments[*i]] > 1)
            .map(|(i, p)| (i, dist2(p, &means[assignments[i]])))
            .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if far == usize::MAX {
            // fewer pixels than clusters; impossible after distinct-color clamping
            return;
        }
        assignments[far] = empty;
        centers[empty] = pixels[far];
    }
}

/// Foreground and background color models.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPair {
    pub foreground: Gmm,
    pub background: Gmm,
}

/// Splits image pixels by trimap side: (foreground side, background side).
pub fn split_by_side(image: &Image, trimap: &Trimap) -> Result<(Vec<Rgb>, Vec<Rgb>), GmmError> {
    check_dims(image, trimap)?;
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (px, label) in image.pixels().iter().zip(trimap.labels()) {
        let z = to_rgb(px);
        if label.is_foreground() {
            fg.push(z);
        } else {
            bg.push(z);
        }
    }
    if fg.is_empty() {
        return Err(GmmError::EmptySide { side: "foreground" });
    }
    if bg.is_empty() {
        return Err(GmmError::EmptySide { side: "background" });
    }
    Ok((fg, bg))
}

fn check_dims(image: &Image, trimap: &Trimap) -> Result<(), GmmError> {
    if image.width() != trimap.width() || image.height() != trimap.height() {
        return Err(GmmError::DimensionMismatch {
            trimap_w: trimap.width(),
            trimap_h: trimap.height(),
            image_w: image.width(),
            image_h: image.height(),
        });
    }
    Ok(())
}

#[inline]
pub fn to_rgb(px: &[u8; 3]) -> Rgb {
    [px[0] as f64, px[1] as f64, px[2] as f64]
}

impl GmmPair {
    /// Initial models from k-means on each trimap side.
    pub fn init(image: &Image, trimap: &Trimap, k: usize, seed: u64) -> Result<Self, GmmError> {
        let (fg, bg) = split_by_side(image, trimap)?;
        Ok(Self {
            foreground: Gmm::from_kmeans(&fg, k, seed)?,
            background: Gmm::from_kmeans(&bg, k, seed ^ 0x9e37_79b9_7f4a_7c15)?,
        })
    }

    pub fn side(&self, foreground: bool) -> &Gmm {
        if foreground {
            &self.foreground
        } else {
            &self.background
        }
    }
}

/// Hard-assigns every pixel to its best component within its trimap side and
/// refits each component from its pixels; weights become pixel fractions.
pub fn reassign_and_refit(pair: &GmmPair, image: &Image, trimap: &Trimap) -> Result<GmmPair, GmmError> {
    let (fg, bg) = split_by_side(image, trimap)?;
    let refit = |model: &Gmm, pixels: &[Rgb]| {
        let assign: Vec<usize> = pixels.iter().map(|p| model.best_component(p).0).collect();
        Gmm::fit_assigned(pixels, &assign, model.components.len())
    };
    Ok(GmmPair {
        foreground: refit(&pair.foreground, &fg)?,
        background: refit(&pair.background, &bg)?,
    })
}
