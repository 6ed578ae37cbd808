//! Independent reference implementations used by the integration tests and
//! the acceptance suite. Nothing here calls the library's algorithms.
#![allow(dead_code)]

use boxseg::eval::GroundTruthImage;
use boxseg::maxflow::FlowGraph;
use boxseg::types::MaskInstance;
use rand::Rng;

/// Minimum cut by enumerating every source set.
pub fn brute_force_min_cut(graph: &FlowGraph) -> f64 {
    let n = graph.node_count();
    assert!(n <= 20, "enumeration is exponential");
    let mut best = f64::INFINITY;
    for set in 0u32..(1 << n) {
        let in_source = |i: usize| set >> i & 1 == 1;
        let mut cost = 0.0;
        for (i, &(to_source, to_sink)) in graph.t_links().iter().enumerate() {
            cost += if in_source(i) { to_sink } else { to_source };
        }
        for &(a, b, c) in graph.n_links() {
            if in_source(a) != in_source(b) {
                cost += c;
            }
        }
        best = best.min(cost);
    }
    best
}

/// Random graph with integer capacities in `0..=max_cap`.
pub fn random_flow_graph(rng: &mut impl Rng, max_nodes: usize, max_cap: u32) -> FlowGraph {
    let n = rng.gen_range(1..=max_nodes);
    let mut g = FlowGraph::new(n);
    for i in 0..n {
        let s = rng.gen_range(0..=max_cap) as f64;
        let t = rng.gen_range(0..=max_cap) as f64;
        g.set_t_links(i, s, t).unwrap();
    }
    let density: f64 = rng.gen_range(0.1..0.8);
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen_bool(density) {
                g.add_n_link(a, b, rng.gen_range(0..=max_cap) as f64).unwrap();
            }
        }
    }
    g
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Inverse via the adjugate.
fn inv3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let d = det3(m);
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [c(1, 2, 1, 2) / d, -c(0, 2, 1, 2) / d, c(0, 1, 1, 2) / d],
        [-c(1, 2, 0, 2) / d, c(0, 2, 0, 2) / d, -c(0, 1, 0, 2) / d],
        [c(1, 2, 0, 1) / d, -c(0, 2, 0, 1) / d, c(0, 1, 0, 1) / d],
    ]
}

/// `-ln sum_k w_k N(z; mu_k, S_k)` by direct density summation.
/// `(weight, mean, covariance)`.
pub type Component = (f64, [f64; 3], [[f64; 3]; 3]);

pub fn mixture_nll(components: &[Component], z: &[f64; 3]) -> f64 {
    let mut density = 0.0;
    for (w, mu, cov) in components {
        let inv = inv3(cov);
        let d = [z[0] - mu[0], z[1] - mu[1], z[2] - mu[2]];
        let mut maha = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                maha += d[r] * inv[r][c] * d[c];
            }
        }
        let norm = (2.0 * std::f64::consts::PI).powf(1.5) * det3(cov).sqrt();
        density += w * (-0.5 * maha).exp() / norm;
    }
    -density.ln()
}

/// Zero-pads explicitly, then applies the four-loop definition.
/// `input` is `[c][y][x]`, `weight` is `[o][c][ky][kx]`.
pub fn conv2d_reference(
    input: &[Vec<Vec<f64>>],
    weight: &[Vec<Vec<Vec<f64>>>],
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Vec<Vec<Vec<f64>>> {
    let (h, w) = (input[0].len(), input[0][0].len());
    let (kh, kw) = (weight[0][0].len(), weight[0][0][0].len());
    let padded: Vec<Vec<Vec<f64>>> = input
        .iter()
        .map(|plane| {
            let mut p = vec![vec![0.0; w + 2 * padding]; h + 2 * padding];
            for y in 0..h {
                for x in 0..w {
                    p[y + padding][x + padding] = plane[y][x];
                }
            }
            p
        })
        .collect();
    let out_h = (h + 2 * padding - kh) / stride + 1;
    let out_w = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![vec![vec![0.0; out_w]; out_h]; weight.len()];
    for (o, kernel) in weight.iter().enumerate() {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = bias[o];
                for (c, plane) in kernel.iter().enumerate() {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            acc += plane[ky][kx] * padded[c][oy * stride + ky][ox * stride + kx];
                        }
                    }
                }
                out[o][oy][ox] = acc;
            }
        }
    }
    out
}

/// Pixel-counting IoU; 0 when the union is empty.
pub fn pixel_iou(a: &MaskInstance, b: &MaskInstance) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(x, y), b.get(x, y));
            inter += (p && q) as u64;
            union += (p || q) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleMetrics {
    pub map_50: f64,
    pub map_75: f64,
    pub abo: f64,
}

/// AP as the sum, over true positives, of the best precision reached at or
/// after that rank, divided by the ground-truth count.
fn envelope_ap(is_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::new();
    let mut tp = 0;
    for (i, &t) in is_tp.iter().enumerate() {
        tp += t as usize;
        precision.push(tp as f64 / (i + 1) as f64);
    }
    let mut total = 0.0;
    for (i, &t) in is_tp.iter().enumerate() {
        if t {
            let best_later = precision[i..].iter().cloned().fold(0.0, f64::max);
            total += best_later;
        }
    }
    total / num_gt as f64
}

fn class_ap(preds: &[Vec<MaskInstance>], gts: &[GroundTruthImage], class: u32, threshold: f64) -> f64 {
    // global ranking: score descending, then image, then position
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (i, list) in preds.iter().enumerate() {
        for (j, p) in list.iter().enumerate() {
            if p.class_id() == class {
                ranked.push((p.score(), i, j));
            }
        }
    }
    for a in 0..ranked.len() {
        for b in 0..ranked.len() - 1 - a {
            let (x, y) = (ranked[b], ranked[b + 1]);
            let later_first = y.0 > x.0 || (y.0 == x.0 && (y.1, y.2) < (x.1, x.2));
            if later_first {
                ranked.swap(b, b + 1);
            }
        }
    }
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.instances.len()]).collect();
    let mut is_tp = Vec::new();
    for &(_, i, j) in &ranked {
        let p = &preds[i][j];
        let mut best_iou = -1.0;
        let mut best_g = None;
        for (g, gt) in gts[i].instances.iter().enumerate() {
            if gt.class_id() == class && !used[i][g] {
                let v = pixel_iou(p, gt);
                if v > best_iou {
                    best_iou = v;
                    best_g = Some(g);
                }
            }
        }
        let hit = best_g.is_some() && best_iou >= threshold;
        if hit {
            used[i][best_g.unwrap()] = true;
        }
        is_tp.push(hit);
    }
    let num_gt = gts
        .iter()
        .map(|g| g.instances.iter().filter(|m| m.class_id() == class).count())
        .sum();
    envelope_ap(&is_tp, num_gt)
}

/// Direct re-implementation of the evaluation protocol.
pub fn evaluate_reference(preds: &[Vec<MaskInstance>], gts: &[GroundTruthImage]) -> OracleMetrics {
    let mut gt_classes: Vec<u32> = gts.iter().flat_map(|g| g.instances.iter().map(|m| m.class_id())).collect();
    gt_classes.sort();
    gt_classes.dedup();
    let mut all_classes = gt_classes.clone();
    all_classes.extend(preds.iter().flatten().map(|m| m.class_id()));
    all_classes.sort();
    all_classes.dedup();

    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let ap50: Vec<f64> = all_classes.iter().map(|&c| class_ap(preds, gts, c, 0.5)).collect();
    let ap75: Vec<f64> = all_classes.iter().map(|&c| class_ap(preds, gts, c, 0.75)).collect();
    let abo: Vec<f64> = gt_classes
        .iter()
        .map(|&c| {
            let mut best = Vec::new();
            for (i, g) in gts.iter().enumerate() {
                for gt in g.instances.iter().filter(|m| m.class_id() == c) {
                    let b = preds[i]
                        .iter()
                        .filter(|p| p.class_id() == c)
                        .map(|p| pixel_iou(p, gt))
                        .fold(0.0, f64::max);
                    best.push(b);
                }
            }
            mean(&best)
        })
        .collect();
    OracleMetrics {
        map_50: mean(&ap50),
        map_75: mean(&ap75),
        abo: mean(&abo),
    }
}

fn rect_mask(w: u32, h: u32, r: (u32, u32, u32, u32), class: u32, score: f64) -> MaskInstance {
    MaskInstance::from_fn(w, h, class, score, |x, y| x >= r.0 && x < r.2 && y >= r.1 && y < r.3).unwrap()
}

/// Up to 10 images of 16x16 with disjoint rectangular ground truth and
/// predictions that jitter, duplicate, misclassify or invent objects. Scores
/// are multiples of 1/8 so ties occur.
pub fn random_eval_corpus(rng: &mut impl Rng, classes: u32) -> (Vec<Vec<MaskInstance>>, Vec<GroundTruthImage>) {
    let (w, h) = (16u32, 16u32);
    let images = rng.gen_range(1..=10);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let mut taken = vec![false; (w * h) as usize];
        let mut gt = Vec::new();
        for _ in 0..rng.gen_range(0..=4) {
            let x0 = rng.gen_range(0..w - 1);
            let y0 = rng.gen_range(0..h - 1);
            let r = (x0, y0, rng.gen_range(x0 + 1..=w.min(x0 + 8)), rng.gen_range(y0 + 1..=h.min(y0 + 8)));
            let cells: Vec<usize> = (r.1..r.3).flat_map(|y| (r.0..r.2).map(move |x| (y * w + x) as usize)).collect();
            if cells.iter().any(|&c| taken[c]) {
                continue;
            }
            cells.iter().for_each(|&c| taken[c] = true);
            gt.push((r, rng.gen_range(0..classes)));
        }
        let mut p = Vec::new();
        for &(r, class) in &gt {
            for _ in 0..rng.gen_range(0..=2) {
                let j = |v: u32, rng: &mut dyn rand::RngCore| (v as i64 + rng.gen_range(-2..=2)).clamp(0, 16) as u32;
                let x0 = j(r.0, rng).min(w - 1);
                let y0 = j(r.1, rng).min(h - 1);
                let x1 = j(r.2, rng).max(x0 + 1);
                let y1 = j(r.3, rng).max(y0 + 1);
                let c = if rng.gen_bool(0.15) { rng.gen_range(0..classes) } else { class };
                p.push(rect_mask(w, h, (x0, y0, x1, y1), c, rng.gen_range(0..=8) as f64 / 8.0));
            }
        }
        for _ in 0..rng.gen_range(0..=2) {
            let x0 = rng.gen_range(0..w - 1);
            let y0 = rng.gen_range(0..h - 1);
            let r = (x0, y0, rng.gen_range(x0 + 1..=w), rng.gen_range(y0 + 1..=h));
            p.push(rect_mask(w, h, r, rng.gen_range(0..classes), rng.gen_range(0..=8) as f64 / 8.0));
        }
        preds.push(p);
        gts.push(GroundTruthImage {
            width: w,
            height: h,
            instances: gt.into_iter().map(|(r, c)| rect_mask(w, h, r, c, 1.0)).collect(),
        });
    }
    (preds, gts)
}
