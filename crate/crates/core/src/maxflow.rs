//! Exact s-t max-flow / min-cut for pixel graphs.
//!
//! The solver follows Boykov and Kolmogorov: two search trees grow from the
//! terminals, an augmenting path is found where they touch, and nodes whose
//! tree arc saturates are re-adopted or freed. Capacities are `f64`; exact
//! zero tests are sound because every residual update subtracts a bottleneck
//! that is no larger than the residual it is taken from.

use std::collections::VecDeque;

use thiserror::Error;

use crate::gmm::{to_rgb, GmmPair, Rgb};
use crate::types::{Image, Trimap, TrimapLabel};

/// Terminal capacity used to pin definite trimap pixels to their side.
pub const DEFINITE_CAPACITY: f64 = 1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("node {node} is out of range for a graph of {count} nodes")]
    NodeOutOfRange { node: usize, count: usize },
    #[error("self edge on node {0}")]
    SelfEdge(usize),
    #[error("capacity {0} must be finite and non-negative")]
    BadCapacity(f64),
    #[error("image is {image_w}x{image_h} but trimap is {trimap_w}x{trimap_h}")]
    DimensionMismatch {
        image_w: u32,
        image_h: u32,
        trimap_w: u32,
        trimap_h: u32,
    },
}

/// Which terminal a node is connected to after the cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Source,
    Sink,
}

/// Undirected n-links plus per-node terminal links.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGraph {
    t_links: Vec<(f64, f64)>,
    n_links: Vec<(usize, usize, f64)>,
}

fn check_capacity(c: f64) -> Result<(), FlowError> {
    if c.is_finite() && c >= 0.0 {
        Ok(())
    } else {
        Err(FlowError::BadCapacity(c))
    }
}

impl FlowGraph {
    pub fn new(node_count: usize) -> Self {
        Self {
            t_links: vec![(0.0, 0.0); node_count],
            n_links: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.t_links.len()
    }

    pub fn t_links(&self) -> &[(f64, f64)] {
        &self.t_links
    }

    pub fn n_links(&self) -> &[(usize, usize, f64)] {
        &self.n_links
    }

    fn check_node(&self, node: usize) -> Result<(), FlowError> {
        if node < self.node_count() {
            Ok(())
        } else {
            Err(FlowError::NodeOutOfRange {
                node,
                count: self.node_count(),
            })
        }
    }

    /// Sets the source and sink capacities of `node`.
    pub fn set_t_links(&mut self, node: usize, to_source: f64, to_sink: f64) -> Result<(), FlowError> {
        self.check_node(node)?;
        check_capacity(to_source)?;
        check_capacity(to_sink)?;
        self.t_links[node] = (to_source, to_sink);
        Ok(())
    }

    /// Adds an undirected edge of capacity `cap` in each direction.
    pub fn add_n_link(&mut self, a: usize, b: usize, cap: f64) -> Result<(), FlowError> {
        self.check_node(a)?;
        self.check_node(b)?;
        if a == b {
            return Err(FlowError::SelfEdge(a));
        }
        check_capacity(cap)?;
        self.n_links.push((a, b, cap));
        Ok(())
    }

    /// Sum of severed capacities for a labeling: a Source node severs its
    /// sink link, a Sink node its source link, and every n-link across
    /// the partition counts once.
    pub fn cut_value(&self, side: &[Side]) -> f64 {
        assert_eq!(side.len(), self.node_count());
        let terminal: f64 = self
            .t_links
            .iter()
            .zip(side)
            .map(|(&(s, t), side)| match side {
                Side::Source => t,
                Side::Sink => s,
            })
            .sum();
        let pairwise: f64 = self
            .n_links
            .iter()
            .filter(|&&(a, b, _)| side[a] != side[b])
            .map(|&(_, _, c)| c)
            .sum();
        terminal + pairwise
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinCut {
    pub flow: f64,
    pub side: Vec<Side>,
}

/// Maximum flow and a minimum cut. The source side is exactly the set of
/// nodes reachable from the source in the final residual graph.
pub fn min_cut(graph: &FlowGraph) -> MinCut {
    let mut solver = Solver::new(graph);
    solver.run();
    MinCut {
        flow: solver.flow,
        side: solver.sides(),
    }
}

const NONE: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Parent {
    Free,
    Terminal,
    Orphan,
    /// Arc from this node to its tree parent.
    Arc(usize),
}

struct Solver {
    arc_start: Vec<usize>,
    head: Vec<usize>,
    sister: Vec<usize>,
    rcap: Vec<f64>,
    /// Terminal residual: positive toward the source tree, negative toward the sink.
    tr: Vec<f64>,
    parent: Vec<Parent>,
    is_sink: Vec<bool>,
    ts: Vec<u64>,
    dist: Vec<u32>,
    active: VecDeque<usize>,
    in_active: Vec<bool>,
    orphans: VecDeque<usize>,
    time: u64,
    flow: f64,
}

impl Solver {
    fn new(graph: &FlowGraph) -> Self {
        let n = graph.node_count();
        let mut degree = vec![0usize; n + 1];
        for &(a, b, _) in &graph.n_links {
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut arc_start = vec![0usize; n + 1];
        for i in 0..n {
            arc_start[i + 1] = arc_start[i] + degree[i];
        }
        let m = arc_start[n];
        let mut fill = arc_start.clone();
        let mut head = vec![0; m];
        let mut sister = vec![0; m];
        let mut rcap = vec![0.0; m];
        for &(a, b, c) in &graph.n_links {
            let ab = fill[a];
            let ba = fill[b];
            fill[a] += 1;
            fill[b] += 1;
            head[ab] = b;
            head[ba] = a;
            sister[ab] = ba;
            sister[ba] = ab;
            rcap[ab] = c;
            rcap[ba] = c;
        }
        let mut flow = 0.0;
        let mut tr = vec![0.0; n];
        for (i, &(s, t)) in graph.t_links.iter().enumerate() {
            flow += s.min(t);
            tr[i] = s - t;
        }
        Self {
            arc_start,
            head,
            sister,
            rcap,
            tr,
            parent: vec![Parent::Free; n],
            is_sink: vec![false; n],
            ts: vec![0; n],
            dist: vec![0; n],
            active: VecDeque::new(),
            in_active: vec![false; n],
            orphans: VecDeque::new(),
            time: 0,
            flow,
        }
    }

    fn arcs(&self, i: usize) -> std::ops::Range<usize> {
        self.arc_start[i]..self.arc_start[i + 1]
    }

    fn activate(&mut self, i: usize) {
        if !self.in_active[i] {
            self.in_active[i] = true;
            self.active.push_back(i);
        }
    }

    fn next_active(&mut self) -> Option<usize> {
        while let Some(i) = self.active.pop_front() {
            self.in_active[i] = false;
            if self.parent[i] != Parent::Free {
                return Some(i);
            }
        }
        None
    }

    fn run(&mut self) {
        for i in 0..self.tr.len() {
            if self.tr[i] != 0.0 {
                self.is_sink[i] = self.tr[i] < 0.0;
                self.parent[i] = Parent::Terminal;
                self.ts[i] = 0;
                self.dist[i] = 1;
                self.activate(i);
            }
        }

        let mut current: Option<usize> = None;
        loop {
            let i = match current.take().filter(|&i| self.parent[i] != Parent::Free) {
                Some(i) => i,
                None => match self.next_active() {
                    Some(i) => i,
                    None => break,
                },
            };
            let middle = self.grow(i);
            if middle != NONE {
                current = Some(i);
                self.augment(middle);
                self.time += 1;
                self.adopt();
            }
        }
    }

    /// Expands the tree of `i` by one layer; returns the arc joining the two
    /// trees (oriented source tree to sink tree) or `NONE`.
    fn grow(&mut self, i: usize) -> usize {
        let source_tree = !self.is_sink[i];
        for a in self.arcs(i) {
            let open = if source_tree {
                self.rcap[a] > 0.0
            } else {
                self.rcap[self.sister[a]] > 0.0
            };
            if !open {
                continue;
            }
            let j = self.head[a];
            if self.parent[j] == Parent::Free {
                self.is_sink[j] = !source_tree;
                self.parent[j] = Parent::Arc(self.sister[a]);
                self.ts[j] = self.ts[i];
                self.dist[j] = self.dist[i] + 1;
                self.activate(j);
            } else if self.is_sink[j] == source_tree {
                return if source_tree { a } else { self.sister[a] };
            } else if self.ts[j] <= self.ts[i] && self.dist[j] > self.dist[i] {
                self.parent[j] = Parent::Arc(self.sister[a]);
                self.ts[j] = self.ts[i];
                self.dist[j] = self.dist[i] + 1;
            }
        }
        NONE
    }

    fn augment(&mut self, middle: usize) {
        let s_start = self.head[self.sister[middle]];
        let t_start = self.head[middle];

        let mut bottleneck = self.rcap[middle];
        let mut i = s_start;
        while let Parent::Arc(a) = self.parent[i] {
            bottleneck = bottleneck.min(self.rcap[self.sister[a]]);
            i = self.head[a];
        }
        bottleneck = bottleneck.min(self.tr[i]);
        let mut i = t_start;
        while let Parent::Arc(a) = self.parent[i] {
            bottleneck = bottleneck.min(self.rcap[a]);
            i = self.head[a];
        }
        bottleneck = bottleneck.min(-self.tr[i]);

        self.rcap[self.sister[middle]] += bottleneck;
        self.rcap[middle] -= bottleneck;

        let mut i = s_start;
        loop {
            match self.parent[i] {
                Parent::Arc(a) => {
                    let sa = self.sister[a];
                    self.rcap[a] += bottleneck;
                    self.rcap[sa] -= bottleneck;
                    let next = self.head[a];
                    if self.rcap[sa] == 0.0 {
                        self.make_orphan_front(i);
                    }
                    i = next;
                }
                _ => {
                    self.tr[i] -= bottleneck;
                    if self.tr[i] == 0.0 {
                        self.make_orphan_front(i);
                    }
                    break;
                }
            }
        }
        let mut i = t_start;
        loop {
            match self.parent[i] {
                Parent::Arc(a) => {
                    let sa = self.sister[a];
                    self.rcap[sa] += bottleneck;
                    self.rcap[a] -= bottleneck;
                    let next = self.head[a];
                    if self.rcap[a] == 0.0 {
                        self.make_orphan_front(i);
                    }
                    i = next;
                }
                _ => {
                    self.tr[i] += bottleneck;
                    if self.tr[i] == 0.0 {
                        self.make_orphan_front(i);
                    }
                    break;
                }
            }
        }
        self.flow += bottleneck;
    }

    fn make_orphan_front(&mut self, i: usize) {
        self.parent[i] = Parent::Orphan;
        self.orphans.push_front(i);
    }

    fn make_orphan_back(&mut self, i: usize) {
        self.parent[i] = Parent::Orphan;
        self.orphans.push_back(i);
    }

    fn adopt(&mut self) {
        while let Some(i) = self.orphans.pop_front() {
            self.process_orphan(i);
        }
    }

    /// Length of the tree path from `j` to its terminal, or `None` when the
    /// path runs through an orphan.
    fn origin_distance(&mut self, mut j: usize) -> Option<u32> {
        let mut d = 0u32;
        loop {
            if self.ts[j] == self.time {
                return Some(d + self.dist[j]);
            }
            d += 1;
            match self.parent[j] {
                Parent::Terminal => {
                    self.ts[j] = self.time;
                    self.dist[j] = 1;
                    return Some(d);
                }
                Parent::Arc(a) => j = self.head[a],
                Parent::Orphan | Parent::Free => return None,
            }
        }
    }

    fn process_orphan(&mut self, i: usize) {
        let sink_tree = self.is_sink[i];
        let mut best_arc = NONE;
        let mut best_d = u32::MAX;

        for a0 in self.arcs(i) {
            let open = if sink_tree {
                self.rcap[a0] > 0.0
            } else {
                self.rcap[self.sister[a0]] > 0.0
            };
            let j = self.head[a0];
            if !open || self.is_sink[j] != sink_tree || self.parent[j] == Parent::Free {
                continue;
            }
            if let Some(d) = self.origin_distance(j) {
                if d < best_d {
                    best_arc = a0;
                    best_d = d;
                }
                let mut k = j;
                let mut dk = d;
                while self.ts[k] != self.time {
                    self.ts[k] = self.time;
                    self.dist[k] = dk;
                    dk = dk.saturating_sub(1);
                    match self.parent[k] {
                        Parent::Arc(a) => k = self.head[a],
                        _ => break,
                    }
                }
            }
        }

        if best_arc != NONE {
            self.parent[i] = Parent::Arc(best_arc);
            self.ts[i] = self.time;
            self.dist[i] = best_d + 1;
            return;
        }

        self.parent[i] = Parent::Free;
        for a0 in self.arcs(i) {
            let j = self.head[a0];
            if self.is_sink[j] != sink_tree || self.parent[j] == Parent::Free {
                continue;
            }
            let open = if sink_tree {
                self.rcap[a0] > 0.0
            } else {
                self.rcap[self.sister[a0]] > 0.0
            };
            if open {
                self.activate(j);
            }
            if let Parent::Arc(a) = self.parent[j] {
                if self.head[a] == i {
                    self.make_orphan_back(j);
                }
            }
        }
    }

    fn sides(&self) -> Vec<Side> {
        (0..self.parent.len())
            .map(|i| {
                if self.parent[i] != Parent::Free && !self.is_sink[i] {
                    Side::Source
                } else {
                    Side::Sink
                }
            })
            .collect()
    }
}

/// One undirected 8-neighborhood pair and its smoothness capacity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborPair {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// 8-neighborhood smoothness weights `gamma * exp(-beta |z_p - z_q|^2) / dist`
/// with `beta = 1 / (2 * mean |z_p - z_q|^2)`, or 0 for a constant image.
pub fn smoothness_pairs(image: &Image, gamma: f64) -> Vec<NeighborPair> {
    let w = image.width() as i64;
    let h = image.height() as i64;
    let offsets: [(i64, i64, f64); 4] = [
        (1, 0, 1.0),
        (-1, 1, std::f64::consts::SQRT_2),
        (0, 1, 1.0),
        (1, 1, std::f64::consts::SQRT_2),
    ];
    let mut raw = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for &(dx, dy, dist) in &offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || nx >= w || ny >= h {
                    continue;
                }
                let a = (y * w + x) as usize;
                let b = (ny * w + nx) as usize;
                let (p, q) = (to_rgb(&image.pixels()[a]), to_rgb(&image.pixels()[b]));
                raw.push((a, b, p, q, dist));
            }
        }
    }
    let mean = if raw.is_empty() {
        0.0
    } else {
        raw.iter().map(|r| color_dist2(&r.2, &r.3)).sum::<f64>() / raw.len() as f64
    };
    let beta = if mean > 0.0 { 1.0 / (2.0 * mean) } else { 0.0 };
    raw.into_iter()
        .map(|(a, b, p, q, dist)| NeighborPair {
            a,
            b,
            weight: pair_weight(&p, &q, beta, gamma, dist),
        })
        .collect()
}

fn color_dist2(p: &Rgb, q: &Rgb) -> f64 {
    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
}

pub fn pair_weight(p: &Rgb, q: &Rgb, beta: f64, gamma: f64, dist: f64) -> f64 {
    gamma * (-beta * color_dist2(p, q)).exp() / dist
}

/// The GrabCut graph for one iteration.
///
/// Definite pixels are pinned with [`DEFINITE_CAPACITY`]. A probable pixel's
/// source link carries its background data energy and its sink link the
/// foreground data energy, both shifted by the smaller of the two so that
/// capacities stay non-negative. The shift is the same for either label, so
/// cuts are ranked exactly as by the unshifted energy.
pub fn build_graph(
    image: &Image,
    trimap: &Trimap,
    models: &GmmPair,
    gamma: f64,
) -> Result<FlowGraph, FlowError> {
    if image.width() != trimap.width() || image.height() != trimap.height() {
        return Err(FlowError::DimensionMismatch {
            image_w: image.width(),
            image_h: image.height(),
            trimap_w: trimap.width(),
            trimap_h: trimap.height(),
        });
    }
    let mut graph = FlowGraph::new(image.len());
    for (i, (px, label)) in image.pixels().iter().zip(trimap.labels()).enumerate() {
        let (s, t) = match label {
            TrimapLabel::DefiniteBackground => (0.0, DEFINITE_CAPACITY),
            TrimapLabel::DefiniteForeground => (DEFINITE_CAPACITY, 0.0),
            _ => {
                let z = to_rgb(px);
                let bg = models.background.data_energy(&z);
                let fg = models.foreground.data_energy(&z);
                let m = bg.min(fg);
                (bg - m, fg - m)
            }
        };
        graph.set_t_links(i, s, t)?;
    }
    for pair in smoothness_pairs(image, gamma) {
        graph.add_n_link(pair.a, pair.b, pair.weight)?;
    }
    Ok(graph)
}
