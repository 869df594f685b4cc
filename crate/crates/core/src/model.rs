//! The And-Or graph: a root over `rows x cols` or-nodes, each owning up to
//! `max_leaves` leaf slots, collaborative edges between slots of 4-adjacent
//! or-nodes, and one flat parameter vector.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureLayout, Grid, ShapeContextConfig};
use crate::geometry::{clip_contour, Block, ContourId, ContourSet, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn from_sign(s: i32) -> Option<Label> {
        match s {
            1 => Some(Label::Positive),
            -1 => Some(Label::Negative),
            _ => None,
        }
    }

    pub fn sign(&self) -> i32 {
        match self {
            Label::Positive => 1,
            Label::Negative => -1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "+1",
            Label::Negative => "-1",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of or-nodes `z`; must equal `rows * cols`.
    pub or_nodes: usize,
    pub rows: usize,
    pub cols: usize,
    /// Leaf slot capacity `m` per or-node.
    pub max_leaves: usize,
    pub window_width: f64,
    pub window_height: f64,
    /// Or-node displacement search grid: `steps_per_block` steps per block
    /// side, searched up to `displacement_steps` steps from the anchor.
    pub steps_per_block: usize,
    pub displacement_steps: usize,
    pub shape_context: ShapeContextConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            or_nodes: 6,
            rows: 2,
            cols: 3,
            max_leaves: 4,
            window_width: 72.0,
            window_height: 48.0,
            steps_per_block: 8,
            displacement_steps: 4,
            shape_context: ShapeContextConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Layout used for upright people: 4 rows of 2 blocks, 8 or-nodes.
    pub fn people() -> Self {
        ModelConfig {
            or_nodes: 8,
            rows: 4,
            cols: 2,
            window_width: 48.0,
            window_height: 96.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows * self.cols != self.or_nodes {
            return Err(Error::Config(format!(
                "layout {}x{} does not hold {} or-nodes",
                self.rows, self.cols, self.or_nodes
            )));
        }
        if self.or_nodes == 0 || self.max_leaves == 0 || self.steps_per_block == 0 {
            return Err(Error::Config(
                "or_nodes, max_leaves and steps_per_block must be positive".into(),
            ));
        }
        if !(self.window_width > 0.0 && self.window_height > 0.0) {
            return Err(Error::Config("window must have positive size".into()));
        }
        self.shape_context.validate()
    }

    pub fn grid(&self) -> Grid {
        Grid {
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn block_width(&self) -> f64 {
        self.window_width / self.cols as f64
    }

    pub fn block_height(&self) -> f64 {
        self.window_height / self.rows as f64
    }

    /// Displacement grid step in pixels along x and y.
    pub fn step(&self) -> (f64, f64) {
        (
            self.block_width() / self.steps_per_block as f64,
            self.block_height() / self.steps_per_block as f64,
        )
    }

    /// Largest allowed or-node displacement per axis, in pixels.
    pub fn displacement_radius(&self) -> (f64, f64) {
        let (sx, sy) = self.step();
        let r = self.displacement_steps as f64;
        (r * sx, r * sy)
    }
}

/// A dimension-stable parameter vector laid out like the joint feature.
/// Deformation weights are stored negated, so a plain dot product subtracts
/// the deformation cost.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(pub Vec<f64>);

impl ParameterVector {
    pub fn zeros(dim: usize) -> Self {
        ParameterVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeafSlot {
    pub or_node: usize,
    pub slot_index: usize,
    pub live: bool,
}

/// H = (P, V) plus the contour each or-node selected.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentAssignment {
    /// `positions[0]` is the window origin (top-left corner); `positions[i + 1]`
    /// is the block center chosen for or-node `i`.
    pub positions: Vec<Point>,
    /// One activation per leaf slot, `z * m` entries.
    pub active: Vec<bool>,
    pub selected: Vec<Option<ContourId>>,
}

impl LatentAssignment {
    /// The single active slot of or-node `i`, if the assignment is one-hot there.
    pub fn active_slot(&self, model: &AndOrModel, i: usize) -> Option<usize> {
        let mut found = None;
        for j in model.slots_of(i) {
            if self.active[j] {
                if found.is_some() {
                    return None;
                }
                found = Some(j);
            }
        }
        found
    }

    /// Anchored assignment activating `slots[i]` for each or-node, positioned
    /// exactly at the anchors.
    pub fn anchored(
        model: &AndOrModel,
        p0: Point,
        slots: &[usize],
        selected: Vec<Option<ContourId>>,
    ) -> Self {
        let mut positions = vec![p0];
        positions.extend((0..model.or_nodes()).map(|i| model.anchor_position(i, p0, 1.0)));
        let mut active = vec![false; model.n_slots()];
        for &j in slots {
            active[j] = true;
        }
        LatentAssignment {
            positions,
            active,
            selected,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape(String),
    OneHot { or_node: usize, active: usize },
    DeadSlot { slot: usize },
    DeformationBound { or_node: usize, dx: f64, dy: f64 },
    MissingContour { or_node: usize, id: ContourId },
    SelectionOutsideBlock { or_node: usize, id: ContourId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(s) => write!(f, "shape: {s}"),
            Violation::OneHot { or_node, active } => {
                write!(f, "one-hot: or-node {or_node} has {active} active leaves")
            }
            Violation::DeadSlot { slot } => write!(f, "dead slot: slot {slot} is active"),
            Violation::DeformationBound { or_node, dx, dy } => write!(
                f,
                "deformation bound: or-node {or_node} displaced by ({dx}, {dy})"
            ),
            Violation::MissingContour { or_node, id } => {
                write!(f, "missing contour: or-node {or_node} selects unknown contour {id}")
            }
            Violation::SelectionOutsideBlock { or_node, id } => write!(
                f,
                "selection outside block: contour {id} misses or-node {or_node}'s block"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AndOrModel {
    config: ModelConfig,
    live: Vec<bool>,
    edges: Vec<(usize, usize)>,
    layout: FeatureLayout,
    pub omega: ParameterVector,
}

impl AndOrModel {
    /// Empty model: every slot dead, all parameters zero, edges between every
    /// slot pair of 4-adjacent or-nodes.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid();
        let m = config.max_leaves;
        let z = config.or_nodes;
        let mut edges = Vec::new();
        for a in 0..z {
            for b in a + 1..z {
                if grid.are_4_neighbors(a, b) {
                    for sa in 0..m {
                        for sb in 0..m {
                            edges.push((a * m + sa, b * m + sb));
                        }
                    }
                }
            }
        }
        edges.sort_unstable();
        let layout = FeatureLayout {
            or_nodes: z,
            slots: z * m,
            leaf_dim: config.shape_context.leaf_dim(),
            edges: edges.len(),
            bins: config.shape_context.bins(),
        };
        Ok(AndOrModel {
            config,
            live: vec![false; z * m],
            edges,
            omega: ParameterVector::zeros(layout.dim()),
            layout,
        })
    }

    /// Rebuilds a model from persisted parts.
    pub fn from_parts(
        config: ModelConfig,
        live: Vec<bool>,
        omega: Vec<f64>,
    ) -> Result<Self> {
        let mut model = AndOrModel::new(config)?;
        if live.len() != model.live.len() || omega.len() != model.layout.dim() {
            return Err(Error::Config(format!(
                "model parts have wrong sizes: {} slots, {} parameters",
                live.len(),
                omega.len()
            )));
        }
        model.live = live;
        model.omega = ParameterVector(omega);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    pub fn grid(&self) -> Grid {
        self.config.grid()
    }

    pub fn or_nodes(&self) -> usize {
        self.config.or_nodes
    }

    pub fn n_slots(&self) -> usize {
        self.live.len()
    }

    pub fn slot(&self, or_node: usize, slot_index: usize) -> usize {
        or_node * self.config.max_leaves + slot_index
    }

    pub fn slot_info(&self, j: usize) -> LeafSlot {
        LeafSlot {
            or_node: j / self.config.max_leaves,
            slot_index: j % self.config.max_leaves,
            live: self.live[j],
        }
    }

    pub fn slots_of(&self, or_node: usize) -> std::ops::Range<usize> {
        let m = self.config.max_leaves;
        or_node * m..(or_node + 1) * m
    }

    pub fn is_live(&self, j: usize) -> bool {
        self.live.get(j).copied().unwrap_or(false)
    }

    pub fn live_flags(&self) -> &[bool] {
        &self.live
    }

    pub fn live_slots(&self, or_node: usize) -> impl Iterator<Item = usize> + '_ {
        self.slots_of(or_node).filter(move |&j| self.live[j])
    }

    pub fn live_count(&self) -> usize {
        self.live.iter().filter(|&&l| l).count()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn block_size(&self) -> (f64, f64) {
        (self.config.block_width(), self.config.block_height())
    }

    pub fn window_at(&self, p0: Point) -> Block {
        Block {
            origin: p0,
            width: self.config.window_width,
            height: self.config.window_height,
        }
    }

    /// Center of or-node `i`'s cell when the window's top-left corner sits at
    /// `p0`; `scale` multiplies the window dimensions.
    pub fn anchor_position(&self, i: usize, p0: Point, scale: f64) -> Point {
        let (r, c) = self.grid().row_col(i);
        Point::new(
            p0.x + scale * (c as f64 + 0.5) * self.config.block_width(),
            p0.y + scale * (r as f64 + 0.5) * self.config.block_height(),
        )
    }

    pub fn leaf_weights(&self, j: usize) -> &[f64] {
        &self.omega.0[self.layout.leaf_range(j)]
    }

    /// The stored (negated) deformation weights of or-node `i`.
    pub fn deformation_weights(&self, i: usize) -> &[f64] {
        &self.omega.0[self.layout.deformation_range(i)]
    }

    pub fn edge_weights(&self) -> &[f64] {
        &self.omega.0[self.layout.edge_range()]
    }

    pub fn root_weights(&self) -> &[f64] {
        &self.omega.0[self.layout.root_range()]
    }

    /// Makes the lowest dead slot of or-node `i` live with the given leaf weights.
    pub fn create_leaf(&mut self, i: usize, init_weights: &[f64]) -> Result<usize> {
        if i >= self.or_nodes() {
            return Err(Error::Config(format!("or-node {i} out of range")));
        }
        if init_weights.len() != self.layout.leaf_dim {
            return Err(Error::Config(format!(
                "leaf weights need {} entries, got {}",
                self.layout.leaf_dim,
                init_weights.len()
            )));
        }
        let j = self
            .slots_of(i)
            .find(|&j| !self.live[j])
            .ok_or(Error::NoFreeSlot(i))?;
        self.live[j] = true;
        let range = self.layout.leaf_range(j);
        self.omega.0[range].copy_from_slice(init_weights);
        Ok(j)
    }

    /// Kills slot `j`, zeroing its leaf weights and every incident edge weight.
    pub fn remove_leaf(&mut self, j: usize) -> Result<()> {
        if j >= self.n_slots() || !self.live[j] {
            return Err(Error::DeadSlot(j));
        }
        self.live[j] = false;
        let range = self.layout.leaf_range(j);
        self.omega.0[range].fill(0.0);
        let e0 = self.layout.edge_offset();
        for (e, &(a, b)) in self.edges.iter().enumerate() {
            if a == j || b == j {
                self.omega.0[e0 + e] = 0.0;
            }
        }
        Ok(())
    }

    /// The same model with every collaborative edge weight set to zero.
    pub fn without_edges(&self) -> AndOrModel {
        let mut m = self.clone();
        let range = m.layout.edge_range();
        m.omega.0[range].fill(0.0);
        m
    }

    /// Re-zeroes parameters of dead slots and of edges touching them.
    pub fn enforce_dead_slots(&mut self) {
        let e0 = self.layout.edge_offset();
        for j in 0..self.n_slots() {
            if !self.live[j] {
                let range = self.layout.leaf_range(j);
                self.omega.0[range].fill(0.0);
            }
        }
        for (e, &(a, b)) in self.edges.iter().enumerate() {
            if !self.live[a] || !self.live[b] {
                self.omega.0[e0 + e] = 0.0;
            }
        }
    }

    /// Checks one-hot activation over live slots, displacement bounds and, when
    /// `x` is given, that selected contours exist.
    pub fn validate_assignment(
        &self,
        h: &LatentAssignment,
        x: Option<&ContourSet>,
    ) -> std::result::Result<(), Violation> {
        let z = self.or_nodes();
        if h.positions.len() != z + 1 || h.active.len() != self.n_slots() || h.selected.len() != z
        {
            return Err(Violation::Shape(format!(
                "expected {} positions, {} activations, {} selections; got {}, {}, {}",
                z + 1,
                self.n_slots(),
                z,
                h.positions.len(),
                h.active.len(),
                h.selected.len()
            )));
        }
        if let Some(j) = (0..self.n_slots()).find(|&j| h.active[j] && !self.live[j]) {
            return Err(Violation::DeadSlot { slot: j });
        }
        let (rx, ry) = self.config.displacement_radius();
        let tol = 1e-9 * (1.0 + rx.max(ry));
        for i in 0..z {
            let active = self.slots_of(i).filter(|&j| h.active[j]).count();
            if active != 1 {
                return Err(Violation::OneHot { or_node: i, active });
            }
            let anchor = self.anchor_position(i, h.positions[0], 1.0);
            let dx = h.positions[i + 1].x - anchor.x;
            let dy = h.positions[i + 1].y - anchor.y;
            if dx.abs() > rx + tol || dy.abs() > ry + tol {
                return Err(Violation::DeformationBound { or_node: i, dx, dy });
            }
            if let (Some(x), Some(id)) = (x, h.selected[i]) {
                let c = x
                    .get(id)
                    .ok_or(Violation::MissingContour { or_node: i, id })?;
                let (bw, bh) = self.block_size();
                let block = Block::centered(h.positions[i + 1], bw, bh)
                    .map_err(|e| Violation::Shape(e.to_string()))?;
                if clip_contour(c, &block).is_empty() {
                    return Err(Violation::SelectionOutsideBlock { or_node: i, id });
                }
            }
        }
        Ok(())
    }
}
