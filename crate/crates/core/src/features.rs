//! Feature maps: shape context for leaf-nodes, quadratic deformation for
//! or-nodes, collaborative edge indicators, the holistic root histogram and
//! the assembled joint vector whose layout mirrors the parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{longest_clipped_part, resample_polyline, Block, Contour, ContourSet, Point};
use crate::model::{AndOrModel, Label, LatentAssignment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeContextConfig {
    pub n_points: usize,
    pub n_angles: usize,
    pub n_radii: usize,
    /// Log-spaced radial bins instead of linear ones.
    pub log_radial: bool,
}

impl Default for ShapeContextConfig {
    fn default() -> Self {
        ShapeContextConfig {
            n_points: 20,
            n_angles: 6,
            n_radii: 2,
            log_radial: false,
        }
    }
}

impl ShapeContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 2
            || self.n_points > usize::from(u16::MAX)
            || self.n_angles == 0
            || self.n_radii == 0
        {
            return Err(Error::Config(format!(
                "shape context needs n_points >= 2 and non-empty bins, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Bins of one polar histogram.
    pub fn bins(&self) -> usize {
        self.n_angles * self.n_radii
    }

    /// Dimension of a leaf feature.
    pub fn leaf_dim(&self) -> usize {
        self.n_points * self.bins()
    }

    /// Histogram bin of offset `(dx, dy)` given outer radius `r_max`.
    ///
    /// Angle bins start at angle 0 and are `2π / n_angles` wide. Offsets
    /// beyond `r_max` fall into the outermost radial bin.
    pub fn bin_of(&self, dx: f64, dy: f64, r_max: f64) -> usize {
        let tau = std::f64::consts::TAU;
        let mut theta = dy.atan2(dx);
        if theta < 0.0 {
            theta += tau;
        }
        let a = ((theta / (tau / self.n_angles as f64)) as usize).min(self.n_angles - 1);
        let r = dx.hypot(dy);
        let last = self.n_radii - 1;
        let rb = if self.log_radial {
            if r <= 0.0 {
                0
            } else {
                let steps = (r_max / r).log2().ceil() - 1.0;
                if steps <= 0.0 {
                    last
                } else {
                    last.saturating_sub(steps as usize)
                }
            }
        } else {
            ((r / (r_max / self.n_radii as f64)) as usize).min(last)
        };
        a * self.n_radii + rb
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafFeature(pub Vec<f64>);

impl LeafFeature {
    pub fn zeros(cfg: &ShapeContextConfig) -> Self {
        LeafFeature(vec![0.0; cfg.leaf_dim()])
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

/// `(dx, dy, dx², dy²)` with displacements in block units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationFeature(pub [f64; 4]);

#[derive(Debug, Clone, PartialEq)]
pub struct RootFeature(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct JointFeature(pub Vec<f64>);

impl JointFeature {
    pub fn dot(&self, w: &[f64]) -> f64 {
        dot(&self.0, w)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Regular `rows x cols` partition of a detection window, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn row_col(&self, i: usize) -> (usize, usize) {
        (i / self.cols, i % self.cols)
    }

    pub fn cell(&self, i: usize, window: &Block) -> Block {
        let (r, c) = self.row_col(i);
        let w = window.width / self.cols as f64;
        let h = window.height / self.rows as f64;
        Block {
            origin: Point::new(window.origin.x + c as f64 * w, window.origin.y + r as f64 * h),
            width: w,
            height: h,
        }
    }

    pub fn centers(&self, window: &Block) -> Vec<Point> {
        (0..self.cells())
            .map(|i| self.cell(i, window).center())
            .collect()
    }

    /// Whether cells `a` and `b` share an edge.
    pub fn are_4_neighbors(&self, a: usize, b: usize) -> bool {
        let (ra, ca) = self.row_col(a);
        let (rb, cb) = self.row_col(b);
        ra.abs_diff(rb) + ca.abs_diff(cb) == 1
    }
}

/// Normalized polar histograms of `points`, one per point, concatenated in
/// input order. `R` is the diagonal of `frame`; the inner radial bin ends at
/// `R / n_radii` (linear) or `R / 2` (log).
pub fn shape_context(
    points: &[Point],
    frame: &Block,
    cfg: &ShapeContextConfig,
) -> Result<LeafFeature> {
    if points.len() != cfg.n_points {
        return Err(Error::PointCount {
            expected: cfg.n_points,
            got: points.len(),
        });
    }
    let norm = shape_context_norm(cfg);
    let counts = shape_context_counts(points, frame.diagonal(), cfg);
    Ok(LeafFeature(
        counts.iter().map(|&c| f64::from(c) * norm).collect(),
    ))
}

/// Weight of one neighbour in a per-point histogram.
pub(crate) fn shape_context_norm(cfg: &ShapeContextConfig) -> f64 {
    1.0 / (cfg.n_points - 1) as f64
}

/// Raw neighbour counts behind [`shape_context`]; the feature value of a bin
/// is its count times [`shape_context_norm`].
pub(crate) fn shape_context_counts(
    points: &[Point],
    r_max: f64,
    cfg: &ShapeContextConfig,
) -> Vec<u16> {
    let bins = cfg.bins();
    let mut out = vec![0u16; points.len() * bins];
    for (i, p) in points.iter().enumerate() {
        let hist = &mut out[i * bins..(i + 1) * bins];
        for (k, q) in points.iter().enumerate() {
            if k != i {
                hist[cfg.bin_of(q.x - p.x, q.y - p.y, r_max)] += 1;
            }
        }
    }
    out
}

/// Resampled points of the part of `c` a leaf in `block` looks at, or `None`
/// when `c` misses the block.
pub(crate) fn leaf_points(
    c: &Contour,
    block: &Block,
    cfg: &ShapeContextConfig,
) -> Option<Vec<Point>> {
    let part = longest_clipped_part(c, block)?;
    resample_polyline(part.points(), cfg.n_points).ok()
}

/// Shape context of the longest part of `c` inside `b`, zero when `c` is
/// entirely outside.
pub fn leaf_feature(c: &Contour, b: &Block, cfg: &ShapeContextConfig) -> LeafFeature {
    match leaf_points(c, b, cfg) {
        Some(pts) => shape_context(&pts, b, cfg).expect("resampled to n_points"),
        None => LeafFeature::zeros(cfg),
    }
}

/// Displacement of `p` from `anchor`, normalized by the block size.
pub fn deformation_feature(anchor: Point, p: Point, b: &Block) -> DeformationFeature {
    let dx = (p.x - anchor.x) / b.width;
    let dy = (p.y - anchor.y) / b.height;
    DeformationFeature([dx, dy, dx * dx, dy * dy])
}

/// Accumulates the root histogram contribution of one selection's points.
pub(crate) fn add_root_points(
    points: &[Point],
    centers: &[Point],
    r_max: f64,
    norm: f64,
    cfg: &ShapeContextConfig,
    hist: &mut [f64],
) {
    let bins = cfg.bins();
    for (k, c) in centers.iter().enumerate() {
        let h = &mut hist[k * bins..(k + 1) * bins];
        for p in points {
            h[cfg.bin_of(p.x - c.x, p.y - c.y, r_max)] += norm;
        }
    }
}

/// Holistic histogram of every selected point around each cell center of the
/// window. Counts are divided by the fixed capacity `z * n_points`, so an empty
/// selection simply contributes nothing.
pub fn root_feature(
    selections: &[Option<Contour>],
    window: &Block,
    grid: &Grid,
    cfg: &ShapeContextConfig,
) -> RootFeature {
    let z = grid.cells();
    debug_assert_eq!(selections.len(), z);
    let centers = grid.centers(window);
    let norm = 1.0 / (z * cfg.n_points) as f64;
    let mut hist = vec![0.0; z * cfg.bins()];
    for c in selections.iter().flatten() {
        if let Ok(pts) = resample_polyline(c.points(), cfg.n_points) {
            add_root_points(&pts, &centers, window.diagonal(), norm, cfg, &mut hist);
        }
    }
    RootFeature(hist)
}

/// Which model element a joint-feature coordinate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinate {
    Leaf { slot: usize, bin: usize },
    Deformation { or_node: usize, component: usize },
    Edge(usize),
    Root { or_node: usize, bin: usize },
}

/// Offsets of the segments inside a joint feature / parameter vector:
/// leaf slots, deformations, collaborative edges, root.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub or_nodes: usize,
    pub slots: usize,
    pub leaf_dim: usize,
    pub edges: usize,
    pub bins: usize,
}

impl FeatureLayout {
    pub fn leaf_offset(&self, slot: usize) -> usize {
        slot * self.leaf_dim
    }

    pub fn leaf_range(&self, slot: usize) -> std::ops::Range<usize> {
        let o = self.leaf_offset(slot);
        o..o + self.leaf_dim
    }

    pub fn deformation_offset(&self, or_node: usize) -> usize {
        self.slots * self.leaf_dim + 4 * or_node
    }

    pub fn deformation_range(&self, or_node: usize) -> std::ops::Range<usize> {
        let o = self.deformation_offset(or_node);
        o..o + 4
    }

    pub fn edge_offset(&self) -> usize {
        self.slots * self.leaf_dim + 4 * self.or_nodes
    }

    pub fn edge_range(&self) -> std::ops::Range<usize> {
        let o = self.edge_offset();
        o..o + self.edges
    }

    pub fn root_offset(&self) -> usize {
        self.edge_offset() + self.edges
    }

    pub fn root_dim(&self) -> usize {
        self.or_nodes * self.bins
    }

    pub fn root_range(&self) -> std::ops::Range<usize> {
        let o = self.root_offset();
        o..o + self.root_dim()
    }

    pub fn dim(&self) -> usize {
        self.root_offset() + self.root_dim()
    }

    pub fn locate(&self, index: usize) -> Option<Coordinate> {
        if index >= self.dim() {
            return None;
        }
        let d = self.deformation_offset(0);
        let e = self.edge_offset();
        let r = self.root_offset();
        Some(if index < d {
            Coordinate::Leaf {
                slot: index / self.leaf_dim,
                bin: index % self.leaf_dim,
            }
        } else if index < e {
            Coordinate::Deformation {
                or_node: (index - d) / 4,
                component: (index - d) % 4,
            }
        } else if index < r {
            Coordinate::Edge(index - e)
        } else {
            Coordinate::Root {
                or_node: (index - r) / self.bins,
                bin: (index - r) % self.bins,
            }
        })
    }

    pub fn index_of(&self, c: Coordinate) -> Option<usize> {
        let idx = match c {
            Coordinate::Leaf { slot, bin } if slot < self.slots && bin < self.leaf_dim => {
                self.leaf_offset(slot) + bin
            }
            Coordinate::Deformation { or_node, component }
                if or_node < self.or_nodes && component < 4 =>
            {
                self.deformation_offset(or_node) + component
            }
            Coordinate::Edge(e) if e < self.edges => self.edge_offset() + e,
            Coordinate::Root { or_node, bin } if or_node < self.or_nodes && bin < self.bins => {
                self.root_offset() + or_node * self.bins + bin
            }
            _ => return None,
        };
        Some(idx)
    }
}

/// φ(X, H): leaf features gated by activations, deformations, edge
/// indicators and the root histogram, laid out like the parameter vector.
///
/// Leaf features look at the clipped part of the selected contour inside the
/// or-node's displaced block; the root histogram takes whole selected contours.
pub fn assemble_joint(
    x: &ContourSet,
    model: &AndOrModel,
    h: &LatentAssignment,
) -> Result<JointFeature> {
    model
        .validate_assignment(h, Some(x))
        .map_err(|v| Error::Assignment(v.to_string()))?;
    let cfg = &model.config().shape_context;
    let layout = model.layout();
    let mut out = vec![0.0; layout.dim()];
    let window = model.window_at(h.positions[0]);
    let (bw, bh) = model.block_size();
    let mut chosen: Vec<Option<Contour>> = Vec::with_capacity(model.or_nodes());

    for i in 0..model.or_nodes() {
        let p = h.positions[i + 1];
        let block = Block::centered(p, bw, bh)?;
        let slot = h.active_slot(model, i).expect("validated one-hot");
        let contour = h.selected[i].and_then(|id| x.get(id));
        if let Some(pts) = contour.and_then(|c| leaf_points(c, &block, cfg)) {
            let f = shape_context(&pts, &block, cfg)?;
            out[layout.leaf_range(slot)].copy_from_slice(&f.0);
        }
        chosen.push(contour.cloned());
        let anchor = model.anchor_position(i, h.positions[0], 1.0);
        let d = deformation_feature(anchor, p, &block);
        out[layout.deformation_range(i)].copy_from_slice(&d.0);
    }
    let e0 = layout.edge_offset();
    for (e, &(j, k)) in model.edges().iter().enumerate() {
        if h.active[j] && h.active[k] {
            out[e0 + e] = 1.0;
        }
    }
    let root = root_feature(&chosen, &window, &model.grid(), cfg);
    out[layout.root_range()].copy_from_slice(&root.0);
    Ok(JointFeature(out))
}

/// φ(X, y, H): the joint feature for positives, zero for negatives.
pub fn labeled_feature(
    x: &ContourSet,
    model: &AndOrModel,
    y: Label,
    h: &LatentAssignment,
) -> Result<JointFeature> {
    match y {
        Label::Positive => assemble_joint(x, model, h),
        Label::Negative => Ok(JointFeature(vec![0.0; model.layout().dim()])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn block(x: f64, y: f64, w: f64, h: f64) -> Block {
        Block::new(Point::new(x, y), w, h).unwrap()
    }

    /// Double-loop binning written from the definition: explicit angle and
    /// radius thresholds rather than index arithmetic.
    fn oracle_hist(center: Point, others: &[Point], r_max: f64, norm: f64) -> Vec<f64> {
        let mut h = vec![0.0; 12];
        for q in others {
            let (dx, dy) = (q.x - center.x, q.y - center.y);
            let mut deg = dy.atan2(dx).to_degrees();
            if deg < 0.0 {
                deg += 360.0;
            }
            let mut a = 0;
            for k in 0..6 {
                if deg >= 60.0 * k as f64 {
                    a = k;
                }
            }
            let outer = dx.hypot(dy) >= r_max / 2.0;
            h[a * 2 + usize::from(outer)] += norm;
        }
        h
    }

    #[test]
    fn default_dimension() {
        let cfg = ShapeContextConfig::default();
        assert_eq!(cfg.leaf_dim(), 240);
        let pts: Vec<Point> = (0..20).map(|k| Point::new(k as f64, 2.0 * k as f64)).collect();
        let f = shape_context(&pts, &block(0.0, 0.0, 40.0, 40.0), &cfg).unwrap();
        assert_eq!(f.0.len(), 240);
    }

    #[test]
    fn wrong_point_count() {
        let cfg = ShapeContextConfig::default();
        let pts = vec![Point::new(0.0, 0.0); 5];
        assert!(matches!(
            shape_context(&pts, &block(0.0, 0.0, 10.0, 10.0), &cfg),
            Err(Error::PointCount { expected: 20, got: 5 })
        ));
    }

    #[test]
    fn coincident_clusters_give_one_hot_histograms() {
        let cfg = ShapeContextConfig {
            n_points: 4,
            ..Default::default()
        };
        let pts = vec![
            Point::new(1.0, 1.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 1.0),
        ];
        let f = shape_context(&pts, &block(0.0, 0.0, 10.0, 10.0), &cfg).unwrap();
        for h in f.0.chunks(12) {
            assert_eq!(h.iter().filter(|&&v| v > 0.0).count(), 1);
            assert_abs_diff_eq!(h.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn collinear_points_match_oracle() {
        let cfg = ShapeContextConfig {
            n_points: 3,
            ..Default::default()
        };
        let frame = block(0.0, 0.0, 10.0, 10.0);
        let pts = vec![Point::new(2.0, 3.0), Point::new(5.0, 6.0), Point::new(8.0, 9.0)];
        let f = shape_context(&pts, &frame, &cfg).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let others: Vec<Point> = pts
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != i)
                .map(|(_, q)| *q)
                .collect();
            let expected = oracle_hist(*p, &others, frame.diagonal(), 0.5);
            assert_eq!(&f.0[i * 12..(i + 1) * 12], expected.as_slice());
        }
    }

    #[test]
    fn log_radial_bins() {
        let cfg = ShapeContextConfig {
            n_radii: 3,
            log_radial: true,
            ..Default::default()
        };
        assert_eq!(cfg.bin_of(0.0, 0.0, 8.0), 0);
        assert_eq!(cfg.bin_of(1.0, 0.0, 8.0), 0);
        assert_eq!(cfg.bin_of(2.0, 0.0, 8.0), 1);
        assert_eq!(cfg.bin_of(4.0, 0.0, 8.0), 2);
        assert_eq!(cfg.bin_of(20.0, 0.0, 8.0), 2);
    }

    #[test]
    fn leaf_feature_outside_block_is_zero() {
        let cfg = ShapeContextConfig::default();
        let c = Contour::new(0, vec![Point::new(50.0, 50.0), Point::new(60.0, 55.0)]).unwrap();
        let f = leaf_feature(&c, &block(0.0, 0.0, 10.0, 10.0), &cfg);
        assert_eq!(f.0.len(), 240);
        assert!(f.is_zero());
    }

    #[test]
    fn leaf_feature_is_deterministic() {
        let cfg = ShapeContextConfig::default();
        let c = Contour::new(
            0,
            vec![Point::new(1.0, 1.0), Point::new(5.0, 7.0), Point::new(9.0, 2.0)],
        )
        .unwrap();
        let b = block(0.0, 0.0, 10.0, 10.0);
        assert_eq!(leaf_feature(&c, &b, &cfg), leaf_feature(&c, &b, &cfg));
    }

    #[test]
    fn leaf_feature_uses_longest_part() {
        let cfg = ShapeContextConfig::default();
        // Two vertical legs inside a 10x10 block: left leg spans y 2..10 (8 long),
        // right leg spans y 6..10 (4 long).
        let c = Contour::new(
            0,
            vec![
                Point::new(2.0, 2.0),
                Point::new(2.0, 15.0),
                Point::new(8.0, 15.0),
                Point::new(8.0, 6.0),
            ],
        )
        .unwrap();
        let b = block(0.0, 0.0, 10.0, 10.0);
        let manual = Contour::new(0, vec![Point::new(2.0, 2.0), Point::new(2.0, 10.0)]).unwrap();
        let expected =
            shape_context(&crate::geometry::resample_contour(&manual, 20).unwrap(), &b, &cfg)
                .unwrap();
        assert_eq!(leaf_feature(&c, &b, &cfg), expected);
    }

    #[test]
    fn deformation_examples() {
        let b = block(0.0, 0.0, 10.0, 20.0);
        let a = Point::new(5.0, 5.0);
        assert_eq!(deformation_feature(a, a, &b).0, [0.0; 4]);
        let d = deformation_feature(a, Point::new(25.0, -15.0), &b);
        assert_eq!(d.0, [2.0, -1.0, 4.0, 1.0]);
        let w = [0.1, 0.1, 1.0, 1.0];
        let cost = -dot(&w, &d.0);
        assert_abs_diff_eq!(cost, -5.1, epsilon = 1e-12);
    }

    #[test]
    fn root_feature_examples() {
        let cfg = ShapeContextConfig::default();
        let grid = Grid { rows: 2, cols: 3 };
        let window = block(0.0, 0.0, 60.0, 40.0);
        let empty = root_feature(&vec![None; 6], &window, &grid, &cfg);
        assert_eq!(empty.0.len(), 72);
        assert!(empty.0.iter().all(|&v| v == 0.0));

        let s1 = Contour::new(1, vec![Point::new(2.0, 2.0), Point::new(12.0, 16.0)]).unwrap();
        let s2 = Contour::new(2, vec![Point::new(45.0, 30.0), Point::new(58.0, 22.0)]).unwrap();
        let mut sel = vec![None; 6];
        sel[0] = Some(s1.clone());
        sel[5] = Some(s2.clone());
        let f = root_feature(&sel, &window, &grid, &cfg);
        let mut pts = crate::geometry::resample_contour(&s1, 20).unwrap();
        pts.extend(crate::geometry::resample_contour(&s2, 20).unwrap());
        for (k, c) in grid.centers(&window).iter().enumerate() {
            let expected = oracle_hist(*c, &pts, window.diagonal(), 1.0 / 120.0);
            for (a, b) in f.0[k * 12..(k + 1) * 12].iter().zip(&expected) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn layout_bijection() {
        let layout = FeatureLayout {
            or_nodes: 3,
            slots: 6,
            leaf_dim: 5,
            edges: 7,
            bins: 4,
        };
        assert_eq!(layout.dim(), 30 + 12 + 7 + 12);
        for i in 0..layout.dim() {
            let c = layout.locate(i).unwrap();
            assert_eq!(layout.index_of(c), Some(i));
        }
        assert_eq!(layout.locate(layout.dim()), None);
        assert_eq!(layout.index_of(Coordinate::Edge(7)), None);
    }

    proptest! {
        #[test]
        fn shape_context_translation_invariant(
            pts in prop::collection::vec((0.0f64..30.0, 0.0f64..30.0), 20),
            tx in -50.0f64..50.0, ty in -50.0f64..50.0,
        ) {
            let cfg = ShapeContextConfig::default();
            let pts: Vec<Point> = pts.into_iter().map(|(x, y)| Point::new(x, y)).collect();
            let moved: Vec<Point> = pts.iter().map(|p| p.translate(tx, ty)).collect();
            let frame = block(0.0, 0.0, 30.0, 30.0);
            let frame2 = block(tx, ty, 30.0, 30.0);
            let a = shape_context(&pts, &frame, &cfg).unwrap();
            let b = shape_context(&moved, &frame2, &cfg).unwrap();
            let mismatched = a.0.iter().zip(&b.0).filter(|(x, y)| (*x - *y).abs() > 1e-9).count();
            prop_assert_eq!(mismatched, 0);
        }

        #[test]
        fn histograms_sum_to_one(pts in prop::collection::vec((0.0f64..30.0, 0.0f64..30.0), 20)) {
            let cfg = ShapeContextConfig::default();
            let pts: Vec<Point> = pts.into_iter().map(|(x, y)| Point::new(x, y)).collect();
            let f = shape_context(&pts, &block(0.0, 0.0, 30.0, 30.0), &cfg).unwrap();
            for h in f.0.chunks(12) {
                prop_assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(h.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
