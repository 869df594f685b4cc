//! Scoring and maximization over latent assignments.
//!
//! Or-node positions live on a lattice of `block / steps_per_block` steps
//! whose origin is fixed per pyramid level. Every (or-node, displacement)
//! pair of every window therefore lands on a lattice key, and the clipped
//! contour pieces of a key are shared by all windows that reach it. A
//! [`SearchIndex`] precomputes those pieces once per sample; scoring a new
//! parameter vector then only costs sparse dot products.
//!
//! The root histogram is additive over or-nodes, so each or-node picks its
//! leaf, displacement and contour jointly, and only the collaborative edges
//! couple or-nodes. The leaf configuration `V` is enumerated exactly (or over
//! pruned top-t lists) in slot order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::iou;
use crate::features::{
    deformation_feature, dot, leaf_feature, leaf_points, root_feature, shape_context_counts,
    shape_context_norm,
};
use crate::geometry::{
    build_scale_pyramid, resample_polyline, Block, BoundingBox, Contour, ContourId, ContourSet,
    Point,
};
use crate::model::{AndOrModel, Label, LatentAssignment};

/// Best (contour, position) of one live leaf slot within a window.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafCandidate {
    pub or_node: usize,
    pub slot: usize,
    pub contour: Option<ContourId>,
    pub position: Point,
    /// Leaf response plus deformation term.
    pub response: f64,
    /// Root-histogram contribution of the selected contour in this window.
    pub root: f64,
}

impl LeafCandidate {
    pub fn total(&self) -> f64 {
        self.response + self.root
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Window box in original image coordinates.
    pub bbox: BoundingBox,
    pub score: f64,
    pub level: usize,
    pub scale: f64,
    /// Assignment in the coordinates of pyramid level `level`.
    pub assignment: LatentAssignment,
}

/// Result of searching one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowResult {
    pub score: f64,
    pub assignment: LatentAssignment,
    /// Per or-node candidates of all live slots, sorted by descending response.
    pub candidates: Vec<Vec<LeafCandidate>>,
}

/// Best window of a whole [`SearchIndex`].
#[derive(Debug, Clone, PartialEq)]
pub struct BestWindow {
    pub level: usize,
    pub window: usize,
    pub result: WindowResult,
}

/// Displacements in lattice steps, nearest first: by `|dx| + |dy|`, then
/// `dy`, then `dx`.
pub fn displacements(radius: usize) -> Vec<(i32, i32)> {
    let r = radius as i32;
    let mut out: Vec<(i32, i32)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .collect();
    out.sort_by_key(|&(dx, dy)| (dx.abs() + dy.abs(), dy, dx));
    out
}

#[derive(Debug, Clone)]
struct Piece {
    contour: u32,
    bins: Vec<(u16, u16)>,
}

#[derive(Debug, Clone)]
struct Site {
    u: i32,
    v: i32,
    p0: Point,
    /// Root-histogram bin counts per contour, `None` for contours out of reach.
    root: Vec<Option<Vec<(u16, u16)>>>,
}

fn sparse(counts: &[u16]) -> Vec<(u16, u16)> {
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(k, &c)| (k as u16, c))
        .collect()
}

fn sparse_dot(bins: &[(u16, u16)], w: &[f64], norm: f64) -> f64 {
    bins.iter()
        .map(|&(k, c)| w[k as usize] * (f64::from(c) * norm))
        .sum()
}

/// One pyramid level of a sample with precomputed lattice pieces and windows.
#[derive(Debug, Clone)]
pub struct LevelIndex {
    level: usize,
    scale: f64,
    contours: ContourSet,
    origin: Point,
    step: (f64, f64),
    block: (f64, f64),
    key_lo: (i32, i32),
    key_cols: usize,
    key_start: Vec<u32>,
    pieces: Vec<Piece>,
    sites: Vec<Site>,
}

impl LevelIndex {
    /// Indexes `contours` for windows whose top-left corners sit at
    /// `origin + (u * step_x, v * step_y)` for each `(u, v)` in `sites`.
    pub fn new(
        model: &AndOrModel,
        level: usize,
        scale: f64,
        contours: ContourSet,
        origin: Point,
        sites: &[(i32, i32)],
    ) -> Result<Self> {
        let cfg = model.config();
        let sc = &cfg.shape_context;
        if model.or_nodes() * sc.bins() > u16::MAX as usize {
            return Err(Error::Config("root histogram too large to index".into()));
        }
        let step = cfg.step();
        let (bw, bh) = model.block_size();
        let spb = cfg.steps_per_block as i32;
        let r = cfg.displacement_steps as i32;
        let grid = model.grid();

        let mut order: Vec<usize> = (0..contours.len()).collect();
        order.sort_by_key(|&k| contours.contours()[k].id());
        let bboxes: Vec<BoundingBox> = contours.contours().iter().map(|c| c.bounds()).collect();

        let (mut lo, mut hi) = ((i32::MAX, i32::MAX), (i32::MIN, i32::MIN));
        for &(u, v) in sites {
            lo.0 = lo.0.min(u - r);
            lo.1 = lo.1.min(v - r);
            hi.0 = hi.0.max(u + (grid.cols as i32 - 1) * spb + r);
            hi.1 = hi.1.max(v + (grid.rows as i32 - 1) * spb + r);
        }
        let (key_cols, key_rows) = if sites.is_empty() {
            lo = (0, 0);
            (0, 0)
        } else {
            ((hi.0 - lo.0 + 1) as usize, (hi.1 - lo.1 + 1) as usize)
        };

        let mut index = LevelIndex {
            level,
            scale,
            contours,
            origin,
            step,
            block: (bw, bh),
            key_lo: lo,
            key_cols,
            key_start: Vec::with_capacity(key_cols * key_rows + 1),
            pieces: Vec::new(),
            sites: Vec::with_capacity(sites.len()),
        };

        index.key_start.push(0);
        for ky in lo.1..lo.1 + key_rows as i32 {
            for kx in lo.0..lo.0 + key_cols as i32 {
                let block = Block::centered(index.key_center(kx, ky), bw, bh)?;
                let bbox = block.to_box();
                for &k in &order {
                    if !bboxes[k].intersects(&bbox) {
                        continue;
                    }
                    let c = &index.contours.contours()[k];
                    if let Some(pts) = leaf_points(c, &block, sc) {
                        let counts = shape_context_counts(&pts, block.diagonal(), sc);
                        index.pieces.push(Piece {
                            contour: k as u32,
                            bins: sparse(&counts),
                        });
                    }
                }
                index.key_start.push(index.pieces.len() as u32);
            }
        }

        let root_points: Vec<Option<Vec<Point>>> = index
            .contours
            .contours()
            .iter()
            .map(|c| resample_polyline(c.points(), sc.n_points).ok())
            .collect();
        let (rx, ry) = cfg.displacement_radius();
        let bins = sc.bins();
        for &(u, v) in sites {
            let p0 = index.site_origin(u, v);
            let window = model.window_at(p0);
            let reach = BoundingBox {
                xmin: window.origin.x - rx,
                ymin: window.origin.y - ry,
                xmax: window.xmax() + rx,
                ymax: window.ymax() + ry,
            };
            let centers = grid.centers(&window);
            let diag = window.diagonal();
            let root = root_points
                .iter()
                .zip(&bboxes)
                .map(|(pts, bb)| {
                    let pts = pts.as_ref().filter(|_| bb.intersects(&reach))?;
                    let mut counts = vec![0u16; centers.len() * bins];
                    for (k, c) in centers.iter().enumerate() {
                        for p in pts {
                            counts[k * bins + sc.bin_of(p.x - c.x, p.y - c.y, diag)] += 1;
                        }
                    }
                    Some(sparse(&counts))
                })
                .collect();
            index.sites.push(Site { u, v, p0, root });
        }
        Ok(index)
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn contours(&self) -> &ContourSet {
        &self.contours
    }

    pub fn n_windows(&self) -> usize {
        self.sites.len()
    }

    pub fn n_pieces(&self) -> usize {
        self.pieces.len()
    }

    /// Top-left corner of window `w` in level coordinates.
    pub fn window_origin(&self, w: usize) -> Point {
        self.sites[w].p0
    }

    fn site_origin(&self, u: i32, v: i32) -> Point {
        Point::new(
            self.origin.x + f64::from(u) * self.step.0,
            self.origin.y + f64::from(v) * self.step.1,
        )
    }

    fn key_center(&self, kx: i32, ky: i32) -> Point {
        Point::new(
            self.origin.x + f64::from(kx) * self.step.0 + self.block.0 / 2.0,
            self.origin.y + f64::from(ky) * self.step.1 + self.block.1 / 2.0,
        )
    }

    fn key_pieces(&self, kx: i32, ky: i32) -> std::ops::Range<usize> {
        let k = (ky - self.key_lo.1) as usize * self.key_cols + (kx - self.key_lo.0) as usize;
        self.key_start[k] as usize..self.key_start[k + 1] as usize
    }

    /// Searches window `w`; `memo` caches leaf dot products of this level's
    /// pieces for one parameter vector and must come from [`Self::memo`].
    fn search(
        &self,
        scorer: &Scorer<'_>,
        w: usize,
        memo: &mut [f64],
        prune_k: Option<usize>,
    ) -> Result<WindowResult> {
        let model = scorer.model;
        let cfg = model.config();
        let grid = model.grid();
        let spb = cfg.steps_per_block as i32;
        let site = &self.sites[w];
        let n_slots = model.n_slots();
        let root_w = model.root_weights();
        let mut root_memo = vec![f64::NAN; self.contours.len()];
        let mut root_dot = |k: usize| -> f64 {
            if root_memo[k].is_nan() {
                root_memo[k] = site.root[k]
                    .as_ref()
                    .map_or(0.0, |b| sparse_dot(b, root_w, scorer.root_norm));
            }
            root_memo[k]
        };

        let mut candidates = Vec::with_capacity(model.or_nodes());
        for i in 0..model.or_nodes() {
            let (row, col) = grid.row_col(i);
            let anchor = model.anchor_position(i, site.p0, 1.0);
            let def_w = model.deformation_weights(i);
            let placed: Vec<(i32, i32, Point, f64)> = scorer
                .disps
                .iter()
                .map(|&(dx, dy)| {
                    let kx = site.u + col as i32 * spb + dx;
                    let ky = site.v + row as i32 * spb + dy;
                    let center = self.key_center(kx, ky);
                    let block = Block {
                        origin: center,
                        width: self.block.0,
                        height: self.block.1,
                    };
                    let cost = dot(def_w, &deformation_feature(anchor, center, &block).0);
                    (kx, ky, center, cost)
                })
                .collect();

            let mut list = Vec::new();
            for j in model.live_slots(i) {
                let leaf_w = model.leaf_weights(j);
                let mut best: Option<LeafCandidate> = None;
                for &(kx, ky, center, cost) in &placed {
                    let mut consider = |contour: Option<ContourId>, leaf: f64, root: f64| {
                        let response = leaf + cost;
                        if best.as_ref().map_or(true, |b| response + root > b.total()) {
                            best = Some(LeafCandidate {
                                or_node: i,
                                slot: j,
                                contour,
                                position: center,
                                response,
                                root,
                            });
                        }
                    };
                    for p in self.key_pieces(kx, ky) {
                        let piece = &self.pieces[p];
                        let m = &mut memo[p * n_slots + j];
                        if m.is_nan() {
                            *m = sparse_dot(&piece.bins, leaf_w, scorer.leaf_norm);
                        }
                        let k = piece.contour as usize;
                        consider(Some(self.contours.contours()[k].id()), *m, root_dot(k));
                    }
                    consider(None, 0.0, 0.0);
                }
                list.push(best.expect("at least one displacement"));
            }
            if list.is_empty() {
                return Err(Error::Unscorable(i));
            }
            list.sort_by(|a, b| b.response.total_cmp(&a.response).then(a.slot.cmp(&b.slot)));
            candidates.push(list);
        }

        let (choice, score) = scorer.enumerate(&candidates, prune_k);
        let mut positions = vec![site.p0];
        let mut active = vec![false; n_slots];
        let mut selected = Vec::with_capacity(choice.len());
        for c in &choice {
            positions.push(c.position);
            active[c.slot] = true;
            selected.push(c.contour);
        }
        Ok(WindowResult {
            score,
            assignment: LatentAssignment {
                positions,
                active,
                selected,
            },
            candidates,
        })
    }

    fn memo(&self, model: &AndOrModel) -> Vec<f64> {
        vec![f64::NAN; self.pieces.len() * model.n_slots()]
    }
}

/// Parameters derived from one model for a scoring pass.
struct Scorer<'m> {
    model: &'m AndOrModel,
    edge_w: Vec<f64>,
    leaf_norm: f64,
    root_norm: f64,
    disps: Vec<(i32, i32)>,
}

impl<'m> Scorer<'m> {
    fn new(model: &'m AndOrModel) -> Self {
        let n = model.n_slots();
        let mut edge_w = vec![0.0; n * n];
        for (&(j, k), &w) in model.edges().iter().zip(model.edge_weights()) {
            edge_w[j * n + k] = w;
            edge_w[k * n + j] = w;
        }
        let sc = &model.config().shape_context;
        Scorer {
            model,
            edge_w,
            leaf_norm: shape_context_norm(sc),
            root_norm: 1.0 / (model.or_nodes() * sc.n_points) as f64,
            disps: displacements(model.config().displacement_steps),
        }
    }

    /// Exhaustive search over one candidate per or-node, lexicographically
    /// smallest slot vector on ties.
    fn enumerate<'c>(
        &self,
        candidates: &'c [Vec<LeafCandidate>],
        prune_k: Option<usize>,
    ) -> (Vec<&'c LeafCandidate>, f64) {
        let lists: Vec<Vec<&LeafCandidate>> = candidates
            .iter()
            .map(|l| {
                let keep = prune_k.map_or(l.len(), |t| t.clamp(1, l.len()));
                let mut v: Vec<&LeafCandidate> = l[..keep].iter().collect();
                v.sort_by_key(|c| c.slot);
                v
            })
            .collect();
        let grid = self.model.grid();
        let n = self.model.n_slots();
        let z = lists.len();
        let mut pick = vec![0usize; z];
        let mut partial = vec![0.0; z + 1];
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut i = 0usize;
        // Iterative depth-first walk; `pick[i]` is the next choice to try at depth i.
        loop {
            if i == z {
                if best.as_ref().map_or(true, |(_, s)| partial[z] > *s) {
                    best = Some((pick.iter().map(|&p| p - 1).collect(), partial[z]));
                }
                i -= 1;
                continue;
            }
            if pick[i] == lists[i].len() {
                if i == 0 {
                    break;
                }
                pick[i] = 0;
                i -= 1;
                continue;
            }
            let c = lists[i][pick[i]];
            let (row, col) = grid.row_col(i);
            let mut s = partial[i] + c.total();
            if col > 0 {
                s += self.edge_w[c.slot * n + lists[i - 1][pick[i - 1] - 1].slot];
            }
            if row > 0 {
                let up = i - grid.cols;
                s += self.edge_w[c.slot * n + lists[up][pick[up] - 1].slot];
            }
            pick[i] += 1;
            partial[i + 1] = s;
            i += 1;
        }
        let (choice, score) = best.expect("non-empty candidate lists");
        (
            choice
                .iter()
                .enumerate()
                .map(|(i, &p)| lists[i][p])
                .collect(),
            score,
        )
    }
}

/// Sliding-window settings shared by detection and negative mining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlideParams {
    pub n_scales: usize,
    pub per_octave: usize,
    /// Window stride in pixels, rounded to lattice steps; `None` uses 1/8 of
    /// the window width.
    pub stride: Option<f64>,
}

impl Default for SlideParams {
    fn default() -> Self {
        SlideParams {
            n_scales: 6,
            per_octave: 2,
            stride: None,
        }
    }
}

/// Scale that gives `gt` the window's area, and the window corner that
/// centers the window on the scaled box.
pub fn fit_window(model: &AndOrModel, gt: &BoundingBox) -> Result<(f64, Point)> {
    let cfg = model.config();
    if !(gt.area() > 0.0) {
        return Err(Error::Geometry("groundtruth box has zero area".into()));
    }
    let s = (cfg.window_width * cfg.window_height / gt.area()).sqrt();
    let c = gt.center();
    let p0 = Point::new(
        c.x * s - cfg.window_width / 2.0,
        c.y * s - cfg.window_height / 2.0,
    );
    Ok((s, p0))
}

/// All indexed pyramid levels of one sample.
#[derive(Debug, Clone)]
pub struct SearchIndex {
    levels: Vec<LevelIndex>,
}

impl SearchIndex {
    /// A single window with top-left corner `p0`, at the original scale.
    pub fn single_window(model: &AndOrModel, x: &ContourSet, p0: Point) -> Result<Self> {
        let level = LevelIndex::new(model, 0, 1.0, x.clone(), p0, &[(0, 0)])?;
        Ok(SearchIndex {
            levels: vec![level],
        })
    }

    /// A single window fitted to `gt`: the sample is rescaled so the box
    /// area matches the window area and the window is centered on it.
    pub fn for_box(model: &AndOrModel, x: &ContourSet, gt: &BoundingBox) -> Result<Self> {
        let (s, p0) = fit_window(model, gt)?;
        let level = LevelIndex::new(model, 0, s, x.scaled(s), p0, &[(0, 0)])?;
        Ok(SearchIndex {
            levels: vec![level],
        })
    }

    /// Every window position of every pyramid level on which the window fits.
    /// Level 0 always holds at least the window at the origin.
    pub fn sliding(model: &AndOrModel, x: &ContourSet, params: &SlideParams) -> Result<Self> {
        let cfg = model.config();
        let (sx, sy) = cfg.step();
        let stride = params.stride.unwrap_or(cfg.window_width / 8.0);
        if !(stride > 0.0) {
            return Err(Error::Config("window stride must be positive".into()));
        }
        let su = ((stride / sx).round() as i32).max(1);
        let sv = ((stride / sy).round() as i32).max(1);
        let mut levels = Vec::new();
        for lvl in build_scale_pyramid(x, params.n_scales, params.per_octave)? {
            let (w, h) = (lvl.contours.width(), lvl.contours.height());
            let mut sites = Vec::new();
            let mut v = 0;
            while f64::from(v) * sy + cfg.window_height <= h + 1e-9 {
                let mut u = 0;
                while f64::from(u) * sx + cfg.window_width <= w + 1e-9 {
                    sites.push((u, v));
                    u += su;
                }
                v += sv;
            }
            if sites.is_empty() && lvl.index == 0 {
                sites.push((0, 0));
            }
            if sites.is_empty() {
                continue;
            }
            levels.push(LevelIndex::new(
                model,
                lvl.index,
                lvl.scale,
                lvl.contours,
                Point::new(0.0, 0.0),
                &sites,
            )?);
        }
        Ok(SearchIndex { levels })
    }

    pub fn levels(&self) -> &[LevelIndex] {
        &self.levels
    }

    pub fn n_windows(&self) -> usize {
        self.levels.iter().map(|l| l.n_windows()).sum()
    }

    /// Scores every window, in level order then window order.
    pub fn all_windows(
        &self,
        model: &AndOrModel,
        prune_k: Option<usize>,
    ) -> Result<Vec<BestWindow>> {
        let scorer = Scorer::new(model);
        let mut out = Vec::with_capacity(self.n_windows());
        for (li, level) in self.levels.iter().enumerate() {
            let mut memo = level.memo(model);
            for w in 0..level.n_windows() {
                out.push(BestWindow {
                    level: li,
                    window: w,
                    result: level.search(&scorer, w, &mut memo, prune_k)?,
                });
            }
        }
        Ok(out)
    }

    /// The highest-scoring window; the first one wins ties.
    pub fn best(&self, model: &AndOrModel, prune_k: Option<usize>) -> Result<Option<BestWindow>> {
        let scorer = Scorer::new(model);
        let mut best: Option<BestWindow> = None;
        for (li, level) in self.levels.iter().enumerate() {
            let mut memo = level.memo(model);
            for w in 0..level.n_windows() {
                let result = level.search(&scorer, w, &mut memo, prune_k)?;
                if best.as_ref().map_or(true, |b| result.score > b.result.score) {
                    best = Some(BestWindow {
                        level: li,
                        window: w,
                        result,
                    });
                }
            }
        }
        Ok(best)
    }
}

/// Eq. 1: best response of live leaf `j` in the block centered at `p` over
/// all contours, smaller contour id first on ties, with the empty selection
/// (response 0) considered last.
pub fn leaf_response(
    model: &AndOrModel,
    x: &ContourSet,
    j: usize,
    p: Point,
) -> Result<(Option<ContourId>, f64)> {
    if !model.is_live(j) {
        return Err(Error::DeadSlot(j));
    }
    let (bw, bh) = model.block_size();
    let block = Block::centered(p, bw, bh)?;
    let cfg = &model.config().shape_context;
    let mut sorted: Vec<&Contour> = x.contours().iter().collect();
    sorted.sort_by_key(|c| c.id());
    let mut best: Option<(Option<ContourId>, f64)> = None;
    for c in sorted {
        if leaf_points(c, &block, cfg).is_none() {
            continue;
        }
        let r = dot(model.leaf_weights(j), &leaf_feature(c, &block, cfg).0);
        if best.map_or(true, |(_, b)| r > b) {
            best = Some((Some(c.id()), r));
        }
    }
    Ok(match best {
        Some((c, r)) if r >= 0.0 => (c, r),
        _ => (None, 0.0),
    })
}

/// Bottom-up pass of one window: per or-node, the best candidate of every
/// live slot, sorted by descending response.
pub fn bottom_up(model: &AndOrModel, x: &ContourSet, p0: Point) -> Result<Vec<Vec<LeafCandidate>>> {
    Ok(infer_window(model, x, p0, None)?.candidates)
}

/// Sum of the chosen candidates' responses under activation `active`.
pub fn r_bot(candidates: &[Vec<LeafCandidate>], active: &[bool]) -> f64 {
    candidates
        .iter()
        .flatten()
        .filter(|c| active[c.slot])
        .map(|c| c.response)
        .sum()
}

/// Collaborative term: sum of edge weights whose endpoints are both active.
pub fn edge_response(model: &AndOrModel, active: &[bool]) -> f64 {
    model
        .edges()
        .iter()
        .zip(model.edge_weights())
        .filter(|(&(j, k), _)| active[j] && active[k])
        .map(|(_, w)| w)
        .sum()
}

/// Top-down verification: root classifier over the contours the active
/// candidates selected, plus the edge term.
pub fn top_down(
    model: &AndOrModel,
    x: &ContourSet,
    p0: Point,
    active: &[bool],
    candidates: &[Vec<LeafCandidate>],
) -> f64 {
    let mut chosen: Vec<Option<Contour>> = vec![None; model.or_nodes()];
    for c in candidates.iter().flatten().filter(|c| active[c.slot]) {
        chosen[c.or_node] = c.contour.and_then(|id| x.get(id)).cloned();
    }
    let window = model.window_at(p0);
    let root = root_feature(&chosen, &window, &model.grid(), &model.config().shape_context);
    dot(model.root_weights(), &root.0) + edge_response(model, active)
}

/// Score of `h` evaluated term by term: leaf responses, deformation terms,
/// edges and the root classifier.
pub fn score_sum_form(model: &AndOrModel, x: &ContourSet, h: &LatentAssignment) -> Result<f64> {
    model
        .validate_assignment(h, Some(x))
        .map_err(|v| Error::Assignment(v.to_string()))?;
    let cfg = &model.config().shape_context;
    let (bw, bh) = model.block_size();
    let mut total = 0.0;
    let mut chosen = Vec::with_capacity(model.or_nodes());
    for i in 0..model.or_nodes() {
        let j = h.active_slot(model, i).expect("validated one-hot");
        let block = Block::centered(h.positions[i + 1], bw, bh)?;
        let c = h.selected[i].and_then(|id| x.get(id));
        if let Some(c) = c {
            total += dot(model.leaf_weights(j), &leaf_feature(c, &block, cfg).0);
        }
        let anchor = model.anchor_position(i, h.positions[0], 1.0);
        let d = deformation_feature(anchor, h.positions[i + 1], &block);
        total += dot(model.deformation_weights(i), &d.0);
        chosen.push(c.cloned());
    }
    total += edge_response(model, &h.active);
    let root = root_feature(&chosen, &model.window_at(h.positions[0]), &model.grid(), cfg);
    Ok(total + dot(model.root_weights(), &root.0))
}

fn infer_window(
    model: &AndOrModel,
    x: &ContourSet,
    p0: Point,
    prune_k: Option<usize>,
) -> Result<WindowResult> {
    let index = SearchIndex::single_window(model, x, p0)?;
    let best = index.best(model, prune_k)?.expect("one window");
    Ok(best.result)
}

/// Eq. 9 for the window at `p0`: the best assignment and its score. With
/// `prune_k = Some(t)` each or-node only keeps its top-t slots.
pub fn infer_best(
    model: &AndOrModel,
    x: &ContourSet,
    p0: Point,
    prune_k: Option<usize>,
) -> Result<(LatentAssignment, f64)> {
    let r = infer_window(model, x, p0, prune_k)?;
    Ok((r.assignment, r.score))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectParams {
    pub slide: SlideParams,
    pub prune_k: Option<usize>,
    /// Boxes overlapping a kept box by more than this IoU are suppressed.
    pub nms_iou: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            slide: SlideParams::default(),
            prune_k: None,
            nms_iou: 0.5,
        }
    }
}

/// Sliding-window detection over the scale pyramid with greedy NMS, sorted
/// by descending score.
pub fn detect(model: &AndOrModel, x: &ContourSet, params: &DetectParams) -> Result<Vec<Detection>> {
    let index = SearchIndex::sliding(model, x, &params.slide)?;
    detect_indexed(model, &index, params)
}

pub fn detect_indexed(
    model: &AndOrModel,
    index: &SearchIndex,
    params: &DetectParams,
) -> Result<Vec<Detection>> {
    let mut all: Vec<Detection> = index
        .all_windows(model, params.prune_k)?
        .into_iter()
        .map(|b| {
            let level = &index.levels[b.level];
            let window = model.window_at(level.window_origin(b.window));
            Detection {
                bbox: window.to_box().scaled(1.0 / level.scale),
                score: b.result.score,
                level: level.level,
                scale: level.scale,
                assignment: b.result.assignment,
            }
        })
        .collect();
    all.sort_by(|a, b| {
        b.score.total_cmp(&a.score).then_with(|| {
            let ka = [a.bbox.xmin, a.bbox.ymin, a.bbox.xmax, a.bbox.ymax];
            let kb = [b.bbox.xmin, b.bbox.ymin, b.bbox.xmax, b.bbox.ymax];
            ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in all {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= params.nms_iou) {
            kept.push(d);
        }
    }
    Ok(kept)
}

/// Outcome of `max_{y,H} ω·φ(X,y,H) + L(y_k, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAugmented {
    pub label: Label,
    /// Best positive-label assignment, with its level in the search index.
    pub best: Option<BestWindow>,
    /// `max_H ω·φ(X, H)`; `-inf` when the index holds no window.
    pub s_plus: f64,
    pub value: f64,
}

impl LossAugmented {
    /// Applies the 0-1 loss to a known positive-label maximum.
    pub fn from_best(y_k: Label, best: Option<BestWindow>) -> Self {
        let s_plus = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.result.score);
        let (label, value) = augmented_label(y_k, s_plus);
        LossAugmented {
            label,
            best,
            s_plus,
            value,
        }
    }

    /// The loss `L(y_k, y^)`.
    pub fn loss(&self, y_k: Label) -> f64 {
        if self.label == y_k {
            0.0
        } else {
            1.0
        }
    }
}

/// Label and value of `max_y [S(y) + L(y_k, y)]` given the best
/// positive-label score `s_plus`; ties go to the wrong label.
pub fn augmented_label(y_k: Label, s_plus: f64) -> (Label, f64) {
    match y_k {
        Label::Positive if s_plus > 1.0 => (Label::Positive, s_plus),
        Label::Positive => (Label::Negative, 1.0),
        Label::Negative if s_plus + 1.0 >= 0.0 => (Label::Positive, s_plus + 1.0),
        Label::Negative => (Label::Negative, 0.0),
    }
}

pub fn loss_augmented_infer(
    model: &AndOrModel,
    index: &SearchIndex,
    y_k: Label,
    prune_k: Option<usize>,
) -> Result<LossAugmented> {
    Ok(LossAugmented::from_best(y_k, index.best(model, prune_k)?))
}

/// Predicted label of Eq. 12: positive only when the best score is strictly
/// above zero.
pub fn predict_label(s_plus: f64) -> Label {
    if s_plus > 0.0 {
        Label::Positive
    } else {
        Label::Negative
    }
}
