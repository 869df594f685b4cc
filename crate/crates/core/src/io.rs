//! On-disk formats and the synthetic dataset generator.
//!
//! Samples are text (`AOGC 1`), manifests are text (`AOGM 1`), models are a
//! little-endian binary container with a CRC-32 trailer.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::features::ShapeContextConfig;
use crate::geometry::{clip_contour, Block, BoundingBox, Contour, ContourSet, Point};
use crate::model::{AndOrModel, Label, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub label: Label,
    pub contours: ContourSet,
    pub groundtruth: Vec<BoundingBox>,
}

fn format_err(path: &Path, source: FormatError) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes a sample in the `AOGC 1` text format.
pub fn sample_to_string(s: &SampleRecord) -> String {
    let x = &s.contours;
    let mut out = format!("AOGC 1 {} {} {}\n", x.width(), x.height(), s.label);
    for c in x.contours() {
        let _ = writeln!(out, "C {} {}", c.id(), c.points().len());
        for p in c.points() {
            let _ = writeln!(out, "{} {}", p.x, p.y);
        }
    }
    for b in &s.groundtruth {
        let _ = writeln!(out, "GT {} {} {} {}", b.xmin, b.ymin, b.xmax, b.ymax);
    }
    out
}

fn parse_f64(tok: &str, line: usize) -> std::result::Result<f64, FormatError> {
    let v: f64 = tok
        .parse()
        .map_err(|_| FormatError::malformed(line, format!("bad number `{tok}`")))?;
    if !v.is_finite() {
        return Err(FormatError::malformed(line, format!("non-finite number `{tok}`")));
    }
    Ok(v)
}

fn parse_usize(tok: &str, line: usize) -> std::result::Result<u64, FormatError> {
    tok.parse()
        .map_err(|_| FormatError::malformed(line, format!("bad integer `{tok}`")))
}

/// Parses the `AOGC 1` text format; `id` becomes the sample id.
pub fn parse_sample(text: &str, id: &str) -> std::result::Result<SampleRecord, FormatError> {
    let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l));
    let (ln, header) = lines
        .next()
        .ok_or_else(|| FormatError::malformed(1, "empty file"))?;
    let tok: Vec<&str> = header.split_whitespace().collect();
    if tok.first() != Some(&"AOGC") {
        return Err(FormatError::malformed(ln, "expected `AOGC` header"));
    }
    if tok.get(1) != Some(&"1") {
        return Err(FormatError::Version {
            line: ln,
            found: tok.get(1).unwrap_or(&"").to_string(),
        });
    }
    if tok.len() != 5 {
        return Err(FormatError::malformed(ln, "header needs width, height and label"));
    }
    let width = parse_f64(tok[2], ln)?;
    let height = parse_f64(tok[3], ln)?;
    if width <= 0.0 || height <= 0.0 {
        return Err(FormatError::malformed(ln, "canvas must have positive size"));
    }
    let label = match tok[4] {
        "+1" => Label::Positive,
        "-1" => Label::Negative,
        other => return Err(FormatError::malformed(ln, format!("bad label `{other}`"))),
    };

    let mut contours = Vec::new();
    let mut groundtruth = Vec::new();
    while let Some((ln, line)) = lines.next() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.first() {
            None => continue,
            Some(&"C") => {
                if tok.len() != 3 {
                    return Err(FormatError::malformed(ln, "expected `C <id> <npoints>`"));
                }
                let cid = u32::try_from(parse_usize(tok[1], ln)?)
                    .map_err(|_| FormatError::malformed(ln, "contour id too large"))?;
                let n = parse_usize(tok[2], ln)?;
                let mut points = Vec::with_capacity(n.min(1 << 16) as usize);
                for _ in 0..n {
                    let (pl, pline) = lines
                        .next()
                        .ok_or_else(|| FormatError::malformed(ln, "contour truncated"))?;
                    let xy: Vec<&str> = pline.split_whitespace().collect();
                    if xy.len() != 2 {
                        return Err(FormatError::malformed(pl, "expected `<x> <y>`"));
                    }
                    let (x, y) = (parse_f64(xy[0], pl)?, parse_f64(xy[1], pl)?);
                    if x < 0.0 || y < 0.0 || x > width || y > height {
                        return Err(FormatError::OutOfBounds {
                            line: pl,
                            x,
                            y,
                            width,
                            height,
                        });
                    }
                    points.push(Point::new(x, y));
                }
                let c = Contour::new(cid, points)
                    .map_err(|e| FormatError::malformed(ln, e.to_string()))?;
                contours.push(c);
            }
            Some(&"GT") => {
                if tok.len() != 5 {
                    return Err(FormatError::malformed(ln, "expected `GT <xmin> <ymin> <xmax> <ymax>`"));
                }
                let v: Vec<f64> = tok[1..]
                    .iter()
                    .map(|t| parse_f64(t, ln))
                    .collect::<std::result::Result<_, _>>()?;
                let b = BoundingBox::new(v[0], v[1], v[2], v[3])
                    .map_err(|e| FormatError::malformed(ln, e.to_string()))?;
                groundtruth.push(b);
            }
            Some(other) => {
                return Err(FormatError::malformed(ln, format!("unexpected record `{other}`")))
            }
        }
    }
    let contours = ContourSet::new(width, height, contours)
        .map_err(|e| FormatError::malformed(1, e.to_string()))?;
    Ok(SampleRecord {
        id: id.to_string(),
        label,
        contours,
        groundtruth,
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn load_sample(path: &Path) -> Result<SampleRecord> {
    let text = fs::read_to_string(path)?;
    parse_sample(&text, &stem(path)).map_err(|e| format_err(path, e))
}

pub fn save_sample(path: &Path, s: &SampleRecord) -> Result<()> {
    fs::write(path, sample_to_string(s))?;
    Ok(())
}

const MODEL_MAGIC: &[u8; 4] = b"AOGM";
const MODEL_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| FormatError::Model("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> std::result::Result<usize, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
    fn f64(&mut self) -> std::result::Result<f64, FormatError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Binary container: magic, version, config, live-slot flags, edge list, ω,
/// then a CRC-32 of everything before it.
pub fn model_to_bytes(model: &AndOrModel) -> Vec<u8> {
    let cfg = model.config();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MODEL_MAGIC);
    w.u32(MODEL_VERSION as usize);
    for v in [cfg.or_nodes, cfg.rows, cfg.cols, cfg.max_leaves] {
        w.u32(v);
    }
    w.f64(cfg.window_width);
    w.f64(cfg.window_height);
    w.u32(cfg.steps_per_block);
    w.u32(cfg.displacement_steps);
    let sc = &cfg.shape_context;
    for v in [sc.n_points, sc.n_angles, sc.n_radii] {
        w.u32(v);
    }
    w.0.push(u8::from(sc.log_radial));
    w.u32(model.n_slots());
    w.0.extend(model.live_flags().iter().map(|&l| u8::from(l)));
    w.u32(model.edges().len());
    for &(a, b) in model.edges() {
        w.u32(a);
        w.u32(b);
    }
    w.u32(model.omega.dim());
    for &v in &model.omega.0 {
        w.f64(v);
    }
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    w.0
}

pub fn model_from_bytes(bytes: &[u8]) -> std::result::Result<AndOrModel, FormatError> {
    if bytes.len() >= 4 && &bytes[..4] != MODEL_MAGIC {
        return Err(FormatError::Magic);
    }
    if bytes.len() < 12 {
        return Err(FormatError::Checksum);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(FormatError::Checksum);
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()? as u32;
    if version != MODEL_VERSION {
        return Err(FormatError::ModelVersion(version));
    }
    let (or_nodes, rows, cols, max_leaves) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let (window_width, window_height) = (r.f64()?, r.f64()?);
    let (steps_per_block, displacement_steps) = (r.u32()?, r.u32()?);
    let (n_points, n_angles, n_radii) = (r.u32()?, r.u32()?, r.u32()?);
    let log_radial = r.take(1)?[0] != 0;
    let config = ModelConfig {
        or_nodes,
        rows,
        cols,
        max_leaves,
        window_width,
        window_height,
        steps_per_block,
        displacement_steps,
        shape_context: ShapeContextConfig {
            n_points,
            n_angles,
            n_radii,
            log_radial,
        },
    };
    let n_slots = r.u32()?;
    let live: Vec<bool> = r.take(n_slots)?.iter().map(|&b| b != 0).collect();
    let n_edges = r.u32()?;
    let mut edges = Vec::with_capacity(n_edges.min(1 << 20));
    for _ in 0..n_edges {
        edges.push((r.u32()?, r.u32()?));
    }
    let dim = r.u32()?;
    let mut omega = Vec::with_capacity(dim.min(1 << 24));
    for _ in 0..dim {
        omega.push(r.f64()?);
    }
    if r.pos != body.len() {
        return Err(FormatError::Model("trailing bytes".into()));
    }
    let model = AndOrModel::from_parts(config, live, omega)
        .map_err(|e| FormatError::Model(e.to_string()))?;
    if model.edges() != edges.as_slice() {
        return Err(FormatError::Model("edge list does not match the layout".into()));
    }
    Ok(model)
}

pub fn save_model(path: &Path, model: &AndOrModel) -> Result<()> {
    fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<AndOrModel> {
    let bytes = fs::read(path)?;
    model_from_bytes(&bytes).map_err(|e| format_err(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub label: Label,
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("AOGM 1\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{} {} {} {}",
                e.id,
                e.split.as_str(),
                e.label,
                e.path.display()
            );
        }
        s
    }

    pub fn parse(text: &str) -> std::result::Result<Self, FormatError> {
        let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l));
        let (ln, header) = lines
            .next()
            .ok_or_else(|| FormatError::malformed(1, "empty manifest"))?;
        let tok: Vec<&str> = header.split_whitespace().collect();
        if tok.first() != Some(&"AOGM") {
            return Err(FormatError::malformed(ln, "expected `AOGM` header"));
        }
        if tok.get(1) != Some(&"1") || tok.len() != 2 {
            return Err(FormatError::Version {
                line: ln,
                found: tok.get(1).unwrap_or(&"").to_string(),
            });
        }
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (ln, line) in lines {
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.is_empty() {
                continue;
            }
            if tok.len() != 4 {
                return Err(FormatError::malformed(ln, "expected `<id> <split> <label> <path>`"));
            }
            let split = match tok[1] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(FormatError::malformed(ln, format!("bad split `{other}`"))),
            };
            let label = match tok[2] {
                "+1" => Label::Positive,
                "-1" => Label::Negative,
                other => return Err(FormatError::malformed(ln, format!("bad label `{other}`"))),
            };
            if !seen.insert(tok[0].to_string()) {
                return Err(FormatError::malformed(ln, format!("duplicate id `{}`", tok[0])));
            }
            entries.push(ManifestEntry {
                id: tok[0].to_string(),
                split,
                label,
                path: PathBuf::from(tok[3]),
            });
        }
        Ok(DatasetManifest { entries })
    }

    /// Loads a manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m = Self::parse(&text).map_err(|e| format_err(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &m.entries {
            if !base.join(&e.path).is_file() {
                return Err(format_err(
                    path,
                    FormatError::malformed(0, format!("missing sample file {}", e.path.display())),
                ));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Loads the samples of one split, in manifest order. The sample id is the
    /// manifest id; the file's label must agree with the manifest.
    pub fn load_split(&self, manifest_path: &Path, split: Split) -> Result<Vec<SampleRecord>> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let p = base.join(&e.path);
                let mut s = load_sample(&p)?;
                if s.label != e.label {
                    return Err(format_err(
                        &p,
                        FormatError::malformed(1, "label disagrees with manifest"),
                    ));
                }
                s.id = e.id.clone();
                Ok(s)
            })
            .collect()
    }
}

/// One positive shape style: polylines in template coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub name: String,
    pub contours: Vec<Vec<Point>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub canvas_width: f64,
    pub canvas_height: f64,
    pub templates: Vec<Template>,
    /// Per-vertex Gaussian jitter, pixels.
    pub jitter: f64,
    /// Probability of dropping each template contour.
    pub occlusion: f64,
    /// Clutter fragments per negative, inclusive range.
    pub clutter: (usize, usize),
    /// Clutter fragments added to positives, inclusive range.
    pub positive_clutter: (usize, usize),
    /// Clutter fragment length range, pixels.
    pub clutter_length: (f64, f64),
    pub seed: u64,
    pub train: (usize, usize),
    pub test: (usize, usize),
}

impl Default for SynthSpec {
    fn default() -> Self {
        let pts = |v: &[(f64, f64)]| v.iter().map(|&(x, y)| Point::new(x, y)).collect();
        SynthSpec {
            canvas_width: 128.0,
            canvas_height: 128.0,
            templates: vec![
                Template {
                    name: "gable".into(),
                    contours: vec![
                        pts(&[(1.0, 30.0), (17.0, 9.0), (36.0, 1.0)]),
                        pts(&[(37.0, 2.0), (55.0, 10.0), (71.0, 29.0)]),
                        pts(&[(5.0, 47.0), (9.0, 35.0), (17.0, 27.0)]),
                        pts(&[(67.0, 46.0), (63.0, 34.0), (55.0, 26.0)]),
                        pts(&[(27.0, 44.0), (36.0, 29.0), (45.0, 45.0)]),
                    ],
                },
                Template {
                    name: "dome".into(),
                    contours: vec![
                        pts(&[(1.0, 41.0), (4.0, 21.0), (13.0, 8.0), (30.0, 1.0)]),
                        pts(&[(42.0, 2.0), (59.0, 7.0), (68.0, 20.0), (71.0, 40.0)]),
                        pts(&[(9.0, 47.0), (22.0, 35.0), (36.0, 46.0), (50.0, 36.0), (63.0, 47.0)]),
                        pts(&[(29.0, 13.0), (36.0, 26.0), (43.0, 14.0)]),
                    ],
                },
            ],
            jitter: 1.5,
            occlusion: 0.2,
            clutter: (8, 14),
            positive_clutter: (0, 0),
            clutter_length: (15.0, 45.0),
            seed: 7,
            train: (60, 60),
            test: (40, 40),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() || self.templates.iter().any(|t| t.contours.is_empty()) {
            return Err(Error::Config("synth spec needs non-empty templates".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion) || !(self.jitter >= 0.0) {
            return Err(Error::Config("occlusion must lie in [0,1] and jitter be >= 0".into()));
        }
        if self.clutter.0 > self.clutter.1 || self.positive_clutter.0 > self.positive_clutter.1 {
            return Err(Error::Config("clutter ranges must be ordered".into()));
        }
        if !(self.clutter_length.0 > 0.0 && self.clutter_length.0 <= self.clutter_length.1) {
            return Err(Error::Config("clutter length range must be positive and ordered".into()));
        }
        for t in &self.templates {
            let pts: Vec<Point> = t.contours.iter().flatten().copied().collect();
            let b = crate::geometry::bounds_of(&pts)
                .ok_or_else(|| Error::Config(format!("template {} is empty", t.name)))?;
            if b.width() > self.canvas_width || b.height() > self.canvas_height {
                return Err(Error::Config(format!("template {} exceeds the canvas", t.name)));
            }
        }
        Ok(())
    }
}

struct Synth<'a> {
    spec: &'a SynthSpec,
    rng: ChaCha8Rng,
}

impl Synth<'_> {
    fn canvas(&self) -> Block {
        Block {
            origin: Point::new(0.0, 0.0),
            width: self.spec.canvas_width,
            height: self.spec.canvas_height,
        }
    }

    /// A random straight segment or circular arc, clipped to the canvas.
    fn clutter(&mut self, next_id: &mut u32, out: &mut Vec<Contour>) {
        let (w, h) = (self.spec.canvas_width, self.spec.canvas_height);
        let (lmin, lmax) = self.spec.clutter_length;
        let len = self.rng.random_range(lmin..=lmax);
        let start = Point::new(self.rng.random_range(0.0..w), self.rng.random_range(0.0..h));
        let heading = self.rng.random_range(0.0..std::f64::consts::TAU);
        let pts: Vec<Point> = if self.rng.random_bool(0.5) {
            vec![
                start,
                start.translate(len * heading.cos(), len * heading.sin()),
            ]
        } else {
            let bend = self.rng.random_range(0.5..2.5) * if self.rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let n = 5;
            let mut p = start;
            let mut out = vec![p];
            for k in 0..n {
                let a = heading + bend * (k as f64 + 0.5) / n as f64;
                p = p.translate(len / n as f64 * a.cos(), len / n as f64 * a.sin());
                out.push(p);
            }
            out
        };
        let Ok(c) = Contour::new(0, pts) else { return };
        let canvas = self.canvas();
        for part in clip_contour(&c, &canvas) {
            if part.arc_length() >= 2.0 {
                if let Ok(c) = Contour::new(*next_id, part.points().to_vec()) {
                    out.push(c);
                    *next_id += 1;
                }
            }
        }
    }

    fn clamp(&self, p: Point) -> Point {
        Point::new(
            p.x.clamp(0.0, self.spec.canvas_width),
            p.y.clamp(0.0, self.spec.canvas_height),
        )
    }

    fn positive(&mut self, id: String) -> Result<SampleRecord> {
        let t = self.rng.random_range(0..self.spec.templates.len());
        let template = &self.spec.templates[t];
        let normal = Normal::new(0.0, self.spec.jitter.max(0.0))
            .map_err(|e| Error::Config(e.to_string()))?;
        let jittered: Vec<Vec<Point>> = template
            .contours
            .iter()
            .map(|c| {
                c.iter()
                    .map(|p| {
                        if self.spec.jitter > 0.0 {
                            p.translate(normal.sample(&mut self.rng), normal.sample(&mut self.rng))
                        } else {
                            *p
                        }
                    })
                    .collect()
            })
            .collect();
        let all: Vec<Point> = jittered.iter().flatten().copied().collect();
        let b = crate::geometry::bounds_of(&all).expect("non-empty template");
        let tx_lo = -b.xmin;
        let tx_hi = (self.spec.canvas_width - b.xmax).max(tx_lo);
        let ty_lo = -b.ymin;
        let ty_hi = (self.spec.canvas_height - b.ymax).max(ty_lo);
        let tx = self.rng.random_range(tx_lo..=tx_hi);
        let ty = self.rng.random_range(ty_lo..=ty_hi);
        let mut contours = Vec::new();
        let mut next_id = 0u32;
        for c in &jittered {
            let keep = !self.rng.random_bool(self.spec.occlusion);
            let pts: Vec<Point> = c.iter().map(|p| self.clamp(p.translate(tx, ty))).collect();
            let mut dedup: Vec<Point> = Vec::with_capacity(pts.len());
            for p in pts {
                if dedup.last() != Some(&p) {
                    dedup.push(p);
                }
            }
            if keep && dedup.len() >= 2 {
                contours.push(Contour::new(next_id, dedup)?);
                next_id += 1;
            }
        }
        let (lo, hi) = self.spec.positive_clutter;
        let n_clutter = self.rng.random_range(lo..=hi);
        for _ in 0..n_clutter {
            self.clutter(&mut next_id, &mut contours);
        }
        let gt = BoundingBox::new(
            (b.xmin + tx).max(0.0),
            (b.ymin + ty).max(0.0),
            (b.xmax + tx).min(self.spec.canvas_width),
            (b.ymax + ty).min(self.spec.canvas_height),
        )?;
        Ok(SampleRecord {
            id,
            label: Label::Positive,
            contours: ContourSet::new(self.spec.canvas_width, self.spec.canvas_height, contours)?,
            groundtruth: vec![gt],
        })
    }

    fn negative(&mut self, id: String) -> Result<SampleRecord> {
        let (lo, hi) = self.spec.clutter;
        let n = self.rng.random_range(lo..=hi);
        let mut contours = Vec::new();
        let mut next_id = 0u32;
        for _ in 0..n {
            self.clutter(&mut next_id, &mut contours);
        }
        Ok(SampleRecord {
            id,
            label: Label::Negative,
            contours: ContourSet::new(self.spec.canvas_width, self.spec.canvas_height, contours)?,
            groundtruth: Vec::new(),
        })
    }
}

/// Positives then negatives, ids `<prefix>pos-NNN` / `<prefix>neg-NNN`.
/// Deterministic in `(spec, n_pos, n_neg)`.
pub fn synth_generate(spec: &SynthSpec, n_pos: usize, n_neg: usize) -> Result<Vec<SampleRecord>> {
    synth_with_prefix(spec, n_pos, n_neg, "", spec.seed)
}

fn synth_with_prefix(
    spec: &SynthSpec,
    n_pos: usize,
    n_neg: usize,
    prefix: &str,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    let mut g = Synth {
        spec,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut out = Vec::with_capacity(n_pos + n_neg);
    for k in 0..n_pos {
        out.push(g.positive(format!("{prefix}pos-{k:03}"))?);
    }
    for k in 0..n_neg {
        out.push(g.negative(format!("{prefix}neg-{k:03}"))?);
    }
    Ok(out)
}

/// Generates both splits into `dir` and writes `dir/manifest.txt`.
pub fn write_synth_dataset(spec: &SynthSpec, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut manifest = DatasetManifest::default();
    for (split, (n_pos, n_neg), salt) in [
        (Split::Train, spec.train, 0u64),
        (Split::Test, spec.test, 1u64),
    ] {
        let prefix = format!("{}-", split.as_str());
        let seed = spec.seed.wrapping_mul(2).wrapping_add(salt);
        for s in synth_with_prefix(spec, n_pos, n_neg, &prefix, seed)? {
            let file = PathBuf::from(format!("{}.aogc", s.id));
            save_sample(&dir.join(&file), &s)?;
            manifest.entries.push(ManifestEntry {
                id: s.id,
                split,
                label: s.label,
                path: file,
            });
        }
    }
    manifest.save(&dir.join("manifest.txt"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> SampleRecord {
        let c = Contour::new(3, vec![Point::new(0.1, 0.2), Point::new(99.5, 79.0 / 3.0)]).unwrap();
        SampleRecord {
            id: "s".into(),
            label: Label::Positive,
            contours: ContourSet::new(100.0, 80.0, vec![c]).unwrap(),
            groundtruth: vec![BoundingBox::new(1.0, 2.0, 30.5, 40.25).unwrap()],
        }
    }

    #[test]
    fn header_parses() {
        let s = parse_sample("AOGC 1 100 80 +1\n", "x").unwrap();
        assert_eq!((s.contours.width(), s.contours.height()), (100.0, 80.0));
        assert_eq!(s.label, Label::Positive);
        assert!(s.contours.is_empty());
    }

    #[test]
    fn text_round_trip_is_byte_identical() {
        let text = sample_to_string(&sample());
        let back = parse_sample(&text, "s").unwrap();
        assert_eq!(back, sample());
        assert_eq!(sample_to_string(&back), text);
    }

    #[test]
    fn sample_errors_carry_lines() {
        let e = parse_sample("AOGC 1 100 80 +1\nC 0 2\n1 1\n120 5\n", "x").unwrap_err();
        assert!(matches!(e, FormatError::OutOfBounds { line: 4, .. }));
        let e = parse_sample("AOGC 2 100 80 +1\n", "x").unwrap_err();
        assert!(matches!(e, FormatError::Version { line: 1, .. }));
        let e = parse_sample("AOGC 1 100 80 +1\nC 0 2\n1 1\nfoo 2\n", "x").unwrap_err();
        assert!(matches!(e, FormatError::Malformed { line: 4, .. }));
        let e = parse_sample("AOGC 1 100 80 0\n", "x").unwrap_err();
        assert!(matches!(e, FormatError::Malformed { line: 1, .. }));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc.aogc");
        save_sample(&p, &sample()).unwrap();
        let s = load_sample(&p).unwrap();
        assert_eq!(s.id, "abc");
        assert_eq!(s.contours, sample().contours);
    }

    #[test]
    fn model_round_trip_and_corruption() {
        let mut m = AndOrModel::new(ModelConfig::default()).unwrap();
        let w: Vec<f64> = (0..240).map(|k| (k as f64).sin() / 3.0).collect();
        m.create_leaf(2, &w).unwrap();
        let n = m.omega.dim();
        m.omega.0[n - 1] = 1.0 / 7.0;
        let bytes = model_to_bytes(&m);
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back.omega, m.omega);
        assert_eq!(back.live_flags(), m.live_flags());
        assert_eq!(back.config(), m.config());
        assert!(matches!(
            model_from_bytes(&bytes[..bytes.len() - 9]),
            Err(FormatError::Checksum)
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(model_from_bytes(&bad), Err(FormatError::Magic)));
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(model_from_bytes(&bad), Err(FormatError::Checksum)));
    }

    #[test]
    fn manifest_round_trip() {
        let m = DatasetManifest {
            entries: vec![
                ManifestEntry {
                    id: "a".into(),
                    split: Split::Train,
                    label: Label::Positive,
                    path: "a.aogc".into(),
                },
                ManifestEntry {
                    id: "b".into(),
                    split: Split::Test,
                    label: Label::Negative,
                    path: "b.aogc".into(),
                },
            ],
        };
        assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
        assert!(DatasetManifest::parse("AOGM 1\na train +1 x\na test -1 y\n").is_err());
    }

    #[test]
    fn noise_free_positives_are_translated_templates() {
        let spec = SynthSpec {
            jitter: 0.0,
            occlusion: 0.0,
            ..Default::default()
        };
        for s in synth_generate(&spec, 5, 0).unwrap() {
            let gt = s.groundtruth[0];
            let matches_some = spec.templates.iter().any(|t| {
                let pts: Vec<Point> = t.contours.iter().flatten().copied().collect();
                let b = crate::geometry::bounds_of(&pts).unwrap();
                let (dx, dy) = (gt.xmin - b.xmin, gt.ymin - b.ymin);
                t.contours.len() == s.contours.len()
                    && t.contours.iter().zip(s.contours.contours()).all(|(tc, c)| {
                        tc.iter()
                            .zip(c.points())
                            .all(|(p, q)| (p.x + dx - q.x).abs() < 1e-9 && (p.y + dy - q.y).abs() < 1e-9)
                    })
            });
            assert!(matches_some);
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SynthSpec::default();
        assert_eq!(
            synth_generate(&spec, 3, 3).unwrap(),
            synth_generate(&spec, 3, 3).unwrap()
        );
        let other = SynthSpec { seed: 8, ..SynthSpec::default() };
        assert_ne!(synth_generate(&spec, 3, 3).unwrap(), synth_generate(&other, 3, 3).unwrap());
    }

    #[test]
    fn full_occlusion_empties_positives() {
        let spec = SynthSpec {
            occlusion: 1.0,
            ..Default::default()
        };
        for s in synth_generate(&spec, 4, 0).unwrap() {
            assert!(s.contours.is_empty());
            assert_eq!(s.groundtruth.len(), 1);
        }
    }

    #[test]
    fn dataset_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            train: (2, 2),
            test: (1, 1),
            ..Default::default()
        };
        let m = write_synth_dataset(&spec, dir.path()).unwrap();
        let path = dir.path().join("manifest.txt");
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
        let train = m.load_split(&path, Split::Train).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(train[0].id, "train-pos-000");
    }

    proptest! {
        #[test]
        fn arbitrary_coordinates_round_trip(xs in prop::collection::vec((0.0f64..100.0, 0.0f64..80.0), 2..10)) {
            let mut pts: Vec<Point> = Vec::new();
            for (x, y) in xs {
                let p = Point::new(x, y);
                if pts.last() != Some(&p) {
                    pts.push(p);
                }
            }
            prop_assume!(pts.len() >= 2);
            let s = SampleRecord {
                id: "p".into(),
                label: Label::Negative,
                contours: ContourSet::new(100.0, 80.0, vec![Contour::new(0, pts).unwrap()]).unwrap(),
                groundtruth: vec![],
            };
            let text = sample_to_string(&s);
            let back = parse_sample(&text, "p").unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(sample_to_string(&back), text);
        }
    }
}
