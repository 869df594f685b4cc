//! Detection evaluation: VOC-style matching, all-points average precision,
//! FPPI-recall curves, top-1 accuracy and SVG/CSV emission.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::FormatError;
use crate::geometry::{BoundingBox, ContourSet};

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if inter <= 0.0 || union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBox {
    pub image: String,
    pub score: f64,
    pub bbox: BoundingBox,
}

/// Groundtruth boxes per image id. Images without objects map to an empty
/// list and still count toward FPPI.
pub type Truth = BTreeMap<String, Vec<BoundingBox>>;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMatch {
    pub image: String,
    pub score: f64,
    pub true_positive: bool,
    /// Index of the matched groundtruth box within its image.
    pub groundtruth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Detections in ranked order.
    pub matches: Vec<DetectionMatch>,
    /// Groundtruth boxes left unmatched, per image.
    pub unmatched: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurve {
    /// `(recall, precision)` after each ranked detection.
    pub pr: Vec<(f64, f64)>,
    /// `(fppi, recall)` after each ranked detection.
    pub fppi: Vec<(f64, f64)>,
    pub ap: f64,
    pub n_groundtruth: usize,
    pub n_images: usize,
}

fn box_key(b: &BoundingBox) -> [f64; 4] {
    [b.xmin, b.ymin, b.xmax, b.ymax]
}

/// Descending score; ties by image id, then box coordinates.
pub fn rank(detections: &[ScoredBox]) -> Vec<&ScoredBox> {
    let mut ranked: Vec<&ScoredBox> = detections.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.image.cmp(&b.image))
            .then_with(|| {
                box_key(&a.bbox)
                    .partial_cmp(&box_key(&b.bbox))
                    .unwrap_or(Ordering::Equal)
            })
    });
    ranked
}

/// Greedy matching in ranked order: each detection claims the unmatched
/// groundtruth box of its image with the highest IoU, if that IoU reaches
/// `iou_thresh`.
pub fn match_detections(detections: &[ScoredBox], truth: &Truth, iou_thresh: f64) -> MatchResult {
    let mut used: BTreeMap<&str, Vec<bool>> = truth
        .iter()
        .map(|(k, v)| (k.as_str(), vec![false; v.len()]))
        .collect();
    let mut matches = Vec::with_capacity(detections.len());
    for d in rank(detections) {
        let mut hit = None;
        if let (Some(gts), Some(flags)) = (truth.get(&d.image), used.get_mut(d.image.as_str())) {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if flags[g] {
                    continue;
                }
                let o = iou(&d.bbox, gt);
                if best.map_or(true, |(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            if let Some((g, o)) = best {
                if o >= iou_thresh {
                    flags[g] = true;
                    hit = Some(g);
                }
            }
        }
        matches.push(DetectionMatch {
            image: d.image.clone(),
            score: d.score,
            true_positive: hit.is_some(),
            groundtruth: hit,
        });
    }
    let unmatched = used
        .into_iter()
        .map(|(k, f)| (k.to_string(), f.iter().filter(|&&u| !u).count()))
        .collect();
    MatchResult { matches, unmatched }
}

/// Area under the precision-recall curve with precision made non-increasing
/// from the right (all-points interpolation).
pub fn average_precision(pr: &[(f64, f64)]) -> f64 {
    let mut envelope: Vec<f64> = pr.iter().map(|&(_, p)| p).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&(r, _), &p) in pr.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

pub fn evaluate(detections: &[ScoredBox], truth: &Truth, iou_thresh: f64) -> EvalCurve {
    let result = match_detections(detections, truth, iou_thresh);
    let n_groundtruth: usize = truth.values().map(Vec::len).sum();
    let n_images = truth.len();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut pr = Vec::with_capacity(result.matches.len());
    let mut fppi = Vec::with_capacity(result.matches.len());
    for m in &result.matches {
        if m.true_positive {
            tp += 1;
        } else {
            fp += 1;
        }
        let recall = if n_groundtruth == 0 {
            0.0
        } else {
            tp as f64 / n_groundtruth as f64
        };
        pr.push((recall, tp as f64 / (tp + fp) as f64));
        fppi.push((fp as f64 / n_images.max(1) as f64, recall));
    }
    EvalCurve {
        ap: average_precision(&pr),
        pr,
        fppi,
        n_groundtruth,
        n_images,
    }
}

impl EvalCurve {
    /// Highest recall reached with at most `fppi` false positives per image.
    pub fn recall_at_fppi(&self, fppi: f64) -> f64 {
        self.fppi
            .iter()
            .filter(|(f, _)| *f <= fppi)
            .map(|&(_, r)| r)
            .fold(0.0, f64::max)
    }

    pub fn fppi_csv(&self) -> String {
        let mut s = String::from("fppi,recall\n");
        for (f, r) in &self.fppi {
            let _ = writeln!(s, "{f},{r}");
        }
        s
    }

    pub fn pr_csv(&self) -> String {
        let mut s = String::from("recall,precision\n");
        for (r, p) in &self.pr {
            let _ = writeln!(s, "{r},{p}");
        }
        s
    }

    /// Precision-recall curve as a standalone SVG plot.
    pub fn pr_svg(&self) -> String {
        let (w, h, m) = (320.0, 320.0, 40.0);
        let sx = |r: f64| m + r * (w - 2.0 * m);
        let sy = |p: f64| h - m - p * (h - 2.0 * m);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
             <rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
            w - 2.0 * m,
            h - 2.0 * m
        );
        let pts: Vec<String> = self
            .pr
            .iter()
            .map(|&(r, p)| format!("{:.2},{:.2}", sx(r), sy(p)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"blue\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{m}\" y=\"{}\" font-size=\"12\">AP {:.4}</text>",
            m - 10.0,
            self.ap
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\">recall</text>",
            w / 2.0 - 15.0,
            h - 10.0
        );
        s.push_str("</svg>\n");
        s
    }
}

/// Fraction of images with groundtruth whose single highest-scoring
/// detection matches one of their boxes.
pub fn top1_accuracy(detections: &[ScoredBox], truth: &Truth, iou_thresh: f64) -> f64 {
    let mut top: BTreeMap<&str, &ScoredBox> = BTreeMap::new();
    for d in rank(detections) {
        top.entry(d.image.as_str()).or_insert(d);
    }
    let with_gt: Vec<(&String, &Vec<BoundingBox>)> =
        truth.iter().filter(|(_, v)| !v.is_empty()).collect();
    if with_gt.is_empty() {
        return 0.0;
    }
    let correct = with_gt
        .iter()
        .filter(|(id, gts)| {
            top.get(id.as_str())
                .is_some_and(|d| gts.iter().any(|g| iou(&d.bbox, g) >= iou_thresh))
        })
        .count();
    correct as f64 / with_gt.len() as f64
}

/// Contours, groundtruth (green) and detections (red, labelled by score).
pub fn overlay_svg(x: &ContourSet, truth: &[BoundingBox], detections: &[ScoredBox]) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n",
        x.width(),
        x.height()
    );
    for c in x.contours() {
        let pts: Vec<String> = c
            .points()
            .iter()
            .map(|p| format!("{:.2},{:.2}", p.x, p.y))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"black\"/>",
            pts.join(" ")
        );
    }
    let rect = |s: &mut String, b: &BoundingBox, color: &str| {
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"{color}\"/>",
            b.xmin,
            b.ymin,
            b.width(),
            b.height()
        );
    };
    for b in truth {
        rect(&mut s, b, "green");
    }
    for d in detections {
        rect(&mut s, &d.bbox, "red");
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"8\" fill=\"red\">{:.3}</text>",
            d.bbox.xmin,
            d.bbox.ymin - 1.0,
            d.score
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One line per detection: `<image-id> <score> <xmin> <ymin> <xmax> <ymax>`.
pub fn detections_to_string(detections: &[ScoredBox]) -> String {
    let mut out = String::new();
    for d in detections {
        let b = &d.bbox;
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            d.image, d.score, b.xmin, b.ymin, b.xmax, b.ymax
        );
    }
    out
}

pub fn parse_detections(text: &str) -> Result<Vec<ScoredBox>, FormatError> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.is_empty() {
            continue;
        }
        if tok.len() != 6 {
            return Err(FormatError::malformed(k + 1, "expected 6 fields"));
        }
        let v = tok[1..]
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| !v.is_nan())
                    .ok_or_else(|| FormatError::malformed(k + 1, format!("bad number `{t}`")))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let bbox = BoundingBox::new(v[1], v[2], v[3], v[4])
            .map_err(|e| FormatError::malformed(k + 1, e.to_string()))?;
        out.push(ScoredBox {
            image: tok[0].to_string(),
            score: v[0],
            bbox,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    fn det(image: &str, score: f64, b: BoundingBox) -> ScoredBox {
        ScoredBox {
            image: image.into(),
            score,
            bbox: b,
        }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 0.0, 15.0, 10.0)), 50.0 / 150.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert_eq!(iou(&bx(1.0, 1.0, 1.0, 1.0), &bx(1.0, 1.0, 1.0, 1.0)), 0.0);
    }

    fn hand_example() -> (Vec<ScoredBox>, Truth) {
        let g1 = bx(0.0, 0.0, 10.0, 10.0);
        let g2 = bx(50.0, 50.0, 60.0, 60.0);
        let truth: Truth = [("a".to_string(), vec![g1]), ("b".to_string(), vec![g2])]
            .into_iter()
            .collect();
        let dets = vec![
            det("a", 0.9, g1),
            det("a", 0.8, bx(30.0, 30.0, 40.0, 40.0)),
            det("b", 0.7, g2),
        ];
        (dets, truth)
    }

    #[test]
    fn hand_ap() {
        let (dets, truth) = hand_example();
        let curve = evaluate(&dets, &truth, 0.5);
        assert_abs_diff_eq!(curve.ap, 0.5 + 0.5 * (2.0 / 3.0), epsilon = 1e-15);
        assert_eq!(format!("{:.4}", curve.ap), "0.8333");
        assert_eq!(curve.fppi, vec![(0.0, 0.5), (0.5, 0.5), (0.5, 1.0)]);
        assert_eq!(curve.recall_at_fppi(0.1), 0.5);
    }

    #[test]
    fn empty_and_perfect() {
        let (dets, truth) = hand_example();
        let none = evaluate(&[], &truth, 0.5);
        assert_eq!(none.ap, 0.0);
        assert_eq!(none.recall_at_fppi(1.0), 0.0);
        let perfect: Vec<ScoredBox> = vec![dets[0].clone(), dets[2].clone()];
        assert_eq!(evaluate(&perfect, &truth, 0.5).ap, 1.0);
        assert_eq!(top1_accuracy(&dets, &truth, 0.5), 1.0);
    }

    #[test]
    fn groundtruth_matched_once() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let truth: Truth = [("a".to_string(), vec![g])].into_iter().collect();
        let r = match_detections(&[det("a", 0.9, g), det("a", 0.8, g)], &truth, 0.5);
        assert!(r.matches[0].true_positive);
        assert!(!r.matches[1].true_positive);
        assert_eq!(r.unmatched["a"], 0);
    }

    #[test]
    fn csv_headers() {
        let (dets, truth) = hand_example();
        let c = evaluate(&dets, &truth, 0.5);
        assert!(c.fppi_csv().starts_with("fppi,recall\n"));
        assert!(c.pr_csv().starts_with("recall,precision\n"));
        assert!(c.pr_svg().contains("AP 0.8333"));
    }

    #[test]
    fn detections_round_trip() {
        let dets = vec![
            det("a", 0.1 + 0.2, bx(0.5, 1.0 / 3.0, 10.25, 20.0)),
            det("b", -1e-300, bx(0.0, 0.0, 1.0, 1.0)),
        ];
        let text = detections_to_string(&dets);
        assert_eq!(parse_detections(&text).unwrap(), dets);
        assert!(parse_detections("a 1 0 0 1\n").is_err());
        assert!(parse_detections("a NaN 0 0 1 1\n").is_err());
    }

    /// AP by enumerating every prefix: sum over each TP of the best
    /// precision achieved at or beyond its rank, divided by the groundtruth
    /// count.
    fn prefix_ap(flags: &[bool], n_gt: usize) -> f64 {
        let prec: Vec<f64> = (1..=flags.len())
            .map(|k| flags[..k].iter().filter(|&&f| f).count() as f64 / k as f64)
            .collect();
        let mut ap = 0.0;
        for k in 0..flags.len() {
            if flags[k] {
                ap += prec[k..].iter().cloned().fold(0.0, f64::max) / n_gt as f64;
            }
        }
        ap
    }

    proptest! {
        #[test]
        fn ap_matches_prefix_oracle(flags in prop::collection::vec(any::<bool>(), 0..20), extra in 0usize..3) {
            let n_tp = flags.iter().filter(|&&f| f).count();
            let n_gt = n_tp + extra;
            prop_assume!(n_gt > 0);
            // One image per groundtruth; TPs hit their own box exactly, FPs miss.
            let gts: Vec<BoundingBox> = (0..n_gt).map(|g| bx(g as f64 * 100.0, 0.0, g as f64 * 100.0 + 10.0, 10.0)).collect();
            let mut truth: Truth = gts.iter().enumerate().map(|(g, b)| (format!("{g:03}"), vec![*b])).collect();
            truth.insert("neg".into(), vec![]);
            let mut next = 0;
            let dets: Vec<ScoredBox> = flags.iter().enumerate().map(|(k, &tp)| {
                let score = 1.0 - k as f64 * 0.01;
                if tp {
                    next += 1;
                    det(&format!("{:03}", next - 1), score, gts[next - 1])
                } else {
                    det("neg", score, bx(0.0, 0.0, 1.0, 1.0))
                }
            }).collect();
            let curve = evaluate(&dets, &truth, 0.5);
            prop_assert!((curve.ap - prefix_ap(&flags, n_gt)).abs() < 1e-12);
            for (k, &(f, r)) in curve.fppi.iter().enumerate() {
                let fp = flags[..=k].iter().filter(|&&t| !t).count();
                let tp = k + 1 - fp;
                prop_assert_eq!(f, fp as f64 / truth.len() as f64);
                prop_assert_eq!(r, tp as f64 / n_gt as f64);
            }
        }

        #[test]
        fn evaluate_is_permutation_invariant(seed in 0u64..1000) {
            let (mut dets, truth) = hand_example();
            let a = evaluate(&dets, &truth, 0.5);
            let k = (seed % 3) as usize;
            dets.rotate_left(k);
            dets.swap(0, (seed as usize / 3) % 3);
            prop_assert_eq!(evaluate(&dets, &truth, 0.5), a);
        }
    }
}
