//! The `aog` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    detections_to_string, evaluate, overlay_svg, parse_detections, top1_accuracy, ScoredBox, Truth,
};
use crate::inference::{detect, DetectParams};
use crate::io::{
    load_model, save_model, write_synth_dataset, DatasetManifest, SampleRecord, Split, SynthSpec,
};
use crate::model::{AndOrModel, ModelConfig};
use crate::train::{train, TrainParams};

/// Settings read from `--config`; every section is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainParams,
    pub detect: DetectParams,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Parser)]
#[command(name = "aog", version, about = "And-Or graph contour shape detector")]
pub struct Cli {
    /// Seed for the synthetic generator (overrides the spec file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON file with `model`, `train` and `detect` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth {
        /// SynthSpec JSON; defaults to the built-in two-template spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the train split of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON training summary.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run sliding-window detection.
    Detect {
        #[arg(long)]
        model: PathBuf,
        /// Samples of this manifest split are searched.
        #[arg(long, conflicts_with = "sample")]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// A single sample file instead of a manifest.
        #[arg(long)]
        sample: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Zero the collaborative edge weights before detecting.
        #[arg(long)]
        no_edges: bool,
    },
    /// Score detections against a manifest split.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long)]
        fppi_csv: Option<PathBuf>,
        #[arg(long)]
        pr_csv: Option<PathBuf>,
        #[arg(long)]
        pr_svg: Option<PathBuf>,
        /// Directory for one SVG overlay per image.
        #[arg(long)]
        overlay_dir: Option<PathBuf>,
        /// Also report the accuracy of each image's top detection.
        #[arg(long)]
        top1_accuracy: bool,
    },
    /// Print a model's structure.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

/// Detections of every sample, per image sorted by descending score, images
/// in input order.
pub fn detect_records(
    model: &AndOrModel,
    samples: &[SampleRecord],
    params: &DetectParams,
) -> Result<Vec<ScoredBox>> {
    let per_image = samples
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let dets = detect(model, &s.contours, params).map_err(|e| Error::Sample {
                index: k,
                source: Box::new(e),
            })?;
            Ok(dets
                .into_iter()
                .map(|d| ScoredBox {
                    image: s.id.clone(),
                    score: d.score,
                    bbox: d.bbox,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

pub fn truth_of(samples: &[SampleRecord]) -> Truth {
    samples
        .iter()
        .map(|s| (s.id.clone(), s.groundtruth.clone()))
        .collect()
}

/// Human-readable structure dump.
pub fn inspect_text(model: &AndOrModel) -> String {
    let cfg = model.config();
    let layout = model.layout();
    let norm = |r: std::ops::Range<usize>| {
        model.omega.0[r].iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let mut out = format!(
        "layout {}x{} or-nodes {} slots per or-node {} window {}x{}\n",
        cfg.rows, cfg.cols, cfg.or_nodes, cfg.max_leaves, cfg.window_width, cfg.window_height
    );
    out += &format!("live leaves {}\n", model.live_count());
    for i in 0..model.or_nodes() {
        let live: Vec<String> = model.live_slots(i).map(|j| j.to_string()).collect();
        out += &format!("or-node {i}: {} live [{}]\n", live.len(), live.join(" "));
    }
    let active_edges = model
        .edges()
        .iter()
        .filter(|&&(a, b)| model.is_live(a) && model.is_live(b))
        .count();
    out += &format!("edges {} ({} between live leaves)\n", model.edges().len(), active_edges);
    let leaf_end = layout.deformation_offset(0);
    out += &format!("|w| leaf {:.6}\n", norm(0..leaf_end));
    out += &format!("|w| deformation {:.6}\n", norm(leaf_end..layout.edge_offset()));
    out += &format!("|w| edge {:.6}\n", norm(layout.edge_range()));
    out += &format!("|w| root {:.6}\n", norm(layout.root_range()));
    out
}

fn load_split(manifest: &Path, split: Split) -> Result<Vec<SampleRecord>> {
    DatasetManifest::load(manifest)?.load_split(manifest, split)
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth { spec, out: dir } => {
            let mut spec = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => SynthSpec::default(),
            };
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let m = write_synth_dataset(&spec, &dir)?;
            writeln!(out, "wrote {} samples to {}", m.entries.len(), dir.display())?;
        }
        Command::Train {
            manifest,
            out: model_path,
            report,
        } => {
            let samples = load_split(&manifest, Split::Train)?;
            let (model, rep) = train(config.model, &samples, &config.train)?;
            for line in rep.log_lines() {
                writeln!(out, "{line}")?;
            }
            save_model(&model_path, &model)?;
            if let Some(p) = report {
                fs::write(p, serde_json::to_string_pretty(&rep)?)?;
            }
        }
        Command::Detect {
            model,
            manifest,
            split,
            sample,
            out: det_path,
            no_edges,
        } => {
            let mut model = load_model(&model)?;
            if no_edges {
                model = model.without_edges();
            }
            let samples = match (manifest, sample) {
                (Some(m), _) => load_split(&m, split.into())?,
                (None, Some(s)) => vec![crate::io::load_sample(&s)?],
                (None, None) => {
                    return Err(Error::Config("detect needs --manifest or --sample".into()))
                }
            };
            let dets = detect_records(&model, &samples, &config.detect)?;
            fs::write(&det_path, detections_to_string(&dets))?;
            writeln!(out, "{} detections on {} images", dets.len(), samples.len())?;
        }
        Command::Eval {
            detections,
            manifest,
            split,
            iou,
            fppi_csv,
            pr_csv,
            pr_svg,
            overlay_dir,
            top1_accuracy: top1,
        } => {
            let text = fs::read_to_string(&detections)?;
            let dets = parse_detections(&text).map_err(|e| Error::Format {
                path: detections.clone(),
                source: e,
            })?;
            let samples = load_split(&manifest, split.into())?;
            let truth = truth_of(&samples);
            if let Some(d) = dets.iter().find(|d| !truth.contains_key(&d.image)) {
                return Err(Error::Config(format!(
                    "detection for unknown image `{}`",
                    d.image
                )));
            }
            let curve = evaluate(&dets, &truth, iou);
            writeln!(out, "AP {:.4}", curve.ap)?;
            for f in [0.1, 0.5, 1.0] {
                writeln!(out, "recall@{f}fppi {:.4}", curve.recall_at_fppi(f))?;
            }
            if top1 {
                writeln!(out, "top1-accuracy {:.4}", top1_accuracy(&dets, &truth, iou))?;
            }
            if let Some(p) = fppi_csv {
                fs::write(p, curve.fppi_csv())?;
            }
            if let Some(p) = pr_csv {
                fs::write(p, curve.pr_csv())?;
            }
            if let Some(p) = pr_svg {
                fs::write(p, curve.pr_svg())?;
            }
            if let Some(dir) = overlay_dir {
                fs::create_dir_all(&dir)?;
                let mut by_image: BTreeMap<&str, Vec<ScoredBox>> = BTreeMap::new();
                for d in &dets {
                    by_image.entry(d.image.as_str()).or_default().push(d.clone());
                }
                for s in &samples {
                    let mine = by_image.get(s.id.as_str()).map_or(&[][..], |v| v.as_slice());
                    let svg = overlay_svg(&s.contours, &s.groundtruth, mine);
                    fs::write(dir.join(format!("{}.svg", s.id)), svg)?;
                }
            }
        }
        Command::Inspect { model } => {
            write!(out, "{}", inspect_text(&load_model(&model)?))?;
        }
    }
    Ok(())
}

/// Parses `args` and runs the command, writing results to `out` and
/// diagnostics to `err`. Returns the process exit status.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                1
            } else {
                let _ = write!(out, "{}", e.render());
                0
            };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            let _ = writeln!(err, "warning: {e}");
        }
    }
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let _ = writeln!(err, "  caused by: {s}");
                source = s.source();
            }
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = main_with(args.iter().copied(), &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn usage_errors_exit_1() {
        let (code, _, err) = run_args(&["aog", "--bogus"]);
        assert_eq!(code, 1);
        assert!(err.contains("Usage"));
        let (code, _, _) = run_args(&["aog"]);
        assert_eq!(code, 1);
    }

    #[test]
    fn help_exits_0() {
        let (code, out, _) = run_args(&["aog", "--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("inspect"));
    }

    #[test]
    fn missing_file_is_a_data_error() {
        let (code, _, err) = run_args(&["aog", "inspect", "--model", "/nonexistent/model.aogm"]);
        assert_eq!(code, 2);
        assert!(err.starts_with("error:"));
    }

    #[test]
    fn inspect_fresh_model() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.aogm");
        save_model(&p, &AndOrModel::new(ModelConfig::default()).unwrap()).unwrap();
        let (code, out, _) = run_args(&["aog", "inspect", "--model", p.to_str().unwrap()]);
        assert_eq!(code, 0);
        assert!(out.contains("live leaves 0"));
        assert!(out.contains("|w| root 0.000000"));
    }

    #[test]
    fn config_sections_are_optional() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"max_iterations": 3}}"#).unwrap();
        assert_eq!(c.train.max_iterations, 3);
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train.solver.d, 0.005);
    }
}
