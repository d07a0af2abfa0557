//! End-to-end steps shared by the command-line tool and the tests:
//! dataset generation, per-method training with artifact files, and the
//! benchmark grid evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{RunConfig, Split};
use crate::detector::{detect, read_checkpoint, write_checkpoint, CollabMode, Detection, GridGeometry, ModelParams};
use crate::doublem::{
    apply_method, double_m_train, pretrain, read_uqstats, write_uqstats, DoubleMOutcome, UqMethod, UqStats,
};
use crate::error::{Error, Result};
use crate::eval::{average_precision, nll_score, MetricReport, ReportRow};
use crate::scenegen::{generate_dataset, read_dataset, write_dataset, Dataset};

pub fn dataset_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{split}.dmuqds"))
}

fn artifact(dir: &Path, method: UqMethod, mode: CollabMode, ext: &str) -> PathBuf {
    dir.join(format!("{method}-{mode}.{ext}"))
}

pub fn checkpoint_path(dir: &Path, method: UqMethod, mode: CollabMode) -> PathBuf {
    artifact(dir, method, mode, "ckpt")
}

pub fn uqstats_path(dir: &Path, method: UqMethod, mode: CollabMode) -> PathBuf {
    artifact(dir, method, mode, "uqstats")
}

pub fn trace_path(dir: &Path, method: UqMethod, mode: CollabMode) -> PathBuf {
    artifact(dir, method, mode, "trace.csv")
}

pub fn residuals_path(dir: &Path, method: UqMethod, mode: CollabMode) -> PathBuf {
    artifact(dir, method, mode, "residuals.tsv")
}

/// Generates all three splits.
pub fn generate_splits(cfg: &RunConfig) -> Result<Vec<(Split, Dataset)>> {
    Split::ALL.into_iter().map(|s| Ok((s, generate_dataset(&cfg.scene_config(s))?))).collect()
}

/// Generates and writes every split into `dir`, returning frame counts.
pub fn write_splits(cfg: &RunConfig, dir: &Path) -> Result<Vec<(Split, usize)>> {
    fs::create_dir_all(dir)?;
    generate_splits(cfg)?
        .into_iter()
        .map(|(s, d)| {
            write_dataset(dataset_path(dir, s), &d)?;
            Ok((s, d.len()))
        })
        .collect()
}

pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let path = dataset_path(dir, split);
    if !path.exists() {
        return Err(Error::Usage(format!("missing dataset {}; run gen first", path.display())));
    }
    read_dataset(path)
}

fn trace_csv(rows: &[(&str, &[f64])]) -> String {
    let mut s = String::from("phase,epoch,loss\n");
    for (phase, losses) in rows {
        for (e, l) in losses.iter().enumerate() {
            writeln!(s, "{phase},{e},{l:?}").expect("write to string");
        }
    }
    s
}

/// Files written for one trained (method, mode) cell.
#[derive(Debug, Clone)]
pub struct TrainedCell {
    pub method: UqMethod,
    pub mode: CollabMode,
    pub checkpoint: PathBuf,
    pub uqstats: Option<PathBuf>,
}

fn save_bootstrap(dir: &Path, method: UqMethod, mode: CollabMode, out: &DoubleMOutcome) -> Result<TrainedCell> {
    let ckpt = checkpoint_path(dir, method, mode);
    write_checkpoint(&ckpt, &out.params)?;
    let stats = uqstats_path(dir, method, mode);
    write_uqstats(&stats, &out.stats)?;
    fs::write(
        trace_path(dir, method, mode),
        trace_csv(&[("pretrain", &out.pretrain_trace), ("refine", &out.refine_trace)]),
    )?;
    fs::write(residuals_path(dir, method, mode), out.residuals.to_tsv())?;
    Ok(TrainedCell { method, mode, checkpoint: ckpt, uqstats: Some(stats) })
}

fn save_single(
    dir: &Path,
    method: UqMethod,
    mode: CollabMode,
    params: &ModelParams,
    trace: &[f64],
) -> Result<TrainedCell> {
    let ckpt = checkpoint_path(dir, method, mode);
    write_checkpoint(&ckpt, params)?;
    fs::write(trace_path(dir, method, mode), trace_csv(&[("pretrain", trace)]))?;
    Ok(TrainedCell { method, mode, checkpoint: ckpt, uqstats: None })
}

/// Trains `methods` for one collaboration mode and writes their artifacts.
///
/// The single-model methods reuse the pretrained model of the bootstrap
/// method with the same head when both are requested; pretraining is
/// deterministic, so the result is identical to training them alone.
pub fn train_methods(
    cfg: &RunConfig,
    methods: &[UqMethod],
    mode: CollabMode,
    train_set: &Dataset,
    val_set: &Dataset,
    out_dir: &Path,
) -> Result<Vec<TrainedCell>> {
    fs::create_dir_all(out_dir)?;
    let opts = cfg.train_options(mode);
    let inf = cfg.infer_options();
    let variant = cfg.detector.variant;
    let mut cells = Vec::new();
    for (boot, single) in [(UqMethod::DoubleM, UqMethod::Dm), (UqMethod::Mbb, UqMethod::None)] {
        let want_boot = methods.contains(&boot);
        let want_single = methods.contains(&single);
        if want_boot {
            log::info!("training {boot} ({mode})");
            let out = double_m_train(train_set, val_set, &cfg.doublem, boot.head(variant), &opts, &inf, cfg.seed)?;
            cells.push(save_bootstrap(out_dir, boot, mode, &out)?);
            if want_single {
                cells.push(save_single(out_dir, single, mode, &out.theta0, &out.pretrain_trace)?);
            }
        } else if want_single {
            log::info!("training {single} ({mode})");
            let (p, trace) = pretrain(train_set, single.head(variant), &opts, cfg.seed)?;
            cells.push(save_single(out_dir, single, mode, &p, &trace)?);
        }
    }
    Ok(cells)
}

/// Loads a cell's model and statistics and runs it over a split.
pub fn infer_split(
    cfg: &RunConfig,
    artifacts: &Path,
    method: UqMethod,
    mode: CollabMode,
    data: &Dataset,
) -> Result<Vec<Vec<Detection>>> {
    let ckpt = checkpoint_path(artifacts, method, mode);
    if !ckpt.exists() {
        return Err(Error::Usage(format!("missing checkpoint {}", ckpt.display())));
    }
    let params = read_checkpoint(&ckpt)?;
    let stats: Option<UqStats> = if method.uses_stats() {
        let p = uqstats_path(artifacts, method, mode);
        if !p.exists() {
            return Err(Error::Usage(format!("missing statistics {}", p.display())));
        }
        Some(read_uqstats(p)?)
    } else {
        None
    };
    if let Some(s) = &stats {
        if s.head != params.head() {
            return Err(Error::Usage(format!("{method}-{mode}: statistics do not match the checkpoint head")));
        }
    }
    let geom = GridGeometry::new(&data.config)?;
    let inf = cfg.infer_options();
    data.frames
        .iter()
        .map(|f| {
            let d = detect(&params, &f.grids, mode, inf.ego, &geom, inf.score_threshold, inf.nms_iou)?;
            apply_method(d, method, stats.as_ref())
        })
        .collect()
}

/// Metrics of one grid cell from its detections.
pub fn score_cell(
    mode: CollabMode,
    method: UqMethod,
    dets: &[Vec<Detection>],
    data: &Dataset,
    thresholds: (f64, f64),
) -> Result<ReportRow> {
    let gts: Vec<_> = data.frames.iter().map(|f| f.boxes.clone()).collect();
    let nll = |t: f64| -> Result<Option<f64>> {
        if method == UqMethod::None {
            return Ok(None);
        }
        match nll_score(dets, &gts, t) {
            Ok(s) => Ok(Some(s.nll)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    Ok(ReportRow {
        mode: mode.to_string(),
        uq_method: method.to_string(),
        ap50: Some(average_precision(dets, &gts, thresholds.0)?),
        ap70: Some(average_precision(dets, &gts, thresholds.1)?),
        nll50: nll(thresholds.0)?,
        nll70: nll(thresholds.1)?,
        n_det: Some(dets.iter().map(Vec::len).sum::<usize>() as u64),
        n_gt: Some(gts.iter().map(Vec::len).sum::<usize>() as u64),
        seconds: None,
    })
}

/// Evaluates every configured (mode, method) cell on `data`. Cells without
/// artifacts become explicit gaps.
pub fn evaluate(cfg: &RunConfig, artifacts: &Path, data: &Dataset) -> Result<MetricReport> {
    let th = &cfg.eval.iou_thresholds;
    let thresholds = (th[0], *th.get(1).unwrap_or(&th[0]));
    let mut report = MetricReport {
        notes: vec![
            "AP: all-point interpolated precision envelope over the whole split".into(),
            format!(
                "score threshold {} (detection and NLL), NMS IoU {}, IoU thresholds {} / {}",
                cfg.eval.score_threshold, cfg.eval.nms_iou, thresholds.0, thresholds.1
            ),
            "NLL: mean over matched corners; '-' where undefined".into(),
        ],
        rows: vec![],
    };
    for &mode in &cfg.eval.modes {
        for &method in &cfg.eval.methods {
            let start = Instant::now();
            let dets = match infer_split(cfg, artifacts, method, mode, data) {
                Ok(d) => d,
                Err(Error::Usage(msg)) if msg.starts_with("missing") => {
                    log::warn!("{method}-{mode}: {msg}");
                    report.rows.push(ReportRow::missing(mode.as_str(), method.as_str()));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut row = score_cell(mode, method, &dets, data, thresholds)?;
            if cfg.eval.timing {
                row.seconds = Some(start.elapsed().as_secs_f64());
            }
            report.rows.push(row);
        }
    }
    Ok(report)
}

/// Writes the table to `path` and the records next to it with a `.jsonl` extension.
pub fn write_report(path: &Path, report: &MetricReport) -> Result<PathBuf> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, report.to_text())?;
    let jsonl = path.with_extension("jsonl");
    fs::write(&jsonl, report.to_jsonl())?;
    Ok(jsonl)
}

/// SVG of frame `index` of `data` with the cell's detections.
pub fn render_frame(
    cfg: &RunConfig,
    artifacts: &Path,
    method: UqMethod,
    mode: CollabMode,
    data: &Dataset,
    index: usize,
) -> Result<String> {
    let frame = data
        .frames
        .get(index)
        .ok_or_else(|| Error::Usage(format!("frame {index} out of range ({} frames)", data.frames.len())))?;
    let one = Dataset { config: data.config.clone(), frames: vec![frame.clone()] };
    let dets = infer_split(cfg, artifacts, method, mode, &one)?;
    crate::viz::render_svg(frame, &dets[0], &data.config)
}
