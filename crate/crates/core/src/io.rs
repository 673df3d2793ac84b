//! File formats: skeleton TOML, binary pose datasets, keypoint JSON lines
//! and the CSV outputs of the command-line tool.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::ablation::AblationRow;
use crate::error::{Error, Result};
use crate::fitter::FitTrace;
use crate::kinematics::{PoseShape, SkeletonModel, SHAPE_DIM, SKELETON_FORMAT_VERSION};
use crate::metrics::EvalReport;
use crate::params::{Keypoints2D, ModelParams};
use crate::scalar::Real;
use crate::trainer::LogRow;

pub const DATASET_MAGIC: &[u8; 8] = b"BFPOSEDS";
pub const DATASET_VERSION: u32 = 1;
/// Version written into every CSV header line.
pub const CSV_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonFile {
    format_version: u32,
    name: String,
    seed: u64,
    parents: Vec<i64>,
    offsets: Vec<[f64; 3]>,
    /// One 3 x 10 block per joint.
    shape_basis: Vec<[[f64; SHAPE_DIM]; 3]>,
}

pub fn skeleton_to_toml(model: &SkeletonModel<f64>) -> Result<String> {
    let file = SkeletonFile {
        format_version: SKELETON_FORMAT_VERSION,
        name: model.name.clone(),
        seed: model.seed,
        parents: model.parents.clone(),
        offsets: model.template_offsets.clone(),
        shape_basis: model.shape_basis.clone(),
    };
    toml::to_string(&file).map_err(|e| Error::Format(e.to_string()))
}

pub fn skeleton_from_toml(text: &str) -> Result<SkeletonModel<f64>> {
    let file: SkeletonFile = toml::from_str(text).map_err(|e| Error::Config(format!("skeleton file: {e}")))?;
    if file.format_version != SKELETON_FORMAT_VERSION {
        return Err(Error::Config(format!("unsupported skeleton format_version {}", file.format_version)));
    }
    SkeletonModel::new(file.name, file.seed, file.parents, file.offsets, file.shape_basis)
}

/// Header of a binary pose dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub seed: u64,
    pub count: u64,
    pub skeleton: String,
    pub joints: u32,
}

pub fn write_dataset<W: Write>(mut w: W, skeleton: &str, joints: usize, seed: u64, poses: &[PoseShape<f64>]) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&(poses.len() as u64).to_le_bytes())?;
    w.write_all(&(skeleton.len() as u32).to_le_bytes())?;
    w.write_all(skeleton.as_bytes())?;
    w.write_all(&(joints as u32).to_le_bytes())?;
    w.write_all(&(SHAPE_DIM as u32).to_le_bytes())?;
    for p in poses {
        p.validate(joints)?;
        for v in p.theta.iter().flatten().chain(p.beta.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("dataset truncated".into()),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<(DatasetHeader, Vec<PoseShape<f64>>)> {
    if &read_array::<8, _>(&mut r)? != DATASET_MAGIC {
        return Err(Error::Format("not a pose dataset (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let seed = u64::from_le_bytes(read_array(&mut r)?);
    let count = u64::from_le_bytes(read_array(&mut r)?);
    let name_len = u32::from_le_bytes(read_array(&mut r)?) as usize;
    if name_len > 4096 {
        return Err(Error::Format("skeleton name too long".into()));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let skeleton = String::from_utf8(name).map_err(|_| Error::Format("skeleton name is not UTF-8".into()))?;
    let joints = u32::from_le_bytes(read_array(&mut r)?);
    let beta_dim = u32::from_le_bytes(read_array(&mut r)?);
    if beta_dim as usize != SHAPE_DIM || joints == 0 {
        return Err(Error::Format(format!("unsupported record layout ({joints} joints, {beta_dim} shape dims)")));
    }
    let mut poses = Vec::new();
    let mut next = || -> Result<f64> { Ok(f64::from_le_bytes(read_array(&mut r)?)) };
    for _ in 0..count {
        let mut theta = Vec::with_capacity(joints as usize - 1);
        for _ in 1..joints {
            theta.push([next()?, next()?, next()?]);
        }
        let mut beta = [0.0; SHAPE_DIM];
        for b in beta.iter_mut() {
            *b = next()?;
        }
        poses.push(PoseShape { theta, beta });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after {count} records", rest.len())));
    }
    Ok((DatasetHeader { version, seed, count, skeleton, joints }, poses))
}

/// One frame of 2D detections.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFrame {
    pub frame: u64,
    pub keypoints: Keypoints2D<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeypointRecord {
    frame: u64,
    keypoints: Vec<[f64; 3]>,
}

/// Parses JSON lines of `{"frame": id, "keypoints": [[u, v, visible], ...]}`.
/// Blank lines are ignored; errors carry 1-based line numbers.
pub fn read_keypoints<R: BufRead>(r: R, joints: usize) -> Result<Vec<KeypointFrame>> {
    let mut frames = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: KeypointRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        if rec.keypoints.len() != joints {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {joints} keypoints, found {}", rec.keypoints.len()),
            });
        }
        let mut points = Vec::with_capacity(joints);
        let mut visible = Vec::with_capacity(joints);
        for [u, v, vis] in rec.keypoints {
            if !(u.is_finite() && v.is_finite()) || !(vis == 0.0 || vis == 1.0) {
                return Err(Error::Parse { line: lineno, message: "keypoints must be finite with visibility 0 or 1".into() });
            }
            points.push([u, v]);
            visible.push(vis == 1.0);
        }
        let keypoints = Keypoints2D::with_visibility(points, visible).map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        frames.push(KeypointFrame { frame: rec.frame, keypoints });
    }
    Ok(frames)
}

pub fn write_keypoints<W: Write>(mut w: W, frames: &[KeypointFrame]) -> Result<()> {
    for f in frames {
        let rec = KeypointRecord {
            frame: f.frame,
            keypoints: f
                .keypoints
                .points
                .iter()
                .zip(&f.keypoints.visible)
                .map(|(p, v)| [p[0], p[1], if *v { 1.0 } else { 0.0 }])
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn header<W: Write>(w: &mut W, kind: &str, seed: u64) -> Result<()> {
    writeln!(w, "# bodyfit {kind} version={CSV_FORMAT_VERSION} seed={seed}")?;
    Ok(())
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().from_writer(w)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Outcome of fitting one frame.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameFit {
    Fitted { loss: f64, params: ModelParams<f64> },
    Skipped { reason: String },
}

/// Per-frame parameter table: `frame,status,loss,p0..p84`. Values use the
/// shortest representation that parses back to the same f64.
pub fn write_fit_params<W: Write>(mut w: W, seed: u64, dim: usize, rows: &[(u64, FrameFit)]) -> Result<()> {
    header(&mut w, "fit", seed)?;
    let mut out = csv_writer(w);
    let mut head = vec!["frame".to_string(), "status".into(), "loss".into()];
    head.extend((0..dim).map(|i| format!("p{i}")));
    out.write_record(&head).map_err(csv_err)?;
    for (frame, fit) in rows {
        let mut rec = vec![frame.to_string()];
        match fit {
            FrameFit::Fitted { loss, params } => {
                rec.push("ok".into());
                rec.push(loss.to_string());
                rec.extend(params.flatten().iter().map(|v| v.to_string()));
            }
            FrameFit::Skipped { reason } => {
                rec.push(format!("skipped: {reason}"));
                rec.push(String::new());
                rec.extend(std::iter::repeat_n(String::new(), dim));
            }
        }
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_fit_params<R: Read>(r: R, joints: usize) -> Result<Vec<(u64, FrameFit)>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |m: String| Error::Parse { line: i + 2, message: m };
        let frame: u64 = rec.get(0).unwrap_or("").parse().map_err(|e| bad(format!("frame: {e}")))?;
        let status = rec.get(1).unwrap_or("");
        if let Some(reason) = status.strip_prefix("skipped: ") {
            rows.push((frame, FrameFit::Skipped { reason: reason.to_string() }));
            continue;
        }
        let loss: f64 = rec.get(2).unwrap_or("").parse().map_err(|e| bad(format!("loss: {e}")))?;
        let flat = rec.iter().skip(3).map(|s| s.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|e| bad(e.to_string()))?;
        let params = ModelParams::unflatten(joints, &flat)?;
        rows.push((frame, FrameFit::Fitted { loss, params }));
    }
    Ok(rows)
}

/// Per-iteration trace rows: `frame,iteration,loss,delta_norm,wall_us`.
pub fn write_traces<W: Write, T: Real>(mut w: W, seed: u64, traces: &[(u64, FitTrace<T>)]) -> Result<()> {
    header(&mut w, "trace", seed)?;
    let mut out = csv_writer(w);
    out.write_record(["frame", "iteration", "loss", "delta_norm", "wall_us"]).map_err(csv_err)?;
    for (frame, trace) in traces {
        for (n, r) in trace.records.iter().enumerate() {
            out.write_record([
                frame.to_string(),
                n.to_string(),
                r.loss.to_f64_lossy().to_string(),
                r.delta_norm.to_f64_lossy().to_string(),
                r.wall_us.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Training log: `step,train_loss,heldout_pa_mpjpe,wall_ms`.
pub fn write_metrics<W: Write>(mut w: W, seed: u64, rows: &[LogRow]) -> Result<()> {
    header(&mut w, "train-metrics", seed)?;
    let mut out = csv_writer(w);
    out.write_record(["step", "train_loss", "heldout_pa_mpjpe", "wall_ms"]).map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.step.to_string(),
            r.train_loss.to_string(),
            r.heldout_pa_mpjpe.map(|v| v.to_string()).unwrap_or_default(),
            r.wall_ms.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Per-frame errors (`frame,mpjpe,pa_mpjpe`, mm-equivalent).
pub fn write_report<W: Write>(mut w: W, seed: u64, report: &EvalReport) -> Result<()> {
    header(&mut w, "eval", seed)?;
    let mut out = csv_writer(w);
    out.write_record(["frame", "mpjpe", "pa_mpjpe"]).map_err(csv_err)?;
    for (i, f) in report.frames.iter().enumerate() {
        out.write_record([i.to_string(), f.mpjpe.to_string(), f.pa_mpjpe.to_string()]).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Ablation table: `table,variant,unroll,input_mode,heldout_pa_mpjpe,heldout_mpjpe`.
pub fn write_ablation<W: Write>(mut w: W, seed: u64, rows: &[AblationRow]) -> Result<()> {
    header(&mut w, "ablation", seed)?;
    let mut out = csv_writer(w);
    out.write_record(["table", "variant", "unroll", "input_mode", "heldout_pa_mpjpe", "heldout_mpjpe"]).map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.table.to_string(),
            r.variant.clone(),
            r.unroll.to_string(),
            r.input_mode.name().to_string(),
            r.heldout_pa_mpjpe.to_string(),
            r.heldout_mpjpe.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn report_summary(report: &EvalReport) -> String {
    let curve = |c: &[f64]| c.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" ");
    format!(
        "frames: {}\nmean MPJPE: {:.2} mm-eq\nmean PA-MPJPE: {:.2} mm-eq\nmedian MPJPE: {:.2} mm-eq\nmedian PA-MPJPE: {:.2} mm-eq\nMPJPE per iteration: {}\nPA-MPJPE per iteration: {}\n",
        report.frames.len(),
        report.mean_mpjpe,
        report.mean_pa_mpjpe,
        report.median_mpjpe,
        report.median_pa_mpjpe,
        curve(&report.curve_mpjpe),
        curve(&report.curve_pa_mpjpe),
    )
}
