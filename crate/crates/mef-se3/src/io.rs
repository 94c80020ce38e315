//! Text formats: observation files, KITTI-layout pose files, CSV run
//! reports and the flat `key = value` run configuration.
//!
//! All numbers are serialized with Rust's shortest round-trip decimal
//! formatting, so `parse(write(x)) = x` bit-exactly. File writes go through
//! a temp-then-rename helper so readers never see partial output.
//!
//! Observation format, one block per frame:
//!
//! ```text
//! frame <index> <n>
//! x1 x2 d y1 y2      (n lines; y3 = 1 implied)
//! ```
//!
//! Pose format: one line per frame, 12 space-separated reals, row-major
//! 3×4 `[R|v]`, poses composed relative to frame 0 (implicit identity).

use crate::camera::{Observation, ScenePoint};
use crate::filter::{FilterConfig, ObservationBatch};
use crate::liegroup::PoseSE3;
use nalgebra::Matrix4;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("pose files differ in length: {gt} ground-truth vs {est} estimated lines")]
    LengthMismatch { gt: usize, est: usize },
}

#[derive(Debug, Error)]
#[error("config line {line}: {msg}")]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

/// Writes through a sibling temp file and renames over the target.
pub fn write_atomic<F>(path: &Path, write_fn: F) -> io::Result<()>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp = path.to_path_buf();
    tmp.set_file_name(format!(
        "{}.{}.tmp",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut out = io::BufWriter::new(fs::File::create(&tmp)?);
        write_fn(&mut out)?;
        out.flush()?;
    }
    fs::rename(&tmp, path)
}

fn parse_f64(tok: &str, line: usize, what: &str) -> Result<f64, FormatError> {
    tok.parse::<f64>().map_err(|_| FormatError::Parse {
        line,
        msg: format!("invalid {what}: `{tok}`"),
    })
}

pub fn write_observations<W: Write + ?Sized>(w: &mut W, batches: &[ObservationBatch]) -> io::Result<()> {
    for batch in batches {
        writeln!(w, "frame {} {}", batch.frame, batch.len())?;
        for (g, obs) in &batch.items {
            let y = obs.vector();
            writeln!(w, "{} {} {} {} {}", g.x1(), g.x2(), g.depth(), y[0], y[1])?;
        }
    }
    Ok(())
}

pub fn read_observations<R: BufRead>(r: R) -> Result<Vec<ObservationBatch>, FormatError> {
    let mut batches = Vec::new();
    let mut lines = r.lines().enumerate();
    while let Some((idx, line)) = lines.next() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks.len() != 3 || toks[0] != "frame" {
            return Err(FormatError::Parse {
                line: line_no,
                msg: format!("expected `frame <index> <n>`, got `{trimmed}`"),
            });
        }
        let frame: u32 = toks[1].parse().map_err(|_| FormatError::Parse {
            line: line_no,
            msg: format!("invalid frame index `{}`", toks[1]),
        })?;
        let n: usize = toks[2].parse().map_err(|_| FormatError::Parse {
            line: line_no,
            msg: format!("invalid observation count `{}`", toks[2]),
        })?;
        if n == 0 {
            return Err(FormatError::Parse {
                line: line_no,
                msg: format!("frame {frame} has an empty observation block"),
            });
        }
        let mut items = Vec::with_capacity(n);
        for _ in 0..n {
            let (idx, line) = lines.next().ok_or(FormatError::Parse {
                line: line_no,
                msg: format!("frame {frame}: file ends inside the observation block"),
            })?;
            let data_line_no = idx + 1;
            let line = line?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 5 {
                return Err(FormatError::Parse {
                    line: data_line_no,
                    msg: format!("expected 5 numbers `x1 x2 d y1 y2`, got {}", toks.len()),
                });
            }
            let x1 = parse_f64(toks[0], data_line_no, "x1")?;
            let x2 = parse_f64(toks[1], data_line_no, "x2")?;
            let d = parse_f64(toks[2], data_line_no, "depth")?;
            let y1 = parse_f64(toks[3], data_line_no, "y1")?;
            let y2 = parse_f64(toks[4], data_line_no, "y2")?;
            let g = ScenePoint::new(x1, x2, d).map_err(|e| FormatError::Parse {
                line: data_line_no,
                msg: e.to_string(),
            })?;
            items.push((g, Observation::new(y1, y2)));
        }
        batches.push(ObservationBatch::new(frame, items));
    }
    Ok(batches)
}

pub fn write_poses<W: Write + ?Sized>(w: &mut W, poses: &[PoseSE3]) -> io::Result<()> {
    for pose in poses {
        let m = pose.matrix();
        let mut first = true;
        for i in 0..3 {
            for j in 0..4 {
                if first {
                    write!(w, "{}", m[(i, j)])?;
                    first = false;
                } else {
                    write!(w, " {}", m[(i, j)])?;
                }
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_poses<R: BufRead>(r: R) -> Result<Vec<PoseSE3>, FormatError> {
    let mut poses = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks.len() != 12 {
            return Err(FormatError::Parse {
                line: line_no,
                msg: format!("expected 12 numbers per pose line, got {}", toks.len()),
            });
        }
        let mut m = Matrix4::identity();
        for i in 0..3 {
            for j in 0..4 {
                m[(i, j)] = parse_f64(toks[i * 4 + j], line_no, "pose entry")?;
            }
        }
        let pose = PoseSE3::from_matrix(m).map_err(|e| FormatError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        poses.push(pose);
    }
    Ok(poses)
}

/// Cumulative poses relative to frame 0 from per-frame increments.
pub fn compose_increments(increments: &[PoseSE3]) -> Vec<PoseSE3> {
    let mut out = Vec::with_capacity(increments.len());
    let mut acc = PoseSE3::identity();
    for inc in increments {
        acc = &acc * inc;
        out.push(acc);
    }
    out
}

/// Per-frame increments from cumulative poses (frame 0 is the implicit
/// identity): `inc_i = pose_{i−1}⁻¹ · pose_i`.
pub fn increments_from_poses(poses: &[PoseSE3]) -> Vec<PoseSE3> {
    let mut out = Vec::with_capacity(poses.len());
    let mut prev = PoseSE3::identity();
    for pose in poses {
        out.push(&prev.inverse() * pose);
        prev = *pose;
    }
    out
}

/// One evaluated frame of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame: u32,
    pub rot_err_deg: Option<f64>,
    pub trans_err_m: Option<f64>,
    pub mean_residual: f64,
    pub n_used: usize,
}

/// Column-wise means and maxima over the records.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub mean_rot_err_deg: Option<f64>,
    pub mean_trans_err_m: Option<f64>,
    pub mean_residual: f64,
    pub mean_n_used: f64,
    pub max_rot_err_deg: Option<f64>,
    pub max_trans_err_m: Option<f64>,
}

/// Per-frame records of a filter run plus derived summary statistics.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub records: Vec<FrameRecord>,
}

impl RunReport {
    pub fn summary(&self) -> ReportSummary {
        let n = self.records.len().max(1) as f64;
        let rots: Vec<f64> = self.records.iter().filter_map(|r| r.rot_err_deg).collect();
        let trans: Vec<f64> = self.records.iter().filter_map(|r| r.trans_err_m).collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        let max = |v: &[f64]| v.iter().copied().reduce(f64::max);
        ReportSummary {
            mean_rot_err_deg: mean(&rots),
            mean_trans_err_m: mean(&trans),
            mean_residual: self.records.iter().map(|r| r.mean_residual).sum::<f64>() / n,
            mean_n_used: self.records.iter().map(|r| r.n_used as f64).sum::<f64>() / n,
            max_rot_err_deg: max(&rots),
            max_trans_err_m: max(&trans),
        }
    }

    pub fn write_csv<W: Write + ?Sized>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "frame,rot_err_deg,trans_err_m,mean_residual,n_used_points")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.frame,
                opt(r.rot_err_deg),
                opt(r.trans_err_m),
                r.mean_residual,
                r.n_used
            )?;
        }
        let s = self.summary();
        writeln!(
            w,
            "mean,{},{},{},{}",
            opt(s.mean_rot_err_deg),
            opt(s.mean_trans_err_m),
            s.mean_residual,
            s.mean_n_used
        )?;
        writeln!(
            w,
            "max,{},{},,",
            opt(s.max_rot_err_deg),
            opt(s.max_trans_err_m)
        )?;
        Ok(())
    }

    /// Parses a report written by [`write_csv`](Self::write_csv); returns the
    /// records and the summary rows as written (not recomputed).
    pub fn read_csv<R: BufRead>(r: R) -> Result<(RunReport, ReportSummary), FormatError> {
        let mut records = Vec::new();
        let mut mean_row: Option<Vec<Option<f64>>> = None;
        let mut max_row: Option<Vec<Option<f64>>> = None;
        for (idx, line) in r.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line_no == 1 {
                continue; // header
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(FormatError::Parse {
                    line: line_no,
                    msg: format!("expected 5 csv fields, got {}", fields.len()),
                });
            }
            let parse_opt = |tok: &str, what: &str| -> Result<Option<f64>, FormatError> {
                if tok.is_empty() {
                    Ok(None)
                } else {
                    parse_f64(tok, line_no, what).map(Some)
                }
            };
            match fields[0] {
                "mean" => {
                    mean_row = Some(vec![
                        parse_opt(fields[1], "mean rot")?,
                        parse_opt(fields[2], "mean trans")?,
                        parse_opt(fields[3], "mean residual")?,
                        parse_opt(fields[4], "mean n_used")?,
                    ]);
                }
                "max" => {
                    max_row = Some(vec![
                        parse_opt(fields[1], "max rot")?,
                        parse_opt(fields[2], "max trans")?,
                    ]);
                }
                tok => {
                    let frame: u32 = tok.parse().map_err(|_| FormatError::Parse {
                        line: line_no,
                        msg: format!("invalid frame index `{tok}`"),
                    })?;
                    records.push(FrameRecord {
                        frame,
                        rot_err_deg: parse_opt(fields[1], "rot error")?,
                        trans_err_m: parse_opt(fields[2], "trans error")?,
                        mean_residual: parse_f64(fields[3], line_no, "mean residual")?,
                        n_used: fields[4].parse().map_err(|_| FormatError::Parse {
                            line: line_no,
                            msg: format!("invalid point count `{}`", fields[4]),
                        })?,
                    });
                }
            }
        }
        let mean_row = mean_row.ok_or(FormatError::Parse {
            line: 0,
            msg: "missing mean summary row".to_string(),
        })?;
        let max_row = max_row.ok_or(FormatError::Parse {
            line: 0,
            msg: "missing max summary row".to_string(),
        })?;
        let summary = ReportSummary {
            mean_rot_err_deg: mean_row[0],
            mean_trans_err_m: mean_row[1],
            mean_residual: mean_row[2].unwrap_or(f64::NAN),
            mean_n_used: mean_row[3].unwrap_or(f64::NAN),
            max_rot_err_deg: max_row[0],
            max_trans_err_m: max_row[1],
        };
        Ok((RunReport { records }, summary))
    }
}

/// Writes per-frame increment errors plus their means:
/// `frame,rot_err_deg,trans_err_m` rows followed by a `mean` row.
pub fn write_metrics<W: Write + ?Sized>(w: &mut W, rows: &[(u32, f64, f64)]) -> io::Result<()> {
    writeln!(w, "frame,rot_err_deg,trans_err_m")?;
    for (frame, rot, trans) in rows {
        writeln!(w, "{frame},{rot},{trans}")?;
    }
    let n = rows.len().max(1) as f64;
    let mean_rot = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let mean_trans = rows.iter().map(|r| r.2).sum::<f64>() / n;
    writeln!(w, "mean,{mean_rot},{mean_trans}")?;
    Ok(())
}

/// Run parameters as read from flags and the flat config file.
///
/// `h` and `substeps` are optional so either can be derived from the other;
/// when both are given their product must span one frame.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub alpha: f64,
    pub s1: f64,
    pub s2: f64,
    pub q: f64,
    pub p0: f64,
    pub h: Option<f64>,
    pub substeps: Option<u32>,
    pub outlier_quantile: f64,
    pub symmetrize_p: bool,
    pub seed: u64,
    pub sigma: f64,
    pub frames: u32,
    pub points: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub discontinuity_frames: Vec<u32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            alpha: 0.0,
            s1: 1e-3,
            s2: 1e-6,
            q: 0.1,
            p0: 1.0,
            h: None,
            substeps: None,
            outlier_quantile: 0.8,
            symmetrize_p: false,
            seed: 42,
            sigma: 0.0,
            frames: 50,
            points: 50,
            depth_min: 2.0,
            depth_max: 50.0,
            discontinuity_frames: vec![21, 31],
        }
    }
}

impl RunConfig {
    /// Applies `key = value` lines on top of the current values. Unknown
    /// keys, missing values and unparsable values are errors naming the key.
    pub fn apply_file(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError {
                line: line_no,
                msg: format!("missing `= value` for key `{line}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(ConfigError {
                    line: line_no,
                    msg: "missing key name before `=`".to_string(),
                });
            }
            if value.is_empty() && key != "discontinuity_frames" {
                return Err(ConfigError {
                    line: line_no,
                    msg: format!("missing value for key `{key}`"),
                });
            }
            self.apply_pair(key, value).map_err(|msg| ConfigError {
                line: line_no,
                msg,
            })?;
        }
        Ok(())
    }

    fn apply_pair(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse::<T>()
                .map_err(|_| format!("invalid value for key `{key}`: `{value}`"))
        }
        match key {
            "alpha" => self.alpha = num(key, value)?,
            "s1" => self.s1 = num(key, value)?,
            "s2" => self.s2 = num(key, value)?,
            "q" => self.q = num(key, value)?,
            "p0" => self.p0 = num(key, value)?,
            "h" => self.h = Some(num(key, value)?),
            "substeps" => self.substeps = Some(num(key, value)?),
            "outlier_quantile" => self.outlier_quantile = num(key, value)?,
            "symmetrize_p" => {
                self.symmetrize_p = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(format!("invalid value for key `symmetrize_p`: `{value}`")),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            "frames" => self.frames = num(key, value)?,
            "points" => self.points = num(key, value)?,
            "depth_min" => self.depth_min = num(key, value)?,
            "depth_max" => self.depth_max = num(key, value)?,
            "discontinuity_frames" => {
                self.discontinuity_frames = if value.is_empty() || value == "none" {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|tok| {
                            tok.trim().parse::<u32>().map_err(|_| {
                                format!(
                                    "invalid value for key `discontinuity_frames`: `{value}`"
                                )
                            })
                        })
                        .collect::<Result<_, _>>()?
                };
            }
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Resolves the substep layout: either field may be derived from the
    /// other, and when both are set their product must span one frame.
    pub fn step_plan(&self) -> Result<(f64, u32), String> {
        match (self.h, self.substeps) {
            (None, None) => Ok((0.001, 1000)),
            (None, Some(s)) => {
                if s < 1 {
                    return Err("substeps must be >= 1".to_string());
                }
                Ok((1.0 / s as f64, s))
            }
            (Some(h), None) => {
                if !(h.is_finite() && h > 0.0 && h <= 1.0) {
                    return Err(format!("h must be in (0, 1], got {h}"));
                }
                let s = (1.0 / h).round() as u32;
                if s < 1 || (h * s as f64 - 1.0).abs() > 1e-9 {
                    return Err(format!("h = {h} does not evenly divide one frame"));
                }
                Ok((h, s))
            }
            (Some(h), Some(s)) => {
                if (h * s as f64 - 1.0).abs() > 1e-9 {
                    return Err(format!(
                        "h*substeps must span one frame, got {} * {s} = {}",
                        h,
                        h * s as f64
                    ));
                }
                Ok((h, s))
            }
        }
    }

    /// Assembles the filter weights: `S = diag(s1,s1,s1,s2,s2,s2)`,
    /// `Q = q·I₃`, `P₀ = p0·I₆`.
    pub fn filter_config(&self) -> Result<FilterConfig, String> {
        let (h, substeps) = self.step_plan()?;
        let mut cfg = FilterConfig::with_diagonal_weights(self.s1, self.s2, self.q);
        cfg.alpha = self.alpha;
        cfg.p0_scale = self.p0;
        cfg.h = h;
        cfg.substeps = substeps;
        cfg.outlier_quantile = self.outlier_quantile;
        cfg.symmetrize_p = self.symmetrize_p;
        Ok(cfg)
    }
}
