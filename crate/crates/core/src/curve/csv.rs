use std::fmt::Write as _;
use std::path::Path;

use super::{LandmarkFrame, LandmarkSequence};
use crate::error::{Error, Result};

/// Header `frame,l0x,l0y,l0z,...` then one row per frame.
pub fn format_sequence_csv(seq: &LandmarkSequence) -> String {
    let mut out = String::from("frame");
    for j in 0..seq.k() {
        let _ = write!(out, ",l{j}x,l{j}y,l{j}z");
    }
    out.push('\n');
    for (t, f) in seq.frames().iter().enumerate() {
        let _ = write!(out, "{t}");
        for p in f.points() {
            let _ = write!(out, ",{},{},{}", p[0], p[1], p[2]);
        }
        out.push('\n');
    }
    out
}

pub fn write_sequence_csv(path: &Path, seq: &LandmarkSequence) -> Result<()> {
    std::fs::write(path, format_sequence_csv(seq)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_sequence_csv(path: &Path) -> Result<LandmarkSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_sequence_csv(&text, path)
}

/// Parses the CSV layout written by [`format_sequence_csv`]. A single data
/// row is accepted by the caller through [`parse_frames_csv`]; sequences
/// require at least two rows.
pub fn parse_sequence_csv(text: &str, path: &Path) -> Result<LandmarkSequence> {
    let frames = parse_frames_csv(text, path)?;
    LandmarkSequence::new(frames)
}

/// Reads a landmark CSV holding exactly one frame, e.g. a neutral template.
pub fn read_frame_csv(path: &Path) -> Result<LandmarkFrame> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut frames = parse_frames_csv(&text, path)?;
    if frames.len() != 1 {
        return Err(Error::InvalidInput(format!(
            "{}: expected one landmark frame, found {}",
            path.display(),
            frames.len()
        )));
    }
    Ok(frames.pop().unwrap())
}

/// Writes one frame in the sequence CSV layout.
pub fn write_frame_csv(path: &Path, frame: &LandmarkFrame) -> Result<()> {
    let mut out = String::from("frame");
    for j in 0..frame.k() {
        let _ = write!(out, ",l{j}x,l{j}y,l{j}z");
    }
    out.push_str("\n0");
    for p in frame.points() {
        let _ = write!(out, ",{},{},{}", p[0], p[1], p[2]);
    }
    out.push('\n');
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub(crate) fn parse_frames_csv(text: &str, path: &Path) -> Result<Vec<LandmarkFrame>> {
    let err = |line: usize, offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        offset,
        message,
    };
    let mut offset = 0;
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().ok_or_else(|| err(1, 0, "empty file".into()))?;
    let columns: Vec<&str> = header.trim_end().split(',').collect();
    if columns.first() != Some(&"frame") || (columns.len() - 1) % 3 != 0 || columns.len() < 4 {
        return Err(err(1, 0, "expected header `frame,l0x,l0y,l0z,...`".into()));
    }
    let k = (columns.len() - 1) / 3;
    for j in 0..k {
        for (c, axis) in ["x", "y", "z"].iter().enumerate() {
            let want = format!("l{j}{axis}");
            if columns[1 + 3 * j + c] != want {
                return Err(err(1, 0, format!("header column {} should be `{want}`", 2 + 3 * j + c)));
            }
        }
    }
    offset += header.len();
    let mut frames = Vec::new();
    for (i, raw) in lines.enumerate() {
        let line_no = i + 2;
        let line = raw.trim_end();
        if line.is_empty() {
            offset += raw.len();
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + 3 * k {
            return Err(err(line_no, offset, format!("expected {} fields, got {}", 1 + 3 * k, fields.len())));
        }
        let flat = fields[1..]
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(line_no, offset, format!("bad coordinate: {e}")))?;
        let frame = LandmarkFrame::from_flat(k, &flat).map_err(|e| err(line_no, offset, e.to_string()))?;
        frames.push(frame);
        offset += raw.len();
    }
    if frames.is_empty() {
        return Err(err(1, 0, "no data rows".into()));
    }
    Ok(frames)
}
