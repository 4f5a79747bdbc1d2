//! Projection-map export.
//!
//! Each head of one clip's map is written twice: a text grid holding every
//! value at full precision (the source of truth) and an 8-bit binary PGM
//! normalised to the head's own min/max.
//!
//! Text grid layout:
//!
//! ```text
//! # clip 3 head 0 rows 4 cols 8 min 0.01 max 0.4
//! 0.125 0.125 ...
//! ```
//!
//! Values use the shortest decimal form that parses back to the same `f64`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::temporal::ProjectionMap;
use crate::tensor::Scalar;

/// One head's map with the normalisation used for its image.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrid {
    pub clip: usize,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

impl HeadGrid {
    pub fn new(clip: usize, head: usize, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::invalid("heatmap", format!("{} values for a {rows}x{cols} grid", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "heatmap" });
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(HeadGrid {
            clip,
            head,
            rows,
            cols,
            values,
            min,
            max,
        })
    }

    /// Grey level of a value. A flat grid maps to mid-grey.
    pub fn level(&self, v: f64) -> u8 {
        let span = self.max - self.min;
        if span <= 0.0 {
            return 128;
        }
        (((v - self.min) / span) * 255.0).round().clamp(0.0, 255.0) as u8
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# clip {} head {} rows {} cols {} min {:?} max {:?}\n",
            self.clip, self.head, self.rows, self.cols, self.min, self.max
        );
        for row in self.values.chunks(self.cols) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            s += &cells.join(" ");
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty grid")?;
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 13 || f[0] != "#" {
            return Err(format!("bad header `{header}`"));
        }
        let num = |i: usize, key: &str| -> std::result::Result<&str, String> {
            if f[i] == key {
                Ok(f[i + 1])
            } else {
                Err(format!("expected `{key}` in header"))
            }
        };
        let int = |i, key| num(i, key)?.parse::<usize>().map_err(|e| e.to_string());
        let (clip, head, rows, cols) = (int(1, "clip")?, int(3, "head")?, int(5, "rows")?, int(7, "cols")?);
        let mut values = Vec::with_capacity(rows * cols);
        for line in lines {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
                .collect::<std::result::Result<_, _>>()?;
            if row.len() != cols {
                return Err(format!("row of {} values, expected {cols}", row.len()));
            }
            values.extend(row);
        }
        HeadGrid::new(clip, head, rows, cols, values).map_err(|e| e.to_string())
    }

    /// Binary PGM, one pixel per map cell, output steps down, source frames across.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.values.iter().map(|&v| self.level(v)));
        out
    }
}

/// Width, height and pixels of a binary PGM with maxval 255.
pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(format!("unsupported header {fields:?}"));
    }
    let w: usize = fields[1].parse().map_err(|_| "bad width")?;
    let h: usize = fields[2].parse().map_err(|_| "bad height")?;
    let pixels = bytes.get(i + 1..).ok_or("missing raster")?;
    if pixels.len() != w * h {
        return Err(format!("raster has {} bytes, expected {}", pixels.len(), w * h));
    }
    Ok((w, h, pixels.to_vec()))
}

/// Per-head grids of sample `n` in `m`.
pub fn head_grids<T: Scalar>(m: &ProjectionMap<T>, n: usize, clip_id: usize) -> Result<Vec<HeadGrid>> {
    if n >= m.batch() {
        return Err(Error::invalid("heatmap", format!("sample {n} outside batch of {}", m.batch())));
    }
    (0..m.heads())
        .map(|h| {
            let values = m.head_slice(n, h).iter().map(|v| v.as_f64()).collect();
            HeadGrid::new(clip_id, h, m.out_steps(), m.source_steps(), values)
        })
        .collect()
}

/// Writes `{prefix}_clip{id}_head{h}.txt` and `.pgm` for every head of sample
/// `n`. Returns the written paths, text then image per head.
pub fn export_heatmap<T: Scalar>(
    m: &ProjectionMap<T>,
    n: usize,
    clip_id: usize,
    dir: impl AsRef<Path>,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for grid in head_grids(m, n, clip_id)? {
        let stem = format!("{prefix}_clip{clip_id}_head{}", grid.head);
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, grid.to_text()).map_err(|e| Error::io(&txt, e))?;
        let pgm = dir.join(format!("{stem}.pgm"));
        std::fs::write(&pgm, grid.to_pgm()).map_err(|e| Error::io(&pgm, e))?;
        written.push(txt);
        written.push(pgm);
    }
    Ok(written)
}
