//! On-disk sample matrices: a tab-separated text form and a compact
//! little-endian binary form. Both carry the hash of the config that
//! produced them.
//!
//! Text layout:
//!
//! ```text
//! # sensorseq-matrix v1 config=<hash>
//! user_id  segment  score_from_ms  wall_time_ms  delta_ms  y  w  category  <columns...>
//! ```
//!
//! `y` and `category` use `-` when absent.

use std::io::{self, Read, Write};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::encoder::SampleRow;
use crate::event_model::Segment;
use crate::pipeline::{Dataset, UserRows};

pub const TEXT_MAGIC: &str = "# sensorseq-matrix v1";
pub const BINARY_MAGIC: &[u8; 8] = b"SSQMAT01";
const FIXED: [&str; 8] = ["user_id", "segment", "score_from_ms", "wall_time_ms", "delta_ms", "y", "w", "category"];

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("matrix line {line}: {reason}")]
    Text { line: usize, reason: String },
    #[error("binary matrix: {0}")]
    Binary(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Text,
    Binary,
}

impl MatrixFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            MatrixFormat::Text => "tsv",
            MatrixFormat::Binary => "bin",
        }
    }
}

pub fn write_text(ds: &Dataset, config_hash: &str) -> String {
    let mut s = format!("{TEXT_MAGIC} config={config_hash}\n{}", FIXED.join("\t"));
    for c in &ds.columns {
        s.push('\t');
        s.push_str(c);
    }
    s.push('\n');
    for u in &ds.users {
        for (seg, rows) in &u.segments {
            for r in rows {
                s.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{:?}\t{}",
                    u.user_id,
                    seg.as_str(),
                    u.score_from_ms,
                    r.wall_time_ms,
                    r.delta_ms,
                    r.y.map_or_else(|| "-".to_string(), |y| y.to_string()),
                    r.w,
                    r.category.as_deref().unwrap_or("-")
                ));
                for v in &r.x {
                    s.push('\t');
                    s.push_str(&v.to_string());
                }
                s.push('\n');
            }
        }
    }
    s
}

fn push_row(users: &mut Vec<UserRows>, user: &str, seg: Segment, score_from: i64, row: SampleRow) {
    let same_user = users.last().is_some_and(|u| &*u.user_id == user);
    if !same_user {
        users.push(UserRows {
            user_id: row.user_id.clone(),
            unknown: seg == Segment::UnknownTest,
            score_from_ms: score_from,
            segments: Vec::new(),
        });
    }
    let u = users.last_mut().expect("user just pushed");
    match u.segments.last_mut() {
        Some((s, rows)) if *s == seg => rows.push(row),
        _ => u.segments.push((seg, vec![row])),
    }
}

/// Parses a text matrix; returns the dataset and its config hash.
pub fn read_text(text: &str) -> Result<(Dataset, String), MatrixError> {
    let err = |line: usize, reason: String| MatrixError::Text { line, reason };
    let mut lines = text.lines();
    let first = lines.next().unwrap_or("");
    let hash = first
        .strip_prefix(TEXT_MAGIC)
        .and_then(|r| r.trim().strip_prefix("config="))
        .ok_or_else(|| err(1, "missing matrix header".into()))?
        .to_string();
    let header: Vec<&str> = lines.next().ok_or_else(|| err(2, "missing column header".into()))?.split('\t').collect();
    if header.len() < FIXED.len() || header[..FIXED.len()] != FIXED {
        return Err(err(2, "unexpected column header".into()));
    }
    let columns: Vec<String> = header[FIXED.len()..].iter().map(|s| s.to_string()).collect();
    let width = columns.len();
    let mut users: Vec<UserRows> = Vec::new();
    let mut user_arc: Option<Arc<str>> = None;
    for (i, line) in lines.enumerate() {
        let n = i + 3;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != FIXED.len() + width {
            return Err(err(n, format!("expected {} fields, found {}", FIXED.len() + width, f.len())));
        }
        let num = |k: usize| f[k].parse::<i64>().map_err(|_| err(n, format!("bad integer `{}`", f[k])));
        let seg = Segment::parse(f[1]).ok_or_else(|| err(n, format!("bad segment `{}`", f[1])))?;
        let uid = match &user_arc {
            Some(a) if &**a == f[0] => a.clone(),
            _ => {
                let a: Arc<str> = Arc::from(f[0]);
                user_arc = Some(a.clone());
                a
            }
        };
        let y = match f[5] {
            "-" => None,
            v => Some(v.parse::<u8>().map_err(|_| err(n, format!("bad label `{v}`")))?),
        };
        let x = f[FIXED.len()..]
            .iter()
            .map(|v| v.parse::<f32>().map_err(|_| err(n, format!("bad value `{v}`"))))
            .collect::<Result<Vec<f32>, _>>()?;
        let row = SampleRow {
            user_id: uid,
            wall_time_ms: num(3)?,
            delta_ms: num(4)?,
            x,
            y,
            w: f[6].parse().map_err(|_| err(n, format!("bad weight `{}`", f[6])))?,
            category: (f[7] != "-").then(|| Arc::from(f[7])),
        };
        push_row(&mut users, f[0], seg, num(2)?, row);
    }
    Ok((Dataset { columns, users }, hash))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String, MatrixError> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| MatrixError::Binary(e.to_string()))
}

fn segment_code(s: Segment) -> u8 {
    Segment::ALL.iter().position(|x| *x == s).expect("segment listed") as u8
}

pub fn write_binary<W: Write>(ds: &Dataset, config_hash: &str, mut w: W) -> io::Result<()> {
    w.write_all(BINARY_MAGIC)?;
    write_str(&mut w, config_hash)?;
    w.write_u32::<LittleEndian>(ds.columns.len() as u32)?;
    for c in &ds.columns {
        write_str(&mut w, c)?;
    }
    w.write_u32::<LittleEndian>(ds.users.len() as u32)?;
    for u in &ds.users {
        write_str(&mut w, &u.user_id)?;
        w.write_u8(u8::from(u.unknown))?;
        w.write_i64::<LittleEndian>(u.score_from_ms)?;
        w.write_u32::<LittleEndian>(u.segments.len() as u32)?;
        for (seg, rows) in &u.segments {
            w.write_u8(segment_code(*seg))?;
            w.write_u64::<LittleEndian>(rows.len() as u64)?;
            for r in rows {
                w.write_i64::<LittleEndian>(r.wall_time_ms)?;
                w.write_i64::<LittleEndian>(r.delta_ms)?;
                w.write_u8(r.y.unwrap_or(u8::MAX))?;
                w.write_f64::<LittleEndian>(r.w)?;
                match &r.category {
                    Some(c) => {
                        w.write_u8(1)?;
                        write_str(&mut w, c)?;
                    }
                    None => w.write_u8(0)?,
                }
                for v in &r.x {
                    w.write_f32::<LittleEndian>(*v)?;
                }
            }
        }
    }
    w.flush()
}

pub fn read_binary<R: Read>(mut r: R) -> Result<(Dataset, String), MatrixError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(MatrixError::Binary("bad magic".into()));
    }
    let hash = read_str(&mut r)?;
    let width = r.read_u32::<LittleEndian>()? as usize;
    let columns = (0..width).map(|_| read_str(&mut r)).collect::<Result<Vec<_>, _>>()?;
    let n_users = r.read_u32::<LittleEndian>()?;
    let mut users = Vec::with_capacity(n_users as usize);
    for _ in 0..n_users {
        let user_id: Arc<str> = Arc::from(read_str(&mut r)?);
        let unknown = r.read_u8()? != 0;
        let score_from_ms = r.read_i64::<LittleEndian>()?;
        let n_seg = r.read_u32::<LittleEndian>()?;
        let mut segments = Vec::with_capacity(n_seg as usize);
        for _ in 0..n_seg {
            let code = r.read_u8()? as usize;
            let seg = *Segment::ALL
                .get(code)
                .ok_or_else(|| MatrixError::Binary(format!("bad segment code {code}")))?;
            let n = r.read_u64::<LittleEndian>()?;
            let mut rows = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let wall_time_ms = r.read_i64::<LittleEndian>()?;
                let delta_ms = r.read_i64::<LittleEndian>()?;
                let y = match r.read_u8()? {
                    u8::MAX => None,
                    v => Some(v),
                };
                let w = r.read_f64::<LittleEndian>()?;
                let category = match r.read_u8()? {
                    0 => None,
                    _ => Some(Arc::from(read_str(&mut r)?)),
                };
                let mut x = vec![0f32; width];
                r.read_f32_into::<LittleEndian>(&mut x)?;
                rows.push(SampleRow {
                    user_id: user_id.clone(),
                    wall_time_ms,
                    delta_ms,
                    x,
                    y,
                    w,
                    category,
                });
            }
            segments.push((seg, rows));
        }
        users.push(UserRows {
            user_id,
            unknown,
            score_from_ms,
            segments,
        });
    }
    Ok((Dataset { columns, users }, hash))
}
