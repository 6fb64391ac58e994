//! Dataset ingestion: attribute list files (CelebA layout), partition
//! maps, and image decoding (binary PPM/PGM plus the raw-tensor escape
//! hatch for externally aligned inputs).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use facerep_core::Tensor;

use crate::error::{Error, Result};
use crate::formats::{load_raw_tensor, TENSOR_MAGIC};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn from_index(idx: u8) -> Option<Split> {
        match idx {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Parsed attribute list plus (optionally) the partition map.
#[derive(Clone, Debug, Default)]
pub struct AttributeTable {
    pub attributes: Vec<String>,
    /// `(filename, one ±1 label per attribute)`.
    pub rows: Vec<(String, Vec<i8>)>,
    pub partition: BTreeMap<String, Split>,
}

impl AttributeTable {
    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == name)
    }

    /// Row indices belonging to one split; rows without a partition
    /// entry are skipped.
    pub fn split_rows(&self, split: Split) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, (name, _))| self.partition.get(name) == Some(&split))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Parses the CelebA-style list layout: line 1 is the row count, line 2
/// the attribute names, then one `filename label...` row per image.
pub fn parse_attr_list(path: &Path) -> Result<AttributeTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();

    let (_, count_line) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file; expected a row count"))?;
    let declared: usize = count_line
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, 1, format!("row count {:?} is not a number", count_line.trim())))?;

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 2, "missing attribute-name header"))?;
    let attributes: Vec<String> = header.split_whitespace().map(str::to_string).collect();
    if attributes.is_empty() {
        return Err(Error::parse(path, 2, "attribute-name header is empty"));
    }

    let mut rows = Vec::with_capacity(declared);
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let name = tokens.next().expect("non-empty line").to_string();
        let mut labels = Vec::with_capacity(attributes.len());
        for tok in tokens {
            match tok {
                "1" | "+1" => labels.push(1),
                "-1" => labels.push(-1),
                other => {
                    return Err(Error::parse(
                        path,
                        line_no,
                        format!("label token {other:?} is not +1/-1"),
                    ))
                }
            }
        }
        if labels.len() != attributes.len() {
            return Err(Error::parse(
                path,
                line_no,
                format!("row has {} labels, header names {}", labels.len(), attributes.len()),
            ));
        }
        rows.push((name, labels));
    }
    if rows.len() != declared {
        return Err(Error::parse(
            path,
            1,
            format!("header declares {declared} rows, file contains {}", rows.len()),
        ));
    }
    Ok(AttributeTable { attributes, rows, partition: BTreeMap::new() })
}

/// Parses `filename idx` lines (0=train, 1=val, 2=test).
pub fn parse_partition(path: &Path) -> Result<BTreeMap<String, Split>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let name = tokens.next().expect("non-empty line").to_string();
        let split_tok = tokens
            .next()
            .ok_or_else(|| Error::parse(path, line_no, "missing split index"))?;
        if tokens.next().is_some() {
            return Err(Error::parse(path, line_no, "trailing tokens after split index"));
        }
        let split = split_tok
            .parse::<u8>()
            .ok()
            .and_then(Split::from_index)
            .ok_or_else(|| {
                Error::parse(path, line_no, format!("split index {split_tok:?} is not 0/1/2"))
            })?;
        map.insert(name, split);
    }
    Ok(map)
}

/// Attaches a partition map, enforcing that every partitioned filename
/// appears in the table.
pub fn attach_partition(table: &mut AttributeTable, partition: BTreeMap<String, Split>) -> Result<()> {
    for name in partition.keys() {
        if !table.rows.iter().any(|(n, _)| n == name) {
            return Err(Error::Protocol(format!(
                "partition names {name:?}, which is absent from the attribute table"
            )));
        }
    }
    table.partition = partition;
    Ok(())
}

// ---------------------------------------------------------------------
// image decoding

/// Decodes binary PPM (P6), binary PGM (P5, replicated to 3 channels)
/// or a raw `(3,H,W)` tensor file; pixel values land in `[0, 255]`.
pub fn decode_image(path: &Path) -> Result<Tensor<f32>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.starts_with(TENSOR_MAGIC) {
        let t = load_raw_tensor(path)?;
        let (c, _, _) = t
            .dims3()
            .map_err(|e| Error::format(path, 4, e.to_string()))?;
        return match c {
            3 => Ok(t),
            1 => Ok(replicate_gray(&t)),
            _ => Err(Error::format(path, 4, format!("raw image must have 1 or 3 channels, got {c}"))),
        };
    }
    match buf.get(..2) {
        Some(b"P6") => decode_pnm(path, &buf, 3),
        Some(b"P5") => decode_pnm(path, &buf, 1),
        _ => Err(Error::format(path, 0, "unknown image magic (need P6, P5 or MRT1)")),
    }
}

fn replicate_gray(t: &Tensor<f32>) -> Tensor<f32> {
    let (_, h, w) = t.dims3().expect("caller validated");
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[3, h, w], data).expect("replicated extents")
}

/// Shared P5/P6 decoder: whitespace/comment-tolerant header, then a
/// binary payload at 8 or 16 bits per sample, scaled to `[0, 255]`.
fn decode_pnm(path: &Path, buf: &[u8], samples: usize) -> Result<Tensor<f32>> {
    let mut pos = 2usize; // past magic

    let next_token = |pos: &mut usize| -> Result<usize> {
        loop {
            while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < buf.len() && buf[*pos] == b'#' {
                while *pos < buf.len() && buf[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < buf.len() && buf[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::format(path, start as u64, "expected a header integer"));
        }
        std::str::from_utf8(&buf[start..*pos])
            .expect("digits are UTF-8")
            .parse()
            .map_err(|_| Error::format(path, start as u64, "header integer out of range"))
    };

    let width = next_token(&mut pos)?;
    let height = next_token(&mut pos)?;
    let maxval = next_token(&mut pos)?;
    if width == 0 || height == 0 {
        return Err(Error::format(path, 2, "image extents must be positive"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, 2, format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(Error::format(path, pos as u64, "missing separator before payload"));
    }
    pos += 1;

    let wide = maxval > 255;
    let bytes_per = if wide { 2 } else { 1 };
    let need = width * height * samples * bytes_per;
    if buf.len() - pos < need {
        return Err(Error::format(
            path,
            pos as u64,
            format!("payload truncated: need {need} bytes, have {}", buf.len() - pos),
        ));
    }
    let payload = &buf[pos..pos + need];
    let scale = 255.0 / maxval as f32;
    let sample_at = |i: usize| -> f32 {
        let raw = if wide {
            u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]) as f32
        } else {
            payload[i] as f32
        };
        raw * scale
    };

    // interleaved samples -> channel-major planes
    let mut data = vec![0.0f32; 3 * height * width];
    for px in 0..height * width {
        for s in 0..samples {
            let v = sample_at(px * samples + s);
            if samples == 1 {
                for ch in 0..3 {
                    data[ch * height * width + px] = v;
                }
            } else {
                data[s * height * width + px] = v;
            }
        }
    }
    Tensor::new(&[3, height, width], data).map_err(|e| Error::format(path, 2, e.to_string()))
}
