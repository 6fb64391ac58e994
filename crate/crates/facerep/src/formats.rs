//! Binary file formats: weight stores, SVM models, raw tensors and
//! feature caches. All multi-byte integers and floats are little-endian;
//! floats round-trip bit-exactly via their bit patterns.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use facerep_core::netdef::{ParamSet, WeightMeta, WeightStore};
use facerep_core::svm::{Standardizer, SvmModel};
use facerep_core::Tensor;

use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"MRW1";
pub const MODEL_MAGIC: &[u8; 4] = b"MSVM";
pub const TENSOR_MAGIC: &[u8; 4] = b"MRT1";

/// Reserved record carrying store metadata; the NUL prefix keeps it out
/// of the layer namespace.
const META_RECORD: &str = "\u{0}meta";

// ---------------------------------------------------------------------
// low-level reader with positioned errors

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Reader { buf, pos: 0, path }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::format(self.path, self.pos as u64, message)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err(format!(
                "truncated while reading {what} ({n} bytes needed, {} left)",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(4 * n, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err(format!("{what} is not UTF-8")))
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4, "magic")?;
        if got != expect {
            return Err(Error::format(
                self.path,
                at as u64,
                format!("bad magic {:?}, expected {:?}", got, expect),
            ));
        }
        Ok(())
    }

    /// Verifies the trailing CRC32 over everything before it; leaves the
    /// cursor past the trailer.
    fn crc_trailer(&mut self) -> Result<()> {
        if self.buf.len() < self.pos + 4 {
            return Err(self.err("truncated before CRC32 trailer"));
        }
        let body_end = self.buf.len() - 4;
        if self.pos > body_end {
            return Err(self.err("record data overruns CRC32 trailer"));
        }
        let stored = u32::from_le_bytes(self.buf[body_end..].try_into().unwrap());
        let actual = crc32fast::hash(&self.buf[..body_end]);
        if stored != actual {
            return Err(Error::format(
                self.path,
                body_end as u64,
                format!("CRC32 mismatch: stored {stored:#010x}, computed {actual:#010x}"),
            ));
        }
        Ok(())
    }
}

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for &v in vals {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

fn push_string(out: &mut Vec<u8>, s: &str) {
    push_u16(out, s.len() as u16);
    out.extend_from_slice(s.as_bytes());
}

fn finish_with_crc(mut body: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&body);
    push_u32(&mut body, crc);
    body
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------
// weight store (MRW1)

fn push_tensor_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    push_string(out, name);
    out.push(0); // dtype: 32-bit float
    out.push(t.shape().len() as u8);
    for &e in t.shape() {
        push_u32(out, e as u32);
    }
    push_f32s(out, t.data());
}

pub fn save_weights(store: &WeightStore<f32>, path: &Path) -> Result<()> {
    let mut records = 1usize; // meta
    for set in store.entries.values() {
        records += 2 + usize::from(set.slopes.is_some());
    }
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    push_u16(&mut out, store.meta.format_version);
    push_u16(&mut out, 0); // flags, reserved
    push_u32(&mut out, records as u32);
    // Meta travels as a reserved record: input side plus the seed split
    // into two bit-carried words.
    let meta = Tensor::new(
        &[3],
        vec![
            f32::from_bits(store.meta.input_side),
            f32::from_bits(store.meta.seed as u32),
            f32::from_bits((store.meta.seed >> 32) as u32),
        ],
    )
    .expect("fixed extents");
    push_tensor_record(&mut out, META_RECORD, &meta);
    for (name, set) in &store.entries {
        push_tensor_record(&mut out, &format!("{name}/kernel"), &set.kernel);
        push_tensor_record(&mut out, &format!("{name}/bias"), &set.bias);
        if let Some(slopes) = &set.slopes {
            push_tensor_record(&mut out, &format!("{name}/prelu"), slopes);
        }
    }
    write_file(path, &finish_with_crc(out))
}

fn read_tensor_record(r: &mut Reader) -> Result<(String, Tensor<f32>)> {
    let name = r.string("record name")?;
    let dtype = r.u8("dtype")?;
    if dtype != 0 {
        return Err(r.err(format!("unsupported dtype {dtype} in record {name:?}")));
    }
    let ndim = r.u8("ndim")? as usize;
    if ndim == 0 || ndim > 4 {
        return Err(r.err(format!("record {name:?} has unsupported rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let e = r.u32("extent")? as usize;
        if e == 0 {
            return Err(r.err(format!("record {name:?} has a zero extent")));
        }
        shape.push(e);
    }
    let n: usize = shape.iter().product();
    if n > (r.buf.len() - r.pos) / 4 + 1 {
        return Err(r.err(format!("record {name:?} payload of {n} floats overruns the file")));
    }
    let data = r.f32_vec(n, "tensor payload")?;
    let t = Tensor::new(&shape, data)
        .map_err(|e| r.err(format!("record {name:?}: {e}")))?;
    Ok((name, t))
}

pub fn load_weights(path: &Path) -> Result<WeightStore<f32>> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, path);
    r.magic(WEIGHTS_MAGIC)?;
    let version = r.u16("version")?;
    if version != 1 {
        return Err(Error::format(path, 4, format!("unsupported version {version}")));
    }
    let _flags = r.u16("flags")?;
    let count = r.u32("record count")? as usize;

    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..count {
        let at = r.pos;
        let (name, t) = read_tensor_record(&mut r)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format(path, at as u64, format!("duplicate record {name:?}")));
        }
    }
    r.crc_trailer()?;
    if r.buf.len() != r.pos + 4 {
        return Err(Error::format(
            path,
            r.pos as u64,
            "trailing bytes after the declared records",
        ));
    }

    let meta_t = tensors.remove(META_RECORD).ok_or_else(|| {
        Error::format(path, 8, "missing store metadata record")
    })?;
    if meta_t.len() != 3 {
        return Err(Error::format(path, 12, "malformed store metadata record"));
    }
    let words: Vec<u32> = meta_t.data().iter().map(|v| v.to_bits()).collect();
    let meta = WeightMeta {
        format_version: version,
        input_side: words[0],
        seed: words[1] as u64 | ((words[2] as u64) << 32),
    };

    let mut entries: BTreeMap<String, ParamSet<f32>> = BTreeMap::new();
    let mut kernels: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    let mut biases: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    let mut slopes: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for (name, t) in tensors {
        let (layer, part) = name.rsplit_once('/').ok_or_else(|| {
            Error::format(path, 12, format!("record {name:?} is not layer/part shaped"))
        })?;
        let bucket = match part {
            "kernel" => &mut kernels,
            "bias" => &mut biases,
            "prelu" => &mut slopes,
            other => {
                return Err(Error::format(
                    path,
                    12,
                    format!("record {name:?} has unknown part {other:?}"),
                ))
            }
        };
        bucket.insert(layer.to_string(), t);
    }
    for (layer, kernel) in kernels {
        let bias = biases.remove(&layer).ok_or_else(|| {
            Error::format(path, 12, format!("layer {layer:?} has a kernel but no bias"))
        })?;
        let slopes = slopes.remove(&layer);
        entries.insert(layer, ParamSet { kernel, bias, slopes });
    }
    if let Some(layer) = biases.keys().next() {
        return Err(Error::format(path, 12, format!("layer {layer:?} has a bias but no kernel")));
    }
    if let Some(layer) = slopes.keys().next() {
        return Err(Error::format(
            path,
            12,
            format!("layer {layer:?} has slopes but no kernel"),
        ));
    }
    Ok(WeightStore { entries, meta })
}

// ---------------------------------------------------------------------
// SVM model (MSVM)

pub fn save_model(model: &SvmModel, path: &Path) -> Result<()> {
    let dim = model.weights.len();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    push_u16(&mut out, 1);
    push_string(&mut out, &model.attribute);
    push_string(&mut out, &model.representation);
    push_u32(&mut out, dim as u32);
    push_f32s(&mut out, &model.weights);
    push_f32s(&mut out, &[model.bias]);
    push_f32s(&mut out, &model.standardizer.mean);
    push_f32s(&mut out, &model.standardizer.scale);
    push_f32s(&mut out, &[model.c]);
    write_file(path, &finish_with_crc(out))
}

pub fn load_model(path: &Path) -> Result<SvmModel> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, path);
    r.magic(MODEL_MAGIC)?;
    let version = r.u16("version")?;
    if version != 1 {
        return Err(Error::format(path, 4, format!("unsupported version {version}")));
    }
    let attribute = r.string("attribute name")?;
    let representation = r.string("representation name")?;
    let dim = r.u32("dimension")? as usize;
    if dim > (r.buf.len() - r.pos) / 4 {
        return Err(r.err(format!("declared dimension {dim} overruns the file")));
    }
    let weights = r.f32_vec(dim, "weights")?;
    let bias = r.f32_vec(1, "bias")?[0];
    let mean = r.f32_vec(dim, "means")?;
    let scale = r.f32_vec(dim, "scales")?;
    let c = r.f32_vec(1, "C")?[0];
    r.crc_trailer()?;
    if r.buf.len() != r.pos + 4 {
        return Err(Error::format(path, r.pos as u64, "trailing bytes after model payload"));
    }
    Ok(SvmModel {
        weights,
        bias,
        c,
        standardizer: Standardizer { mean, scale },
        attribute,
        representation,
        bias_as_feature: true,
    })
}

// ---------------------------------------------------------------------
// raw tensor (MRT1)

pub fn save_raw_tensor(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(t.shape().len() as u8);
    for &e in t.shape() {
        push_u32(&mut out, e as u32);
    }
    push_f32s(&mut out, t.data());
    write_file(path, &out)
}

pub fn load_raw_tensor(path: &Path) -> Result<Tensor<f32>> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, path);
    r.magic(TENSOR_MAGIC)?;
    let ndim = r.u8("ndim")? as usize;
    if ndim == 0 || ndim > 4 {
        return Err(r.err(format!("unsupported rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let e = r.u32("extent")? as usize;
        if e == 0 {
            return Err(r.err("zero extent"));
        }
        shape.push(e);
    }
    let n: usize = shape.iter().product();
    let data = r.f32_vec(n, "tensor payload")?;
    if r.buf.len() != r.pos {
        return Err(Error::format(path, r.pos as u64, "trailing bytes after tensor payload"));
    }
    Tensor::new(&shape, data).map_err(|e| Error::format(path, 5, e.to_string()))
}

// ---------------------------------------------------------------------
// feature cache

/// One cached representation vector for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub image_id: u32,
    pub rep_id: u8,
    pub values: Vec<f32>,
}

pub fn save_feature_cache(records: &[FeatureRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for rec in records {
        push_u32(&mut out, rec.image_id);
        out.push(rec.rep_id);
        push_u32(&mut out, rec.values.len() as u32);
        push_f32s(&mut out, &rec.values);
    }
    write_file(path, &out)
}

pub fn load_feature_cache(path: &Path) -> Result<Vec<FeatureRecord>> {
    let buf = read_file(path)?;
    let mut r = Reader::new(&buf, path);
    let mut records = Vec::new();
    while r.pos < r.buf.len() {
        let image_id = r.u32("image id")?;
        let rep_id = r.u8("representation id")?;
        let len = r.u32("record length")? as usize;
        if len > (r.buf.len() - r.pos) / 4 {
            return Err(r.err(format!("record length {len} overruns the file")));
        }
        let values = r.f32_vec(len, "feature payload")?;
        records.push(FeatureRecord { image_id, rep_id, values });
    }
    Ok(records)
}
