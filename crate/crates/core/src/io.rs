//! WFTM model and WFTD dataset files. All integers little-endian, CRC32 (IEEE)
//! of every preceding byte as the trailer. Layouts are in docs/formats.md.

use std::fs;
use std::path::Path;

use crate::conv::{ConvSpec, Engine};
use crate::error::{Error, Result};
use crate::fxp::{DatapathSpec, FxpFormat, FxpTensor};
use crate::network::{Dataset, LayerSpec, Model, Provenance};

pub const MODEL_MAGIC: [u8; 4] = *b"WFTM";
pub const DATASET_MAGIC: [u8; 4] = *b"WFTD";
pub const VERSION: u16 = 1;

const MAX_RANK: usize = 4;
const MAX_ELEMENTS: usize = 1 << 24;
const MAX_LAYERS: usize = 1024;

const TAG_CONV: u8 = 0;
const TAG_FC: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_MAXPOOL2: u8 = 3;
const TAG_FLATTEN: u8 = 4;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i16(&mut self, v: i16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn dims(&mut self, dims: &[usize]) {
        self.u8(dims.len() as u8);
        for &d in dims {
            self.u32(d as u32);
        }
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.0);
        self.u32(crc);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("{what} at offset {}", self.pos)));
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
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn dims(&mut self, what: &str) -> Result<Vec<usize>> {
        let rank = self.u8(what)? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Malformed(format!("{what}: rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut n = 1usize;
        for _ in 0..rank {
            let d = self.u32(what)? as usize;
            n = n.saturating_mul(d);
            dims.push(d);
        }
        if n == 0 || n > MAX_ELEMENTS {
            return Err(Error::Malformed(format!("{what}: {n} elements")));
        }
        Ok(dims)
    }
    fn values(&mut self, n: usize, format: FxpFormat, what: &str) -> Result<Vec<i32>> {
        let bytes = self.take(n.checked_mul(2).ok_or_else(|| Error::Malformed(what.into()))?, what)?;
        let vals: Vec<i32> = bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as i32)
            .collect();
        if let Some(v) = vals.iter().find(|&&v| !format.contains(v as i64)) {
            return Err(Error::Malformed(format!("{what}: value {v} outside {}-bit range", format.word_bits)));
        }
        Ok(vals)
    }
}

/// Magic, version and checksum; returns the body without the trailer.
fn open_envelope<'a>(bytes: &'a [u8], magic: [u8; 4]) -> Result<Reader<'a>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("magic".into()));
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    if bytes.len() < 10 {
        return Err(Error::Truncated("header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    Ok(Reader { buf: body, pos: 6 })
}

fn format_from(word_bits: u8, frac_bits: u8) -> Result<FxpFormat> {
    FxpFormat::new(word_bits as u32, frac_bits as u32).map_err(|e| Error::Malformed(e.to_string()))
}

fn u8_field(v: usize, what: &str) -> Result<u8> {
    u8::try_from(v).map_err(|_| Error::InvalidModel(format!("{what} {v} does not fit the file format")))
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidModel(format!("{what} {v} does not fit the file format")))
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MODEL_MAGIC);
    w.u16(VERSION);
    w.u8(model.format.word_bits as u8);
    w.u8(model.format.frac_bits as u8);
    w.u8(model.datapath.acc_bits as u8);
    w.u8(model.datapath.mul_out_bits as u8);
    w.u8(model.datapath.wrap_on_overflow as u8);
    w.u8(0);
    w.u64(model.seed);
    w.u16(
        u16::try_from(model.num_classes).map_err(|_| Error::InvalidModel("too many classes".into()))?,
    );
    let name = model.name.as_bytes();
    w.u16(u16::try_from(name.len()).map_err(|_| Error::InvalidModel("name too long".into()))?);
    w.0.extend_from_slice(name);
    if model.input_shape.len() > MAX_RANK {
        return Err(Error::InvalidModel("input rank too large".into()));
    }
    w.dims(&model.input_shape);
    w.u16(model.layers.len() as u16);
    for (layer, weights) in model.layers.iter().zip(&model.weights) {
        match layer {
            LayerSpec::Conv { spec, engine } => {
                w.u8(TAG_CONV);
                w.u8(match engine {
                    Engine::Direct => 0,
                    Engine::Winograd => 1,
                });
                w.u32(u32_field(spec.in_channels, "in_channels")?);
                w.u32(u32_field(spec.out_channels, "out_channels")?);
                w.u8(u8_field(spec.kernel_h, "kernel_h")?);
                w.u8(u8_field(spec.kernel_w, "kernel_w")?);
                w.u8(u8_field(spec.stride, "stride")?);
                w.u8(u8_field(spec.padding, "padding")?);
                w.u32(u32_field(spec.in_h, "in_h")?);
                w.u32(u32_field(spec.in_w, "in_w")?);
            }
            LayerSpec::Fc {
                in_features,
                out_features,
            } => {
                w.u8(TAG_FC);
                w.u32(u32_field(*in_features, "in_features")?);
                w.u32(u32_field(*out_features, "out_features")?);
            }
            LayerSpec::Relu => w.u8(TAG_RELU),
            LayerSpec::Maxpool2 => w.u8(TAG_MAXPOOL2),
            LayerSpec::Flatten => w.u8(TAG_FLATTEN),
        }
        if let Some(t) = weights {
            w.u32(t.len() as u32);
            for &v in t.data() {
                w.i16(v as i16);
            }
        }
    }
    Ok(w.finish())
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = open_envelope(bytes, MODEL_MAGIC)?;
    let format = format_from(r.u8("word_bits")?, r.u8("frac_bits")?)?;
    let acc_bits = r.u8("acc_bits")? as u32;
    let mul_out_bits = r.u8("mul_out_bits")? as u32;
    let flags = r.u8("flags")?;
    if flags > 1 {
        return Err(Error::Malformed(format!("flags {flags:#x}")));
    }
    if r.u8("reserved")? != 0 {
        return Err(Error::Malformed("reserved byte is not zero".into()));
    }
    if !(format.word_bits * 2..=60).contains(&acc_bits) || !(format.word_bits..=acc_bits).contains(&mul_out_bits) {
        return Err(Error::Malformed(format!("datapath widths {mul_out_bits}/{acc_bits}")));
    }
    let datapath = DatapathSpec {
        mul_out_bits,
        acc_bits,
        wrap_on_overflow: flags == 1,
    };
    let seed = r.u64("seed")?;
    let num_classes = r.u16("num_classes")? as usize;
    let name_len = r.u16("name length")? as usize;
    let name = std::str::from_utf8(r.take(name_len, "name")?)
        .map_err(|_| Error::Malformed("name is not utf-8".into()))?
        .to_string();
    let input_shape = r.dims("input shape")?;
    let layer_count = r.u16("layer count")? as usize;
    if layer_count > MAX_LAYERS {
        return Err(Error::Malformed(format!("{layer_count} layers")));
    }
    let mut layers = Vec::with_capacity(layer_count);
    let mut weights = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let what = format!("layer {i}");
        let layer = match r.u8(&what)? {
            TAG_CONV => {
                let engine = match r.u8(&what)? {
                    0 => Engine::Direct,
                    1 => Engine::Winograd,
                    e => return Err(Error::Malformed(format!("{what}: engine tag {e}"))),
                };
                let spec = ConvSpec {
                    in_channels: r.u32(&what)? as usize,
                    out_channels: r.u32(&what)? as usize,
                    kernel_h: r.u8(&what)? as usize,
                    kernel_w: r.u8(&what)? as usize,
                    stride: r.u8(&what)? as usize,
                    padding: r.u8(&what)? as usize,
                    in_h: r.u32(&what)? as usize,
                    in_w: r.u32(&what)? as usize,
                };
                LayerSpec::Conv { spec, engine }
            }
            TAG_FC => LayerSpec::Fc {
                in_features: r.u32(&what)? as usize,
                out_features: r.u32(&what)? as usize,
            },
            TAG_RELU => LayerSpec::Relu,
            TAG_MAXPOOL2 => LayerSpec::Maxpool2,
            TAG_FLATTEN => LayerSpec::Flatten,
            t => return Err(Error::Malformed(format!("{what}: kind tag {t}"))),
        };
        let w = match layer.weight_shape() {
            Some(shape) => {
                let count = r.u32(&what)? as usize;
                let expect = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
                if expect != Some(count) {
                    return Err(Error::Malformed(format!("{what}: {count} weights for shape {shape:?}")));
                }
                if count > MAX_ELEMENTS || count * 2 > r.remaining() {
                    return Err(Error::Truncated(format!("{what} weights")));
                }
                let vals = r.values(count, format, &what)?;
                Some(FxpTensor::new(shape, vals, format)?)
            }
            None => None,
        };
        layers.push(layer);
        weights.push(w);
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    let model = Model {
        name,
        seed,
        format,
        datapath,
        input_shape,
        num_classes,
        layers,
        weights,
    };
    model.validate()?;
    Ok(model)
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let first = ds
        .inputs
        .first()
        .ok_or_else(|| Error::Malformed("empty dataset".into()))?;
    let format = first.format();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&DATASET_MAGIC);
    w.u16(VERSION);
    w.u8(format.word_bits as u8);
    w.u8(format.frac_bits as u8);
    w.u8(match ds.provenance {
        Provenance::SelfLabeled => 0,
        Provenance::External => 1,
    });
    w.u8(0);
    w.u16(u16::try_from(ds.num_classes).map_err(|_| Error::Malformed("too many classes".into()))?);
    w.u32(u32::try_from(ds.len()).map_err(|_| Error::Malformed("too many samples".into()))?);
    if first.shape().len() > MAX_RANK {
        return Err(Error::Malformed("sample rank too large".into()));
    }
    w.dims(first.shape());
    for (x, &label) in ds.inputs.iter().zip(&ds.labels) {
        for &v in x.data() {
            w.i16(v as i16);
        }
        w.u16(label as u16);
    }
    Ok(w.finish())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = open_envelope(bytes, DATASET_MAGIC)?;
    let format = format_from(r.u8("word_bits")?, r.u8("frac_bits")?)?;
    let provenance = match r.u8("provenance")? {
        0 => Provenance::SelfLabeled,
        1 => Provenance::External,
        p => return Err(Error::Malformed(format!("provenance tag {p}"))),
    };
    if r.u8("reserved")? != 0 {
        return Err(Error::Malformed("reserved byte is not zero".into()));
    }
    let num_classes = r.u16("num_classes")? as usize;
    if num_classes == 0 {
        return Err(Error::Malformed("zero classes".into()));
    }
    let count = r.u32("count")? as usize;
    if count == 0 {
        return Err(Error::Malformed("empty dataset".into()));
    }
    let shape = r.dims("sample shape")?;
    let elems: usize = shape.iter().product();
    let record = elems * 2 + 2;
    if count.checked_mul(record) != Some(r.remaining()) {
        return Err(Error::Truncated(format!(
            "{count} samples of {record} bytes, {} bytes present",
            r.remaining()
        )));
    }
    let mut inputs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let what = format!("sample {i}");
        let vals = r.values(elems, format, &what)?;
        inputs.push(FxpTensor::new(shape.clone(), vals, format)?);
        labels.push(r.u16(&what)? as u32);
    }
    let ds = Dataset {
        inputs,
        labels,
        num_classes,
        provenance,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    decode_model(&fs::read(path)?)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
