//! Binary checkpoint format.
//!
//! ```text
//! "DTCK" | version: u16 | config_len: u32 | config JSON | tensor_count: u32 | tensor*
//! tensor = name_len: u16 | name | tag: u8 | bits: u8 | ndim: u8 | dims: u32* | payload
//! ```
//!
//! Integers are little-endian and codes are packed LSB-first. Payloads:
//!
//! | tag | encoding       | payload                                              |
//! |-----|----------------|------------------------------------------------------|
//! | 0   | `F32`          | `N` f32 values                                       |
//! | 1   | `QUANT(b)`     | min f32, step f32, `⌈N·b/8⌉` code bytes              |
//! | 2   | `SPARSE_F32`   | `⌈N/8⌉` keep-bitmap bytes, kept values as f32        |
//! | 3   | `SPARSE_QUANT` | min f32, step f32, bitmap, `⌈kept·b/8⌉` code bytes   |
//!
//! Sparse bitmaps are the pruning mask (bit set = kept); dropped entries load
//! as `+0.0`.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compress::{pack_codes, packed_len, unpack_codes, CompressionState};
use crate::dt::{layer_names, DecisionTransformer, DtConfig, NamedLayer};
use crate::error::{Error, Result};
use crate::nn::{LayerKind, LayerParams, LayerQuant, QuantGrid, Tensor};
use crate::trajectory::NormStats;
use crate::DtModel;

pub const MAGIC: &[u8; 4] = b"DTCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    F32,
    Quant(u8),
    SparseF32,
    SparseQuant(u8),
}

impl Encoding {
    fn tag(self) -> u8 {
        match self {
            Encoding::F32 => 0,
            Encoding::Quant(_) => 1,
            Encoding::SparseF32 => 2,
            Encoding::SparseQuant(_) => 3,
        }
    }

    fn bits(self) -> u8 {
        match self {
            Encoding::Quant(b) | Encoding::SparseQuant(b) => b,
            _ => 0,
        }
    }

    fn from_tag(tag: u8, bits: u8) -> Option<Self> {
        let quant_ok = (1..=8).contains(&bits);
        match (tag, bits) {
            (0, 0) => Some(Encoding::F32),
            (1, b) if quant_ok => Some(Encoding::Quant(b)),
            (2, 0) => Some(Encoding::SparseF32),
            (3, b) if quant_ok => Some(Encoding::SparseQuant(b)),
            _ => None,
        }
    }

    /// Payload size for `n` elements of which `kept` survive the mask.
    pub fn payload_bytes(self, n: usize, kept: usize) -> usize {
        match self {
            Encoding::F32 => 4 * n,
            Encoding::Quant(b) => 8 + packed_len(n, b),
            Encoding::SparseF32 => n.div_ceil(8) + 4 * kept,
            Encoding::SparseQuant(b) => 8 + n.div_ceil(8) + packed_len(kept, b),
        }
    }
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Encoding::F32 => write!(f, "F32"),
            Encoding::Quant(b) => write!(f, "QUANT({b})"),
            Encoding::SparseF32 => write!(f, "SPARSE_F32"),
            Encoding::SparseQuant(b) => write!(f, "SPARSE_QUANT({b})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorReport {
    pub name: String,
    pub shape: Vec<usize>,
    pub encoding: Encoding,
    pub payload_bytes: usize,
    /// Whole table entry: name, tag, shape and payload.
    pub entry_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub tensors: Vec<TensorReport>,
    /// Magic, version, config block and tensor count.
    pub header_bytes: usize,
    pub total_bytes: usize,
    /// Size of the uncompressed model with every tensor stored as F32.
    pub baseline_bytes: usize,
}

impl SizeReport {
    pub fn reduction_pct(&self) -> f64 {
        100.0 * (1.0 - self.total_bytes as f64 / self.baseline_bytes as f64)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    config: DtConfig,
    norm: NormStats,
    target_return: f32,
    compression: CompressionState,
}

fn config_block(model: &DtModel, compression: &CompressionState) -> Result<Vec<u8>> {
    let block = ConfigBlock {
        config: model.config.clone(),
        norm: model.norm.clone(),
        target_return: model.target_return,
        compression: compression.clone(),
    };
    Ok(serde_json::to_vec(&block)?)
}

fn header_bytes(config_len: usize) -> usize {
    4 + 2 + 4 + config_len + 4
}

fn entry_overhead(name: &str, ndim: usize) -> usize {
    2 + name.len() + 3 + 4 * ndim
}

/// Every tensor of `model` in file order with its mask and grid.
fn tensors(model: &DtModel) -> Vec<(String, &Tensor<f32>, Option<&[bool]>, Option<QuantGrid>)> {
    let mut out = Vec::new();
    for NamedLayer { name, params } in model.layers() {
        let q = params.quant;
        out.push((format!("{name}.weight"), &params.weight, params.mask.as_deref(), q.map(|q| q.weight)));
        if let Some(b) = &params.bias {
            out.push((format!("{name}.bias"), b, None, q.and_then(|q| q.bias)));
        }
    }
    out
}

/// File size of the uncompressed architecture of `model` with all tensors
/// stored densely.
pub fn baseline_bytes(model: &DtModel) -> Result<usize> {
    let block = config_block(model, &CompressionState::default())?;
    let template = DtModel::build(&model.config, 0)?;
    let mut total = header_bytes(block.len());
    for (name, t, _, _) in tensors(&template) {
        total += entry_overhead(&name, t.shape().len()) + 4 * t.numel();
    }
    Ok(total)
}

fn on_grid(grid: &QuantGrid, x: f32) -> bool {
    grid.decode(grid.encode(x)).to_bits() == x.to_bits()
}

/// Smallest encoding that reproduces `data` bitwise. Ties keep the earlier
/// entry of F32, QUANT, SPARSE_F32, SPARSE_QUANT.
fn choose(data: &[f32], mask: Option<&[bool]>, grid: Option<QuantGrid>) -> Encoding {
    let n = data.len();
    let mut candidates = vec![Encoding::F32];
    if let Some(g) = grid {
        if data.iter().all(|&x| on_grid(&g, x)) {
            candidates.push(Encoding::Quant(g.bits));
        }
    }
    let kept = mask.map(|m| m.iter().filter(|&&k| k).count());
    if let Some(m) = mask {
        let dropped_are_zero = data.iter().zip(m).all(|(&x, &k)| k || x.to_bits() == 0);
        if dropped_are_zero {
            candidates.push(Encoding::SparseF32);
            if let Some(g) = grid {
                if data.iter().zip(m).all(|(&x, &k)| !k || on_grid(&g, x)) {
                    candidates.push(Encoding::SparseQuant(g.bits));
                }
            }
        }
    }
    let kept = kept.unwrap_or(n);
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        if c.payload_bytes(n, kept) < best.payload_bytes(n, kept) {
            best = c;
        }
    }
    best
}

fn write_payload(out: &mut Vec<u8>, enc: Encoding, data: &[f32], mask: Option<&[bool]>, grid: Option<QuantGrid>) {
    let put_grid = |out: &mut Vec<u8>| {
        let g = grid.expect("quantized encoding has a grid");
        out.extend(g.min.to_le_bytes());
        out.extend(g.step.to_le_bytes());
        g
    };
    let bitmap = |out: &mut Vec<u8>, m: &[bool]| {
        let bits: Vec<u8> = m.iter().map(|&k| k as u8).collect();
        out.extend(pack_codes(&bits, 1));
    };
    match enc {
        Encoding::F32 => data.iter().for_each(|x| out.extend(x.to_le_bytes())),
        Encoding::Quant(b) => {
            let g = put_grid(out);
            let codes: Vec<u8> = data.iter().map(|&x| g.encode(x)).collect();
            out.extend(pack_codes(&codes, b));
        }
        Encoding::SparseF32 => {
            let m = mask.expect("sparse encoding has a mask");
            bitmap(out, m);
            data.iter().zip(m).filter(|(_, &k)| k).for_each(|(x, _)| out.extend(x.to_le_bytes()));
        }
        Encoding::SparseQuant(b) => {
            let g = put_grid(out);
            let m = mask.expect("sparse encoding has a mask");
            bitmap(out, m);
            let codes: Vec<u8> = data.iter().zip(m).filter(|(_, &k)| k).map(|(&x, _)| g.encode(x)).collect();
            out.extend(pack_codes(&codes, b));
        }
    }
}

/// Serialize `model`, choosing the smallest faithful encoding per tensor.
pub fn encode(model: &DtModel) -> Result<(Vec<u8>, SizeReport)> {
    model.validate()?;
    let block = config_block(model, &model.compression)?;
    let config_len = u32::try_from(block.len()).map_err(|_| Error::Format("config block too large".into()))?;
    let entries = tensors(model);
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(config_len.to_le_bytes());
    out.extend(&block);
    out.extend((entries.len() as u32).to_le_bytes());
    let header = out.len();
    let mut reports = Vec::with_capacity(entries.len());
    for (name, t, mask, grid) in entries {
        let start = out.len();
        let enc = choose(t.data(), mask, grid);
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend([enc.tag(), enc.bits(), t.shape().len() as u8]);
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        let payload_start = out.len();
        write_payload(&mut out, enc, t.data(), mask, grid);
        reports.push(TensorReport {
            name,
            shape: t.shape().to_vec(),
            encoding: enc,
            payload_bytes: out.len() - payload_start,
            entry_bytes: out.len() - start,
        });
    }
    let report = SizeReport { tensors: reports, header_bytes: header, total_bytes: out.len(), baseline_bytes: baseline_bytes(model)? };
    Ok((out, report))
}

/// Size accounting of [`encode`] without keeping the bytes.
pub fn size_report(model: &DtModel) -> Result<SizeReport> {
    Ok(encode(model)?.1)
}

pub fn save(model: &DtModel, path: &Path) -> Result<SizeReport> {
    let (bytes, report) = encode(model)?;
    fs::write(path, &bytes)?;
    Ok(report)
}

pub fn load(path: &Path) -> Result<DtModel> {
    decode(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_bits(self.u32(what)?))
    }
}

struct Loaded {
    tensor: Tensor<f32>,
    mask: Option<Vec<bool>>,
    grid: Option<QuantGrid>,
}

fn read_tensor(r: &mut Reader<'_>, expected: &str) -> Result<Loaded> {
    let name_len = r.u16(expected)? as usize;
    let name = r.take(name_len, expected)?;
    if name != expected.as_bytes() {
        return Err(Error::Format(format!("expected tensor {expected:?}, found {:?}", String::from_utf8_lossy(name))));
    }
    let (tag, bits, ndim) = (r.u8(expected)?, r.u8(expected)?, r.u8(expected)? as usize);
    let enc = Encoding::from_tag(tag, bits)
        .ok_or_else(|| Error::Format(format!("tensor {expected:?}: unknown encoding tag {tag} with {bits} bits")))?;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32(expected)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut grid = None;
    let mut read_grid = |r: &mut Reader<'_>, b: u8| -> Result<QuantGrid> {
        let g = QuantGrid { bits: b, min: r.f32(expected)?, step: r.f32(expected)? };
        if !g.min.is_finite() || !(g.step >= 0.0 && g.step.is_finite()) {
            return Err(Error::Format(format!("tensor {expected:?}: invalid grid {g:?}")));
        }
        grid = Some(g);
        Ok(g)
    };
    let read_mask = |r: &mut Reader<'_>| -> Result<Vec<bool>> {
        let bytes = r.take(n.div_ceil(8), expected)?;
        Ok(unpack_codes(bytes, 1, n).into_iter().map(|b| b == 1).collect())
    };
    let decode_codes = |g: QuantGrid, codes: Vec<u8>| -> Result<Vec<f32>> {
        if let Some(&c) = codes.iter().find(|&&c| c as u32 > g.levels()) {
            return Err(Error::Format(format!("tensor {expected:?}: code {c} outside {}-bit grid", g.bits)));
        }
        Ok(codes.into_iter().map(|c| g.decode(c)).collect())
    };
    let (data, mask) = match enc {
        Encoding::F32 => {
            let bytes = r.take(4 * n, expected)?;
            (bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(), None)
        }
        Encoding::Quant(b) => {
            let g = read_grid(r, b)?;
            let codes = unpack_codes(r.take(packed_len(n, b), expected)?, b, n);
            (decode_codes(g, codes)?, None)
        }
        Encoding::SparseF32 => {
            let mask = read_mask(r)?;
            let kept = mask.iter().filter(|&&k| k).count();
            let bytes = r.take(4 * kept, expected)?;
            let mut vals = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
            let data = mask.iter().map(|&k| if k { vals.next().expect("kept count") } else { 0.0 }).collect();
            (data, Some(mask))
        }
        Encoding::SparseQuant(b) => {
            let g = read_grid(r, b)?;
            let mask = read_mask(r)?;
            let kept = mask.iter().filter(|&&k| k).count();
            let codes = unpack_codes(r.take(packed_len(kept, b), expected)?, b, kept);
            let mut vals = decode_codes(g, codes)?.into_iter();
            let data = mask.iter().map(|&k| if k { vals.next().expect("kept count") } else { 0.0 }).collect();
            (data, Some(mask))
        }
    };
    Ok(Loaded { tensor: Tensor::new(shape, data)?, mask, grid })
}

/// Parse a checkpoint produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<DtModel> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "header")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u16("header")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let config_len = r.u32("header")? as usize;
    let block: ConfigBlock = serde_json::from_slice(r.take(config_len, "config block")?)
        .map_err(|e| Error::Format(format!("config block: {e}")))?;
    block.config.validate()?;
    let count = r.u32("header")? as usize;
    let template = DtModel::build(&block.config, 0)?;
    let names = layer_names(block.config.layers);
    let expected_count: usize = template.layers().iter().map(|l| 1 + l.params.bias.is_some() as usize).sum();
    if count != expected_count {
        return Err(Error::Format(format!("expected {expected_count} tensors, found {count}")));
    }
    let mut layers = Vec::with_capacity(names.len());
    for (name, tpl) in names.into_iter().zip(template.layers()) {
        let w = read_tensor(&mut r, &format!("{name}.weight"))?;
        let b = match tpl.params.bias {
            Some(_) => Some(read_tensor(&mut r, &format!("{name}.bias"))?),
            None => None,
        };
        let quant = w.grid.map(|weight| LayerQuant { weight, bias: b.as_ref().and_then(|b| b.grid) });
        let mut params: LayerParams<f32> =
            LayerParams::from_parts(tpl.params.kind, w.tensor, b.map(|b| b.tensor))?;
        if params.kind != LayerKind::Linear && (w.mask.is_some() || quant.is_some()) {
            return Err(Error::Format(format!("layer {name:?} is not compressible but is stored compressed")));
        }
        params.mask = w.mask;
        params.quant = quant;
        layers.push(NamedLayer { name, params });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    DecisionTransformer::from_layers(block.config, block.norm, block.target_return, block.compression, layers)
}
