use crate::dt::DecisionTransformer;
use crate::error::{Error, Result};
use crate::nn::{LayerQuant, QuantGrid, Tensor};
use crate::scalar::Scalar;

pub const MIN_BITS: u8 = 1;
pub const MAX_BITS: u8 = 8;

pub fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!("quantization bits must be in {MIN_BITS}..={MAX_BITS}, got {bits}")))
    }
}

/// Number of bytes holding `n` codes of `bits` bits.
pub fn packed_len(n: usize, bits: u8) -> usize {
    (n * bits as usize).div_ceil(8)
}

/// Pack codes LSB-first: code `i` occupies bits `i*b .. (i+1)*b` of the
/// little-endian bit stream.
pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mut pos = 0usize;
    for &c in codes {
        for k in 0..bits as usize {
            if (c >> k) & 1 == 1 {
                out[(pos + k) / 8] |= 1 << ((pos + k) % 8);
            }
        }
        pos += bits as usize;
    }
    out
}

pub fn unpack_codes(bytes: &[u8], bits: u8, n: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n);
    let mut pos = 0usize;
    for _ in 0..n {
        let mut c = 0u8;
        for k in 0..bits as usize {
            c |= ((bytes[(pos + k) / 8] >> ((pos + k) % 8)) & 1) << k;
        }
        out.push(c);
        pos += bits as usize;
    }
    out
}

impl QuantGrid {
    pub fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    pub fn decode(&self, code: u8) -> f32 {
        self.min + code as f32 * self.step
    }

    /// Nearest code for `x`, clamped to the grid.
    pub fn encode(&self, x: f32) -> u8 {
        if self.step == 0.0 {
            return 0;
        }
        let c = ((x as f64 - self.min as f64) / self.step as f64).round();
        c.clamp(0.0, self.levels() as f64) as u8
    }
}

fn finite_range(values: &[f32]) -> Result<(f32, f32)> {
    if values.is_empty() {
        return Err(Error::Data("cannot quantize an empty tensor".into()));
    }
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for (i, &x) in values.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::Data(format!("non-finite value {x} at index {i}")));
        }
        min = min.min(x);
        max = max.max(x);
    }
    Ok((min, max))
}

/// A tensor stored as `b`-bit codes on a per-tensor affine grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub grid: QuantGrid,
    /// Codes packed LSB-first.
    pub packed: Vec<u8>,
}

impl QuantizedTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bits(&self) -> u8 {
        self.grid.bits
    }

    pub fn codes(&self) -> Vec<u8> {
        unpack_codes(&self.packed, self.grid.bits, self.numel())
    }

    pub fn dequantize(&self) -> Tensor<f32> {
        let data = self.codes().into_iter().map(|c| self.grid.decode(c)).collect();
        Tensor::new(self.shape.clone(), data).expect("codes match shape")
    }
}

/// Quantize with `min = min(t)`, `step = (max − min)/(2^b − 1)` and codes
/// rounded half away from zero. A constant tensor gets step 0 and all-zero
/// codes.
pub fn quantize_tensor<S: Scalar>(t: &Tensor<S>, bits: u8) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    let values: Vec<f32> = t.data().iter().map(|x| x.as_f32()).collect();
    let (min, max) = finite_range(&values)?;
    let levels = ((1u32 << bits) - 1) as f64;
    let range = max as f64 - min as f64;
    let step = (range / levels) as f32;
    let codes: Vec<u8> = if range == 0.0 {
        vec![0; values.len()]
    } else {
        values
            .iter()
            .map(|&x| ((x as f64 - min as f64) * levels / range).round().clamp(0.0, levels) as u8)
            .collect()
    };
    Ok(QuantizedTensor { shape: t.shape().to_vec(), grid: QuantGrid { bits, min, step }, packed: pack_codes(&codes, bits) })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor<f32> {
    q.dequantize()
}

/// Replace `t` by its dequantized grid values, returning the grid.
fn fake_quantize<S: Scalar>(t: &mut Tensor<S>, bits: u8, mask: Option<&[bool]>) -> Result<QuantGrid> {
    let q = quantize_tensor(t, bits)?;
    let codes = q.codes();
    for (i, (x, c)) in t.data_mut().iter_mut().zip(codes).enumerate() {
        *x = if mask.is_some_and(|m| !m[i]) { S::zero() } else { S::from_f64_lossy(q.grid.decode(c) as f64) };
    }
    Ok(q.grid)
}

/// Fake-quantize every compression-eligible weight and bias to `bits`.
/// Masked-out weights stay exactly zero; other layers are untouched.
pub fn quantize_model<S: Scalar>(model: &DecisionTransformer<S>, bits: u8) -> Result<DecisionTransformer<S>> {
    check_bits(bits)?;
    let mut out = model.clone();
    let mut any = false;
    for layer in out.layers_mut() {
        let p = &mut layer.params;
        if !p.eligible() {
            continue;
        }
        any = true;
        let weight = fake_quantize(&mut p.weight, bits, p.mask.as_deref())?;
        let bias = match p.bias.as_mut() {
            Some(b) => Some(fake_quantize(b, bits, None)?),
            None => None,
        };
        p.quant = Some(LayerQuant { weight, bias });
    }
    if !any {
        return Err(Error::Contract("model has no compression-eligible layers".into()));
    }
    Ok(out)
}
