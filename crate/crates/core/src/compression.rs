//! Size-budgeted compression of fields: parameter budgets, rate and grid sizing, a block
//! fixed-rate quantizer, a tensor-product cubic B-spline fit and the RWC1 container.
//!
//! A parameter is 32 bits. The quantizer stores `ceil(rate)` bits per value plus an f32
//! minimum and maximum per block of 4^d values, so its stored count can exceed the budget by
//! [`quantizer_slack`] parameters: one bit per value from rounding the rate up, two
//! parameters per block header, and one for padding the bitstream. A zero rate stores
//! nothing and decodes to zeros. The B-spline codec stores one f32 per control point; its
//! slack comes from rounding grid dims and clamping them to at least four per axis.

use std::path::Path;

use bitvec::prelude::*;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ScalarGrid;

pub const RWC_MAGIC: &[u8; 4] = b"RWC1";
const ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionBudget {
    pub tau: f64,
    pub n: usize,
    pub p: usize,
}

pub fn budget(tau: f64, n: usize) -> Result<CompressionBudget> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidParameter(format!("tau must lie in [0, 1] (got {tau})")));
    }
    // The guard keeps products such as 0.1 * 1000 = 99.99999 from losing a parameter.
    let p = ((tau * n as f64) * (1.0 + 1e-12)).floor() as usize;
    Ok(CompressionBudget { tau, n, p: p.min(n) })
}

/// Average bits per value allowed by `p` 32-bit parameters over `n` values.
pub fn zfp_rate(p: usize, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidParameter("cannot size a rate for zero values".into()));
    }
    Ok(32.0 * p as f64 / n as f64)
}

fn raw_dims(extents: &[f64], p: usize) -> Result<Vec<f64>> {
    if extents.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::InvalidParameter(format!("extents must be positive (got {extents:?})")));
    }
    let p = p as f64;
    match extents {
        [_] => Ok(vec![p]),
        [e0, e1] => {
            let g1 = (p * e1 / e0).sqrt();
            Ok(vec![e0 / e1 * g1, g1])
        }
        [e0, e1, e2] => {
            let g2 = (p * e2 * e2 / (e0 * e1)).cbrt();
            Ok(vec![e0 / e2 * g2, e1 / e2 * g2, g2])
        }
        _ => Err(Error::InvalidParameter("extents must have 1, 2 or 3 entries".into())),
    }
}

/// Control grid dims whose aspect ratio follows the physical extents and whose product is
/// close to `p`. Each dim is at least the spline order.
pub fn bspline_dims(extents: &[f64], p: usize) -> Result<Vec<usize>> {
    Ok(raw_dims(extents, p)?.into_iter().map(|x| (x.round() as usize).max(ORDER)).collect())
}

/// Control points the B-spline codec may store above the budget: each rounded dim exceeds
/// its unrounded value by at most one half, or is clamped up to the spline order.
pub fn bspline_slack(extents: &[f64], p: usize) -> Result<usize> {
    let bound: f64 = raw_dims(extents, p)?.iter().map(|&x| (x + 0.5).max(ORDER as f64)).product();
    Ok((bound.ceil() as usize).saturating_sub(p))
}

/// Hidden-layer width of an `l`-layer fully connected network on `d` inputs with about
/// `p` parameters.
pub fn neural_width(l: usize, d: usize, p: usize) -> Result<usize> {
    if l < 3 {
        return Err(Error::InvalidParameter(format!("need at least 3 layers (got {l})")));
    }
    let a = (l - 2) as f64;
    let b = (d + l) as f64;
    let c = 1.0 - p as f64;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Err(Error::InvalidParameter(format!("negative discriminant for p = {p}")));
    }
    let k = ((-b + disc.sqrt()) / (2.0 * a)).round();
    Ok(k.max(0.0) as usize)
}

/// Parameter count of the network sized by [`neural_width`].
pub fn neural_param_count(l: usize, d: usize, k: usize) -> usize {
    d * k + k + (l - 2) * (k * k + k) + k + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Codec {
    Quantizer,
    Bspline,
}

impl Codec {
    fn tag(self) -> u8 {
        match self {
            Codec::Quantizer => 0,
            Codec::Bspline => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Quantized { bits: u8, data: Vec<u8> },
    Bspline { g: Vec<usize>, control: Vec<f32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedField {
    pub dims: Vec<usize>,
    pub tau: f64,
    pub p: usize,
    pub payload: Payload,
    /// Region membership (pair id) of every original vertex.
    pub membership: Vec<u32>,
}

fn f32_below(x: f64) -> f32 {
    let mut y = x as f32;
    if y as f64 > x {
        y = f32::from_bits(if y > 0.0 { y.to_bits() - 1 } else if y == 0.0 { 0x8000_0001 } else { y.to_bits() + 1 });
    }
    y
}

fn f32_above(x: f64) -> f32 {
    -f32_below(-x)
}

/// Row-major blocks of edge 4 over a padded shape, each as a list of flat indices.
fn blocks(shape: [usize; 3]) -> Vec<Vec<usize>> {
    let nb = shape.map(|s| s.div_ceil(4));
    let mut out = Vec::with_capacity(nb.iter().product());
    for b0 in 0..nb[0] {
        for b1 in 0..nb[1] {
            for b2 in 0..nb[2] {
                let mut idx = Vec::with_capacity(64);
                for i in b0 * 4..((b0 + 1) * 4).min(shape[0]) {
                    for j in b1 * 4..((b1 + 1) * 4).min(shape[1]) {
                        for k in b2 * 4..((b2 + 1) * 4).min(shape[2]) {
                            idx.push((i * shape[1] + j) * shape[2] + k);
                        }
                    }
                }
                out.push(idx);
            }
        }
    }
    out
}

fn block_count(shape: [usize; 3]) -> usize {
    shape.iter().map(|s| s.div_ceil(4)).product()
}

/// Quantizer parameters allowed above the budget for a grid of the given dims.
pub fn quantizer_slack(grid: &ScalarGrid) -> usize {
    grid.len().div_ceil(32) + 2 * block_count(grid.shape()) + 1
}

/// Block uniform quantization at `ceil(rate)` bits per value.
pub fn quantize(grid: &ScalarGrid, rate: f64) -> Result<Payload> {
    if !(0.0..=32.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!("rate must lie in [0, 32] (got {rate})")));
    }
    let bits = rate.ceil() as u8;
    let mut bv: BitVec<u8, Lsb0> = BitVec::new();
    if bits == 32 {
        for &x in grid.values() {
            bv.extend_from_bitslice((x as f32).to_bits().view_bits::<Lsb0>());
        }
    } else if bits > 0 {
        let levels = ((1u64 << bits) - 1) as f64;
        for block in blocks(grid.shape()) {
            let lo = block.iter().map(|&v| grid.value(v)).fold(f64::INFINITY, f64::min);
            let hi = block.iter().map(|&v| grid.value(v)).fold(f64::NEG_INFINITY, f64::max);
            let (lo, hi) = (f32_below(lo), f32_above(hi));
            bv.extend_from_bitslice(lo.to_bits().view_bits::<Lsb0>());
            bv.extend_from_bitslice(hi.to_bits().view_bits::<Lsb0>());
            let span = hi as f64 - lo as f64;
            for &v in &block {
                let code = if span > 0.0 {
                    (((grid.value(v) - lo as f64) / span) * levels).round().clamp(0.0, levels) as u32
                } else {
                    0
                };
                bv.extend_from_bitslice(&code.view_bits::<Lsb0>()[..bits as usize]);
            }
        }
    }
    Ok(Payload::Quantized {
        bits,
        data: bv.into_vec(),
    })
}

fn read_u32(bits: &BitSlice<u8, Lsb0>, at: &mut usize, width: usize) -> Result<u32> {
    let end = *at + width;
    if end > bits.len() {
        return Err(Error::Format {
            offset: *at / 8,
            msg: "quantized stream truncated".into(),
        });
    }
    let v = bits[*at..end].load_le::<u32>();
    *at = end;
    Ok(v)
}

pub fn dequantize(dims: &[usize], bits: u8, data: &[u8]) -> Result<ScalarGrid> {
    let mut grid = ScalarGrid::constant(dims.to_vec(), 0.0)?;
    let stream = data.view_bits::<Lsb0>();
    let mut at = 0;
    let mut values = vec![0.0; grid.len()];
    if bits == 32 {
        for x in values.iter_mut() {
            *x = f32::from_bits(read_u32(stream, &mut at, 32)?) as f64;
        }
    } else if bits > 0 {
        let levels = ((1u64 << bits) - 1) as f64;
        for block in blocks(grid.shape()) {
            let lo = f32::from_bits(read_u32(stream, &mut at, 32)?) as f64;
            let hi = f32::from_bits(read_u32(stream, &mut at, 32)?) as f64;
            for &v in &block {
                let code = read_u32(stream, &mut at, bits as usize)? as f64;
                values[v] = if hi > lo { lo + (hi - lo) * code / levels } else { lo };
            }
        }
    }
    grid = grid.with_values(values)?;
    Ok(grid)
}

/// Clamped uniform cubic B-spline basis on `g` control points sampled at `n` equispaced
/// parameters, as an `n x g` matrix.
fn basis(n: usize, g: usize) -> DMatrix<f64> {
    let deg = ORDER - 1;
    let inner = g - deg;
    let mut knots = vec![0.0; deg];
    knots.extend((0..=inner).map(|i| i as f64 / inner as f64));
    knots.extend(std::iter::repeat_n(1.0, deg));
    let mut m = DMatrix::zeros(n, g);
    for s in 0..n {
        let u = if n > 1 { s as f64 / (n - 1) as f64 } else { 0.0 };
        // Knot span containing u, with u = 1 folded into the last span.
        let span = (((u * inner as f64).floor() as usize).min(inner - 1)) + deg;
        let mut nb = [0.0; ORDER];
        nb[0] = 1.0;
        let mut left = [0.0; ORDER];
        let mut right = [0.0; ORDER];
        for j in 1..=deg {
            left[j] = u - knots[span + 1 - j];
            right[j] = knots[span + j] - u;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = nb[r] / (right[r + 1] + left[j - r]);
                nb[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            nb[j] = saved;
        }
        for (r, &w) in nb.iter().enumerate() {
            m[(s, span - deg + r)] = w;
        }
    }
    m
}

/// Applies `m` (out x in) along `axis` of row-major data with the given padded shape.
fn apply_axis(data: &[f64], shape: [usize; 3], axis: usize, m: &DMatrix<f64>) -> (Vec<f64>, [usize; 3]) {
    let mut out_shape = shape;
    out_shape[axis] = m.nrows();
    let mut out = vec![0.0; out_shape.iter().product()];
    let stride_in: [usize; 3] = [shape[1] * shape[2], shape[2], 1];
    let stride_out: [usize; 3] = [out_shape[1] * out_shape[2], out_shape[2], 1];
    let others: Vec<usize> = (0..3).filter(|&k| k != axis).collect();
    for a in 0..shape[others[0]] {
        for b in 0..shape[others[1]] {
            let base_in = a * stride_in[others[0]] + b * stride_in[others[1]];
            let base_out = a * stride_out[others[0]] + b * stride_out[others[1]];
            for r in 0..m.nrows() {
                let mut acc = 0.0;
                for c in 0..m.ncols() {
                    acc += m[(r, c)] * data[base_in + c * stride_in[axis]];
                }
                out[base_out + r * stride_out[axis]] = acc;
            }
        }
    }
    (out, out_shape)
}

fn padded(dims: &[usize]) -> [usize; 3] {
    let mut s = [1; 3];
    s[3 - dims.len()..].copy_from_slice(dims);
    s
}

/// Least-squares control grid of shape `g` for `grid`.
pub fn bspline_fit(grid: &ScalarGrid, g: &[usize]) -> Result<Vec<f64>> {
    let dims = grid.dims();
    if g.len() != dims.len() {
        return Err(Error::Mismatch(format!("{}D control grid for a {}D field", g.len(), dims.len())));
    }
    for (k, (&gk, &nk)) in g.iter().zip(dims).enumerate() {
        if gk < ORDER || gk > nk {
            return Err(Error::InvalidParameter(format!(
                "axis {k}: {gk} control points for {nk} samples is underdetermined or below the spline order"
            )));
        }
    }
    let off = 3 - dims.len();
    let mut data = grid.values().to_vec();
    let mut shape = grid.shape();
    for (k, &gk) in g.iter().enumerate() {
        let b = basis(dims[k], gk);
        let bt = b.transpose();
        let normal = &bt * &b;
        let chol = normal.cholesky().ok_or_else(|| {
            Error::InvalidParameter(format!("axis {k}: singular normal equations for {gk} control points"))
        })?;
        let proj = chol.solve(&bt);
        (data, shape) = apply_axis(&data, shape, off + k, &proj);
    }
    Ok(data)
}

pub fn bspline_eval(dims: &[usize], g: &[usize], control: &[f64]) -> Result<ScalarGrid> {
    if g.len() != dims.len() || control.len() != g.iter().product::<usize>() {
        return Err(Error::Mismatch("control grid does not match dims".into()));
    }
    let off = 3 - dims.len();
    let mut data = control.to_vec();
    let mut shape = padded(g);
    for (k, &gk) in g.iter().enumerate() {
        if gk < ORDER {
            return Err(Error::InvalidParameter(format!("axis {k}: fewer control points than the spline order")));
        }
        (data, shape) = apply_axis(&data, shape, off + k, &basis(dims[k], gk));
    }
    ScalarGrid::new(dims.to_vec(), data)
}

impl CompressedField {
    pub fn codec(&self) -> Codec {
        match self.payload {
            Payload::Quantized { .. } => Codec::Quantizer,
            Payload::Bspline { .. } => Codec::Bspline,
        }
    }

    /// Stored codec parameters in 32-bit units.
    pub fn parameter_count(&self) -> usize {
        match &self.payload {
            Payload::Quantized { data, .. } => data.len().div_ceil(4),
            Payload::Bspline { control, .. } => control.len(),
        }
    }

    pub fn decompress(&self) -> Result<ScalarGrid> {
        match &self.payload {
            Payload::Quantized { bits, data } => dequantize(&self.dims, *bits, data),
            Payload::Bspline { g, control } => {
                let c: Vec<f64> = control.iter().map(|&x| x as f64).collect();
                bspline_eval(&self.dims, g, &c)
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(RWC_MAGIC);
        out.push(self.codec().tag());
        out.extend_from_slice(&self.tau.to_le_bytes());
        out.extend_from_slice(&(self.p as u64).to_le_bytes());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.payload {
            Payload::Quantized { bits, data } => {
                out.push(*bits);
                out.extend_from_slice(&(data.len() as u64).to_le_bytes());
                out.extend_from_slice(data);
            }
            Payload::Bspline { g, control } => {
                for &x in g {
                    out.extend_from_slice(&(x as u32).to_le_bytes());
                }
                for &c in control {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
        }
        for &m in &self.membership {
            out.extend_from_slice(&m.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != RWC_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic".into(),
            });
        }
        let tag = r.u8()?;
        let tau = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let p = r.u64()? as usize;
        let nd = r.u8()? as usize;
        if !(1..=3).contains(&nd) {
            return Err(r.err("dimension count must be 1, 2 or 3"));
        }
        let dims: Vec<usize> = (0..nd).map(|_| r.u32().map(|x| x as usize)).collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        let payload = match tag {
            0 => {
                let bits = r.u8()?;
                if bits > 32 {
                    return Err(r.err("bit width above 32"));
                }
                let len = r.u64()? as usize;
                Payload::Quantized {
                    bits,
                    data: r.take(len)?.to_vec(),
                }
            }
            1 => {
                let g: Vec<usize> = (0..nd).map(|_| r.u32().map(|x| x as usize)).collect::<Result<_>>()?;
                let count = g.iter().product();
                let control = (0..count)
                    .map(|_| r.take(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())))
                    .collect::<Result<_>>()?;
                Payload::Bspline { g, control }
            }
            _ => return Err(r.err("unknown codec tag")),
        };
        if bytes.len() - r.at != 4 * n {
            return Err(r.err("membership length mismatch"));
        }
        let membership = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
        Ok(Self {
            dims,
            tau,
            p,
            payload,
            membership,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Format {
            offset: self.at,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Compresses `grid` to a fraction `tau` of its value count and attaches `membership`.
pub fn compress(grid: &ScalarGrid, membership: &[usize], codec: Codec, tau: f64) -> Result<CompressedField> {
    if membership.len() != grid.len() {
        return Err(Error::Mismatch(format!(
            "membership covers {} vertices, grid has {}",
            membership.len(),
            grid.len()
        )));
    }
    let b = budget(tau, grid.len())?;
    let payload = match codec {
        Codec::Quantizer => quantize(grid, zfp_rate(b.p, b.n)?)?,
        Codec::Bspline => {
            let extents: Vec<f64> = grid
                .dims()
                .iter()
                .zip(grid.spacing())
                .map(|(&d, &s)| (d.max(2) - 1) as f64 * s)
                .collect();
            let g: Vec<usize> = bspline_dims(&extents, b.p.max(1))?
                .into_iter()
                .zip(grid.dims())
                .map(|(g, &d)| g.min(d))
                .collect();
            let control = bspline_fit(grid, &g)?;
            Payload::Bspline {
                g,
                control: control.into_iter().map(|x| x as f32).collect(),
            }
        }
    };
    Ok(CompressedField {
        dims: grid.dims().to_vec(),
        tau,
        p: b.p,
        payload,
        membership: membership.iter().map(|&m| m as u32).collect(),
    })
}
