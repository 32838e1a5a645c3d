//! Quantized CNN inference with every dot product evaluated on simulated
//! 8-cell rows.
//!
//! Operands are split into bit planes: each (input bit, weight bit) pair of
//! an 8-element segment is one binary MAC on a row, decoded to an integer
//! and recombined by shift-add. Partial sums across segments are digital.
//! Weights are signed and stored offset-binary; activations are unsigned.
//!
//! # Fixture formats
//!
//! Tensor container (`fecim-tensors 1`), UTF-8 text:
//!
//! ```text
//! fecim-tensors 1
//! <name> <dim0> <dim1> ...
//! <value> <value> ...          (row-major, whitespace separated)
//! ...
//! ```
//!
//! Image container (`fecim-images 1`):
//!
//! ```text
//! fecim-images 1
//! <count> <rows> <cols> <max_value>
//! <label> <pixel> <pixel> ...  (one image per line, rows*cols pixels)
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{accumulation_energy, CellOutput, CellResponse, RowConfig};
use crate::device::{sample_vth_offsets, Temperature};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &str = "fecim-tensors 1";
pub const IMAGE_MAGIC: &str = "fecim-images 1";

/// Trained weights of the bundled digit network.
pub const DIGITS_CNN: &str = include_str!("../fixtures/digits_cnn.tensors");
/// 500 held-out 8x8 digit images.
pub const DIGITS_TEST: &str = include_str!("../fixtures/digits_test.images");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn parse_tensors(text: &str) -> Result<Vec<Tensor>> {
    let what = "tensor file";
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(TENSOR_MAGIC) {
        return Err(Error::format(what, format!("missing `{TENSOR_MAGIC}` header")));
    }
    let mut out = Vec::new();
    while let Some(header) = lines.next() {
        let mut parts = header.split_whitespace();
        let name = parts.next().unwrap_or_default().to_string();
        let shape: Vec<usize> = parts
            .map(|d| {
                d.parse()
                    .map_err(|_| Error::format(what, format!("bad dimension `{d}` for {name}")))
            })
            .collect::<Result<_>>()?;
        let body = lines
            .next()
            .ok_or_else(|| Error::format(what, format!("missing values for {name}")))?;
        let data: Vec<f64> = body
            .split_whitespace()
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::format(what, format!("bad value `{v}` in {name}")))
            })
            .collect::<Result<_>>()?;
        if data.len() != shape.iter().product::<usize>() || data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(
                what,
                format!("{name}: value count does not match shape {shape:?}"),
            ));
        }
        out.push(Tensor { name, shape, data });
    }
    Ok(out)
}

pub fn format_tensors(tensors: &[Tensor]) -> String {
    let mut s = format!("{TENSOR_MAGIC}\n");
    for t in tensors {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        let vals: Vec<String> = t.data.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&format!("{} {}\n{}\n", t.name, dims.join(" "), vals.join(" ")));
    }
    s
}

/// Labelled grayscale images with integer pixels in `0..=max_value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub rows: usize,
    pub cols: usize,
    pub max_value: u32,
    pub images: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` images.
    pub fn truncated(mut self, n: usize) -> Self {
        self.images.truncate(n);
        self.labels.truncate(n);
        self
    }
}

pub fn parse_images(text: &str) -> Result<Dataset> {
    let what = "image file";
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(IMAGE_MAGIC) {
        return Err(Error::format(what, format!("missing `{IMAGE_MAGIC}` header")));
    }
    let header: Vec<usize> = lines
        .next()
        .ok_or_else(|| Error::format(what, "missing size line"))?
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| Error::format(what, "bad size line")))
        .collect::<Result<_>>()?;
    let [count, rows, cols, max_value] = header[..] else {
        return Err(Error::format(what, "size line must be `count rows cols max_value`"));
    };
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for line in lines {
        let vals: Vec<u32> = line
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| Error::format(what, format!("bad pixel `{v}`"))))
            .collect::<Result<_>>()?;
        if vals.len() != rows * cols + 1 || vals[1..].iter().any(|&p| p as usize > max_value) {
            return Err(Error::format(what, format!("image {} is malformed", images.len())));
        }
        labels.push(vals[0] as usize);
        images.push(vals[1..].to_vec());
    }
    if images.len() != count {
        return Err(Error::format(
            what,
            format!("expected {count} images, found {}", images.len()),
        ));
    }
    Ok(Dataset {
        rows,
        cols,
        max_value: max_value as u32,
        images,
        labels,
    })
}

pub fn format_images(data: &Dataset) -> String {
    let mut s = format!(
        "{IMAGE_MAGIC}\n{} {} {} {}\n",
        data.len(),
        data.rows,
        data.cols,
        data.max_value
    );
    for (img, label) in data.images.iter().zip(&data.labels) {
        s.push_str(&label.to_string());
        for p in img {
            s.push_str(&format!(" {p}"));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Stride 1, square kernel, zero padding. Weights `[out][in][k][k]`.
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        padding: usize,
    },
    /// Weights `[outputs][inputs]`; the input is flattened channel-major.
    Fc {
        inputs: usize,
        outputs: usize,
    },
    MaxPool {
        size: usize,
    },
    Relu,
    /// Training-only; inert at inference.
    Dropout,
}

impl LayerKind {
    fn weight_count(&self) -> usize {
        match *self {
            LayerKind::Conv {
                in_ch, out_ch, kernel, ..
            } => out_ch * in_ch * kernel * kernel,
            LayerKind::Fc { inputs, outputs } => inputs * outputs,
            _ => 0,
        }
    }

    /// Output shape for a `[c, h, w]` input.
    fn output_shape(&self, [c, h, w]: [usize; 3]) -> Result<[usize; 3]> {
        let bad = |msg: String| Err(Error::invalid("network", msg));
        match *self {
            LayerKind::Conv {
                in_ch,
                out_ch,
                kernel,
                padding,
            } => {
                if c != in_ch || h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return bad(format!("conv expects {in_ch} channels, got [{c}, {h}, {w}]"));
                }
                Ok([out_ch, h + 2 * padding - kernel + 1, w + 2 * padding - kernel + 1])
            }
            LayerKind::Fc { inputs, outputs } => {
                if c * h * w != inputs {
                    return bad(format!("fc expects {inputs} inputs, got {}", c * h * w));
                }
                Ok([outputs, 1, 1])
            }
            LayerKind::MaxPool { size } => {
                if size == 0 || h % size != 0 || w % size != 0 {
                    return bad(format!("pool {size} does not tile [{h}, {w}]"));
                }
                Ok([c, h / size, w / size])
            }
            LayerKind::Relu | LayerKind::Dropout => Ok([c, h, w]),
        }
    }
}

/// A layer with real-valued weights. `act_range` is the clip level used to
/// requantize a ReLU output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealLayer {
    pub kind: LayerKind,
    pub weights: Vec<f64>,
    pub act_range: Option<f64>,
}

/// Real-valued network. Inputs are pixels scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealNetwork {
    pub input_shape: [usize; 3],
    pub layers: Vec<RealLayer>,
}

impl RealNetwork {
    /// conv(1→8) relu pool → conv(8→16) relu pool → fc(64→10) on 8x8 images.
    pub fn digits_cnn(tensors: &[Tensor]) -> Result<Self> {
        let get = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::format("tensor file", format!("missing tensor `{name}`")))?;
            if t.shape != shape {
                return Err(Error::format(
                    "tensor file",
                    format!("`{name}` has shape {:?}, expected {shape:?}", t.shape),
                ));
            }
            Ok(t.data.clone())
        };
        let layer = |kind, weights| RealLayer {
            kind,
            weights,
            act_range: None,
        };
        let relu = |range: Vec<f64>| RealLayer {
            kind: LayerKind::Relu,
            weights: Vec::new(),
            act_range: Some(range[0]),
        };
        let conv = |in_ch, out_ch| LayerKind::Conv {
            in_ch,
            out_ch,
            kernel: 3,
            padding: 1,
        };
        let net = Self {
            input_shape: [1, 8, 8],
            layers: vec![
                layer(conv(1, 8), get("conv1", &[8, 1, 3, 3])?),
                relu(get("conv1.act", &[1])?),
                layer(LayerKind::MaxPool { size: 2 }, Vec::new()),
                layer(conv(8, 16), get("conv2", &[16, 8, 3, 3])?),
                relu(get("conv2.act", &[1])?),
                layer(LayerKind::MaxPool { size: 2 }, Vec::new()),
                layer(LayerKind::Dropout, Vec::new()),
                layer(
                    LayerKind::Fc {
                        inputs: 64,
                        outputs: 10,
                    },
                    get("fc", &[10, 64])?,
                ),
            ],
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let mut shape = self.input_shape;
        for l in &self.layers {
            if l.weights.len() != l.kind.weight_count() {
                return Err(Error::invalid("network", "weight count does not match layer shape"));
            }
            if l.weights.iter().any(|w| !w.is_finite()) {
                return Err(Error::invalid("network", "weights must be finite"));
            }
            if l.kind == LayerKind::Relu && !l.act_range.is_some_and(|r| r > 0.0) {
                return Err(Error::invalid("network", "relu needs a positive activation range"));
            }
            shape = l.kind.output_shape(shape)?;
        }
        Ok(())
    }

    /// Floating-point forward pass; returns the logits.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut shape = self.input_shape;
        let mut x = input.to_vec();
        for l in &self.layers {
            let next = l.kind.output_shape(shape).expect("validated network");
            x = match l.kind {
                LayerKind::Conv { .. } | LayerKind::Fc { .. } => {
                    let neurons = neuron_inputs(l.kind, shape);
                    let per = l.weights.len() / next[0];
                    let mut out = vec![0.0; next.iter().product()];
                    for (o, idx) in neurons.iter().enumerate() {
                        let f = o / (next[1] * next[2]);
                        let w = &l.weights[f * per..(f + 1) * per];
                        out[o] = idx.iter().zip(w).map(|(i, w)| i.map_or(0.0, |i| x[i]) * w).sum();
                    }
                    out
                }
                LayerKind::MaxPool { size } => max_pool(&x, shape, size, f64::max, f64::NEG_INFINITY),
                LayerKind::Relu => x.iter().map(|v| v.max(0.0)).collect(),
                LayerKind::Dropout => x,
            };
            shape = next;
        }
        x
    }
}

/// For every output element of a conv/fc layer (channel-major order), the
/// flat input index feeding each weight, `None` for zero padding.
fn neuron_inputs(kind: LayerKind, [c, h, w]: [usize; 3]) -> Vec<Vec<Option<usize>>> {
    match kind {
        LayerKind::Conv {
            out_ch,
            kernel,
            padding,
            ..
        } => {
            let (oh, ow) = (h + 2 * padding - kernel + 1, w + 2 * padding - kernel + 1);
            let mut all = Vec::with_capacity(out_ch * oh * ow);
            for _ in 0..out_ch {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut idx = Vec::with_capacity(c * kernel * kernel);
                        for ch in 0..c {
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let (iy, ix) = (
                                        (y + ky) as isize - padding as isize,
                                        (x + kx) as isize - padding as isize,
                                    );
                                    let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                                    idx.push(inside.then(|| (ch * h + iy as usize) * w + ix as usize));
                                }
                            }
                        }
                        all.push(idx);
                    }
                }
            }
            all
        }
        LayerKind::Fc { outputs, .. } => vec![(0..c * h * w).map(Some).collect(); outputs],
        _ => Vec::new(),
    }
}

fn max_pool<T: Copy>(x: &[T], [c, h, w]: [usize; 3], size: usize, max: impl Fn(T, T) -> T, init: T) -> Vec<T> {
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut m = init;
                for dy in 0..size {
                    for dx in 0..size {
                        m = max(m, x[(ch * h + y * size + dy) * w + xo * size + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Largest magnitude of a `bits`-wide symmetric signed code.
pub fn max_code(bits: u32) -> i32 {
    if bits <= 1 {
        1
    } else {
        (1 << (bits - 1)) - 1
    }
}

/// Symmetric per-tensor quantization to `bits` bits. One bit maps to
/// {−1, +1}. Returns the integer codes and the scale (value per code).
pub fn quantize_weights(w: &[f64], bits: u32) -> (Vec<i32>, f64) {
    let max_abs = w.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return (vec![0; w.len()], 1.0);
    }
    if bits <= 1 {
        let q = w.iter().map(|&v| if v < 0.0 { -1 } else { 1 }).collect();
        return (q, max_abs);
    }
    let m = max_code(bits);
    let scale = max_abs / m as f64;
    let q = w.iter().map(|&v| ((v / scale).round() as i32).clamp(-m, m)).collect();
    (q, scale)
}

/// A quantized layer. For weight layers `scale` is the weight scale; for
/// ReLU it is the output activation scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantLayer {
    pub kind: LayerKind,
    pub weights: Vec<i32>,
    pub scale: f64,
}

/// Integer network: weights in `weight_bits` signed codes, activations in
/// `activation_bits` unsigned codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: [usize; 3],
    pub layers: Vec<QuantLayer>,
    pub weight_bits: u32,
    pub activation_bits: u32,
}

pub fn quantize(net: &RealNetwork, weight_bits: u32, activation_bits: u32) -> Result<NetworkSpec> {
    if !(1..=16).contains(&weight_bits) || !(1..=16).contains(&activation_bits) {
        return Err(Error::invalid("bits", "bit widths must lie in 1..=16"));
    }
    net.validate()?;
    let a_max = ((1u32 << activation_bits) - 1) as f64;
    let layers = net
        .layers
        .iter()
        .map(|l| match l.kind {
            LayerKind::Conv { .. } | LayerKind::Fc { .. } => {
                let (weights, scale) = quantize_weights(&l.weights, weight_bits);
                QuantLayer {
                    kind: l.kind,
                    weights,
                    scale,
                }
            }
            LayerKind::Relu => QuantLayer {
                kind: l.kind,
                weights: Vec::new(),
                scale: l.act_range.expect("validated") / a_max,
            },
            _ => QuantLayer {
                kind: l.kind,
                weights: Vec::new(),
                scale: 1.0,
            },
        })
        .collect();
    let spec = NetworkSpec {
        input_shape: net.input_shape,
        layers,
        weight_bits,
        activation_bits,
    };
    spec.validate()?;
    Ok(spec)
}

impl NetworkSpec {
    /// Shapes chain, and every weight layer reads requantized activations.
    pub fn validate(&self) -> Result<()> {
        let mut shape = self.input_shape;
        let mut quantized = true;
        let m = max_code(self.weight_bits);
        for l in &self.layers {
            shape = l.kind.output_shape(shape)?;
            match l.kind {
                LayerKind::Conv { .. } | LayerKind::Fc { .. } => {
                    if !quantized {
                        return Err(Error::invalid(
                            "network",
                            "weight layer must follow the input or a relu",
                        ));
                    }
                    if l.weights.len() != l.kind.weight_count() || l.weights.iter().any(|w| w.abs() > m) {
                        return Err(Error::invalid("network", "weights do not fit the layer or bit width"));
                    }
                    quantized = false;
                }
                LayerKind::Relu => quantized = true,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn input_scale(&self) -> f64 {
        1.0 / ((1u32 << self.activation_bits) - 1) as f64
    }

    /// Pixel codes of an image on the activation grid.
    pub fn quantize_image(&self, pixels: &[u32], max_value: u32) -> Vec<i64> {
        let a_max = ((1u32 << self.activation_bits) - 1) as f64;
        pixels
            .iter()
            .map(|&p| (p as f64 * a_max / max_value as f64).round() as i64)
            .collect()
    }

    pub fn weight_coding(&self) -> WeightCoding {
        WeightCoding::Signed(self.weight_bits)
    }

    fn weight_layers(&self) -> impl Iterator<Item = (usize, &QuantLayer)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Conv { .. } | LayerKind::Fc { .. }))
    }
}

/// How weight codes map to stored bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightCoding {
    /// Plain unsigned `bits`-bit codes.
    Unsigned(u32),
    /// Signed codes stored offset-binary: `w = u - 2^(bits-1)`; for one bit
    /// `w = 2u - 1`.
    Signed(u32),
}

impl WeightCoding {
    /// Stored bit planes per weight.
    pub fn planes(&self) -> u32 {
        match *self {
            WeightCoding::Unsigned(b) | WeightCoding::Signed(b) => b,
        }
    }

    fn encode(&self, w: i32) -> Result<u32> {
        let bad = || Err(Error::invalid("weights", format!("{w} does not fit {self:?}")));
        match *self {
            WeightCoding::Unsigned(b) => {
                if w < 0 || (w as i64) >= 1i64 << b {
                    return bad();
                }
                Ok(w as u32)
            }
            WeightCoding::Signed(1) => match w {
                -1 => Ok(0),
                1 => Ok(1),
                _ => bad(),
            },
            WeightCoding::Signed(b) => {
                if w.abs() > max_code(b) {
                    return bad();
                }
                Ok((w + (1 << (b - 1))) as u32)
            }
        }
    }

    /// `(a, c)` with `w = a u + c`.
    fn affine(&self) -> (i64, i64) {
        match *self {
            WeightCoding::Unsigned(_) => (1, 0),
            WeightCoding::Signed(1) => (2, -1),
            WeightCoding::Signed(b) => (1, -(1i64 << (b - 1))),
        }
    }
}

/// Read outputs of the physical cells backing one weight vector, indexed by
/// input bit. Layout: `plane * padded_len + element`, where `padded_len`
/// rounds the vector length up to whole rows. Padding cells store 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellArray {
    pub padded_len: usize,
    pub cells: Vec<[CellOutput; 2]>,
}

fn padded_len(len: usize, n: usize) -> usize {
    len.div_ceil(n).max(1) * n
}

/// Programs the cells for `weights`: each stored bit selects the matching
/// half of its cell response.
pub fn program_cells(
    weights: &[i32],
    coding: WeightCoding,
    cfg: &RowConfig,
    responses: &mut dyn FnMut() -> Result<CellResponse>,
) -> Result<CellArray> {
    let n = cfg.n_cells();
    let padded = padded_len(weights.len(), n);
    let codes: Vec<u32> = weights.iter().map(|&w| coding.encode(w)).collect::<Result<_>>()?;
    let mut cells = Vec::with_capacity(coding.planes() as usize * padded);
    for k in 0..coding.planes() {
        for e in 0..padded {
            let stored = codes.get(e).is_some_and(|u| (u >> k) & 1 == 1);
            let r = responses()?;
            cells.push([r.get(false, stored), r.get(true, stored)]);
        }
    }
    Ok(CellArray {
        padded_len: padded,
        cells,
    })
}

/// Outcome of one hardware dot product.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HwDot {
    pub value: i64,
    pub energy: f64,
    pub row_macs: usize,
    /// Rows whose decoded count differs from the true popcount.
    pub decode_errors: usize,
}

/// Bit-serial dot product of unsigned `inputs` (`input_bits` wide) with the
/// weights programmed into `cells`. `weights` supplies the ideal bits used
/// only to count decode errors; the analog path reads `cells`.
pub fn hw_dot(
    inputs: &[u32],
    weights: &[i32],
    coding: WeightCoding,
    input_bits: u32,
    cells: &CellArray,
    cfg: &RowConfig,
) -> Result<HwDot> {
    let n = cfg.n_cells();
    if inputs.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: weights.len(),
            got: inputs.len(),
        });
    }
    if cells.padded_len != padded_len(weights.len(), n)
        || cells.cells.len() != cells.padded_len * coding.planes() as usize
    {
        return Err(Error::invalid("cells", "cell array does not match the weight vector"));
    }
    if inputs.iter().any(|&x| (x as u64) >> input_bits != 0) {
        return Err(Error::invalid("inputs", format!("inputs must fit {input_bits} bits")));
    }
    let codes: Vec<u32> = weights.iter().map(|&w| coding.encode(w)).collect::<Result<_>>()?;
    let p = &cfg.params;
    let mut out = HwDot::default();
    let mut acc: i64 = 0;
    for k in 0..coding.planes() {
        let plane = &cells.cells[k as usize * cells.padded_len..(k as usize + 1) * cells.padded_len];
        for j in 0..input_bits {
            for (s, row) in plane.chunks(n).enumerate() {
                let mut sum_vo = 0.0;
                let mut energy = 0.0;
                let mut ideal = 0;
                for (c, cell) in row.iter().enumerate() {
                    let e = s * n + c;
                    let x = inputs.get(e).is_some_and(|x| (x >> j) & 1 == 1);
                    let o = cell[x as usize];
                    sum_vo += o.v_o;
                    energy += o.energy;
                    ideal += (x && codes.get(e).is_some_and(|u| (u >> k) & 1 == 1)) as usize;
                }
                let v_acc = p.c_o * sum_vo / (n as f64 * p.c_o + p.c_acc);
                let decoded = cfg.decode(v_acc);
                out.energy += energy + accumulation_energy(v_acc, p);
                out.row_macs += 1;
                out.decode_errors += (decoded != ideal) as usize;
                acc += (decoded as i64) << (j + k);
            }
        }
    }
    let (a, c) = coding.affine();
    let sum_x: i64 = inputs.iter().map(|&x| x as i64).sum();
    out.value = a * acc + c * sum_x;
    Ok(out)
}

/// Threshold variation applied per physical cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationSpec {
    pub sigma: f64,
    pub seed: u64,
}

/// The network mapped onto physical rows at one temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hardware {
    pub cfg: RowConfig,
    pub temp: Temperature,
    /// Per weight layer (by layer index), per output channel.
    pub arrays: Vec<Option<Vec<CellArray>>>,
}

impl Hardware {
    /// Programs every weight of `net`. Without variation all cells share one
    /// response; with it every physical cell gets its own offset, drawn in
    /// (layer, channel, plane, element) order.
    pub fn build(
        net: &NetworkSpec,
        cfg: &RowConfig,
        temp: Temperature,
        variation: Option<VariationSpec>,
    ) -> Result<Self> {
        cfg.validate()?;
        let coding = net.weight_coding();
        let n = cfg.n_cells();
        let channels = |l: &QuantLayer| match l.kind {
            LayerKind::Conv { out_ch, .. } => out_ch,
            LayerKind::Fc { outputs, .. } => outputs,
            _ => 0,
        };
        let total: usize = net
            .weight_layers()
            .map(|(_, l)| channels(l) * padded_len(l.weights.len() / channels(l), n) * coding.planes() as usize)
            .sum();
        let offsets = match variation {
            Some(v) => sample_vth_offsets(v.sigma, total, v.seed)?,
            None => Vec::new(),
        };
        let responses: Vec<CellResponse> = if offsets.is_empty() {
            vec![CellResponse::compute(&cfg.params, temp, 0.0)?]
        } else {
            offsets
                .par_iter()
                .map(|&o| CellResponse::compute(&cfg.params, temp, o))
                .collect::<Result<_>>()?
        };
        let mut next = 0;
        let mut take = || {
            let r = responses[next.min(responses.len() - 1)];
            next += 1;
            Ok(r)
        };
        let mut arrays = vec![None; net.layers.len()];
        for (i, l) in net.weight_layers() {
            let ch = channels(l);
            let per = l.weights.len() / ch;
            let layer = (0..ch)
                .map(|f| program_cells(&l.weights[f * per..(f + 1) * per], coding, cfg, &mut take))
                .collect::<Result<Vec<_>>>()?;
            arrays[i] = Some(layer);
        }
        Ok(Self {
            cfg: cfg.clone(),
            temp,
            arrays,
        })
    }
}

/// Computes dot products for a weight layer.
trait DotEngine: Sync {
    fn dot(
        &self,
        layer: usize,
        channel: usize,
        inputs: &[u32],
        weights: &[i32],
        coding: WeightCoding,
        bits: u32,
    ) -> Result<HwDot>;
}

struct Software;

impl DotEngine for Software {
    fn dot(&self, _: usize, _: usize, inputs: &[u32], weights: &[i32], _: WeightCoding, _: u32) -> Result<HwDot> {
        Ok(HwDot {
            value: inputs.iter().zip(weights).map(|(&x, &w)| x as i64 * w as i64).sum(),
            ..HwDot::default()
        })
    }
}

impl DotEngine for Hardware {
    fn dot(
        &self,
        layer: usize,
        channel: usize,
        inputs: &[u32],
        weights: &[i32],
        coding: WeightCoding,
        bits: u32,
    ) -> Result<HwDot> {
        let cells = &self.arrays[layer].as_ref().expect("weight layer")[channel];
        hw_dot(inputs, weights, coding, bits, cells, &self.cfg)
    }
}

/// Per-image result of an integer forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forward {
    pub logits: Vec<i64>,
    pub energy: f64,
    /// Decode errors per network layer (zero for non-weight layers).
    pub decode_errors: Vec<usize>,
    pub row_macs: usize,
}

impl Forward {
    /// Index of the largest logit, lowest index on ties.
    pub fn prediction(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.logits.iter().enumerate() {
            if v > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

fn requantize(acc: i64, multiplier: f64, a_max: i64) -> i64 {
    ((acc as f64 * multiplier).round() as i64).clamp(0, a_max)
}

fn forward_with(net: &NetworkSpec, input: &[i64], engine: &dyn DotEngine) -> Result<Forward> {
    let a_max = (1i64 << net.activation_bits) - 1;
    let coding = net.weight_coding();
    let mut shape = net.input_shape;
    let mut x = input.to_vec();
    let mut scale = net.input_scale();
    let mut out = Forward {
        logits: Vec::new(),
        energy: 0.0,
        decode_errors: vec![0; net.layers.len()],
        row_macs: 0,
    };
    for (li, l) in net.layers.iter().enumerate() {
        let next = l.kind.output_shape(shape)?;
        x = match l.kind {
            LayerKind::Conv { .. } | LayerKind::Fc { .. } => {
                let neurons = neuron_inputs(l.kind, shape);
                let per = l.weights.len() / next[0];
                let mut y = vec![0; neurons.len()];
                let mut buf = Vec::with_capacity(per);
                for (o, idx) in neurons.iter().enumerate() {
                    let f = o / (next[1] * next[2]);
                    buf.clear();
                    buf.extend(idx.iter().map(|i| i.map_or(0, |i| x[i] as u32)));
                    let d = engine.dot(
                        li,
                        f,
                        &buf,
                        &l.weights[f * per..(f + 1) * per],
                        coding,
                        net.activation_bits,
                    )?;
                    y[o] = d.value;
                    out.energy += d.energy;
                    out.row_macs += d.row_macs;
                    out.decode_errors[li] += d.decode_errors;
                }
                scale *= l.scale;
                y
            }
            LayerKind::Relu => {
                let m = scale / l.scale;
                scale = l.scale;
                x.iter().map(|&v| requantize(v, m, a_max)).collect()
            }
            LayerKind::MaxPool { size } => max_pool(&x, shape, size, i64::max, i64::MIN),
            LayerKind::Dropout => x,
        };
        shape = next;
    }
    out.logits = x;
    Ok(out)
}

/// Pure integer inference (the software reference).
pub fn software_forward(net: &NetworkSpec, input: &[i64]) -> Result<Forward> {
    forward_with(net, input, &Software)
}

/// Inference with every dot product on the simulated array.
pub fn hardware_forward(net: &NetworkSpec, hw: &Hardware, input: &[i64]) -> Result<Forward> {
    forward_with(net, input, hw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HwInferenceReport {
    pub accuracy: f64,
    pub correct: usize,
    pub images: usize,
    /// Total array energy over all images (J).
    pub energy: f64,
    pub row_macs: usize,
    pub decode_errors: Vec<usize>,
    pub predictions: Vec<usize>,
}

fn report(forwards: Vec<Forward>, data: &Dataset, layers: usize) -> HwInferenceReport {
    let mut r = HwInferenceReport {
        accuracy: 0.0,
        correct: 0,
        images: forwards.len(),
        energy: 0.0,
        row_macs: 0,
        decode_errors: vec![0; layers],
        predictions: Vec::with_capacity(forwards.len()),
    };
    for (f, &label) in forwards.iter().zip(&data.labels) {
        let p = f.prediction();
        r.correct += (p == label) as usize;
        r.predictions.push(p);
        r.energy += f.energy;
        r.row_macs += f.row_macs;
        for (acc, e) in r.decode_errors.iter_mut().zip(&f.decode_errors) {
            *acc += e;
        }
    }
    r.accuracy = if r.images == 0 {
        0.0
    } else {
        r.correct as f64 / r.images as f64
    };
    r
}

fn run_all(net: &NetworkSpec, data: &Dataset, engine: &dyn DotEngine) -> Result<HwInferenceReport> {
    if data.rows * data.cols != net.input_shape.iter().product::<usize>() {
        return Err(Error::invalid("dataset", "image size does not match the network input"));
    }
    let forwards: Vec<Forward> = data
        .images
        .par_iter()
        .map(|img| forward_with(net, &net.quantize_image(img, data.max_value), engine))
        .collect::<Result<_>>()?;
    Ok(report(forwards, data, net.layers.len()))
}

/// Integer software inference over a dataset.
pub fn evaluate_software(net: &NetworkSpec, data: &Dataset) -> Result<HwInferenceReport> {
    run_all(net, data, &Software)
}

/// Hardware-in-the-loop inference at `temp`, optionally with per-cell
/// threshold variation.
pub fn evaluate(
    net: &NetworkSpec,
    data: &Dataset,
    cfg: &RowConfig,
    temp: Temperature,
    variation: Option<VariationSpec>,
) -> Result<HwInferenceReport> {
    let hw = Hardware::build(net, cfg, temp, variation)?;
    run_all(net, data, &hw)
}

/// The bundled digit network quantized to 4-bit weights and activations.
pub fn digits_network() -> Result<NetworkSpec> {
    quantize(&RealNetwork::digits_cnn(&parse_tensors(DIGITS_CNN)?)?, 4, 4)
}

pub fn digits_test_set() -> Result<Dataset> {
    parse_images(DIGITS_TEST)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Params;
    use rand::{Rng, SeedableRng};

    fn cfg() -> RowConfig {
        let mut grid: Vec<Temperature> = (0..=17)
            .map(|k| Temperature::from_celsius(5.0 * k as f64).unwrap())
            .collect();
        grid.push(Temperature::room());
        RowConfig::calibrated(Params::default(), &grid).unwrap()
    }

    fn uniform_cells(weights: &[i32], coding: WeightCoding, cfg: &RowConfig, temp: Temperature) -> CellArray {
        let r = CellResponse::compute(&cfg.params, temp, 0.0).unwrap();
        program_cells(weights, coding, cfg, &mut || Ok(r)).unwrap()
    }

    #[test]
    fn tensor_text_round_trips() {
        let t = vec![
            Tensor {
                name: "a".into(),
                shape: vec![2, 2],
                data: vec![1.5, -0.25, 3e-7, 0.0],
            },
            Tensor {
                name: "b".into(),
                shape: vec![1],
                data: vec![4.0],
            },
        ];
        assert_eq!(parse_tensors(&format_tensors(&t)).unwrap(), t);
        assert!(parse_tensors("nope\n").is_err());
        assert!(parse_tensors(&format!("{TENSOR_MAGIC}\na 3\n1 2\n")).is_err());
    }

    #[test]
    fn image_text_round_trips() {
        let d = Dataset {
            rows: 1,
            cols: 2,
            max_value: 16,
            images: vec![vec![0, 16], vec![3, 4]],
            labels: vec![7, 1],
        };
        assert_eq!(parse_images(&format_images(&d)).unwrap(), d);
        assert!(parse_images(&format!("{IMAGE_MAGIC}\n1 1 2 16\n0 17 1\n")).is_err());
        assert!(parse_images(&format!("{IMAGE_MAGIC}\n2 1 2 16\n0 1 1\n")).is_err());
    }

    #[test]
    fn bundled_fixtures_parse() {
        let net = digits_network().unwrap();
        assert_eq!(net.weight_bits, 4);
        let data = digits_test_set().unwrap();
        assert_eq!(data.len(), 500);
        assert!(data.labels.iter().all(|&l| l < 10));
    }

    #[test]
    fn weight_quantization() {
        let (q, s) = quantize_weights(&[0.7, -0.35, 0.0, 0.1], 4);
        assert_eq!(q, vec![7, -4, 0, 1]);
        assert!((s - 0.1).abs() < 1e-15);
        let (q, s) = quantize_weights(&[0.7, -0.35, 0.0], 1);
        assert_eq!(q, vec![1, -1, 1]);
        assert_eq!(s, 0.7);
        assert_eq!(quantize_weights(&[0.0, 0.0], 4).0, vec![0, 0]);
        assert_eq!(max_code(1), 1);
        assert_eq!(max_code(4), 7);
    }

    #[test]
    fn offset_binary_coding() {
        let c = WeightCoding::Signed(4);
        for w in -7..=7 {
            let u = c.encode(w).unwrap() as i64;
            let (a, b) = c.affine();
            assert_eq!(a * u + b, w as i64);
        }
        assert!(c.encode(8).is_err());
        let one = WeightCoding::Signed(1);
        assert_eq!((one.encode(-1).unwrap(), one.encode(1).unwrap()), (0, 1));
        assert!(one.encode(0).is_err());
        assert!(WeightCoding::Unsigned(2).encode(4).is_err());
        assert!(WeightCoding::Unsigned(2).encode(-1).is_err());
    }

    #[test]
    fn hw_dot_is_exact_on_random_cases() {
        let cfg = cfg();
        let temp = Temperature::room();
        let coding = WeightCoding::Signed(4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let x: Vec<u32> = (0..16).map(|_| rng.random_range(0..16)).collect();
            let w: Vec<i32> = (0..16).map(|_| rng.random_range(-7..=7)).collect();
            let cells = uniform_cells(&w, coding, &cfg, temp);
            let d = hw_dot(&x, &w, coding, 4, &cells, &cfg).unwrap();
            let truth: i64 = x.iter().zip(&w).map(|(&a, &b)| a as i64 * b as i64).sum();
            assert_eq!(d.value, truth);
            assert_eq!(d.decode_errors, 0);
            assert_eq!(d.row_macs, 4 * 4 * 2);
            assert!(d.energy > 0.0);
        }
    }

    #[test]
    fn quantization_error_is_at_most_half_a_step() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let w: Vec<f64> = (0..64).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (q, s) = quantize_weights(&w, 4);
            for (&c, &v) in q.iter().zip(&w) {
                assert!(c.abs() <= 7);
                assert!((c as f64 * s - v).abs() <= 0.5 * s + 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_zero() {
        let cfg = cfg();
        let temp = Temperature::from_celsius(85.0).unwrap();
        let coding = WeightCoding::Signed(4);
        let w = vec![0; 16];
        let cells = uniform_cells(&w, coding, &cfg, temp);
        let d = hw_dot(&[15; 16], &w, coding, 4, &cells, &cfg).unwrap();
        assert_eq!(d.value, 0);
        assert_eq!(d.decode_errors, 0);
    }

    #[test]
    fn one_bit_row_counts_matching_ones() {
        let cfg = cfg();
        let coding = WeightCoding::Unsigned(1);
        for t in [0.0, 27.0, 85.0] {
            let temp = Temperature::from_celsius(t).unwrap();
            for pattern in 0u32..256 {
                let w: Vec<i32> = (0..8).map(|j| ((pattern >> j) & 1) as i32).collect();
                let x: Vec<u32> = (0..8).map(|j| (pattern.rotate_left(3) >> j) & 1).collect();
                let cells = uniform_cells(&w, coding, &cfg, temp);
                let d = hw_dot(&x, &w, coding, 1, &cells, &cfg).unwrap();
                let expect = (pattern & (pattern.rotate_left(3) & 0xff)).count_ones() as i64;
                assert_eq!(d.value, expect, "T {t} pattern {pattern:08b}");
            }
        }
    }

    #[test]
    fn hw_dot_handles_padding_and_unsigned_codes() {
        let cfg = cfg();
        let temp = Temperature::from_celsius(60.0).unwrap();
        let coding = WeightCoding::Unsigned(2);
        let w = vec![3, 0, 2, 1, 3];
        let x = vec![1, 3, 2, 0, 3];
        let cells = uniform_cells(&w, coding, &cfg, temp);
        assert_eq!(cells.padded_len, 8);
        let d = hw_dot(&x, &w, coding, 2, &cells, &cfg).unwrap();
        assert_eq!(d.value, 3 + 4 + 9);
        assert!(hw_dot(&x[..4], &w, coding, 2, &cells, &cfg).is_err());
        assert!(hw_dot(&[4, 0, 0, 0, 0], &w, coding, 2, &cells, &cfg).is_err());
    }

    #[test]
    fn binary_weights_use_the_affine_correction() {
        let cfg = cfg();
        let coding = WeightCoding::Signed(1);
        let w = vec![1, -1, -1, 1, 1, -1, 1, 1, -1];
        let x = vec![1, 1, 0, 1, 1, 1, 0, 1, 1];
        let cells = uniform_cells(&w, coding, &cfg, Temperature::room());
        let d = hw_dot(&x, &w, coding, 1, &cells, &cfg).unwrap();
        assert_eq!(
            d.value,
            x.iter().zip(&w).map(|(&a, &b)| a as i64 * b as i64).sum::<i64>()
        );
    }

    #[test]
    fn network_validation() {
        let mut net = digits_network().unwrap();
        net.layers[0].weights.pop();
        assert!(net.validate().is_err());
        let mut net = digits_network().unwrap();
        net.layers.remove(1);
        assert!(net.validate().is_err());
        let real = RealNetwork::digits_cnn(&parse_tensors(DIGITS_CNN).unwrap()).unwrap();
        assert!(quantize(&real, 0, 4).is_err());
        assert!(RealNetwork::digits_cnn(&[]).is_err());
    }

    #[test]
    fn quantized_software_tracks_the_float_network() {
        let real = RealNetwork::digits_cnn(&parse_tensors(DIGITS_CNN).unwrap()).unwrap();
        let data = digits_test_set().unwrap();
        let float_correct = data
            .images
            .iter()
            .zip(&data.labels)
            .filter(|(img, &label)| {
                let x: Vec<f64> = img.iter().map(|&p| p as f64 / data.max_value as f64).collect();
                let logits = real.forward(&x);
                let best = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
                best == label
            })
            .count();
        let sw = evaluate_software(&digits_network().unwrap(), &data).unwrap();
        assert!(float_correct as f64 / 500.0 > 0.95);
        assert!(sw.accuracy > 0.95);
        assert_eq!(sw.energy, 0.0);
    }

    #[test]
    fn hardware_matches_software_on_a_subset() {
        let net = digits_network().unwrap();
        let data = digits_test_set().unwrap().truncated(40);
        let sw = evaluate_software(&net, &data).unwrap();
        let hw = evaluate(&net, &data, &cfg(), Temperature::room(), None).unwrap();
        assert_eq!(hw.predictions, sw.predictions);
        assert!(hw.decode_errors.iter().all(|&e| e == 0));
        let img = net.quantize_image(&data.images[0], data.max_value);
        let hw_fwd = hardware_forward(
            &net,
            &Hardware::build(&net, &cfg(), Temperature::room(), None).unwrap(),
            &img,
        )
        .unwrap();
        assert_eq!(hw_fwd.logits, software_forward(&net, &img).unwrap().logits);
    }

    #[test]
    fn energy_is_additive_over_images() {
        let net = digits_network().unwrap();
        let data = digits_test_set().unwrap().truncated(6);
        let cfg = cfg();
        let all = evaluate(&net, &data, &cfg, Temperature::room(), None).unwrap();
        let hw = Hardware::build(&net, &cfg, Temperature::room(), None).unwrap();
        let sum: f64 = data
            .images
            .iter()
            .map(|img| {
                hardware_forward(&net, &hw, &net.quantize_image(img, data.max_value))
                    .unwrap()
                    .energy
            })
            .sum();
        assert!((all.energy - sum).abs() <= 1e-9 * sum);
    }
}
