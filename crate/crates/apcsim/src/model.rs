//! Sequential model graphs with four evaluation modes (clean, quantized,
//! noisy, low-bit), range calibration, MAC accounting, manifest round trips,
//! and a small trainer that produces the frozen reference models the
//! experiments consume.
//!
//! Weight blobs are raw little-endian f32 in layer order, upcast on load;
//! the manifest is JSON carrying shapes, element offsets, a SHA-256 of the
//! blob, and optional calibration state.

use crate::data::{batch_ranges, shuffled_indices, Dataset};
use crate::error::{Error, Result};
use crate::noise::{noisy_linear, NoiseContext, NoiseSpec};
use crate::num::Element;
use crate::optim::Adam;
use crate::quant::{fake_quantize, fake_quantize_rows, row_ranges, CalibratedRange, QuantSpec, RangeObserver};
use crate::rng::NoiseRng;
use crate::tensor::{conv2d, conv_out_dims, im2col, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone)]
pub enum Layer<T: Element> {
    /// `w: [out, in]`, `b: [out]`.
    Dense { w: Tensor<T>, b: Tensor<T> },
    /// `w: [O, C, kh, kw]`, `b: [O]`.
    Conv2d {
        w: Tensor<T>,
        b: Tensor<T>,
        stride: usize,
        pad: usize,
    },
    ReLU,
    MaxPool { k: usize },
    AvgPool { k: usize },
    Flatten,
    /// Adds the output of an earlier layer (identity skip connection).
    ResidualAdd { from: usize },
    /// Marks the logits head; forward is the identity (softmax lives in the
    /// loss and in prediction).
    SoftmaxHead,
}

impl<T: Element> Layer<T> {
    pub fn is_noisy(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::ReLU => "relu",
            Layer::MaxPool { .. } => "max_pool",
            Layer::AvgPool { .. } => "avg_pool",
            Layer::Flatten => "flatten",
            Layer::ResidualAdd { .. } => "residual_add",
            Layer::SoftmaxHead => "softmax_head",
        }
    }
}

/// Calibration state for one layer: activation ranges at its input/output
/// plus per-row and whole-tensor weight ranges for Dense/Conv2d.
#[derive(Debug, Clone)]
pub struct LayerCalib<T: Element> {
    pub input: Option<CalibratedRange<T>>,
    pub output: Option<CalibratedRange<T>>,
    pub weight_rows: Vec<CalibratedRange<T>>,
    pub weight_full: Option<CalibratedRange<T>>,
}

/// How a forward pass treats quantization and noise.
#[derive(Debug)]
pub enum EvalMode<'a, T: Element> {
    Clean,
    /// 8-bit (per the calibration bits) fake quantization of weights and the
    /// inputs of every noisy layer; no noise.
    Quantized,
    /// Quantized, plus per-noisy-layer output fake quantization at the given
    /// fractional bit widths (one entry per noisy layer, in order).
    LowBit { site_bits: &'a [f64] },
    /// Analog noise per `spec`; `energies` holds one tensor per noisy layer
    /// (shape `[1]` per layer or `[O]` per channel), energy per MAC.
    Noisy {
        spec: &'a NoiseSpec,
        energies: &'a [Tensor<T>],
    },
}

#[derive(Debug, Clone)]
pub struct ModelGraph<T: Element> {
    pub name: String,
    pub layers: Vec<Layer<T>>,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub calib: Vec<Option<LayerCalib<T>>>,
}

impl<T: Element> ModelGraph<T> {
    pub fn new(
        name: impl Into<String>,
        layers: Vec<Layer<T>>,
        input_shape: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let n = layers.len();
        let g = ModelGraph {
            name: name.into(),
            layers,
            input_shape,
            classes,
            calib: vec![None; n],
        };
        g.shapes()?; // static shape check
        Ok(g)
    }

    /// Per-example output shape after every layer. Errors name the offending
    /// layer index.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| Error::Load { layer: i, msg };
            cur = match layer {
                Layer::Dense { w, .. } => {
                    let (o, k) = (w.shape()[0], w.shape()[1]);
                    if cur != [k] {
                        return Err(fail(format!("dense expects [{k}], got {cur:?}")));
                    }
                    vec![o]
                }
                Layer::Conv2d { w, stride, pad, .. } => {
                    let (o, c, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
                    if cur.len() != 3 || cur[0] != c {
                        return Err(fail(format!(
                            "conv2d expects [{c},H,W], got {cur:?}"
                        )));
                    }
                    let (oh, ow) = conv_out_dims(cur[1], cur[2], kh, kw, *stride, *pad)
                        .map_err(|e| fail(e.to_string()))?;
                    vec![o, oh, ow]
                }
                Layer::ReLU => cur,
                Layer::MaxPool { k } | Layer::AvgPool { k } => {
                    if cur.len() != 3 || cur[1] < *k || cur[2] < *k {
                        return Err(fail(format!("pool{k} needs [C,H,W] with H,W >= {k}, got {cur:?}")));
                    }
                    vec![cur[0], cur[1] / k, cur[2] / k]
                }
                Layer::Flatten => vec![cur.iter().product()],
                Layer::ResidualAdd { from } => {
                    if *from >= i {
                        return Err(fail(format!("residual source {from} is not upstream")));
                    }
                    let src: &Vec<usize> = &out[*from];
                    if *src != cur {
                        return Err(fail(format!(
                            "residual shapes differ: {src:?} vs {cur:?}"
                        )));
                    }
                    cur
                }
                Layer::SoftmaxHead => {
                    if cur != [self.classes] {
                        return Err(fail(format!(
                            "softmax head expects [{}], got {cur:?}",
                            self.classes
                        )));
                    }
                    cur
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Indices of layers that run on the analog unit.
    pub fn noisy_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_noisy())
            .collect()
    }

    /// MACs per inference for each layer (zero for digital layers).
    pub fn n_mac(&self) -> Result<Vec<u64>> {
        let shapes = self.shapes()?;
        let mut out = vec![0u64; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            out[i] = match layer {
                Layer::Dense { w, .. } => (w.shape()[0] * w.shape()[1]) as u64,
                Layer::Conv2d { w, .. } => {
                    let k = w.shape()[1] * w.shape()[2] * w.shape()[3];
                    let os = &shapes[i]; // [O, OH, OW]
                    (os[0] * os[1] * os[2] * k) as u64
                }
                _ => 0,
            };
        }
        Ok(out)
    }

    pub fn n_mac_total(&self) -> Result<u64> {
        Ok(self.n_mac()?.iter().sum())
    }

    /// Output channel count of each noisy layer (dense rows / conv output
    /// channels), in noisy-layer order.
    pub fn channel_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense { w, .. } | Layer::Conv2d { w, .. } => Some(w.shape()[0]),
                _ => None,
            })
            .collect()
    }

    fn weight_matrix(layer: &Layer<T>) -> Result<Tensor<T>> {
        match layer {
            Layer::Dense { w, .. } => Ok(w.clone()),
            Layer::Conv2d { w, .. } => {
                let o = w.shape()[0];
                w.reshape(vec![o, w.numel() / o])
            }
            _ => Err(Error::contract("layer has no weights".to_string())),
        }
    }

    fn calib_for(&self, i: usize) -> Result<&LayerCalib<T>> {
        self.calib[i]
            .as_ref()
            .ok_or_else(|| Error::contract(format!("layer {i} is not calibrated")))
    }

    /// Forward pass returning the output of every layer. `params`, when
    /// given, substitutes `[w, b]` pairs for the trainable layers in order
    /// (used by the trainer to route gradients).
    pub fn forward_collect(
        &self,
        x: &Tensor<T>,
        mode: &EvalMode<'_, T>,
        rng: &mut NoiseRng,
        params: Option<&[Tensor<T>]>,
    ) -> Result<Vec<Tensor<T>>> {
        if x.shape().len() < 2 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::contract(format!(
                "input shape {:?} does not match model input {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        if let EvalMode::Noisy { spec, energies } = mode {
            spec.validate()?;
            let need = self.noisy_layers().len();
            if energies.len() != need {
                return Err(Error::contract(format!(
                    "{} energy entries for {} noisy layers",
                    energies.len(),
                    need
                )));
            }
        }
        if let EvalMode::LowBit { site_bits } = mode {
            if site_bits.len() != self.noisy_layers().len() {
                return Err(Error::contract(format!(
                    "{} bit entries for {} noisy layers",
                    site_bits.len(),
                    self.noisy_layers().len()
                )));
            }
        }
        let batch = x.shape()[0];
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        let mut trainable = 0usize; // index into params
        let mut noisy = 0usize; // noisy-layer ordinal
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                Layer::Dense { w, b } | Layer::Conv2d { w, b, .. } => {
                    let (w, b) = match params {
                        Some(p) => (p[2 * trainable].clone(), p[2 * trainable + 1].clone()),
                        None => (w.clone(), b.clone()),
                    };
                    trainable += 1;
                    let y = self.eval_noisy_layer(i, noisy, &cur, &w, &b, mode, rng)?;
                    noisy += 1;
                    y
                }
                Layer::ReLU => cur.relu(),
                Layer::MaxPool { k } => cur.max_pool2d(*k)?,
                Layer::AvgPool { k } => cur.avg_pool2d(*k)?,
                Layer::Flatten => {
                    let f = cur.numel() / batch;
                    cur.reshape(vec![batch, f])?
                }
                Layer::ResidualAdd { from } => {
                    let y = cur.add(&outs[*from])?;
                    // skip-connection sums re-enter the analog domain, so
                    // they are requantized like any other activation
                    match mode {
                        EvalMode::Quantized | EvalMode::LowBit { .. } => {
                            let c = self.calib_for(i)?;
                            let r = c.output.as_ref().ok_or_else(|| {
                                Error::contract(format!("layer {i}: no output range"))
                            })?;
                            fake_quantize(&y, r, r.bits)
                        }
                        EvalMode::Noisy { spec, .. } if spec.quantizes_operands() => {
                            let c = self.calib_for(i)?;
                            let r = c.output.as_ref().ok_or_else(|| {
                                Error::contract(format!("layer {i}: no output range"))
                            })?;
                            fake_quantize(&y, r, r.bits)
                        }
                        _ => y,
                    }
                }
                Layer::SoftmaxHead => cur,
            };
            outs.push(cur.clone());
        }
        Ok(outs)
    }

    fn eval_noisy_layer(
        &self,
        i: usize,
        noisy_ord: usize,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: &Tensor<T>,
        mode: &EvalMode<'_, T>,
        rng: &mut NoiseRng,
    ) -> Result<Tensor<T>> {
        let is_conv = matches!(self.layers[i], Layer::Conv2d { .. });
        let (stride, pad) = match self.layers[i] {
            Layer::Conv2d { stride, pad, .. } => (stride, pad),
            _ => (0, 0),
        };
        let add_bias = |y: Tensor<T>| -> Result<Tensor<T>> {
            if is_conv {
                let o = b.numel();
                y.add(&b.reshape(vec![1, o, 1, 1])?)
            } else {
                y.add(b)
            }
        };
        let quantize_ops = |bits_override: Option<f64>| -> Result<(Tensor<T>, Tensor<T>)> {
            let c = self.calib_for(i)?;
            let rin = c
                .input
                .as_ref()
                .ok_or_else(|| Error::contract(format!("layer {i}: no input range")))?;
            let xq = fake_quantize(x, rin, rin.bits);
            let wmat = Self::weight_matrix(&self.layers[i])?;
            let wm = match params_weight(w, &wmat) {
                Some(m) => m,
                None => wmat,
            };
            let wq = fake_quantize_rows(&wm, &c.weight_rows, bits_override.unwrap_or(rin.bits))?;
            Ok((xq, wq))
        };
        // substitute trainer-provided weights into the [O,K] view
        fn params_weight<T: Element>(w: &Tensor<T>, stored: &Tensor<T>) -> Option<Tensor<T>> {
            if std::ptr::eq(w.data().as_ptr(), stored.data().as_ptr()) {
                None
            } else {
                let o = stored.shape()[0];
                w.reshape(vec![o, w.numel() / o]).ok()
            }
        }
        match mode {
            EvalMode::Clean => {
                let y = if is_conv {
                    conv2d(x, w, stride, pad)?
                } else {
                    x.matmul(&w.transpose()?)?
                };
                add_bias(y)
            }
            EvalMode::Quantized | EvalMode::LowBit { .. } => {
                let (xq, wq) = quantize_ops(None)?;
                let y = if is_conv {
                    let wq4 = wq.reshape(w.shape().to_vec())?;
                    conv2d(&xq, &wq4, stride, pad)?
                } else {
                    xq.matmul(&wq.transpose()?)?
                };
                let y = add_bias(y)?;
                if let EvalMode::LowBit { site_bits } = mode {
                    let c = self.calib_for(i)?;
                    let r = c
                        .output
                        .as_ref()
                        .ok_or_else(|| Error::contract(format!("layer {i}: no output range")))?;
                    let bits = site_bits[noisy_ord];
                    Ok(fake_quantize(&y, &r.with_bits(bits), bits))
                } else {
                    Ok(y)
                }
            }
            EvalMode::Noisy { spec, energies } => {
                let c = self.calib_for(i)?;
                let (xin, wmat, wr, xr) = if spec.quantizes_operands() {
                    let (xq, wq) = quantize_ops(None)?;
                    let wf = c
                        .weight_full
                        .as_ref()
                        .ok_or_else(|| Error::contract(format!("layer {i}: no weight range")))?;
                    let rin = c.input.as_ref().unwrap();
                    (
                        xq,
                        wq,
                        Some((wf.x_min, wf.x_max)),
                        Some((rin.x_min, rin.x_max)),
                    )
                } else {
                    let wmat = Self::weight_matrix(&self.layers[i])?;
                    let wm = params_weight(w, &wmat).unwrap_or(wmat);
                    (x.clone(), wm, None, None)
                };
                let energy = &energies[noisy_ord];
                if is_conv {
                    let (kh, kw) = (w.shape()[2], w.shape()[3]);
                    let (bsz, _c, h, wd) =
                        (xin.shape()[0], xin.shape()[1], xin.shape()[2], xin.shape()[3]);
                    let (oh, ow) = conv_out_dims(h, wd, kh, kw, stride, pad)?;
                    let cols = im2col(&xin, kh, kw, stride, pad)?;
                    let ctx = NoiseContext {
                        n: cols.shape()[1],
                        weight_range: wr,
                        input_range: xr,
                        layer: noisy_ord,
                    };
                    let y = noisy_linear(&cols, &wmat, spec, &ctx, energy, rng)?;
                    let o = wmat.shape()[0];
                    let y = y.reshape(vec![bsz, oh, ow, o])?.permute(&[0, 3, 1, 2])?;
                    add_bias(y)
                } else {
                    let ctx = NoiseContext {
                        n: xin.shape()[1],
                        weight_range: wr,
                        input_range: xr,
                        layer: noisy_ord,
                    };
                    let y = noisy_linear(&xin, &wmat, spec, &ctx, energy, rng)?;
                    add_bias(y)
                }
            }
        }
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        mode: &EvalMode<'_, T>,
        rng: &mut NoiseRng,
    ) -> Result<Tensor<T>> {
        Ok(self.forward_collect(x, mode, rng, None)?.pop().unwrap())
    }

    /// Clean forward with trainer-owned `[w0, b0, w1, b1, ...]` tensors.
    pub fn forward_train(&self, x: &Tensor<T>, params: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut rng = NoiseRng::new(0);
        Ok(self
            .forward_collect(x, &EvalMode::Clean, &mut rng, Some(params))?
            .pop()
            .unwrap())
    }

    /// Shapes of `[w, b]` for every trainable layer in order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense { w, b } | Layer::Conv2d { w, b, .. } => {
                    out.push(w.shape().to_vec());
                    out.push(b.shape().to_vec());
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_flat(&self) -> Vec<Vec<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense { w, b } | Layer::Conv2d { w, b, .. } => {
                    out.push(w.data().to_vec());
                    out.push(b.data().to_vec());
                }
                _ => {}
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[Vec<T>]) -> Result<()> {
        let shapes = self.param_shapes();
        if flat.len() != shapes.len() {
            return Err(Error::contract(format!(
                "{} parameter groups, expected {}",
                flat.len(),
                shapes.len()
            )));
        }
        let mut it = flat.iter().zip(shapes);
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { w, b } | Layer::Conv2d { w, b, .. } => {
                    let (wv, ws) = it.next().unwrap();
                    let (bv, bs) = it.next().unwrap();
                    *w = Tensor::from_vec(wv.clone(), ws)?;
                    *b = Tensor::from_vec(bv.clone(), bs)?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Estimates activation ranges over `data` and installs calibration
    /// state: input/output ranges at every noisy layer, output ranges at
    /// residual sums and the final layer, exact per-row weight ranges.
    pub fn calibrate(
        &mut self,
        data: &Dataset<T>,
        spec: &QuantSpec,
        batch_size: usize,
    ) -> Result<()> {
        spec.validate()?;
        let n_layers = self.layers.len();
        let mut in_obs: Vec<Option<RangeObserver<T>>> = vec![None; n_layers];
        let mut out_obs: Vec<Option<RangeObserver<T>>> = vec![None; n_layers];
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.is_noisy() {
                in_obs[i] = Some(RangeObserver::new(spec.range_mode));
                out_obs[i] = Some(RangeObserver::new(spec.range_mode));
            }
            if matches!(layer, Layer::ResidualAdd { .. }) || i == n_layers - 1 {
                out_obs[i] = Some(RangeObserver::new(spec.range_mode));
            }
        }
        let mut rng = NoiseRng::new(0);
        for r in batch_ranges(data.len(), batch_size) {
            let idx: Vec<usize> = r.collect();
            let (x, _) = data.batch(&idx)?;
            let outs = self.forward_collect(&x, &EvalMode::Clean, &mut rng, None)?;
            for i in 0..n_layers {
                if let Some(obs) = in_obs[i].as_mut() {
                    let v = if i == 0 { &x } else { &outs[i - 1] };
                    obs.observe(v.data());
                }
                if let Some(obs) = out_obs[i].as_mut() {
                    obs.observe(outs[i].data());
                }
            }
        }
        let bits = spec.bits;
        for i in 0..n_layers {
            if in_obs[i].is_none() && out_obs[i].is_none() {
                continue;
            }
            let input = match in_obs[i].as_ref() {
                Some(o) => {
                    let (lo, hi) = o.finish()?;
                    Some(CalibratedRange::new(lo, hi, bits))
                }
                None => None,
            };
            let output = match out_obs[i].as_ref() {
                Some(o) => {
                    let (lo, hi) = o.finish()?;
                    Some(CalibratedRange::new(lo, hi, bits))
                }
                None => None,
            };
            let (weight_rows, weight_full) = if self.layers[i].is_noisy() {
                let wmat = Self::weight_matrix(&self.layers[i])?;
                let rows = row_ranges(&wmat, bits);
                let lo = wmat.data().iter().copied().fold(T::infinity(), T::min);
                let hi = wmat.data().iter().copied().fold(T::neg_infinity(), T::max);
                (rows, Some(CalibratedRange::new(lo, hi, bits)))
            } else {
                (Vec::new(), None)
            };
            self.calib[i] = Some(LayerCalib {
                input,
                output,
                weight_rows,
                weight_full,
            });
        }
        Ok(())
    }

    pub fn is_calibrated(&self) -> bool {
        self.noisy_layers().iter().all(|&i| self.calib[i].is_some())
    }

    /// Classification accuracy of argmax(logits) over `data`.
    pub fn evaluate(
        &self,
        data: &Dataset<T>,
        mode: &EvalMode<'_, T>,
        rng: &mut NoiseRng,
        batch_size: usize,
    ) -> Result<f64> {
        let mut correct = 0usize;
        for r in batch_ranges(data.len(), batch_size) {
            let idx: Vec<usize> = r.collect();
            let (x, y) = data.batch(&idx)?;
            let logits = self.forward(&x, mode, rng)?;
            let c = self.classes;
            for (row, &label) in logits.data().chunks(c).zip(&y) {
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if pred == label {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

// ---------------------------------------------------------------------------
// Manifest round trip

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerEntry {
    Dense {
        #[serde(rename = "in")]
        in_dim: usize,
        out: usize,
        weight_offset: usize,
        bias_offset: usize,
    },
    Conv2d {
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        weight_offset: usize,
        bias_offset: usize,
    },
    Relu,
    MaxPool {
        k: usize,
    },
    AvgPool {
        k: usize,
    },
    Flatten,
    ResidualAdd {
        from: usize,
    },
    SoftmaxHead,
}

#[derive(Serialize, Deserialize)]
struct CalibEntry {
    bits: f64,
    input: Option<(f64, f64)>,
    output: Option<(f64, f64)>,
    weight_full: Option<(f64, f64)>,
    weight_rows: Vec<(f64, f64)>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    name: String,
    input_shape: Vec<usize>,
    classes: usize,
    blob: String,
    blob_sha256: String,
    layers: Vec<serde_json::Value>,
    calibration: Vec<Option<CalibEntry>>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let d = h.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

fn range_pair<T: Element>(r: &Option<CalibratedRange<T>>) -> Option<(f64, f64)> {
    r.as_ref().map(|r| (r.x_min.to_f64_(), r.x_max.to_f64_()))
}

fn pair_range<T: Element>(p: &Option<(f64, f64)>, bits: f64) -> Option<CalibratedRange<T>> {
    p.map(|(lo, hi)| CalibratedRange::new(T::from_f64_(lo), T::from_f64_(hi), bits))
}

impl<T: Element> ModelGraph<T> {
    /// Writes `<path>` (JSON manifest) and the weight blob next to it. The
    /// blob name is recorded in the manifest; weights are stored as f32.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let blob_name = format!(
            "{}.weights.bin",
            manifest_path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("model")
        );
        let mut blob: Vec<u8> = Vec::new();
        let mut entries = Vec::new();
        let mut offset = 0usize;
        let push = |t: &Tensor<T>, blob: &mut Vec<u8>, offset: &mut usize| -> usize {
            let at = *offset;
            for &v in t.data() {
                blob.extend_from_slice(&(v.to_f64_() as f32).to_le_bytes());
            }
            *offset += t.numel();
            at
        };
        for layer in &self.layers {
            let e = match layer {
                Layer::Dense { w, b } => {
                    let wo = push(w, &mut blob, &mut offset);
                    let bo = push(b, &mut blob, &mut offset);
                    LayerEntry::Dense {
                        in_dim: w.shape()[1],
                        out: w.shape()[0],
                        weight_offset: wo,
                        bias_offset: bo,
                    }
                }
                Layer::Conv2d { w, b, stride, pad } => {
                    let wo = push(w, &mut blob, &mut offset);
                    let bo = push(b, &mut blob, &mut offset);
                    LayerEntry::Conv2d {
                        out_channels: w.shape()[0],
                        in_channels: w.shape()[1],
                        kh: w.shape()[2],
                        kw: w.shape()[3],
                        stride: *stride,
                        pad: *pad,
                        weight_offset: wo,
                        bias_offset: bo,
                    }
                }
                Layer::ReLU => LayerEntry::Relu,
                Layer::MaxPool { k } => LayerEntry::MaxPool { k: *k },
                Layer::AvgPool { k } => LayerEntry::AvgPool { k: *k },
                Layer::Flatten => LayerEntry::Flatten,
                Layer::ResidualAdd { from } => LayerEntry::ResidualAdd { from: *from },
                Layer::SoftmaxHead => LayerEntry::SoftmaxHead,
            };
            entries.push(serde_json::to_value(e)?);
        }
        let calibration = self
            .calib
            .iter()
            .map(|c| {
                c.as_ref().map(|c| CalibEntry {
                    bits: c
                        .input
                        .as_ref()
                        .or(c.output.as_ref())
                        .map(|r| r.bits)
                        .unwrap_or(8.0),
                    input: range_pair(&c.input),
                    output: range_pair(&c.output),
                    weight_full: range_pair(&c.weight_full),
                    weight_rows: c
                        .weight_rows
                        .iter()
                        .map(|r| (r.x_min.to_f64_(), r.x_max.to_f64_()))
                        .collect(),
                })
            })
            .collect();
        let manifest = Manifest {
            name: self.name.clone(),
            input_shape: self.input_shape.clone(),
            classes: self.classes,
            blob: blob_name.clone(),
            blob_sha256: sha256_hex(&blob),
            layers: entries,
            calibration,
        };
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        std::fs::write(dir.join(&blob_name), &blob)?;
        std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let blob = std::fs::read(dir.join(&manifest.blob))?;
        let got = sha256_hex(&blob);
        if got != manifest.blob_sha256 {
            return Err(Error::data(format!(
                "weight blob checksum mismatch: manifest {} vs blob {}",
                manifest.blob_sha256, got
            )));
        }
        if blob.len() % 4 != 0 {
            return Err(Error::data("weight blob length is not a multiple of 4"));
        }
        let floats: Vec<T> = blob
            .chunks_exact(4)
            .map(|c| T::from_f64_(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let fetch = |at: usize, n: usize, layer: usize| -> Result<Vec<T>> {
            floats.get(at..at + n).map(|s| s.to_vec()).ok_or_else(|| Error::Load {
                layer,
                msg: format!("weight blob too short for offset {at}+{n}"),
            })
        };
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for (i, v) in manifest.layers.iter().enumerate() {
            let entry: LayerEntry =
                serde_json::from_value(v.clone()).map_err(|e| Error::Load {
                    layer: i,
                    msg: format!("unrecognized layer entry: {e}"),
                })?;
            let layer = match entry {
                LayerEntry::Dense {
                    in_dim,
                    out,
                    weight_offset,
                    bias_offset,
                } => Layer::Dense {
                    w: Tensor::from_vec(fetch(weight_offset, out * in_dim, i)?, vec![out, in_dim])?,
                    b: Tensor::from_vec(fetch(bias_offset, out, i)?, vec![out])?,
                },
                LayerEntry::Conv2d {
                    out_channels,
                    in_channels,
                    kh,
                    kw,
                    stride,
                    pad,
                    weight_offset,
                    bias_offset,
                } => Layer::Conv2d {
                    w: Tensor::from_vec(
                        fetch(weight_offset, out_channels * in_channels * kh * kw, i)?,
                        vec![out_channels, in_channels, kh, kw],
                    )?,
                    b: Tensor::from_vec(fetch(bias_offset, out_channels, i)?, vec![out_channels])?,
                    stride,
                    pad,
                },
                LayerEntry::Relu => Layer::ReLU,
                LayerEntry::MaxPool { k } => Layer::MaxPool { k },
                LayerEntry::AvgPool { k } => Layer::AvgPool { k },
                LayerEntry::Flatten => Layer::Flatten,
                LayerEntry::ResidualAdd { from } => Layer::ResidualAdd { from },
                LayerEntry::SoftmaxHead => Layer::SoftmaxHead,
            };
            layers.push(layer);
        }
        let mut g = ModelGraph::new(
            manifest.name,
            layers,
            manifest.input_shape,
            manifest.classes,
        )?;
        for (i, c) in manifest.calibration.iter().enumerate() {
            if i >= g.calib.len() {
                break;
            }
            g.calib[i] = c.as_ref().map(|c| LayerCalib {
                input: pair_range(&c.input, c.bits),
                output: pair_range(&c.output, c.bits),
                weight_full: pair_range(&c.weight_full, c.bits),
                weight_rows: c
                    .weight_rows
                    .iter()
                    .map(|&(lo, hi)| CalibratedRange::new(T::from_f64_(lo), T::from_f64_(hi), c.bits))
                    .collect(),
            });
        }
        Ok(g)
    }
}

// ---------------------------------------------------------------------------
// Reference-model training

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchPreset {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Training fails if test accuracy lands below this.
    pub min_accuracy: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 32,
            lr: 0.002,
            min_accuracy: 0.97,
            seed: 0,
        }
    }
}

fn he_tensor<T: Element>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let std = T::from_f64_((2.0 / fan_in as f64).sqrt());
    Tensor::randn(rng, shape).scale(std)
}

impl<T: Element> ModelGraph<T> {
    pub fn preset(
        preset: ArchPreset,
        input_shape: Vec<usize>,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = match preset {
            ArchPreset::Mlp => {
                let f: usize = input_shape.iter().product();
                let h = 128;
                vec![
                    Layer::Flatten,
                    Layer::Dense {
                        w: he_tensor(&mut rng, vec![h, f], f),
                        b: Tensor::filled(T::zero(), vec![h]),
                    },
                    Layer::ReLU,
                    Layer::Dense {
                        w: he_tensor(&mut rng, vec![classes, h], h),
                        b: Tensor::filled(T::zero(), vec![classes]),
                    },
                    Layer::SoftmaxHead,
                ]
            }
            ArchPreset::Cnn => {
                if input_shape.len() != 3 {
                    return Err(Error::contract(
                        "cnn preset expects [C,H,W] input".to_string(),
                    ));
                }
                let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
                let (c1, c2, fc) = (8, 16, 64);
                let flat = c2 * (h / 4) * (w / 4);
                vec![
                    Layer::Conv2d {
                        w: he_tensor(&mut rng, vec![c1, c, 3, 3], c * 9),
                        b: Tensor::filled(T::zero(), vec![c1]),
                        stride: 1,
                        pad: 1,
                    },
                    Layer::ReLU,
                    Layer::MaxPool { k: 2 },
                    Layer::Conv2d {
                        w: he_tensor(&mut rng, vec![c2, c1, 3, 3], c1 * 9),
                        b: Tensor::filled(T::zero(), vec![c2]),
                        stride: 1,
                        pad: 1,
                    },
                    Layer::ReLU,
                    Layer::MaxPool { k: 2 },
                    Layer::Flatten,
                    Layer::Dense {
                        w: he_tensor(&mut rng, vec![fc, flat], flat),
                        b: Tensor::filled(T::zero(), vec![fc]),
                    },
                    Layer::ReLU,
                    Layer::Dense {
                        w: he_tensor(&mut rng, vec![classes, fc], fc),
                        b: Tensor::filled(T::zero(), vec![classes]),
                    },
                    Layer::SoftmaxHead,
                ]
            }
        };
        ModelGraph::new(format!("{preset:?}").to_lowercase(), layers, input_shape, classes)
    }
}

/// Trains a preset on `train`, evaluates on `test`, and returns the model
/// with its clean test accuracy. Deterministic for a fixed seed. Weights are
/// snapped to f32 at the end so the in-memory model equals its saved form.
pub fn train_reference_model<T: Element>(
    preset: ArchPreset,
    train: &Dataset<T>,
    test: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<(ModelGraph<T>, f64)> {
    let mut model = ModelGraph::preset(preset, train.features.shape()[1..].to_vec(), train.classes, cfg.seed)?;
    let mut params = model.params_flat();
    let shapes = model.param_shapes();
    let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
    let mut opt = Adam::new(cfg.lr, &sizes);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(train.len(), cfg.seed.wrapping_add(epoch as u64));
        for r in batch_ranges(train.len(), cfg.batch_size) {
            let idx: Vec<usize> = order[r].to_vec();
            let (x, y) = train.batch(&idx)?;
            let tape = Tape::new();
            let leaves: Vec<Tensor<T>> = params
                .iter()
                .zip(&shapes)
                .map(|(p, s)| tape.leaf(p.clone(), s.clone()))
                .collect::<Result<_>>()?;
            let logits = model.forward_train(&x, &leaves)?;
            let loss = logits.softmax_cross_entropy(&y)?;
            let lv = loss.item().to_f64_();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    step,
                    msg: format!("training loss became {lv}"),
                });
            }
            let grads = loss.backward()?;
            let gvecs: Vec<Vec<T>> = leaves
                .iter()
                .map(|l| {
                    grads
                        .wrt(l)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![T::zero(); l.numel()])
                })
                .collect();
            opt.step(&mut params, &gvecs);
            step += 1;
        }
    }
    for p in &mut params {
        for v in p.iter_mut() {
            *v = T::from_f64_(v.to_f64_() as f32 as f64);
        }
    }
    model.set_params_flat(&params)?;
    let acc = model.evaluate(test, &EvalMode::Clean, &mut NoiseRng::new(0), cfg.batch_size)?;
    if acc < cfg.min_accuracy {
        return Err(Error::Diverged {
            step,
            msg: format!(
                "clean accuracy {acc:.4} below required {:.4}",
                cfg.min_accuracy
            ),
        });
    }
    Ok((model, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use approx::assert_abs_diff_eq;

    fn tiny_dense_model() -> ModelGraph<f64> {
        let w = Tensor::from_vec(vec![0.5, -0.25, 0.1, 0.3, -0.2, 0.7, 0.0, -0.4], vec![2, 4])
            .unwrap();
        let b = Tensor::from_vec(vec![0.1, -0.1], vec![2]).unwrap();
        ModelGraph::new(
            "tiny",
            vec![Layer::Flatten, Layer::Dense { w, b }, Layer::SoftmaxHead],
            vec![4],
            2,
        )
        .unwrap()
    }

    #[test]
    fn dense_forward_matches_by_hand() {
        let m = tiny_dense_model();
        let x = Tensor::from_vec(vec![1.0, 2.0, -1.0, 0.5], vec![1, 4]).unwrap();
        let y = m
            .forward(&x, &EvalMode::Clean, &mut NoiseRng::new(0))
            .unwrap();
        // row0: 0.5*1 - 0.25*2 + 0.1*(-1) + 0.3*0.5 + 0.1
        assert_abs_diff_eq!(y.data()[0], 0.15, epsilon = 1e-12);
        // row1: -0.2*1 + 0.7*2 + 0*(-1) - 0.4*0.5 - 0.1
        assert_abs_diff_eq!(y.data()[1], 0.9, epsilon = 1e-12);
    }

    #[test]
    fn shape_check_rejects_mismatches() {
        let w = Tensor::<f64>::filled(0.0, vec![2, 5]);
        let b = Tensor::<f64>::filled(0.0, vec![2]);
        let err = ModelGraph::new(
            "bad",
            vec![Layer::Dense { w, b }],
            vec![4],
            2,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Load { layer: 0, .. }));
    }

    #[test]
    fn residual_shapes_and_forward() {
        let w = Tensor::<f64>::filled(0.1, vec![4, 4]);
        let b = Tensor::<f64>::filled(0.0, vec![4]);
        let m = ModelGraph::new(
            "res",
            vec![
                Layer::Flatten,
                Layer::Dense { w, b },
                Layer::ReLU,
                Layer::ResidualAdd { from: 0 },
            ],
            vec![4],
            4,
        )
        .unwrap();
        let x = Tensor::from_vec(vec![1.0, 1.0, 1.0, 1.0], vec![1, 4]).unwrap();
        let y = m
            .forward(&x, &EvalMode::Clean, &mut NoiseRng::new(0))
            .unwrap();
        // dense output 0.4 each, relu keeps, + residual 1.0
        for &v in y.data() {
            assert_abs_diff_eq!(v, 1.4, epsilon = 1e-12);
        }
        // residual against a mismatched source shape fails the static check
        let w2 = Tensor::<f64>::filled(0.1, vec![3, 4]);
        let b2 = Tensor::<f64>::filled(0.0, vec![3]);
        assert!(ModelGraph::new(
            "res-bad",
            vec![
                Layer::Flatten,
                Layer::Dense { w: w2, b: b2 },
                Layer::ResidualAdd { from: 0 },
            ],
            vec![4],
            3,
        )
        .is_err());
    }

    #[test]
    fn mac_counts_match_brute_force() {
        let m: ModelGraph<f64> =
            ModelGraph::preset(ArchPreset::Cnn, vec![1, 16, 16], 10, 0).unwrap();
        let macs = m.n_mac().unwrap();
        let shapes = m.shapes().unwrap();
        // brute-force counter: walk every output element and count products
        let mut cur = vec![1usize, 16, 16];
        for (i, layer) in m.layers.iter().enumerate() {
            match layer {
                Layer::Dense { w, .. } => {
                    let mut count = 0u64;
                    for _o in 0..w.shape()[0] {
                        for _k in 0..w.shape()[1] {
                            count += 1;
                        }
                    }
                    assert_eq!(macs[i], count, "layer {i}");
                }
                Layer::Conv2d { w, .. } => {
                    let (o, c, kh, kw) =
                        (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
                    let (oh, ow) = (shapes[i][1], shapes[i][2]);
                    let mut count = 0u64;
                    for _ in 0..o {
                        for _ in 0..oh * ow {
                            for _ in 0..c * kh * kw {
                                count += 1;
                            }
                        }
                    }
                    assert_eq!(macs[i], count, "layer {i}");
                }
                _ => assert_eq!(macs[i], 0),
            }
            cur = shapes[i].clone();
        }
        let _ = cur;
        assert!(m.n_mac_total().unwrap() > 100_000);
    }

    #[test]
    fn calibrate_then_quantized_eval_close_to_clean() {
        let train: Dataset<f64> = synthetic_dataset(8, 1, "train");
        let mut m: ModelGraph<f64> =
            ModelGraph::preset(ArchPreset::Cnn, vec![1, 16, 16], 10, 3).unwrap();
        m.calibrate(&train, &QuantSpec::default(), 16).unwrap();
        assert!(m.is_calibrated());
        let (x, _) = train.batch(&[0, 1, 2, 3]).unwrap();
        let mut rng = NoiseRng::new(0);
        let clean = m.forward(&x, &EvalMode::Clean, &mut rng).unwrap();
        let quant = m.forward(&x, &EvalMode::Quantized, &mut rng).unwrap();
        let max_abs = clean
            .data()
            .iter()
            .zip(quant.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let spread = clean.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_abs < 0.25 * spread.max(1.0), "8-bit drift {max_abs}");
    }

    #[test]
    fn uncalibrated_noisy_eval_is_contract_error() {
        let m = tiny_dense_model();
        let x = Tensor::from_vec(vec![0.0; 4], vec![1, 4]).unwrap();
        let e = [Tensor::filled(1.0, vec![1])];
        let err = m
            .forward(
                &x,
                &EvalMode::Noisy {
                    spec: &NoiseSpec::thermal(),
                    energies: &e,
                },
                &mut NoiseRng::new(0),
            )
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn noisy_eval_converges_to_quantized_at_high_energy() {
        let train: Dataset<f64> = synthetic_dataset(6, 2, "train");
        let mut m: ModelGraph<f64> =
            ModelGraph::preset(ArchPreset::Mlp, vec![1, 16, 16], 10, 5).unwrap();
        m.calibrate(&train, &QuantSpec::default(), 16).unwrap();
        let (x, _) = train.batch(&[0, 1]).unwrap();
        let mut rng = NoiseRng::new(9);
        let quant = m.forward(&x, &EvalMode::Quantized, &mut rng).unwrap();
        let e: Vec<Tensor<f64>> = m
            .noisy_layers()
            .iter()
            .map(|_| Tensor::filled(1e12, vec![1]))
            .collect();
        let noisy = m
            .forward(
                &x,
                &EvalMode::Noisy {
                    spec: &NoiseSpec::thermal(),
                    energies: &e,
                },
                &mut rng,
            )
            .unwrap();
        for (a, b) in noisy.data().iter().zip(quant.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-4);
        }
    }

    #[test]
    fn manifest_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let train: Dataset<f64> = synthetic_dataset(4, 7, "train");
        let mut m: ModelGraph<f64> =
            ModelGraph::preset(ArchPreset::Cnn, vec![1, 16, 16], 10, 11).unwrap();
        m.calibrate(&train, &QuantSpec::default(), 8).unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        let loaded: ModelGraph<f64> = ModelGraph::load(&path).unwrap();
        // save an already-f32-snapped model again: second round trip is exact
        let path2 = dir.path().join("model2.json");
        loaded.save(&path2).unwrap();
        let loaded2: ModelGraph<f64> = ModelGraph::load(&path2).unwrap();
        let (x, _) = train.batch(&[0, 1, 2]).unwrap();
        let mut rng = NoiseRng::new(0);
        let a = loaded.forward(&x, &EvalMode::Clean, &mut rng).unwrap();
        let b = loaded2.forward(&x, &EvalMode::Clean, &mut rng).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-15);
        }
        assert!(loaded.is_calibrated());
        let q1 = loaded.forward(&x, &EvalMode::Quantized, &mut rng).unwrap();
        let q2 = loaded2.forward(&x, &EvalMode::Quantized, &mut rng).unwrap();
        assert_eq!(q1.data(), q2.data());
    }

    #[test]
    fn minimal_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let w = Tensor::from_vec(vec![0.5f64, -0.5, 0.25, 0.75, 0.0, -1.0, 0.5, 1.0], vec![2, 4])
            .unwrap();
        let b = Tensor::from_vec(vec![0.0f64, 0.5], vec![2]).unwrap();
        let m = ModelGraph::new(
            "minimal",
            vec![Layer::Dense { w, b }, Layer::SoftmaxHead],
            vec![4],
            2,
        )
        .unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let loaded: ModelGraph<f64> = ModelGraph::load(&path).unwrap();
        let x = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0], vec![1, 4]).unwrap();
        let y = loaded
            .forward(&x, &EvalMode::Clean, &mut NoiseRng::new(0))
            .unwrap();
        assert_abs_diff_eq!(y.data()[0], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(y.data()[1], 0.5, epsilon = 1e-7);
    }

    #[test]
    fn truncated_blob_is_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_dense_model();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let blob = dir.path().join("m.weights.bin");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        let err = ModelGraph::<f64>::load(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn unknown_layer_kind_names_index() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_dense_model();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("softmax_head", "batch_norm");
        std::fs::write(&path, text).unwrap();
        match ModelGraph::<f64>::load(&path).unwrap_err() {
            Error::Load { layer, .. } => assert_eq!(layer, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn training_is_deterministic_and_accurate() {
        let train: Dataset<f64> = synthetic_dataset(40, 100, "train");
        let test: Dataset<f64> = synthetic_dataset(20, 200, "test");
        let cfg = TrainConfig {
            epochs: 4,
            min_accuracy: 0.95,
            ..TrainConfig::default()
        };
        let (m1, acc1) = train_reference_model(ArchPreset::Mlp, &train, &test, &cfg).unwrap();
        let (m2, acc2) = train_reference_model(ArchPreset::Mlp, &train, &test, &cfg).unwrap();
        assert!(acc1 >= 0.95, "accuracy {acc1}");
        assert_eq!(acc1, acc2);
        for (a, b) in m1.params_flat().iter().zip(m2.params_flat()) {
            assert_eq!(a, &b);
        }
    }

    #[test]
    fn unreachable_accuracy_gate_is_error() {
        let train: Dataset<f64> = synthetic_dataset(5, 1, "train");
        let test: Dataset<f64> = synthetic_dataset(5, 2, "test");
        let cfg = TrainConfig {
            epochs: 0,
            min_accuracy: 0.99,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_reference_model::<f64>(ArchPreset::Mlp, &train, &test, &cfg),
            Err(Error::Diverged { .. })
        ));
    }
}
