//! The white-box classifier under attack.
//!
//! A small feed-forward network over `H x W x 3` inputs scaled to `[0, 1]`:
//! 3x3 stride-2 convolutions and dense layers, rectifier between layers, and
//! a final linear layer producing `K` logits. Backpropagation is written out
//! by hand so that both parameter gradients (training) and input gradients
//! (attacks) are exact.

mod io;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colorspace::RgbImage;
use crate::error::{Error, Result};

pub use io::{load_model, save_model, sidecar_path, LayerDescription, ModelDescription};
pub use train::{accuracy, fine_tune, train_model, TrainConfig, TrainOutcome};

/// Network families. `Conv` and `Mlp` are the two independent architectures
/// used for transfer experiments; `Linear` has no hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Conv,
    Mlp,
    Linear,
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Conv => "conv",
            Architecture::Mlp => "mlp",
            Architecture::Linear => "linear",
        }
    }

    fn code(&self) -> u8 {
        match self {
            Architecture::Conv => 0,
            Architecture::Mlp => 1,
            Architecture::Linear => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Architecture::Conv),
            1 => Some(Architecture::Mlp),
            2 => Some(Architecture::Linear),
            _ => None,
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" | "a" | "A" => Ok(Architecture::Conv),
            "mlp" | "b" | "B" => Ok(Architecture::Mlp),
            "linear" => Ok(Architecture::Linear),
            other => Err(Error::InvalidConfig(format!("unknown architecture {other:?}"))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

const CONV1_CHANNELS: usize = 8;
const CONV2_CHANNELS: usize = 16;
const MLP_HIDDEN: usize = 64;

/// Model output scores, one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Logits(pub Vec<f64>);

impl Logits {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// 3x3 convolution, stride 2, zero padding 1. Activations are channel-major.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv {
    pub in_c: usize,
    pub out_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    /// `[out_c][in_c][3][3]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv {
    pub fn out_h(&self) -> usize {
        (self.in_h - 1) / 2 + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - 1) / 2 + 1
    }

    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let plane = self.in_h * self.in_w;
        out.clear();
        out.resize(self.out_c * oh * ow, 0.0);
        for oc in 0..self.out_c {
            let dst = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
            dst.fill(self.bias[oc]);
            for ic in 0..self.in_c {
                let src = &input[ic * plane..(ic + 1) * plane];
                let k = &self.weight[(oc * self.in_c + ic) * 9..(oc * self.in_c + ic + 1) * 9];
                for oy in 0..oh {
                    for ky in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy as usize >= self.in_h {
                            continue;
                        }
                        let row = &src[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for kx in 0..3 {
                                let ix = (2 * ox + kx) as isize - 1;
                                if ix >= 0 && (ix as usize) < self.in_w {
                                    acc += k[ky * 3 + kx] * row[ix as usize];
                                }
                            }
                            dst[oy * ow + ox] += acc;
                        }
                    }
                }
            }
        }
    }

    /// Accumulates parameter gradients (when given) and returns `dLoss/dInput`.
    fn backward(&self, input: &[f64], grad_out: &[f64], params: Option<(&mut [f64], &mut [f64])>) -> Vec<f64> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let plane = self.in_h * self.in_w;
        let mut grad_in = vec![0.0; input.len()];
        let (mut gw, mut gb) = match params {
            Some((w, b)) => (Some(w), Some(b)),
            None => (None, None),
        };
        for oc in 0..self.out_c {
            let go = &grad_out[oc * oh * ow..(oc + 1) * oh * ow];
            if let Some(gb) = gb.as_deref_mut() {
                gb[oc] += go.iter().sum::<f64>();
            }
            for ic in 0..self.in_c {
                let base = (oc * self.in_c + ic) * 9;
                let k = &self.weight[base..base + 9];
                let src = &input[ic * plane..(ic + 1) * plane];
                let gi = &mut grad_in[ic * plane..(ic + 1) * plane];
                let mut kgrad = [0.0; 9];
                for oy in 0..oh {
                    for ky in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy as usize >= self.in_h {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..ow {
                            let g = go[oy * ow + ox];
                            if g == 0.0 {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (2 * ox + kx) as isize - 1;
                                if ix < 0 || ix as usize >= self.in_w {
                                    continue;
                                }
                                let idx = iy * self.in_w + ix as usize;
                                gi[idx] += g * k[ky * 3 + kx];
                                kgrad[ky * 3 + kx] += g * src[idx];
                            }
                        }
                    }
                }
                if let Some(gw) = gw.as_deref_mut() {
                    for (d, s) in gw[base..base + 9].iter_mut().zip(kgrad) {
                        *d += s;
                    }
                }
            }
        }
        grad_in
    }
}

/// Fully connected layer, `weight` is `[outputs][inputs]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weight.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        }));
    }

    fn backward(&self, input: &[f64], grad_out: &[f64], params: Option<(&mut [f64], &mut [f64])>) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.inputs];
        for (row, &g) in self.weight.chunks_exact(self.inputs).zip(grad_out) {
            if g == 0.0 {
                continue;
            }
            for (gi, w) in grad_in.iter_mut().zip(row) {
                *gi += g * w;
            }
        }
        if let Some((gw, gb)) = params {
            for (o, &g) in grad_out.iter().enumerate() {
                gb[o] += g;
                if g == 0.0 {
                    continue;
                }
                for (d, x) in gw[o * self.inputs..(o + 1) * self.inputs].iter_mut().zip(input) {
                    *d += g * x;
                }
            }
        }
        grad_in
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer {
    Conv(Conv),
    Dense(Dense),
}

impl Layer {
    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        match self {
            Layer::Conv(c) => c.forward(input, out),
            Layer::Dense(d) => d.forward(input, out),
        }
    }

    fn backward(&self, input: &[f64], grad_out: &[f64], params: Option<(&mut [f64], &mut [f64])>) -> Vec<f64> {
        match self {
            Layer::Conv(c) => c.backward(input, grad_out, params),
            Layer::Dense(d) => d.backward(input, grad_out, params),
        }
    }

    pub fn weight(&self) -> &[f64] {
        match self {
            Layer::Conv(c) => &c.weight,
            Layer::Dense(d) => &d.weight,
        }
    }

    pub fn bias(&self) -> &[f64] {
        match self {
            Layer::Conv(c) => &c.bias,
            Layer::Dense(d) => &d.bias,
        }
    }

    fn params_mut(&mut self) -> (&mut Vec<f64>, &mut Vec<f64>) {
        match self {
            Layer::Conv(c) => (&mut c.weight, &mut c.bias),
            Layer::Dense(d) => (&mut d.weight, &mut d.bias),
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            Layer::Conv(c) => c.in_c * 9,
            Layer::Dense(d) => d.inputs,
        }
    }

    fn output_len(&self) -> usize {
        match self {
            Layer::Conv(c) => c.out_c * c.out_h() * c.out_w(),
            Layer::Dense(d) => d.outputs,
        }
    }
}

/// Parameter gradients, laid out like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weight().len()], vec![0.0; l.bias().len()]))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.iter_mut().zip(ow).for_each(|(a, b)| *a += b);
            b.iter_mut().zip(ob).for_each(|(a, b)| *a += b);
        }
    }
}

/// Classifier weights plus the architecture they instantiate.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    width: usize,
    height: usize,
    classes: usize,
    layers: Vec<Layer>,
}

struct Trace {
    /// `inputs[i]` is the (activated) input to layer `i`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of every layer; the last one is the logits.
    pre: Vec<Vec<f64>>,
}

impl Model {
    /// Zero-initialized model of the given shape.
    pub fn zeros(arch: Architecture, width: usize, height: usize, classes: usize) -> Result<Self> {
        if classes == 0 || width == 0 || height == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        let pixels = width * height * 3;
        let dense = |inputs: usize, outputs: usize| {
            Layer::Dense(Dense {
                inputs,
                outputs,
                weight: vec![0.0; inputs * outputs],
                bias: vec![0.0; outputs],
            })
        };
        let layers = match arch {
            Architecture::Conv => {
                let c1 = Conv {
                    in_c: 3,
                    out_c: CONV1_CHANNELS,
                    in_h: height,
                    in_w: width,
                    weight: vec![0.0; CONV1_CHANNELS * 3 * 9],
                    bias: vec![0.0; CONV1_CHANNELS],
                };
                let c2 = Conv {
                    in_c: CONV1_CHANNELS,
                    out_c: CONV2_CHANNELS,
                    in_h: c1.out_h(),
                    in_w: c1.out_w(),
                    weight: vec![0.0; CONV2_CHANNELS * CONV1_CHANNELS * 9],
                    bias: vec![0.0; CONV2_CHANNELS],
                };
                let flat = CONV2_CHANNELS * c2.out_h() * c2.out_w();
                vec![Layer::Conv(c1), Layer::Conv(c2), dense(flat, classes)]
            }
            Architecture::Mlp => vec![dense(pixels, MLP_HIDDEN), dense(MLP_HIDDEN, classes)],
            Architecture::Linear => vec![dense(pixels, classes)],
        };
        Ok(Self {
            arch,
            width,
            height,
            classes,
            layers,
        })
    }

    /// Uniform init in `±sqrt(6 / fan_in)`, biases zero.
    pub fn new(arch: Architecture, width: usize, height: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch, width, height, classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let limit = (6.0 / layer.fan_in() as f64).sqrt();
            let (w, _) = layer.params_mut();
            for v in w.iter_mut() {
                *v = rng.gen_range(-limit..limit);
            }
        }
        Ok(model)
    }

    pub(crate) fn from_parts(
        arch: Architecture,
        width: usize,
        height: usize,
        classes: usize,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        let template = Self::zeros(arch, width, height, classes)?;
        let shapes_match = template.layers.len() == layers.len()
            && template.layers.iter().zip(&layers).all(|(t, l)| {
                t.weight().len() == l.weight().len() && t.bias().len() == l.bias().len()
            });
        if !shapes_match {
            return Err(Error::MalformedWeights(format!(
                "layer shapes do not match a {arch} model for {width}x{height}, {classes} classes"
            )));
        }
        if layers.iter().any(|l| l.weight().iter().chain(l.bias()).any(|v| !v.is_finite())) {
            return Err(Error::MalformedWeights("non-finite weight".into()));
        }
        Ok(Self {
            arch,
            width,
            height,
            classes,
            layers,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn input_len(&self) -> usize {
        self.width * self.height * 3
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight().len() + l.bias().len()).sum()
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Set the bias of the final layer; handy for constructing reference models.
    pub fn set_output_bias(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.classes {
            return Err(self.shape_error(bias.len()));
        }
        let last = self.layers.last_mut().expect("model has layers");
        last.params_mut().1.copy_from_slice(bias);
        Ok(())
    }

    /// Reorder output classes so that new class `i` is old class `perm[i]`.
    pub fn permute_classes(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.classes];
        if perm.len() != self.classes || perm.iter().any(|&p| p >= self.classes || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidConfig("not a permutation of the classes".into()));
        }
        let mut out = self.clone();
        if let Some(Layer::Dense(last)) = out.layers.last_mut() {
            let old = last.clone();
            for (new, &src) in perm.iter().enumerate() {
                last.weight[new * old.inputs..(new + 1) * old.inputs]
                    .copy_from_slice(&old.weight[src * old.inputs..(src + 1) * old.inputs]);
                last.bias[new] = old.bias[src];
            }
        }
        Ok(out)
    }

    fn shape_error(&self, got: usize) -> Error {
        Error::ShapeMismatch {
            expected: format!("{}x{}x3 = {} inputs", self.width, self.height, self.input_len()),
            got: format!("{got}"),
        }
    }

    fn check_image(&self, img: &RgbImage) -> Result<()> {
        if img.dims() != (self.width, self.height) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} image", self.width, self.height),
                got: format!("{}x{} image", img.width(), img.height()),
            });
        }
        Ok(())
    }

    /// Interleaved HWC to channel-major CHW.
    fn to_planar(&self, x: &[f64]) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; n * 3];
        for (p, px) in x.chunks_exact(3).enumerate() {
            out[p] = px[0];
            out[n + p] = px[1];
            out[2 * n + p] = px[2];
        }
        out
    }

    fn from_planar(&self, x: &[f64]) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; n * 3];
        for p in 0..n {
            out[3 * p] = x[p];
            out[3 * p + 1] = x[n + p];
            out[3 * p + 2] = x[2 * n + p];
        }
        out
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = self.to_planar(x);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.output_len());
            layer.forward(&current, &mut out);
            let next = if i < last {
                out.iter().map(|v| v.max(0.0)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut current, next));
            pre.push(out);
        }
        Trace { inputs, pre }
    }

    fn backward(&self, trace: &Trace, loss_grad: &[f64], mut grads: Option<&mut Gradients>) -> Vec<f64> {
        let mut grad = loss_grad.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                for (g, &z) in grad.iter_mut().zip(&trace.pre[i]) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let params = grads.as_deref_mut().map(|g| {
                let (w, b) = &mut g.layers[i];
                (w.as_mut_slice(), b.as_mut_slice())
            });
            grad = self.layers[i].backward(&trace.inputs[i], &grad, params);
        }
        self.from_planar(&grad)
    }

    /// Logits for a continuous interleaved RGB input in `[0, 1]`.
    pub fn forward_unit(&self, x: &[f64]) -> Result<Logits> {
        if x.len() != self.input_len() {
            return Err(self.shape_error(x.len()));
        }
        let mut trace = self.trace(x);
        Ok(Logits(trace.pre.pop().expect("model has layers")))
    }

    pub fn forward(&self, img: &RgbImage) -> Result<Logits> {
        self.check_image(img)?;
        self.forward_unit(&img.to_unit())
    }

    pub fn predict(&self, img: &RgbImage) -> Result<usize> {
        Ok(self.forward(img)?.argmax())
    }

    /// Vector-Jacobian product `loss_grad^T * dLogits/dInput`, interleaved RGB.
    pub fn input_gradient(&self, x: &[f64], loss_grad: &[f64]) -> Result<Vec<f64>> {
        self.forward_with_input_gradient(x, |_| Ok(loss_grad.to_vec()))
            .map(|(_, g)| g)
    }

    /// One forward pass, then backpropagate whatever upstream gradient `upstream`
    /// derives from the logits.
    pub fn forward_with_input_gradient<F>(&self, x: &[f64], upstream: F) -> Result<(Logits, Vec<f64>)>
    where
        F: FnOnce(&Logits) -> Result<Vec<f64>>,
    {
        if x.len() != self.input_len() {
            return Err(self.shape_error(x.len()));
        }
        let trace = self.trace(x);
        let logits = Logits(trace.pre.last().expect("model has layers").clone());
        let loss_grad = upstream(&logits)?;
        if loss_grad.len() != self.classes {
            return Err(Error::ShapeMismatch {
                expected: format!("{} logit gradients", self.classes),
                got: format!("{}", loss_grad.len()),
            });
        }
        let grad = self.backward(&trace, &loss_grad, None);
        Ok((logits, grad))
    }

    /// Softmax cross-entropy of one sample and its parameter gradient,
    /// accumulated into `grads`.
    pub(crate) fn accumulate_cross_entropy(&self, x: &[f64], label: usize, grads: &mut Gradients) -> f64 {
        let trace = self.trace(x);
        let logits = trace.pre.last().expect("model has layers");
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = total.ln() - (logits[label] - max);
        let mut dz: Vec<f64> = exps.iter().map(|e| e / total).collect();
        dz[label] -= 1.0;
        self.backward(&trace, &dz, Some(grads));
        loss
    }

    pub(crate) fn zero_gradients(&self) -> Gradients {
        Gradients::zeros_like(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = Model::zeros(Architecture::Conv, 16, 16, 5).unwrap();
        let img = RgbImage::filled(16, 16, [200, 10, 30]);
        assert_eq!(m.forward(&img).unwrap().0, vec![0.0; 5]);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Model::new(Architecture::Conv, 16, 16, 4, 9).unwrap();
        let x = random_input(m.input_len(), 1);
        assert_eq!(m.forward_unit(&x).unwrap(), m.forward_unit(&x).unwrap());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(Logits(vec![1.0, 3.0, 3.0]).argmax(), 1);
        assert_eq!(Logits(vec![0.0; 4]).argmax(), 0);
    }

    #[test]
    fn rejects_wrong_shapes() {
        let m = Model::new(Architecture::Mlp, 8, 8, 3, 0).unwrap();
        assert!(matches!(m.forward(&RgbImage::filled(4, 8, [0; 3])), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(m.forward_unit(&[0.0; 5]), Err(Error::ShapeMismatch { .. })));
        let x = vec![0.5; m.input_len()];
        assert!(matches!(m.input_gradient(&x, &[1.0]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_input_gradient() {
        let m = Model::new(Architecture::Conv, 16, 16, 4, 2).unwrap();
        let x = random_input(m.input_len(), 5);
        let g = m.input_gradient(&x, &[0.0; 4]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_model_gradient_is_weight_combination() {
        let m = Model::new(Architecture::Linear, 4, 4, 3, 4).unwrap();
        let x = random_input(m.input_len(), 6);
        let up = [0.5, -2.0, 1.25];
        let g = m.input_gradient(&x, &up).unwrap();
        let Layer::Dense(d) = &m.layers[0] else { unreachable!() };
        let n = 16;
        for p in 0..n {
            for c in 0..3 {
                // planar index of interleaved (p, c)
                let col = c * n + p;
                let expected: f64 = (0..3).map(|k| up[k] * d.weight[k * d.inputs + col]).sum();
                assert!((g[3 * p + c] - expected).abs() < 1e-14);
            }
        }
    }

    fn check_input_gradient(arch: Architecture, seed: u64) {
        let m = Model::new(arch, 12, 10, 5, seed).unwrap();
        let x = random_input(m.input_len(), seed + 100);
        let up = [0.3, -1.0, 0.7, 0.0, 1.5];
        let g = m.input_gradient(&x, &up).unwrap();
        let f = |x: &[f64]| -> f64 {
            let z = m.forward_unit(x).unwrap();
            z.0.iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-4;
        let mut checked = 0;
        while checked < 20 {
            let i = rng.gen_range(0..x.len());
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            // skip probes whose FD straddles a rectifier kink
            let fd_half = {
                let mut xp2 = x.clone();
                xp2[i] += h / 2.0;
                let mut xm2 = x.clone();
                xm2[i] -= h / 2.0;
                (f(&xp2) - f(&xm2)) / h
            };
            if (fd - fd_half).abs() > 1e-8 * fd.abs().max(1e-3) {
                continue;
            }
            let denom = fd.abs().max(g[i].abs()).max(1e-8);
            assert!((fd - g[i]).abs() / denom < 1e-4, "{arch}: pixel {i}: fd {fd} vs {}", g[i]);
            checked += 1;
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        for (i, arch) in [Architecture::Conv, Architecture::Mlp, Architecture::Linear].into_iter().enumerate() {
            check_input_gradient(arch, i as u64 + 1);
        }
    }

    #[test]
    fn permuting_classes_permutes_logits() {
        let m = Model::new(Architecture::Conv, 16, 16, 4, 3).unwrap();
        let perm = [2, 0, 3, 1];
        let p = m.permute_classes(&perm).unwrap();
        let x = random_input(m.input_len(), 8);
        let z = m.forward_unit(&x).unwrap();
        let zp = p.forward_unit(&x).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(zp.0[i], z.0[src]);
        }
        assert!(m.permute_classes(&[0, 0, 1, 2]).is_err());
    }
}
