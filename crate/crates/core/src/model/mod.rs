//! Multi-head U-Net: convolutional encoder, bottleneck, a 3-way classification
//! head on globally pooled bottleneck features, and a skip-connected decoder
//! emitting a 1-channel mask logit map at input resolution.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::layer::LayerSpec;
use crate::ops::{self, BackwardRule};
use crate::tensor::{Scalar, Tensor};

pub const NUM_CLASSES: usize = 3;

/// Nonlinearity after every hidden convolution. `Identity` yields a ReLU-free
/// network, for which all backward rules coincide.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Square input extent; must be divisible by `2^encoder_channels.len()`.
    pub input_size: usize,
    pub encoder_channels: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            input_size: 128,
            encoder_channels: vec![16, 32, 64, 128],
            num_classes: NUM_CLASSES,
            seed: 0,
            activation: Activation::Relu,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::InvalidConfig(format!("num_classes must be {NUM_CLASSES}, got {}", self.num_classes)));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::InvalidConfig("encoder_channels must be a non-empty list of positive counts".into()));
        }
        let depth = self.encoder_channels.len();
        if depth >= usize::BITS as usize {
            return Err(Error::InvalidConfig("encoder too deep".into()));
        }
        let factor = 1usize << depth;
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return Err(Error::InvalidConfig(format!(
                "input_size {} not divisible by 2^{depth} = {factor}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.encoder_channels.last().expect("validated")
    }

    /// Extent of the bottleneck feature maps.
    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.depth()
    }

    /// Convolution/affine parameter shapes in storage order.
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut push_conv = |name: &str, o: usize, i: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![o, i, k, k]));
            out.push((format!("{name}.bias"), vec![o]));
        };
        let mut cin = 1;
        for (i, &c) in self.encoder_channels.iter().enumerate() {
            push_conv(&format!("enc{i}"), c, cin, 3);
            cin = c;
        }
        let cb = self.bottleneck_channels();
        push_conv("bottleneck", cb, cin, 3);
        let mut prev = cb;
        let mut decoder = Vec::new();
        for j in (0..self.depth()).rev() {
            let c = self.encoder_channels[j];
            decoder.push((format!("dec{j}"), c, prev + c));
            prev = c;
        }
        for (name, o, i) in decoder {
            push_conv(&name, o, i, 3);
        }
        push_conv("out", 1, self.encoder_channels[0], 1);
        out.push(("head.weight".into(), vec![self.num_classes, cb]));
        out.push(("head.bias".into(), vec![self.num_classes]));
        out
    }

    /// Architecture descriptor in forward order.
    pub fn layer_specs(&self) -> Vec<(String, LayerSpec)> {
        let conv3 = |i, o| LayerSpec::Conv2d { in_channels: i, out_channels: o, kernel: 3, stride: 1, padding: 1 };
        let act = |v: &mut Vec<(String, LayerSpec)>, name: String| {
            if self.activation == Activation::Relu {
                v.push((name, LayerSpec::ReLU));
            }
        };
        let mut v = Vec::new();
        let mut cin = 1;
        for (i, &c) in self.encoder_channels.iter().enumerate() {
            v.push((format!("enc{i}.conv"), conv3(cin, c)));
            act(&mut v, format!("enc{i}.relu"));
            v.push((format!("enc{i}.pool"), LayerSpec::MaxPool2d { kernel: 2 }));
            cin = c;
        }
        let cb = self.bottleneck_channels();
        v.push(("bottleneck.conv".into(), conv3(cin, cb)));
        act(&mut v, "bottleneck.relu".into());
        v.push(("head.gap".into(), LayerSpec::GlobalAvgPool));
        v.push(("head.affine".into(), LayerSpec::Affine { in_features: cb, out_features: self.num_classes }));
        let mut prev = cb;
        for j in (0..self.depth()).rev() {
            let c = self.encoder_channels[j];
            v.push((format!("dec{j}.up"), LayerSpec::Upsample2d { factor: 2 }));
            v.push((format!("dec{j}.conv"), conv3(prev + c, c)));
            act(&mut v, format!("dec{j}.relu"));
            prev = c;
        }
        v.push((
            "out.conv".into(),
            LayerSpec::Conv2d { in_channels: prev, out_channels: 1, kernel: 1, stride: 1, padding: 0 },
        ));
        v
    }

    pub fn param_count(&self) -> usize {
        self.layer_specs().iter().map(|(_, l)| l.param_count()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Parameter-aligned gradient buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T>(pub Vec<Tensor<T>>);

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &UNetModel<T>) -> Self {
        Gradients(model.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect())
    }

    pub fn add_scaled(&mut self, alpha: T, other: &Gradients<T>) -> Result<()> {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        self.0.iter_mut().for_each(|t| t.scale(alpha));
    }

    pub fn flatten(&self) -> Vec<T> {
        self.0.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(Tensor::all_finite)
    }
}

#[derive(Clone, Debug)]
struct Layout {
    enc: Vec<usize>,
    bottleneck: usize,
    dec: Vec<usize>,
    out: usize,
    head: usize,
}

#[derive(Clone, Debug)]
pub struct UNetModel<T = f32> {
    config: UNetConfig,
    layers: Vec<(String, LayerSpec)>,
    params: Vec<Param<T>>,
    layout: Layout,
}

/// Everything a backward pass (of any rule) or Grad-CAM needs, captured
/// during one forward pass on a single image.
#[derive(Clone, Debug)]
pub struct ForwardRecord<T = f32> {
    pub class_logits: Tensor<T>,
    pub mask_logits: Tensor<T>,
    pub(crate) input: Tensor<T>,
    pub(crate) enc_pre: Vec<Tensor<T>>,
    pub(crate) enc_act: Vec<Tensor<T>>,
    pub(crate) pooled: Vec<Tensor<T>>,
    pub(crate) argmax: Vec<Vec<usize>>,
    pub(crate) bott_pre: Tensor<T>,
    pub(crate) bott_act: Tensor<T>,
    pub(crate) gap: Tensor<T>,
    pub(crate) dec_in: Vec<Tensor<T>>,
    pub(crate) dec_pre: Vec<Tensor<T>>,
    pub(crate) dec_act: Vec<Tensor<T>>,
    pub(crate) fingerprint: u64,
}

impl<T: Scalar> ForwardRecord<T> {
    /// Last convolutional feature maps (bottleneck activations), `[1, C, h, w]`.
    pub fn bottleneck_features(&self) -> &Tensor<T> {
        &self.bott_act
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }

    /// Sigmoid of the mask logits as an `[H, W]` tensor.
    pub fn mask_probabilities(&self) -> Tensor<T> {
        let [_, _, h, w] = self.mask_logits.dims4("mask").expect("mask is NCHW");
        ops::sigmoid_forward(&self.mask_logits).reshape([h, w]).expect("same size")
    }

    pub fn class_probabilities(&self) -> [T; NUM_CLASSES] {
        let l = self.class_logits.data();
        [ops::sigmoid(l[0]), ops::sigmoid(l[1]), ops::sigmoid(l[2])]
    }
}

fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.dims4("concat")?;
    let [nb, cb, hb, wb] = b.dims4("concat")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape("concat", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * h * w..(i + 1) * ca * h * w]);
        out.extend_from_slice(&b.data()[i * cb * h * w..(i + 1) * cb * h * w]);
    }
    Tensor::new([n, ca + cb, h, w], out)
}

fn split_channels<T: Scalar>(t: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = t.dims4("split")?;
    let plane = h * w;
    let mut a = Vec::with_capacity(n * first * plane);
    let mut b = Vec::with_capacity(n * (c - first) * plane);
    for i in 0..n {
        let s = &t.data()[i * c * plane..(i + 1) * c * plane];
        a.extend_from_slice(&s[..first * plane]);
        b.extend_from_slice(&s[first * plane..]);
    }
    Ok((Tensor::new([n, first, h, w], a)?, Tensor::new([n, c - first, h, w], b)?))
}

/// FNV-1a over the bit patterns of every parameter.
fn fingerprint<T: Scalar>(params: &[Param<T>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        for &v in p.value.data() {
            h ^= v.as_f64().to_bits();
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

impl<T: Scalar> UNetModel<T> {
    /// Builds a model with Glorot-uniform weights and zero biases.
    pub fn build(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    let receptive: usize = shape[2..].iter().product();
                    let fan = (shape[0] + shape[1]) * receptive;
                    let a = (6.0 / fan as f64).sqrt();
                    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-a..a)))
                };
                Param { name, value }
            })
            .collect();
        Self::from_params(config, params)
    }

    /// Assembles a model from named parameters; shapes must match `config`.
    pub fn from_params(config: UNetConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::InvalidConfig(format!("expected {} parameters, got {}", shapes.len(), params.len())));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::InvalidConfig(format!(
                    "parameter `{}` {:?} does not match expected `{name}` {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        let index = |n: &str| shapes.iter().position(|(s, _)| s == n).expect("known name");
        let depth = config.depth();
        let layout = Layout {
            enc: (0..depth).map(|i| index(&format!("enc{i}.weight"))).collect(),
            bottleneck: index("bottleneck.weight"),
            dec: (0..depth).map(|j| index(&format!("dec{j}.weight"))).collect(),
            out: index("out.weight"),
            head: index("head.weight"),
        };
        Ok(UNetModel { layers: config.layer_specs(), config, params, layout })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[(String, LayerSpec)] {
        &self.layers
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint(&self.params)
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(Error::shape("set_flat_params", self.num_parameters(), values.len()));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> UNetModel<U> {
        UNetModel {
            config: self.config.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect(),
            layout: self.layout.clone(),
        }
    }

    pub(crate) fn weight(&self, idx: usize) -> &Tensor<T> {
        &self.params[idx].value
    }

    pub(crate) fn head_weight_index(&self) -> usize {
        self.layout.head
    }

    pub(crate) fn encoder_weight_indices(&self) -> &[usize] {
        &self.layout.enc
    }

    pub(crate) fn bottleneck_weight_index(&self) -> usize {
        self.layout.bottleneck
    }

    pub(crate) fn is_relu(&self) -> bool {
        self.config.activation == Activation::Relu
    }

    fn conv(&self, x: &Tensor<T>, idx: usize, padding: usize) -> Result<Tensor<T>> {
        ops::conv2d_forward(x, &self.params[idx].value, Some(&self.params[idx + 1].value), 1, padding)
    }

    fn activate(&self, pre: &Tensor<T>) -> Tensor<T> {
        match self.config.activation {
            Activation::Relu => ops::relu_forward(pre),
            Activation::Identity => pre.clone(),
        }
    }

    fn activate_backward(&self, signal: &Tensor<T>, pre: &Tensor<T>) -> Result<Tensor<T>> {
        match self.config.activation {
            Activation::Relu => ops::relu_backward(signal, pre, BackwardRule::Backprop),
            Activation::Identity => Ok(signal.clone()),
        }
    }

    fn check_input(&self, image: &Tensor<T>) -> Result<()> {
        let s = self.config.input_size;
        image.ensure_shape("forward", &[1, 1, s, s])?;
        if let Some(i) = image.data().iter().position(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(Error::InvalidInput(format!(
                "pixel {i} = {} outside [0, 1]",
                image.data()[i]
            )));
        }
        Ok(())
    }

    /// Forward pass on one image `[1, 1, H, W]`.
    pub fn forward_one(&self, image: &Tensor<T>) -> Result<ForwardRecord<T>> {
        self.check_input(image)?;
        self.forward_impl(image, None)
    }

    fn forward_impl(&self, image: &Tensor<T>, severed_skip: Option<usize>) -> Result<ForwardRecord<T>> {
        let depth = self.config.depth();
        let mut enc_pre = Vec::with_capacity(depth);
        let mut enc_act = Vec::with_capacity(depth);
        let mut pooled: Vec<Tensor<T>> = Vec::with_capacity(depth);
        let mut argmax = Vec::with_capacity(depth);
        for i in 0..depth {
            let x = if i == 0 { image } else { &pooled[i - 1] };
            let pre = self.conv(x, self.layout.enc[i], 1)?;
            let act = self.activate(&pre);
            let (p, idx) = ops::maxpool2d_forward(&act, 2)?;
            enc_pre.push(pre);
            enc_act.push(act);
            pooled.push(p);
            argmax.push(idx);
        }
        let bott_pre = self.conv(&pooled[depth - 1], self.layout.bottleneck, 1)?;
        let bott_act = self.activate(&bott_pre);
        let gap = ops::gap_forward(&bott_act)?;
        let h = self.layout.head;
        let class_logits = ops::affine_forward(&gap, &self.params[h].value, &self.params[h + 1].value)?;

        let mut dec_in = vec![Tensor::zeros([1]); depth];
        let mut dec_pre = vec![Tensor::zeros([1]); depth];
        let mut dec_act = vec![Tensor::zeros([1]); depth];
        let mut prev = bott_act.clone();
        for j in (0..depth).rev() {
            let up = ops::upsample2d_forward(&prev, 2)?;
            let cat = if severed_skip == Some(j) {
                concat_channels(&up, &Tensor::zeros(enc_act[j].shape()))?
            } else {
                concat_channels(&up, &enc_act[j])?
            };
            let pre = self.conv(&cat, self.layout.dec[j], 1)?;
            prev = self.activate(&pre);
            dec_in[j] = cat;
            dec_pre[j] = pre;
            dec_act[j] = prev.clone();
        }
        let mask_logits = self.conv(&dec_act[0], self.layout.out, 0)?;
        Ok(ForwardRecord {
            class_logits: class_logits.reshape([NUM_CLASSES])?,
            mask_logits,
            input: image.clone(),
            enc_pre,
            enc_act,
            pooled,
            argmax,
            bott_pre,
            bott_act,
            gap,
            dec_in,
            dec_pre,
            dec_act,
            fingerprint: self.fingerprint(),
        })
    }

    /// Forward pass over a batch `[N, 1, H, W]`, one record per example.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Vec<ForwardRecord<T>>> {
        self.forward_with(batch, Execution::Serial)
    }

    pub fn forward_with(&self, batch: &Tensor<T>, exec: Execution) -> Result<Vec<ForwardRecord<T>>> {
        let [n, c, h, w] = batch.dims4("forward")?;
        let s = self.config.input_size;
        if (c, h, w) != (1, s, s) {
            return Err(Error::shape("forward", format!("[N, 1, {s}, {s}]"), format!("{:?}", batch.shape())));
        }
        let images: Vec<Tensor<T>> = (0..n)
            .map(|i| Tensor::new([1, 1, h, w], batch.data()[i * h * w..(i + 1) * h * w].to_vec()))
            .collect::<Result<_>>()?;
        exec::map(exec, &images, |_, img| self.forward_one(img)).into_iter().collect()
    }

    /// Per-class sigmoid probabilities for one `[H, W]` or `[1, 1, H, W]` image.
    pub fn classify(&self, image: &Tensor<T>) -> Result<[T; NUM_CLASSES]> {
        let s = self.config.input_size;
        let img = image.clone().reshape([1, 1, s, s])?;
        Ok(self.forward_one(&img)?.class_probabilities())
    }

    pub(crate) fn check_record(&self, record: &ForwardRecord<T>) -> Result<()> {
        if record.fingerprint != self.fingerprint() {
            return Err(Error::StaleRecord);
        }
        Ok(())
    }

    /// Standard back-propagation of `d_logits` (`[3]`) and, when present,
    /// `d_mask` (`[1, 1, H, W]`) to every parameter. Without `d_mask` the
    /// decoder is skipped and its gradients are zero.
    pub fn backward(&self, record: &ForwardRecord<T>, d_logits: &Tensor<T>, d_mask: Option<&Tensor<T>>) -> Result<Gradients<T>> {
        d_logits.ensure_shape("backward d_logits", &[NUM_CLASSES])?;
        let depth = self.config.depth();
        let mut grads = Gradients::zeros_like(self);
        let h = self.layout.head;
        let d_logits = d_logits.clone().reshape([1, NUM_CLASSES])?;
        let (d_gap, gw, gb) = ops::affine_backward(&d_logits, &record.gap, &self.params[h].value)?;
        grads.0[h] = gw;
        grads.0[h + 1] = gb;
        let mut d_bott_act = ops::gap_backward(&d_gap, record.bott_act.shape())?;

        let mut d_skip: Vec<Option<Tensor<T>>> = vec![None; depth];
        if let Some(dm) = d_mask {
            dm.ensure_shape("backward d_mask", record.mask_logits.shape())?;
            let o = self.layout.out;
            let (mut d_prev, gw, gb) = ops::conv2d_backward(dm, &record.dec_act[0], &self.params[o].value, 1, 0)?;
            grads.0[o] = gw;
            grads.0[o + 1] = gb;
            for j in 0..depth {
                let d_pre = self.activate_backward(&d_prev, &record.dec_pre[j])?;
                let k = self.layout.dec[j];
                let (d_cat, gw, gb) = ops::conv2d_backward(&d_pre, &record.dec_in[j], &self.params[k].value, 1, 1)?;
                grads.0[k] = gw;
                grads.0[k + 1] = gb;
                let up_channels = d_cat.shape()[1] - record.enc_act[j].shape()[1];
                let (d_up, skip) = split_channels(&d_cat, up_channels)?;
                d_skip[j] = Some(skip);
                d_prev = ops::upsample2d_backward(&d_up, 2)?;
            }
            d_bott_act.axpy(T::one(), &d_prev)?;
        }

        let d_bott_pre = self.activate_backward(&d_bott_act, &record.bott_pre)?;
        let b = self.layout.bottleneck;
        let (mut d_x, gw, gb) = ops::conv2d_backward(&d_bott_pre, &record.pooled[depth - 1], &self.params[b].value, 1, 1)?;
        grads.0[b] = gw;
        grads.0[b + 1] = gb;
        for i in (0..depth).rev() {
            let mut d_act = ops::maxpool2d_backward(&d_x, &record.argmax[i], record.enc_act[i].shape())?;
            if let Some(skip) = &d_skip[i] {
                d_act.axpy(T::one(), skip)?;
            }
            let d_pre = self.activate_backward(&d_act, &record.enc_pre[i])?;
            let k = self.layout.enc[i];
            let input = if i == 0 { &record.input } else { &record.pooled[i - 1] };
            let (gw, gb) = ops::conv2d_backward_params(&d_pre, input, self.params[k].value.shape(), 1, 1)?;
            grads.0[k] = gw;
            grads.0[k + 1] = gb;
            if i > 0 {
                d_x = ops::conv2d_backward_input(&d_pre, input.shape(), &self.params[k].value, 1, 1)?;
            }
        }
        Ok(grads)
    }
}
