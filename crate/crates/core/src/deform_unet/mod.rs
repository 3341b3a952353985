//! Encoder-decoder segmentation network with deformable convolutions in the
//! encoder.
//!
//! Per encoder unit: two 3x3 convolutions (deformable when flagged, each
//! with a zero-initialized companion convolution producing its sampling
//! offsets) followed by 2x2 max-pooling. A two-convolution bottleneck sits
//! between the paths. Per decoder unit: a stride-2 transposed convolution,
//! channel concatenation with the matching encoder feature map, then two
//! standard 3x3 convolutions. The head is a 1x1 convolution and a sigmoid.
//! Every other activation is a ReLU.
//!
//! Offset companions start at zero, so a freshly built deformable model
//! computes exactly what the plain model computes.

mod train;

pub use train::{train_segmenter, CropSample, SegEpochLog, SegTrainConfig, SegTrainError};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::scalar::Scalar;
use crate::synthdata::SliceImage;
use crate::tensor_nn::{
    conv2d_backward, conv2d_forward, deform_conv2d_backward, deform_conv2d_forward,
    glorot_uniform, maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_forward,
    sigmoid_backward, sigmoid_forward, transposed_conv2d_backward, transposed_conv2d_forward,
    Parameter, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum UNetError {
    #[error("input_side {side} is not divisible by 2^{depth}")]
    IndivisibleInput { side: usize, depth: usize },
    #[error("depth must be >= 1")]
    ZeroDepth,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UNetConfig {
    /// Units per path.
    pub depth: usize,
    /// Channels out of the first encoder unit; doubles per unit.
    pub base_channels: usize,
    /// Deformable encoder convolutions (the ablation baseline turns this off).
    pub deformable_encoder: bool,
    /// Square side the crops are resized to.
    pub input_side: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { depth: 4, base_channels: 8, deformable_encoder: true, input_side: 64, seed: 0 }
    }
}

impl UNetConfig {
    fn validate(&self) -> Result<(), UNetError> {
        if self.depth == 0 {
            return Err(UNetError::ZeroDepth);
        }
        if self.input_side % (1 << self.depth) != 0 || self.input_side >> self.depth == 0 {
            return Err(UNetError::IndivisibleInput { side: self.input_side, depth: self.depth });
        }
        Ok(())
    }
}

const KERNEL: usize = 3;

struct OffsetConv<S> {
    weight: Parameter<S>,
    bias: Parameter<S>,
}

struct ConvLayer<S> {
    weight: Parameter<S>,
    bias: Parameter<S>,
    offset: Option<OffsetConv<S>>,
}

struct ConvTrace<S> {
    input: Tensor<S>,
    offsets: Option<Tensor<S>>,
    /// Pre-activation output, kept for the ReLU mask.
    pre: Tensor<S>,
}

impl<S: Scalar> ConvLayer<S> {
    fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        deformable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let fan_out = out_ch * k * k;
        let weight = Parameter::new(glorot_uniform(&[out_ch, in_ch, k, k], fan_in, fan_out, rng));
        let bias = Parameter::new(Tensor::zeros(&[out_ch]));
        let offset = deformable.then(|| OffsetConv {
            weight: Parameter::new(Tensor::zeros(&[2 * k * k, in_ch, k, k])),
            bias: Parameter::new(Tensor::zeros(&[2 * k * k])),
        });
        Self { weight, bias, offset }
    }

    fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Option<Tensor<S>>), TensorError> {
        match &self.offset {
            None => Ok((conv2d_forward(x, &self.weight.value, &self.bias.value)?, None)),
            Some(oc) => {
                let offsets = conv2d_forward(x, &oc.weight.value, &oc.bias.value)?;
                let out = deform_conv2d_forward(x, &self.weight.value, &self.bias.value, &offsets)?;
                Ok((out, Some(offsets)))
            }
        }
    }

    /// Accumulate weight/bias (and offset companion) gradients; return the
    /// gradient with respect to the layer input.
    fn backward(&mut self, trace: &ConvTrace<S>, upstream: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        match (&mut self.offset, &trace.offsets) {
            (None, None) => {
                let (gi, gw, gb) = conv2d_backward(&trace.input, &self.weight.value, upstream)?;
                self.weight.grad.add_assign(&gw);
                self.bias.grad.add_assign(&gb);
                Ok(gi)
            }
            (Some(oc), Some(offsets)) => {
                let (mut gi, gw, gb, goff) =
                    deform_conv2d_backward(&trace.input, &self.weight.value, offsets, upstream)?;
                self.weight.grad.add_assign(&gw);
                self.bias.grad.add_assign(&gb);
                let (gi2, gow, gob) = conv2d_backward(&trace.input, &oc.weight.value, &goff)?;
                oc.weight.grad.add_assign(&gow);
                oc.bias.grad.add_assign(&gob);
                gi.add_assign(&gi2);
                Ok(gi)
            }
            _ => unreachable!("trace offsets always match layer kind"),
        }
    }
}

struct TConvLayer<S> {
    weight: Parameter<S>,
    bias: Parameter<S>,
}

struct ConvBlock<S> {
    conv1: ConvLayer<S>,
    conv2: ConvLayer<S>,
}

struct BlockTrace<S> {
    c1: ConvTrace<S>,
    c2: ConvTrace<S>,
}

impl<S: Scalar> ConvBlock<S> {
    fn new(in_ch: usize, out_ch: usize, deformable: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: ConvLayer::new(in_ch, out_ch, KERNEL, deformable, rng),
            conv2: ConvLayer::new(out_ch, out_ch, KERNEL, deformable, rng),
        }
    }

    fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, BlockTrace<S>), TensorError> {
        let (pre1, off1) = self.conv1.forward(x)?;
        let r1 = relu_forward(&pre1);
        let (pre2, off2) = self.conv2.forward(&r1)?;
        let r2 = relu_forward(&pre2);
        Ok((
            r2,
            BlockTrace {
                c1: ConvTrace { input: x.clone(), offsets: off1, pre: pre1 },
                c2: ConvTrace { input: r1, offsets: off2, pre: pre2 },
            },
        ))
    }

    fn backward(&mut self, trace: &BlockTrace<S>, upstream: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let u2 = relu_backward(&trace.c2.pre, upstream);
        let g1 = self.conv2.backward(&trace.c2, &u2)?;
        let u1 = relu_backward(&trace.c1.pre, &g1);
        self.conv1.backward(&trace.c1, &u1)
    }
}

struct EncTrace<S> {
    block: BlockTrace<S>,
    argmax: Vec<u32>,
    pre_pool_shape: Vec<usize>,
}

struct DecTrace<S> {
    up_input: Tensor<S>,
    up_pre: Tensor<S>,
    block: BlockTrace<S>,
    up_channels: usize,
}

/// Saved activations of one forward pass.
pub struct SegCache<S> {
    enc: Vec<EncTrace<S>>,
    mid: BlockTrace<S>,
    dec: Vec<DecTrace<S>>,
    head_input: Tensor<S>,
    /// Sigmoid output (the prediction itself).
    out: Tensor<S>,
}

/// The segmentation network.
pub struct SegModel<S> {
    pub config: UNetConfig,
    encoder: Vec<ConvBlock<S>>,
    mid: ConvBlock<S>,
    decoder: Vec<DecoderUnit<S>>,
    head: ConvLayer<S>,
}

struct DecoderUnit<S> {
    up: TConvLayer<S>,
    block: ConvBlock<S>,
}

fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (n, ca, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let cb = b.shape()[1];
    assert_eq!(&b.shape()[2..], &a.shape()[2..], "spatial dims must match for concat");
    assert_eq!(b.shape()[0], n);
    let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
    let plane = h * w;
    for i in 0..n {
        let dst = out.data_mut();
        let a_base = i * ca * plane;
        let o_base = i * (ca + cb) * plane;
        dst[o_base..o_base + ca * plane].copy_from_slice(&a.data()[a_base..a_base + ca * plane]);
        let b_base = i * cb * plane;
        dst[o_base + ca * plane..o_base + (ca + cb) * plane]
            .copy_from_slice(&b.data()[b_base..b_base + cb * plane]);
    }
    out
}

fn split_channels<S: Scalar>(g: &Tensor<S>, ca: usize) -> (Tensor<S>, Tensor<S>) {
    let (n, c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let cb = c - ca;
    let plane = h * w;
    let mut ga = Tensor::zeros(&[n, ca, h, w]);
    let mut gb = Tensor::zeros(&[n, cb, h, w]);
    for i in 0..n {
        let g_base = i * c * plane;
        ga.data_mut()[i * ca * plane..(i + 1) * ca * plane]
            .copy_from_slice(&g.data()[g_base..g_base + ca * plane]);
        gb.data_mut()[i * cb * plane..(i + 1) * cb * plane]
            .copy_from_slice(&g.data()[g_base + ca * plane..g_base + c * plane]);
    }
    (ga, gb)
}

/// Build a seeded model. Deformable offset companions initialize to zero.
pub fn build<S: Scalar>(cfg: &UNetConfig) -> Result<SegModel<S>, UNetError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = Vec::with_capacity(cfg.depth);
    let mut in_ch = 1;
    for i in 0..cfg.depth {
        let out_ch = cfg.base_channels << i;
        encoder.push(ConvBlock::new(in_ch, out_ch, cfg.deformable_encoder, &mut rng));
        in_ch = out_ch;
    }
    let mid_ch = cfg.base_channels << cfg.depth;
    let mid = ConvBlock::new(in_ch, mid_ch, false, &mut rng);
    let mut decoder = Vec::with_capacity(cfg.depth);
    let mut ch = mid_ch;
    for j in (0..cfg.depth).rev() {
        let skip_ch = cfg.base_channels << j;
        let up = TConvLayer {
            weight: Parameter::new(glorot_uniform(
                &[ch, skip_ch, 2, 2],
                ch * 4,
                skip_ch * 4,
                &mut rng,
            )),
            bias: Parameter::new(Tensor::zeros(&[skip_ch])),
        };
        let block = ConvBlock::new(2 * skip_ch, skip_ch, false, &mut rng);
        decoder.push(DecoderUnit { up, block });
        ch = skip_ch;
    }
    let head = ConvLayer::new(cfg.base_channels, 1, 1, false, &mut rng);
    Ok(SegModel { config: *cfg, encoder, mid, decoder, head })
}

impl<S: Scalar> SegModel<S> {
    /// Forward pass keeping every activation needed by [`Self::backward`].
    pub fn forward_cached(&self, input: &Tensor<S>) -> Result<(Tensor<S>, SegCache<S>), TensorError> {
        input.expect_rank("seg_forward", 4)?;
        let side = self.config.input_side;
        input.expect_shape("seg_forward", &[input.shape()[0], 1, side, side])?;

        let mut a = input.clone();
        let mut enc_traces = Vec::with_capacity(self.config.depth);
        for unit in &self.encoder {
            let (r2, block) = unit.forward(&a)?;
            let (pooled, argmax) = maxpool2x2_forward(&r2)?;
            enc_traces.push(EncTrace { block, argmax, pre_pool_shape: r2.shape().to_vec() });
            a = pooled;
        }
        let (mid_out, mid_trace) = self.mid.forward(&a)?;
        a = mid_out;

        let mut dec_traces = Vec::with_capacity(self.config.depth);
        for (k, unit) in self.decoder.iter().enumerate() {
            // decoder unit k pairs with encoder unit depth-1-k.
            let skip_r2 = {
                let t = &enc_traces[self.config.depth - 1 - k];
                relu_forward(&t.block.c2.pre)
            };
            let up_pre = transposed_conv2d_forward(&a, &unit.up.weight.value, &unit.up.bias.value)?;
            let upr = relu_forward(&up_pre);
            let up_channels = upr.shape()[1];
            let cat = concat_channels(&upr, &skip_r2);
            let (r2, block) = unit.block.forward(&cat)?;
            dec_traces.push(DecTrace { up_input: a, up_pre, block, up_channels });
            a = r2;
        }

        let (head_pre, _) = self.head.forward(&a)?;
        let out = sigmoid_forward(&head_pre);
        let cache = SegCache {
            enc: enc_traces,
            mid: mid_trace,
            dec: dec_traces,
            head_input: a,
            out: out.clone(),
        };
        Ok((out, cache))
    }

    /// Probability map in (0,1), same spatial dims as the input.
    pub fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        Ok(self.forward_cached(input)?.0)
    }

    /// Accumulate parameter gradients from the gradient on the sigmoid
    /// output; returns the gradient with respect to the model input.
    pub fn backward(&mut self, cache: &SegCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let g_head_pre = sigmoid_backward(&cache.out, grad_out);
        let head_trace = ConvTrace {
            input: cache.head_input.clone(),
            offsets: None,
            pre: Tensor::zeros(&[0]),
        };
        let mut g = self.head.backward(&head_trace, &g_head_pre)?;

        let depth = self.config.depth;
        let mut skip_grads: Vec<Option<Tensor<S>>> = (0..depth).map(|_| None).collect();
        for (k, unit) in self.decoder.iter_mut().enumerate().rev() {
            let trace = &cache.dec[k];
            let g_cat = unit.block.backward(&trace.block, &g)?;
            let (g_upr, g_skip) = split_channels(&g_cat, trace.up_channels);
            skip_grads[depth - 1 - k] = Some(g_skip);
            let g_up_pre = relu_backward(&trace.up_pre, &g_upr);
            let (gx, gw, gb) =
                transposed_conv2d_backward(&trace.up_input, &unit.up.weight.value, &g_up_pre)?;
            unit.up.weight.grad.add_assign(&gw);
            unit.up.bias.grad.add_assign(&gb);
            g = gx;
        }

        g = self.mid.backward(&cache.mid, &g)?;

        for (i, unit) in self.encoder.iter_mut().enumerate().rev() {
            let trace = &cache.enc[i];
            let mut g_r2 = maxpool2x2_backward(&trace.pre_pool_shape, &trace.argmax, &g)?;
            if let Some(gs) = &skip_grads[i] {
                g_r2.add_assign(gs);
            }
            g = unit.backward(&trace.block, &g_r2)?;
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Canonical parameter order (matches the checkpoint tensor order).
    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut out = Vec::new();
        fn push_conv<'a, S: Scalar>(out: &mut Vec<&'a mut Parameter<S>>, c: &'a mut ConvLayer<S>) {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
            if let Some(oc) = &mut c.offset {
                out.push(&mut oc.weight);
                out.push(&mut oc.bias);
            }
        }
        for unit in &mut self.encoder {
            push_conv(&mut out, &mut unit.conv1);
            push_conv(&mut out, &mut unit.conv2);
        }
        push_conv(&mut out, &mut self.mid.conv1);
        push_conv(&mut out, &mut self.mid.conv2);
        for unit in &mut self.decoder {
            out.push(&mut unit.up.weight);
            out.push(&mut unit.up.bias);
            push_conv(&mut out, &mut unit.block.conv1);
            push_conv(&mut out, &mut unit.block.conv2);
        }
        push_conv(&mut out, &mut self.head);
        out
    }

    pub fn parameter_count(&self) -> usize {
        fn conv_count<S: Scalar>(c: &ConvLayer<S>) -> usize {
            c.weight.value.len()
                + c.bias.value.len()
                + c.offset.as_ref().map_or(0, |o| o.weight.value.len() + o.bias.value.len())
        }
        let mut n = 0;
        for u in &self.encoder {
            n += conv_count(&u.conv1) + conv_count(&u.conv2);
        }
        n += conv_count(&self.mid.conv1) + conv_count(&self.mid.conv2);
        for u in &self.decoder {
            n += u.up.weight.value.len() + u.up.bias.value.len();
            n += conv_count(&u.block.conv1) + conv_count(&u.block.conv2);
        }
        n + conv_count(&self.head)
    }

    /// Scale a [0,255] crop to [0,1] and run the network.
    pub fn predict(&self, crop: &SliceImage) -> Result<Tensor<S>, TensorError> {
        let side = self.config.input_side;
        assert_eq!(
            (crop.width() as usize, crop.height() as usize),
            (side, side),
            "predict expects an input_side x input_side crop"
        );
        let data = crop.to_unit::<S>();
        let input = Tensor::from_vec(&[1, 1, side, side], data)?;
        self.forward(&input)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_field("model", "deform_unet");
        ck.set_field("depth", self.config.depth);
        ck.set_field("base_channels", self.config.base_channels);
        ck.set_field("deformable_encoder", self.config.deformable_encoder as u8);
        ck.set_field("input_side", self.config.input_side);
        ck.set_field("seed", self.config.seed);
        fn push_conv<S: Scalar>(ck: &mut Checkpoint, name: &str, c: &ConvLayer<S>) {
            ck.push_tensor(&format!("{name}.weight"), c.weight.value.cast());
            ck.push_tensor(&format!("{name}.bias"), c.bias.value.cast());
            if let Some(oc) = &c.offset {
                ck.push_tensor(&format!("{name}.offset.weight"), oc.weight.value.cast());
                ck.push_tensor(&format!("{name}.offset.bias"), oc.bias.value.cast());
            }
        }
        for (i, u) in self.encoder.iter().enumerate() {
            push_conv(&mut ck, &format!("enc{i}.conv1"), &u.conv1);
            push_conv(&mut ck, &format!("enc{i}.conv2"), &u.conv2);
        }
        push_conv(&mut ck, "mid.conv1", &self.mid.conv1);
        push_conv(&mut ck, "mid.conv2", &self.mid.conv2);
        for (k, u) in self.decoder.iter().enumerate() {
            ck.push_tensor(&format!("dec{k}.up.weight"), u.up.weight.value.cast());
            ck.push_tensor(&format!("dec{k}.up.bias"), u.up.bias.value.cast());
            push_conv(&mut ck, &format!("dec{k}.conv1"), &u.block.conv1);
            push_conv(&mut ck, &format!("dec{k}.conv2"), &u.block.conv2);
        }
        push_conv(&mut ck, "head", &self.head);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let cfg = UNetConfig {
            depth: ck.parse_field("depth")?,
            base_channels: ck.parse_field("base_channels")?,
            deformable_encoder: ck.parse_field::<u8>("deformable_encoder")? != 0,
            input_side: ck.parse_field("input_side")?,
            seed: ck.parse_field("seed")?,
        };
        let mut model = build::<S>(&cfg)
            .map_err(|e| CheckpointError::HeaderParse(format!("invalid unet config: {e}")))?;
        fn load_conv<S: Scalar>(
            ck: &Checkpoint,
            name: &str,
            c: &mut ConvLayer<S>,
        ) -> Result<(), CheckpointError> {
            c.weight.value =
                ck.tensor_with_shape(&format!("{name}.weight"), c.weight.value.shape())?.cast();
            c.bias.value = ck.tensor_with_shape(&format!("{name}.bias"), c.bias.value.shape())?.cast();
            if let Some(oc) = &mut c.offset {
                oc.weight.value = ck
                    .tensor_with_shape(&format!("{name}.offset.weight"), oc.weight.value.shape())?
                    .cast();
                oc.bias.value =
                    ck.tensor_with_shape(&format!("{name}.offset.bias"), oc.bias.value.shape())?.cast();
            }
            Ok(())
        }
        for i in 0..model.config.depth {
            load_conv(ck, &format!("enc{i}.conv1"), &mut model.encoder[i].conv1)?;
            load_conv(ck, &format!("enc{i}.conv2"), &mut model.encoder[i].conv2)?;
        }
        load_conv(ck, "mid.conv1", &mut model.mid.conv1)?;
        load_conv(ck, "mid.conv2", &mut model.mid.conv2)?;
        for k in 0..model.config.depth {
            let u = &mut model.decoder[k];
            u.up.weight.value =
                ck.tensor_with_shape(&format!("dec{k}.up.weight"), u.up.weight.value.shape())?.cast();
            u.up.bias.value =
                ck.tensor_with_shape(&format!("dec{k}.up.bias"), u.up.bias.value.shape())?.cast();
            load_conv(ck, &format!("dec{k}.conv1"), &mut u.block.conv1)?;
            load_conv(ck, &format!("dec{k}.conv2"), &mut u.block.conv2)?;
        }
        load_conv(ck, "head", &mut model.head)?;
        Ok(model)
    }
}
