//! The twin-branch co-saliency network: a small convolutional encoder shared
//! by both branches, the co-attention module on the encoded features,
//! consistency-feature merging, and a deconvolution decoder with skip
//! connections and a sigmoid head.
//!
//! Both branches share every parameter, including the attention projections:
//! the module's f/g and h1/h2 projections and the two gates are backed by
//! single tensors. That weight sharing is what makes the network exactly
//! symmetric: swapping the input pair swaps the output pair bit for bit, and
//! identical inputs produce identical maps.
//!
//! Per branch, the forward pass is
//! `encode -> co-attention -> concat(own, partner) -> consistency convs ->
//! concat(consistency, own) -> merge conv -> deconv stages with skip
//! additions -> 1x1 prediction -> sigmoid`,
//! where `partner` is the other branch's weighted feature for pairs, or the
//! shared group representation for group inference.

use crate::coattention::{
    coattention_backward, coattention_forward, group_average_attention, CoAttentionParams,
};
use crate::error::{Error, Result};
use crate::metrics::{GroundTruthMask, SaliencyMap};
use crate::tensor::{
    concat_channels, conv2d, conv2d_backward, deconv2d, deconv2d_backward, maxpool2,
    maxpool2_backward, relu, relu_backward, sigmoid, sigmoid_backward, split_channels, ConvGrads,
    ConvKernel, Tensor,
};
use crate::training::{weighted_bce, LossConfig};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use std::fs;
use std::path::Path;

/// Structural hyperparameters of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Input images are `input_size x input_size`.
    pub input_size: usize,
    pub input_channels: usize,
    /// Channels per encoder stage; each stage is conv3x3 + relu + maxpool2.
    pub encoder_channels: Vec<usize>,
    /// Channels of the encoded feature the attention operates on.
    pub feature_channels: usize,
    /// Affinity subspace reduction; the attention projects to C/reduction.
    pub attention_reduction: usize,
    /// Encoder stages whose pre-pool outputs are added back during decoding.
    pub skip_stages: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            input_channels: 3,
            encoder_channels: vec![8, 16, 32],
            feature_channels: 32,
            attention_reduction: 8,
            skip_stages: vec![1, 2],
        }
    }
}

impl NetworkConfig {
    /// Smallest configuration the gradient checks run on.
    pub fn tiny() -> Self {
        Self {
            input_size: 8,
            input_channels: 3,
            encoder_channels: vec![8, 8],
            feature_channels: 8,
            attention_reduction: 8,
            skip_stages: vec![1],
        }
    }

    pub fn stages(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn encoded_size(&self) -> usize {
        self.input_size >> self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() {
            return Err(Error::Validation("encoder needs at least one stage".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Validation("input channels must be >= 1".into()));
        }
        let divisor = 1usize << self.stages();
        if self.input_size % divisor != 0 {
            return Err(Error::Validation(format!(
                "input size {} must be divisible by 2^{}",
                self.input_size,
                self.stages()
            )));
        }
        if self.encoded_size() < 2 {
            return Err(Error::Validation(format!(
                "encoded size {} must be >= 2",
                self.encoded_size()
            )));
        }
        if self.attention_reduction == 0
            || self.feature_channels % self.attention_reduction != 0
        {
            return Err(Error::Validation(format!(
                "feature channels {} must divide by attention reduction {}",
                self.feature_channels, self.attention_reduction
            )));
        }
        let mut seen = vec![false; self.stages()];
        for &s in &self.skip_stages {
            if s >= self.stages() {
                return Err(Error::Validation(format!(
                    "skip stage {s} out of range (stages: {})",
                    self.stages()
                )));
            }
            if seen[s] {
                return Err(Error::Validation(format!("duplicate skip stage {s}")));
            }
            seen[s] = true;
        }
        Ok(())
    }

    /// Output channels of each decoder stage (halving, floored at 4).
    pub fn decoder_channels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.stages());
        let mut c = self.feature_channels;
        for _ in 0..self.stages() {
            c = (c / 2).max(4);
            out.push(c);
        }
        out
    }

    /// Skip stages sorted ascending, the order their projections are stored.
    fn sorted_skips(&self) -> Vec<usize> {
        let mut s = self.skip_stages.clone();
        s.sort_unstable();
        s
    }
}

/// The network's co-attention parameters with both branch legs tied: the
/// affinity projections (f and g), the value projections (h1 and h2) and the
/// two gates each share one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TiedCoAttention {
    pub projection: Tensor,
    pub value: Tensor,
    /// Single-element tensor holding the shared residual gate.
    pub gamma: Tensor,
}

impl TiedCoAttention {
    pub fn gamma_value(&self) -> f64 {
        self.gamma.values()[0]
    }

    /// Expands the tied storage into the module's parameter view.
    pub fn pair_params(&self) -> CoAttentionParams {
        CoAttentionParams {
            wf: self.projection.clone(),
            wg: self.projection.clone(),
            wh1: self.value.clone(),
            wh2: self.value.clone(),
            gamma1: self.gamma_value(),
            gamma2: self.gamma_value(),
        }
    }
}

/// Every trainable layer of the network. Also serves as the gradient and
/// optimizer-velocity container, since those mirror the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub encoder: Vec<ConvKernel>,
    /// The three convolutions refining encoder output into attention input.
    pub refine: Vec<ConvKernel>,
    pub attention: TiedCoAttention,
    /// Two convolutions turning the concatenated pair into the consistency feature.
    pub consistency: Vec<ConvKernel>,
    /// Merge convolution over concat(consistency, branch feature).
    pub merge: ConvKernel,
    /// 1x1 projections reconciling skip channels, one per sorted skip stage.
    pub skip_proj: Vec<ConvKernel>,
    /// Transposed convolutions, stored in forward-conv orientation.
    pub decoder: Vec<ConvKernel>,
    /// Final 1x1 prediction kernel feeding the sigmoid.
    pub predict: ConvKernel,
}

fn zero_kernel(kh: usize, kw: usize, in_c: usize, out_c: usize, stride: usize, bias_len: usize) -> ConvKernel {
    ConvKernel::new(Tensor::zeros(&[kh, kw, in_c, out_c]), vec![0.0; bias_len], stride).unwrap()
}

impl NetworkParams {
    /// All-zero parameters with the shapes the config dictates.
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let c = config.feature_channels;
        let mid = 2 * c;
        let mut encoder = Vec::new();
        let mut prev = config.input_channels;
        for &ch in &config.encoder_channels {
            encoder.push(zero_kernel(3, 3, prev, ch, 1, ch));
            prev = ch;
        }
        let refine = vec![
            zero_kernel(3, 3, prev, mid, 1, mid),
            zero_kernel(1, 1, mid, mid, 1, mid),
            zero_kernel(1, 1, mid, c, 1, c),
        ];
        let c_bar = c / config.attention_reduction;
        let attention = TiedCoAttention {
            projection: Tensor::zeros(&[c_bar, c]),
            value: Tensor::zeros(&[c, c]),
            gamma: Tensor::zeros(&[1]),
        };
        let consistency = vec![
            zero_kernel(3, 3, 2 * c, c, 1, c),
            zero_kernel(1, 1, c, c, 1, c),
        ];
        let merge = zero_kernel(1, 1, 2 * c, c, 1, c);
        let dec_channels = config.decoder_channels();
        let stages = config.stages();
        let mut skip_proj = Vec::new();
        for &stage in &config.sorted_skips() {
            let step = stages - 1 - stage;
            skip_proj.push(zero_kernel(
                1,
                1,
                config.encoder_channels[stage],
                dec_channels[step],
                1,
                dec_channels[step],
            ));
        }
        let mut decoder = Vec::new();
        let mut dec_prev = c;
        for &ch in &dec_channels {
            // Conv orientation: deconv2d maps outC-channel input to inC channels.
            decoder.push(zero_kernel(4, 4, ch, dec_prev, 2, ch));
            dec_prev = ch;
        }
        let predict = zero_kernel(1, 1, dec_prev, 1, 1, 1);
        Ok(Self {
            config: config.clone(),
            encoder,
            refine,
            attention,
            consistency,
            merge,
            skip_proj,
            decoder,
            predict,
        })
    }

    /// Random initialization. Convolutions use He-uniform weights,
    /// `[-sqrt(6/fan_in), sqrt(6/fan_in)]`, which keeps activation variance
    /// roughly constant through the ReLU stack; a plain `1/sqrt(fan_in)`
    /// bound attenuates the signal about 6x per layer and leaves this depth
    /// untrainable from scratch. Biases start at zero, the attention gate at
    /// zero, and the attention projections at the module's `1/sqrt(C)` bound.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let deconv_from = params.encoder.len()
            + params.refine.len()
            + params.consistency.len()
            + 1
            + params.skip_proj.len();
        for (i, kernel) in params.kernels_mut().into_iter().enumerate() {
            let shape = kernel.weights().shape().to_vec();
            // For deconvs the layer input is the kernel's outC side.
            let is_deconv = (deconv_from..deconv_from + config.stages()).contains(&i);
            let fan_in = shape[0] * shape[1] * if is_deconv { shape[3] } else { shape[2] };
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in kernel.weights_mut().values_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        let c = config.feature_channels as f64;
        let bound = 1.0 / c.sqrt();
        for v in params.attention.projection.values_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        for v in params.attention.value.values_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("existing params imply a valid config")
    }

    fn kernels_mut(&mut self) -> Vec<&mut ConvKernel> {
        let mut out: Vec<&mut ConvKernel> = Vec::new();
        out.extend(self.encoder.iter_mut());
        out.extend(self.refine.iter_mut());
        out.extend(self.consistency.iter_mut());
        out.push(&mut self.merge);
        out.extend(self.skip_proj.iter_mut());
        out.extend(self.decoder.iter_mut());
        out.push(&mut self.predict);
        out
    }

    /// Every parameter tensor in the fixed checkpoint order: each kernel's
    /// weights then bias (encoder, refine, consistency, merge, skip
    /// projections, decoder, predict), with the attention triple between the
    /// refine and consistency groups.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for k in &self.encoder {
            out.push(k.weights());
            out.push(k.bias_tensor());
        }
        for k in &self.refine {
            out.push(k.weights());
            out.push(k.bias_tensor());
        }
        out.push(&self.attention.projection);
        out.push(&self.attention.value);
        out.push(&self.attention.gamma);
        for k in &self.consistency {
            out.push(k.weights());
            out.push(k.bias_tensor());
        }
        out.push(self.merge.weights());
        out.push(self.merge.bias_tensor());
        for k in &self.skip_proj {
            out.push(k.weights());
            out.push(k.bias_tensor());
        }
        for k in &self.decoder {
            out.push(k.weights());
            out.push(k.bias_tensor());
        }
        out.push(self.predict.weights());
        out.push(self.predict.bias_tensor());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for k in &mut self.encoder {
            let (w, b) = k.weights_and_bias_mut();
            out.push(w);
            out.push(b);
        }
        for k in &mut self.refine {
            let (w, b) = k.weights_and_bias_mut();
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.attention.projection);
        out.push(&mut self.attention.value);
        out.push(&mut self.attention.gamma);
        for k in &mut self.consistency {
            let (w, b) = k.weights_and_bias_mut();
            out.push(w);
            out.push(b);
        }
        {
            let (w, b) = self.merge.weights_and_bias_mut();
            out.push(w);
            out.push(b);
        }
        for k in &mut self.skip_proj {
            let (w, b) = k.weights_and_bias_mut();
            out.push(w);
            out.push(b);
        }
        for k in &mut self.decoder {
            let (w, b) = k.weights_and_bias_mut();
            out.push(w);
            out.push(b);
        }
        {
            let (w, b) = self.predict.weights_and_bias_mut();
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.tensors() {
            out.extend_from_slice(t.values());
        }
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

fn accumulate(dst: &mut ConvKernel, src: &ConvGrads) {
    dst.weights_mut().add_assign(&src.weights).expect("gradient shapes match");
    let bias = dst.bias_tensor_mut();
    for (b, g) in bias.values_mut().iter_mut().zip(&src.bias) {
        *b += g;
    }
}

// ---------------------------------------------------------------------------
// Forward traces
// ---------------------------------------------------------------------------

struct EncodeTrace {
    input: Tensor,
    conv_pre: Vec<Tensor>,
    /// Post-relu pre-pool outputs; the skip sources.
    stage_out: Vec<Tensor>,
    pool_idx: Vec<Vec<usize>>,
    pooled: Vec<Tensor>,
    refine_pre: Vec<Tensor>,
    refine_out: Vec<Tensor>,
}

impl EncodeTrace {
    fn feature(&self) -> &Tensor {
        self.refine_out.last().unwrap()
    }
}

fn check_image(image: &Tensor, config: &NetworkConfig) -> Result<()> {
    let want = [config.input_size, config.input_size, config.input_channels];
    if image.shape() != want {
        return Err(Error::Dimension(format!(
            "image shape {:?}, expected {:?}",
            image.shape(),
            want
        )));
    }
    if image.values().iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::Validation("pixel values must lie in [0, 1]".into()));
    }
    Ok(())
}

fn encode_traced(image: &Tensor, params: &NetworkParams) -> Result<EncodeTrace> {
    check_image(image, &params.config)?;
    let mut conv_pre = Vec::new();
    let mut stage_out = Vec::new();
    let mut pool_idx = Vec::new();
    let mut pooled = Vec::new();
    let mut t = image.clone();
    for kernel in &params.encoder {
        let pre = conv2d(&t, kernel, 1)?;
        let act = relu(&pre);
        let (p, idx) = maxpool2(&act)?;
        conv_pre.push(pre);
        stage_out.push(act);
        pool_idx.push(idx);
        pooled.push(p.clone());
        t = p;
    }
    let mut refine_pre = Vec::new();
    let mut refine_out = Vec::new();
    for (i, kernel) in params.refine.iter().enumerate() {
        let pad = usize::from(i == 0);
        let pre = conv2d(&t, kernel, pad)?;
        let act = relu(&pre);
        refine_pre.push(pre);
        refine_out.push(act.clone());
        t = act;
    }
    Ok(EncodeTrace {
        input: image.clone(),
        conv_pre,
        stage_out,
        pool_idx,
        pooled,
        refine_pre,
        refine_out,
    })
}

/// Encodes one image: returns the attention-ready feature map and the
/// per-stage pre-pool activations (the skip sources).
pub fn encode(image: &Tensor, params: &NetworkParams) -> Result<(Tensor, Vec<Tensor>)> {
    let trace = encode_traced(image, params)?;
    Ok((trace.feature().clone(), trace.stage_out))
}

struct HeadTrace {
    concat_in: Tensor,
    c4_pre: Tensor,
    c4: Tensor,
    c5_pre: Tensor,
    merge_in: Tensor,
    c6_pre: Tensor,
    /// `dec_in[0]` is the merged feature; later entries feed each deconv.
    dec_in: Vec<Tensor>,
    dec_sum: Vec<Tensor>,
    dec_out: Vec<Tensor>,
    prob: Tensor,
}

/// One branch's path from its weighted feature to a probability map.
/// `partner` is the pair partner's weighted feature, or the shared group
/// representation during group inference.
fn head_forward(
    own: &Tensor,
    partner: &Tensor,
    skips: &[Tensor],
    params: &NetworkParams,
) -> Result<HeadTrace> {
    let config = &params.config;
    let concat_in = concat_channels(own, partner)?;
    let c4_pre = conv2d(&concat_in, &params.consistency[0], 1)?;
    let c4 = relu(&c4_pre);
    let c5_pre = conv2d(&c4, &params.consistency[1], 0)?;
    let c5 = relu(&c5_pre);
    let merge_in = concat_channels(&c5, own)?;
    let c6_pre = conv2d(&merge_in, &params.merge, 0)?;
    let c6 = relu(&c6_pre);

    let stages = config.stages();
    let sorted_skips = config.sorted_skips();
    let mut dec_in = Vec::new();
    let mut dec_sum = Vec::new();
    let mut dec_out = Vec::new();
    let mut t = c6;
    for (step, kernel) in params.decoder.iter().enumerate() {
        dec_in.push(t.clone());
        let raw = deconv2d(&t, kernel, 1)?;
        let stage = stages - 1 - step;
        let sum = if let Some(pos) = sorted_skips.iter().position(|&s| s == stage) {
            let proj = conv2d(&skips[stage], &params.skip_proj[pos], 0)?;
            raw.add(&proj)?
        } else {
            raw
        };
        let act = relu(&sum);
        dec_sum.push(sum);
        dec_out.push(act.clone());
        t = act;
    }
    let predict_pre = conv2d(&t, &params.predict, 0)?;
    let prob = sigmoid(&predict_pre);
    Ok(HeadTrace {
        concat_in,
        c4_pre,
        c4,
        c5_pre,
        merge_in,
        c6_pre,
        dec_in,
        dec_sum,
        dec_out,
        prob,
    })
}

/// Backward through one branch head. Returns gradients for the own and
/// partner weighted features; skip-source gradients accumulate into
/// `d_stage_out` and parameter gradients into `grads`.
fn head_backward(
    trace: &HeadTrace,
    skips: &[Tensor],
    params: &NetworkParams,
    d_prob: &Tensor,
    grads: &mut NetworkParams,
    d_stage_out: &mut [Option<Tensor>],
) -> Result<(Tensor, Tensor)> {
    let config = &params.config;
    let c = config.feature_channels;
    let stages = config.stages();
    let sorted_skips = config.sorted_skips();

    let d_predict_pre = sigmoid_backward(&trace.prob, d_prob);
    let cg = conv2d_backward(trace.dec_out.last().unwrap(), &params.predict, 0, &d_predict_pre)?;
    accumulate(&mut grads.predict, &cg);
    let mut d = cg.input;

    for step in (0..params.decoder.len()).rev() {
        let d_sum = relu_backward(&trace.dec_sum[step], &d);
        let stage = stages - 1 - step;
        if let Some(pos) = sorted_skips.iter().position(|&s| s == stage) {
            let pg = conv2d_backward(&skips[stage], &params.skip_proj[pos], 0, &d_sum)?;
            accumulate(&mut grads.skip_proj[pos], &pg);
            match &mut d_stage_out[stage] {
                Some(acc) => acc.add_assign(&pg.input)?,
                slot => *slot = Some(pg.input),
            }
        }
        let dg = deconv2d_backward(&trace.dec_in[step], &params.decoder[step], 1, &d_sum)?;
        accumulate(&mut grads.decoder[step], &dg);
        d = dg.input;
    }

    let d_c6_pre = relu_backward(&trace.c6_pre, &d);
    let cg = conv2d_backward(&trace.merge_in, &params.merge, 0, &d_c6_pre)?;
    accumulate(&mut grads.merge, &cg);
    let (d_c5, mut d_own) = split_channels(&cg.input, c)?;

    let d_c5_pre = relu_backward(&trace.c5_pre, &d_c5);
    let cg = conv2d_backward(&trace.c4, &params.consistency[1], 0, &d_c5_pre)?;
    accumulate(&mut grads.consistency[1], &cg);
    let d_c4_pre = relu_backward(&trace.c4_pre, &cg.input);
    let cg = conv2d_backward(&trace.concat_in, &params.consistency[0], 1, &d_c4_pre)?;
    accumulate(&mut grads.consistency[0], &cg);
    let (d_own_more, d_partner) = split_channels(&cg.input, c)?;
    d_own.add_assign(&d_own_more)?;
    Ok((d_own, d_partner))
}

fn encode_backward(
    trace: &EncodeTrace,
    params: &NetworkParams,
    d_feature: &Tensor,
    d_stage_out: &mut [Option<Tensor>],
    grads: &mut NetworkParams,
) -> Result<()> {
    let mut d = d_feature.clone();
    for i in (0..params.refine.len()).rev() {
        let pad = usize::from(i == 0);
        let d_pre = relu_backward(&trace.refine_pre[i], &d);
        let input = if i == 0 { trace.pooled.last().unwrap() } else { &trace.refine_out[i - 1] };
        let cg = conv2d_backward(input, &params.refine[i], pad, &d_pre)?;
        accumulate(&mut grads.refine[i], &cg);
        d = cg.input;
    }
    for s in (0..params.encoder.len()).rev() {
        let mut d_act = maxpool2_backward(trace.stage_out[s].shape(), &trace.pool_idx[s], &d);
        if let Some(extra) = &d_stage_out[s] {
            d_act.add_assign(extra)?;
        }
        let d_pre = relu_backward(&trace.conv_pre[s], &d_act);
        let input = if s == 0 { &trace.input } else { &trace.pooled[s - 1] };
        let cg = conv2d_backward(input, &params.encoder[s], 1, &d_pre)?;
        accumulate(&mut grads.encoder[s], &cg);
        d = cg.input;
    }
    Ok(())
}

struct PairTrace {
    enc1: EncodeTrace,
    enc2: EncodeTrace,
    head1: HeadTrace,
    head2: HeadTrace,
}

fn forward_pair_traced(i1: &Tensor, i2: &Tensor, params: &NetworkParams) -> Result<PairTrace> {
    let enc1 = encode_traced(i1, params)?;
    let enc2 = encode_traced(i2, params)?;
    let cam = params.attention.pair_params();
    let (x_w, y_w) = coattention_forward(enc1.feature(), enc2.feature(), &cam)?;
    let head1 = head_forward(&x_w, &y_w, &enc1.stage_out, params)?;
    let head2 = head_forward(&y_w, &x_w, &enc2.stage_out, params)?;
    Ok(PairTrace { enc1, enc2, head1, head2 })
}

/// Runs the pair through the network, producing two saliency maps at input
/// resolution with values strictly inside (0, 1).
pub fn forward_pair(
    i1: &Tensor,
    i2: &Tensor,
    params: &NetworkParams,
) -> Result<(SaliencyMap, SaliencyMap)> {
    let trace = forward_pair_traced(i1, i2, params)?;
    Ok((
        SaliencyMap::from_tensor(&trace.head1.prob)?,
        SaliencyMap::from_tensor(&trace.head2.prob)?,
    ))
}

/// Loss (mean of the two branch losses) and exact gradients for every
/// parameter of the shared network.
pub fn forward_backward_pair(
    i1: &Tensor,
    i2: &Tensor,
    g1: &GroundTruthMask,
    g2: &GroundTruthMask,
    params: &NetworkParams,
    loss_cfg: &LossConfig,
) -> Result<(f64, NetworkParams)> {
    let trace = forward_pair_traced(i1, i2, params)?;
    let p1 = SaliencyMap::from_tensor(&trace.head1.prob)?;
    let p2 = SaliencyMap::from_tensor(&trace.head2.prob)?;
    let (l1, d_p1) = weighted_bce(&p1, g1, loss_cfg)?;
    let (l2, d_p2) = weighted_bce(&p2, g2, loss_cfg)?;
    let loss = 0.5 * (l1 + l2);

    let mut grads = params.zeros_like();
    let prob_shape = trace.head1.prob.shape().to_vec();
    let d_prob1 = d_p1.scale(0.5).reshape(&prob_shape)?;
    let d_prob2 = d_p2.scale(0.5).reshape(&prob_shape)?;

    let stages = params.config.stages();
    let mut d_skips1: Vec<Option<Tensor>> = vec![None; stages];
    let mut d_skips2: Vec<Option<Tensor>> = vec![None; stages];
    let (d_own1, d_partner1) = head_backward(
        &trace.head1,
        &trace.enc1.stage_out,
        params,
        &d_prob1,
        &mut grads,
        &mut d_skips1,
    )?;
    let (d_own2, d_partner2) = head_backward(
        &trace.head2,
        &trace.enc2.stage_out,
        params,
        &d_prob2,
        &mut grads,
        &mut d_skips2,
    )?;
    let d_xw = d_own1.add(&d_partner2)?;
    let d_yw = d_own2.add(&d_partner1)?;

    let cam = params.attention.pair_params();
    let cam_grads =
        coattention_backward(trace.enc1.feature(), trace.enc2.feature(), &cam, &d_xw, &d_yw)?;
    // Tied storage: each shared tensor collects both legs' gradients.
    grads.attention.projection.add_assign(&cam_grads.wf)?;
    grads.attention.projection.add_assign(&cam_grads.wg)?;
    grads.attention.value.add_assign(&cam_grads.wh1)?;
    grads.attention.value.add_assign(&cam_grads.wh2)?;
    grads.attention.gamma.values_mut()[0] += cam_grads.gamma1 + cam_grads.gamma2;

    encode_backward(&trace.enc1, params, &cam_grads.input_x, &mut d_skips1, &mut grads)?;
    encode_backward(&trace.enc2, params, &cam_grads.input_y, &mut d_skips2, &mut grads)?;
    Ok((loss, grads))
}

/// Invocation counters for the structural O(n) checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InferStats {
    pub encoder_invocations: usize,
    pub decoder_invocations: usize,
}

/// Group inference with counters: every image is encoded and decoded exactly
/// once. For n == 2 this follows the pairwise path; larger groups attend
/// against the group mean and share one aggregate representation.
pub fn infer_group_traced(
    images: &[Tensor],
    params: &NetworkParams,
) -> Result<(Vec<SaliencyMap>, InferStats)> {
    if images.len() < 2 {
        return Err(Error::Usage(format!(
            "group inference needs at least 2 images, got {}",
            images.len()
        )));
    }
    let mut stats = InferStats::default();
    let mut encodings = Vec::with_capacity(images.len());
    for image in images {
        encodings.push(encode_traced(image, params)?);
        stats.encoder_invocations += 1;
    }
    let features: Vec<Tensor> = encodings.iter().map(|e| e.feature().clone()).collect();
    let cam = params.attention.pair_params();
    let mut maps = Vec::with_capacity(images.len());
    if images.len() == 2 {
        let (x_w, y_w) = coattention_forward(&features[0], &features[1], &cam)?;
        for (own, partner, enc) in [
            (&x_w, &y_w, &encodings[0]),
            (&y_w, &x_w, &encodings[1]),
        ] {
            let head = head_forward(own, partner, &enc.stage_out, params)?;
            stats.decoder_invocations += 1;
            maps.push(SaliencyMap::from_tensor(&head.prob)?);
        }
    } else {
        let group = group_average_attention(&features, &cam)?;
        for (weighted, enc) in group.weighted.iter().zip(&encodings) {
            let head = head_forward(weighted, &group.shared, &enc.stage_out, params)?;
            stats.decoder_invocations += 1;
            maps.push(SaliencyMap::from_tensor(&head.prob)?);
        }
    }
    Ok((maps, stats))
}

/// Produces one co-saliency map per image of the group.
pub fn infer_group(images: &[Tensor], params: &NetworkParams) -> Result<Vec<SaliencyMap>> {
    infer_group_traced(images, params).map(|(maps, _)| maps)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 6] = b"CAFCN1";

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serializes parameters: the magic string, the config integers, then every
/// tensor as `(rank, dims, little-endian doubles)` in [`NetworkParams::tensors`]
/// order.
pub fn checkpoint_bytes(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let c = &params.config;
    push_u32(&mut out, c.input_size);
    push_u32(&mut out, c.input_channels);
    push_u32(&mut out, c.encoder_channels.len());
    for &ch in &c.encoder_channels {
        push_u32(&mut out, ch);
    }
    push_u32(&mut out, c.feature_channels);
    push_u32(&mut out, c.attention_reduction);
    push_u32(&mut out, c.skip_stages.len());
    for &s in &c.skip_stages {
        push_u32(&mut out, s);
    }
    for t in params.tensors() {
        push_u32(&mut out, t.rank());
        for &d in t.shape() {
            push_u32(&mut out, d);
        }
        for &v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: &str) -> Result<T> {
        Err(Error::Format { offset: self.pos, message: message.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format {
                offset: self.data.len(),
                message: format!("truncated checkpoint while reading {what}"),
            });
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let bytes = self.take(4, what)?;
        Ok(u32::from_le_bytes(bytes.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(8 * n, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses a checkpoint produced by [`checkpoint_bytes`].
pub fn params_from_checkpoint_bytes(data: &[u8]) -> Result<NetworkParams> {
    let mut r = Reader { data, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, message: "wrong magic, expected CAFCN1".into() });
    }
    let input_size = r.u32("input_size")?;
    let input_channels = r.u32("input_channels")?;
    let n_stages = r.u32("stage count")?;
    if n_stages > 16 {
        return r.fail("implausible stage count");
    }
    let mut encoder_channels = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        encoder_channels.push(r.u32("encoder channels")?);
    }
    let feature_channels = r.u32("feature_channels")?;
    let attention_reduction = r.u32("attention_reduction")?;
    let n_skips = r.u32("skip count")?;
    if n_skips > n_stages {
        return r.fail("more skips than stages");
    }
    let mut skip_stages = Vec::with_capacity(n_skips);
    for _ in 0..n_skips {
        skip_stages.push(r.u32("skip stage")?);
    }
    let config = NetworkConfig {
        input_size,
        input_channels,
        encoder_channels,
        feature_channels,
        attention_reduction,
        skip_stages,
    };
    config.validate().map_err(|e| Error::Format {
        offset: r.pos,
        message: format!("invalid config in checkpoint: {e}"),
    })?;
    let mut params = NetworkParams::zeros(&config)?;
    for t in params.tensors_mut() {
        let rank = r.u32("tensor rank")?;
        if rank != t.rank() {
            return r.fail(&format!("tensor rank {rank} does not match expected {}", t.rank()));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("tensor dim")?);
        }
        if dims != t.shape() {
            return r.fail(&format!("tensor shape {:?} does not match expected {:?}", dims, t.shape()));
        }
        let values = r.f64s(t.len(), "tensor values")?;
        t.values_mut().copy_from_slice(&values);
    }
    if r.pos != data.len() {
        return r.fail("trailing bytes after last tensor");
    }
    if !params.all_finite() {
        return Err(Error::Format {
            offset: r.pos,
            message: "checkpoint contains non-finite parameter values".into(),
        });
    }
    Ok(params)
}

pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let data = fs::read(path)?;
    params_from_checkpoint_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};

    fn random_image(config: &NetworkConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let s = config.input_size;
        let values = (0..s * s * config.input_channels)
            .map(|_| rng.gen_range(0.0..=1.0))
            .collect();
        Tensor::new(&[s, s, config.input_channels], values).unwrap()
    }

    fn random_mask(config: &NetworkConfig, seed: u64) -> GroundTruthMask {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let s = config.input_size;
        GroundTruthMask::new(s, s, (0..s * s).map(|_| rng.gen_range(0..=1u8)).collect()).unwrap()
    }

    /// Trained-looking parameters: random init with the gate moved off zero.
    fn lively_params(config: &NetworkConfig, seed: u64) -> NetworkParams {
        let mut params = NetworkParams::init(config, seed).unwrap();
        params.attention.gamma.values_mut()[0] = 0.37;
        params
    }

    #[test]
    fn zero_image_and_biases_encode_to_zero() {
        let config = NetworkConfig::tiny();
        let params = NetworkParams::zeros(&config).unwrap();
        let image = Tensor::zeros(&[8, 8, 3]);
        let (feature, _) = encode(&image, &params).unwrap();
        assert!(feature.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_output_shape_follows_config() {
        let config = NetworkConfig::default();
        let params = NetworkParams::init(&config, 1).unwrap();
        let image = random_image(&config, 2);
        let (feature, skips) = encode(&image, &params).unwrap();
        assert_eq!(feature.shape(), &[4, 4, 32], "32 -> 4 with 3 pools");
        assert_eq!(skips.len(), 3);
        assert_eq!(skips[0].shape(), &[32, 32, 8]);
        assert_eq!(skips[1].shape(), &[16, 16, 16]);
        assert_eq!(skips[2].shape(), &[8, 8, 32]);
    }

    #[test]
    fn shared_weights_encode_identically() {
        let config = NetworkConfig::tiny();
        let params = NetworkParams::init(&config, 3).unwrap();
        let image = random_image(&config, 4);
        let (f1, _) = encode(&image, &params).unwrap();
        let (f2, _) = encode(&image, &params).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn identical_pair_gives_identical_maps_bitwise() {
        let config = NetworkConfig::tiny();
        let params = lively_params(&config, 5);
        let image = random_image(&config, 6);
        let (p1, p2) = forward_pair(&image, &image, &params).unwrap();
        assert_eq!(p1.values(), p2.values());
    }

    #[test]
    fn output_maps_are_input_resolution_and_open_interval() {
        let config = NetworkConfig::tiny();
        let params = lively_params(&config, 7);
        let (p1, p2) = forward_pair(&random_image(&config, 8), &random_image(&config, 9), &params)
            .unwrap();
        for p in [&p1, &p2] {
            assert_eq!((p.height(), p.width()), (8, 8));
            assert!(p.values().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn swapping_the_pair_swaps_the_outputs_bitwise() {
        let config = NetworkConfig::tiny();
        let params = lively_params(&config, 11);
        let a = random_image(&config, 12);
        let b = random_image(&config, 13);
        let (p1, p2) = forward_pair(&a, &b, &params).unwrap();
        let (q1, q2) = forward_pair(&b, &a, &params).unwrap();
        assert_eq!(p1.values(), q2.values());
        assert_eq!(p2.values(), q1.values());
    }

    #[test]
    fn zeroed_consistency_merge_isolates_branches() {
        // gamma = 0 and merge weights zeroed on the consistency half: branch 1
        // must not see image 2 at all.
        let config = NetworkConfig::tiny();
        let mut params = NetworkParams::init(&config, 17).unwrap();
        params.attention.gamma.values_mut()[0] = 0.0;
        let c = config.feature_channels;
        let shape = params.merge.weights().shape().to_vec();
        {
            let w = params.merge.weights_mut();
            for ic in 0..c {
                for oc in 0..shape[3] {
                    w.values_mut()[ic * shape[3] + oc] = 0.0;
                }
            }
        }
        let a = random_image(&config, 18);
        let b = random_image(&config, 19);
        let mut b2 = b.clone();
        b2.values_mut()[10] = (b.values()[10] + 0.31).min(1.0);
        let (p1, _) = forward_pair(&a, &b, &params).unwrap();
        let (p1_again, _) = forward_pair(&a, &b2, &params).unwrap();
        assert_eq!(p1.values(), p1_again.values());
    }

    #[test]
    fn skipless_config_still_produces_valid_maps() {
        let config = NetworkConfig { skip_stages: vec![], ..NetworkConfig::tiny() };
        let params = lively_params(&config, 23);
        let (p1, _) = forward_pair(&random_image(&config, 24), &random_image(&config, 25), &params)
            .unwrap();
        assert!(p1.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn loss_is_symmetric_under_pair_swap() {
        let config = NetworkConfig::tiny();
        let params = lively_params(&config, 29);
        let (a, b) = (random_image(&config, 30), random_image(&config, 31));
        let (ga, gb) = (random_mask(&config, 32), random_mask(&config, 33));
        let cfg = LossConfig::default();
        let (l1, _) = forward_backward_pair(&a, &b, &ga, &gb, &params, &cfg).unwrap();
        let (l2, _) = forward_backward_pair(&b, &a, &gb, &ga, &params, &cfg).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn network_gradients_match_finite_differences_on_probe_set() {
        // Full-network check over a pseudorandom subset of parameters; the
        // acceptance suite sweeps every coordinate.
        let config = NetworkConfig::tiny();
        let params = lively_params(&config, 37);
        let (a, b) = (random_image(&config, 38), random_image(&config, 39));
        let (ga, gb) = (random_mask(&config, 40), random_mask(&config, 41));
        let cfg = LossConfig::default();
        let (_, grads) = forward_backward_pair(&a, &b, &ga, &gb, &params, &cfg).unwrap();
        let analytic = grads.flatten();
        let flat = params.flatten();
        let mut worst = 0.0f64;
        let mut probe = params.clone();
        for i in (0..flat.len()).step_by(97) {
            let mut plus = flat.clone();
            plus[i] += 1e-6;
            probe.assign_from_flat(&plus).unwrap();
            let (lp, _) = forward_backward_pair(&a, &b, &ga, &gb, &probe, &cfg).unwrap();
            let mut minus = flat.clone();
            minus[i] -= 1e-6;
            probe.assign_from_flat(&minus).unwrap();
            let (lm, _) = forward_backward_pair(&a, &b, &ga, &gb, &probe, &cfg).unwrap();
            let fd = (lp - lm) / 2e-6;
            worst = worst.max(crate::gradcheck::rel_err(analytic[i], fd));
        }
        assert!(worst < 1e-4, "worst probed relative error {worst}");
    }

    #[test]
    fn rejects_non_matching_image_shape() {
        let config = NetworkConfig::tiny();
        let params = NetworkParams::init(&config, 43).unwrap();
        let bad = Tensor::zeros(&[16, 16, 3]);
        assert!(matches!(
            forward_pair(&bad, &bad, &params),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn group_of_two_matches_forward_pair() {
        let config = NetworkConfig::tiny();
        let params = lively_params(&config, 47);
        let a = random_image(&config, 48);
        let b = random_image(&config, 49);
        let (p1, p2) = forward_pair(&a, &b, &params).unwrap();
        let (maps, stats) = infer_group_traced(&[a, b], &params).unwrap();
        assert_eq!(maps[0].values(), p1.values());
        assert_eq!(maps[1].values(), p2.values());
        assert_eq!(stats.encoder_invocations, 2);
        assert_eq!(stats.decoder_invocations, 2);
    }

    #[test]
    fn group_of_identical_images_yields_identical_maps() {
        let config = NetworkConfig::tiny();
        let params = lively_params(&config, 53);
        let image = random_image(&config, 54);
        let maps = infer_group(&[image.clone(), image.clone(), image.clone(), image], &params)
            .unwrap();
        for m in &maps[1..] {
            assert_eq!(m.values(), maps[0].values());
        }
    }

    #[test]
    fn group_encoder_count_is_linear() {
        let config = NetworkConfig::tiny();
        let params = lively_params(&config, 59);
        let images: Vec<Tensor> = (0..5).map(|i| random_image(&config, 60 + i)).collect();
        let (_, stats) = infer_group_traced(&images, &params).unwrap();
        assert_eq!(stats.encoder_invocations, 5);
        assert_eq!(stats.decoder_invocations, 5);
    }

    #[test]
    fn group_rejects_single_image() {
        let config = NetworkConfig::tiny();
        let params = NetworkParams::init(&config, 61).unwrap();
        let image = random_image(&config, 62);
        assert!(matches!(infer_group(&[image], &params), Err(Error::Usage(_))));
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let config = NetworkConfig::tiny();
        let params = lively_params(&config, 67);
        let bytes = checkpoint_bytes(&params);
        let back = params_from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn checkpoint_rejects_wrong_magic() {
        let config = NetworkConfig::tiny();
        let params = NetworkParams::init(&config, 71).unwrap();
        let mut bytes = checkpoint_bytes(&params);
        bytes[5] = b'2';
        match params_from_checkpoint_bytes(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 0);
                assert!(message.contains("magic"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_rejects_non_finite_values() {
        let config = NetworkConfig::tiny();
        let mut params = NetworkParams::init(&config, 72).unwrap();
        params.encoder[0].weights_mut().values_mut()[0] = f64::NAN;
        let bytes = checkpoint_bytes(&params);
        match params_from_checkpoint_bytes(&bytes) {
            Err(Error::Format { message, .. }) => assert!(message.contains("non-finite")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_rejects_truncation() {
        let config = NetworkConfig::tiny();
        let params = NetworkParams::init(&config, 73).unwrap();
        let bytes = checkpoint_bytes(&params);
        let cut = &bytes[..bytes.len() - 9];
        match params_from_checkpoint_bytes(cut) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, cut.len());
                assert!(message.contains("truncated"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn flatten_assign_round_trip() {
        let config = NetworkConfig::tiny();
        let params = lively_params(&config, 79);
        let flat = params.flatten();
        let mut rebuilt = NetworkParams::zeros(&config).unwrap();
        rebuilt.assign_from_flat(&flat).unwrap();
        assert_eq!(params, rebuilt);
    }

    #[test]
    fn finite_difference_helper_is_wired() {
        // Keeps the shared helpers exercised from this module too.
        let f = |x: &[f64]| x[0] * x[0];
        let fd = central_diff(&f, &[3.0], 1e-5);
        assert!(max_rel_err(&[6.0], &fd) < 1e-9);
    }
}
