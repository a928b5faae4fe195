//! Generator and critic networks, the masking/composition operators that
//! connect them, and the noise distribution.
//!
//! The generator is an encoder–decoder of three-branch dilated convolution
//! blocks with channel-concatenating skip connections; the critic is a
//! stride-2 convolutional funnel ending in a single linear unit.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::mask::MaskMatrix;
use crate::nn::ops::{self, hard_sigmoid, hard_sigmoid_grad};
use crate::nn::{Conv, ConvGeometry, FeatureMap, Grads, ParamSet, Real};

/// Channels of the generator input: masked image, masked noise, mask.
pub const GENERATOR_INPUT_CHANNELS: usize = 7;
/// Channels of the critic input: image plus mask.
pub const CRITIC_INPUT_CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub input_side: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    /// Dilations of the three parallel branches of every block.
    pub dilation_rates: [usize; 3],
    pub block_kernel: usize,
    pub head_kernel: usize,
    pub head_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_side: 128,
            encoder_widths: vec![128, 128, 256, 512],
            decoder_widths: vec![256, 128, 128],
            dilation_rates: [1, 2, 5],
            block_kernel: 5,
            head_kernel: 3,
            head_channels: 8,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.encoder_widths.len();
        if levels < 2 {
            return Err(Error::validation("generator needs at least two encoder blocks"));
        }
        if self.decoder_widths.len() + 1 != levels {
            return Err(Error::validation(format!(
                "{} encoder blocks need {} decoder blocks, got {}",
                levels,
                levels - 1,
                self.decoder_widths.len()
            )));
        }
        if let Some(w) = self.encoder_widths.iter().chain(&self.decoder_widths).find(|&&w| w == 0 || w % 4 != 0) {
            return Err(Error::validation(format!("block width {w} is not a positive multiple of 4")));
        }
        let factor = 1usize << (levels - 1);
        if self.input_side == 0 || self.input_side % factor != 0 {
            return Err(Error::validation(format!("input side {} is not divisible by {factor}", self.input_side)));
        }
        if self.block_kernel % 2 == 0 || self.head_kernel % 2 == 0 {
            return Err(Error::validation("kernel sizes must be odd for same padding"));
        }
        if self.dilation_rates.contains(&0) || self.head_channels == 0 {
            return Err(Error::validation("dilation rates and head channels must be positive"));
        }
        Ok(())
    }

    /// Spatial side of encoder block `k` (and the matching decoder stage).
    pub fn level_side(&self, k: usize) -> usize {
        self.input_side >> k
    }

    /// Input channels of decoder block `j`.
    pub fn decoder_input_channels(&self, j: usize) -> usize {
        let levels = self.encoder_widths.len();
        if j == 0 {
            self.encoder_widths[levels - 1]
        } else {
            self.decoder_widths[j - 1] + self.encoder_widths[levels - 1 - j]
        }
    }

    pub fn head_input_channels(&self) -> usize {
        self.decoder_widths.last().copied().unwrap_or(0) + self.encoder_widths[0] + GENERATOR_INPUT_CHANNELS
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let kk = self.block_kernel * self.block_kernel;
        let block = |cin: usize, n: usize| cin * n * kk + n;
        let mut total = 0;
        let mut cin = GENERATOR_INPUT_CHANNELS;
        for &n in &self.encoder_widths {
            total += block(cin, n);
            cin = n;
        }
        for (j, &n) in self.decoder_widths.iter().enumerate() {
            total += block(self.decoder_input_channels(j), n);
        }
        let hk = self.head_kernel * self.head_kernel;
        total += self.head_input_channels() * self.head_channels * hk + self.head_channels;
        total += self.head_channels * 3 * hk + 3;
        total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    pub input_side: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub clip_norm: f64,
    pub leaky_slope: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { input_side: 128, widths: vec![64, 128, 256, 256, 512], kernel: 5, stride: 2, clip_norm: 1.0, leaky_slope: 0.2 }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::validation("critic needs at least one layer of positive width"));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::validation(format!("clip norm {} must be positive", self.clip_norm)));
        }
        if self.kernel == 0 || self.stride == 0 || self.input_side == 0 {
            return Err(Error::validation("critic kernel, stride and input side must be positive"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::validation("leaky ReLU slope must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Feature-map sides after each convolution.
    pub fn feature_sides(&self) -> Vec<usize> {
        let mut side = self.input_side;
        self.widths
            .iter()
            .map(|_| {
                side = side.div_ceil(self.stride);
                side
            })
            .collect()
    }

    pub fn flattened_features(&self) -> usize {
        let s = *self.feature_sides().last().unwrap_or(&0);
        self.widths.last().copied().unwrap_or(0) * s * s
    }

    pub fn parameter_count(&self) -> usize {
        let kk = self.kernel * self.kernel;
        let mut cin = CRITIC_INPUT_CHANNELS;
        let mut total = 0;
        for &w in &self.widths {
            total += cin * w * kk + w;
            cin = w;
        }
        total + self.flattened_features() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { generator: GeneratorConfig::default(), critic: CriticConfig::default() }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.critic.validate()?;
        if self.generator.input_side != self.critic.input_side {
            return Err(Error::validation("generator and critic input sides differ"));
        }
        Ok(())
    }

    /// Reduced widths for quick desk-scale runs at the given side.
    pub fn desk_scale(side: usize) -> Self {
        Self {
            generator: GeneratorConfig {
                input_side: side,
                encoder_widths: vec![32, 32, 64, 128],
                decoder_widths: vec![64, 32, 32],
                ..GeneratorConfig::default()
            },
            critic: CriticConfig { input_side: side, widths: vec![16, 32, 64, 64, 128], ..CriticConfig::default() },
        }
    }

    /// The smallest configuration, used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            generator: GeneratorConfig {
                input_side: 8,
                encoder_widths: vec![8, 8],
                decoder_widths: vec![8],
                ..GeneratorConfig::default()
            },
            critic: CriticConfig { input_side: 8, widths: vec![4, 4], ..CriticConfig::default() },
        }
    }
}

/// Three parallel convolutions with different dilations whose ELU outputs
/// are concatenated.
#[derive(Debug, Clone)]
struct Block {
    branches: [Conv; 3],
}

impl Block {
    fn build<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        width: usize,
        kernel: usize,
        dilations: [usize; 3],
        transposed: bool,
        rng: &mut R,
    ) -> Self {
        let split = [width / 2, width / 4, width / 4];
        let branches = std::array::from_fn(|i| {
            let geometry = if transposed {
                ConvGeometry::deconv(cin, split[i], kernel, dilations[i])
            } else {
                ConvGeometry::conv(cin, split[i], kernel, dilations[i], 1)
            };
            let weight = params.push_weight(&format!("{name}.b{i}.weight"), geometry.weight_shape(), rng, 1.0);
            let bias = params.push_bias(&format!("{name}.b{i}.bias"), geometry.out_channels);
            Conv { geometry, weight, bias }
        });
        Self { branches }
    }

    fn forward<T: Real>(&self, params: &ParamSet<T>, x: &FeatureMap<T>) -> FeatureMap<T> {
        let outs: Vec<FeatureMap<T>> = self
            .branches
            .iter()
            .map(|b| {
                let mut y = b.forward(params, x);
                ops::elu(&mut y);
                y
            })
            .collect();
        FeatureMap::concat(&[&outs[0], &outs[1], &outs[2]])
    }

    fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        x: &FeatureMap<T>,
        y: &FeatureMap<T>,
        dy: &FeatureMap<T>,
        grads: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let widths: Vec<usize> = self.branches.iter().map(|b| b.geometry.out_channels).collect();
        let ys = y.split(&widths);
        let dys = dy.split(&widths);
        let mut dx: Option<FeatureMap<T>> = None;
        for ((branch, y), mut dy) in self.branches.iter().zip(&ys).zip(dys) {
            ops::elu_backward(y, &mut dy);
            if let Some(g) = branch.backward(params, x, &dy, grads, need_input_grad) {
                match dx.as_mut() {
                    Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, &b)| *a += b),
                    None => dx = Some(g),
                }
            }
        }
        dx
    }
}

/// Intermediate activations of one generator forward pass.
#[derive(Debug, Clone)]
pub struct GeneratorTape<T> {
    enc_in: Vec<FeatureMap<T>>,
    enc_out: Vec<FeatureMap<T>>,
    pool_argmax: Vec<Vec<usize>>,
    dec_in: Vec<FeatureMap<T>>,
    dec_out: Vec<FeatureMap<T>>,
    head_in: FeatureMap<T>,
    head_hidden: FeatureMap<T>,
    head_pre: FeatureMap<T>,
    /// Generator output in [0, 1], `[3, N, H, W]`.
    pub output: FeatureMap<T>,
}

#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub params: ParamSet<T>,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    head: [Conv; 2],
}

impl<T: Real> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let k = config.block_kernel;
        let mut cin = GENERATOR_INPUT_CHANNELS;
        let mut encoder = Vec::new();
        for (i, &w) in config.encoder_widths.iter().enumerate() {
            encoder.push(Block::build(&mut params, &format!("gen.enc{i}"), cin, w, k, config.dilation_rates, false, rng));
            cin = w;
        }
        let mut decoder = Vec::new();
        for (j, &w) in config.decoder_widths.iter().enumerate() {
            let cin = config.decoder_input_channels(j);
            decoder.push(Block::build(&mut params, &format!("gen.dec{j}"), cin, w, k, config.dilation_rates, true, rng));
        }
        let mut head_layer = |name: &str, cin: usize, cout: usize| {
            let geometry = ConvGeometry::deconv(cin, cout, config.head_kernel, 1);
            let weight = params.push_weight(&format!("{name}.weight"), geometry.weight_shape(), rng, 1.0);
            let bias = params.push_bias(&format!("{name}.bias"), cout);
            Conv { geometry, weight, bias }
        };
        let head = [
            head_layer("gen.head0", config.head_input_channels(), config.head_channels),
            head_layer("gen.head1", config.head_channels, 3),
        ];
        Ok(Self { config, params, encoder, decoder, head })
    }

    /// Rebuilds the layer graph around existing parameters.
    pub fn with_params(config: GeneratorConfig, params: ParamSet<T>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut shell = Self::new(config, &mut rng)?;
        check_same_layout(&shell.params, &params)?;
        shell.params = params;
        Ok(shell)
    }

    pub fn forward(&self, input: &FeatureMap<T>) -> Result<GeneratorTape<T>> {
        let side = self.config.input_side;
        if input.channels != GENERATOR_INPUT_CHANNELS || input.height != side || input.width != side {
            return Err(Error::contract(format!(
                "generator expects {GENERATOR_INPUT_CHANNELS}×{side}×{side} input, got {}×{}×{}",
                input.channels, input.height, input.width
            )));
        }
        let levels = self.encoder.len();
        let mut enc_in = Vec::with_capacity(levels);
        let mut enc_out: Vec<FeatureMap<T>> = Vec::with_capacity(levels);
        let mut pool_argmax = Vec::with_capacity(levels - 1);
        for (k, block) in self.encoder.iter().enumerate() {
            let x = if k == 0 {
                input.clone()
            } else {
                let (pooled, arg) = ops::max_pool2(&enc_out[k - 1]);
                pool_argmax.push(arg);
                pooled
            };
            enc_out.push(block.forward(&self.params, &x));
            enc_in.push(x);
        }
        let mut dec_in = Vec::with_capacity(levels - 1);
        let mut dec_out: Vec<FeatureMap<T>> = Vec::with_capacity(levels - 1);
        for (j, block) in self.decoder.iter().enumerate() {
            let x = if j == 0 {
                enc_out[levels - 1].clone()
            } else {
                let up = ops::upsample2(&dec_out[j - 1]);
                FeatureMap::concat(&[&up, &enc_out[levels - 1 - j]])
            };
            dec_out.push(block.forward(&self.params, &x));
            dec_in.push(x);
        }
        let up = ops::upsample2(dec_out.last().expect("at least one decoder block"));
        let head_in = FeatureMap::concat(&[&up, &enc_out[0], input]);
        let mut head_hidden = self.head[0].forward(&self.params, &head_in);
        ops::elu(&mut head_hidden);
        let head_pre = self.head[1].forward(&self.params, &head_hidden);
        let output = FeatureMap { data: head_pre.data.iter().map(|&v| hard_sigmoid(v)).collect(), ..head_pre.clone() };
        Ok(GeneratorTape {
            enc_in,
            enc_out,
            pool_argmax,
            dec_in,
            dec_out,
            head_in,
            head_hidden,
            head_pre,
            output,
        })
    }

    /// Parameter gradients for an upstream gradient on the output.
    pub fn backward(&self, tape: &GeneratorTape<T>, d_output: &FeatureMap<T>) -> Grads<T> {
        let p = &self.params;
        let mut grads = p.zero_grads();
        let levels = self.encoder.len();

        let d_pre = FeatureMap {
            data: d_output.data.iter().zip(&tape.head_pre.data).map(|(&g, &x)| g * hard_sigmoid_grad(x)).collect(),
            ..d_output.clone()
        };
        let mut d_hidden = self.head[1].backward(p, &tape.head_hidden, &d_pre, &mut grads, true).expect("input grad");
        ops::elu_backward(&tape.head_hidden, &mut d_hidden);
        let d_head_in = self.head[0].backward(p, &tape.head_in, &d_hidden, &mut grads, true).expect("input grad");
        let last_dec = self.config.decoder_widths[levels - 2];
        let parts = d_head_in.split(&[last_dec, self.config.encoder_widths[0], GENERATOR_INPUT_CHANNELS]);
        let mut d_enc_out: Vec<Option<FeatureMap<T>>> = vec![None; levels];
        accumulate(&mut d_enc_out[0], &parts[1]);

        let mut d_dec_out = ops::upsample2_backward(&parts[0]);
        for j in (0..levels - 1).rev() {
            let d_in = self.decoder[j]
                .backward(p, &tape.dec_in[j], &tape.dec_out[j], &d_dec_out, &mut grads, true)
                .expect("input grad");
            if j == 0 {
                accumulate(&mut d_enc_out[levels - 1], &d_in);
            } else {
                let parts = d_in.split(&[self.config.decoder_widths[j - 1], self.config.encoder_widths[levels - 1 - j]]);
                accumulate(&mut d_enc_out[levels - 1 - j], &parts[1]);
                d_dec_out = ops::upsample2_backward(&parts[0]);
            }
        }

        for k in (0..levels).rev() {
            let dy = d_enc_out[k].take().expect("every encoder output feeds a later stage");
            let d_in = self.encoder[k].backward(p, &tape.enc_in[k], &tape.enc_out[k], &dy, &mut grads, k > 0);
            if let Some(d_in) = d_in {
                let d_prev = ops::max_pool2_backward(&tape.enc_out[k - 1], &tape.pool_argmax[k - 1], &d_in);
                accumulate(&mut d_enc_out[k - 1], &d_prev);
            }
        }
        grads
    }

    /// Imputes the missing pixels of one image.
    pub fn inpaint(&self, image: &ImageTensor, mask: &MaskMatrix, noise: &NoiseTensor) -> Result<ImageTensor> {
        if !self.params.all_finite() {
            return Err(Error::Fault("generator has non-finite parameters".into()));
        }
        let masked = mask_image(image, mask)?;
        let z = mask_noise(noise, mask)?;
        let input = generator_input::<T>(&[masked.clone()], &[z], std::slice::from_ref(mask))?;
        let tape = self.forward(&input)?;
        let raw = feature_map_to_images(&tape.output).remove(0);
        compose_output(&raw, &masked, mask)
    }
}

fn accumulate<T: Real>(slot: &mut Option<FeatureMap<T>>, g: &FeatureMap<T>) {
    match slot {
        Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.clone()),
    }
}

fn check_same_layout<T: Real>(expected: &ParamSet<T>, got: &ParamSet<T>) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Checkpoint(format!("expected {} parameter tensors, found {}", expected.len(), got.len())));
    }
    for (a, b) in expected.iter().zip(got.iter()) {
        if a.name != b.name || a.shape != b.shape || a.kind != b.kind {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: expected {} {:?}, found {} {:?}",
                a.name, a.shape, b.name, b.shape
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CriticTape<T> {
    /// Input of each convolution (the first is the network input).
    layer_in: Vec<FeatureMap<T>>,
    /// Post-activation output of each convolution.
    layer_out: Vec<FeatureMap<T>>,
    pub scores: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Critic<T> {
    pub config: CriticConfig,
    pub params: ParamSet<T>,
    convs: Vec<Conv>,
    dense_weight: usize,
    dense_bias: usize,
}

impl<T: Real> Critic<T> {
    pub fn new<R: Rng + ?Sized>(config: CriticConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut cin = CRITIC_INPUT_CHANNELS;
        let mut convs = Vec::new();
        for (i, &w) in config.widths.iter().enumerate() {
            let geometry = ConvGeometry::conv(cin, w, config.kernel, 1, config.stride);
            let weight = params.push_weight(&format!("critic.conv{i}.weight"), geometry.weight_shape(), rng, 1.0);
            let bias = params.push_bias(&format!("critic.conv{i}.bias"), w);
            convs.push(Conv { geometry, weight, bias });
            cin = w;
        }
        let dense_weight = params.push_weight("critic.dense.weight", vec![1, config.flattened_features()], rng, 1.0);
        let dense_bias = params.push_bias("critic.dense.bias", 1);
        Ok(Self { config, params, convs, dense_weight, dense_bias })
    }

    pub fn with_params(config: CriticConfig, params: ParamSet<T>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut shell = Self::new(config, &mut rng)?;
        check_same_layout(&shell.params, &params)?;
        shell.params = params;
        Ok(shell)
    }

    pub fn dense_weight_index(&self) -> usize {
        self.dense_weight
    }

    pub fn forward(&self, input: &FeatureMap<T>) -> Result<CriticTape<T>> {
        let side = self.config.input_side;
        if input.channels != CRITIC_INPUT_CHANNELS || input.height != side || input.width != side {
            return Err(Error::contract(format!(
                "critic expects {CRITIC_INPUT_CHANNELS}×{side}×{side} input, got {}×{}×{}",
                input.channels, input.height, input.width
            )));
        }
        let slope = T::of(self.config.leaky_slope);
        let mut layer_in = Vec::with_capacity(self.convs.len());
        let mut layer_out: Vec<FeatureMap<T>> = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let x = layer_out.last().unwrap_or(input).clone();
            let mut y = conv.forward(&self.params, &x);
            ops::leaky_relu(&mut y, slope);
            layer_in.push(x);
            layer_out.push(y);
        }
        let last = layer_out.last().expect("at least one layer");
        let scores = ops::dense_scalar(last, &self.params.get(self.dense_weight).value, self.params.get(self.dense_bias).value[0]);
        Ok(CriticTape { layer_in, layer_out, scores })
    }

    pub fn scores(&self, input: &FeatureMap<T>) -> Result<Vec<T>> {
        Ok(self.forward(input)?.scores)
    }

    /// Parameter gradients and, optionally, the input gradient for upstream
    /// per-sample score gradients.
    pub fn backward(&self, tape: &CriticTape<T>, d_scores: &[T], need_input_grad: bool) -> (Grads<T>, Option<FeatureMap<T>>) {
        let mut grads = self.params.zero_grads();
        let slope = T::of(self.config.leaky_slope);
        let last = tape.layer_out.last().expect("at least one layer");
        let (mut dy, dw, db) = ops::dense_scalar_backward(last, &self.params.get(self.dense_weight).value, d_scores);
        grads.get_mut(self.dense_weight).copy_from_slice(&dw);
        grads.get_mut(self.dense_bias)[0] = db;
        let mut d_input = None;
        for (i, conv) in self.convs.iter().enumerate().rev() {
            ops::leaky_relu_backward(&tape.layer_out[i], &mut dy, slope);
            let want_dx = i > 0 || need_input_grad;
            match conv.backward(&self.params, &tape.layer_in[i], &dy, &mut grads, want_dx) {
                Some(dx) if i > 0 => dy = dx,
                dx => d_input = dx,
            }
        }
        (grads, d_input)
    }

    /// Projects each weight tensor onto the L2 ball of radius `clip_norm`.
    pub fn clip_weights(&mut self, clip_norm: f64) -> usize {
        self.params.clip_weight_norms(clip_norm)
    }
}

/// i.i.d. Normal(0, σ²) values shaped like an RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTensor {
    height: usize,
    width: usize,
    sigma: f64,
    values: Vec<f32>,
}

impl NoiseTensor {
    pub fn new(height: usize, width: usize, sigma: f64, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width * 3 {
            return Err(Error::validation("noise buffer does not match its shape"));
        }
        Ok(Self { height, width, sigma, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, sigma: 0.0, values: vec![0.0; height * width * 3] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    fn check_mask(&self, m: &MaskMatrix) -> Result<()> {
        if self.height != m.height() || self.width != m.width() {
            return Err(Error::contract(format!(
                "noise is {}x{} but mask is {}x{}",
                self.height,
                self.width,
                m.height(),
                m.width()
            )));
        }
        Ok(())
    }
}

pub fn sample_noise<R: Rng + ?Sized>(h: usize, w: usize, sigma: f64, rng: &mut R) -> Result<NoiseTensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::validation(format!("noise sigma {sigma} must be positive")));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::validation(e.to_string()))?;
    let values = (0..h * w * 3).map(|_| normal.sample(rng) as f32).collect();
    NoiseTensor::new(h, w, sigma, values)
}

/// `x ⊙ M`: missing pixels become 0 in every channel.
pub fn mask_image(x: &ImageTensor, m: &MaskMatrix) -> Result<ImageTensor> {
    x.check_mask(m)?;
    let mut out = x.clone();
    for (px, &valid) in out.pixels_mut().chunks_exact_mut(3).zip(m.bits()) {
        if valid == 0 {
            px.fill(0.0);
        }
    }
    Ok(out)
}

/// `z ⊙ (1 − M)`: noise survives only on missing pixels.
pub fn mask_noise(z: &NoiseTensor, m: &MaskMatrix) -> Result<NoiseTensor> {
    z.check_mask(m)?;
    let mut out = z.clone();
    for (px, &valid) in out.values.chunks_exact_mut(3).zip(m.bits()) {
        if valid == 1 {
            px.fill(0.0);
        }
    }
    Ok(out)
}

/// `g ⊙ (1 − M) + x̃ ⊙ M` realised as a per-pixel selector, so valid pixels
/// are copied bit-for-bit.
pub fn compose_output(g_out: &ImageTensor, x_tilde: &ImageTensor, m: &MaskMatrix) -> Result<ImageTensor> {
    g_out.check_shape(x_tilde)?;
    x_tilde.check_mask(m)?;
    let mut out = x_tilde.clone();
    for ((dst, src), &valid) in out.pixels_mut().chunks_exact_mut(3).zip(g_out.pixels().chunks_exact(3)).zip(m.bits()) {
        if valid == 0 {
            dst.copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Packs images into a `[3, N, H, W]` map.
pub fn images_to_feature_map<T: Real>(images: &[ImageTensor]) -> FeatureMap<T> {
    let (h, w) = (images[0].height(), images[0].width());
    let mut fm = FeatureMap::zeros(3, images.len(), h, w);
    for (n, img) in images.iter().enumerate() {
        for (p, px) in img.pixels().chunks_exact(3).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                let i = fm.index(c, n, 0, 0) + p;
                fm.data[i] = T::of(v as f64);
            }
        }
    }
    fm
}

pub fn feature_map_to_images<T: Real>(fm: &FeatureMap<T>) -> Vec<ImageTensor> {
    (0..fm.batch)
        .map(|n| {
            ImageTensor::from_fn(fm.height, fm.width, |r, c, ch| fm.data[fm.index(ch, n, r, c)].as_f64() as f32)
        })
        .collect()
}

pub fn masks_to_feature_map<T: Real>(masks: &[MaskMatrix]) -> FeatureMap<T> {
    let (h, w) = (masks[0].height(), masks[0].width());
    let mut fm = FeatureMap::zeros(1, masks.len(), h, w);
    for (n, m) in masks.iter().enumerate() {
        let start = fm.index(0, n, 0, 0);
        for (dst, &b) in fm.data[start..start + h * w].iter_mut().zip(m.bits()) {
            *dst = T::of(b as f64);
        }
    }
    fm
}

pub fn noise_to_feature_map<T: Real>(noise: &[NoiseTensor]) -> FeatureMap<T> {
    let (h, w) = (noise[0].height, noise[0].width);
    let mut fm = FeatureMap::zeros(3, noise.len(), h, w);
    for (n, z) in noise.iter().enumerate() {
        for (p, px) in z.values.chunks_exact(3).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                let i = fm.index(c, n, 0, 0) + p;
                fm.data[i] = T::of(v as f64);
            }
        }
    }
    fm
}

/// The 7-channel generator input `(x̃, z̃, M)` for already-masked images and
/// noise.
pub fn generator_input<T: Real>(x_tilde: &[ImageTensor], z_tilde: &[NoiseTensor], masks: &[MaskMatrix]) -> Result<FeatureMap<T>> {
    if x_tilde.is_empty() || x_tilde.len() != z_tilde.len() || x_tilde.len() != masks.len() {
        return Err(Error::contract("generator input needs equally many images, noise tensors and masks"));
    }
    for ((x, z), m) in x_tilde.iter().zip(z_tilde).zip(masks) {
        x.check_mask(m)?;
        z.check_mask(m)?;
        x.check_shape(&x_tilde[0])?;
    }
    let x = images_to_feature_map::<T>(x_tilde);
    let z = noise_to_feature_map::<T>(z_tilde);
    let m = masks_to_feature_map::<T>(masks);
    Ok(FeatureMap::concat(&[&x, &z, &m]))
}

/// Single-image inpainting with noise drawn from `seed`; repeated calls
/// with the same inputs return identical images.
pub fn inpaint_seeded(generator: &Generator<f32>, image: &ImageTensor, mask: &MaskMatrix, sigma: f64, seed: u64) -> Result<ImageTensor> {
    let mut rng = crate::rng::SeedStreams::new(seed).stream("inpaint-noise");
    let noise = sample_noise(image.height(), image.width(), sigma, &mut rng)?;
    generator.inpaint(image, mask, &noise)
}

/// Generator and critic together.
#[derive(Debug, Clone)]
pub struct WgainModel<T> {
    pub generator: Generator<T>,
    pub critic: Critic<T>,
}

impl<T: Real> WgainModel<T> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self { generator: Generator::new(config.generator.clone(), rng)?, critic: Critic::new(config.critic.clone(), rng)? })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig { generator: self.generator.config.clone(), critic: self.critic.config.clone() }
    }

    pub fn cast<U: Real>(&self) -> WgainModel<U> {
        WgainModel {
            generator: Generator {
                config: self.generator.config.clone(),
                params: self.generator.params.cast(),
                encoder: self.generator.encoder.clone(),
                decoder: self.generator.decoder.clone(),
                head: self.generator.head,
            },
            critic: Critic {
                config: self.critic.config.clone(),
                params: self.critic.params.cast(),
                convs: self.critic.convs.clone(),
                dense_weight: self.critic.dense_weight,
                dense_bias: self.critic.dense_bias,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::gen_noise_mask;
    use crate::rng::SeedStreams;

    fn tiny() -> WgainModel<f64> {
        WgainModel::new(&ModelConfig::tiny(), &mut SeedStreams::new(1).stream("init")).unwrap()
    }

    #[test]
    fn default_configs_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::desk_scale(32).validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        let bad = GeneratorConfig { encoder_widths: vec![6, 8], decoder_widths: vec![8], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = GeneratorConfig { input_side: 100, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(CriticConfig { clip_norm: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn shape_audit_matches_closed_forms() {
        for cfg in [ModelConfig::tiny(), ModelConfig::desk_scale(32)] {
            let m = WgainModel::<f32>::new(&cfg, &mut SeedStreams::new(0).stream("init")).unwrap();
            assert_eq!(m.generator.params.scalar_count(), cfg.generator.parameter_count());
            assert_eq!(m.critic.params.scalar_count(), cfg.critic.parameter_count());
        }
        let m = WgainModel::<f32>::new(&ModelConfig::desk_scale(32), &mut SeedStreams::new(0).stream("init")).unwrap();
        let p = &m.generator.params;
        assert_eq!(p.by_name("gen.enc0.b0.weight").unwrap().shape, vec![16, 7, 5, 5]);
        assert_eq!(p.by_name("gen.enc0.b1.weight").unwrap().shape, vec![8, 7, 5, 5]);
        assert_eq!(p.by_name("gen.enc3.b2.weight").unwrap().shape, vec![32, 64, 5, 5]);
        // Decoder weights are stored in transposed-convolution layout.
        assert_eq!(p.by_name("gen.dec0.b0.weight").unwrap().shape, vec![128, 32, 5, 5]);
        assert_eq!(p.by_name("gen.dec1.b0.weight").unwrap().shape, vec![64 + 64, 16, 5, 5]);
        assert_eq!(p.by_name("gen.head0.weight").unwrap().shape, vec![32 + 32 + 7, 8, 3, 3]);
        assert_eq!(p.by_name("gen.head1.weight").unwrap().shape, vec![8, 3, 3, 3]);
        let c = &m.critic.params;
        assert_eq!(c.by_name("critic.conv0.weight").unwrap().shape, vec![16, 4, 5, 5]);
        assert_eq!(c.by_name("critic.dense.weight").unwrap().shape, vec![1, 128]);
    }

    #[test]
    fn full_size_resolutions() {
        let g = GeneratorConfig::default();
        let sides: Vec<usize> = (0..4).map(|k| g.level_side(k)).collect();
        assert_eq!(sides, vec![128, 64, 32, 16]);
        let c = CriticConfig::default();
        assert_eq!(c.feature_sides(), vec![64, 32, 16, 8, 4]);
        assert_eq!(c.flattened_features(), 512 * 16);
    }

    #[test]
    fn generator_forward_shapes_and_range() {
        let model = WgainModel::<f32>::new(&ModelConfig::desk_scale(32), &mut SeedStreams::new(3).stream("init")).unwrap();
        let mut rng = SeedStreams::new(3).stream("data");
        let mut input = FeatureMap::zeros(7, 2, 32, 32);
        input.data.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
        let tape = model.generator.forward(&input).unwrap();
        let sides: Vec<usize> = tape.enc_out.iter().map(|e| e.height).collect();
        assert_eq!(sides, vec![32, 16, 8, 4]);
        let dec: Vec<usize> = tape.dec_out.iter().map(|d| d.height).collect();
        assert_eq!(dec, vec![4, 8, 16]);
        assert_eq!((tape.output.channels, tape.output.height), (3, 32));
        assert!(tape.output.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let wrong = FeatureMap::<f32>::zeros(7, 1, 16, 16);
        assert!(model.generator.forward(&wrong).is_err());
    }

    #[test]
    fn zero_dense_layer_scores_zero() {
        let mut m = tiny();
        let idx = m.critic.dense_weight_index();
        m.critic.params.get_mut(idx).value.iter_mut().for_each(|v| *v = 0.0);
        let mut rng = SeedStreams::new(2).stream("data");
        let mut input = FeatureMap::zeros(4, 3, 8, 8);
        input.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        assert!(m.critic.scores(&input).unwrap().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn clipping_bounds_every_critic_weight() {
        let mut m = WgainModel::<f32>::new(&ModelConfig::desk_scale(32), &mut SeedStreams::new(0).stream("init")).unwrap();
        let gen_before = m.generator.params.clone();
        m.critic.params.iter_mut().for_each(|p| p.value.iter_mut().for_each(|v| *v *= 10.0));
        m.critic.clip_weights(1.0);
        assert!(m.critic.params.max_weight_norm() <= 1.0 + 1e-6);
        assert_eq!(m.generator.params, gen_before);
    }

    #[test]
    fn masking_operators() {
        let mut rng = SeedStreams::new(4).stream("data");
        let x = ImageTensor::from_fn(6, 5, |_, _, _| rng.random_range(0.0..1.0));
        let z = sample_noise(6, 5, 0.1, &mut rng).unwrap();
        assert_eq!(mask_image(&x, &MaskMatrix::ones(6, 5)).unwrap(), x);
        assert!(mask_image(&x, &MaskMatrix::zeros(6, 5)).unwrap().pixels().iter().all(|&v| v == 0.0));
        assert!(mask_noise(&z, &MaskMatrix::ones(6, 5)).unwrap().values().iter().all(|&v| v == 0.0));
        assert_eq!(mask_noise(&z, &MaskMatrix::zeros(6, 5)).unwrap(), z);

        let mut single = MaskMatrix::ones(6, 5);
        single.set(2, 3, false);
        let xm = mask_image(&x, &single).unwrap();
        for r in 0..6 {
            for c in 0..5 {
                for ch in 0..3 {
                    let expect = if (r, c) == (2, 3) { 0.0 } else { x.get(r, c, ch) };
                    assert_eq!(xm.get(r, c, ch), expect);
                }
            }
        }

        // mask_image + mask_noise equals z ⊙ (1 − m) + x ⊙ m element-wise.
        let m = gen_noise_mask(6, 5, 0.5, &mut rng).unwrap();
        let a = mask_image(&x, &m).unwrap();
        let b = mask_noise(&z, &m).unwrap();
        for i in 0..30 {
            let mv = m.bits()[i] as f32;
            for ch in 0..3 {
                let lhs = a.pixels()[i * 3 + ch] + b.values()[i * 3 + ch];
                let rhs = z.values()[i * 3 + ch] * (1.0 - mv) + x.pixels()[i * 3 + ch] * mv;
                assert_eq!(lhs, rhs);
            }
        }
        assert!(mask_image(&x, &MaskMatrix::ones(5, 5)).is_err());
    }

    #[test]
    fn compose_selects_per_pixel() {
        let mut rng = SeedStreams::new(5).stream("data");
        for _ in 0..50 {
            let g = ImageTensor::from_fn(8, 8, |_, _, _| rng.random_range(0.0..1.0));
            let x = ImageTensor::from_fn(8, 8, |_, _, _| rng.random_range(0.0..1.0));
            let m = gen_noise_mask(8, 8, 0.4, &mut rng).unwrap();
            let out = compose_output(&g, &x, &m).unwrap();
            for r in 0..8 {
                for c in 0..8 {
                    for ch in 0..3 {
                        let want = if m.is_valid(r, c) { x.get(r, c, ch) } else { g.get(r, c, ch) };
                        assert_eq!(out.get(r, c, ch).to_bits(), want.to_bits());
                    }
                }
            }
        }
        let g = ImageTensor::filled(4, 4, 0.3);
        let x = ImageTensor::filled(4, 4, 0.7);
        assert_eq!(compose_output(&g, &x, &MaskMatrix::ones(4, 4)).unwrap(), x);
        assert_eq!(compose_output(&g, &x, &MaskMatrix::zeros(4, 4)).unwrap(), g);
    }

    #[test]
    fn noise_sampling() {
        assert!(sample_noise(2, 2, 0.0, &mut SeedStreams::new(0).stream("noise")).is_err());
        assert!(sample_noise(2, 2, -1.0, &mut SeedStreams::new(0).stream("noise")).is_err());
        let a = sample_noise(8, 8, 0.1, &mut SeedStreams::new(1).stream("noise")).unwrap();
        let b = sample_noise(8, 8, 0.1, &mut SeedStreams::new(1).stream("noise")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inpaint_preserves_valid_pixels() {
        let model = WgainModel::<f32>::new(&ModelConfig::tiny(), &mut SeedStreams::new(0).stream("init")).unwrap();
        let mut rng = SeedStreams::new(6).stream("data");
        let x = ImageTensor::from_fn(8, 8, |_, _, _| rng.random_range(0.0..1.0));
        let m = gen_noise_mask(8, 8, 0.5, &mut rng).unwrap();
        let z = sample_noise(8, 8, 0.1, &mut rng).unwrap();
        let out = model.generator.inpaint(&x, &m, &z).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                if m.is_valid(r, c) {
                    for ch in 0..3 {
                        assert_eq!(out.get(r, c, ch), x.get(r, c, ch));
                    }
                }
            }
        }
        let (lo, hi) = out.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn with_params_rejects_foreign_layout() {
        let a = WgainModel::<f32>::new(&ModelConfig::tiny(), &mut SeedStreams::new(0).stream("init")).unwrap();
        let b = WgainModel::<f32>::new(&ModelConfig::desk_scale(32), &mut SeedStreams::new(0).stream("init")).unwrap();
        assert!(Generator::with_params(a.generator.config.clone(), b.generator.params.clone()).is_err());
        assert!(Generator::with_params(a.generator.config.clone(), a.generator.params.clone()).is_ok());
    }
}
