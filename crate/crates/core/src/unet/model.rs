//! Encoder / bottleneck / decoder network with channel-concatenated skips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops4d::{
    leaky_relu, leaky_relu_backward, maxpool4d, maxpool4d_backward, sigmoid, sigmoid_backward,
    upsample4d, upsample4d_backward, ArgmaxMap, BatchNorm4d, BatchNormCache, Conv4d, Mode,
    DEFAULT_LEAKY_SLOPE,
};
use crate::tensor::{Fill, Tensor6D};

#[derive(Clone, Debug, PartialEq)]
pub struct UNet4DConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 4],
    pub pool: [usize; 4],
    pub slope: f32,
}

impl Default for UNet4DConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            base_channels: 8,
            in_channels: 4,
            out_channels: 1,
            kernel: [3, 3, 3, 3],
            pool: [2, 2, 2, 2],
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

impl UNet4DConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::arg("channel counts must be positive"));
        }
        if self.pool.contains(&0) {
            return Err(Error::arg("pool window must be positive"));
        }
        if self.kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::arg(format!("kernel {:?} must be odd", self.kernel)));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::arg(format!("leaky slope {} outside (0, 1)", self.slope)));
        }
        Ok(())
    }

    /// Patch extents `(x, y, z, t)` must divide by `pool^levels` on every axis.
    pub fn check_patch(&self, extent: [usize; 4]) -> Result<()> {
        for (axis, (&e, &p)) in extent.iter().zip(&self.pool).enumerate() {
            let d = p.pow(self.levels as u32);
            if e == 0 || e % d != 0 {
                return Err(Error::shape(format!(
                    "patch extent {e} on axis {axis} is not divisible by {d}"
                )));
            }
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// conv4d -> batchnorm4d -> leaky relu
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv4d,
    pub bn: BatchNorm4d,
}

struct BlockCache {
    input: Tensor6D,
    bn: BatchNormCache,
    pre_act: Tensor6D,
}

impl ConvBlock {
    fn he(c_in: usize, c_out: usize, kernel: [usize; 4], seed: u64) -> Result<Self> {
        let fan_in = c_in * kernel.iter().product::<usize>();
        let std = (2.0 / fan_in as f32).sqrt();
        let [kx, ky, kz, kt] = kernel;
        let weight = Tensor6D::seeded_fill([c_out, c_in, kx, ky, kz, kt], Fill::Normal { mean: 0.0, std }, seed)?;
        Ok(Self {
            conv: Conv4d::new(weight, Tensor6D::zeros([c_out, 1, 1, 1, 1, 1]))?,
            bn: BatchNorm4d::new(c_out),
        })
    }

    fn forward_train(&mut self, x: Tensor6D, slope: f32) -> Result<(Tensor6D, BlockCache)> {
        let z = self.conv.forward(&x)?;
        let (pre_act, bn) = self.bn.forward(&z, Mode::Train)?;
        Ok((
            leaky_relu(&pre_act, slope),
            BlockCache {
                input: x,
                bn,
                pre_act,
            },
        ))
    }

    fn forward_eval(&self, x: &Tensor6D, slope: f32) -> Result<Tensor6D> {
        let z = self.conv.forward(x)?;
        Ok(leaky_relu(&self.bn.forward_eval(&z)?, slope))
    }

    /// Pushes `[w, b, gamma, beta]` gradients and returns the input gradient
    /// when requested.
    fn backward(
        &self,
        grad: &Tensor6D,
        cache: &BlockCache,
        slope: f32,
        need_input: bool,
        out: &mut Vec<Tensor6D>,
    ) -> Result<Option<Tensor6D>> {
        let g = leaky_relu_backward(grad, &cache.pre_act, slope)?;
        let bg = self.bn.backward(&g, &cache.bn)?;
        let gx = if need_input {
            let cg = self.conv.backward(&bg.input, &cache.input)?;
            out.extend([cg.weight, cg.bias]);
            Some(cg.input)
        } else {
            let (w, b) = self.conv.param_grads(&bg.input, &cache.input)?;
            out.extend([w, b]);
            None
        };
        out.extend([bg.gamma, bg.beta]);
        Ok(gx)
    }

    fn params(&self) -> [&Tensor6D; 4] {
        [&self.conv.weight, &self.conv.bias, &self.bn.gamma, &self.bn.beta]
    }

    fn params_mut(&mut self) -> [&mut Tensor6D; 4] {
        [&mut self.conv.weight, &mut self.conv.bias, &mut self.bn.gamma, &mut self.bn.beta]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet4D {
    pub config: UNet4DConfig,
    /// `encoder[i]` runs at resolution level `i`.
    pub encoder: Vec<[ConvBlock; 2]>,
    pub bottleneck: [ConvBlock; 2],
    /// `decoder[i]` runs at resolution level `i`, fed from level `i + 1`.
    pub decoder: Vec<[ConvBlock; 2]>,
    /// 1x1x1x1 convolution followed by a sigmoid.
    pub head: Conv4d,
}

/// Activations cached by a training forward pass.
pub struct GradTape {
    encoder: Vec<[BlockCache; 2]>,
    pools: Vec<ArgmaxMap>,
    bottleneck: [BlockCache; 2],
    decoder: Vec<[BlockCache; 2]>,
    head_input: Tensor6D,
    output: Tensor6D,
}

impl GradTape {
    pub fn output(&self) -> &Tensor6D {
        &self.output
    }
}

pub fn build_unet(config: &UNet4DConfig, seed: u64) -> Result<UNet4D> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.kernel;
    let mut pair = |c_in: usize, c_out: usize| -> Result<[ConvBlock; 2]> {
        Ok([
            ConvBlock::he(c_in, c_out, k, rng.random())?,
            ConvBlock::he(c_out, c_out, k, rng.random())?,
        ])
    };
    let mut encoder = Vec::with_capacity(config.levels);
    let mut c_in = config.in_channels;
    for level in 0..config.levels {
        let c = config.level_channels(level);
        encoder.push(pair(c_in, c)?);
        c_in = c;
    }
    let bottleneck = pair(c_in, config.level_channels(config.levels))?;
    let mut decoder = Vec::with_capacity(config.levels);
    for level in (0..config.levels).rev() {
        let c = config.level_channels(level);
        decoder.push(pair(config.level_channels(level + 1) + c, c)?);
    }
    decoder.reverse();
    let head_std = (2.0 / config.base_channels as f32).sqrt();
    let head_w = Tensor6D::seeded_fill(
        [config.out_channels, config.base_channels, 1, 1, 1, 1],
        Fill::Normal { mean: 0.0, std: head_std },
        rng.random(),
    )?;
    Ok(UNet4D {
        config: config.clone(),
        encoder,
        bottleneck,
        decoder,
        head: Conv4d::new(head_w, Tensor6D::zeros([config.out_channels, 1, 1, 1, 1, 1]))?,
    })
}

impl UNet4D {
    fn check_input(&self, x: &Tensor6D) -> Result<()> {
        let [_, c, lx, ly, lz, lt] = x.shape();
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "input has {c} channels, network expects {}",
                self.config.in_channels
            )));
        }
        self.config.check_patch([lx, ly, lz, lt])
    }

    /// Inference forward pass using running batch-norm statistics.
    pub fn predict(&self, x: &Tensor6D) -> Result<Tensor6D> {
        self.check_input(x)?;
        let slope = self.config.slope;
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut h = x.clone();
        for blocks in &self.encoder {
            h = blocks[1].forward_eval(&blocks[0].forward_eval(&h, slope)?, slope)?;
            let pooled = maxpool4d(&h, self.config.pool)?.0;
            skips.push(h);
            h = pooled;
        }
        h = self.bottleneck[1].forward_eval(&self.bottleneck[0].forward_eval(&h, slope)?, slope)?;
        for (blocks, skip) in self.decoder.iter().zip(skips).rev() {
            let up = upsample4d(&h, self.config.pool)?.concat_channels(&skip)?;
            h = blocks[1].forward_eval(&blocks[0].forward_eval(&up, slope)?, slope)?;
        }
        Ok(sigmoid(&self.head.forward(&h)?))
    }

    /// Training forward pass: batch statistics, running statistics updated,
    /// activations kept for [`UNet4D::backward`].
    pub fn forward_train(&mut self, x: &Tensor6D) -> Result<(Tensor6D, GradTape)> {
        self.check_input(x)?;
        let slope = self.config.slope;
        let pool = self.config.pool;
        let mut enc_caches = Vec::with_capacity(self.config.levels);
        let mut pools = Vec::with_capacity(self.config.levels);
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut h = x.clone();
        for blocks in &mut self.encoder {
            let (a, c0) = blocks[0].forward_train(h, slope)?;
            let (b, c1) = blocks[1].forward_train(a, slope)?;
            let (pooled, argmax) = maxpool4d(&b, pool)?;
            enc_caches.push([c0, c1]);
            pools.push(argmax);
            skips.push(b);
            h = pooled;
        }
        let (a, b0) = self.bottleneck[0].forward_train(h, slope)?;
        let (mut h, b1) = self.bottleneck[1].forward_train(a, slope)?;
        let mut dec_caches = Vec::with_capacity(self.config.levels);
        for (blocks, skip) in self.decoder.iter_mut().zip(skips).rev() {
            let up = upsample4d(&h, pool)?.concat_channels(&skip)?;
            let (a, c0) = blocks[0].forward_train(up, slope)?;
            let (b, c1) = blocks[1].forward_train(a, slope)?;
            dec_caches.push([c0, c1]);
            h = b;
        }
        dec_caches.reverse();
        let output = sigmoid(&self.head.forward(&h)?);
        Ok((
            output.clone(),
            GradTape {
                encoder: enc_caches,
                pools,
                bottleneck: [b0, b1],
                decoder: dec_caches,
                head_input: h,
                output,
            },
        ))
    }

    /// Gradients of a scalar loss with respect to every parameter, in
    /// [`UNet4D::params`] order, given `dL/d(output)`.
    pub fn backward(&self, grad_out: &Tensor6D, tape: &GradTape) -> Result<Vec<Tensor6D>> {
        let slope = self.config.slope;
        let pool = self.config.pool;
        let levels = self.config.levels;
        let g = sigmoid_backward(grad_out, &tape.output)?;
        let head = self.head.backward(&g, &tape.head_input)?;

        let mut dec_grads: Vec<Vec<Tensor6D>> = vec![Vec::new(); levels];
        let mut skip_grads: Vec<Option<Tensor6D>> = (0..levels).map(|_| None).collect();
        let mut g = head.input;
        for level in 0..levels {
            let blocks = &self.decoder[level];
            let caches = &tape.decoder[level];
            let mut tmp = Vec::new();
            let g1 = blocks[1]
                .backward(&g, &caches[1], slope, true, &mut tmp)?
                .expect("input gradient requested");
            let mut tmp0 = Vec::new();
            let g0 = blocks[0]
                .backward(&g1, &caches[0], slope, true, &mut tmp0)?
                .expect("input gradient requested");
            tmp0.extend(tmp);
            dec_grads[level] = tmp0;
            let up_c = self.config.level_channels(level + 1);
            let total = g0.shape()[1];
            skip_grads[level] = Some(g0.channels(up_c, total)?);
            g = upsample4d_backward(&g0.channels(0, up_c)?, pool)?;
        }

        let mut bott = Vec::new();
        let mut tmp = Vec::new();
        let g1 = self.bottleneck[1]
            .backward(&g, &tape.bottleneck[1], slope, true, &mut tmp)?
            .expect("input gradient requested");
        let mut g = self.bottleneck[0]
            .backward(&g1, &tape.bottleneck[0], slope, true, &mut bott)?
            .expect("input gradient requested");
        bott.extend(tmp);

        let mut enc_grads: Vec<Vec<Tensor6D>> = vec![Vec::new(); levels];
        for level in (0..levels).rev() {
            let mut up = maxpool4d_backward(&g, &tape.pools[level])?;
            if let Some(s) = skip_grads[level].take() {
                up = up.add(&s)?;
            }
            let blocks = &self.encoder[level];
            let caches = &tape.encoder[level];
            let mut tmp = Vec::new();
            let g1 = blocks[1]
                .backward(&up, &caches[1], slope, true, &mut tmp)?
                .expect("input gradient requested");
            let mut tmp0 = Vec::new();
            let g0 = blocks[0].backward(&g1, &caches[0], slope, level > 0, &mut tmp0)?;
            tmp0.extend(tmp);
            enc_grads[level] = tmp0;
            if let Some(g0) = g0 {
                g = g0;
            }
        }

        let mut grads = Vec::with_capacity(self.param_count());
        for e in enc_grads {
            grads.extend(e);
        }
        grads.extend(bott);
        for d in dec_grads {
            grads.extend(d);
        }
        grads.extend([head.weight, head.bias]);
        Ok(grads)
    }

    fn blocks(&self) -> impl Iterator<Item = &ConvBlock> {
        self.encoder
            .iter()
            .flatten()
            .chain(self.bottleneck.iter())
            .chain(self.decoder.iter().flatten())
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBlock> {
        self.encoder
            .iter_mut()
            .flatten()
            .chain(self.bottleneck.iter_mut())
            .chain(self.decoder.iter_mut().flatten())
    }

    /// Trainable tensors: per block `[w, b, gamma, beta]` in encoder,
    /// bottleneck, decoder order (shallow to deep within each), then the head.
    pub fn params(&self) -> Vec<&Tensor6D> {
        let mut out: Vec<&Tensor6D> = self.blocks().flat_map(|b| b.params()).collect();
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor6D> {
        let mut out: Vec<&mut Tensor6D> = Vec::new();
        let blocks = self
            .encoder
            .iter_mut()
            .flatten()
            .chain(self.bottleneck.iter_mut())
            .chain(self.decoder.iter_mut().flatten());
        for b in blocks {
            out.extend(b.params_mut());
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        4 * (4 * self.config.levels + 2) + 2
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm4d> {
        self.blocks().map(|b| &b.bn).collect()
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm4d> {
        self.blocks_mut().map(|b| &mut b.bn).collect()
    }

    /// `(name, kind)` for every trainable tensor, aligned with [`UNet4D::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut block = |prefix: String| {
            for p in ["conv.weight", "conv.bias", "bn.gamma", "bn.beta"] {
                names.push(format!("{prefix}.{p}"));
            }
        };
        for level in 0..self.config.levels {
            for i in 0..2 {
                block(format!("encoder{level}.{i}"));
            }
        }
        for i in 0..2 {
            block(format!("bottleneck.{i}"));
        }
        for level in 0..self.config.levels {
            for i in 0..2 {
                block(format!("decoder{level}.{i}"));
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    /// Block names aligned with [`UNet4D::batch_norms`].
    pub fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for level in 0..self.config.levels {
            names.extend((0..2).map(|i| format!("encoder{level}.{i}")));
        }
        names.extend((0..2).map(|i| format!("bottleneck.{i}")));
        for level in 0..self.config.levels {
            names.extend((0..2).map(|i| format!("decoder{level}.{i}")));
        }
        names
    }
}
