//! Network layout of the decoupled flow: a strided convolutional encoder for
//! the global posterior and a stack of z-conditioned invertible blocks.
//!
//! Each block is a conditional per-channel affine map (scale and shift
//! predicted from z) followed by a masked affine coupling whose scale/shift
//! network sees the unchanged half of the input and a z-dependent bias.
//! All output layers start at zero, so a freshly built flow is the identity.

use flowlab_tensor::{Bound, Conv2d, Linear, ParamSet, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::preprocess::Preprocess;
use crate::error::{Error, Result};
use crate::image::CHANNELS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowArch {
    pub height: usize,
    pub width: usize,
    pub d_z: usize,
    pub num_blocks: usize,
    pub hidden: usize,
    pub encoder_channels: [usize; 3],
    /// Bound on each coupling log-scale, applied through `tanh`.
    pub coupling_scale: f64,
    /// Bound on each conditional per-channel log-scale.
    pub actnorm_scale: f64,
    pub preprocess: Preprocess,
}

impl FlowArch {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            d_z: 64,
            num_blocks: 8,
            hidden: 32,
            encoder_channels: [16, 32, 32],
            coupling_scale: 1.0,
            actnorm_scale: 2.0,
            preprocess: Preprocess::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::invalid("flow needs images of at least 2x2"));
        }
        if self.d_z == 0 || self.hidden == 0 || self.encoder_channels.contains(&0) {
            return Err(Error::invalid("flow widths must be positive"));
        }
        if self.num_blocks == 0 {
            return Err(Error::invalid("flow needs at least one block"));
        }
        if !(self.coupling_scale > 0.0 && self.actnorm_scale > 0.0) {
            return Err(Error::invalid("scale bounds must be positive"));
        }
        let e = self.preprocess.logit_eps;
        if !(e > 0.0 && e < 0.5) || self.preprocess.levels < 2 {
            return Err(Error::invalid("bad preprocessing constants"));
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    fn encoder_spatial(&self) -> (usize, usize) {
        let down = |v: usize| (0..3).fold(v, |v, _| v.div_ceil(2));
        (down(self.height), down(self.width))
    }
}

/// Which entries of a block's input pass through unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Checkerboard { parity: usize },
    Channel { keep: usize },
}

impl MaskKind {
    /// Alternates checkerboard and channel masks; channel masks rotate the kept channel.
    pub fn for_block(i: usize) -> Self {
        match i % 4 {
            0 => MaskKind::Checkerboard { parity: 0 },
            1 => MaskKind::Checkerboard { parity: 1 },
            2 => MaskKind::Channel { keep: (i / 4) % CHANNELS },
            _ => MaskKind::Channel {
                keep: CHANNELS + (i / 4) % CHANNELS,
            },
        }
    }

    /// `[3, H, W]` tensor, 1 where the input passes through.
    /// `Channel { keep: k }` with `k >= 3` keeps every channel except `k - 3`.
    pub fn tensor<F: Scalar>(self, h: usize, w: usize) -> Tensor<F> {
        let mut data = Vec::with_capacity(CHANNELS * h * w);
        for c in 0..CHANNELS {
            for i in 0..h {
                for j in 0..w {
                    let on = match self {
                        MaskKind::Checkerboard { parity } => (i + j) % 2 == parity,
                        MaskKind::Channel { keep } if keep < CHANNELS => c == keep,
                        MaskKind::Channel { keep } => c != keep - CHANNELS,
                    };
                    data.push(if on { F::one() } else { F::zero() });
                }
            }
        }
        Tensor::new(&[CHANNELS, h, w], data)
    }
}

pub(crate) struct Block<F> {
    mask: Tensor<F>,
    inv_mask: Tensor<F>,
    actnorm: Linear,
    conv_in: Conv2d,
    cond: Linear,
    conv_mid: Conv2d,
    conv_out: Conv2d,
}

pub(crate) struct Net<F> {
    enc: [Conv2d; 3],
    enc_out: Linear,
    pub blocks: Vec<Block<F>>,
}

impl<F: Scalar> Net<F> {
    pub fn build<R: Rng + ?Sized>(arch: &FlowArch, ps: &mut ParamSet<F>, rng: &mut R) -> Self {
        let [e1, e2, e3] = arch.encoder_channels;
        let enc = [
            Conv2d::new(ps, "enc.0", CHANNELS, e1, 3, 2, 1, false, rng),
            Conv2d::new(ps, "enc.1", e1, e2, 3, 2, 1, false, rng),
            Conv2d::new(ps, "enc.2", e2, e3, 3, 2, 1, false, rng),
        ];
        let (eh, ew) = arch.encoder_spatial();
        let enc_out = Linear::new(ps, "enc.out", e3 * eh * ew, 2 * arch.d_z, true, rng);
        let hd = arch.hidden;
        let blocks = (0..arch.num_blocks)
            .map(|i| {
                let mask_kind = MaskKind::for_block(i);
                let mask: Tensor<F> = mask_kind.tensor(arch.height, arch.width);
                let inv_mask = mask.map(|v| F::one() - v);
                let p = format!("block.{i}");
                Block {
                    mask,
                    inv_mask,
                    actnorm: Linear::new(ps, &format!("{p}.actnorm"), arch.d_z, 2 * CHANNELS, true, rng),
                    conv_in: Conv2d::new(ps, &format!("{p}.conv_in"), CHANNELS, hd, 3, 1, 1, false, rng),
                    cond: Linear::new(ps, &format!("{p}.cond"), arch.d_z, hd, false, rng),
                    conv_mid: Conv2d::new(ps, &format!("{p}.conv_mid"), hd, hd, 1, 1, 0, false, rng),
                    conv_out: Conv2d::new(ps, &format!("{p}.conv_out"), hd, 2 * CHANNELS, 3, 1, 1, true, rng),
                }
            })
            .collect();
        Self { enc, enc_out, blocks }
    }

    /// Posterior mean and log standard deviation, each `[N, d_z]`.
    pub fn encode<'t>(&self, p: &Bound<'t, F>, y: Var<'t, F>, d_z: usize) -> (Var<'t, F>, Var<'t, F>) {
        let mut h = y.scale(1.0 / 3.0);
        for conv in &self.enc {
            h = conv.forward(p, h).relu();
        }
        let out = self.enc_out.forward(p, h.flatten());
        (out.narrow(0, d_z), out.narrow(d_z, d_z))
    }

    fn actnorm<'t>(&self, b: &Block<F>, p: &Bound<'t, F>, z: Var<'t, F>, arch: &FlowArch) -> (Var<'t, F>, Var<'t, F>) {
        let an = b.actnorm.forward(p, z);
        let log_scale = an.narrow(0, CHANNELS).tanh().scale(arch.actnorm_scale);
        let shift = an.narrow(CHANNELS, CHANNELS);
        (log_scale, shift)
    }

    fn coupling<'t>(&self, b: &Block<F>, p: &Bound<'t, F>, h: Var<'t, F>, z: Var<'t, F>, arch: &FlowArch) -> (Var<'t, F>, Var<'t, F>) {
        let inp = h.mul_const(&b.mask);
        let a = b.conv_in.forward(p, inp).add_bias(b.cond.forward(p, z)).relu();
        let a = b.conv_mid.forward(p, a).relu();
        let out = b.conv_out.forward(p, a);
        let s = out
            .narrow(0, CHANNELS)
            .tanh()
            .scale(arch.coupling_scale)
            .mul_const(&b.inv_mask);
        let t = out.narrow(CHANNELS, CHANNELS).mul_const(&b.inv_mask);
        (s, t)
    }

    /// One block forward; returns the output and its per-example log-determinant `[N]`.
    pub fn block_forward<'t>(&self, i: usize, p: &Bound<'t, F>, h: Var<'t, F>, z: Var<'t, F>, arch: &FlowArch) -> (Var<'t, F>, Var<'t, F>) {
        let b = &self.blocks[i];
        let hw = (arch.height * arch.width) as f64;
        let (ls, sh) = self.actnorm(b, p, z, arch);
        let h = h.scale_channels(ls.exp()).add_bias(sh);
        let (s, t) = self.coupling(b, p, h, z, arch);
        let h = h.mul(s.exp()).add(t);
        let logdet = ls.sum_per_sample().scale(hw).add(s.sum_per_sample());
        (h, logdet)
    }

    /// Exact inverse of [`Net::block_forward`], with the inverse's log-determinant.
    pub fn block_inverse<'t>(&self, i: usize, p: &Bound<'t, F>, h: Var<'t, F>, z: Var<'t, F>, arch: &FlowArch) -> (Var<'t, F>, Var<'t, F>) {
        let b = &self.blocks[i];
        let hw = (arch.height * arch.width) as f64;
        let (s, t) = self.coupling(b, p, h, z, arch);
        let h = h.sub(t).mul(s.scale(-1.0).exp());
        let (ls, sh) = self.actnorm(b, p, z, arch);
        let h = h.add_bias(sh.scale(-1.0)).scale_channels(ls.scale(-1.0).exp());
        let logdet = ls.sum_per_sample().scale(-hw).sub(s.sum_per_sample());
        (h, logdet)
    }

    /// Preprocessed image `[N, 3, H, W]` to local code, with per-example log-determinant `[N]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t, F>,
        y: Var<'t, F>,
        z: Var<'t, F>,
        arch: &FlowArch,
        stage: &'static str,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let mut h = y;
        let mut logdet: Option<Var<'t, F>> = None;
        for i in 0..self.blocks.len() {
            let (out, ld) = self.block_forward(i, p, h, z, arch);
            if !out.value().all_finite() || !ld.value().all_finite() {
                return Err(Error::NumericFailure { stage, block: i });
            }
            h = out;
            logdet = Some(match logdet {
                Some(a) => a.add(ld),
                None => ld,
            });
        }
        Ok((h, logdet.expect("at least one block")))
    }

    /// Local code back to preprocessed image space.
    pub fn inverse<'t>(&self, p: &Bound<'t, F>, nu: Var<'t, F>, z: Var<'t, F>, arch: &FlowArch) -> Result<Var<'t, F>> {
        let mut h = nu;
        for i in (0..self.blocks.len()).rev() {
            h = self.block_inverse(i, p, h, z, arch).0;
            if !h.value().all_finite() {
                return Err(Error::NumericFailure { stage: "decode", block: i });
            }
        }
        Ok(h)
    }
}
