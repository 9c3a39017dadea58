use flowlab_tensor::{Bound, Gradients, ParamSet, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::arch::{FlowArch, Net};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::seed;

/// Examples pushed through the network at once during inference.
const CHUNK: usize = 32;

/// Global code `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalCode(pub Vec<f32>);

impl GlobalCode {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Local code `nu`, laid out like an image (row-major `H x W x 3`).
#[derive(Clone, Debug, PartialEq)]
pub struct LocalCode {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl LocalCode {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::invalid(format!(
                "local code of {} values does not match {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, CHANNELS]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Diagonal Gaussian posterior over `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodeMode {
    Mean,
    Sample,
}

/// Global encoder plus z-conditioned invertible flow. `f32` is the working
/// precision; `f64` instances exist for gradient checking.
pub struct FlowModel<F: Scalar = f32> {
    arch: FlowArch,
    params: ParamSet<F>,
    net: Net<F>,
    pub(crate) train_echo: Option<serde_json::Value>,
}

/// Per-example loss pieces, all in nats.
struct Objective<'t, F: Scalar> {
    /// Per-example bits/dim with the KL term weighted by `kl_weight`.
    weighted_bpd: Var<'t, F>,
    /// Per-example bits/dim of the full bound.
    bpd: Vec<f64>,
}

impl<F: Scalar> FlowModel<F> {
    /// Fresh model; all output layers start at zero so the flow is the identity.
    pub fn new(arch: FlowArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::new();
        let mut rng = seed::stream(seed, "flow-init", 0);
        let net = Net::build(&arch, &mut params, &mut rng);
        Ok(Self {
            arch,
            params,
            net,
            train_echo: None,
        })
    }

    pub fn arch(&self) -> &FlowArch {
        &self.arch
    }

    pub fn d_z(&self) -> usize {
        self.arch.d_z
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn num_blocks(&self) -> usize {
        self.net.blocks.len()
    }

    /// Same model in another precision.
    pub fn cast<G: Scalar>(&self) -> FlowModel<G> {
        let mut out = FlowModel::<G>::new(self.arch.clone(), 0).expect("architecture already validated");
        out.params = self.params.cast();
        out.train_echo = self.train_echo.clone();
        out
    }

    fn check_images(&self, images: &[&Image]) -> Result<()> {
        for img in images {
            if img.height() != self.arch.height || img.width() != self.arch.width {
                return Err(Error::invalid(format!(
                    "image is {}x{}, flow expects {}x{}",
                    img.height(),
                    img.width(),
                    self.arch.height,
                    self.arch.width
                )));
            }
        }
        Ok(())
    }

    /// Preprocesses a batch to NCHW, with each example's summed log-Jacobian.
    /// `noise = None` uses the deterministic bin-centre map.
    fn preprocess<R: Rng>(&self, images: &[&Image], mut noise: Option<&mut [R]>) -> (Tensor<F>, Vec<f64>) {
        let pp = self.arch.preprocess;
        let (h, w) = (self.arch.height, self.arch.width);
        let mut data = Vec::with_capacity(images.len() * h * w * CHANNELS);
        let mut logdets = Vec::with_capacity(images.len());
        for (n, img) in images.iter().enumerate() {
            let mut ld = 0.0;
            for c in 0..CHANNELS {
                for p in 0..h * w {
                    let v = f64::from(img.pixels()[p * CHANNELS + c]);
                    let u = match noise.as_deref_mut() {
                        Some(rngs) => pp.dequantize(v, rngs[n].random::<f64>(), true),
                        None => pp.dequantize(v, 0.5, false),
                    };
                    let (y, l) = pp.squeeze(u);
                    ld += l;
                    data.push(F::lit(y));
                }
            }
            logdets.push(ld);
        }
        (Tensor::new(&[images.len(), CHANNELS, h, w], data), logdets)
    }

    fn postprocess(&self, y: &Tensor<F>) -> Vec<Image> {
        let pp = self.arch.preprocess;
        let (h, w) = (self.arch.height, self.arch.width);
        y.data()
            .chunks(CHANNELS * h * w)
            .map(|ex| {
                let mut pixels = vec![0.0f32; h * w * CHANNELS];
                for c in 0..CHANNELS {
                    for p in 0..h * w {
                        pixels[p * CHANNELS + c] = pp.inverse(ex[c * h * w + p].as_f64()) as f32;
                    }
                }
                Image::new(h, w, pixels).expect("inverse preprocessing stays in [0, 1]")
            })
            .collect()
    }

    /// Deterministic preprocessing used by encode, as an NCHW tensor.
    pub fn preprocess_batch(&self, images: &[&Image]) -> Result<Tensor<F>> {
        self.check_images(images)?;
        Ok(self.preprocess::<seed::StreamRng>(images, None).0)
    }

    /// Inverse preprocessing (clamped to `[0, 1]`) of an NCHW tensor.
    pub fn unpreprocess_batch(&self, y: &Tensor<F>) -> Vec<Image> {
        self.postprocess(y)
    }

    /// Posterior parameters for each image.
    pub fn posterior(&self, images: &[&Image]) -> Result<Vec<EncoderOutput>> {
        self.check_images(images)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let (y, _) = self.preprocess::<seed::StreamRng>(chunk, None);
            let tape = Tape::new();
            let p = self.params.bind_frozen(&tape);
            let (mu, ls) = self.net.encode(&p, tape.input(y), self.arch.d_z);
            let (mu, ls) = (mu.to_tensor(), ls.to_tensor());
            if !mu.all_finite() || !ls.all_finite() {
                return Err(Error::NumericFailure { stage: "encoder", block: 0 });
            }
            let d = self.arch.d_z;
            for i in 0..chunk.len() {
                out.push(EncoderOutput {
                    mu: mu.data()[i * d..(i + 1) * d].iter().map(|v| v.as_f64() as f32).collect(),
                    sigma: ls.data()[i * d..(i + 1) * d].iter().map(|v| v.as_f64().exp() as f32).collect(),
                });
            }
        }
        Ok(out)
    }

    /// Conditional flow forward on preprocessed input `[N, 3, H, W]` with codes `[N, d_z]`.
    /// Returns the local codes and per-example log-determinants.
    pub fn flow_forward(&self, y: &Tensor<F>, z: &Tensor<F>) -> Result<(Tensor<F>, Vec<f64>)> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let (nu, ld) = self.net.forward(&p, tape.input(y.clone()), tape.input(z.clone()), &self.arch, "encode")?;
        let ld = ld.value().data().iter().map(|v| v.as_f64()).collect();
        Ok((nu.to_tensor(), ld))
    }

    /// Exact inverse of [`FlowModel::flow_forward`].
    pub fn flow_inverse(&self, nu: &Tensor<F>, z: &Tensor<F>) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let y = self.net.inverse(&p, tape.input(nu.clone()), tape.input(z.clone()), &self.arch)?;
        Ok(y.to_tensor())
    }

    /// Block `i` alone: output and per-example log-determinant.
    pub fn block_forward(&self, i: usize, x: &Tensor<F>, z: &Tensor<F>) -> (Tensor<F>, Vec<f64>) {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let (out, ld) = self.net.block_forward(i, &p, tape.input(x.clone()), tape.input(z.clone()), &self.arch);
        let ld = ld.value().data().iter().map(|v| v.as_f64()).collect();
        (out.to_tensor(), ld)
    }

    /// Block `i` forward on `x`, then its inverse on the result: the two
    /// per-example log-determinants and the reconstruction of `x`.
    pub fn block_round_trip(&self, i: usize, x: &Tensor<F>, z: &Tensor<F>) -> (Vec<f64>, Vec<f64>, Tensor<F>) {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let zv = tape.input(z.clone());
        let (out, fwd) = self.net.block_forward(i, &p, tape.input(x.clone()), zv, &self.arch);
        let (back, inv) = self.net.block_inverse(i, &p, tape.input(out.to_tensor()), zv, &self.arch);
        let col = |v: Var<'_, F>| v.value().data().iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        (col(fwd), col(inv), back.to_tensor())
    }

    fn z_tensor(&self, codes: &[&GlobalCode]) -> Result<Tensor<F>> {
        let d = self.arch.d_z;
        let mut data = Vec::with_capacity(codes.len() * d);
        for z in codes {
            if z.len() != d {
                return Err(Error::invalid(format!("global code has {} entries, expected {d}", z.len())));
            }
            data.extend(z.0.iter().map(|&v| F::lit(f64::from(v))));
        }
        Ok(Tensor::new(&[codes.len(), d], data))
    }

    fn nu_tensor(&self, codes: &[&LocalCode]) -> Result<Tensor<F>> {
        let (h, w) = (self.arch.height, self.arch.width);
        let mut data = Vec::with_capacity(codes.len() * h * w * CHANNELS);
        for nu in codes {
            if nu.shape() != [h, w, CHANNELS] {
                return Err(Error::invalid(format!("local code shape {:?} does not match the flow", nu.shape())));
            }
            for c in 0..CHANNELS {
                for p in 0..h * w {
                    data.push(F::lit(f64::from(nu.data[p * CHANNELS + c])));
                }
            }
        }
        Ok(Tensor::new(&[codes.len(), CHANNELS, h, w], data))
    }

    fn local_codes(&self, nu: &Tensor<F>) -> Vec<LocalCode> {
        let (h, w) = (self.arch.height, self.arch.width);
        nu.data()
            .chunks(CHANNELS * h * w)
            .map(|ex| {
                let mut data = vec![0.0f32; h * w * CHANNELS];
                for c in 0..CHANNELS {
                    for p in 0..h * w {
                        data[p * CHANNELS + c] = ex[c * h * w + p].as_f64() as f32;
                    }
                }
                LocalCode { height: h, width: w, data }
            })
            .collect()
    }

    /// `(z, nu)` for each image. Sample mode draws `eta` from `rng` in image order.
    pub fn encode_batch<R: Rng + ?Sized>(
        &self,
        images: &[&Image],
        mode: EncodeMode,
        rng: &mut R,
    ) -> Result<Vec<(GlobalCode, LocalCode)>> {
        let post = self.posterior(images)?;
        let d = self.arch.d_z;
        let mut out = Vec::with_capacity(images.len());
        for (chunk, post) in images.chunks(CHUNK).zip(post.chunks(CHUNK)) {
            let zs: Vec<GlobalCode> = post
                .iter()
                .map(|e| match mode {
                    EncodeMode::Mean => GlobalCode(e.mu.clone()),
                    EncodeMode::Sample => GlobalCode(
                        (0..d)
                            .map(|k| {
                                let eta: f64 = rng.sample(StandardNormal);
                                (f64::from(e.mu[k]) + f64::from(e.sigma[k]) * eta) as f32
                            })
                            .collect(),
                    ),
                })
                .collect();
            let y = self.preprocess::<seed::StreamRng>(chunk, None).0;
            let z = self.z_tensor(&zs.iter().collect::<Vec<_>>())?;
            let (nu, _) = self.flow_forward(&y, &z)?;
            out.extend(zs.into_iter().zip(self.local_codes(&nu)));
        }
        Ok(out)
    }

    pub fn encode<R: Rng + ?Sized>(&self, x: &Image, mode: EncodeMode, rng: &mut R) -> Result<(GlobalCode, LocalCode)> {
        Ok(self.encode_batch(&[x], mode, rng)?.remove(0))
    }

    /// Posterior-mean encoding; needs no randomness.
    pub fn encode_mean(&self, images: &[&Image]) -> Result<Vec<(GlobalCode, LocalCode)>> {
        self.encode_batch(images, EncodeMode::Mean, &mut seed::stream(0, "unused", 0))
    }

    pub fn decode_batch(&self, codes: &[(&GlobalCode, &LocalCode)]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(codes.len());
        for chunk in codes.chunks(CHUNK) {
            let z = self.z_tensor(&chunk.iter().map(|c| c.0).collect::<Vec<_>>())?;
            let nu = self.nu_tensor(&chunk.iter().map(|c| c.1).collect::<Vec<_>>())?;
            let y = self.flow_inverse(&nu, &z)?;
            out.extend(self.postprocess(&y));
        }
        Ok(out)
    }

    pub fn decode(&self, z: &GlobalCode, nu: &LocalCode) -> Result<Image> {
        Ok(self.decode_batch(&[(z, nu)])?.remove(0))
    }

    /// Builds the variational objective for a batch on `tape`.
    fn objective<'t>(
        &self,
        p: &Bound<'t, F>,
        tape: &'t Tape<F>,
        images: &[&Image],
        rngs: &mut [seed::StreamRng],
        kl_weight: f64,
        stage: &'static str,
    ) -> Result<Objective<'t, F>> {
        let n = images.len();
        let d = self.arch.d_z;
        let dims = self.arch.dims() as f64;
        let (y, pre_ld) = self.preprocess(images, Some(rngs));
        let eta: Vec<F> = rngs
            .iter_mut()
            .flat_map(|r| (0..d).map(|_| F::lit(r.sample::<f64, _>(StandardNormal))).collect::<Vec<_>>())
            .collect();
        let yv = tape.input(y);
        let (mu, log_sigma) = self.net.encode(p, yv, d);
        let z = log_sigma.exp().mul(tape.constant(Tensor::new(&[n, d], eta))).add(mu);
        let (nu, ld) = self.net.forward(p, yv, z, &self.arch, stage)?;

        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let neg_log_prior = nu.square().sum_per_sample().scale(0.5).add_scalar(dims * half_log_2pi);
        let ls2 = log_sigma.scale(2.0);
        let kl = mu.square().add(ls2.exp()).sub(ls2).add_scalar(-1.0).sum_per_sample().scale(0.5);
        let pre = tape.constant(Tensor::new(&[n], pre_ld.iter().map(|&v| F::lit(-v)).collect()));
        let recon = neg_log_prior.sub(ld).add(pre);

        let to_bpd = |nats: Var<'t, F>| nats.add_scalar(dims * 256f64.ln()).scale(1.0 / (dims * std::f64::consts::LN_2));
        let weighted_bpd = to_bpd(recon.add(kl.scale(kl_weight)));
        let bpd = {
            let r = recon.value();
            let k = kl.value();
            r.data()
                .iter()
                .zip(k.data())
                .map(|(r, k)| bpd_from_nats(r.as_f64() + k.as_f64(), self.arch.dims()))
                .collect()
        };
        Ok(Objective { weighted_bpd, bpd })
    }

    /// Mean weighted bits/dim of a batch and its gradient with respect to every
    /// parameter. `rngs` supplies one noise stream per example.
    pub fn loss_and_grads(
        &self,
        images: &[&Image],
        rngs: &mut [seed::StreamRng],
        kl_weight: f64,
    ) -> Result<(f64, Vec<f64>, Vec<Tensor<F>>)> {
        self.check_images(images)?;
        if images.is_empty() || rngs.len() != images.len() {
            return Err(Error::invalid("need one noise stream per example"));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let obj = self.objective(&p, &tape, images, rngs, kl_weight, "train")?;
        let loss = obj.weighted_bpd.mean();
        let value = loss.value().item().as_f64();
        let g: Gradients<F> = tape.backward(loss);
        Ok((value, obj.bpd, p.grads(&g)))
    }

    /// Stochastic variational bound in bits/dim for one image.
    pub fn nll_bpd<R: Rng + ?Sized>(&self, x: &Image, rng: &mut R) -> Result<f64> {
        self.check_images(&[x])?;
        let mut rngs = [<seed::StreamRng as rand::SeedableRng>::seed_from_u64(rng.random())];
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let obj = self.objective(&p, &tape, &[x], &mut rngs, 1.0, "nll")?;
        finite_bpd(obj.bpd[0])
    }

    /// Per-example bound for a batch. Each example's noise is keyed by its
    /// pixel content, so values do not depend on batch order or composition.
    pub fn nll_bpd_batch(&self, images: &[&Image], seed: u64) -> Result<Vec<f64>> {
        self.check_images(images)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let mut rngs: Vec<_> = chunk.iter().map(|img| content_stream(seed, img)).collect();
            let tape = Tape::new();
            let p = self.params.bind_frozen(&tape);
            let obj = self.objective(&p, &tape, chunk, &mut rngs, 1.0, "nll")?;
            for b in obj.bpd {
                out.push(finite_bpd(b)?);
            }
        }
        Ok(out)
    }
}

fn finite_bpd(b: f64) -> Result<f64> {
    if b.is_finite() {
        Ok(b)
    } else {
        Err(Error::NumericFailure { stage: "nll", block: 0 })
    }
}

/// Noise stream keyed by an image's bytes.
fn content_stream(seed: u64, img: &Image) -> seed::StreamRng {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(img.to_bytes());
    let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    seed::stream(seed, "nll", key)
}

/// Negative log-density of `[0, 1]^D` data (nats) to bits/dim of the 8-bit
/// data it dequantises: `(nll + D ln 256) / (D ln 2)`.
pub fn bpd_from_nats(nll_nats: f64, dims: usize) -> f64 {
    let d = dims as f64;
    (nll_nats + d * 256f64.ln()) / (d * std::f64::consts::LN_2)
}
