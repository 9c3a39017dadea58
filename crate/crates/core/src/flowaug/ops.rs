use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::spec::{flip_weight, AugMethod, AugmentationSpec, MixSpec, PerturbSpec, Target};
use crate::error::{Error, Result};
use crate::flowcore::{FlowModel, GlobalCode, LocalCode};
use crate::image::Image;
use crate::seed::{self, StreamRng};
use crate::synthdata::LabeledExample;

type Codes = (GlobalCode, LocalCode);

/// Images decoded per call; bounds peak memory of the inverse pass.
const DECODE_CHUNK: usize = 64;

fn add_noise(code: &mut [f32], spec: &PerturbSpec, rng: &mut (impl Rng + ?Sized)) -> Result<()> {
    let eps = spec.distribution.sample(code.len(), rng)?;
    let clamp = spec.clamp_bound();
    for (v, e) in code.iter_mut().zip(eps) {
        let mut x = f64::from(*v) + e;
        if let Some(b) = clamp {
            x = x.clamp(-b, b);
        }
        *v = x as f32;
    }
    Ok(())
}

fn perturb(codes: &Codes, spec: &PerturbSpec, rng: &mut (impl Rng + ?Sized)) -> Result<Codes> {
    let (mut z, mut nu) = codes.clone();
    match spec.target {
        Target::GlobalZ => add_noise(&mut z.0, spec, rng)?,
        Target::LocalNu => add_noise(nu.data_mut(), spec, rng)?,
    }
    Ok((z, nu))
}

fn lerp(a: &[f32], b: &[f32], m: f64) -> Vec<f32> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (m * f64::from(x) + (1.0 - m) * f64::from(y)) as f32)
        .collect()
}

/// Interpolates the target code of `first` toward `second` with weight `m`
/// on `first`; the other code comes from `first`.
fn mix_codes(first: &Codes, second: &Codes, m: f64, target: Target) -> Result<Codes> {
    match target {
        Target::GlobalZ => Ok((GlobalCode(lerp(&first.0 .0, &second.0 .0, m)), first.1.clone())),
        Target::LocalNu => {
            let s = first.1.shape();
            let nu = LocalCode::new(s[0], s[1], lerp(first.1.data(), second.1.data(), m))?;
            Ok((first.0.clone(), nu))
        }
    }
}

/// Draws the interpolation weight and applies the flip rule.
pub fn draw_mix_weight<R: Rng + ?Sized>(spec: &MixSpec, rng: &mut R) -> Result<f64> {
    spec.validate()?;
    let beta = Beta::new(spec.alpha, spec.alpha).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(flip_weight(beta.sample(rng), spec.tr))
}

fn decode_all(model: &FlowModel, codes: &[Codes]) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(codes.len());
    for chunk in codes.chunks(DECODE_CHUNK) {
        let refs: Vec<(&GlobalCode, &LocalCode)> = chunk.iter().map(|(z, nu)| (z, nu)).collect();
        out.extend(model.decode_batch(&refs)?);
    }
    Ok(out)
}

fn output_rng(job_seed: u64) -> StreamRng {
    seed::stream(job_seed, "flowaug", 0)
}

/// Posterior-mean codes of a fixed image set, reused across many transforms.
pub struct Augmenter<'m> {
    model: &'m FlowModel,
    codes: Vec<Codes>,
}

impl<'m> Augmenter<'m> {
    pub fn new(model: &'m FlowModel, images: &[&Image]) -> Result<Self> {
        let mut codes = Vec::with_capacity(images.len());
        for chunk in images.chunks(DECODE_CHUNK) {
            codes.extend(model.encode_mean(chunk)?);
        }
        Ok(Self { model, codes })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[Codes] {
        &self.codes
    }

    fn code(&self, i: usize) -> Result<&Codes> {
        self.codes
            .get(i)
            .ok_or_else(|| Error::invalid(format!("source index {i} out of range")))
    }

    /// Gaussian-family transform of source `i` for each `(i, seed)` job.
    pub fn gaussian(&self, jobs: &[(usize, u64)], spec: &PerturbSpec) -> Result<Vec<Image>> {
        spec.validate()?;
        let codes = jobs
            .iter()
            .map(|&(i, s)| perturb(self.code(i)?, spec, &mut output_rng(s)))
            .collect::<Result<Vec<_>>>()?;
        decode_all(self.model, &codes)
    }

    /// Mix transform of each `(first, second, seed)` job; `first` donates the retained code.
    pub fn mix(&self, jobs: &[(usize, usize, u64)], spec: &MixSpec) -> Result<Vec<Image>> {
        spec.validate()?;
        let codes = jobs
            .iter()
            .map(|&(i, j, s)| {
                let m = draw_mix_weight(spec, &mut output_rng(s))?;
                mix_codes(self.code(i)?, self.code(j)?, m, spec.target)
            })
            .collect::<Result<Vec<_>>>()?;
        decode_all(self.model, &codes)
    }

    /// Reconstructions `decode(encode(x))` of every source.
    pub fn reconstructions(&self) -> Result<Vec<Image>> {
        decode_all(self.model, &self.codes)
    }
}

/// Perturbs the posterior-mean code of `x` and decodes.
pub fn augment_gaussian<R: Rng + ?Sized>(model: &FlowModel, x: &Image, spec: &PerturbSpec, rng: &mut R) -> Result<Image> {
    spec.validate()?;
    let codes = model.encode_mean(&[x])?.remove(0);
    let (z, nu) = perturb(&codes, spec, rng)?;
    model.decode(&z, &nu)
}

/// Interpolates the codes of `x1` and `x2` with a flipped Beta weight; `nu`
/// (or `z`, for the local-code ablation) of `x1` is retained.
pub fn augment_mix<R: Rng + ?Sized>(model: &FlowModel, x1: &Image, x2: &Image, spec: &MixSpec, rng: &mut R) -> Result<Image> {
    let m = draw_mix_weight(spec, rng)?;
    augment_mix_with_weight(model, x1, x2, m, spec.target)
}

/// [`augment_mix`] with the (already flipped) weight supplied.
pub fn augment_mix_with_weight(model: &FlowModel, x1: &Image, x2: &Image, m: f64, target: Target) -> Result<Image> {
    if !x1.same_shape(x2) {
        return Err(Error::invalid("mixed images must share a shape"));
    }
    let codes = model.encode_mean(&[x1, x2])?;
    let (z, nu) = mix_codes(&codes[0], &codes[1], m, target)?;
    model.decode(&z, &nu)
}

/// `decode(z2, nu1)`: the global code of `x2` with the local code of `x1`.
pub fn switch(model: &FlowModel, x1: &Image, x2: &Image) -> Result<Image> {
    if !x1.same_shape(x2) {
        return Err(Error::invalid("switched images must share a shape"));
    }
    let codes = model.encode_mean(&[x1, x2])?;
    model.decode(&codes[1].0, &codes[0].1)
}

/// `spec.count` labeled outputs. Output `l` picks its sources and noise from a
/// stream keyed by `(spec.seed, l)`, so the batch does not depend on evaluation order.
pub fn augment_batch(model: &FlowModel, data: &[LabeledExample], spec: &AugmentationSpec) -> Result<Vec<(Image, usize)>> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot augment an empty dataset"));
    }
    let n = data.len();
    let plans: Vec<(usize, usize, u64)> = (0..spec.count)
        .map(|l| {
            let mut rng = seed::stream(spec.seed, "augment-batch", l as u64);
            let first = rng.random_range(0..n);
            let second = rng.random_range(0..n);
            (first, second, rng.random())
        })
        .collect();

    // Encode each needed source once.
    let mut slot = BTreeMap::new();
    for &(a, b, _) in &plans {
        let len = slot.len();
        slot.entry(a).or_insert(len);
        if matches!(spec.method, AugMethod::Mix(_)) {
            let len = slot.len();
            slot.entry(b).or_insert(len);
        }
    }
    let mut order = vec![0; slot.len()];
    for (&src, &s) in &slot {
        order[s] = src;
    }
    let images: Vec<&Image> = order.iter().map(|&i| &data[i].image).collect();
    let aug = Augmenter::new(model, &images)?;

    let outputs = match &spec.method {
        AugMethod::Gaussian(p) => {
            let jobs: Vec<_> = plans.iter().map(|&(a, _, s)| (slot[&a], s)).collect();
            aug.gaussian(&jobs, p)?
        }
        AugMethod::Mix(m) => {
            let jobs: Vec<_> = plans.iter().map(|&(a, b, s)| (slot[&a], slot[&b], s)).collect();
            aug.mix(&jobs, m)?
        }
    };
    Ok(outputs
        .into_iter()
        .zip(&plans)
        .map(|(img, &(a, _, _))| (img, data[a].class_label))
        .collect())
}
