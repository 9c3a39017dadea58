use std::fs;
use std::path::Path;

use flowlab_tensor::{Bound, Conv2d, Linear, ParamSet, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{to_nchw, Image, CHANNELS};
use crate::seed;

/// Conv blocks (3x3 conv + relu, then 2x2 max-pool while the map is at least
/// 2x2 and not the last block), global average pooling and a linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub widths: Vec<usize>,
}

impl ClassifierArch {
    pub fn new(num_classes: usize, height: usize, width: usize) -> Self {
        Self {
            num_classes,
            height,
            width,
            widths: vec![16, 32, 64, 64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("classifier needs at least two classes"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("classifier widths and input size must be positive"));
        }
        Ok(())
    }

    fn pools(&self) -> Vec<bool> {
        let (mut h, mut w) = (self.height, self.width);
        let last = self.widths.len() - 1;
        (0..self.widths.len())
            .map(|i| {
                let pool = i < last && h >= 2 && w >= 2 && h % 2 == 0 && w % 2 == 0;
                if pool {
                    h /= 2;
                    w /= 2;
                }
                pool
            })
            .collect()
    }
}

pub struct Classifier<F: Scalar = f32> {
    arch: ClassifierArch,
    params: ParamSet<F>,
    convs: Vec<Conv2d>,
    pools: Vec<bool>,
    head: Linear,
}

impl<F: Scalar> Clone for Classifier<F> {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            params: self.params.clone(),
            convs: self.convs.clone(),
            pools: self.pools.clone(),
            head: self.head,
        }
    }
}

impl<F: Scalar> Classifier<F> {
    pub fn new(arch: ClassifierArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::stream(seed, "classifier-init", 0);
        let mut params = ParamSet::new();
        let mut c_in = CHANNELS;
        let convs: Vec<Conv2d> = arch
            .widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(&mut params, &format!("conv.{i}"), c_in, c, 3, 1, 1, false, &mut rng);
                c_in = c;
                conv
            })
            .collect();
        let head = Linear::new(&mut params, "head", c_in, arch.num_classes, false, &mut rng);
        // relu gain on top of the unit-gain initialiser
        for conv in &convs {
            let w = params.get_mut(conv.w);
            *w = w.map(|v| v * F::lit(std::f64::consts::SQRT_2));
        }
        let pools = arch.pools();
        Ok(Self {
            arch,
            params,
            convs,
            pools,
            head,
        })
    }

    pub fn arch(&self) -> &ClassifierArch {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn cast<G: Scalar>(&self) -> Classifier<G> {
        let mut out = Classifier::<G>::new(self.arch.clone(), 0).expect("validated architecture");
        out.params = self.params.cast();
        out
    }

    /// Inputs are centred and scaled before the first convolution.
    pub fn input_tensor(&self, images: &[&Image]) -> Result<Tensor<F>> {
        if images.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for img in images {
            if img.height() != self.arch.height || img.width() != self.arch.width {
                return Err(Error::invalid(format!(
                    "image is {}x{}, classifier expects {}x{}",
                    img.height(),
                    img.width(),
                    self.arch.height,
                    self.arch.width
                )));
            }
        }
        let two = F::lit(2.0);
        Ok(to_nchw::<F>(images).map(|v| (v - F::lit(0.5)) * two))
    }

    /// Logits `[N, C]` on a tape.
    pub fn forward<'t>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        let mut h = x;
        for (conv, &pool) in self.convs.iter().zip(&self.pools) {
            h = conv.forward(p, h).relu();
            if pool {
                h = h.max_pool2();
            }
        }
        self.head.forward(p, h.global_avg_pool())
    }

    /// Logits for each image, as f64 rows.
    pub fn logits(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            let tape = Tape::new();
            let p = self.params.bind_frozen(&tape);
            let z = self.forward(&p, tape.input(self.input_tensor(chunk)?));
            let z = z.value();
            let c = self.arch.num_classes;
            out.extend(z.data().chunks(c).map(|r| r.iter().map(|v| v.as_f64()).collect()));
        }
        Ok(out)
    }

    /// Arg-max class per image; ties go to the lowest index.
    pub fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
        Ok(self
            .logits(images)?
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

const MAGIC: &[u8; 8] = b"FLOWCLF1";

#[derive(Serialize, Deserialize)]
struct Descriptor {
    arch: ClassifierArch,
    params: Vec<(String, Vec<usize>)>,
}

impl Classifier<f32> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let desc = Descriptor {
            arch: self.arch.clone(),
            params: self
                .params
                .names()
                .iter()
                .zip(self.params.tensors())
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&desc)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a classifier checkpoint"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if len > body.len() {
            return Err(bad("truncated descriptor"));
        }
        let desc: Descriptor = serde_json::from_slice(&body[..len]).map_err(|e| bad(&e.to_string()))?;
        let mut clf = Classifier::<f32>::new(desc.arch, 0).map_err(|e| bad(&e.to_string()))?;
        let expected: Vec<(String, Vec<usize>)> = clf
            .params
            .names()
            .iter()
            .zip(clf.params.tensors())
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        if expected != desc.params {
            return Err(bad("parameter list does not match the architecture"));
        }
        let data = &body[len..];
        if data.len() != 4 * clf.params.num_scalars() {
            return Err(bad("parameter data length mismatch"));
        }
        let flat: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        clf.params.assign_flat(&flat);
        Ok(clf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
