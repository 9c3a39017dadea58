use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

/// Parameters placed on a tape for one forward pass.
pub struct Bound<'t, F: Scalar> {
    vars: Vec<Var<'t, F>>,
}

impl<'t, F: Scalar> Bound<'t, F> {
    pub fn get(&self, id: ParamId) -> Var<'t, F> {
        self.vars[id.0]
    }

    /// Gradients for every parameter in declaration order.
    pub fn grads(&self, g: &Gradients<F>) -> Vec<Tensor<F>> {
        self.vars.iter().map(|&v| g.get_or_zeros(v)).collect()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<F>) -> Bound<'t, F> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t)).collect(),
        }
    }

    /// Same parameters on a tape that will never run backward.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<F>) -> Bound<'t, F> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Flat copy of every scalar, in declaration order.
    pub fn flatten(&self) -> Vec<F> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn assign_flat(&mut self, flat: &[F]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat parameter length mismatch");
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// He-uniform initialisation, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform<F: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<F> {
    let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| F::lit(dist.sample(rng))).collect())
}

/// Square kernel convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// `zero_init` starts weights and bias at exactly zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        zero_init: bool,
        rng: &mut R,
    ) -> Self {
        let shape = [c_out, c_in, k, k];
        let w = if zero_init {
            Tensor::zeros(&shape)
        } else {
            he_uniform(&shape, c_in * k * k, 1.0, rng)
        };
        Self {
            w: ps.push(format!("{name}.weight"), w),
            b: ps.push(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
            pad,
        }
    }

    pub fn forward<'t, F: Scalar>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        x.conv2d(p.get(self.w), self.stride, self.pad).add_bias(p.get(self.b))
    }
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        zero_init: bool,
        rng: &mut R,
    ) -> Self {
        let w = if zero_init {
            Tensor::zeros(&[d_in, d_out])
        } else {
            he_uniform(&[d_in, d_out], d_in, 1.0, rng)
        };
        Self {
            w: ps.push(format!("{name}.weight"), w),
            b: ps.push(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward<'t, F: Scalar>(&self, p: &Bound<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        x.matmul(p.get(self.w)).add_bias(p.get(self.b))
    }
}
