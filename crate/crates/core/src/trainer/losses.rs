use flowlab_tensor::{Scalar, Tape, Tensor};
use rand::Rng;

use super::classifier::Classifier;
use crate::error::{Error, Result};
use crate::flowaug::{Augmenter, MixSpec, PerturbSpec};
use crate::flowcore::FlowModel;
use crate::image::Image;
use crate::seed::StreamRng;

/// `-sum_j t_j log softmax(z)_j`, stabilised by log-sum-exp.
pub fn cross_entropy(logits: &[f64], target: &[f64]) -> f64 {
    assert_eq!(logits.len(), target.len(), "logit/target length mismatch");
    let (arg, mx) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, v)| if v > b.1 { (i, v) } else { b });
    // log(sum exp(z - max)) = log1p(sum over the non-max terms), exact for confident logits
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, z)| (z - mx).exp())
        .sum();
    let lse = rest.ln_1p();
    logits
        .iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(z, t)| t * ((mx - z) + lse))
        .sum()
}

/// A batch transform drawn from some family; consumes randomness from `rng`.
pub trait Transform {
    fn apply(&self, images: &[&Image], rng: &mut StreamRng) -> Result<Vec<Image>>;
}

pub struct Identity;

impl Transform for Identity {
    fn apply(&self, images: &[&Image], _rng: &mut StreamRng) -> Result<Vec<Image>> {
        Ok(images.iter().map(|&i| i.clone()).collect())
    }
}

/// Global-code perturbation of every image.
pub struct FlowGaussian<'m> {
    pub model: &'m FlowModel,
    pub spec: PerturbSpec,
}

impl Transform for FlowGaussian<'_> {
    fn apply(&self, images: &[&Image], rng: &mut StreamRng) -> Result<Vec<Image>> {
        let aug = Augmenter::new(self.model, images)?;
        let jobs: Vec<(usize, u64)> = (0..images.len()).map(|i| (i, rng.random())).collect();
        aug.gaussian(&jobs, &self.spec)
    }
}

/// Code interpolation of every image with a uniformly drawn partner from the batch.
pub struct FlowMix<'m> {
    pub model: &'m FlowModel,
    pub spec: MixSpec,
}

impl Transform for FlowMix<'_> {
    fn apply(&self, images: &[&Image], rng: &mut StreamRng) -> Result<Vec<Image>> {
        let aug = Augmenter::new(self.model, images)?;
        let n = images.len();
        let jobs: Vec<(usize, usize, u64)> = (0..n).map(|i| (i, rng.random_range(0..n), rng.random())).collect();
        aug.mix(&jobs, &self.spec)
    }
}

/// Images with (possibly soft) class targets.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub images: Vec<&'a Image>,
    pub targets: Vec<Vec<f64>>,
}

impl<'a> Batch<'a> {
    pub fn new(images: Vec<&'a Image>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if images.is_empty() || images.len() != targets.len() {
            return Err(Error::invalid("batch needs one target per image"));
        }
        for t in &targets {
            let s: f64 = t.iter().sum();
            if (s - 1.0).abs() > 1e-6 || t.iter().any(|&v| v < 0.0) {
                return Err(Error::invalid("targets must lie on the probability simplex"));
            }
        }
        Ok(Self { images, targets })
    }
}

/// Loss value with its gradient for every classifier parameter.
pub struct LossEval<F> {
    pub value: f64,
    pub grads: Vec<Tensor<F>>,
}

/// One weighted mean cross-entropy term.
pub struct Term<'s, 'i> {
    pub images: &'s [&'i Image],
    pub targets: &'s [Vec<f64>],
    pub weight: f64,
}

/// `sum_k weight_k * mean CE(f(images_k), targets_k)`. Zero-weight terms are skipped.
pub fn weighted_ce<F: Scalar>(clf: &Classifier<F>, terms: &[Term<'_, '_>]) -> Result<LossEval<F>> {
    let c = clf.num_classes();
    let tape = Tape::new();
    let p = clf.params().bind(&tape);
    let mut total = None;
    for term in terms.iter().filter(|t| t.weight != 0.0) {
        if term.weight < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if term.targets.len() != term.images.len() || term.targets.iter().any(|t| t.len() != c) {
            return Err(Error::invalid("targets do not match the batch"));
        }
        let x = tape.input(clf.input_tensor(term.images)?);
        let flat: Vec<f64> = term.targets.iter().flatten().copied().collect();
        let targets = Tensor::<F>::from_f64(&[term.images.len(), c], &flat);
        let ce = clf.forward(&p, x).softmax_cross_entropy(&targets).mean().scale(term.weight);
        total = Some(match total {
            None => ce,
            Some(acc) => ce.add(acc),
        });
    }
    let Some(loss) = total else {
        return Err(Error::invalid("loss has no positively weighted term"));
    };
    let value = loss.value().item().as_f64();
    let grads = p.grads(&tape.backward(loss));
    Ok(LossEval { value, grads })
}

/// Cross-entropy on transformed images only.
pub fn loss_flowaug<F: Scalar>(clf: &Classifier<F>, batch: &Batch<'_>, t: &dyn Transform, rng: &mut StreamRng) -> Result<LossEval<F>> {
    let tx = t.apply(&batch.images, rng)?;
    let refs: Vec<&Image> = tx.iter().collect();
    weighted_ce(
        clf,
        &[Term {
            images: &refs,
            targets: &batch.targets,
            weight: 1.0,
        }],
    )
}

/// Transformed-image loss plus `lambda` times the loss on the originals.
pub fn loss_flowaug_std<F: Scalar>(
    clf: &Classifier<F>,
    batch: &Batch<'_>,
    t: &dyn Transform,
    lambda: f64,
    rng: &mut StreamRng,
) -> Result<LossEval<F>> {
    let tx = t.apply(&batch.images, rng)?;
    let refs: Vec<&Image> = tx.iter().collect();
    weighted_ce(
        clf,
        &[
            Term {
                images: &refs,
                targets: &batch.targets,
                weight: 1.0,
            },
            Term {
                images: &batch.images,
                targets: &batch.targets,
                weight: lambda,
            },
        ],
    )
}

/// `L(f(t1 x), y) + lambda1 L(f(t2 x), y) + lambda2 L(f(x), y)`.
pub fn loss_combine<F: Scalar>(
    clf: &Classifier<F>,
    batch: &Batch<'_>,
    t1: &dyn Transform,
    t2: &dyn Transform,
    lambda1: f64,
    lambda2: f64,
    rng: &mut StreamRng,
) -> Result<LossEval<F>> {
    let a = t1.apply(&batch.images, rng)?;
    let ra: Vec<&Image> = a.iter().collect();
    let b = if lambda1 != 0.0 { t2.apply(&batch.images, rng)? } else { Vec::new() };
    let rb: Vec<&Image> = b.iter().collect();
    let mut terms = vec![Term {
        images: &ra,
        targets: &batch.targets,
        weight: 1.0,
    }];
    if lambda1 != 0.0 {
        terms.push(Term {
            images: &rb,
            targets: &batch.targets,
            weight: lambda1,
        });
    }
    terms.push(Term {
        images: &batch.images,
        targets: &batch.targets,
        weight: lambda2,
    });
    weighted_ce(clf, &terms)
}
