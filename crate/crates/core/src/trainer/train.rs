use std::path::{Path, PathBuf};

use flowlab_tensor::Sgd;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::baselines::{cutmix_batch, cutout, mixup_batch, one_hot};
use super::classifier::{Classifier, ClassifierArch};
use super::losses::{weighted_ce, Term};
use crate::error::{Error, Result};
use crate::flowaug::{Augmenter, MixSpec, PerturbSpec};
use crate::flowcore::FlowModel;
use crate::image::Image;
use crate::seed;
use crate::synthdata::LabeledExample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Method {
    Standard,
    Mixup { alpha: f64 },
    Cutout { size: usize, fill: f32 },
    Cutmix { alpha: f64 },
    FlowaugGauss,
    FlowaugMix,
    FlowaugPlusStd { lambda: f64 },
    Combine { lambda1: f64, lambda2: f64 },
    FlowaugGaussCutmix { alpha: f64 },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::Mixup { .. } => "mixup",
            Method::Cutout { .. } => "cutout",
            Method::Cutmix { .. } => "cutmix",
            Method::FlowaugGauss => "flowaug_gauss",
            Method::FlowaugMix => "flowaug_mix",
            Method::FlowaugPlusStd { .. } => "flowaug_plus_std",
            Method::Combine { .. } => "combine",
            Method::FlowaugGaussCutmix { .. } => "flowaug_gauss_cutmix",
        }
    }

    pub fn needs_flow(&self) -> bool {
        !matches!(
            self,
            Method::Standard | Method::Mixup { .. } | Method::Cutout { .. } | Method::Cutmix { .. }
        )
    }

    fn uses_gauss(&self) -> bool {
        matches!(
            self,
            Method::FlowaugGauss | Method::FlowaugPlusStd { .. } | Method::Combine { .. } | Method::FlowaugGaussCutmix { .. }
        )
    }

    fn uses_mix(&self) -> bool {
        match self {
            Method::FlowaugMix => true,
            Method::Combine { lambda1, .. } => *lambda1 != 0.0,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Epochs (0-based) at whose start the learning rate is multiplied by
    /// `decay_factor`; defaults to 50% and 75% of training.
    pub decay_epochs: Option<Vec<usize>>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Flow checkpoint for flowaug methods when no model is passed in.
    pub flow_checkpoint: Option<PathBuf>,
    /// Global-code perturbation used by the Gaussian family.
    pub gaussian: PerturbSpec,
    pub mix: MixSpec,
    /// Fresh flow transforms of each training image per epoch.
    pub k: usize,
    /// Draw flow transforms per step instead of precomputing them per epoch.
    pub inline: bool,
    pub widths: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Standard,
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            decay_epochs: None,
            decay_factor: 0.1,
            weight_decay: 5e-4,
            seed: 0,
            flow_checkpoint: None,
            gaussian: PerturbSpec::default(),
            mix: MixSpec::default(),
            k: 1,
            inline: false,
            widths: vec![16, 32, 64, 64],
        }
    }
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn standard() -> Self {
        Self::new(Method::Standard)
    }

    pub fn mixup(alpha: f64) -> Self {
        Self::new(Method::Mixup { alpha })
    }

    pub fn cutout(size: usize, fill: f32) -> Self {
        Self::new(Method::Cutout { size, fill })
    }

    pub fn cutmix(alpha: f64) -> Self {
        Self::new(Method::Cutmix { alpha })
    }

    pub fn flowaug_gauss() -> Self {
        Self::new(Method::FlowaugGauss)
    }

    pub fn flowaug_mix() -> Self {
        Self::new(Method::FlowaugMix)
    }

    pub fn flowaug_plus_std(lambda: f64) -> Self {
        Self::new(Method::FlowaugPlusStd { lambda })
    }

    pub fn combine(lambda1: f64, lambda2: f64) -> Self {
        Self::new(Method::Combine { lambda1, lambda2 })
    }

    pub fn flowaug_gauss_cutmix(alpha: f64) -> Self {
        Self::new(Method::FlowaugGaussCutmix { alpha })
    }

    pub fn decay_schedule(&self) -> Vec<usize> {
        self.decay_epochs
            .clone()
            .unwrap_or_else(|| vec![self.epochs / 2, self.epochs * 3 / 4])
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.decay_schedule().iter().filter(|&&e| e <= epoch).count();
        self.lr * self.decay_factor.powi(n as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || !(self.decay_factor > 0.0) {
            return bad("momentum, weight decay or decay factor out of range");
        }
        if let Some(d) = &self.decay_epochs {
            if d.windows(2).any(|w| w[0] >= w[1]) {
                return bad("decay epochs must be strictly increasing");
            }
        }
        match self.method {
            Method::Mixup { alpha } | Method::Cutmix { alpha } | Method::FlowaugGaussCutmix { alpha } if !(alpha > 0.0) => {
                return bad("Beta concentration must be positive")
            }
            Method::Cutout { fill, .. } if !(0.0..=1.0).contains(&fill) => return bad("cutout fill must lie in [0, 1]"),
            Method::FlowaugPlusStd { lambda } if !(lambda >= 0.0) => return bad("lambda must be non-negative"),
            Method::Combine { lambda1, lambda2 } if !(lambda1 >= 0.0 && lambda2 >= 0.0) => {
                return bad("lambda1 and lambda2 must be non-negative")
            }
            _ => {}
        }
        if self.method.needs_flow() {
            if self.k == 0 {
                return bad("flow methods need k >= 1");
            }
            self.gaussian.validate().map_err(|e| Error::Config(e.to_string()))?;
            self.mix.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub method: String,
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimisation step in order.
    pub step_losses: Vec<f64>,
    pub last_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn to_json_lines(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

pub struct TrainOutcome {
    pub last: Classifier,
    /// Checkpoint with the highest test accuracy (the last one without a test set).
    pub best: Classifier,
    pub log: TrainLog,
}

/// Fraction of `test` predicted correctly.
pub fn accuracy(clf: &Classifier, test: &[LabeledExample]) -> Result<f64> {
    let imgs: Vec<&Image> = test.iter().map(|e| &e.image).collect();
    let pred = clf.predict(&imgs)?;
    let hits = pred.iter().zip(test).filter(|(p, e)| **p == e.class_label).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Flow-transformed copies of the training set for one epoch; entry `i * k + j`
/// is the `j`-th transform of image `i`.
struct EpochAugment {
    gauss: Vec<Image>,
    mix: Vec<Image>,
}

fn precompute(aug: &Augmenter<'_>, cfg: &TrainConfig, epoch: usize) -> Result<EpochAugment> {
    let n = aug.len();
    let k = cfg.k;
    let tag_g = format!("flowaug-gauss-{epoch}");
    let tag_m = format!("flowaug-mix-{epoch}");
    let gauss = if cfg.method.uses_gauss() {
        let jobs: Vec<(usize, u64)> = (0..n * k)
            .map(|t| (t / k, seed::child_seed(cfg.seed, &tag_g, t as u64)))
            .collect();
        aug.gaussian(&jobs, &cfg.gaussian)?
    } else {
        Vec::new()
    };
    let mix = if cfg.method.uses_mix() {
        let jobs: Vec<(usize, usize, u64)> = (0..n * k)
            .map(|t| {
                let mut rng = seed::stream(cfg.seed, &tag_m, t as u64);
                (t / k, rng.random_range(0..n), rng.random())
            })
            .collect();
        aug.mix(&jobs, &cfg.mix)?
    } else {
        Vec::new()
    };
    Ok(EpochAugment { gauss, mix })
}

fn inline_batch(
    aug: &Augmenter<'_>,
    cfg: &TrainConfig,
    src: &[usize],
    rng: &mut seed::StreamRng,
) -> Result<(Vec<Image>, Vec<Image>)> {
    let gauss = if cfg.method.uses_gauss() {
        let jobs: Vec<(usize, u64)> = src.iter().map(|&i| (i, rng.random())).collect();
        aug.gaussian(&jobs, &cfg.gaussian)?
    } else {
        Vec::new()
    };
    let mix = if cfg.method.uses_mix() {
        let jobs: Vec<(usize, usize, u64)> = src.iter().map(|&i| (i, src[rng.random_range(0..src.len())], rng.random())).collect();
        aug.mix(&jobs, &cfg.mix)?
    } else {
        Vec::new()
    };
    Ok((gauss, mix))
}

fn resolve_flow<'a>(cfg: &TrainConfig, flow: Option<&'a FlowModel>, owned: &'a mut Option<FlowModel>) -> Result<Option<&'a FlowModel>> {
    if !cfg.method.needs_flow() {
        return Ok(None);
    }
    if let Some(f) = flow {
        return Ok(Some(f));
    }
    let Some(path) = &cfg.flow_checkpoint else {
        return Err(Error::Config(format!("method {} needs a flow checkpoint", cfg.method.name())));
    };
    if !path.exists() {
        return Err(Error::Config(format!("flow checkpoint {} does not exist", path.display())));
    }
    *owned = Some(FlowModel::load(path).map_err(|e| Error::Config(format!("cannot load flow checkpoint: {e}")))?);
    Ok(owned.as_ref())
}

/// SGD training with step decay. `flow` overrides `cfg.flow_checkpoint`.
pub fn train(
    train_set: &[LabeledExample],
    test_set: &[LabeledExample],
    num_classes: usize,
    cfg: &TrainConfig,
    flow: Option<&FlowModel>,
) -> Result<TrainOutcome> {
    train_with(train_set, test_set, num_classes, cfg, flow, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    train_set: &[LabeledExample],
    test_set: &[LabeledExample],
    num_classes: usize,
    cfg: &TrainConfig,
    flow: Option<&FlowModel>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if let Some(e) = train_set.iter().chain(test_set).find(|e| e.class_label >= num_classes) {
        return Err(Error::invalid(format!("class label {} out of range", e.class_label)));
    }
    let mut owned = None;
    let flow = resolve_flow(cfg, flow, &mut owned)?;

    let first = &train_set[0].image;
    let arch = ClassifierArch {
        widths: cfg.widths.clone(),
        ..ClassifierArch::new(num_classes, first.height(), first.width())
    };
    let mut clf = Classifier::<f32>::new(arch, cfg.seed)?;
    let mut best = clf.clone();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);

    let sources: Vec<&Image> = train_set.iter().map(|e| &e.image).collect();
    let augmenter = flow.map(|f| Augmenter::new(f, &sources)).transpose()?;
    let targets: Vec<Vec<f64>> = train_set.iter().map(|e| one_hot(e.class_label, num_classes)).collect();
    let per_epoch = if cfg.method.needs_flow() && !cfg.inline { cfg.k } else { 1 };
    let n_items = train_set.len() * per_epoch;

    let mut log = TrainLog {
        method: cfg.method.name().to_string(),
        ..Default::default()
    };
    let mut best_acc = f64::NEG_INFINITY;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        let ep = match &augmenter {
            Some(a) if !cfg.inline => precompute(a, cfg, epoch)?,
            _ => EpochAugment {
                gauss: Vec::new(),
                mix: Vec::new(),
            },
        };
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut seed::stream(cfg.seed, "train-epoch", epoch as u64));
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for items in order.chunks(cfg.batch_size) {
            let mut rng = seed::stream(cfg.seed, "train-batch", step);
            let src: Vec<usize> = items.iter().map(|&t| t / per_epoch).collect();
            let raw: Vec<&Image> = src.iter().map(|&i| sources[i]).collect();
            let y: Vec<Vec<f64>> = src.iter().map(|&i| targets[i].clone()).collect();
            let mut partner: Vec<usize> = (0..items.len()).collect();
            partner.shuffle(&mut rng);

            let pairwise = |imgs: &[&Image],
                            rng: &mut seed::StreamRng,
                            f: &dyn Fn(&Image, &[f64], &Image, &[f64], &mut seed::StreamRng) -> Result<(Image, Vec<f64>)>|
             -> Result<(Vec<Image>, Vec<Vec<f64>>)> {
                let mut xs = Vec::with_capacity(imgs.len());
                let mut ys = Vec::with_capacity(imgs.len());
                for (b, &p) in partner.iter().enumerate() {
                    let (x, t) = f(imgs[b], &y[b], imgs[p], &y[p], rng)?;
                    xs.push(x);
                    ys.push(t);
                }
                Ok((xs, ys))
            };
            let (gauss_owned, mix_owned) = match &augmenter {
                Some(a) if cfg.inline => inline_batch(a, cfg, &src, &mut rng)?,
                _ => (Vec::new(), Vec::new()),
            };
            let gauss: Vec<&Image> = if cfg.inline {
                gauss_owned.iter().collect()
            } else {
                items.iter().filter_map(|&t| ep.gauss.get(t)).collect()
            };
            let mix: Vec<&Image> = if cfg.inline {
                mix_owned.iter().collect()
            } else {
                items.iter().filter_map(|&t| ep.mix.get(t)).collect()
            };

            let eval = match cfg.method {
                Method::Standard => weighted_ce(&clf, &[term(&raw, &y, 1.0)])?,
                Method::Mixup { alpha } => {
                    let (xs, ys) = pairwise(&raw, &mut rng, &|a, ya, b, yb, r| mixup_batch(a, ya, b, yb, alpha, r))?;
                    let refs: Vec<&Image> = xs.iter().collect();
                    weighted_ce(&clf, &[term(&refs, &ys, 1.0)])?
                }
                Method::Cutout { size, fill } => {
                    let xs = raw.iter().map(|x| cutout(x, size, fill, &mut rng)).collect::<Result<Vec<_>>>()?;
                    let refs: Vec<&Image> = xs.iter().collect();
                    weighted_ce(&clf, &[term(&refs, &y, 1.0)])?
                }
                Method::Cutmix { alpha } => {
                    let (xs, ys) = pairwise(&raw, &mut rng, &|a, ya, b, yb, r| cutmix_batch(a, ya, b, yb, alpha, r))?;
                    let refs: Vec<&Image> = xs.iter().collect();
                    weighted_ce(&clf, &[term(&refs, &ys, 1.0)])?
                }
                Method::FlowaugGauss => weighted_ce(&clf, &[term(&gauss, &y, 1.0)])?,
                Method::FlowaugMix => weighted_ce(&clf, &[term(&mix, &y, 1.0)])?,
                Method::FlowaugPlusStd { lambda } => {
                    weighted_ce(&clf, &[term(&gauss, &y, 1.0), term(&raw, &y, lambda)])?
                }
                Method::Combine { lambda1, lambda2 } => weighted_ce(
                    &clf,
                    &[term(&gauss, &y, 1.0), term(&mix, &y, lambda1), term(&raw, &y, lambda2)],
                )?,
                Method::FlowaugGaussCutmix { alpha } => {
                    let (xs, ys) = pairwise(&gauss, &mut rng, &|a, ya, b, yb, r| cutmix_batch(a, ya, b, yb, alpha, r))?;
                    let refs: Vec<&Image> = xs.iter().collect();
                    weighted_ce(&clf, &[term(&refs, &ys, 1.0)])?
                }
            };
            if !eval.value.is_finite() {
                return Err(Error::Diverged { epoch, what: "classifier loss" });
            }
            opt.step(clf.params_mut(), &eval.grads);
            log.step_losses.push(eval.value);
            loss_sum += eval.value * items.len() as f64;
            loss_n += items.len();
            step += 1;
        }
        let test_accuracy = if test_set.is_empty() {
            None
        } else {
            Some(accuracy(&clf, test_set)?)
        };
        let entry = EpochLog {
            epoch,
            lr: opt.lr,
            train_loss: loss_sum / loss_n as f64,
            test_accuracy,
        };
        on_epoch(&entry);
        log.epochs.push(entry);
        match test_accuracy {
            Some(a) if a > best_acc => {
                best_acc = a;
                log.best_epoch = Some(epoch);
                best = clf.clone();
            }
            None => best = clf.clone(),
            _ => {}
        }
    }
    log.last_accuracy = log.epochs.last().and_then(|e| e.test_accuracy);
    log.best_accuracy = log.best_epoch.map(|_| best_acc);
    Ok(TrainOutcome { last: clf, best, log })
}

fn term<'s, 'i>(images: &'s [&'i Image], targets: &'s [Vec<f64>], weight: f64) -> Term<'s, 'i> {
    Term { images, targets, weight }
}

/// Writes `index,true_class,pred_class` rows, one per test example.
pub fn write_predictions(path: &Path, truth: &[usize], pred: &[usize]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::invalid("prediction and label counts differ"));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["index", "true_class", "pred_class"]).map_err(|e| csv_err(path, e))?;
    for (i, (t, p)) in truth.iter().zip(pred).enumerate() {
        w.write_record([i.to_string(), t.to_string(), p.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}
