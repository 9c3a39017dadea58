//! Semantic augmentation in the flow's latent space: additive perturbation of
//! the global (or, as an ablation, local) code, Beta-weighted interpolation of
//! two images' codes, and the global/local switch.

mod ops;
mod sampler;
mod spec;

pub use ops::{augment_batch, augment_gaussian, augment_mix, augment_mix_with_weight, draw_mix_weight, switch, Augmenter};
pub use sampler::{acceptance_probability, normal_cdf, sample_trunc_gaussian};
pub use spec::{flip_weight, AugMethod, AugmentationSpec, MixSpec, PerturbSpec, Perturbation, Target};
