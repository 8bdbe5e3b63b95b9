//! Meta-learned conditional VAE + GAN feature generator for zero-shot
//! classification.
//!
//! * [`neural`]: matrices, MLPs with manual backprop, seeded RNG, optimizers.
//! * [`genmodel`]: encoder, decoder/generator and discriminator over shared MLPs.
//! * [`losses`]: ELBO, adversarial and joint losses with analytic gradients.
//! * [`episodes`]: few-shot class pools and task sampling.
//! * [`metatrain`]: first-order meta-training loop.
//! * [`zsleval`]: feature synthesis, softmax classifier, ZSL/GZSL metrics.
//! * [`datasets`]: dataset directory format and the synthetic benchmark.

pub mod datasets;
pub mod episodes;
pub mod error;
pub mod genmodel;
pub mod losses;
pub mod metatrain;
pub mod neural;
pub mod zsleval;

pub use error::{Error, Result};
