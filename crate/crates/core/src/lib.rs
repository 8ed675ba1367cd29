//! Modality-decoupled preference optimization at desk scale.
//!
//! * [`objective`]: KL terms, the decoupled objective, its closed-form
//!   optimum, reward margins and every pairwise loss.
//! * [`policy`]: a one-hidden-layer toy omni policy with analytic gradients.
//! * [`corrupt`]: zero, Gaussian, swap and diffusion corruption of features.
//! * [`synth`]: a seeded world oracle producing modality-grounded preference
//!   pairs and benchmark items.
//! * [`train`]: reference warm-up and the preference-optimization loop.
//! * [`eval`]: yes/no scoring, log-likelihood-shift analysis, comparisons.
//! * [`audit`]: runtime oracle checks.
//! * [`experiment`]: seed-averaged end-to-end runs.

pub mod audit;
pub mod corrupt;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod objective;
pub mod policy;
pub mod seeding;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
