//! Matrix factorization trained to optimize ranking metrics directly.
//!
//! The crate covers the whole offline pipeline:
//!
//! * [`dataio`]: ingest, binarize, filter, split and sample negatives, or
//!   generate synthetic preference data.
//! * [`metrics`]: exact ranks and RR, AP, nDCG, RBP and normalized RBP.
//! * [`model`]: the latent factor model and its SGD step.
//! * [`pairwise`]: LambdaRank-style λ-gradients with closed-form swap deltas.
//! * [`listwise`]: smoothed-rank surrogate losses and their gradients.
//! * [`trainer`]: training runs, best-epoch selection and learning-rate search.
//! * [`experiment`]: the full grid and its analysis tables.
//!
//! ```
//! use metricopt::dataio::{generate_synthetic, sample_negatives, split_train_test, SyntheticConfig};
//! use metricopt::metrics::MetricKind;
//! use metricopt::trainer::{train, Objective, TrainConfig};
//!
//! let set = generate_synthetic(&SyntheticConfig {
//!     n_users: 10, n_items: 60, latent_dim: 4, positives_per_user: 25, seed: 7,
//! }).unwrap();
//! let split = sample_negatives(&split_train_test(&set, 0, 7, 0.8).unwrap(), &set, 1.0, 7).unwrap();
//! let config = TrainConfig { epochs: 20, dim: 4, ..TrainConfig::new(Objective::Pairwise(MetricKind::Ap), 0.1, 7) };
//! let history = train(&config, &split, &set).unwrap();
//! let (epoch, ap) = history.select_best(MetricKind::Ap).unwrap();
//! assert!(epoch <= 20 && ap > 0.0);
//! ```

pub mod dataio;
pub mod error;
pub mod experiment;
pub mod listwise;
pub mod metrics;
pub mod model;
pub mod pairwise;
pub mod seed;
pub mod trainer;

pub use dataio::{InteractionSet, RatingFormat, SplitAssignment, UserSplit};
pub use error::{Error, Result};
pub use listwise::ListLossKind;
pub use metrics::{EvalReport, MetricKind, Persistence, RankedUserList};
pub use model::{FactorModel, SgdConfig};
pub use trainer::{Objective, Paradigm, TrainConfig, TrainHistory};
