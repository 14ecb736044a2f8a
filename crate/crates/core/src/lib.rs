//! Forecasting models that stay accurate when input features go missing.
//!
//! The pipeline runs from multi-plant series ([`dataio`]) through missingness
//! simulation ([`missingness`]), linear and feed-forward models with optional
//! pattern adaptation ([`models`]), nominal and adversarial training
//! ([`training`], [`adversarial`]) and uncertainty-set partitions
//! ([`partition`]) to evaluation under simulated outages ([`evalx`]).

pub mod adversarial;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod evalx;
pub mod linalg;
pub mod missingness;
pub mod models;
pub mod partition;
pub mod training;

pub use adversarial::{find_adversarial, train_adversarial, AdvSearchScope};
pub use dataio::{build_supervised, gen_synthetic, load_csv, Dataset, RawSeries, SynthConfig};
pub use error::{Error, Result};
pub use evalx::{dm_test, nrmse, GridSpec, Method};
pub use missingness::{apply_mask, simulate_markov, MissingPattern, MissingnessConfig};
pub use models::{forward, loss_and_grad, Family, ModelParams, ModelSpec};
pub use partition::{enumerate_patterns, learn_partition, Artifact, Partition, PartitionConfig, UncertaintySet};
pub use training::{train_nominal, TrainConfig, TrainData};
