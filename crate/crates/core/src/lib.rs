//! Multivariate quantile function forecasting.
//!
//! A forecast distribution over the whole horizon is represented by a map
//! `q(α | h) = ∇_α G(α, h)`, the gradient of a network `G` that is convex in
//! `α` and conditioned on a recurrent encoding `h` of the series history.
//! Gradients of convex functions are monotone, so the map never produces
//! crossing quantiles, and with a strongly convex `G` it is invertible with a
//! tractable density.
//!
//! ```
//! use mqf2::{EncoderConfig, Mode, PicnnConfig, QuantileModel};
//! use ndarray::Array1;
//!
//! let encoder = EncoderConfig { hidden_size: 4, num_layers: 1, context_length: 3, feature_dim: 0 };
//! let picnn = PicnnConfig::new(2, 4, 5, 2);
//! let model = QuantileModel::new(picnn, encoder, Mode::Es, 7).unwrap();
//! let paths = model.sample_forward(&Array1::zeros(4), 10, 1).unwrap();
//! assert_eq!(paths.dim(), (10, 2));
//! ```

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod forecast;
pub mod lbfgs;
pub mod metrics;
pub mod model;
pub mod params;
pub mod picnn;
pub mod rng;
pub mod training;

pub use encoder::EncoderConfig;
pub use error::{Error, Result};
pub use model::{Mode, QuantileModel};
pub use params::ParamSet;
pub use picnn::PicnnConfig;
