//! Continuous generative cellular automata on sparse voxel embeddings.
//!
//! A shape is a sparse set of occupied grid cells, each carrying a latent
//! code that an autoencoder decodes into a truncated distance field. A
//! learned local transition kernel grows a partial shape into a complete one
//! over a Markov chain; the kernel is trained with infusion, which biases the
//! chain toward the target shape and admits closed-form per-step KL losses.
//!
//! Module map:
//! - [`grid`]: sparse states, neighborhoods, nearest-target projection, voxelization
//! - [`net`]: parameters, perceptron stacks, gradients, optimizers, checkpoints
//! - [`kernel`]: the transition kernel, sampling, mode seeking, generation
//! - [`infusion`]: the infusion kernel, schedules, training chains, convergence checks
//! - [`loss`]: closed-form KL losses, final-step loss, autoencoder loss, ELBO
//! - [`autoencoder`]: encoder, feature pyramid, trilinear decoder
//! - [`surface`]: dense field queries, point extraction, marching cubes, OBJ/XYZ
//! - [`data`]: procedural shapes, partial inputs, dataset files
//! - [`training`]: training loops and checkpoint evaluation
//! - [`metrics`]: Chamfer, UHD, TMD, MMD
//! - [`config`]: presets and `key = value` configuration
//! - [`verify`]: self-check suites behind `cgca verify`

pub mod autoencoder;
pub mod config;
pub mod data;
pub mod error;
pub mod grid;
pub mod infusion;
pub mod kernel;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod surface;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{Coord, Metric, NeighborhoodSpec, SparseState};
