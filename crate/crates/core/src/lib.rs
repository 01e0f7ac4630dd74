//! Binarized neural networks on packed bits, a transient bit-error read model,
//! and two bit error tolerance metrics: the neuron-level margin metric `T`
//! and the inter-neuron importance variance `VAR(Π)`.
//!
//! - [`bitcore`]: packed ±1 storage and the XNOR/popcount kernel
//! - [`model`]: layer stack, batch-norm folding, forward pass with traces
//! - [`fault`]: per-read bit-flip masks with reproducible stream derivation
//! - [`trainer`]: latent-weight training with straight-through gradients and flip injection
//! - [`metrics`]: tolerance tuple `T`, `T̄`, neuron importance `Π`, `VAR(Π)`, BER sweeps
//! - [`oracle`]: brute-force references (dense forward, exhaustive flip search)
//! - [`dataio`]: IDX / CIFAR-10 loaders, synthetic blobs, model container
//! - [`cli`]: the `bittol` command implementations

pub mod bitcore;
pub mod cli;
pub mod dataio;
pub mod fault;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod trainer;

pub use bitcore::{BitMask, BitMatrix};
pub use fault::{FaultConfig, StreamId};
pub use model::{Architecture, BnnModel, Direction, Shape3};
