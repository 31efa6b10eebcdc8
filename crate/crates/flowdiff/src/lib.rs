//! Hierarchical flow diffusion for video frame interpolation.
//!
//! Given two frames, the model explicitly denoises bilateral optical flow
//! coarse-to-fine with a staged DDIM sampler, then synthesizes the midpoint
//! frame with a flow-guided encoder-decoder. Everything runs on the CPU at
//! desk scale and trains on synthetic triplets with analytic ground-truth
//! flow.
//!
//! Module map:
//! - [`schedules`]: noise schedules, stage partition of the timestep axis,
//!   forward/reverse diffusion steps.
//! - [`warping`]: differentiable backward warping, flow resizing, blending.
//! - [`synthesizer`]: flow-guided encoder-decoder and the photometric loss.
//! - [`diffusion`]: conditioned denoiser, multiscale flow loss, staged
//!   coarse-to-fine sampler.
//! - [`data`]: synthetic triplet generation, directory loaders, `.flo` I/O.
//! - [`eval`]: PSNR/EPE metrics, benchmark and ablation drivers.
//! - [`pipeline`]: three-phase training orchestration and full-resolution
//!   inference.
//! - [`cli`]: the command surface used by the `flowdiff` binary.
//!
//! The `examples/` directory has one runnable example per capability; start
//! with `inspect_schedule` and `oracle_sampler`.

pub mod autograd;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod schedules;
pub mod synthesizer;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod tensor;
pub mod warping;

pub use error::{Error, Result};
pub use tensor::Tensor;
