//! Charted axial transformer operator (CATO) for PDE surrogate learning.
//!
//! The crate provides, in rough dependency order:
//!
//! * a minimal differentiable substrate: dense tensors, a reverse-mode tape
//!   over a fixed primitive catalogue, AdamW with a one-cycle schedule;
//! * the learned geometry chart and continuous rotary positional encoding;
//! * charted axial attention, the local depthwise stencil, and the full
//!   CATO network with scalar and flux readouts;
//! * mesh-consistent discrete gradients and the physics-informed loss;
//! * a numerical harness for the approximation and stability results
//!   (charted axial low-rank operators, chart-perturbation bounds);
//! * a point-cloud variant (KNN message passing plus dense chart-biased
//!   attention), a synthetic Darcy-flow dataset generator, and training/
//!   evaluation drivers used by the `cato` CLI.
//!
//! All numeric code is generic over the [`scalar::Scalar`] float type;
//! `f64` is the default used everywhere that matters and the only type the
//! verification suites run at.

pub mod attention;
pub mod chart;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fastmath;
pub mod local;
pub mod loss;
pub mod mesh;
pub mod model;
pub mod optim;
pub mod params;
pub mod pc;
pub mod rng;
pub mod rope;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Keep large tensor buffers on the heap freelist instead of per-allocation
/// mmap: training allocates and frees hundreds of multi-hundred-kilobyte
/// buffers per sample, and glibc's default mmap threshold turns each one
/// into fresh kernel pages. Call once at process start (the CLI does).
pub fn tune_allocator() {
    #[cfg(target_env = "gnu")]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
    }
}

/// Concrete 64-bit aliases; the CLI and all verification suites use these.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Parameter64 = tensor::Parameter<f64>;
pub type Tape64 = tape::Tape<f64>;
pub type ModelState64 = model::ModelState<f64>;
pub type Mesh64 = mesh::Mesh<f64>;
pub type ChartCoords64 = chart::ChartCoords<f64>;



/// 32-bit aliases for memory-bound experimentation.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = tape::Tape<f32>;
