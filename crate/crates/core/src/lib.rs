//! Graph cross attention U-Net for 3D brain tumour segmentation: model,
//! losses, metrics, data pipeline, training loop and sliding-window inference.

pub mod data;
mod error;
pub mod graph;
pub mod inference;
mod init;
pub mod losses;
pub mod metrics;
pub mod segnet;
pub mod trainer;
pub mod verify;
pub mod volume;

pub use error::{Error, Result};
pub use voxgraph_tensor as tensor;

/// Keeps large freed buffers in the heap instead of returning them to the OS.
/// Training allocates and drops many multi-megabyte activations per step, and
/// remapping them page by page costs about a third of the step time. Call once
/// at process start; it is a no-op outside glibc.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds and is called with
    // valid parameter codes.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TRIM_THRESHOLD, -1);
    }
}
