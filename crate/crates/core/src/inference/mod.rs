//! Closed-loop inference: rolling chunk prediction with inpainting across
//! chunk boundaries, spline compression and gripper correction.

mod engine;
mod gripper;
mod inpaint;
mod spline;

pub use engine::{boundary_jump, CycleTrace, Engine, EngineConfig, FaultInjection};
pub use gripper::GripperStats;
pub use inpaint::{inpaint_denoise, InpaintConfig, InpaintMode, DEFAULT_TIME_THRESHOLD};
pub use spline::{compress, should_compress, CompressionConfig, NaturalSpline};
