//! Numeric substrate: CPU kernels and the op-program interpreter.

pub mod kernels;
mod program;

pub use kernels::ConvGeom;
pub use program::{backward, forward, BufferSpec, Mode, Op, OpNode, ParamRole, ParamSpec, ParamStore, Program, Trace};
