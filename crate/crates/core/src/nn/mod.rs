//! Parameterized building blocks on top of the tape.

mod check;
mod layers;
mod params;

pub use check::{check_module, probe_sum};
pub use layers::{layer_norm, uniform_init, EncoderBlock, LayerNorm, Linear, MhsaLayer, Mlp2};
pub use params::{ParamId, ParamStore, Session, StoreGrads};
