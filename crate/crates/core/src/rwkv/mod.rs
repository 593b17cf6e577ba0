//! RWKV-style time mixing: the wkv recurrence and the block built around it.

mod block;
mod matrix;
mod shift;
mod wkv;

pub use block::{rwkv_block_forward, BlockScratch, RwkvBlock};
pub use matrix::{wkv_matrix_sequence, wkv_matrix_step, MatrixState};
pub use shift::{data_dependent_shift, lerp_into, DynamicMix, ShiftMixParams, ShiftTargets, ShiftedInputs};
pub use wkv::{
    wkv_backward, wkv_chunked, wkv_sequence, wkv_step, wkv_step_in_place, DecayParams, TimeMixInputs, WkvGrads,
    WkvState,
};

pub(crate) use wkv::wkv_rows;
