//! Toolkit for training parameter-efficient finetuning (PEFT) modules on a
//! small encoder-decoder host, porting them to another host, and measuring
//! how much task knowledge survives the move.

pub mod grid;
pub mod model;
pub mod peft;
pub mod porting;
pub mod tasks;
pub mod tensor;
pub mod train;
