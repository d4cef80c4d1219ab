pub mod analysis;
pub mod cde;
pub mod cli;
pub mod cohort;
pub mod diffcore;
pub mod earlystop;
pub mod model;
pub mod rl;
pub mod stabilize;
pub mod train;
