pub mod dataset;
pub mod repeat;
pub mod rollout;
pub mod train;
