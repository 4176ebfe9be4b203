pub mod dataset;
pub mod encoders;
pub mod nn;
pub mod par;
pub mod policy;
pub mod repeatability;
pub mod rollout;
pub mod trainer;
