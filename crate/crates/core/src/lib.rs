//! Stacked federated learning for wearable-sensor activity recognition.

pub mod criteria;
pub mod dataset;
pub mod experiments;
pub mod features;
pub mod fedstack;
pub mod golden;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
