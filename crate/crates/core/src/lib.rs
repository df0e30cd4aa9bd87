//! Quantum-inspired tensor-network machine learning: loop-free tensor-network
//! classifiers (MPS / TTN) for image data, per-feature entanglement-entropy
//! auditing for data-poisoning detection, and controlled-error Schmidt
//! truncation for model compression.

pub mod analysis;
pub mod classifier;
pub mod encoding;
pub mod network;
pub mod persistence;
pub mod poison;
pub mod tensor;
pub mod trainer;
