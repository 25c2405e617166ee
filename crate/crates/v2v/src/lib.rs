//! Voxel-to-voxel video prediction: a self-contained 3D convolutional
//! encoder-decoder stack with analytic gradients, task losses and metrics,
//! an SGD trainer, a classical optical-flow teacher, and a synthetic data
//! generator.

pub mod graph;
pub mod loss;
pub mod ops;
pub mod synth;
pub mod teacher;
pub mod tensor;
pub mod train;
pub mod viz;
