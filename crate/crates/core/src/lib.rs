pub mod autodiff;
mod gemm;
pub mod ops;
pub mod optim;
pub mod slim;
pub mod tensor;
pub mod checkpoint;
pub mod zoo;
pub mod codec;
pub mod data;
pub mod metrics;
pub mod train;
pub mod report;
pub mod sim;
