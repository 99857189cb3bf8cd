pub mod analysis;
pub mod cache;
pub mod error;
pub mod io;
pub mod mask;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod tasks;
pub mod tensor;
