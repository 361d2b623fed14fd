pub mod autodiff;
pub mod layers;
pub mod tensor;
pub mod pc_io;
pub mod preprocess;
pub mod metrics;
pub mod model;
pub mod training;
