pub mod error;
pub mod numkernel;
pub mod preprocess;
pub mod twoblock;
pub mod robustweights;
pub mod crtb;
pub mod estimator;
pub mod modelselect;
pub mod simlab;
