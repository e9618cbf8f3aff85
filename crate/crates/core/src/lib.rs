pub mod artifacts;
pub mod bhm;
pub mod covariance;
pub mod eof;
pub mod error;
pub mod field_store;
pub mod optim;
pub mod scoring;
pub mod sim;
pub mod transfer;
pub mod window_mle;
