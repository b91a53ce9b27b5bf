//! Unprivileged pilot agent that late-binds user container images inside a
//! two-container Kubernetes pod.

pub mod clock;
pub mod cluster;
pub mod engine;
pub mod model;
pub mod monitor;
pub mod podspec;
pub mod simcluster;
pub mod taskrepo;
pub mod wrapper;
