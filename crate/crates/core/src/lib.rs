pub mod boost;
pub mod cli;
pub mod config;
pub mod datamodel;
pub mod features;
pub mod fednet;
pub mod game;
pub mod he;
pub mod ldp;
pub mod metrics;
pub mod psi;
