//! Order capture, management and fulfillment engine with saga-style
//! compensation over simulated service platforms.

pub mod capture;
pub mod catalog;
pub mod compensation;
pub mod cli;
pub mod clock;
pub mod envelope;
pub mod fulfillment;
pub mod journal;
pub mod management;
pub mod msgbus;
pub mod order;
pub mod parse;
pub mod scenario;
pub mod workspace;
