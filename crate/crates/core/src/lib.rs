pub mod capture;
pub mod corpus;
pub mod experiment;
pub mod flow;
pub mod io;
pub mod model;
pub mod seed;
pub mod store;
pub mod synth;
pub mod token;
pub mod metrics;
pub mod randomness;
pub mod train;
