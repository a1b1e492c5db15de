pub mod corpus;
pub mod models;
pub mod training;
pub mod synthetic;
pub mod ranking;
pub mod analysis;
