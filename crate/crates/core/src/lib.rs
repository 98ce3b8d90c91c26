pub mod dimension;
pub mod enkf;
pub mod experiment;
pub mod interp;
pub mod mesh;
pub mod metrics;
pub mod models;
pub mod observations;
pub mod seeding;
