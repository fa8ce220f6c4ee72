pub mod autodiff;
pub mod nn;
pub mod odeint;
pub mod powergrid;
pub mod rng;
pub mod datagen;
pub mod models;
pub mod training;
pub mod evaluation;
pub mod transfer;
