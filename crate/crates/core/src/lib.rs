pub mod augmentation;
pub mod augmenter;
pub mod checkpoint;
pub mod autograd;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod trainer;
