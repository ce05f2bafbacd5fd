//! Semantic-map navigation agent: gridworld simulator, bag-of-classes
//! mapper, attention map encoder, recurrent actor-critic and PPO trainer.

pub mod config;
pub mod eval;
pub mod mapper;
pub mod nn;
pub mod policy;
pub mod ppm;
pub mod ppo;
pub mod replay;
pub mod sim;
pub mod tensor;
pub mod transformer;
pub mod worldset;
