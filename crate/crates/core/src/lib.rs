pub mod info;
pub mod lemmas;
pub mod rng;
pub mod stats;
pub mod mdp;
pub mod supervised;
pub mod meta_rl;
pub mod offline;
pub mod harness;
