pub mod bandit;
pub mod data;
pub mod maze;

pub use bandit::{generate_bimodal_bandit, generate_single_mode};
pub use data::{
    AnyDataset, Batch, DatasetMeta, DiscreteBatch, DiscreteTransition, DiscreteTransitionDataset, Transition,
    TransitionDataset,
};
pub use maze::{generate_demonstrations, MazeSpec, ScriptedExpert};
