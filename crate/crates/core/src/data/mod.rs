//! Physics datasets and the array container they are stored in.

pub mod container;
mod dataset;
pub mod sim;
mod trajectory_csv;

pub use container::{load_container, save_container, Container};
pub use dataset::{
    make_dataset, make_system_split_dataset, make_system_windows_dataset, make_time_split_dataset, FeatureKind, Sample, Split, SplitFractions,
    TrajectoryDataset,
};
pub use sim::{simulate_charged, simulate_orbital, ChargedConfig, Interaction, OrbitalConfig, Trajectory};
pub use trajectory_csv::{load_trajectory_csv, read_trajectory_csv};
