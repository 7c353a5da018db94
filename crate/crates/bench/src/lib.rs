//! Fixtures shared by the benchmarks.

use aimrl::envs::{collect_dataset, marketing_cmdp, simplex_cmdp, MarketingConfig, StochasticPolicy};
use aimrl::{Cmdp, ConstraintSpec, TransitionDataset};

/// The default marketing CMDP with a uniform-behavior dataset.
pub fn marketing_fixture(episodes: u64) -> (Cmdp, ConstraintSpec, TransitionDataset) {
    let (cmdp, tau) = marketing_cmdp(&MarketingConfig::default()).expect("default marketing config is valid");
    let behavior = StochasticPolicy::uniform(cmdp.n_states(), cmdp.n_actions());
    let ds = collect_dataset(&cmdp, &behavior, episodes, 0).expect("uniform behavior has full support");
    (cmdp, tau, ds)
}

pub fn simplex_fixture(m: usize) -> (Cmdp, ConstraintSpec) {
    simplex_cmdp(m).expect("simplex CMDP exists for m >= 1")
}
