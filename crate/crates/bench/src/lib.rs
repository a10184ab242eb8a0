//! Fixtures shared by the benchmarks.

use chanfuse::synth::{generate_benchmark, SyntheticSpec};
use chanfuse::Dataset;

/// Two-segment dataset with `users` users and `channels` channels of depth 100.
pub fn fixture(users: usize, channels: usize) -> Dataset {
    let mut spec = SyntheticSpec::two_segment(7);
    spec.n_users = users;
    spec.n_items = 2000;
    let template = spec.channels[0].clone();
    spec.channels = (0..channels)
        .map(|k| chanfuse::synth::ChannelProfile {
            quality: 0.1 + 0.1 * (k % 3) as f64,
            ..template.clone()
        })
        .collect();
    generate_benchmark(&spec).expect("fixture spec is valid")
}
