//! Benchmark fixtures shared by the criterion targets.

use attnguide::{synth, Dataset, Split, SynthConfig};

/// Default-shaped bags (M = 768, S in 20..=60), `n` of them.
pub fn bags(n: usize, dim: usize) -> Dataset {
    let cfg = SynthConfig {
        dim,
        n_test: n,
        ..SynthConfig::default()
    };
    synth::generate_split(&cfg, 0, Split::Test).expect("valid config")
}
