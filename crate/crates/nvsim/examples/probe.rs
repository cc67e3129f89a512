use nvsim::config::RunConfig;
use nvsim::scenario::{run_scenario, Scenario, ScenarioOptions, ScenarioReport};

fn ratio(config: &RunConfig, seed: u64) -> (f64, usize, usize) {
    let opts = ScenarioOptions { workers: 2, ..ScenarioOptions::default() };
    match run_scenario(Scenario::Fig3, config, seed, &opts).unwrap() {
        ScenarioReport::Stability(s) => (s.stability_ratio, s.valid_centers_green, s.valid_centers_yellow),
        _ => unreachable!(),
    }
}

fn main() {
    for seed in [42u64, 7, 99, 5, 2024, 1, 3] {
        let (base, vg, vy) = ratio(&RunConfig::default(), seed);
        let mut hg = RunConfig::default();
        hg.jumps.sigma_green /= 2.0;
        let (rg, _, _) = ratio(&hg, seed);
        let mut hy = RunConfig::default();
        hy.jumps.sigma_yellow /= 2.0;
        let (ry, _, _) = ratio(&hy, seed);
        println!(
            "seed {seed}: base {base:6.2} ({vg}/{vy}) | green/2 x{:.3} | yellow/2 x{:.3}",
            rg / base,
            ry / base
        );
    }
}
