use expofit_core::mcmc_engine::*;
use expofit_core::mean_models::MeanStrategy;
use expofit_core::exposure_moments::{DayStats, Lambda3Rule};
use expofit_core::data_io::align_lagged;
use expofit_core::synth_oracle::{build_design, generate, SynthScenario};

fn main() {
    let data = generate(&SynthScenario {
        days: 60, sites: 2, reps_per_site: 20, time_df: 4, seed: 3,
        ..SynthScenario::default()
    }).unwrap();
    let align = align_lagged(&data.panel.dates, &data.health.dates, 2).unwrap();
    let (design, _, _) = build_design(&data.health, 4, 2).unwrap();
    let stats: Vec<DayStats> = data.panel.exposure.iter().map(|r| DayStats::from_samples(r).unwrap()).collect();
    let xi = stats.iter().map(|s| s.mean).sum::<f64>() / stats.len() as f64;
    let s2m = stats.iter().map(|s| s.var).sum::<f64>() / stats.len() as f64;
    let spec = ModelSpec {
        strategy: MeanStrategy::LognormalTaylor,
        lambda3: Lambda3Rule::Ratio,
        counts: align.count_idx.iter().map(|&i| data.health.counts[i]).collect(),
        design: align.count_idx.iter().map(|&i| design[i].clone()).collect(),
        exposure_for_count: align.exposure_idx.clone(),
        exposure: ExposureInput::Sampled { stats, family: ExposureFamily::LogNormal },
        priors: Priors { xi, s2_mean: s2m, ..Priors::default() },
        lag: 2,
        window_dates: align.window_dates.clone(),
        exposure_dates: data.panel.dates.clone(),
    };
    let draws = run_chains(&spec, SamplerSettings::desk(100, 200, 2), 13).unwrap();
    let dir = std::env::temp_dir().join("expofit-float-probe");
    let _ = std::fs::remove_dir_all(&dir);
    write_draws(&draws, &dir).unwrap();
    // compare chain0 lambda draw0 day4 directly against file text
    let mem = draws.chains[0].lambda.as_ref().unwrap()[0][4];
    println!("memory day4: {:?} / {:?}", mem.0, mem.1);
    let text = std::fs::read_to_string(dir.join("lambda_chain0.csv")).unwrap();
    let line1: &str = text.lines().nth(1).unwrap();
    let cells: Vec<&str> = line1.split(',').collect();
    println!("file day4: '{}' / '{}'", cells[1 + 8], cells[2 + 8]);
    let loaded = load_draws(&dir).unwrap();
    let l = loaded.chains[0].lambda.as_ref().unwrap()[0][4];
    println!("loaded day4: {:?} / {:?}", l.0, l.1);
    println!("n cells in line: {}", cells.len());
    println!("header: {}", text.lines().next().unwrap().split(',').take(12).collect::<Vec<_>>().join(","));
}
