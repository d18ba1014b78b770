use expofit_core::data_io::{MonitorPanel, SiteRecord, SourceToggle, spatial_average};
use expofit_core::micro_sim::*;
use chrono::{Duration, NaiveDate};

fn toy_monitor(days: usize, sites: usize, level: impl Fn(usize, usize) -> f64) -> MonitorPanel {
    let start = NaiveDate::from_ymd_opt(1997, 1, 2).unwrap();
    MonitorPanel {
        sites: (0..sites).map(|j| SiteRecord { id: format!("s{j}"), district: format!("d{j}") }).collect(),
        dates: (0..days).map(|d| start + Duration::days(d as i64)).collect(),
        ambient: (0..days).map(|d| (0..sites).map(|j| Some(level(d, j))).collect()).collect(),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let home_pen: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.30);
    let home_s: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8.0);
    let home_p: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.22);

    let monitor = toy_monitor(363, 8, |d, j| {
        let season = 22.0 + 6.0 * (2.0 * std::f64::consts::PI * d as f64 / 365.0).cos();
        let site = 1.0 + 0.02 * (j as f64 - 3.5);
        (season * site + ((d * 7 + j * 13) % 11) as f64 * 0.5 - 2.5).max(2.0)
    });
    let temps: Vec<f64> = (0..363)
        .map(|d| 12.0 - 8.0 * (2.0 * std::f64::consts::PI * d as f64 / 365.0).cos())
        .collect();
    let mut profile = default_seniors_profile();
    for env in &mut profile.environments {
        if env.kind == EnvKind::HomeIndoor {
            env.penetration = home_pen;
            env.emission_rate = home_s;
            env.event_prob = home_p;
        }
    }
    let panel = simulate_with_profile(&monitor, &temps, &profile, 25, SourceToggle::All, 1997).unwrap();

    let ambient: Vec<f64> = spatial_average(&monitor).into_iter().map(|v| v.unwrap()).collect();
    let personal = panel.daily_means();
    let n = ambient.len() as f64;
    let (ax, px) = (ambient.iter().sum::<f64>() / n, personal.iter().sum::<f64>() / n);
    let sxy: f64 = ambient.iter().zip(&personal).map(|(a, p)| (a - ax) * (p - px)).sum();
    let sxx: f64 = ambient.iter().map(|a| (a - ax) * (a - ax)).sum();
    let slope = sxy / sxx;
    let intercept = px - slope * ax;
    let (indoor, _) = decompose_sources(&panel).unwrap();

    // dispersion across replicates: median day CV
    let mut cvs: Vec<f64> = panel.exposure.iter().map(|row| {
        let m = row.iter().sum::<f64>() / row.len() as f64;
        let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (row.len() as f64 - 1.0);
        v.sqrt() / m
    }).collect();
    cvs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cv_med = cvs[cvs.len() / 2];

    // occupancy fractions (rough): derived from component mix is enough here
    let mean_personal = px;
    println!("home_pen={home_pen} S={home_s} p={home_p}");
    println!("ambient mean {ax:.2}  personal mean {mean_personal:.2}");
    println!("slope {slope:.3}  intercept {intercept:.2}  indoor_share {indoor:.3}  cv_med {cv_med:.3}");

    // lambda-scale check for moment-rule contrast at gamma = 0.005
    let m1: f64 = personal.iter().sum::<f64>() / n;
    let mids = panel.daily_moments(expofit_core::exposure_moments::Lambda3Rule::Ratio).unwrap();
    let mut l2s: Vec<f64> = mids.iter().map(|m| m.lambda2).collect();
    l2s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let l2_med = l2s[l2s.len() / 2];
    let g: f64 = 0.005;
    let exact = expofit_core::exposure_moments::exact_third_central_moment(m1, l2_med).unwrap();
    let ratio = expofit_core::exposure_moments::lambda3_ratio(m1, l2_med).unwrap();
    let diff = (g.powi(3) * (exact - ratio) / 6.0).abs();
    println!("lambda1~{m1:.2} lambda2_med~{l2_med:.2}  |Δ ln μ| from λ3 rules = {diff:.2e}");
}
