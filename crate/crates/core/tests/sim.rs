use std::collections::BTreeMap;

use proptest::prelude::*;
use saecv_core::models::ModelSpec;
use saecv_core::rng::rng_from_seed;
use saecv_core::sim::design::{pps_inclusion_probabilities, systematic_pps};
use saecv_core::sim::population::draw_betabinomial;
use saecv_core::sim::study::{scenario_population, AreaModel, AreaReplicate, ReplicateResult};
use saecv_core::sim::{
    build_frame, draw_survey, generate_population, loao_gap_check, remainder_check, run_study, PairConfig, ScenarioConfig,
    SyntheticPopulation,
};
use saecv_core::survey::id;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn inclusion_probabilities_sum_to_the_take(sizes in prop::collection::vec(1.0f64..500.0, 3..40), frac in 0.05f64..0.9) {
        let n = ((sizes.len() as f64 * frac).round() as usize).max(1);
        let pi = pps_inclusion_probabilities(&sizes, n).unwrap();
        prop_assert!((pi.iter().sum::<f64>() - n as f64).abs() < 1e-9);
        prop_assert!(pi.iter().all(|&p| p > 0.0 && p <= 1.0));
        // Below certainty, probabilities stay proportional to size.
        let free: Vec<usize> = (0..pi.len()).filter(|&j| pi[j] < 1.0).collect();
        for w in free.windows(2) {
            let (a, b) = (w[0], w[1]);
            prop_assert!((pi[a] / sizes[a] - pi[b] / sizes[b]).abs() < 1e-9 * pi[a] / sizes[a]);
        }
        let mut rng = rng_from_seed(n as u64);
        prop_assert_eq!(systematic_pps(&pi, &mut rng).len(), n);
    }

    #[test]
    fn betabinomial_draws_stay_in_range(n in 1u32..300, p in 0.01f64..0.99, d in 0.0f64..0.9, seed in 0u64..1000) {
        let mut rng = rng_from_seed(seed);
        prop_assert!(draw_betabinomial(n, p, d, &mut rng).unwrap() <= n);
    }
}

#[test]
fn systematic_selection_frequencies_match_probabilities() {
    let sizes: Vec<f64> = (0..12).map(|j| 20.0 + 15.0 * j as f64).collect();
    let pi = pps_inclusion_probabilities(&sizes, 4).unwrap();
    let mut rng = rng_from_seed(31);
    let draws = 20_000;
    let mut hits = vec![0usize; sizes.len()];
    for _ in 0..draws {
        for j in systematic_pps(&pi, &mut rng) {
            hits[j] += 1;
        }
    }
    for (j, &h) in hits.iter().enumerate() {
        let freq = h as f64 / draws as f64;
        let se = (pi[j] * (1.0 - pi[j]) / draws as f64).sqrt();
        assert!((freq - pi[j]).abs() < 4.0 * se + 1e-12, "cluster {j}: {freq} vs {}", pi[j]);
    }
}

#[test]
fn frame_has_two_hundred_clusters_per_area() {
    let config = ScenarioConfig::ten_provinces(10, 10);
    let frame = build_frame(&config, 7).unwrap();
    assert_eq!(frame.len(), 2000);
    for area in &config.areas {
        let range = area.cluster_size.unwrap();
        let own: Vec<_> = frame.iter().filter(|c| *c.area_id == *area.id).collect();
        assert_eq!(own.len(), 200);
        assert!(own.iter().all(|c| (range.min..=range.max).contains(&c.size)));
    }
    assert_eq!(frame, build_frame(&config, 7).unwrap());
    assert_ne!(frame, build_frame(&config, 8).unwrap());
}

#[test]
fn truth_is_the_resummed_population() {
    let mut config = ScenarioConfig::ten_provinces(10, 10);
    config.cluster_logit_sd = 0.6;
    let population = scenario_population(&config).unwrap();
    let mut sums: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for c in &population.clusters {
        let t = sums.entry(c.area_id.to_string()).or_default();
        t.0 += u64::from(c.events);
        t.1 += u64::from(c.size);
    }
    assert_eq!(sums.len(), 10);
    for (area, (y, n)) in &sums {
        assert_eq!(population.truth[&id(area.as_str())], *y as f64 / *n as f64);
    }
    let mut buf = Vec::new();
    population.write_csv(&mut buf).unwrap();
    assert_eq!(SyntheticPopulation::read_csv(buf.as_slice()).unwrap(), population);
}

#[test]
fn without_overdispersion_truth_tracks_prevalence() {
    let mut config = ScenarioConfig::ten_provinces(10, 10);
    config.d_pop = 0.0;
    let population = scenario_population(&config).unwrap();
    for area in &config.areas {
        let n = population.area_sizes[&id(area.id.as_str())];
        let se = (area.prevalence * (1.0 - area.prevalence) / n).sqrt();
        let truth = population.truth[&id(area.id.as_str())];
        assert!((truth - area.prevalence).abs() < 5.0 * se, "{}: {truth} vs {}", area.id, area.prevalence);
    }
}

#[test]
fn overdispersion_inflates_cluster_variance() {
    let mut rng = rng_from_seed(12);
    let var = |d: f64, rng: &mut _| {
        let draws: Vec<f64> = (0..20_000).map(|_| f64::from(draw_betabinomial(50, 0.4, d, rng).unwrap())).collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        draws.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64
    };
    let (binomial, inflated) = (var(0.0, &mut rng), var(0.1, &mut rng));
    assert!((binomial / 12.0 - 1.0).abs() < 0.05, "{binomial}");
    // 1 + 49·0.1 = 5.9.
    assert!((inflated / (12.0 * 5.9) - 1.0).abs() < 0.06, "{inflated}");
}

#[test]
fn survey_weights_estimate_stratum_size() {
    let mut config = ScenarioConfig::ten_provinces(10, 8);
    config.areas.truncate(3);
    let population = scenario_population(&config).unwrap();
    let surveys = 400;
    let mut totals: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in 0..surveys {
        let ds = draw_survey(&population, &config, 1000 + s).unwrap();
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        for u in ds.units() {
            *sums.entry(u.stratum_id.to_string()).or_default() += u.weight;
        }
        for (k, v) in sums {
            totals.entry(k).or_default().push(v);
        }
    }
    for area in &config.areas {
        let target = population.area_sizes[&id(area.id.as_str())];
        let v = &totals[area.stratum_id()];
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let se = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64 / v.len() as f64).sqrt();
        assert!((mean - target).abs() < 3.0 * se, "{}: {mean} vs {target} (se {se})", area.id);
    }
}

#[test]
fn same_seed_same_survey() {
    let config = ScenarioConfig::ten_provinces(6, 5);
    let frame = build_frame(&config, 4).unwrap();
    let population = generate_population(&frame, &config, 4).unwrap();
    let a = draw_survey(&population, &config, 9).unwrap();
    assert_eq!(a.units(), draw_survey(&population, &config, 9).unwrap().units());
    assert_ne!(a.units(), draw_survey(&population, &config, 10).unwrap().units());
    assert_eq!(a.psu_ids().len(), 60);
}

fn one_replicate_config() -> ScenarioConfig {
    let mut config = ScenarioConfig::ten_provinces(10, 10);
    config.areas.truncate(4);
    config.replicates = 1;
    let mut fh = ModelSpec::fay_herriot("FH", 1.0, 0.01).unwrap();
    let mut bb = ModelSpec::beta_binomial("BB", 1.0, 0.01).unwrap();
    fh.mc.draws = 500;
    bb.mc.draws = 500;
    config.models = vec![fh, bb];
    config.pairs = vec![PairConfig { a: "FH".into(), b: "BB".into() }];
    config.loao_models = vec!["BB".into()];
    config
}

#[test]
fn single_replicate_fills_every_field() {
    let config = one_replicate_config();
    let report = run_study(&config, 1).unwrap();
    assert_eq!(report.summary.replicates_completed, 1);
    assert!(report.summary.failures.is_empty());
    let r = &report.replicates[0];
    assert_eq!(r.models.len(), 2);
    assert_eq!(r.pairs.len(), 1);
    assert_eq!(r.areas.len(), 4);
    for m in &r.models {
        assert!(m.full_oracle.is_finite() && m.train_oracle.is_finite() && m.naive.is_finite() && m.adjusted.is_finite());
    }
    assert!(r.models[1].loao.is_some() && r.models[0].loao.is_none());
    for a in &r.areas {
        assert!(a.scored && a.direct.is_some() && a.direct_variance.unwrap() > 0.0);
        assert!(a.models.iter().all(|m| m.mean > 0.0 && m.mean < 1.0 && m.variance > 0.0));
        assert!(a.models[1].loao_prediction.is_some());
    }
    let v = &r.pairs[0].verdict;
    assert!(v.threshold >= 0.0 && v.difference.is_finite());
    // Too few replicates for the remainder check.
    assert!(report.summary.remainder.is_empty());

    let again = run_study(&config, 2).unwrap();
    assert_eq!(again.replicates, report.replicates);
    assert_eq!(again.summary_json().unwrap(), report.summary_json().unwrap());
}

fn synthetic_replicates(n: usize, loao_equals_mean: bool) -> Vec<ReplicateResult> {
    let mut rng = rng_from_seed(3);
    use rand::Rng;
    (0..n)
        .map(|r| {
            let areas = (0..3)
                .map(|i| {
                    let mean = 0.5 + 0.1 * rng.random::<f64>();
                    let model = AreaModel {
                        mean,
                        variance: 1e-3,
                        full_error: 0.0,
                        train_error: 0.0,
                        train_bias: rng.random::<f64>() - 0.5,
                        naive: 0.0,
                        adjusted: 0.0,
                        loao_prediction: Some(if loao_equals_mean { mean } else { mean + 0.05 }),
                    };
                    AreaReplicate {
                        area: id(format!("A{i}")),
                        truth: 0.55,
                        q: 1.0 / 3.0,
                        scored: true,
                        direct: Some(mean),
                        direct_variance: Some(2e-3),
                        held_out_bias: rng.random::<f64>() - 0.5,
                        models: vec![model.clone(), model],
                    }
                })
                .collect();
            ReplicateResult { replicate: r, seed: r as u64, models: vec![], pairs: vec![], areas }
        })
        .collect()
}

#[test]
fn remainder_of_a_model_against_itself_is_zero() {
    let names = vec!["a".to_string(), "b".to_string()];
    let reps = synthetic_replicates(30, true);
    let report = remainder_check(&names, &reps, "a", "b").unwrap();
    assert_eq!(report.areas.len(), 3);
    assert!(report.areas.iter().all(|a| a.remainder_estimate == 0.0 && a.replicates == 30));
    assert_eq!(report.median_violations, 0);
    assert!(remainder_check(&names, &reps[..29], "a", "b").is_err());
    assert!(remainder_check(&names, &reps, "a", "c").is_err());
}

#[test]
fn loao_gap_vanishes_when_predictions_equal_fits() {
    let names = vec!["a".to_string(), "b".to_string()];
    let report = loao_gap_check(&names, &synthetic_replicates(10, true), "a").unwrap();
    assert_eq!(report.aggregated_gap, 0.0);
    for a in &report.areas {
        assert_eq!(a.mse_difference, 0.0);
        assert!(a.agrees);
    }
    // A constant offset: mse gap = squared-bias gap exactly, variance gap 0.
    let report = loao_gap_check(&names, &synthetic_replicates(10, false), "a").unwrap();
    for a in &report.areas {
        assert!(a.variance_difference.abs() < 1e-12);
        assert!((a.mse_difference - a.squared_bias_difference).abs() < 1e-12);
        assert!(a.agrees);
    }
}
