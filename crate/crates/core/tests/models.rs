use rand::Rng;
use saecv_core::models::beta_binomial::{laplace_node, BetaBinomialData};
use saecv_core::models::{pc_rate, predict_held_out_area, AreaEstimator, ModelSpec};
use saecv_core::rng::rng_from_seed;
use saecv_core::sim::study::scenario_population;
use saecv_core::sim::{draw_survey, ScenarioConfig};
use saecv_core::survey::{id, SurveyDataset, UnitRecord};

const INTERCEPT_SD: f64 = 1000.0;

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Penalised log-likelihood of a logistic random-intercept model with one
/// Bernoulli unit per cluster, maximised one coordinate at a time with 1-D
/// Newton steps. `units[a]` lists the outcomes of area a.
fn random_intercept_mode(units: &[Vec<u8>], sigma: f64) -> Vec<f64> {
    let mut x = vec![0.0; units.len() + 1];
    let s2 = sigma * sigma;
    for _sweep in 0..10_000 {
        let mut biggest = 0.0f64;
        // Intercept.
        for _ in 0..50 {
            let (mut g, mut h) = (-x[0] / (INTERCEPT_SD * INTERCEPT_SD), -1.0 / (INTERCEPT_SD * INTERCEPT_SD));
            for (a, ys) in units.iter().enumerate() {
                let p = expit(x[0] + x[a + 1]);
                for &y in ys {
                    g += f64::from(y) - p;
                    h -= p * (1.0 - p);
                }
            }
            x[0] -= g / h;
            biggest = biggest.max(g.abs());
            if g.abs() < 1e-13 {
                break;
            }
        }
        for (a, ys) in units.iter().enumerate() {
            for _ in 0..50 {
                let p = expit(x[0] + x[a + 1]);
                let g = ys.iter().map(|&y| f64::from(y) - p).sum::<f64>() - x[a + 1] / s2;
                let h = -(ys.len() as f64) * p * (1.0 - p) - 1.0 / s2;
                x[a + 1] -= g / h;
                biggest = biggest.max(g.abs());
                if g.abs() < 1e-13 {
                    break;
                }
            }
        }
        if biggest < 1e-11 {
            return x;
        }
    }
    panic!("coordinate ascent did not converge");
}

#[test]
fn pc_prior_rates() {
    // exp(−λU) = α ⇒ λ = −ln α / U.
    assert!((pc_rate(1.0, 0.01).unwrap() - 4.605_170_185_988_091).abs() < 1e-12);
    assert!((pc_rate(0.01, 0.01).unwrap() - 460.517_018_598_809_1).abs() < 1e-9);
    assert!((pc_rate(1.0, (-1.0f64).exp()).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn laplace_mode_matches_coordinate_ascent() {
    let mut rng = rng_from_seed(17);
    for trial in 0..5 {
        let n_areas = 3 + trial;
        let units: Vec<Vec<u8>> = (0..n_areas)
            .map(|a| {
                let p = 0.2 + 0.6 * a as f64 / n_areas as f64;
                (0..rng.random_range(5..25)).map(|_| u8::from(rng.random_bool(p))).collect()
            })
            .collect();
        let clusters: Vec<(usize, u32, u32)> =
            units.iter().enumerate().flat_map(|(a, ys)| ys.iter().map(move |&y| (a, 1, u32::from(y)))).collect();
        let data = BetaBinomialData::from_clusters(n_areas, &clusters).unwrap();
        for sigma in [0.3, 0.7, 1.5] {
            let node = laplace_node(&data, sigma, 0.0, INTERCEPT_SD, None).unwrap();
            let oracle = random_intercept_mode(&units, sigma);
            for (got, want) in node.mode.iter().zip(&oracle) {
                assert!((got - want).abs() < 1e-6, "sigma {sigma}: {got} vs {want}");
            }
        }
    }
}

fn survey(seed: u64, heterogeneity: f64) -> SurveyDataset {
    let mut config = ScenarioConfig::ten_provinces(15, 20);
    config.cluster_logit_sd = heterogeneity;
    config.master_seed = seed;
    let population = scenario_population(&config).unwrap();
    draw_survey(&population, &config, seed).unwrap()
}

fn spread(means: &[f64]) -> f64 {
    let m = means.iter().sum::<f64>() / means.len() as f64;
    means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / means.len() as f64
}

#[test]
fn informative_prior_shrinks_harder() {
    let ds = survey(4, 0.8);
    let m1 = ModelSpec::beta_binomial("M1", 1.0, 0.01).unwrap();
    let m3 = ModelSpec::beta_binomial("M3", 0.01, 0.01).unwrap();
    let (f1, f3) = (m1.estimate(&ds, 1).unwrap(), m3.estimate(&ds, 1).unwrap());
    assert!(spread(&f3.mean) < spread(&f1.mean));
}

#[test]
fn all_successes_stay_below_one() {
    let units: Vec<UnitRecord> = (0..30)
        .flat_map(|c| {
            (0..5).map(move |h| UnitRecord {
                unit_id: id("1"),
                stratum_id: id("s"),
                psu_id: id(format!("c{c}")),
                ssu_id: id(format!("h{h}")),
                area_id: id(if c < 15 { "full" } else { "mixed" }),
                weight: 1.0,
                y: u8::from(c < 15 || h % 2 == 0),
            })
        })
        .collect();
    let ds = SurveyDataset::new(units, &[]).unwrap();
    let fit = ModelSpec::beta_binomial("bb", 1.0, 0.01).unwrap().estimate(&ds, 0).unwrap();
    let i = fit.index("full").unwrap();
    assert!(fit.mean[i].is_finite() && fit.mean[i] > 0.9 && fit.mean[i] < 1.0);
    assert!(fit.variance[i] > 0.0);
}

#[test]
fn unseen_area_prediction_is_wider_and_smoothed_models_move_less() {
    let ds = survey(9, 0.8);
    let rich = ds.area_unit_counts().iter().enumerate().max_by_key(|(_, n)| **n).unwrap().0;
    let gap = |spec: &ModelSpec| -> f64 {
        let full = spec.estimate(&ds, 3).unwrap();
        // P05 has the highest prevalence, so extrapolating to it is hardest.
        let left_out = ds.area_index("P05").unwrap();
        let partial = spec.estimate(&ds.without_area(left_out), 3).unwrap();
        let (pred, pred_var) = predict_held_out_area(&partial, "P05").unwrap();
        assert!(pred_var >= full.variance[rich], "{}: {pred_var} < {}", spec.name, full.variance[rich]);
        (pred - full.mean[left_out]).abs()
    };
    let m1 = ModelSpec::beta_binomial("M1", 1.0, 0.01).unwrap();
    let m3 = ModelSpec::beta_binomial("M3", 0.01, 0.01).unwrap();
    assert!(gap(&m3) < gap(&m1));
}

#[test]
fn fits_are_bitwise_reproducible() {
    let ds = survey(2, 0.5);
    for spec in [ModelSpec::beta_binomial("bb", 1.0, 0.01).unwrap(), ModelSpec::fay_herriot("fh", 1.0, 0.01).unwrap()] {
        let (a, b) = (spec.estimate(&ds, 77).unwrap(), spec.estimate(&ds, 77).unwrap());
        assert_eq!(a.mean.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.mean.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(
            a.variance.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.variance.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        let c = spec.estimate(&ds, 78).unwrap();
        assert_ne!(a.mean, c.mean, "{}: Monte Carlo seed has no effect", spec.name);
    }
}
