use std::fmt::Write as _;
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use saecv_core::cv::{compare_detailed, loao_score, Scheme};
use saecv_core::direct::DirectEstimates;
use saecv_core::models::{fit_fay_herriot, AreaEstimator, Family};
use saecv_core::sim::study::{replicate_seed, scenario_population};
use saecv_core::sim::{build_frame, draw_survey, generate_population, run_study, StudySummary, SyntheticPopulation};
use saecv_core::survey::{load_survey_path, weighted_area_totals};
use saecv_core::{area_weights, hajek_all, AreaWeights, SurveyDataset, WeightMode};

use crate::config::{Overrides, StudyConfigFile};

pub struct Context {
    pub config: StudyConfigFile,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Context {
    pub fn new(config_path: &Path, out: Option<&Path>, overrides: Overrides, jobs: usize) -> Result<Self> {
        let mut config = StudyConfigFile::load(config_path)?;
        config.override_with(&overrides)?;
        let out = config.out_dir(out)?;
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        if jobs > 0 {
            // Caps the fold and model fits of compare/fit; study builds its own pool.
            rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().ok();
        }
        Ok(Context { config, out, jobs })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn written(path: &Path) {
    log::info!("wrote {}", path.display());
}

pub fn simulate(ctx: &Context) -> Result<()> {
    let scenario = ctx.config.scenario()?;
    let frame = build_frame(scenario, scenario.master_seed)?;
    let population = generate_population(&frame, scenario, scenario.master_seed)?;
    log::info!("{} frame clusters in {} areas", frame.len(), population.truth.len());
    let p = ctx.path("frame.csv");
    saecv_core::sim::frame::write_frame_csv_path(&frame, &p)?;
    written(&p);
    let p = ctx.path("population.csv");
    population.write_csv_path(&p)?;
    written(&p);
    let p = ctx.path("truth.csv");
    population.write_truth_csv_path(&p)?;
    written(&p);
    let p = ctx.path("scenario.json");
    write_json(&p, scenario)?;
    written(&p);
    Ok(())
}

fn population_for(ctx: &Context, path: Option<&Path>) -> Result<SyntheticPopulation> {
    match path {
        Some(p) => SyntheticPopulation::read_csv_path(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(scenario_population(ctx.config.scenario()?)?),
    }
}

pub fn survey(ctx: &Context, population: Option<&Path>, replicate: usize) -> Result<()> {
    let scenario = ctx.config.scenario()?;
    let population = population_for(ctx, population)?;
    let seed = replicate_seed(scenario.master_seed, replicate);
    let dataset = draw_survey(&population, scenario, seed)?;
    log::info!("replicate {replicate}: {} households from {} clusters", dataset.len(), dataset.psu_ids().len());
    let p = ctx.path("survey.csv");
    dataset.write_csv_path(&p)?;
    written(&p);
    let p = ctx.path("direct.csv");
    hajek_all(&dataset).write_csv_path(&p)?;
    written(&p);
    Ok(())
}

fn load(ctx: &Context, path: &Path) -> Result<SurveyDataset> {
    let ds = load_survey_path(path, &ctx.config.columns).with_context(|| format!("reading {}", path.display()))?;
    let report = ds.validation_report();
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(ds)
}

pub fn fit(ctx: &Context, model: &str, survey: Option<&Path>, direct: Option<&Path>) -> Result<()> {
    let spec = ctx.config.model(model)?;
    let seed = saecv_core::cv::verdict::full_fit_seed(ctx.config.seed);
    let estimates = match (survey, direct) {
        (Some(path), _) => spec.estimate(&load(ctx, path)?, seed)?,
        (None, Some(path)) => {
            if spec.family != Family::FayHerriot {
                bail!("model {model}: only Fay-Herriot models can be fitted to direct estimates");
            }
            let directs = DirectEstimates::read_csv_path(path).with_context(|| format!("reading {}", path.display()))?;
            fit_fay_herriot(&directs, spec, seed)?
        }
        (None, None) => bail!("pass --survey or --direct"),
    };
    if ctx.config.output.csv {
        let p = ctx.path(&format!("{model}_estimates.csv"));
        estimates.write_csv_path(&p)?;
        written(&p);
    }
    if ctx.config.output.json {
        let p = ctx.path(&format!("{model}_hyper.json"));
        write_json(&p, &estimates.hyper_json())?;
        written(&p);
    }
    Ok(())
}

/// Equal weights, or weights proportional to the survey's weighted area
/// totals (the design-based estimate of each area's population).
fn compare_weights(mode: WeightMode, dataset: &SurveyDataset) -> Result<AreaWeights> {
    let totals = weighted_area_totals(dataset);
    Ok(area_weights(mode, dataset, Some(&totals))?)
}

pub fn compare(ctx: &Context, survey: &Path) -> Result<()> {
    let cfg = &ctx.config;
    if cfg.pairs.is_empty() && cfg.loao.is_empty() {
        bail!("nothing to compare: add [[pairs]] or a `loao` list to the configuration");
    }
    if cfg.cv.scheme != Scheme::Twofold && cfg.cv.k < 2 {
        bail!("cv.k must be at least 2");
    }
    let dataset = load(ctx, survey)?;
    let q = compare_weights(cfg.q, &dataset)?;
    for pair in &cfg.pairs {
        let (a, b) = (cfg.model(&pair.a)?, cfg.model(&pair.b)?);
        let comparison = compare_detailed(&dataset, a, b, &cfg.cv, &q, cfg.seed)?;
        let v = &comparison.verdict;
        log::info!(
            "{} vs {}: difference {:.4e}, threshold {:.4e}, {}",
            v.model_a,
            v.model_b,
            v.difference,
            v.threshold,
            v.decision.as_str()
        );
        let stem = format!("{}_vs_{}", pair.a, pair.b);
        if cfg.output.json {
            let p = ctx.path(&format!("{stem}.json"));
            write_json(&p, v)?;
            written(&p);
        }
        if cfg.output.csv {
            let p = ctx.path(&format!("{stem}_areas.csv"));
            v.write_area_csv_path(&p)?;
            written(&p);
            let p = ctx.path(&format!("{stem}_plot.csv"));
            v.write_plot_csv(File::create(&p)?)?;
            written(&p);
        }
    }
    if !cfg.loao.is_empty() {
        let scores = cfg
            .loao
            .iter()
            .map(|name| {
                let score = loao_score(&dataset, cfg.model(name)?, &q, cfg.seed)?;
                log::info!("{name}: leave-one-area-out score {:.4e}", score.aggregated);
                Ok(score)
            })
            .collect::<Result<Vec<_>>>()?;
        if cfg.output.json {
            let p = ctx.path("loao.json");
            write_json(&p, &scores)?;
            written(&p);
        }
    }
    Ok(())
}

pub fn study(ctx: &Context) -> Result<()> {
    let scenario = ctx.config.scenario()?;
    if scenario.models.is_empty() {
        bail!("a study needs at least one model under [models]");
    }
    log::info!(
        "study: {} replicates, {} models, {} pairs, seed {}",
        scenario.replicates,
        scenario.models.len(),
        scenario.pairs.len(),
        scenario.master_seed
    );
    let report = run_study(scenario, ctx.jobs)?;
    let s = &report.summary;
    if !s.failures.is_empty() {
        log::warn!("{} replicates failed and were skipped", s.failures.len());
    }
    for p in &s.pairs {
        log::info!(
            "{} - {}: conclusive in {:.0}% of replicates, sign agrees with the oracle in {:.0}%",
            p.model_a,
            p.model_b,
            100.0 * p.fraction_conclusive,
            100.0 * p.fraction_correct_sign
        );
    }
    let out = &ctx.out;
    if ctx.config.output.csv {
        for (name, write) in [
            ("replicates.csv", saecv_core::sim::StudyReport::write_replicates_csv::<File> as fn(&_, File) -> _),
            ("areas.csv", saecv_core::sim::StudyReport::write_areas_csv::<File>),
            ("models.csv", saecv_core::sim::StudyReport::write_models_csv::<File>),
        ] {
            let p = out.join(name);
            write(&report, File::create(&p)?)?;
            written(&p);
        }
    }
    if ctx.config.output.json {
        let p = out.join("summary.json");
        std::fs::write(&p, report.summary_json()? + "\n")?;
        written(&p);
    }
    Ok(())
}

pub fn report(input: &Path, out: &Path) -> Result<()> {
    let path = input.join("summary.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let summary: StudySummary = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    std::fs::create_dir_all(out)?;
    let p = out.join("report.md");
    std::fs::write(&p, render_report(&summary))?;
    written(&p);
    Ok(())
}

fn render_report(s: &StudySummary) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Study report\n");
    let _ = writeln!(
        md,
        "{} of {} replicates completed ({} failed).\n",
        s.replicates_completed,
        s.replicates_requested,
        s.failures.len()
    );
    let _ = writeln!(md, "## Models\n");
    let _ = writeln!(md, "| model | full-sample MSE | training MSE | mean adjusted score | mean naive score | mean LOAO score |");
    let _ = writeln!(md, "|---|---|---|---|---|---|");
    for m in &s.models {
        let loao = m.mean_loao.map_or("-".to_string(), |x| format!("{x:.4e}"));
        let _ = writeln!(
            md,
            "| {} | {:.4e} | {:.4e} | {:.4e} | {:.4e} | {loao} |",
            m.model, m.full_mse, m.train_mse, m.mean_adjusted, m.mean_naive
        );
    }
    if !s.pairs.is_empty() {
        let _ = writeln!(md, "\n## Comparisons\n");
        let _ = writeln!(md, "| a - b | mean difference | mean threshold | prefer a | prefer b | inconclusive | sign agrees with oracle | naive conclusive |");
        let _ = writeln!(md, "|---|---|---|---|---|---|---|---|");
        for p in &s.pairs {
            let _ = writeln!(
                md,
                "| {} - {} | {:.4e} | {:.4e} | {:.0}% | {:.0}% | {:.0}% | {:.0}% | {:.0}% |",
                p.model_a,
                p.model_b,
                p.mean_difference,
                p.mean_threshold,
                100.0 * p.fraction_prefer_a,
                100.0 * p.fraction_prefer_b,
                100.0 * (1.0 - p.fraction_conclusive),
                100.0 * p.fraction_correct_sign,
                100.0 * p.naive_fraction_conclusive
            );
        }
    }
    for r in &s.remainder {
        let _ = writeln!(
            md,
            "\n{} - {}: remainder estimate above the median per-replicate bound in {} areas, above the largest in {}.",
            r.model_a, r.model_b, r.median_violations, r.max_violations
        );
    }
    for g in &s.loao_gap {
        let agree = g.areas.iter().filter(|a| a.agrees).count();
        let _ = writeln!(
            md,
            "\n{}: leave-one-area-out minus full-sample MSE {:.4e}; decomposition agrees in {agree} of {} areas.",
            g.model,
            g.aggregated_gap,
            g.areas.len()
        );
    }
    md
}
