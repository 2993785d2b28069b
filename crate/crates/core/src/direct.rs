//! Hájek direct estimates with stratified ultimate-cluster variances.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::survey::{id, Id, SurveyDataset};

/// Smallest logit-scale variance passed on to area-level models.
pub const LOGIT_VARIANCE_FLOOR: f64 = 1e-8;

/// Treatment of strata that hold a single PSU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SingletonPolicy {
    /// The stratum contributes nothing; a warning is logged.
    #[default]
    Zero,
    /// Singleton strata are merged pairwise in identifier order.
    Collapse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitScale {
    pub point: f64,
    pub variance: f64,
    /// The variance was raised to [`LOGIT_VARIANCE_FLOOR`].
    pub floored: bool,
}

/// Delta-method transform to the logit scale. `None` at the boundary or for
/// zero variance.
pub fn logit_transform(point: f64, variance: f64) -> Option<LogitScale> {
    if !(point > 0.0 && point < 1.0 && variance > 0.0 && variance.is_finite()) {
        return None;
    }
    let pq = point * (1.0 - point);
    let raw = variance / (pq * pq);
    Some(LogitScale {
        point: (point / (1.0 - point)).ln(),
        variance: raw.max(LOGIT_VARIANCE_FLOOR),
        floored: raw < LOGIT_VARIANCE_FLOOR,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectEstimate {
    pub area_id: Id,
    pub point: f64,
    pub variance: f64,
    pub logit: Option<LogitScale>,
    pub n_units: usize,
    pub n_psus: usize,
}

/// Direct estimates aligned with a dataset's area universe; `None` marks an
/// area without sampled units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectEstimates {
    pub areas: Vec<Id>,
    pub estimates: Vec<Option<DirectEstimate>>,
}

impl DirectEstimates {
    pub fn get(&self, area: &str) -> Option<&DirectEstimate> {
        let i = self.areas.binary_search_by(|a| (**a).cmp(area)).ok()?;
        self.estimates[i].as_ref()
    }

    pub fn present(&self) -> impl Iterator<Item = &DirectEstimate> {
        self.estimates.iter().flatten()
    }

    pub fn n_present(&self) -> usize {
        self.present().count()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["area", "point", "variance", "logit_point", "logit_variance", "n_units", "n_psus"])?;
        for (area, est) in self.areas.iter().zip(&self.estimates) {
            match est {
                Some(e) => {
                    let (lp, lv) = match e.logit {
                        Some(l) => (l.point.to_string(), l.variance.to_string()),
                        None => (String::new(), String::new()),
                    };
                    w.write_record([
                        area.to_string(),
                        e.point.to_string(),
                        e.variance.to_string(),
                        lp,
                        lv,
                        e.n_units.to_string(),
                        e.n_psus.to_string(),
                    ])?;
                }
                None => w.write_record([area.as_ref(), "", "", "", "", "0", "0"])?,
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads the table written by [`Self::write_csv`]. Rows with an empty
    /// point are absent areas. Logit columns are recomputed when left empty.
    pub fn read_csv<R: Read>(source: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let mut rows: BTreeMap<Id, Option<DirectEstimate>> = BTreeMap::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let num = |c: usize| -> Result<Option<f64>> {
                match rec.get(c).unwrap_or("") {
                    "" => Ok(None),
                    s => s.parse().map(Some).map_err(|_| Error::Parse {
                        line,
                        message: format!("`{s}` is not a number"),
                    }),
                }
            };
            let count = |c: usize| -> Result<usize> {
                let s = rec.get(c).unwrap_or("0");
                s.parse().map_err(|_| Error::Parse { line, message: format!("`{s}` is not a count") })
            };
            let area = id(rec.get(0).unwrap_or(""));
            let est = match (num(1)?, num(2)?) {
                (Some(point), Some(variance)) => {
                    if !(0.0..=1.0).contains(&point) || !(variance >= 0.0) {
                        return Err(domain(format!("line {line}: point must lie in [0,1] and variance be nonnegative")));
                    }
                    let logit = match (num(3)?, num(4)?) {
                        (Some(p), Some(v)) => Some(LogitScale {
                            point: p,
                            variance: v.max(LOGIT_VARIANCE_FLOOR),
                            floored: v < LOGIT_VARIANCE_FLOOR,
                        }),
                        _ => logit_transform(point, variance),
                    };
                    Some(DirectEstimate {
                        area_id: area.clone(),
                        point,
                        variance,
                        logit,
                        n_units: count(5)?,
                        n_psus: count(6)?,
                    })
                }
                _ => None,
            };
            if rows.insert(area.clone(), est).is_some() {
                return Err(domain(format!("line {line}: area {area} listed twice")));
            }
        }
        Ok(DirectEstimates { areas: rows.keys().cloned().collect(), estimates: rows.into_values().collect() })
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

struct AreaSums {
    weight: Vec<f64>,
    weighted_y: Vec<f64>,
    units: Vec<usize>,
}

fn area_sums(dataset: &SurveyDataset) -> AreaSums {
    let m = dataset.n_areas();
    let mut sums = AreaSums { weight: vec![0.0; m], weighted_y: vec![0.0; m], units: vec![0; m] };
    for (row, u) in dataset.units().iter().enumerate() {
        let a = dataset.row_area(row);
        sums.weight[a] += u.weight;
        sums.weighted_y[a] += u.weight * f64::from(u.y);
        sums.units[a] += 1;
    }
    sums
}

fn require_area(dataset: &SurveyDataset, area: &str) -> Result<usize> {
    dataset
        .area_index(area)
        .ok_or_else(|| domain(format!("area {area} is not in the dataset")))
}

/// Σ w y / Σ w over the sampled units of `area`.
pub fn hajek(dataset: &SurveyDataset, area: &str) -> Result<f64> {
    let a = require_area(dataset, area)?;
    let sums = area_sums(dataset);
    if sums.units[a] == 0 {
        return Err(Error::NoData(area.to_string()));
    }
    Ok(sums.weighted_y[a] / sums.weight[a])
}

/// Design variance of the Hájek estimate for `area`.
pub fn design_variance(dataset: &SurveyDataset, area: &str, policy: SingletonPolicy) -> Result<f64> {
    let a = require_area(dataset, area)?;
    let sums = area_sums(dataset);
    if sums.units[a] == 0 {
        return Err(Error::NoData(area.to_string()));
    }
    Ok(all_variances(dataset, &sums, policy)[a])
}

/// Variance groups: each entry lists the strata pooled into one variance
/// stratum.
fn variance_groups(psus_per_stratum: &[usize], strata: &[Id], policy: SingletonPolicy) -> Vec<Vec<usize>> {
    let mut groups = Vec::new();
    let mut singletons = Vec::new();
    for (h, &n) in psus_per_stratum.iter().enumerate() {
        match n {
            0 => {}
            1 => singletons.push(h),
            _ => groups.push(vec![h]),
        }
    }
    if singletons.is_empty() {
        return groups;
    }
    match policy {
        SingletonPolicy::Collapse if singletons.len() >= 2 => {
            let mut pairs: Vec<Vec<usize>> = singletons.chunks(2).map(<[usize]>::to_vec).collect();
            if pairs.last().is_some_and(|p| p.len() == 1) {
                let odd = pairs.pop().expect("nonempty")[0];
                pairs.last_mut().expect("at least one pair").push(odd);
            }
            groups.extend(pairs);
        }
        _ => {
            let names: Vec<&str> = singletons.iter().map(|&h| strata[h].as_ref()).collect();
            log::warn!("strata with a single PSU contribute zero variance: {}", names.join(", "));
        }
    }
    groups
}

fn all_variances(dataset: &SurveyDataset, sums: &AreaSums, policy: SingletonPolicy) -> Vec<f64> {
    let n_psu_codes = dataset.psu_ids().len();
    // Linearised residual totals per PSU; each PSU lives in one area.
    let mut psu_total = vec![0.0; n_psu_codes];
    let mut psu_seen = vec![false; n_psu_codes];
    for (row, u) in dataset.units().iter().enumerate() {
        let a = dataset.row_area(row);
        let p = dataset.row_psu(row);
        let theta = sums.weighted_y[a] / sums.weight[a];
        psu_total[p] += u.weight * (f64::from(u.y) - theta) / sums.weight[a];
        psu_seen[p] = true;
    }
    let n_strata = dataset.strata_ids().len();
    let mut psus_per_stratum = vec![0usize; n_strata];
    for p in (0..n_psu_codes).filter(|&p| psu_seen[p]) {
        psus_per_stratum[dataset.psu_stratum(p)] += 1;
    }
    let groups = variance_groups(&psus_per_stratum, dataset.strata_ids(), policy);
    let mut group_of = vec![usize::MAX; n_strata];
    for (g, members) in groups.iter().enumerate() {
        for &h in members {
            group_of[h] = g;
        }
    }
    let group_size: Vec<usize> =
        groups.iter().map(|m| m.iter().map(|&h| psus_per_stratum[h]).sum()).collect();

    // Per (group, area): Σ e_c and Σ e_c² over the area's PSUs. PSUs of other
    // areas contribute zeros, which only enter through n_h.
    let m = dataset.n_areas();
    let mut s1: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut s2: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for p in (0..n_psu_codes).filter(|&p| psu_seen[p]) {
        let g = group_of[dataset.psu_stratum(p)];
        if g == usize::MAX {
            continue;
        }
        let key = (g, dataset.psu_area(p));
        *s1.entry(key).or_default() += psu_total[p];
        *s2.entry(key).or_default() += psu_total[p] * psu_total[p];
    }
    let mut var = vec![0.0; m];
    for (&(g, a), &sq) in &s2 {
        let n = group_size[g] as f64;
        let t = s1[&(g, a)];
        var[a] += n / (n - 1.0) * (sq - t * t / n).max(0.0);
    }
    var
}

/// One estimate per area of the universe; absent areas are `None`.
pub fn hajek_all(dataset: &SurveyDataset) -> DirectEstimates {
    hajek_all_with(dataset, SingletonPolicy::default())
}

pub fn hajek_all_with(dataset: &SurveyDataset, policy: SingletonPolicy) -> DirectEstimates {
    let sums = area_sums(dataset);
    let var = all_variances(dataset, &sums, policy);
    let mut psus_in_area = vec![0usize; dataset.n_areas()];
    let mut psu_seen = vec![false; dataset.psu_ids().len()];
    for row in 0..dataset.len() {
        let p = dataset.row_psu(row);
        if !psu_seen[p] {
            psu_seen[p] = true;
            psus_in_area[dataset.psu_area(p)] += 1;
        }
    }
    let estimates = (0..dataset.n_areas())
        .map(|a| {
            if sums.units[a] == 0 {
                return None;
            }
            let point = sums.weighted_y[a] / sums.weight[a];
            Some(DirectEstimate {
                area_id: dataset.area_ids()[a].clone(),
                point,
                variance: var[a],
                logit: logit_transform(point, var[a]),
                n_units: sums.units[a],
                n_psus: psus_in_area[a],
            })
        })
        .collect();
    DirectEstimates { areas: dataset.area_ids().to_vec(), estimates }
}

/// Hájek points only, aligned with the area universe (`None` when absent).
pub fn hajek_points(dataset: &SurveyDataset) -> Vec<Option<f64>> {
    let sums = area_sums(dataset);
    (0..dataset.n_areas())
        .map(|a| (sums.units[a] > 0).then(|| sums.weighted_y[a] / sums.weight[a]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survey::tests::unit;
    use crate::survey::{id, UnitRecord};

    fn ds(units: Vec<UnitRecord>) -> SurveyDataset {
        let units = units
            .into_iter()
            .enumerate()
            .map(|(i, mut u)| {
                u.unit_id = id(i.to_string());
                u
            })
            .collect();
        SurveyDataset::new(units, &[]).unwrap()
    }

    #[test]
    fn hajek_examples() {
        let d = ds(vec![unit("s", "c", "h1", "A", 1.0, 1), unit("s", "c", "h2", "A", 1.0, 1)]);
        assert_eq!(hajek(&d, "A").unwrap(), 1.0);
        let d = ds((0..4).map(|i| unit("s", "c", &format!("h{i}"), "A", 1.0, (i % 2 == 0) as u8)).collect());
        assert_eq!(hajek(&d, "A").unwrap(), 0.5);
        let d = ds(vec![
            unit("s", "c", "h1", "A", 2.0, 1),
            unit("s", "c", "h2", "A", 1.0, 0),
            unit("s", "c", "h3", "A", 1.0, 1),
        ]);
        assert_eq!(hajek(&d, "A").unwrap(), 0.75);
    }

    #[test]
    fn empty_area_is_no_data() {
        let d = SurveyDataset::new(vec![unit("s", "c", "h", "A", 1.0, 1)], &[id("B")]).unwrap();
        assert!(matches!(hajek(&d, "B"), Err(Error::NoData(_))));
        let all = hajek_all(&d);
        assert_eq!(all.n_present(), 1);
        assert!(all.estimates[1].is_none());
    }

    // Two PSUs of five units each, PSU means 0.2 and 0.8, equal weights.
    // θ̂ = 0.5, PSU residual totals ∓0.15, variance = 2·(0.15² + 0.15²) = 0.09.
    #[test]
    fn two_psu_variance_by_hand() {
        let mut units = Vec::new();
        for (psu, ones) in [("c1", 1), ("c2", 4)] {
            for h in 0..5 {
                units.push(unit("s", psu, &format!("h{h}"), "A", 1.0, (h < ones) as u8));
            }
        }
        let d = ds(units);
        let v = design_variance(&d, "A", SingletonPolicy::Zero).unwrap();
        assert!((v - 0.09).abs() < 1e-15, "{v}");
    }

    #[test]
    fn identical_outcomes_have_zero_variance() {
        let d = ds((0..6).map(|i| unit("s", &format!("c{}", i % 3), &format!("h{i}"), "A", 1.0 + i as f64, 1)).collect());
        assert_eq!(design_variance(&d, "A", SingletonPolicy::Zero).unwrap(), 0.0);
    }

    #[test]
    fn singleton_collapse_pairs_strata() {
        let units = vec![
            unit("s1", "c1", "h1", "A", 1.0, 1),
            unit("s1", "c1", "h2", "A", 1.0, 0),
            unit("s2", "c2", "h1", "A", 1.0, 0),
            unit("s2", "c2", "h2", "A", 1.0, 0),
        ];
        let d = ds(units);
        assert_eq!(design_variance(&d, "A", SingletonPolicy::Zero).unwrap(), 0.0);
        // Collapsed: θ̂ = 0.25, PSU totals (0.125, -0.125) in one stratum of two PSUs.
        let v = design_variance(&d, "A", SingletonPolicy::Collapse).unwrap();
        assert!((v - 0.0625).abs() < 1e-15, "{v}");
    }

    #[test]
    fn logit_examples() {
        let l = logit_transform(0.5, 0.01).unwrap();
        assert_eq!(l.point, 0.0);
        assert!((l.variance - 0.16).abs() < 1e-15);
        let a = logit_transform(0.3, 0.01).unwrap();
        let b = logit_transform(0.7, 0.01).unwrap();
        assert!((a.point + b.point).abs() < 1e-15);
        assert!(logit_transform(1.0, 0.01).is_none());
        assert!(logit_transform(0.0, 0.01).is_none());
        assert!(logit_transform(0.4, 0.0).is_none());
        assert!(logit_transform(0.5, 1e-14).unwrap().floored);
    }

    #[test]
    fn csv_round_trip() {
        let d = SurveyDataset::new(
            vec![
                unit("s", "c1", "h1", "A", 1.0, 1),
                unit("s", "c1", "h2", "A", 1.0, 0),
                unit("s", "c2", "h1", "A", 2.0, 1),
            ],
            &[id("B")],
        )
        .unwrap();
        let all = hajek_all(&d);
        let mut buf = Vec::new();
        all.write_csv(&mut buf).unwrap();
        let back = DirectEstimates::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, all);
    }
}
