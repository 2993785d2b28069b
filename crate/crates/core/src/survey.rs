//! Survey microdata: unit records, the nested design index, area aggregation
//! weights, CSV ingestion and export.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Opaque identifier. Ordering is lexicographic.
pub type Id = Arc<str>;

pub fn id(s: impl AsRef<str>) -> Id {
    Arc::from(s.as_ref())
}

/// One sampled respondent.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub unit_id: Id,
    pub stratum_id: Id,
    pub psu_id: Id,
    pub ssu_id: Id,
    pub area_id: Id,
    /// Design weight, the inverse inclusion probability.
    pub weight: f64,
    pub y: u8,
}

/// stratum → PSU → SSU → row indices into [`SurveyDataset::units`].
pub type DesignIndex = BTreeMap<Id, BTreeMap<Id, BTreeMap<Id, Vec<usize>>>>;

/// Identifier tables shared by a dataset and every restriction of it.
#[derive(Debug)]
struct Layout {
    areas: Vec<Id>,
    strata: Vec<Id>,
    psus: Vec<Id>,
    psu_stratum: Vec<usize>,
    psu_area: Vec<usize>,
    ssus: Vec<(usize, Id)>,
}

/// An immutable, validated survey sample.
///
/// The area universe may contain areas without sampled units; those are kept
/// through every restriction so that models still predict them.
#[derive(Debug, Clone)]
pub struct SurveyDataset {
    units: Vec<UnitRecord>,
    layout: Arc<Layout>,
    row_area: Vec<u32>,
    row_psu: Vec<u32>,
    row_ssu: Vec<u32>,
    metadata: BTreeMap<String, String>,
    explicit_unit_ids: bool,
    index: OnceLock<DesignIndex>,
}

impl SurveyDataset {
    /// Validates `units` and builds the design index. `declared_areas` adds
    /// areas to the universe that may have no sampled units.
    pub fn new(units: Vec<UnitRecord>, declared_areas: &[Id]) -> Result<Self> {
        for (row, u) in units.iter().enumerate() {
            if !(u.weight.is_finite() && u.weight > 0.0) {
                return Err(domain(format!(
                    "row {row}: weight must be positive and finite, got {}",
                    u.weight
                )));
            }
            if u.y > 1 {
                return Err(domain(format!("row {row}: outcome must be 0 or 1, got {}", u.y)));
            }
        }

        let areas: Vec<Id> = units
            .iter()
            .map(|u| u.area_id.clone())
            .chain(declared_areas.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if areas.is_empty() {
            return Err(domain("dataset has no areas"));
        }
        let strata: Vec<Id> = units
            .iter()
            .map(|u| u.stratum_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();

        // PSU → (stratum, area), rejecting clusters that straddle either.
        let mut psu_home: BTreeMap<Id, (Id, Id)> = BTreeMap::new();
        for u in &units {
            match psu_home.get(&u.psu_id) {
                Some((s, a)) => {
                    if *s != u.stratum_id {
                        return Err(Error::Consistency(format!(
                            "cluster {} appears in strata {} and {}",
                            u.psu_id, s, u.stratum_id
                        )));
                    }
                    if *a != u.area_id {
                        return Err(Error::Consistency(format!(
                            "cluster {} appears in areas {} and {}",
                            u.psu_id, a, u.area_id
                        )));
                    }
                }
                None => {
                    psu_home.insert(u.psu_id.clone(), (u.stratum_id.clone(), u.area_id.clone()));
                }
            }
        }

        let area_pos: HashMap<&Id, usize> = areas.iter().enumerate().map(|(i, a)| (a, i)).collect();
        let stratum_pos: HashMap<&Id, usize> =
            strata.iter().enumerate().map(|(i, s)| (s, i)).collect();
        let psus: Vec<Id> = psu_home.keys().cloned().collect();
        let psu_stratum: Vec<usize> = psu_home.values().map(|(s, _)| stratum_pos[s]).collect();
        let psu_area: Vec<usize> = psu_home.values().map(|(_, a)| area_pos[a]).collect();
        let psu_pos: HashMap<&Id, usize> = psus.iter().enumerate().map(|(i, p)| (p, i)).collect();

        let ssu_set: BTreeSet<(usize, Id)> = units
            .iter()
            .map(|u| (psu_pos[&u.psu_id], u.ssu_id.clone()))
            .collect();
        let ssus: Vec<(usize, Id)> = ssu_set.into_iter().collect();
        let ssu_pos: HashMap<(usize, &Id), usize> = ssus
            .iter()
            .enumerate()
            .map(|(i, (p, s))| ((*p, s), i))
            .collect();

        let mut seen: BTreeSet<(usize, &Id)> = BTreeSet::new();
        let mut row_area = Vec::with_capacity(units.len());
        let mut row_psu = Vec::with_capacity(units.len());
        let mut row_ssu = Vec::with_capacity(units.len());
        for u in &units {
            let p = psu_pos[&u.psu_id];
            let s = ssu_pos[&(p, &u.ssu_id)];
            if !seen.insert((s, &u.unit_id)) {
                return Err(domain(format!(
                    "duplicate unit {} in cluster {} household {}",
                    u.unit_id, u.psu_id, u.ssu_id
                )));
            }
            row_area.push(area_pos[&u.area_id] as u32);
            row_psu.push(p as u32);
            row_ssu.push(s as u32);
        }

        Ok(SurveyDataset {
            units,
            layout: Arc::new(Layout { areas, strata, psus, psu_stratum, psu_area, ssus }),
            row_area,
            row_psu,
            row_ssu,
            metadata: BTreeMap::new(),
            explicit_unit_ids: true,
            index: OnceLock::new(),
        })
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// The area universe in identifier order.
    pub fn area_ids(&self) -> &[Id] {
        &self.layout.areas
    }

    pub fn n_areas(&self) -> usize {
        self.layout.areas.len()
    }

    pub fn area_index(&self, area: &str) -> Option<usize> {
        self.layout.areas.binary_search_by(|a| (**a).cmp(area)).ok()
    }

    pub fn strata_ids(&self) -> &[Id] {
        &self.layout.strata
    }

    /// Every PSU known to the layout, including ones with no rows after a
    /// restriction.
    pub fn psu_ids(&self) -> &[Id] {
        &self.layout.psus
    }

    pub fn psu_stratum(&self, psu: usize) -> usize {
        self.layout.psu_stratum[psu]
    }

    pub fn psu_area(&self, psu: usize) -> usize {
        self.layout.psu_area[psu]
    }

    pub fn n_ssu_codes(&self) -> usize {
        self.layout.ssus.len()
    }

    pub fn ssu_key(&self, code: usize) -> (&Id, &Id) {
        let (p, s) = &self.layout.ssus[code];
        (&self.layout.psus[*p], s)
    }

    pub fn row_area(&self, row: usize) -> usize {
        self.row_area[row] as usize
    }

    pub fn row_psu(&self, row: usize) -> usize {
        self.row_psu[row] as usize
    }

    pub fn row_ssu(&self, row: usize) -> usize {
        self.row_ssu[row] as usize
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub(crate) fn set_explicit_unit_ids(&mut self, explicit: bool) {
        self.explicit_unit_ids = explicit;
    }

    pub fn design_index(&self) -> &DesignIndex {
        self.index.get_or_init(|| {
            let mut idx: DesignIndex = BTreeMap::new();
            for (row, u) in self.units.iter().enumerate() {
                idx.entry(u.stratum_id.clone())
                    .or_default()
                    .entry(u.psu_id.clone())
                    .or_default()
                    .entry(u.ssu_id.clone())
                    .or_default()
                    .push(row);
            }
            idx
        })
    }

    /// Number of sampled units per area, aligned with [`Self::area_ids`].
    pub fn area_unit_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_areas()];
        for &a in &self.row_area {
            counts[a as usize] += 1;
        }
        counts
    }

    /// Areas of the universe with no sampled units.
    pub fn empty_areas(&self) -> Vec<Id> {
        self.area_unit_counts()
            .iter()
            .zip(self.area_ids())
            .filter(|(c, _)| **c == 0)
            .map(|(_, a)| a.clone())
            .collect()
    }

    /// Keeps the rows for which `keep(row)` holds. Layout, area universe and
    /// metadata are shared with the parent.
    pub fn restrict(&self, mut keep: impl FnMut(usize) -> bool) -> SurveyDataset {
        let rows: Vec<usize> = (0..self.units.len()).filter(|&r| keep(r)).collect();
        SurveyDataset {
            units: rows.iter().map(|&r| self.units[r].clone()).collect(),
            layout: Arc::clone(&self.layout),
            row_area: rows.iter().map(|&r| self.row_area[r]).collect(),
            row_psu: rows.iter().map(|&r| self.row_psu[r]).collect(),
            row_ssu: rows.iter().map(|&r| self.row_ssu[r]).collect(),
            metadata: self.metadata.clone(),
            explicit_unit_ids: self.explicit_unit_ids,
            index: OnceLock::new(),
        }
    }

    /// Drops every unit of `area`; the area stays in the universe.
    pub fn without_area(&self, area: usize) -> SurveyDataset {
        self.restrict(|r| self.row_area(r) != area)
    }

    /// Counts at every level of the design, plus empty-area warnings.
    pub fn validation_report(&self) -> ValidationReport {
        let mut strata = BTreeMap::new();
        let mut psus = BTreeMap::new();
        for (s, psu_map) in self.design_index() {
            let mut counts = StratumCounts::default();
            for (p, ssu_map) in psu_map {
                counts.psus += 1;
                counts.ssus += ssu_map.len();
                let n: usize = ssu_map.values().map(Vec::len).sum();
                counts.units += n;
                psus.insert(p.clone(), n);
            }
            strata.insert(s.clone(), counts);
        }
        let mut areas: BTreeMap<Id, AreaCounts> =
            self.area_ids().iter().map(|a| (a.clone(), AreaCounts::default())).collect();
        let mut psu_seen = vec![false; self.layout.psus.len()];
        for row in 0..self.len() {
            let entry = areas.get_mut(&self.area_ids()[self.row_area(row)]).expect("area in layout");
            entry.units += 1;
            let p = self.row_psu(row);
            if !psu_seen[p] {
                psu_seen[p] = true;
                entry.psus += 1;
            }
        }
        let empty_areas = self.empty_areas();
        let warnings = empty_areas.iter().map(|a| format!("area {a} has no sampled units")).collect();
        ValidationReport { n_units: self.len(), strata, psus, areas, empty_areas, warnings }
    }

    /// Writes the dataset in the flat CSV schema.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["stratum", "psu", "ssu", "area", "weight", "y"];
        if self.explicit_unit_ids {
            header.push("unit");
        }
        w.write_record(&header)?;
        for u in &self.units {
            let weight = u.weight.to_string();
            let y = u.y.to_string();
            let mut rec: Vec<&str> =
                vec![&u.stratum_id, &u.psu_id, &u.ssu_id, &u.area_id, &weight, &y];
            if self.explicit_unit_ids {
                rec.push(&u.unit_id);
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StratumCounts {
    pub psus: usize,
    pub ssus: usize,
    pub units: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AreaCounts {
    pub psus: usize,
    pub units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_units: usize,
    pub strata: BTreeMap<Id, StratumCounts>,
    pub psus: BTreeMap<Id, usize>,
    pub areas: BTreeMap<Id, AreaCounts>,
    pub empty_areas: Vec<Id>,
    pub warnings: Vec<String>,
}

/// Column names of the input table. `unit` is optional; without it each row
/// gets its line number as unit identifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvColumns {
    pub stratum: String,
    pub psu: String,
    pub ssu: String,
    pub area: String,
    pub weight: String,
    pub y: String,
    pub unit: Option<String>,
}

impl Default for CsvColumns {
    fn default() -> Self {
        CsvColumns {
            stratum: "stratum".into(),
            psu: "psu".into(),
            ssu: "ssu".into(),
            area: "area".into(),
            weight: "weight".into(),
            y: "y".into(),
            unit: Some("unit".into()),
        }
    }
}

/// Reads a survey table. Rows keep their input order.
pub fn load_survey<R: Read>(source: R, columns: &CsvColumns, declared_areas: &[Id]) -> Result<SurveyDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse { line: 1, message: format!("missing column `{name}`") })
    };
    let c_stratum = find(&columns.stratum)?;
    let c_psu = find(&columns.psu)?;
    let c_ssu = find(&columns.ssu)?;
    let c_area = find(&columns.area)?;
    let c_weight = find(&columns.weight)?;
    let c_y = find(&columns.y)?;
    let c_unit = columns.unit.as_deref().and_then(|u| headers.iter().position(|h| h == u));

    let mut interner: HashMap<String, Id> = HashMap::new();
    let mut intern = |s: &str| -> Id {
        if let Some(v) = interner.get(s) {
            return v.clone();
        }
        let v = id(s);
        interner.insert(s.to_owned(), v.clone());
        v
    };

    let mut units = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::Parse { line, message: e.to_string() }
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |c: usize| -> Result<&str> {
            record
                .get(c)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::Parse { line, message: format!("empty field in column {}", headers.get(c).unwrap_or("?")) })
        };
        let weight: f64 = field(c_weight)?
            .parse()
            .map_err(|_| Error::Parse { line, message: format!("weight `{}` is not a number", record.get(c_weight).unwrap_or("")) })?;
        if !(weight.is_finite() && weight > 0.0) {
            return Err(domain(format!("line {line}: weight must be positive, got {weight}")));
        }
        let y_raw: f64 = field(c_y)?
            .parse()
            .map_err(|_| Error::Parse { line, message: format!("outcome `{}` is not a number", record.get(c_y).unwrap_or("")) })?;
        let y = if y_raw == 0.0 {
            0
        } else if y_raw == 1.0 {
            1
        } else {
            return Err(domain(format!("line {line}: outcome must be 0 or 1, got {y_raw}")));
        };
        let unit_id = match c_unit {
            Some(c) => intern(field(c)?),
            None => id(line.to_string()),
        };
        units.push(UnitRecord {
            unit_id,
            stratum_id: intern(field(c_stratum)?),
            psu_id: intern(field(c_psu)?),
            ssu_id: intern(field(c_ssu)?),
            area_id: intern(field(c_area)?),
            weight,
            y,
        });
    }
    let mut ds = SurveyDataset::new(units, declared_areas)?;
    ds.set_explicit_unit_ids(c_unit.is_some());
    for a in ds.empty_areas() {
        log::warn!("area {a} has no sampled units");
    }
    Ok(ds)
}

pub fn load_survey_path(path: impl AsRef<Path>, columns: &CsvColumns) -> Result<SurveyDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    load_survey(file, columns, &[]).map(|d| d.with_metadata("source", path.display().to_string()))
}

/// Multiplies every design weight by `factor`.
pub fn rescale_weights(dataset: &SurveyDataset, factor: f64) -> Result<SurveyDataset> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(domain(format!("rescale factor must be positive, got {factor}")));
    }
    let mut out = dataset.clone();
    for u in &mut out.units {
        u.weight *= factor;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Equal,
    Population,
}

/// Aggregation weights over areas; nonnegative and summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaWeights {
    q: BTreeMap<Id, f64>,
}

impl AreaWeights {
    pub fn equal(areas: &[Id]) -> Result<Self> {
        if areas.is_empty() {
            return Err(domain("no areas to weight"));
        }
        let w = 1.0 / areas.len() as f64;
        Ok(AreaWeights { q: areas.iter().map(|a| (a.clone(), w)).collect() })
    }

    /// q_i proportional to `counts`.
    pub fn proportional(counts: &BTreeMap<Id, f64>) -> Result<Self> {
        let total: f64 = counts.values().sum();
        if counts.values().any(|c| !(c.is_finite() && *c >= 0.0)) || !(total > 0.0) {
            return Err(domain("population counts must be nonnegative with a positive total"));
        }
        Ok(AreaWeights { q: counts.iter().map(|(a, c)| (a.clone(), c / total)).collect() })
    }

    pub fn get(&self, area: &str) -> Option<f64> {
        self.q.get(area).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Id, f64)> {
        self.q.iter().map(|(a, w)| (a, *w))
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.q.values().sum()
    }

    /// Restricts to `areas` and renormalises to sum to one.
    pub fn restricted<'a>(&self, areas: impl IntoIterator<Item = &'a Id>) -> Result<Self> {
        let mut q = BTreeMap::new();
        for a in areas {
            let w = self
                .get(a)
                .ok_or_else(|| domain(format!("area {a} has no aggregation weight")))?;
            q.insert(a.clone(), w);
        }
        let total: f64 = q.values().sum();
        if !(total > 0.0) {
            return Err(domain("restricted aggregation weights have zero total"));
        }
        q.values_mut().for_each(|w| *w /= total);
        Ok(AreaWeights { q })
    }
}

/// Builds aggregation weights over the dataset's area universe.
pub fn area_weights(
    mode: WeightMode,
    dataset: &SurveyDataset,
    pop_counts: Option<&BTreeMap<Id, f64>>,
) -> Result<AreaWeights> {
    match mode {
        WeightMode::Equal => AreaWeights::equal(dataset.area_ids()),
        WeightMode::Population => {
            let counts = pop_counts.ok_or_else(|| domain("population weights need area counts"))?;
            let mut selected = BTreeMap::new();
            for a in dataset.area_ids() {
                let n = *counts
                    .get(a)
                    .ok_or_else(|| domain(format!("population counts missing area {a}")))?;
                if !(n > 0.0) {
                    return Err(domain(format!("population count for area {a} must be positive")));
                }
                selected.insert(a.clone(), n);
            }
            AreaWeights::proportional(&selected)
        }
    }
}

/// Σ_j w_j per area; estimates area population sizes.
pub fn weighted_area_totals(dataset: &SurveyDataset) -> BTreeMap<Id, f64> {
    let mut totals = vec![0.0; dataset.n_areas()];
    for (row, u) in dataset.units().iter().enumerate() {
        totals[dataset.row_area(row)] += u.weight;
    }
    dataset.area_ids().iter().cloned().zip(totals).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn unit(stratum: &str, psu: &str, ssu: &str, area: &str, w: f64, y: u8) -> UnitRecord {
        UnitRecord {
            unit_id: id("1"),
            stratum_id: id(stratum),
            psu_id: id(psu),
            ssu_id: id(ssu),
            area_id: id(area),
            weight: w,
            y,
        }
    }

    const SMALL: &str = "stratum,psu,ssu,area,weight,y\n\
        s1,c1,h1,A,1,1\n\
        s1,c1,h2,A,1,0\n\
        s1,c1,h3,A,1,1\n\
        s1,c1,h4,A,1,0\n\
        s1,c1,h5,A,1,1\n";

    #[test]
    fn loads_small_table() {
        let ds = load_survey(SMALL.as_bytes(), &CsvColumns::default(), &[]).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.n_areas(), 1);
        assert_eq!(ds.units()[2].ssu_id.as_ref(), "h3");
        assert_eq!(ds.units()[0].unit_id.as_ref(), "2");
    }

    #[test]
    fn rejects_non_binary_outcome_with_line() {
        let bad = "stratum,psu,ssu,area,weight,y\ns,c,h1,A,1,1\ns,c,h2,A,1,2\n";
        let err = load_survey(bad.as_bytes(), &CsvColumns::default(), &[]).unwrap_err();
        assert!(matches!(err, Error::Domain(ref m) if m.contains("line 3")), "{err}");
    }

    #[test]
    fn rejects_nonpositive_weight() {
        let bad = "stratum,psu,ssu,area,weight,y\ns,c,h1,A,0,1\n";
        assert!(matches!(
            load_survey(bad.as_bytes(), &CsvColumns::default(), &[]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn malformed_row_is_parse_error() {
        let bad = "stratum,psu,ssu,area,weight,y\ns,c,h1,A,abc,1\n";
        let err = load_survey(bad.as_bytes(), &CsvColumns::default(), &[]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn straddling_cluster_names_the_cluster() {
        let bad = "stratum,psu,ssu,area,weight,y\ns,c9,h1,A,1,1\ns,c9,h2,B,1,0\n";
        let err = load_survey(bad.as_bytes(), &CsvColumns::default(), &[]).unwrap_err();
        assert!(matches!(err, Error::Consistency(ref m) if m.contains("c9")), "{err}");
    }

    #[test]
    fn duplicate_units_rejected() {
        let bad = "stratum,psu,ssu,area,weight,y,unit\ns,c,h1,A,1,1,u1\ns,c,h1,A,1,0,u1\n";
        assert!(load_survey(bad.as_bytes(), &CsvColumns::default(), &[]).is_err());
    }

    #[test]
    fn custom_column_mapping() {
        let text = "region,cluster,hh,strat,wt,lit\nA,c1,h1,s,2.5,1\nB,c2,h1,s,1.5,0\n";
        let cols = CsvColumns {
            stratum: "strat".into(),
            psu: "cluster".into(),
            ssu: "hh".into(),
            area: "region".into(),
            weight: "wt".into(),
            y: "lit".into(),
            unit: None,
        };
        let ds = load_survey(text.as_bytes(), &cols, &[]).unwrap();
        assert_eq!(ds.area_ids().len(), 2);
        assert_eq!(ds.units()[0].weight, 2.5);
    }

    #[test]
    fn export_round_trip() {
        let ds = load_survey(SMALL.as_bytes(), &CsvColumns::default(), &[]).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = load_survey(buf.as_slice(), &CsvColumns::default(), &[]).unwrap();
        assert_eq!(back.units(), ds.units());
    }

    #[test]
    fn declared_empty_area_is_kept() {
        let ds = SurveyDataset::new(vec![unit("s", "c", "h", "A", 1.0, 1)], &[id("B")]).unwrap();
        assert_eq!(ds.n_areas(), 2);
        assert_eq!(ds.empty_areas(), vec![id("B")]);
        let report = ds.validation_report();
        assert_eq!(report.areas[&id("B")].units, 0);
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn equal_and_population_weights() {
        let ds = SurveyDataset::new(
            (0..10).map(|i| unit("s", &format!("c{i}"), "h", &format!("A{i}"), 1.0, 0)).collect(),
            &[],
        )
        .unwrap();
        let q = area_weights(WeightMode::Equal, &ds, None).unwrap();
        assert!(q.iter().all(|(_, w)| (w - 0.1).abs() < 1e-15));

        let ds2 = SurveyDataset::new(
            vec![unit("s", "c1", "h", "A", 1.0, 0), unit("s", "c2", "h", "B", 1.0, 1)],
            &[],
        )
        .unwrap();
        let counts: BTreeMap<Id, f64> = [(id("A"), 300.0), (id("B"), 700.0)].into_iter().collect();
        let q = area_weights(WeightMode::Population, &ds2, Some(&counts)).unwrap();
        assert!((q.get("A").unwrap() - 0.3).abs() < 1e-15);
        assert!((q.get("B").unwrap() - 0.7).abs() < 1e-15);

        let partial: BTreeMap<Id, f64> = [(id("A"), 300.0)].into_iter().collect();
        let err = area_weights(WeightMode::Population, &ds2, Some(&partial)).unwrap_err();
        assert!(err.to_string().contains('B'));
    }

    #[test]
    fn rescale_identity_and_errors() {
        let ds = load_survey(SMALL.as_bytes(), &CsvColumns::default(), &[]).unwrap();
        assert_eq!(rescale_weights(&ds, 1.0).unwrap().units(), ds.units());
        assert!(rescale_weights(&ds, 0.0).is_err());
        assert!(rescale_weights(&ds, -2.0).is_err());
    }

    #[test]
    fn design_index_matches_units() {
        let ds = load_survey(SMALL.as_bytes(), &CsvColumns::default(), &[]).unwrap();
        let total: usize = ds
            .design_index()
            .values()
            .flat_map(|p| p.values())
            .flat_map(|s| s.values())
            .map(Vec::len)
            .sum();
        assert_eq!(total, ds.len());
    }
}
