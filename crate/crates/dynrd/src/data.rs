//! Panel ingestion and cohort event samples.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One unit-period record in long format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub unit_id: String,
    pub period: i64,
    /// Whether a referendum took place.
    pub q_held: bool,
    /// Raw vote margin, present exactly when `q_held`.
    pub r: Option<f64>,
    pub y: f64,
}

impl PanelRow {
    /// Approval indicator. Periods without a referendum count as untreated.
    pub fn treated(&self, cutoff: f64) -> bool {
        self.q_held && self.r.is_some_and(|r| r >= cutoff)
    }
}

/// CSV header names for each panel field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub unit: String,
    pub period: String,
    pub q_held: String,
    pub r: String,
    pub y: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            unit: "unit".into(),
            period: "period".into(),
            q_held: "q_held".into(),
            r: "r".into(),
            y: "y".into(),
        }
    }
}

/// Validated long-format panel, rows sorted by `(unit_id, period)`.
#[derive(Debug, Clone)]
pub struct Panel {
    rows: Vec<PanelRow>,
    spans: Vec<(usize, usize)>,
    t_min: i64,
    t_max: i64,
    cutoff: f64,
    balanced: bool,
}

impl Panel {
    pub fn new(mut rows: Vec<PanelRow>, cutoff: f64) -> Result<Self> {
        if !cutoff.is_finite() {
            return Err(invalid("cutoff must be finite"));
        }
        if rows.is_empty() {
            return Err(invalid("panel has no rows"));
        }
        for row in &rows {
            match (row.q_held, row.r) {
                (false, Some(_)) => {
                    return Err(Error::Consistency {
                        unit: row.unit_id.clone(),
                        period: row.period,
                        message: "vote margin present but no referendum held",
                    })
                }
                (true, None) => {
                    return Err(Error::Consistency {
                        unit: row.unit_id.clone(),
                        period: row.period,
                        message: "referendum held but vote margin missing",
                    })
                }
                (true, Some(r)) if !r.is_finite() => {
                    return Err(Error::Consistency {
                        unit: row.unit_id.clone(),
                        period: row.period,
                        message: "vote margin is not finite",
                    })
                }
                _ => {}
            }
            if !row.y.is_finite() {
                return Err(Error::Consistency {
                    unit: row.unit_id.clone(),
                    period: row.period,
                    message: "outcome is not finite",
                });
            }
        }
        rows.sort_by(|a, b| a.unit_id.cmp(&b.unit_id).then(a.period.cmp(&b.period)));

        let mut spans = Vec::new();
        let mut balanced = true;
        let mut start = 0;
        for i in 1..=rows.len() {
            let boundary = i == rows.len() || rows[i].unit_id != rows[start].unit_id;
            if i < rows.len() && !boundary {
                let (prev, cur) = (&rows[i - 1], &rows[i]);
                if prev.period == cur.period {
                    return Err(Error::Duplicate {
                        unit: cur.unit_id.clone(),
                        period: cur.period,
                    });
                }
                if cur.period != prev.period + 1 {
                    balanced = false;
                }
            }
            if boundary {
                spans.push((start, i));
                start = i;
            }
        }
        let t_min = rows.iter().map(|r| r.period).min().unwrap_or_default();
        let t_max = rows.iter().map(|r| r.period).max().unwrap_or_default();
        Ok(Self {
            rows,
            spans,
            t_min,
            t_max,
            cutoff,
            balanced,
        })
    }

    pub fn rows(&self) -> &[PanelRow] {
        &self.rows
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn period_range(&self) -> (i64, i64) {
        (self.t_min, self.t_max)
    }

    /// True when every unit's periods are contiguous.
    pub fn is_balanced(&self) -> bool {
        self.balanced
    }

    pub fn n_units(&self) -> usize {
        self.spans.len()
    }

    /// Per-unit row slices in unit order.
    pub fn units(&self) -> impl Iterator<Item = &[PanelRow]> + '_ {
        self.spans.iter().map(move |&(a, b)| &self.rows[a..b])
    }

    /// Sub-panel holding only the listed units.
    pub fn restrict_units<S: AsRef<str>>(&self, keep: &[S]) -> Result<Panel> {
        let keep: HashSet<&str> = keep.iter().map(AsRef::as_ref).collect();
        let rows = self
            .rows
            .iter()
            .filter(|r| keep.contains(r.unit_id.as_str()))
            .cloned()
            .collect();
        Panel::new(rows, self.cutoff)
    }
}

fn find_period(unit: &[PanelRow], period: i64) -> Option<&PanelRow> {
    unit.binary_search_by_key(&period, |r| r.period)
        .ok()
        .map(|i| &unit[i])
}

fn parse_bool(raw: &str) -> Option<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "t" | "yes" => Some(true),
        "0" | "false" | "f" | "no" => Some(false),
        _ => None,
    }
}

/// Read a panel from CSV text.
pub fn read_panel<R: Read>(reader: R, schema: &ColumnMap, cutoff: f64) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (cu, cp, cq, cr, cy) = (
        col(&schema.unit)?,
        col(&schema.period)?,
        col(&schema.q_held)?,
        col(&schema.r)?,
        col(&schema.y)?,
    );

    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let bad = |what: &str, raw: &str| Error::Parse {
            line,
            message: format!("cannot parse {what} from `{raw}`"),
        };
        let period = field(cp).parse::<i64>().map_err(|_| bad("period", field(cp)))?;
        let q_held = parse_bool(field(cq)).ok_or_else(|| bad("q_held", field(cq)))?;
        let r = match field(cr) {
            "" | "NA" | "na" | "NaN" => None,
            raw => Some(raw.parse::<f64>().map_err(|_| bad("r", raw))?),
        };
        let y = field(cy).parse::<f64>().map_err(|_| bad("y", field(cy)))?;
        rows.push(PanelRow {
            unit_id: field(cu).to_string(),
            period,
            q_held,
            r,
            y,
        });
    }
    Panel::new(rows, cutoff)
}

pub fn load_panel(path: impl AsRef<Path>, schema: &ColumnMap, cutoff: f64) -> Result<Panel> {
    read_panel(File::open(path)?, schema, cutoff)
}

/// Write a panel as CSV using the given column names.
pub fn write_panel<W: Write>(panel: &Panel, writer: W, schema: &ColumnMap) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([&schema.unit, &schema.period, &schema.q_held, &schema.r, &schema.y])?;
    for row in panel.rows() {
        w.write_record([
            row.unit_id.clone(),
            row.period.to_string(),
            u8::from(row.q_held).to_string(),
            row.r.map(|r| format!("{r:?}")).unwrap_or_default(),
            format!("{:?}", row.y),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A unit retained in an event sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EventUnit {
    pub unit_id: String,
    pub focal_period: i64,
    /// Margin centred at the cutoff.
    pub r: f64,
    /// Outcomes for event times `-k_pre..=tau_max`.
    pub outcomes: Vec<f64>,
    /// Approval indicators for event times `1..=tau_max`.
    pub post_treated: Vec<bool>,
}

/// Cohort cross-section around one or more pooled focal periods.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSample {
    pub focal_periods: Vec<i64>,
    pub k_clean: usize,
    pub tau_max: usize,
    pub k_pre: usize,
    pub units: Vec<EventUnit>,
    /// Cohort members dropped for missing event-time rows.
    pub excluded: Vec<String>,
}

/// What to do with cohort members that lack required rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    #[default]
    Exclude,
    Fail,
}

impl EventSample {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Outcome of unit `i` at event time `s`.
    pub fn outcome(&self, i: usize, s: i64) -> f64 {
        self.units[i].outcomes[(s + self.k_pre as i64) as usize]
    }

    pub fn running(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.r).collect()
    }

    /// Concatenate samples built with identical windows.
    pub fn pool(samples: Vec<EventSample>) -> Result<EventSample> {
        let mut iter = samples.into_iter();
        let mut out = iter
            .next()
            .ok_or_else(|| invalid("cannot pool an empty set of samples"))?;
        for s in iter {
            if (s.k_clean, s.tau_max, s.k_pre) != (out.k_clean, out.tau_max, out.k_pre) {
                return Err(invalid("pooled samples must share k, tau_max and k_pre"));
            }
            if s.focal_periods.iter().any(|g| out.focal_periods.contains(g)) {
                return Err(invalid("focal period pooled twice"));
            }
            out.focal_periods.extend(s.focal_periods);
            out.units.extend(s.units);
            out.excluded.extend(s.excluded);
        }
        Ok(out)
    }

    /// Units appearing under more than one focal period.
    pub fn overlapping_units(&self) -> Vec<String> {
        let mut seen = HashMap::<&str, usize>::new();
        for u in &self.units {
            *seen.entry(u.unit_id.as_str()).or_default() += 1;
        }
        let mut dup: Vec<String> = seen
            .into_iter()
            .filter(|&(_, c)| c > 1)
            .map(|(id, _)| id.to_string())
            .collect();
        dup.sort();
        dup
    }
}

pub fn build_event_sample(
    panel: &Panel,
    g: i64,
    k: usize,
    tau_max: usize,
    k_pre: usize,
) -> Result<EventSample> {
    build_event_sample_with(panel, g, k, tau_max, k_pre, MissingPolicy::Exclude)
}

/// Cohort at focal period `g`: units voting at `g` with no approval in the `k`
/// preceding periods.
pub fn build_event_sample_with(
    panel: &Panel,
    g: i64,
    k: usize,
    tau_max: usize,
    k_pre: usize,
    policy: MissingPolicy,
) -> Result<EventSample> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let (t_min, t_max) = panel.period_range();
    let back = k.max(k_pre) as i64;
    if g - back < t_min {
        return Err(invalid(format!(
            "focal period {g} needs {back} earlier period(s) but the panel starts at {t_min}"
        )));
    }
    if g + tau_max as i64 > t_max {
        return Err(invalid(format!(
            "focal period {g} with tau_max {tau_max} runs past the panel end {t_max}"
        )));
    }
    let cutoff = panel.cutoff();
    let mut units = Vec::new();
    let mut missing = Vec::new();

    'unit: for rows in panel.units() {
        let Some(focal) = find_period(rows, g) else {
            continue;
        };
        if !focal.q_held {
            continue;
        }
        let mut incomplete = false;
        for s in 1..=k as i64 {
            match find_period(rows, g - s) {
                Some(row) if row.treated(cutoff) => continue 'unit,
                Some(_) => {}
                None => incomplete = true,
            }
        }
        let mut outcomes = Vec::with_capacity(k_pre + tau_max + 1);
        let mut post_treated = Vec::with_capacity(tau_max);
        for s in -(k_pre as i64)..=tau_max as i64 {
            match find_period(rows, g + s) {
                Some(row) => {
                    outcomes.push(row.y);
                    if s > 0 {
                        post_treated.push(row.treated(cutoff));
                    }
                }
                None => incomplete = true,
            }
        }
        if incomplete {
            missing.push(focal.unit_id.clone());
            continue;
        }
        let raw = focal.r.expect("held referendum carries a margin");
        units.push(EventUnit {
            unit_id: focal.unit_id.clone(),
            focal_period: g,
            r: raw - cutoff,
            outcomes,
            post_treated,
        });
    }

    if !missing.is_empty() {
        match policy {
            MissingPolicy::Fail => return Err(Error::Balance { units: missing }),
            MissingPolicy::Exclude => log::info!(
                "focal period {g}: {} cohort unit(s) dropped for missing rows",
                missing.len()
            ),
        }
    }
    if units.is_empty() {
        return Err(Error::EmptyCohort { period: g });
    }
    Ok(EventSample {
        focal_periods: vec![g],
        k_clean: k,
        tau_max,
        k_pre,
        units,
        excluded: missing,
    })
}

/// Estimator inputs for one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct RdVectors {
    /// Centred running variable.
    pub running: Vec<f64>,
    /// Focal-period outcome.
    pub outcome: Vec<f64>,
    /// Outcome change over the horizon among units never treated again, zero otherwise.
    pub growth: Vec<f64>,
    /// One when the unit stays untreated for the whole horizon.
    pub never: Vec<f64>,
    pub tau: i64,
}

impl RdVectors {
    pub fn new(
        running: Vec<f64>,
        outcome: Vec<f64>,
        growth: Vec<f64>,
        never: Vec<f64>,
        tau: i64,
    ) -> Result<Self> {
        let n = running.len();
        if outcome.len() != n || growth.len() != n || never.len() != n {
            return Err(invalid("vectors must have equal length"));
        }
        if running
            .iter()
            .chain(&outcome)
            .chain(&growth)
            .any(|x| !x.is_finite())
        {
            return Err(invalid("vectors must be finite"));
        }
        for (w, d) in growth.iter().zip(&never) {
            if *d != 0.0 && *d != 1.0 {
                return Err(invalid("path indicator must be 0 or 1"));
            }
            if *d == 0.0 && *w != 0.0 {
                return Err(invalid("growth must vanish when the path indicator is 0"));
            }
        }
        Ok(Self {
            running,
            outcome,
            growth,
            never,
            tau,
        })
    }

    /// Vectors for a plain sharp contrast of `outcome`.
    pub fn sharp(running: Vec<f64>, outcome: Vec<f64>, tau: i64) -> Result<Self> {
        let n = running.len();
        Self::new(running, outcome, vec![0.0; n], vec![1.0; n], tau)
    }

    pub fn len(&self) -> usize {
        self.running.len()
    }

    pub fn is_empty(&self) -> bool {
        self.running.is_empty()
    }

    /// Reorder every vector by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |v: &[f64]| perm.iter().map(|&i| v[i]).collect();
        Self {
            running: pick(&self.running),
            outcome: pick(&self.outcome),
            growth: pick(&self.growth),
            never: pick(&self.never),
            tau: self.tau,
        }
    }
}

pub fn make_rd_vectors(sample: &EventSample, tau: usize) -> Result<RdVectors> {
    if tau > sample.tau_max {
        return Err(invalid(format!(
            "tau {tau} exceeds the sample horizon {}",
            sample.tau_max
        )));
    }
    let n = sample.len();
    let mut outcome = Vec::with_capacity(n);
    let mut growth = Vec::with_capacity(n);
    let mut never = Vec::with_capacity(n);
    for (i, unit) in sample.units.iter().enumerate() {
        let stays = unit.post_treated[..tau].iter().all(|&t| !t);
        let base = sample.outcome(i, 0);
        outcome.push(base);
        if stays {
            never.push(1.0);
            growth.push(if tau == 0 {
                0.0
            } else {
                sample.outcome(i, tau as i64) - base
            });
        } else {
            never.push(0.0);
            growth.push(0.0);
        }
    }
    RdVectors::new(sample.running(), outcome, growth, never, tau as i64)
}

/// Sharp-contrast vectors for the outcome at event time `s` (placebo when `s < 0`).
pub fn make_level_vectors(sample: &EventSample, s: i64) -> Result<RdVectors> {
    if s < -(sample.k_pre as i64) || s > sample.tau_max as i64 {
        return Err(invalid(format!("event time {s} is outside the sample window")));
    }
    let outcome = (0..sample.len()).map(|i| sample.outcome(i, s)).collect();
    RdVectors::sharp(sample.running(), outcome, s)
}

/// Inputs to the common-trends comparison between units that stay untreated
/// over the horizon and those that do not.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrendVectors {
    pub running: Vec<f64>,
    /// Pre-period change times `never`.
    pub never_trend: Vec<f64>,
    pub never: Vec<f64>,
    /// Pre-period change times `ever`.
    pub ever_trend: Vec<f64>,
    /// Complement of `never`.
    pub ever: Vec<f64>,
}

impl PretrendVectors {
    /// Build from pre-period changes and path indicators.
    pub fn from_changes(running: Vec<f64>, change: &[f64], never: Vec<f64>) -> Result<Self> {
        let n = running.len();
        if change.len() != n || never.len() != n {
            return Err(invalid("vectors must have equal length"));
        }
        if never.iter().any(|&d| d != 0.0 && d != 1.0) {
            return Err(invalid("path indicator must be 0 or 1"));
        }
        let ever: Vec<f64> = never.iter().map(|d| 1.0 - d).collect();
        let never_trend = change.iter().zip(&never).map(|(c, d)| c * d).collect();
        let ever_trend = change.iter().zip(&ever).map(|(c, g)| c * g).collect();
        Ok(Self {
            running,
            never_trend,
            never,
            ever_trend,
            ever,
        })
    }

    pub fn len(&self) -> usize {
        self.running.len()
    }

    pub fn is_empty(&self) -> bool {
        self.running.is_empty()
    }

    /// Exchange the roles of the two groups.
    pub fn swapped(&self) -> Self {
        Self {
            running: self.running.clone(),
            never_trend: self.ever_trend.clone(),
            never: self.ever.clone(),
            ever_trend: self.never_trend.clone(),
            ever: self.never.clone(),
        }
    }
}

/// Pre-trend inputs comparing `Y[g-v] - Y[g-u]` across the two path groups over horizon `tau`.
pub fn make_pretrend_vectors(
    sample: &EventSample,
    u: usize,
    v: usize,
    tau: usize,
) -> Result<PretrendVectors> {
    if u <= v {
        return Err(invalid("pre-period lags need u > v"));
    }
    if u > sample.k_pre {
        return Err(Error::Balance {
            units: sample.units.iter().map(|x| x.unit_id.clone()).collect(),
        });
    }
    if tau == 0 || tau > sample.tau_max {
        return Err(invalid(format!(
            "pre-trend horizon must lie in 1..={}",
            sample.tau_max
        )));
    }
    let change: Vec<f64> = (0..sample.len())
        .map(|i| sample.outcome(i, -(v as i64)) - sample.outcome(i, -(u as i64)))
        .collect();
    let never = sample
        .units
        .iter()
        .map(|x| {
            if x.post_treated[..tau].iter().any(|&t| t) {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    PretrendVectors::from_changes(sample.running(), &change, never)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(unit: &str, period: i64, r: Option<f64>, y: f64) -> PanelRow {
        PanelRow {
            unit_id: unit.into(),
            period,
            q_held: r.is_some(),
            r,
            y,
        }
    }

    #[test]
    fn three_row_csv() {
        let csv = "unit,period,q_held,r,y\nu1,1,0,,1.0\nu1,2,1,0.2,1.5\nu1,3,0,,2.0\n";
        let p = read_panel(csv.as_bytes(), &ColumnMap::default(), 0.0).unwrap();
        assert_eq!(p.rows().len(), 3);
        assert_eq!(p.n_units(), 1);
        assert_eq!(p.period_range(), (1, 3));
        assert!(p.is_balanced());
    }

    #[test]
    fn duplicate_rows_rejected() {
        let csv = "unit,period,q_held,r,y\nu1,5,0,,1\nu1,5,0,,2\n";
        let err = read_panel(csv.as_bytes(), &ColumnMap::default(), 0.0).unwrap_err();
        assert!(matches!(err, Error::Duplicate { period: 5, .. }));
    }

    #[test]
    fn margin_without_referendum_rejected() {
        let csv = "unit,period,q_held,r,y\nu1,1,0,0.03,1\n";
        let err = read_panel(csv.as_bytes(), &ColumnMap::default(), 0.0).unwrap_err();
        assert!(matches!(err, Error::Consistency { .. }));
    }

    #[test]
    fn missing_column_named() {
        let csv = "unit,period,q_held,margin,y\nu1,1,0,,1\n";
        let err = read_panel(csv.as_bytes(), &ColumnMap::default(), 0.0).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "r"));
    }

    #[test]
    fn remapped_columns() {
        let csv = "id,year,vote,margin,price\na,1,1,-0.1,3\n";
        let schema = ColumnMap {
            unit: "id".into(),
            period: "year".into(),
            q_held: "vote".into(),
            r: "margin".into(),
            y: "price".into(),
        };
        let p = read_panel(csv.as_bytes(), &schema, 0.0).unwrap();
        assert_eq!(p.rows()[0].r, Some(-0.1));
    }

    #[test]
    fn gaps_flag_unbalanced() {
        let p = Panel::new(vec![row("a", 1, None, 0.0), row("a", 3, None, 0.0)], 0.0).unwrap();
        assert!(!p.is_balanced());
    }

    fn history(unit: &str, approvals: &[i64], focal_margin: f64) -> Vec<PanelRow> {
        (1..=8)
            .map(|t| {
                if t == 5 {
                    row(unit, t, Some(focal_margin), t as f64)
                } else if approvals.contains(&t) {
                    row(unit, t, Some(0.1), t as f64)
                } else {
                    row(unit, t, None, t as f64)
                }
            })
            .collect()
    }

    #[test]
    fn cohort_rule() {
        let mut rows = history("clean", &[], 0.02);
        rows.extend(history("recent", &[4], -0.02));
        rows.extend(history("older", &[1], 0.05));
        let panel = Panel::new(rows, 0.0).unwrap();
        let s = build_event_sample(&panel, 5, 3, 2, 1).unwrap();
        let ids: Vec<_> = s.units.iter().map(|u| u.unit_id.as_str()).collect();
        assert_eq!(ids, ["clean", "older"]);
    }

    #[test]
    fn rejected_referendum_is_untreated() {
        let mut rows = history("a", &[], 0.02);
        rows[3] = row("a", 4, Some(-0.3), 4.0);
        let panel = Panel::new(rows, 0.0).unwrap();
        assert_eq!(build_event_sample(&panel, 5, 3, 2, 0).unwrap().len(), 1);
    }

    #[test]
    fn cutoff_centres_margin() {
        let panel = Panel::new(history("a", &[], 0.55), 0.5).unwrap();
        let s = build_event_sample(&panel, 5, 3, 1, 0).unwrap();
        assert!((s.units[0].r - 0.05).abs() < 1e-15);
    }

    #[test]
    fn window_preconditions() {
        let panel = Panel::new(history("a", &[], 0.1), 0.0).unwrap();
        assert!(build_event_sample(&panel, 3, 3, 1, 0).is_err());
        assert!(build_event_sample(&panel, 5, 3, 4, 0).is_err());
        assert!(matches!(
            build_event_sample(&panel, 6, 3, 1, 0),
            Err(Error::EmptyCohort { period: 6 })
        ));
    }

    #[test]
    fn missing_rows_follow_policy() {
        let mut rows = history("a", &[], 0.1);
        rows.extend(history("b", &[], 0.2));
        rows.retain(|r| !(r.unit_id == "b" && r.period == 7));
        let panel = Panel::new(rows, 0.0).unwrap();
        let s = build_event_sample(&panel, 5, 3, 2, 0).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.excluded, ["b"]);
        let err = build_event_sample_with(&panel, 5, 3, 2, 0, MissingPolicy::Fail).unwrap_err();
        assert!(matches!(err, Error::Balance { ref units } if units == &["b"]));
    }

    fn sample_with(paths: &[(&[bool], Vec<f64>)]) -> EventSample {
        EventSample {
            focal_periods: vec![0],
            k_clean: 1,
            tau_max: 2,
            k_pre: 3,
            units: paths
                .iter()
                .enumerate()
                .map(|(i, (post, ys))| EventUnit {
                    unit_id: format!("u{i}"),
                    focal_period: 0,
                    r: 0.1 * i as f64 - 0.05,
                    outcomes: ys.clone(),
                    post_treated: post.to_vec(),
                })
                .collect(),
            excluded: vec![],
        }
    }

    #[test]
    fn rd_vectors_formulas() {
        let s = sample_with(&[
            (&[false, false], vec![0.0, 0.0, 0.0, 1.0, 1.2, 1.5]),
            (&[true, false], vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]),
        ]);
        let v0 = make_rd_vectors(&s, 0).unwrap();
        assert_eq!(v0.never, [1.0, 1.0]);
        assert_eq!(v0.growth, [0.0, 0.0]);
        let v2 = make_rd_vectors(&s, 2).unwrap();
        assert_eq!(v2.never, [1.0, 0.0]);
        assert!((v2.growth[0] - 0.5).abs() < 1e-15);
        assert_eq!(v2.growth[1], 0.0);
        assert!(make_rd_vectors(&s, 3).is_err());
    }

    #[test]
    fn pretrend_vectors_complement() {
        let s = sample_with(&[
            (&[false, false], vec![1.0, 1.1, 1.3, 1.3, 0.0, 0.0]),
            (&[false, true], vec![1.0, 1.0, 1.3, 1.3, 0.0, 0.0]),
        ]);
        let pv = make_pretrend_vectors(&s, 3, 1, 2).unwrap();
        assert_eq!(pv.never, [1.0, 0.0]);
        assert_eq!(pv.ever, [0.0, 1.0]);
        assert_eq!(pv.ever_trend[0], 0.0);
        assert!((pv.ever_trend[1] - 0.3).abs() < 1e-12);
        assert_eq!(pv.never_trend[1], 0.0);
        assert!(make_pretrend_vectors(&s, 4, 1, 2).is_err());
        assert!(make_pretrend_vectors(&s, 1, 1, 2).is_err());
    }

    #[test]
    fn roundtrip_csv() {
        let panel = Panel::new(history("a", &[2], -0.125), 0.0).unwrap();
        let mut buf = Vec::new();
        write_panel(&panel, &mut buf, &ColumnMap::default()).unwrap();
        let back = read_panel(buf.as_slice(), &ColumnMap::default(), 0.0).unwrap();
        assert_eq!(back.rows(), panel.rows());
    }
}
