// SPDX-License-Identifier: MIT OR Apache-2.0

//! Aggregation of raw records into grids, tables and stage statistics.
//!
//! Nothing here touches a model: [`build_report`] is a pure function of the
//! record list.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{Analysis, Anchor, RawRecord, RunInfo, Subset};
use crate::trace::SublayerKind;

/// Percentage of queries with a success, and the mean first-success layer
/// over those queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measure {
    pub cases: usize,
    pub successes: usize,
    pub percent: f64,
    pub mean_layer: Option<f64>,
}

impl Measure {
    pub fn from_firsts<'a>(firsts: impl IntoIterator<Item = &'a Option<usize>>) -> Self {
        let mut cases = 0;
        let mut layers = Vec::new();
        for f in firsts {
            cases += 1;
            if let Some(l) = f {
                layers.push(*l as f64);
            }
        }
        Self::from_parts(cases, &layers)
    }

    fn from_parts(cases: usize, layers: &[f64]) -> Self {
        let successes = layers.len();
        Measure {
            cases,
            successes,
            percent: if cases == 0 {
                0.0
            } else {
                100.0 * successes as f64 / cases as f64
            },
            mean_layer: (successes > 0).then(|| layers.iter().sum::<f64>() / successes as f64),
        }
    }

    /// Success flags only; no layer statistic.
    fn from_flags(flags: impl IntoIterator<Item = bool>) -> Self {
        let (mut cases, mut successes) = (0, 0);
        for f in flags {
            cases += 1;
            successes += f as usize;
        }
        Measure {
            cases,
            successes,
            percent: if cases == 0 {
                0.0
            } else {
                100.0 * successes as f64 / cases as f64
            },
            mean_layer: None,
        }
    }
}

/// Success counts over a source × target layer grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub name: String,
    pub subset: Subset,
    /// Number of source (row) and target (column) layers.
    pub n_rows: usize,
    pub n_cols: usize,
    /// `counts[s][t]`: queries succeeding at the cell.
    pub counts: Vec<Vec<usize>>,
    /// `totals[s][t]`: queries evaluated at the cell; 0 marks an invalid cell.
    pub totals: Vec<Vec<usize>>,
    /// Smallest successful source layer per query.
    pub first_success: BTreeMap<String, Option<usize>>,
    /// Every valid cell was evaluated for every query.
    pub complete: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Share of all successful instances in the grid.
    OfSuccesses,
    /// Success rate of the cell's own attempts.
    PerAttempt,
}

impl GridResult {
    fn new(name: &str, subset: Subset, n_rows: usize, n_cols: usize) -> Self {
        GridResult {
            name: name.to_owned(),
            subset,
            n_rows,
            n_cols,
            counts: vec![vec![0; n_cols]; n_rows],
            totals: vec![vec![0; n_cols]; n_rows],
            first_success: BTreeMap::new(),
            complete: true,
        }
    }

    fn add(&mut self, query: &str, s: usize, t: usize, success: bool) {
        self.totals[s][t] += 1;
        let first = self.first_success.entry(query.to_owned()).or_insert(None);
        if success {
            self.counts[s][t] += 1;
            *first = Some(first.map_or(s, |f: usize| f.min(s)));
        }
    }

    pub fn total_successes(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Cell percentages; `None` for cells never evaluated.
    pub fn percentages(&self, norm: Normalization) -> Vec<Vec<Option<f64>>> {
        let all = self.total_successes();
        (0..self.n_rows)
            .map(|s| {
                (0..self.n_cols)
                    .map(|t| {
                        let (c, n) = (self.counts[s][t], self.totals[s][t]);
                        if n == 0 {
                            return None;
                        }
                        Some(match norm {
                            Normalization::OfSuccesses if all == 0 => 0.0,
                            Normalization::OfSuccesses => 100.0 * c as f64 / all as f64,
                            Normalization::PerAttempt => 100.0 * c as f64 / n as f64,
                        })
                    })
                    .collect()
            })
            .collect()
    }

    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.subset.as_str(), self.name)
    }
}

/// First layer of each pathway stage for one query; `None` when the stage
/// never fired.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub query_id: String,
    pub subset: Subset,
    pub e2_at_t1: Option<usize>,
    pub propagation: Option<usize>,
    pub e2_at_t2: Option<usize>,
    pub e3_at_t2: Option<usize>,
    pub promotion: Option<usize>,
}

pub const STAGES: [&str; 5] = ["e2_at_t1", "propagation", "e2_at_t2", "e3_at_t2", "promotion"];

impl StageRecord {
    pub fn stage(&self, name: &str) -> Option<usize> {
        match name {
            "e2_at_t1" => self.e2_at_t1,
            "propagation" => self.propagation,
            "e2_at_t2" => self.e2_at_t2,
            "e3_at_t2" => self.e3_at_t2,
            "promotion" => self.promotion,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageQuartiles {
    pub subset: Subset,
    pub stage: String,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// How often e2 is resolved at t1 no later than e3 at t2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOrdering {
    pub both_fired: usize,
    pub ordered: usize,
    /// Percent of `both_fired`.
    pub pass_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchscopeSummary {
    pub e2_from_t1: Option<Measure>,
    pub e2_from_t2: Option<Measure>,
    pub e3_from_t2: Option<Measure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromotionSummary {
    pub attention: Measure,
    pub mlp: Measure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationSummary {
    pub knockout: Measure,
    pub projection: Measure,
    pub patchscopes: Measure,
    /// Any method fired; the layer is the minimum over firing methods.
    pub detected: Measure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackpatchSummary {
    pub t1: Measure,
    pub t2: Measure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSummary {
    pub n_queries: usize,
    pub n_failures: usize,
    pub patchscopes: PatchscopeSummary,
    pub promotion: Option<PromotionSummary>,
    pub propagation: Option<PropagationSummary>,
    pub backpatch: Option<BackpatchSummary>,
    pub stage_ordering: StageOrdering,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub run: RunInfo,
    pub subsets: BTreeMap<Subset, SubsetSummary>,
    pub grids: Vec<GridResult>,
    pub stages: Vec<StageRecord>,
    pub stage_quartiles: Vec<StageQuartiles>,
}

#[derive(Default)]
struct QueryAcc {
    answer_first_token: u32,
    e2_first_token: u32,
    failed: bool,
    promotion: BTreeMap<SublayerKind, Option<usize>>,
    e2_projection: Option<usize>,
    knockout: Option<usize>,
    knockout_seen: bool,
}

fn grid_at<'g>(
    grids: &'g mut BTreeMap<(Subset, &'static str), GridResult>,
    n_layers: usize,
    subset: Subset,
    name: &'static str,
) -> &'g mut GridResult {
    // back-patching only has block inputs as sources and targets
    let n = if name.starts_with("backpatch") {
        n_layers
    } else {
        n_layers + 1
    };
    grids
        .entry((subset, name))
        .or_insert_with(|| GridResult::new(name, subset, n, n))
}

fn min_opt(a: Option<usize>, b: usize) -> Option<usize> {
    Some(a.map_or(b, |a| a.min(b)))
}

/// Aggregate records. The first record must be the run header.
pub fn build_report(records: &[RawRecord]) -> Result<ExperimentReport> {
    let Some(RawRecord::Run(run)) = records.first() else {
        return Err(Error::Contract("records must start with a run header".into()));
    };
    let l = run.n_layers;
    let has = |a: Analysis| run.settings.analyses.contains(&a);

    // queries in first-seen order per subset
    let mut order: BTreeMap<Subset, Vec<String>> = BTreeMap::new();
    let mut acc: HashMap<(Subset, String), QueryAcc> = HashMap::new();
    let mut grids: BTreeMap<(Subset, &'static str), GridResult> = BTreeMap::new();

    for r in &records[1..] {
        match r {
            RawRecord::Run(_) => {
                return Err(Error::Contract("more than one run header in records".into()))
            }
            RawRecord::Query(q) => {
                order.entry(q.subset).or_default().push(q.query_id.clone());
                let a = acc.entry((q.subset, q.query_id.clone())).or_default();
                a.answer_first_token = q.answer_first_token;
                a.e2_first_token = q.e2_first_token;
            }
            RawRecord::Failure(f) => {
                let a = acc.entry((f.subset, f.query_id.clone())).or_default();
                a.failed = true;
                if !order.entry(f.subset).or_default().contains(&f.query_id) {
                    order.get_mut(&f.subset).expect("inserted").push(f.query_id.clone());
                }
            }
            RawRecord::Patchscope(c) => {
                let (s, t, id) = (c.source_layer, c.target_layer, c.query_id.as_str());
                match c.anchor {
                    Anchor::T1 => grid_at(&mut grids, l, c.subset, "e2_from_t1").add(id, s, t, c.matched_e2),
                    Anchor::T2 => {
                        if has(Analysis::Propagation) {
                            grid_at(&mut grids, l, c.subset, "e2_from_t2").add(id, s, t, c.matched_e2);
                        }
                        if has(Analysis::SecondHop) {
                            grid_at(&mut grids, l, c.subset, "e3_from_t2").add(id, s, t, c.matched_e3);
                        }
                    }
                }
            }
            RawRecord::Projection(p) => {
                let a = acc.entry((p.subset, p.query_id.clone())).or_default();
                let slot = a.promotion.entry(p.kind).or_insert(None);
                if p.top_token == a.answer_first_token {
                    *slot = min_opt(*slot, p.layer);
                }
                if p.top_token == a.e2_first_token {
                    a.e2_projection = min_opt(a.e2_projection, p.layer);
                }
            }
            RawRecord::Knockout(k) => {
                let a = acc.entry((k.subset, k.query_id.clone())).or_default();
                a.knockout_seen = true;
                if k.critical {
                    a.knockout = min_opt(a.knockout, k.window_start);
                }
            }
            RawRecord::Backpatch(b) => {
                let name = match b.anchor {
                    Anchor::T1 => "backpatch_t1",
                    Anchor::T2 => "backpatch_t2",
                };
                grid_at(&mut grids, l, b.subset, name).add(&b.query_id, b.source_layer, b.target_layer, b.success);
            }
        }
    }

    // grids missing cells were scanned with early exit
    for g in grids.values_mut() {
        let n_queries = g.first_success.len();
        g.complete = g.totals.iter().enumerate().all(|(s, row)| {
            row.iter().enumerate().all(|(t, &n)| {
                let valid = !g.name.starts_with("backpatch") || t < s;
                !valid || n == n_queries
            })
        });
    }

    let first = |subset: Subset, name: &str, id: &str| -> Option<usize> {
        grids
            .iter()
            .find(|((s, n), _)| *s == subset && *n == name)
            .and_then(|(_, g)| g.first_success.get(id).copied().flatten())
    };
    let any_success = |subset: Subset, name: &str, id: &str| first(subset, name, id).is_some();

    let mut subsets = BTreeMap::new();
    let mut stages = Vec::new();
    for (&subset, ids) in &order {
        let ok: Vec<&String> = ids.iter().filter(|id| !acc[&(subset, (*id).clone())].failed).collect();
        let firsts = |name: &str| -> Vec<Option<usize>> {
            ok.iter().map(|id| first(subset, name, id)).collect()
        };
        let measure_if = |cond: bool, name: &str| cond.then(|| Measure::from_firsts(&firsts(name)));
        let patchscopes = PatchscopeSummary {
            e2_from_t1: measure_if(has(Analysis::FirstHop), "e2_from_t1"),
            e2_from_t2: measure_if(has(Analysis::Propagation), "e2_from_t2"),
            e3_from_t2: measure_if(has(Analysis::SecondHop), "e3_from_t2"),
        };
        let get = |id: &String| &acc[&(subset, id.clone())];
        let promotion_of = |id: &String, kind| get(id).promotion.get(&kind).copied().flatten();
        let promotion = has(Analysis::SecondHop).then(|| PromotionSummary {
            attention: Measure::from_firsts(
                &ok.iter().map(|id| promotion_of(id, SublayerKind::Attention)).collect::<Vec<_>>(),
            ),
            mlp: Measure::from_firsts(
                &ok.iter().map(|id| promotion_of(id, SublayerKind::Mlp)).collect::<Vec<_>>(),
            ),
        });
        let detected_layer = |id: &String| -> Option<usize> {
            [
                get(id).knockout,
                get(id).e2_projection,
                first(subset, "e2_from_t2", id),
            ]
            .into_iter()
            .flatten()
            .min()
        };
        let propagation = has(Analysis::Propagation).then(|| PropagationSummary {
            knockout: Measure::from_firsts(&ok.iter().map(|id| get(id).knockout).collect::<Vec<_>>()),
            projection: Measure::from_firsts(
                &ok.iter().map(|id| get(id).e2_projection).collect::<Vec<_>>(),
            ),
            patchscopes: Measure::from_firsts(&firsts("e2_from_t2")),
            detected: Measure::from_firsts(&ok.iter().map(|id| detected_layer(id)).collect::<Vec<_>>()),
        });
        let backpatch = has(Analysis::Backpatch).then(|| BackpatchSummary {
            t1: Measure::from_flags(ok.iter().map(|id| any_success(subset, "backpatch_t1", id))),
            t2: Measure::from_flags(ok.iter().map(|id| any_success(subset, "backpatch_t2", id))),
        });

        let mut ordering = StageOrdering {
            both_fired: 0,
            ordered: 0,
            pass_rate: None,
        };
        for id in &ok {
            let rec = StageRecord {
                query_id: (*id).clone(),
                subset,
                e2_at_t1: first(subset, "e2_from_t1", id),
                propagation: has(Analysis::Propagation).then(|| detected_layer(id)).flatten(),
                e2_at_t2: first(subset, "e2_from_t2", id),
                e3_at_t2: first(subset, "e3_from_t2", id),
                promotion: promotion
                    .as_ref()
                    .and_then(|_| {
                        [
                            promotion_of(id, SublayerKind::Attention),
                            promotion_of(id, SublayerKind::Mlp),
                        ]
                        .into_iter()
                        .flatten()
                        .min()
                    }),
            };
            if let (Some(a), Some(b)) = (rec.e2_at_t1, rec.e3_at_t2) {
                ordering.both_fired += 1;
                ordering.ordered += (a <= b) as usize;
            }
            stages.push(rec);
        }
        if ordering.both_fired > 0 {
            ordering.pass_rate = Some(100.0 * ordering.ordered as f64 / ordering.both_fired as f64);
        }
        subsets.insert(
            subset,
            SubsetSummary {
                n_queries: ids.len(),
                n_failures: ids.len() - ok.len(),
                patchscopes,
                promotion,
                propagation,
                backpatch,
                stage_ordering: ordering,
            },
        );
    }

    let mut stage_quartiles = Vec::new();
    for &subset in order.keys() {
        for stage in STAGES {
            let mut vals: Vec<f64> = stages
                .iter()
                .filter(|r| r.subset == subset)
                .filter_map(|r| r.stage(stage))
                .map(|v| v as f64)
                .collect();
            if vals.is_empty() {
                continue;
            }
            vals.sort_by(f64::total_cmp);
            stage_quartiles.push(StageQuartiles {
                subset,
                stage: stage.to_owned(),
                n: vals.len(),
                min: vals[0],
                q1: quantile(&vals, 0.25),
                median: quantile(&vals, 0.5),
                q3: quantile(&vals, 0.75),
                max: vals[vals.len() - 1],
            });
        }
    }

    Ok(ExperimentReport {
        run: run.clone(),
        subsets,
        grids: grids.into_values().collect(),
        stages,
        stage_quartiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measures_average_only_successes() {
        let m = Measure::from_firsts(&[Some(2), None, Some(4), None]);
        assert_eq!(m.successes, 2);
        assert_eq!(m.percent, 50.0);
        assert_eq!(m.mean_layer, Some(3.0));
        let empty = Measure::from_firsts(&[]);
        assert_eq!(empty.percent, 0.0);
        assert_eq!(empty.mean_layer, None);
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&[7.0], 0.75), 7.0);
    }

    #[test]
    fn single_success_is_the_whole_heat_map() {
        let mut g = GridResult::new("x", Subset::Correct, 3, 3);
        for s in 0..3 {
            for t in 0..3 {
                g.add("q", s, t, s == 1 && t == 2);
            }
        }
        let p = g.percentages(Normalization::OfSuccesses);
        assert_eq!(p[1][2], Some(100.0));
        assert_eq!(p.iter().flatten().flatten().sum::<f64>(), 100.0);
        assert_eq!(g.first_success["q"], Some(1));
    }
}
