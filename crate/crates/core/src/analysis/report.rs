//! Plot-ready CSV tables built from a run log.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use itertools::Itertools;

use super::stats::{mann_whitney_u, spearman};
use super::{classify_regime, wake_wake_control, EmbeddingCache, SimilarityRegime};
use crate::backends::EmbeddingBackend;
use crate::domain::{ReviewScores, RunRecord};
use crate::review::{filter_high_quality, DEFAULT_HIGH_QUALITY_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportOptions {
    pub high_quality_threshold: u8,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            high_quality_threshold: DEFAULT_HIGH_QUALITY_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvTable {
    pub name: &'static str,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    fn new(name: &'static str, header: &[&'static str]) -> Self {
        Self {
            name,
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.header.iter().position(|h| *h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub tables: Vec<CsvTable>,
}

impl ReportBundle {
    pub fn table(&self, name: &str) -> Option<&CsvTable> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Writes one `<name>.csv` per table into `dir`.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for t in &self.tables {
            let body = t.to_csv().map_err(io::Error::other)?;
            fs::write(dir.join(format!("{}.csv", t.name)), body)?;
        }
        Ok(())
    }
}

fn sim3(s: f64) -> String {
    format!("{s:.3}")
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn summary_row(scope: &str, pair: &str, temperature: &str, values: &[f64]) -> Vec<String> {
    let sorted: Vec<f64> = values.iter().copied().sorted_by(f64::total_cmp).collect();
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let mut row = vec![scope.to_string(), pair.to_string(), temperature.to_string(), sorted.len().to_string()];
    row.extend([0.0, 0.25, 0.5, 0.75, 1.0].map(|q| sim3(quantile(&sorted, q))));
    row.push(sim3(mean));
    row
}

type Score = fn(&ReviewScores) -> u8;

const DIMENSIONS: [(&str, Score); 4] = [
    ("alignment", |s| s.alignment),
    ("coherence", |s| s.coherence),
    ("novelty", |s| s.novelty),
    ("sum", |s| s.sum),
];

/// Builds every report table. Without an embedder the wake–wake control table stays empty.
pub fn build_report(records: &[RunRecord], embedder: Option<&dyn EmbeddingBackend>, options: &ReportOptions) -> ReportBundle {
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.run_id());
    let with_sim: Vec<(&RunRecord, f64)> = sorted.iter().filter_map(|r| r.similarity.map(|s| (*r, s))).collect();
    let pair_ids: Vec<&str> = with_sim.iter().map(|(r, _)| r.config.pair.pair_id.as_str()).unique().sorted().collect();

    let mut similarity = CsvTable::new(
        "similarity",
        &["run_id", "pair_id", "template", "word", "temperature", "seed", "similarity", "regime"],
    );
    for (r, s) in &with_sim {
        let c = &r.config;
        similarity.push(vec![
            c.run_id.to_string(),
            c.pair.pair_id.clone(),
            c.template.to_string(),
            c.word_limit.to_string(),
            c.dream_temperature.to_string(),
            c.seed.to_string(),
            sim3(*s),
            opt(classify_regime(*s).ok()),
        ]);
    }

    // Distribution summaries: pooled, per temperature, per pair, per pair and temperature.
    let mut summary = CsvTable::new(
        "similarity_summary",
        &["scope", "pair_id", "temperature", "n", "min", "q1", "median", "q3", "max", "mean"],
    );
    let mut groups: BTreeMap<(u8, String, String), Vec<f64>> = BTreeMap::new();
    for (r, s) in &with_sim {
        let pair = r.config.pair.pair_id.clone();
        let t = r.config.dream_temperature.to_string();
        groups.entry((0, "*".into(), "*".into())).or_default().push(*s);
        groups.entry((1, "*".into(), t.clone())).or_default().push(*s);
        groups.entry((2, pair.clone(), "*".into())).or_default().push(*s);
        groups.entry((3, pair, t)).or_default().push(*s);
    }
    for ((level, pair, t), values) in &groups {
        let scope = ["all", "temperature", "pair", "pair_temperature"][*level as usize];
        summary.push(summary_row(scope, pair, t, values));
    }

    let mut control = CsvTable::new("wake_wake_control", &["group", "run_a", "run_b", "similarity"]);
    if let Some(e) = embedder {
        let mut cache = EmbeddingCache::new(e);
        let result = wake_wake_control(records, &mut cache);
        for f in &result.failures {
            log::warn!("wake-wake control: {f}");
        }
        for p in result.pairs {
            control.push(vec![p.group, p.run_a.to_string(), p.run_b.to_string(), sim3(p.similarity)]);
        }
    }

    let mut scatter = CsvTable::new(
        "scatter",
        &["run_id", "pair_id", "similarity", "alignment", "coherence", "novelty", "sum"],
    );
    for (r, s) in &with_sim {
        let rv = r.review;
        scatter.push(vec![
            r.run_id().to_string(),
            r.config.pair.pair_id.clone(),
            sim3(*s),
            opt(rv.map(|v| v.alignment)),
            opt(rv.map(|v| v.coherence)),
            opt(rv.map(|v| v.novelty)),
            opt(rv.map(|v| v.sum)),
        ]);
    }

    let mut regimes = CsvTable::new("regime_counts", &["scope", "pair_id", "regime", "count"]);
    let scopes = std::iter::once(("all", None)).chain(pair_ids.iter().map(|p| ("pair", Some(*p))));
    for (scope, pair) in scopes.clone() {
        for regime in SimilarityRegime::ALL {
            let count = with_sim
                .iter()
                .filter(|(r, _)| pair.is_none_or(|p| r.config.pair.pair_id == p))
                .filter(|(_, s)| classify_regime(*s).ok() == Some(regime))
                .count();
            regimes.push(vec![scope.into(), pair.unwrap_or("*").into(), regime.to_string(), count.to_string()]);
        }
    }

    let mut correlations = CsvTable::new(
        "spearman",
        &["scope", "pair_id", "dimension", "n", "rho", "p_value", "method", "note"],
    );
    for (scope, pair) in scopes.clone() {
        let rows: Vec<(f64, ReviewScores)> = with_sim
            .iter()
            .filter(|(r, _)| pair.is_none_or(|p| r.config.pair.pair_id == p))
            .filter_map(|(r, s)| r.review.map(|v| (*s, v)))
            .collect();
        let xs: Vec<f64> = rows.iter().map(|(s, _)| *s).collect();
        for (name, score) in DIMENSIONS {
            let ys: Vec<f64> = rows.iter().map(|(_, v)| f64::from(score(v))).collect();
            let mut row = vec![scope.to_string(), pair.unwrap_or("*").to_string(), name.to_string(), xs.len().to_string()];
            match spearman(&xs, &ys) {
                Ok(r) => row.extend([num(r.statistic), num(r.p_value), r.method.to_string(), String::new()]),
                Err(e) => row.extend([String::new(), String::new(), String::new(), e.to_string()]),
            }
            correlations.push(row);
        }
    }

    let mut mwu = CsvTable::new(
        "mann_whitney",
        &["scope", "pair_id", "temperature_a", "temperature_b", "n1", "n2", "u", "p_value", "method"],
    );
    for (scope, pair) in scopes {
        let mut by_t: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
        for (r, s) in with_sim.iter().filter(|(r, _)| pair.is_none_or(|p| r.config.pair.pair_id == p)) {
            let t = r.config.dream_temperature;
            by_t.entry(t.to_bits()).or_insert_with(|| (t, Vec::new())).1.push(*s);
        }
        let mut temps: Vec<(f64, Vec<f64>)> = by_t.into_values().collect();
        temps.sort_by(|a, b| a.0.total_cmp(&b.0));
        for ((ta, a), (tb, b)) in temps.iter().tuple_combinations() {
            if let Ok(r) = mann_whitney_u(a, b) {
                mwu.push(vec![
                    scope.into(),
                    pair.unwrap_or("*").into(),
                    ta.to_string(),
                    tb.to_string(),
                    r.n1.to_string(),
                    r.n2.to_string(),
                    r.statistic.to_string(),
                    num(r.p_value),
                    r.method.into(),
                ]);
            }
        }
    }

    let mut high = CsvTable::new(
        "high_quality",
        &[
            "run_id", "pair_id", "template", "word", "temperature", "seed", "similarity", "alignment", "coherence",
            "novelty", "sum", "threshold",
        ],
    );
    for r in filter_high_quality(records, options.high_quality_threshold) {
        let c = &r.config;
        let v = r.review.expect("filtered records are reviewed");
        high.push(vec![
            c.run_id.to_string(),
            c.pair.pair_id.clone(),
            c.template.to_string(),
            c.word_limit.to_string(),
            c.dream_temperature.to_string(),
            c.seed.to_string(),
            opt(r.similarity.map(sim3)),
            v.alignment.to_string(),
            v.coherence.to_string(),
            v.novelty.to_string(),
            v.sum.to_string(),
            options.high_quality_threshold.to_string(),
        ]);
    }

    ReportBundle {
        tables: vec![similarity, summary, control, scatter, regimes, correlations, mwu, high],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::HashEmbedder;
    use crate::persistence::reference_runs;

    #[test]
    fn reference_runs_report() {
        let runs = reference_runs();
        let bundle = build_report(&runs, Some(&HashEmbedder::new(16)), &ReportOptions::default());
        let hq = bundle.table("high_quality").unwrap();
        assert_eq!(
            hq.column("run_id").unwrap(),
            vec!["106", "113", "120", "130", "241", "242", "248", "255", "336", "338", "382"]
        );
        let sim = bundle.table("similarity").unwrap();
        assert_eq!(sim.rows[0][6], "0.316");
        assert_eq!(sim.rows[0][7], "low");

        let counts = bundle.table("regime_counts").unwrap();
        let all: usize = counts
            .rows
            .iter()
            .filter(|r| r[0] == "all")
            .map(|r| r[3].parse::<usize>().unwrap())
            .sum();
        assert_eq!(all, 11);
        let low = counts.rows.iter().find(|r| r[0] == "all" && r[2] == "low").unwrap();
        assert_eq!(low[3], "3");

        // All fixture rows have alignment 5, so that correlation is undefined.
        let sp = bundle.table("spearman").unwrap();
        let align = sp.rows.iter().find(|r| r[0] == "all" && r[2] == "alignment").unwrap();
        assert!(align[4].is_empty() && !align[7].is_empty());

        let only = build_report(&runs, None, &ReportOptions { high_quality_threshold: 15 });
        assert_eq!(only.table("high_quality").unwrap().column("run_id").unwrap(), vec!["336"]);
    }

    #[test]
    fn empty_input_gives_headers_only() {
        let bundle = build_report(&[], None, &ReportOptions::default());
        assert_eq!(bundle.tables.len(), 8);
        for t in &bundle.tables {
            assert!(t.rows.iter().all(|r| r[0] == "all"), "{}", t.name);
            let csv = t.to_csv().unwrap();
            assert_eq!(csv.lines().next().unwrap(), t.header.join(","));
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&xs, 0.5), 2.5);
        assert_eq!(quantile(&xs, 0.0), 1.0);
        assert_eq!(quantile(&xs, 1.0), 4.0);
    }
}
