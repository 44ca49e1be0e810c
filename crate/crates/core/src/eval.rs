//! Monte-Carlo evaluation of policies and the box-plot statistics of their
//! returns.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dt::{rollout_batch, DecisionTransformer};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Evaluation episodes run on env seeds shifted by this much, keeping them
/// apart from demonstration seeds.
pub const EVAL_SEED_OFFSET: u64 = 1_000_000;
pub const DEFAULT_EPISODES: usize = 250;
/// Episodes rolled out together per model call.
pub const ROLLOUT_CHUNK: usize = 125;

pub fn eval_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    (0..episodes as u64).map(|i| EVAL_SEED_OFFSET + seed + i).collect()
}

/// Box-plot summary of a list of episode returns.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    /// Values outside `[q1 − 1.5·iqr, q3 + 1.5·iqr]`, in input order.
    pub outliers: Vec<f64>,
    pub raw: Vec<f64>,
}

/// Quantile of sorted data by linear interpolation at position `p·(n − 1)`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn stats(rewards: &[f64]) -> Result<RewardStats> {
    if rewards.is_empty() {
        return Err(Error::Data("statistics of an empty reward list".into()));
    }
    if let Some(x) = rewards.iter().find(|x| !x.is_finite()) {
        return Err(Error::Data(format!("non-finite reward {x}")));
    }
    let mut sorted = rewards.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile(&sorted, 0.25);
    let median = quantile(&sorted, 0.5);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    Ok(RewardStats {
        n: rewards.len(),
        mean: rewards.iter().sum::<f64>() / rewards.len() as f64,
        median,
        q1,
        q3,
        iqr,
        outliers: rewards.iter().copied().filter(|&x| x < lo || x > hi).collect(),
        raw: rewards.to_vec(),
    })
}

/// Returns of a policy on a list of env seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub seeds: Vec<u64>,
    pub returns: Vec<f32>,
}

impl Evaluation {
    pub fn stats(&self) -> Result<RewardStats> {
        stats(&self.returns.iter().map(|&r| r as f64).collect::<Vec<_>>())
    }
}

/// Roll out `model` on `episodes` seeds derived from `seed` (see
/// [`eval_seeds`]), conditioned on `target_return`.
pub fn evaluate<S: Scalar>(
    model: &DecisionTransformer<S>,
    env: &EnvConfig,
    episodes: usize,
    seed: u64,
    target_return: f32,
) -> Result<Evaluation> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    evaluate_seeds(model, env, &eval_seeds(seed, episodes), target_return)
}

/// Roll out `model` once per env seed. Each result depends only on its own
/// seed.
pub fn evaluate_seeds<S: Scalar>(
    model: &DecisionTransformer<S>,
    env: &EnvConfig,
    seeds: &[u64],
    target_return: f32,
) -> Result<Evaluation> {
    let mut returns = Vec::with_capacity(seeds.len());
    for (c, chunk) in seeds.chunks(ROLLOUT_CHUNK).enumerate() {
        let logs = rollout_batch(model, env, chunk, target_return).map_err(|e| match e {
            Error::Episode { episode, seed, source } => {
                Error::Episode { episode: c * ROLLOUT_CHUNK + episode, seed, source }
            }
            other => other,
        })?;
        returns.extend(logs.iter().map(|l| l.trajectory.total_return));
    }
    Ok(Evaluation { seeds: seeds.to_vec(), returns })
}

/// One strategy's results for the report files.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub strategy: String,
    pub evaluation: Evaluation,
    /// Checkpoint size and reduction against the FP32 baseline, when known.
    pub size: Option<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub strategy: String,
    pub seed: u64,
    pub total_reward: f32,
}

/// One element of the summary JSON array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryRow {
    pub strategy: String,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub outlier_count: usize,
    pub file_bytes: Option<u64>,
    pub reduction_pct: Option<f64>,
}

impl SummaryRow {
    pub fn new(strategy: &str, stats: &RewardStats, size: Option<(u64, f64)>) -> Self {
        SummaryRow {
            strategy: strategy.to_string(),
            n: stats.n,
            mean: stats.mean,
            median: stats.median,
            q1: stats.q1,
            q3: stats.q3,
            iqr: stats.iqr,
            outlier_count: stats.outliers.len(),
            file_bytes: size.map(|s| s.0),
            reduction_pct: size.map(|s| s.1),
        }
    }
}

pub fn write_raw_csv<W: Write>(entries: &[ReportEntry], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["strategy", "seed", "total_reward"]).map_err(csv_err)?;
    for e in entries {
        for (&seed, &total_reward) in e.evaluation.seeds.iter().zip(&e.evaluation.returns) {
            w.serialize(RawRow { strategy: e.strategy.clone(), seed, total_reward }).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("csv: {other:?}")),
    }
}

/// Parse a raw CSV written by [`write_raw_csv`]. Rows are grouped by
/// strategy in order of first appearance.
pub fn read_raw_csv<R: Read>(input: R, source: &Path) -> Result<Vec<(String, Evaluation)>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(input);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != ["strategy", "seed", "total_reward"] {
        return Err(Error::Parse {
            path: source.to_path_buf(),
            line: 1,
            msg: format!("expected header strategy,seed,total_reward, found {}", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut groups: Vec<(String, Evaluation)> = Vec::new();
    for (i, row) in rdr.deserialize::<RawRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse { path: source.to_path_buf(), line: i + 2, msg: e.to_string() })?;
        match groups.iter_mut().find(|(s, _)| *s == row.strategy) {
            Some((_, ev)) => {
                ev.seeds.push(row.seed);
                ev.returns.push(row.total_reward);
            }
            None => groups.push((row.strategy, Evaluation { seeds: vec![row.seed], returns: vec![row.total_reward] })),
        }
    }
    Ok(groups)
}

/// Summary rows ordered by strategy label. Duplicate labels are an error.
pub fn summarize(entries: &[ReportEntry]) -> Result<Vec<SummaryRow>> {
    let mut by_label = BTreeMap::new();
    for e in entries {
        let row = SummaryRow::new(&e.strategy, &e.evaluation.stats()?, e.size);
        if by_label.insert(e.strategy.clone(), row).is_some() {
            return Err(Error::Data(format!("duplicate strategy label {:?}", e.strategy)));
        }
    }
    Ok(by_label.into_values().collect())
}

pub fn write_summary_json<W: Write>(rows: &[SummaryRow], mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, rows)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Write the raw CSV to `csv_path` and the per-strategy summary JSON to
/// `json_path`.
pub fn emit_report(entries: &[ReportEntry], csv_path: &Path, json_path: &Path) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::Data("report needs at least one entry".into()));
    }
    let rows = summarize(entries)?;
    let mut csv_out = BufWriter::new(File::create(csv_path)?);
    write_raw_csv(entries, &mut csv_out)?;
    csv_out.flush()?;
    let mut json_out = BufWriter::new(File::create(json_path)?);
    write_summary_json(&rows, &mut json_out)?;
    json_out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dt::DtConfig;

    #[test]
    fn box_plot_example() {
        let s = stats(&[10.0, 200.0, 205.0, 210.0, 215.0]).unwrap();
        assert_eq!((s.median, s.q1, s.q3, s.iqr), (205.0, 200.0, 210.0, 10.0));
        assert_eq!(s.outliers, vec![10.0]);
        assert_eq!(s.mean, 168.0);
    }

    #[test]
    fn constant_and_single() {
        let s = stats(&[3.0; 7]).unwrap();
        assert_eq!(s.iqr, 0.0);
        assert!(s.outliers.is_empty());
        let s = stats(&[42.5]).unwrap();
        assert_eq!((s.mean, s.median, s.n), (42.5, 42.5, 1));
        assert!(stats(&[]).is_err());
    }

    #[test]
    fn interpolates_between_order_statistics() {
        let s = stats(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (1.75, 2.5, 3.25));
    }

    fn entry(label: &str, returns: &[f32]) -> ReportEntry {
        ReportEntry {
            strategy: label.into(),
            evaluation: Evaluation { seeds: eval_seeds(0, returns.len()), returns: returns.to_vec() },
            size: None,
        }
    }

    #[test]
    fn summary_is_sorted_and_rejects_duplicates() {
        let rows = summarize(&[entry("q4", &[1.0, 2.0]), entry("fp32", &[3.0])]).unwrap();
        assert_eq!(rows.iter().map(|r| r.strategy.as_str()).collect::<Vec<_>>(), ["fp32", "q4"]);
        assert!(summarize(&[entry("q4", &[1.0]), entry("q4", &[2.0])]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let entries = [entry("fp32", &[1.5, 0.1, 123.456]), entry("p+ft+q4", &[7.0])];
        let mut buf = Vec::new();
        write_raw_csv(&entries, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("strategy,seed,total_reward\nfp32,1000000,1.5\n"), "{text:?}");
        assert_eq!(text.lines().count(), 5);
        let back = read_raw_csv(&buf[..], Path::new("x.csv")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].1, entries[0].evaluation);
        assert_eq!(back[1].0, "p+ft+q4");
    }

    #[test]
    fn bad_csv_header_is_rejected() {
        let err = read_raw_csv(&b"strategy,seed,reward\nfp32,1,2\n"[..], Path::new("x.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = read_raw_csv(&b"strategy,seed,total_reward\nfp32,x,2\n"[..], Path::new("x.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn evaluation_is_seed_isolated() {
        let cfg = DtConfig { context: 3, embed_dim: 8, layers: 1, heads: 1, ..DtConfig::default() };
        let m = DecisionTransformer::<f32>::build(&cfg, 0).unwrap();
        let env = EnvConfig { horizon: 10, ..EnvConfig::default() };
        let all = evaluate(&m, &env, 5, 7, 30.0).unwrap();
        assert_eq!(all.seeds[0], EVAL_SEED_OFFSET + 7);
        let one = evaluate_seeds(&m, &env, &all.seeds[3..4], 30.0).unwrap();
        assert_eq!(one.returns[0], all.returns[3]);
        assert!(evaluate(&m, &env, 0, 0, 1.0).is_err());
    }
}
