//! Trial logs and their summaries: success rate, time to failure, deviation
//! from the closest safe signal and the fraction of safe rollouts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::mpmi::{select, Mode, SharedControlDecision};
use crate::rollout::RolloutBatch;
use crate::sampling::SampleSet;

pub const TRIAL_LOG_FORMAT: &str = "mpmi-trials/1";
pub const SUMMARY_FORMAT: &str = "mpmi-summary/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Survived,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: f64,
    pub state: Vec<f64>,
    pub u_h: Vec<f64>,
    pub u_r: Vec<f64>,
    pub deviation: f64,
    pub deviation_to_closest_safe: f64,
    pub percent_safe: f64,
    pub fallback_used: bool,
    pub input_clamped: bool,
    pub nearest_sample_safe: bool,
    pub compute_time: f64,
    pub overrun: bool,
}

impl TickRecord {
    pub(crate) fn new(t: f64, _mode: Mode, state: Vec<f64>, d: &SharedControlDecision, overrun: bool) -> Self {
        Self {
            t,
            state,
            u_h: d.u_h.clone(),
            u_r: d.u_r.clone(),
            deviation: d.deviation,
            deviation_to_closest_safe: d.deviation_to_closest_safe,
            percent_safe: d.percent_safe,
            fallback_used: d.fallback_used,
            input_clamped: d.input_clamped,
            nearest_sample_safe: d.nearest_sample_safe,
            compute_time: d.compute_time,
            overrun,
        }
    }

    fn columns(state_dim: usize, control_dim: usize) -> Vec<String> {
        let mut c = vec!["t".to_string()];
        c.extend((0..state_dim).map(|i| format!("x{i}")));
        c.extend((0..control_dim).map(|i| format!("u_h{i}")));
        c.extend((0..control_dim).map(|i| format!("u_r{i}")));
        c.extend(
            [
                "deviation",
                "deviation_to_closest_safe",
                "percent_safe",
                "fallback_used",
                "input_clamped",
                "nearest_sample_safe",
                "compute_time",
                "overrun",
            ]
            .map(String::from),
        );
        c
    }

    fn to_row(&self) -> Vec<f64> {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        let mut r = vec![self.t];
        r.extend(&self.state);
        r.extend(&self.u_h);
        r.extend(&self.u_r);
        r.extend([
            self.deviation,
            self.deviation_to_closest_safe,
            self.percent_safe,
            flag(self.fallback_used),
            flag(self.input_clamped),
            flag(self.nearest_sample_safe),
            self.compute_time,
            flag(self.overrun),
        ]);
        r
    }

    fn from_row(r: &[f64], n: usize, m: usize) -> Option<Self> {
        if r.len() != 1 + n + 2 * m + 8 {
            return None;
        }
        let flag = |v: f64| v != 0.0;
        let tail = &r[1 + n + 2 * m..];
        Some(Self {
            t: r[0],
            state: r[1..1 + n].to_vec(),
            u_h: r[1 + n..1 + n + m].to_vec(),
            u_r: r[1 + n + m..1 + n + 2 * m].to_vec(),
            deviation: tail[0],
            deviation_to_closest_safe: tail[1],
            percent_safe: tail[2],
            fallback_used: flag(tail[3]),
            input_clamped: flag(tail[4]),
            nearest_sample_safe: flag(tail[5]),
            compute_time: tail[6],
            overrun: flag(tail[7]),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub env_id: EnvId,
    pub mode: Mode,
    pub seed: u64,
    pub outcome: Outcome,
    /// Seconds until failure, or `max_trial_time` when survived.
    pub duration: f64,
    pub max_trial_time: f64,
    pub dt: f64,
    pub overruns: usize,
    pub ticks: Vec<TickRecord>,
}

impl TrialRecord {
    /// Mean per-tick deviation from the closest safe sample.
    pub fn mean_deviation(&self) -> Option<f64> {
        mean(self.ticks.iter().map(|t| t.deviation_to_closest_safe))
    }

    pub fn mean_percent_safe(&self) -> Option<f64> {
        mean(self.ticks.iter().map(|t| t.percent_safe))
    }

    pub fn fallback_ever(&self) -> bool {
        self.ticks.iter().any(|t| t.fallback_used)
    }

    /// The operator's nearest grid point was fully safe on every tick.
    pub fn all_inputs_safe(&self) -> bool {
        self.ticks.iter().all(|t| t.nearest_sample_safe)
    }

    pub fn validate(&self) -> Result<()> {
        if self.duration > self.max_trial_time {
            return Err(Error::Config(format!(
                "trial {} lasted {} s past the {} s limit",
                self.trial_id, self.duration, self.max_trial_time
            )));
        }
        if (self.outcome == Outcome::Survived) != (self.duration == self.max_trial_time) {
            return Err(Error::Config(format!(
                "trial {} outcome {:?} disagrees with duration {}",
                self.trial_id, self.outcome, self.duration
            )));
        }
        if self.ticks.windows(2).any(|w| !(w[0].t < w[1].t)) {
            return Err(Error::Config(format!("trial {} ticks are not increasing in time", self.trial_id)));
        }
        Ok(())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Distance from `u_h` to the closest fully-safe sample of `batch`; when
/// none is safe, to the sample the fallback rule would pick.
pub fn deviation_to_closest_safe(batch: &RolloutBatch, samples: &SampleSet, u_h: &[f64]) -> f64 {
    select(batch, samples, u_h).deviation
}

/// How survived trials enter the mean time to failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Censoring {
    /// Survived trials count at the time limit.
    #[default]
    AtMaxTime,
    /// Only failed trials are averaged.
    FailedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation across trials.
    pub std: f64,
    /// Trials contributing.
    pub n: usize,
}

impl MeanStd {
    /// Order-independent: values are summed in sorted order.
    fn of(mut values: Vec<f64>) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let mut sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
        sq.sort_by(f64::total_cmp);
        let std = (sq.iter().sum::<f64>() / n as f64).sqrt();
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub env_id: EnvId,
    pub mode: Mode,
    pub trials: usize,
    pub success_rate: f64,
    pub censoring: Censoring,
    /// `None` when no trial qualifies under the censoring rule.
    pub mean_time_to_failure: Option<f64>,
    /// Per-trial mean deviation from the closest safe signal.
    pub mean_deviation: Option<MeanStd>,
    /// Per-trial mean fraction of fully-safe rollouts.
    pub mean_percent_safe: Option<MeanStd>,
    pub fallback_ticks: usize,
    pub overruns: usize,
    pub ticks: usize,
}

/// Summary of one homogeneous group of trials.
pub fn summarize_group(trials: &[TrialRecord], censoring: Censoring) -> Result<MetricSummary> {
    let first = trials
        .first()
        .ok_or_else(|| Error::Config("cannot summarize an empty trial list".into()))?;
    if let Some(t) = trials.iter().find(|t| t.env_id != first.env_id || t.mode != first.mode) {
        return Err(Error::Config(format!(
            "trial {} ({} / {}) does not belong to the {} / {} group",
            t.trial_id, t.env_id, t.mode, first.env_id, first.mode
        )));
    }
    let n = trials.len();
    let survived = trials.iter().filter(|t| t.outcome == Outcome::Survived).count();
    let times: Vec<f64> = trials
        .iter()
        .filter(|t| censoring == Censoring::AtMaxTime || t.outcome == Outcome::Failed)
        .map(|t| t.duration)
        .collect();
    Ok(MetricSummary {
        env_id: first.env_id,
        mode: first.mode,
        trials: n,
        success_rate: survived as f64 / n as f64,
        censoring,
        mean_time_to_failure: MeanStd::of(times).map(|m| m.mean),
        mean_deviation: MeanStd::of(trials.iter().filter_map(TrialRecord::mean_deviation).collect()),
        mean_percent_safe: MeanStd::of(trials.iter().filter_map(TrialRecord::mean_percent_safe).collect()),
        fallback_ticks: trials.iter().map(|t| t.ticks.iter().filter(|k| k.fallback_used).count()).sum(),
        overruns: trials.iter().map(|t| t.overruns).sum(),
        ticks: trials.iter().map(|t| t.ticks.len()).sum(),
    })
}

/// One summary per `(env, mode)` group, in a fixed order.
pub fn summarize(trials: &[TrialRecord], censoring: Censoring) -> Result<Vec<MetricSummary>> {
    if trials.is_empty() {
        return Err(Error::Config("cannot summarize an empty trial list".into()));
    }
    let mut groups: BTreeMap<(EnvId, Mode), Vec<TrialRecord>> = BTreeMap::new();
    for t in trials {
        groups.entry((t.env_id, t.mode)).or_default().push(t.clone());
    }
    groups.values().map(|g| summarize_group(g, censoring)).collect()
}

/// Identifies the run an artifact came from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogHeader {
    format: String,
    #[serde(flatten)]
    provenance: Provenance,
    trials: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrialHeader {
    trial_id: u64,
    env_id: EnvId,
    mode: Mode,
    seed: u64,
    outcome: Outcome,
    duration: f64,
    max_trial_time: f64,
    dt: f64,
    overruns: usize,
    ticks: usize,
    columns: Vec<String>,
}

/// Newline-delimited trial log: a header line, then for each trial a JSON
/// object line followed by one flat numeric array per tick, laid out as the
/// object's `columns`.
pub fn write_trial_log(path: &Path, trials: &[TrialRecord], provenance: &Provenance) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header = LogHeader {
        format: TRIAL_LOG_FORMAT.into(),
        provenance: provenance.clone(),
        trials: trials.len(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("serializes")).map_err(io)?;
    for t in trials {
        let (n, m) = (t.env_id.state_dim(), t.env_id.control_space().dims());
        let th = TrialHeader {
            trial_id: t.trial_id,
            env_id: t.env_id,
            mode: t.mode,
            seed: t.seed,
            outcome: t.outcome,
            duration: t.duration,
            max_trial_time: t.max_trial_time,
            dt: t.dt,
            overruns: t.overruns,
            ticks: t.ticks.len(),
            columns: TickRecord::columns(n, m),
        };
        writeln!(out, "{}", serde_json::to_string(&th).expect("serializes")).map_err(io)?;
        for k in &t.ticks {
            writeln!(out, "{}", serde_json::to_string(&k.to_row()).expect("serializes")).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn read_trial_log(path: &Path) -> Result<(Provenance, Vec<TrialRecord>)> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next_line = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((no, Ok(l))) => Ok((no, l)),
            Some((_, Err(e))) => Err(Error::io(path, e)),
            None => Err(Error::parse(&name, 0, format!("unexpected end of file, expected {what}"))),
        }
    };
    let (_, first) = next_line("header")?;
    let header: LogHeader =
        serde_json::from_str(&first).map_err(|e| Error::parse(&name, 1, format!("bad header: {e}")))?;
    if header.format != TRIAL_LOG_FORMAT {
        return Err(Error::parse(&name, 1, format!("unsupported format {:?}", header.format)));
    }
    let mut trials = Vec::with_capacity(header.trials);
    for _ in 0..header.trials {
        let (no, line) = next_line("trial header")?;
        let th: TrialHeader =
            serde_json::from_str(&line).map_err(|e| Error::parse(&name, no, format!("bad trial header: {e}")))?;
        let (n, m) = (th.env_id.state_dim(), th.env_id.control_space().dims());
        let mut ticks = Vec::with_capacity(th.ticks);
        for _ in 0..th.ticks {
            let (no, line) = next_line("tick row")?;
            let row: Vec<f64> = serde_json::from_str(&line).map_err(|e| Error::parse(&name, no, e.to_string()))?;
            let tick = TickRecord::from_row(&row, n, m)
                .ok_or_else(|| Error::parse(&name, no, format!("expected {} numbers", th.columns.len())))?;
            ticks.push(tick);
        }
        trials.push(TrialRecord {
            trial_id: th.trial_id,
            env_id: th.env_id,
            mode: th.mode,
            seed: th.seed,
            outcome: th.outcome,
            duration: th.duration,
            max_trial_time: th.max_trial_time,
            dt: th.dt,
            overruns: th.overruns,
            ticks,
        });
    }
    Ok((header.provenance, trials))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SummaryFile {
    format: String,
    #[serde(flatten)]
    provenance: Provenance,
    summaries: Vec<MetricSummary>,
}

fn fmt_mean_std(m: &Option<MeanStd>) -> String {
    match m {
        Some(m) => format!("{:.4} ± {:.4}", m.mean, m.std),
        None => "-".into(),
    }
}

/// Plain-text table with the columns of the deviation / %-safe table plus
/// success and time-to-failure columns.
pub fn format_summary_table(summaries: &[MetricSummary], provenance: &Provenance) -> String {
    let head = [
        "Environment",
        "Condition",
        "Avg. Deviation",
        "Avg. % Safe Rollouts",
        "Success Rate",
        "Mean Time to Failure (s)",
        "Trials",
    ];
    let rows: Vec<[String; 7]> = summaries
        .iter()
        .map(|s| {
            [
                s.env_id.to_string(),
                s.mode.to_string(),
                fmt_mean_std(&s.mean_deviation),
                fmt_mean_std(&s.mean_percent_safe),
                format!("{:.2}", s.success_rate),
                s.mean_time_to_failure.map_or("-".into(), |t| format!("{t:.2}")),
                s.trials.to_string(),
            ]
        })
        .collect();
    let mut out = String::new();
    writeln!(out, "# config {}", provenance.config_hash).unwrap();
    let seeds: Vec<String> = provenance.seeds.iter().map(u64::to_string).collect();
    writeln!(out, "# seeds {}", seeds.join(",")).unwrap();
    out.push_str(&aligned(&head.map(String::from), &rows));
    out
}

/// Metric-by-condition layout: one row per (metric, condition), one column
/// per environment.
pub fn format_metric_table(summaries: &[MetricSummary]) -> String {
    let mut envs: Vec<EnvId> = Vec::new();
    let mut modes: Vec<Mode> = Vec::new();
    for s in summaries {
        if !envs.contains(&s.env_id) {
            envs.push(s.env_id);
        }
        if !modes.contains(&s.mode) {
            modes.push(s.mode);
        }
    }
    let mut head = vec!["Metric".to_string(), "Control".to_string()];
    head.extend(envs.iter().map(|e| e.to_string()));
    let metrics: [(&str, fn(&MetricSummary) -> &Option<MeanStd>); 2] = [
        ("Avg. Deviation", |s| &s.mean_deviation),
        ("Avg. % Safe Rollouts", |s| &s.mean_percent_safe),
    ];
    let mut rows = Vec::new();
    for (name, get) in metrics {
        for (k, mode) in modes.iter().enumerate() {
            let mut row = vec![if k == 0 { name.to_string() } else { String::new() }, mode.to_string()];
            for env in &envs {
                row.push(
                    summaries
                        .iter()
                        .find(|s| s.env_id == *env && s.mode == *mode)
                        .map_or("-".into(), |s| fmt_mean_std(get(s))),
                );
            }
            rows.push(row);
        }
    }
    aligned(&head, &rows)
}

fn aligned<R: AsRef<[String]>>(head: &[String], rows: &[R]) -> String {
    let mut widths: Vec<usize> = head.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r.as_ref()) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut out = String::new();
    writeln!(out, "{}", line(head)).unwrap();
    writeln!(out, "{}", line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>())).unwrap();
    for r in rows {
        writeln!(out, "{}", line(r.as_ref())).unwrap();
    }
    out
}

pub fn write_summary_json(path: &Path, summaries: &[MetricSummary], provenance: &Provenance) -> Result<()> {
    let file = SummaryFile {
        format: SUMMARY_FORMAT.into(),
        provenance: provenance.clone(),
        summaries: summaries.to_vec(),
    };
    let text = serde_json::to_string_pretty(&file).expect("serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_summary_json(path: &Path) -> Result<(Provenance, Vec<MetricSummary>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SummaryFile = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))?;
    if file.format != SUMMARY_FORMAT {
        return Err(Error::parse(path.display().to_string(), 1, format!("unsupported format {:?}", file.format)));
    }
    Ok((file.provenance, file.summaries))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportPaths {
    pub trial_log: PathBuf,
    pub summary_txt: PathBuf,
    pub summary_json: PathBuf,
}

/// Writes `trials.ndjson`, `summary.txt` and `summary.json` into `dir`.
pub fn export(
    dir: &Path,
    trials: &[TrialRecord],
    censoring: Censoring,
    provenance: &Provenance,
) -> Result<(Vec<MetricSummary>, ExportPaths)> {
    let summaries = summarize(trials, censoring)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = ExportPaths {
        trial_log: dir.join("trials.ndjson"),
        summary_txt: dir.join("summary.txt"),
        summary_json: dir.join("summary.json"),
    };
    write_trial_log(&paths.trial_log, trials, provenance)?;
    let text = format!(
        "{}\n{}",
        format_summary_table(&summaries, provenance),
        format_metric_table(&summaries)
    );
    std::fs::write(&paths.summary_txt, text)
        .map_err(|e| Error::io(&paths.summary_txt, e))?;
    write_summary_json(&paths.summary_json, &summaries, provenance)?;
    Ok((summaries, paths))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tick(t: f64, dev: f64, safe: f64) -> TickRecord {
        TickRecord {
            t,
            state: vec![0.0, 0.1, -0.2],
            u_h: vec![0.5],
            u_r: vec![0.5],
            deviation: 0.0,
            deviation_to_closest_safe: dev,
            percent_safe: safe,
            fallback_used: false,
            input_clamped: false,
            nearest_sample_safe: true,
            compute_time: 0.0,
            overrun: false,
        }
    }

    fn trial(id: u64, mode: Mode, outcome: Outcome, duration: f64, ticks: Vec<TickRecord>) -> TrialRecord {
        TrialRecord {
            trial_id: id,
            env_id: EnvId::BalanceBot,
            mode,
            seed: id,
            outcome,
            duration,
            max_trial_time: 20.0,
            dt: 0.01,
            overruns: 0,
            ticks,
        }
    }

    fn golden_trials() -> Vec<TrialRecord> {
        vec![
            trial(0, Mode::Mpmi, Outcome::Survived, 20.0, vec![tick(0.0, 0.0, 0.5), tick(0.01, 0.02, 0.7)]),
            trial(1, Mode::Mpmi, Outcome::Failed, 5.0, vec![tick(0.0, 0.04, 0.2), tick(0.01, 0.0, 0.4)]),
            trial(2, Mode::UserOnly, Outcome::Failed, 2.5, vec![tick(0.0, 0.1, 0.25)]),
        ]
    }

    #[test]
    fn one_survived_trial() {
        let s = summarize_group(&[trial(0, Mode::Mpmi, Outcome::Survived, 20.0, vec![tick(0.0, 0.0, 1.0)])], Censoring::AtMaxTime).unwrap();
        assert_eq!(s.success_rate, 1.0);
        assert_eq!(s.mean_time_to_failure, Some(20.0));
    }

    #[test]
    fn censoring_arithmetic() {
        let t = &golden_trials()[..2];
        let s = summarize_group(t, Censoring::AtMaxTime).unwrap();
        assert_eq!(s.success_rate, 0.5);
        assert_eq!(s.mean_time_to_failure, Some(12.5));
        let f = summarize_group(t, Censoring::FailedOnly).unwrap();
        assert_eq!(f.mean_time_to_failure, Some(5.0));
        let dev = s.mean_deviation.unwrap();
        assert!((dev.mean - 0.015).abs() < 1e-15);
        assert!((dev.std - 0.005).abs() < 1e-15);
        let safe = s.mean_percent_safe.unwrap();
        assert!((safe.mean - 0.45).abs() < 1e-15);
    }

    #[test]
    fn mixed_groups_rejected() {
        assert!(matches!(summarize_group(&golden_trials(), Censoring::AtMaxTime), Err(Error::Config(_))));
        let mut car = golden_trials()[0].clone();
        car.env_id = EnvId::RaceCar;
        assert!(summarize_group(&[golden_trials()[0].clone(), car], Censoring::AtMaxTime).is_err());
        assert!(summarize(&[], Censoring::AtMaxTime).is_err());
    }

    #[test]
    fn golden_summary_table() {
        let prov = Provenance {
            config_hash: "0123abcd".into(),
            seeds: vec![0, 1, 2],
        };
        let table = format_summary_table(&summarize(&golden_trials(), Censoring::AtMaxTime).unwrap(), &prov);
        let expected = "\
# config 0123abcd
# seeds 0,1,2
Environment  Condition  Avg. Deviation   Avg. % Safe Rollouts  Success Rate  Mean Time to Failure (s)  Trials
-----------  ---------  ---------------  --------------------  ------------  ------------------------  ------
balance_bot  user_only  0.1000 ± 0.0000  0.2500 ± 0.0000       0.00          2.50                      1
balance_bot  mpmi       0.0150 ± 0.0050  0.4500 ± 0.1500       0.50          12.50                     2
";
        assert_eq!(table, expected);
    }

    #[test]
    fn golden_metric_table() {
        let table = format_metric_table(&summarize(&golden_trials(), Censoring::AtMaxTime).unwrap());
        let expected = "\
Metric                Control    balance_bot
--------------------  ---------  ---------------
Avg. Deviation        user_only  0.1000 ± 0.0000
                      mpmi       0.0150 ± 0.0050
Avg. % Safe Rollouts  user_only  0.2500 ± 0.0000
                      mpmi       0.4500 ± 0.1500
";
        assert_eq!(table, expected);
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let prov = Provenance {
            config_hash: "feed".into(),
            seeds: vec![0, 1, 2],
        };
        let trials = golden_trials();
        let (summaries, paths) = export(dir.path(), &trials, Censoring::AtMaxTime, &prov).unwrap();
        let (p2, back) = read_trial_log(&paths.trial_log).unwrap();
        assert_eq!(p2, prov);
        assert_eq!(back, trials);
        assert_eq!(summarize(&back, Censoring::AtMaxTime).unwrap(), summaries);
        let (p3, s3) = read_summary_json(&paths.summary_json).unwrap();
        assert_eq!((p3, s3), (prov.clone(), summaries));
        assert!(export(dir.path(), &[], Censoring::AtMaxTime, &prov).is_err());
    }

    #[test]
    fn trial_log_reports_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ndjson");
        write_trial_log(&path, &golden_trials(), &Provenance::default()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[3] = "[1, 2]";
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(read_trial_log(&path), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn trial_validation() {
        assert!(golden_trials().iter().all(|t| t.validate().is_ok()));
        let mut bad = golden_trials()[1].clone();
        bad.duration = 20.0;
        assert!(bad.validate().is_err());
        let mut bad = golden_trials()[0].clone();
        bad.ticks.swap(0, 1);
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn summaries_ignore_trial_order(
            devs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..20.0), 1..12),
            rot in 0usize..12,
        ) {
            let mut trials: Vec<TrialRecord> = devs
                .iter()
                .enumerate()
                .map(|(i, &(d, s, t))| trial(i as u64, Mode::Mpmi, Outcome::Failed, t, vec![tick(0.0, d, s)]))
                .collect();
            let a = summarize(&trials, Censoring::AtMaxTime).unwrap();
            let len = trials.len();
            trials.rotate_left(rot % len);
            trials.reverse();
            let b = summarize(&trials, Censoring::AtMaxTime).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
