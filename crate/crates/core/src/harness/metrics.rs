use std::fs::File;
use std::path::{Path, PathBuf};

use crate::env::{MetricsKind, Ratio, Scenario};
use crate::error::{Error, Result};
use crate::rl::{Algorithm, EpisodeRecord};

pub const CSV_HEADER: [&str; 10] = [
    "algorithm",
    "seed",
    "episode",
    "meanReward",
    "epsilon",
    "loss",
    "live",
    "death",
    "kill",
    "wallClockMs",
];

/// Column index of `wallClockMs`, the only nondeterministic column.
pub const WALL_CLOCK_COLUMN: usize = 9;

/// Episodes at the end of each run that the summary averages over.
pub const SUMMARY_WINDOW: usize = 20;

/// One learning-curve row. `live` is set for Gather and `kill` for Battle.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub episode: usize,
    pub mean_reward: f64,
    pub epsilon: f64,
    pub loss: Option<f64>,
    pub live: Option<u32>,
    pub death: u32,
    pub kill: Option<u32>,
    pub wall_clock_ms: u128,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn from_record(algorithm: Algorithm, seed: u64, r: &EpisodeRecord) -> Self {
        let (live, kill) = match r.metrics.kind {
            MetricsKind::LiveDeath => (Some(r.metrics.primary), None),
            MetricsKind::KillDeath => (None, Some(r.metrics.primary)),
        };
        MetricsRow {
            algorithm,
            seed,
            episode: r.episode,
            mean_reward: r.mean_reward,
            epsilon: r.epsilon,
            loss: r.loss,
            live,
            death: r.metrics.death,
            kill,
            wall_clock_ms: r.wall_clock_ms,
        }
    }

    pub fn scenario(&self) -> Scenario {
        if self.kill.is_some() {
            Scenario::Battle
        } else {
            Scenario::Gather
        }
    }

    /// Survivors in Gather, enemy kills in Battle.
    pub fn primary(&self) -> u32 {
        self.live.or(self.kill).unwrap_or(0)
    }

    pub fn fields(&self) -> [String; 10] {
        [
            self.algorithm.name().to_string(),
            self.seed.to_string(),
            self.episode.to_string(),
            self.mean_reward.to_string(),
            self.epsilon.to_string(),
            opt(&self.loss),
            opt(&self.live),
            self.death.to_string(),
            opt(&self.kill),
            self.wall_clock_ms.to_string(),
        ]
    }

    fn parse(record: &csv::StringRecord) -> std::result::Result<Self, String> {
        if record.len() != CSV_HEADER.len() {
            return Err(format!("expected {} fields, found {}", CSV_HEADER.len(), record.len()));
        }
        fn num<T: std::str::FromStr>(s: &str, col: &str) -> std::result::Result<T, String> {
            s.parse().map_err(|_| format!("{col}: cannot parse {s:?}"))
        }
        fn maybe<T: std::str::FromStr>(s: &str, col: &str) -> std::result::Result<Option<T>, String> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s, col).map(Some)
            }
        }
        let row = MetricsRow {
            algorithm: Algorithm::parse(&record[0]).ok_or_else(|| format!("unknown algorithm {:?}", &record[0]))?,
            seed: num(&record[1], "seed")?,
            episode: num(&record[2], "episode")?,
            mean_reward: num(&record[3], "meanReward")?,
            epsilon: num(&record[4], "epsilon")?,
            loss: maybe(&record[5], "loss")?,
            live: maybe(&record[6], "live")?,
            death: num(&record[7], "death")?,
            kill: maybe(&record[8], "kill")?,
            wall_clock_ms: num(&record[9], "wallClockMs")?,
        };
        if row.live.is_some() == row.kill.is_some() {
            return Err("exactly one of live and kill must be set".into());
        }
        Ok(row)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Metrics {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Appends rows to a metrics file, flushing after each one.
pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(File::create(path)?);
        inner.write_record(CSV_HEADER).map_err(|e| csv_error(path, e))?;
        inner.flush()?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            inner,
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.write_record(row.fields()).map_err(|e| csv_error(&self.path, e))?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Metrics {
            path: path.to_path_buf(),
            line: 1,
            message: "unexpected header".into(),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        rows.push(MetricsRow::parse(&record).map_err(|message| Error::Metrics {
            path: path.to_path_buf(),
            line,
            message,
        })?);
    }
    Ok(rows)
}

/// Per-algorithm summary over the final episodes of every seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub algorithm: Algorithm,
    pub scenario: Scenario,
    pub seeds: usize,
    /// Mean of the per-seed final-window reward means.
    pub mean_reward: f64,
    pub min_seed_reward: f64,
    pub max_seed_reward: f64,
    /// Mean survivors (Gather) or kills (Battle) per episode.
    pub primary: f64,
    pub death: f64,
    pub ratio: Ratio,
}

pub const SUMMARY_HEADER: [&str; 10] = [
    "algorithm",
    "scenario",
    "seeds",
    "meanReward",
    "minSeedReward",
    "maxSeedReward",
    "live",
    "death",
    "kill",
    "ratio",
];

impl SummaryRow {
    pub fn fields(&self) -> [String; 10] {
        let (live, kill) = match self.scenario {
            Scenario::Gather => (self.primary.to_string(), String::new()),
            Scenario::Battle => (String::new(), self.primary.to_string()),
        };
        let ratio = if self.ratio.infinite {
            "inf".to_string()
        } else {
            self.ratio.value.to_string()
        };
        [
            self.algorithm.name().to_string(),
            self.scenario.name().to_string(),
            self.seeds.to_string(),
            self.mean_reward.to_string(),
            self.min_seed_reward.to_string(),
            self.max_seed_reward.to_string(),
            live,
            self.death.to_string(),
            kill,
            ratio,
        ]
    }
}

/// Groups rows by (algorithm, seed), keeps the last `window` episodes of
/// each run, and summarizes per algorithm in [`Algorithm::ALL`] order.
/// Input order does not matter.
pub fn summarize(rows: &[MetricsRow], window: usize) -> Vec<SummaryRow> {
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.algorithm, r.seed, r.episode));
    let mut out = Vec::new();
    for algorithm in Algorithm::ALL {
        let runs: Vec<Vec<&MetricsRow>> = sorted
            .iter()
            .filter(|r| r.algorithm == algorithm)
            .fold(Vec::<Vec<&MetricsRow>>::new(), |mut acc, r| {
                match acc.last_mut() {
                    Some(run) if run[0].seed == r.seed => run.push(r),
                    _ => acc.push(vec![r]),
                }
                acc
            });
        if runs.is_empty() {
            continue;
        }
        let mut seed_means = Vec::with_capacity(runs.len());
        let (mut primary, mut death, mut count) = (0u64, 0u64, 0usize);
        for run in &runs {
            let tail = &run[run.len().saturating_sub(window)..];
            seed_means.push(tail.iter().map(|r| r.mean_reward).sum::<f64>() / tail.len() as f64);
            for r in tail {
                primary += r.primary() as u64;
                death += r.death as u64;
            }
            count += tail.len();
        }
        let ratio = if death == 0 {
            Ratio {
                value: primary as f64,
                infinite: true,
            }
        } else {
            Ratio {
                value: primary as f64 / death as f64,
                infinite: false,
            }
        };
        out.push(SummaryRow {
            algorithm,
            scenario: runs[0][0].scenario(),
            seeds: runs.len(),
            mean_reward: seed_means.iter().sum::<f64>() / seed_means.len() as f64,
            min_seed_reward: seed_means.iter().copied().fold(f64::INFINITY, f64::min),
            max_seed_reward: seed_means.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            primary: primary as f64 / count as f64,
            death: death as f64 / count as f64,
            ratio,
        });
    }
    out
}

pub fn write_summary(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(SUMMARY_HEADER).map_err(|e| csv_error(path, e))?;
    for row in summary {
        w.write_record(row.fields()).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a metrics file and drops the wall-clock column, for comparing
/// two runs byte for byte.
pub fn deterministic_columns(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|line| {
            let mut fields: Vec<&str> = line.split(',').collect();
            if fields.len() > WALL_CLOCK_COLUMN {
                fields.remove(WALL_CLOCK_COLUMN);
            }
            fields.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(algorithm: Algorithm, seed: u64, episode: usize, reward: f64, live: u32, death: u32) -> MetricsRow {
        MetricsRow {
            algorithm,
            seed,
            episode,
            mean_reward: reward,
            epsilon: 0.9,
            loss: (episode > 1).then_some(0.25),
            live: Some(live),
            death,
            kill: None,
            wall_clock_ms: 3,
        }
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        let rows = vec![
            row(Algorithm::Gat, 0, 1, 0.1 + 0.2, 4, 1),
            MetricsRow {
                live: None,
                kill: Some(7),
                ..row(Algorithm::GsGat, 2, 2, -1e-17, 0, 2)
            },
        ];
        for r in &rows {
            w.write(r).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("algorithm,seed,episode,meanReward,epsilon,loss,live,death,kill,wallClockMs\n"));
        assert!(text.contains("GAT,0,1,0.30000000000000004,0.9,,4,1,,3\n"));
        assert_eq!(read_metrics(&path).unwrap(), rows);
    }

    #[test]
    fn summary_window_and_ratio() {
        let mut rows = Vec::new();
        for ep in 1..=25 {
            rows.push(row(Algorithm::Gat, 1, ep, ep as f64, 3, 1));
            rows.push(row(Algorithm::Gat, 0, ep, 0.0, 4, 0));
        }
        rows.reverse();
        let s = summarize(&rows, 20);
        assert_eq!(s.len(), 1);
        let s = &s[0];
        assert_eq!(s.seeds, 2);
        // seed 1 averages episodes 6..=25
        assert_eq!(s.max_seed_reward, 15.5);
        assert_eq!(s.min_seed_reward, 0.0);
        assert_eq!(s.mean_reward, 7.75);
        assert_eq!(s.primary, 3.5);
        assert_eq!(s.death, 0.5);
        assert_eq!(s.ratio.value, 7.0);
    }

    #[test]
    fn bad_rows_report_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            format!("{}\nGAT,0,1,0.5,0.9,,4,1,,3\nGAT,0,x,0.5,0.9,,4,1,,3\n", CSV_HEADER.join(",")),
        )
        .unwrap();
        match read_metrics(&path).unwrap_err() {
            Error::Metrics { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
    }
}
