//! Line-delimited metric streams: one JSON record per line, written as they
//! are produced so a run's progress can be tailed and plotted.
//!
//! Wallclock stamps are optional; disabling them makes two runs with the
//! same seed byte-identical, which the determinism tests rely on.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

/// Per-agent loss components of one update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub size: f64,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MetricRecord {
    /// Emitted after every training episode.
    Episode {
        episode: u64,
        #[serde(skip_serializing_if = "Option::is_none")]
        wallclock: Option<f64>,
        /// Per-agent episode reward.
        reward: Vec<f64>,
        length: usize,
        /// Per-agent loss components.
        loss: Vec<LossParts>,
        /// Mean hard tree size over the episode (tree variants).
        #[serde(skip_serializing_if = "Option::is_none")]
        tree_size: Option<f64>,
    },
    /// Emitted by periodic greedy evaluation.
    Eval {
        episode: u64,
        #[serde(skip_serializing_if = "Option::is_none")]
        wallclock: Option<f64>,
        /// Per-agent mean reward over the evaluation episodes.
        reward: Vec<f64>,
        total_reward: f64,
        timeout_rate: f64,
        mean_length: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        mean_tree_size: Option<f64>,
    },
}

impl MetricRecord {
    pub fn episode_index(&self) -> u64 {
        match self {
            MetricRecord::Episode { episode, .. } | MetricRecord::Eval { episode, .. } => *episode,
        }
    }
}

/// Serializes records one per line.
pub struct MetricsWriter<W: Write> {
    out: W,
    timestamps: bool,
    start: Instant,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W, timestamps: bool) -> MetricsWriter<W> {
        MetricsWriter { out, timestamps, start: Instant::now() }
    }

    pub fn write(&mut self, mut record: MetricRecord) -> std::io::Result<()> {
        let stamp = self.timestamps.then(|| self.start.elapsed().as_secs_f64());
        match &mut record {
            MetricRecord::Episode { wallclock, .. } | MetricRecord::Eval { wallclock, .. } => {
                *wallclock = stamp;
            }
        }
        serde_json::to_writer(&mut self.out, &record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Parses a metrics stream back into records, skipping blank lines.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Renders rows as a tab-separated table with a header, the plot-ready
/// export format.
pub fn tsv_table(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = header.join("\t");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    out
}
