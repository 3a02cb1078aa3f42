//! Inference latency and throughput.

use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::Segmenter;
use super::report::{aggregate_means, render2};
use crate::error::{Error, Result};
use crate::model::prepare;
use crate::sample::ImageSample;
use crate::vocab::ClassVocabulary;

/// Times a unit of work in milliseconds.
pub trait Clock {
    fn time(&mut self, work: &mut dyn FnMut() -> Result<()>) -> Result<f64>;
}

pub struct WallClock;

impl Clock for WallClock {
    fn time(&mut self, work: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
        let start = Instant::now();
        work()?;
        Ok(start.elapsed().as_secs_f64() * 1e3)
    }
}

/// Runs the work but reports pre-recorded durations, in order.
pub struct ScriptedClock {
    durations: VecDeque<f64>,
    pub calls: usize,
}

impl ScriptedClock {
    pub fn new(durations: impl IntoIterator<Item = f64>) -> Self {
        ScriptedClock {
            durations: durations.into_iter().collect(),
            calls: 0,
        }
    }
}

impl Clock for ScriptedClock {
    fn time(&mut self, work: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
        work()?;
        self.calls += 1;
        self.durations
            .pop_front()
            .ok_or_else(|| Error::Empty("scripted clock ran out of durations".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub per_dataset_ms: BTreeMap<String, f64>,
    pub mean_ms: f64,
    pub fps: f64,
    pub warmup: usize,
    pub iters: usize,
}

impl SpeedReport {
    pub fn from_per_dataset(per_dataset_ms: BTreeMap<String, f64>, warmup: usize, iters: usize) -> Result<Self> {
        let values: Vec<f64> = per_dataset_ms.values().copied().collect();
        let mean_ms = aggregate_means(&values)?;
        if mean_ms <= 0.0 {
            return Err(Error::Degenerate(format!("mean latency {mean_ms} ms")));
        }
        Ok(SpeedReport {
            per_dataset_ms,
            mean_ms,
            fps: 1000.0 / mean_ms,
            warmup,
            iters,
        })
    }

    /// Per-dataset latencies, then the mean and FPS.
    pub fn markdown(&self) -> String {
        let mut head = String::from("|");
        let mut rule = String::from("|");
        let mut row = String::from("|");
        for (name, ms) in &self.per_dataset_ms {
            head.push_str(&format!(" {name} (ms) |"));
            rule.push_str("---|");
            row.push_str(&format!(" {} |", render2(*ms)));
        }
        head.push_str(" mean (ms) | FPS |\n");
        rule.push_str("---|---|\n");
        row.push_str(&format!(" {} | {} |\n", render2(self.mean_ms), render2(self.fps)));
        head + &rule + &row
    }
}

/// Per dataset: `warmup` untimed forwards, then `iters` timed ones cycling
/// through the samples; reports the per-dataset mean latency.
pub fn speed_benchmark(
    segmenter: &dyn Segmenter,
    datasets: &[(String, Vec<ImageSample>, ClassVocabulary)],
    warmup: usize,
    iters: usize,
    clock: &mut dyn Clock,
) -> Result<SpeedReport> {
    if iters == 0 {
        return Err(Error::Config("iters must be at least 1".into()));
    }
    let mut per = BTreeMap::new();
    for (name, samples, vocab) in datasets {
        if samples.is_empty() {
            return Err(Error::Empty(format!("dataset {name} has no samples")));
        }
        let samples: Vec<ImageSample> = samples.iter().map(prepare).collect();
        for i in 0..warmup {
            segmenter.segment(&samples[i % samples.len()], vocab)?;
        }
        let mut times = Vec::with_capacity(iters);
        for i in 0..iters {
            let s = &samples[i % samples.len()];
            times.push(clock.time(&mut || segmenter.segment(s, vocab).map(|_| ()))?);
        }
        per.insert(name.clone(), aggregate_means(&times)?);
    }
    SpeedReport::from_per_dataset(per, warmup, iters)
}
