//! Axis-by-axis forward selection over window size, stride, batch size and
//! learning rate.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stride expressed relative to the window size chosen earlier in the search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrideRule {
    One,
    Half,
    Full,
    Fixed(usize),
}

impl StrideRule {
    pub fn resolve(self, window_size: usize) -> usize {
        match self {
            StrideRule::One => 1,
            StrideRule::Half => (window_size / 2).max(1),
            StrideRule::Full => window_size.max(1),
            StrideRule::Fixed(s) => s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetClass {
    FreeTextLong,
    FixedTextShort,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub window_size: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl fmt::Display for HyperConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ws={} st={} bs={} lr={}", self.window_size, self.stride, self.batch_size, self.lr)
    }
}

/// Candidate values per axis. Axes not yet optimized take their provisional
/// value (an index into the axis) while earlier axes are searched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub window_sizes: Vec<usize>,
    pub strides: Vec<StrideRule>,
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub provisional: [usize; 4],
}

pub const AXES: [&str; 4] = ["window_size", "stride", "batch_size", "lr"];

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let sizes = self.axis_sizes();
        for (name, (&n, &p)) in AXES.iter().zip(sizes.iter().zip(&self.provisional)) {
            if n == 0 {
                return Err(Error::Config(format!("search axis `{name}` is empty")));
            }
            if p >= n {
                return Err(Error::Config(format!("provisional index {p} out of range for `{name}`")));
            }
        }
        if self.window_sizes.contains(&0) || self.batch_sizes.contains(&0) || self.learning_rates.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config("search values must be positive".into()));
        }
        Ok(())
    }

    pub fn axis_sizes(&self) -> [usize; 4] {
        [self.window_sizes.len(), self.strides.len(), self.batch_sizes.len(), self.learning_rates.len()]
    }

    fn provisional_config(&self) -> HyperConfig {
        let ws = self.window_sizes[self.provisional[0]];
        HyperConfig {
            window_size: ws,
            stride: self.strides[self.provisional[1]].resolve(ws),
            batch_size: self.batch_sizes[self.provisional[2]],
            lr: self.learning_rates[self.provisional[3]],
        }
    }

    fn candidates(&self, axis: usize, current: &HyperConfig) -> Vec<HyperConfig> {
        match axis {
            0 => self
                .window_sizes
                .iter()
                .map(|&ws| HyperConfig {
                    window_size: ws,
                    stride: self.strides[self.provisional[1]].resolve(ws),
                    ..*current
                })
                .collect(),
            1 => self.strides.iter().map(|r| HyperConfig { stride: r.resolve(current.window_size), ..*current }).collect(),
            2 => self.batch_sizes.iter().map(|&b| HyperConfig { batch_size: b, ..*current }).collect(),
            3 => self.learning_rates.iter().map(|&lr| HyperConfig { lr, ..*current }).collect(),
            _ => unreachable!(),
        }
    }
}

/// Grids used for pre-training: long free-text sessions get 90/100/110-step
/// windows, short fixed-text sessions 40/50/60.
pub fn default_space(class: DatasetClass) -> SearchSpace {
    let window_sizes = match class {
        DatasetClass::FreeTextLong => vec![90, 100, 110],
        DatasetClass::FixedTextShort => vec![40, 50, 60],
    };
    SearchSpace {
        window_sizes,
        strides: vec![StrideRule::One, StrideRule::Half, StrideRule::Full],
        batch_sizes: vec![8, 16, 32],
        learning_rates: vec![1e-3, 1e-4, 1e-5],
        // Half-window stride and batch 16 while earlier axes are tuned.
        provisional: [0, 1, 1, 0],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: HyperConfig,
    /// Mean validation AUC, or `None` when the evaluation failed.
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    pub axis: String,
    pub candidates: Vec<Candidate>,
    pub chosen: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub steps: Vec<SearchStep>,
}

impl SearchTrace {
    /// CSV rows `arch,balancing,step,axis,window_size,stride,batch_size,lr,score,chosen`.
    pub fn to_csv(&self, arch: &str, balancing: &str) -> String {
        let mut out = String::from("arch,balancing,step,axis,window_size,stride,batch_size,lr,mean_val_auc,chosen\n");
        for (i, step) in self.steps.iter().enumerate() {
            for (j, c) in step.candidates.iter().enumerate() {
                let score = c.score.map(|s| format!("{s:.6}")).unwrap_or_else(|| "failed".into());
                out.push_str(&format!(
                    "{arch},{balancing},{i},{},{},{},{},{},{score},{}\n",
                    step.axis,
                    c.config.window_size,
                    c.config.stride,
                    c.config.batch_size,
                    c.config.lr,
                    u8::from(j == step.chosen)
                ));
            }
        }
        out
    }
}

/// First index attaining the maximum score; failed candidates are skipped.
fn argmax_first(candidates: &[Candidate]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        if let Some(s) = c.score {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Optimizes the axes in order (window size, stride, batch size, learning
/// rate), fixing each winner before moving on. The evaluator is called once
/// per candidate, so the total is the sum of the axis sizes.
pub fn forward_select<F>(space: &SearchSpace, evaluator: F) -> Result<(HyperConfig, SearchTrace)>
where
    F: Fn(&HyperConfig) -> Result<f64> + Sync,
{
    space.validate()?;
    let mut current = space.provisional_config();
    let mut trace = SearchTrace::default();
    for (axis, name) in AXES.iter().enumerate() {
        let configs = space.candidates(axis, &current);
        let candidates: Vec<Candidate> = configs
            .par_iter()
            .map(|cfg| match evaluator(cfg) {
                Ok(s) if s.is_finite() => Candidate { config: *cfg, score: Some(s), error: None },
                Ok(s) => Candidate { config: *cfg, score: None, error: Some(format!("non-finite score {s}")) },
                Err(e) => Candidate { config: *cfg, score: None, error: Some(e.to_string()) },
            })
            .collect();
        let chosen = argmax_first(&candidates)
            .ok_or_else(|| Error::Search(format!("every candidate failed on axis `{name}`")))?;
        current = candidates[chosen].config;
        trace.steps.push(SearchStep { axis: name.to_string(), candidates, chosen });
    }
    Ok((current, trace))
}
