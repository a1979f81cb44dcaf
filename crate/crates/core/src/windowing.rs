//! Fixed-length sliding windows over the four timing channels and per-channel
//! z-score statistics fitted on training windows only.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SignalCohort;
use crate::scalar::Scalar;
use crate::signals::{SignalSequence, CHANNELS, CHANNEL_NAMES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowingConfig {
    pub window_size: usize,
    pub stride: usize,
}

impl WindowingConfig {
    pub fn new(window_size: usize, stride: usize) -> Result<Self> {
        let cfg = Self { window_size, stride };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "window size and stride must be >= 1 (got {} / {})",
                self.window_size, self.stride
            )));
        }
        Ok(())
    }
}

/// A `window_size x 4` slice stored step-major: `values[t * 4 + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window<T> {
    pub subject_id: Arc<str>,
    pub session_id: Arc<str>,
    pub start: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> Window<T> {
    pub fn steps(&self) -> usize {
        self.values.len() / CHANNELS
    }

    #[inline]
    pub fn at(&self, step: usize, c: usize) -> T {
        self.values[step * CHANNELS + c]
    }
}

pub fn window_count(len: usize, cfg: &WindowingConfig) -> usize {
    if len < cfg.window_size {
        0
    } else {
        (len - cfg.window_size) / cfg.stride + 1
    }
}

/// Windows starting at `0, S, 2S, ...` that fit entirely inside the sequence.
pub fn slide<T: Scalar>(seq: &SignalSequence, cfg: &WindowingConfig) -> Vec<Window<T>> {
    let subject: Arc<str> = Arc::from(seq.subject_id.as_str());
    let session: Arc<str> = Arc::from(seq.session_id.as_str());
    (0..window_count(seq.len(), cfg))
        .map(|k| {
            let start = k * cfg.stride;
            let mut values = Vec::with_capacity(cfg.window_size * CHANNELS);
            for t in start..start + cfg.window_size {
                for c in 0..CHANNELS {
                    values.push(T::lit(seq.at(t, c)));
                }
            }
            Window { subject_id: subject.clone(), session_id: session.clone(), start, values }
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct WindowedSubjects<T> {
    pub windows: Vec<Window<T>>,
    /// Requested subjects whose every session was shorter than the window.
    pub skipped: Vec<String>,
}

/// Windows every session of the listed subjects (cohort order).
pub fn window_subjects<T: Scalar>(
    cohort: &SignalCohort,
    subjects: &BTreeSet<String>,
    cfg: &WindowingConfig,
) -> WindowedSubjects<T> {
    let mut out = WindowedSubjects { windows: Vec::new(), skipped: Vec::new() };
    for subject in cohort.subjects.iter().filter(|s| subjects.contains(&s.id)) {
        let before = out.windows.len();
        for session in &subject.sessions {
            out.windows.extend(slide::<T>(session, cfg));
        }
        if out.windows.len() == before {
            out.skipped.push(subject.id.clone());
        }
    }
    out
}

/// Per-channel mean and population standard deviation, tagged with the
/// subjects whose windows produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ChannelStats<T> {
    pub mean: [T; CHANNELS],
    pub std: [T; CHANNELS],
    pub fitted_on: BTreeSet<String>,
}

fn sorted_sum<T: Scalar>(values: &mut [T]) -> T {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite window values"));
    values.iter().copied().fold(T::zero(), |a, b| a + b)
}

/// Fits statistics over every cell of the given windows. Values are summed
/// in sorted order so the result does not depend on window order.
pub fn fit_stats<T: Scalar>(windows: &[Window<T>]) -> Result<ChannelStats<T>> {
    if windows.is_empty() {
        return Err(Error::Data("cannot fit channel statistics on zero windows".into()));
    }
    let mut mean = [T::zero(); CHANNELS];
    let mut std = [T::zero(); CHANNELS];
    for c in 0..CHANNELS {
        let mut vals: Vec<T> = windows.iter().flat_map(|w| w.values.iter().skip(c).step_by(CHANNELS).copied()).collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value in channel `{}`", CHANNEL_NAMES[c])));
        }
        let n = T::from_usize(vals.len()).expect("count fits scalar");
        let m = sorted_sum(&mut vals) / n;
        let mut sq: Vec<T> = vals.iter().map(|&v| (v - m) * (v - m)).collect();
        let s = (sorted_sum(&mut sq) / n).sqrt();
        if !(s > T::zero()) {
            return Err(Error::DegenerateChannel(CHANNEL_NAMES[c]));
        }
        mean[c] = m;
        std[c] = s;
    }
    let fitted_on = windows.iter().map(|w| w.subject_id.to_string()).collect();
    Ok(ChannelStats { mean, std, fitted_on })
}

impl<T: Scalar> ChannelStats<T> {
    /// Fails if any of `subjects` contributed to these statistics.
    pub fn ensure_disjoint<'a>(&self, subjects: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for s in subjects {
            if self.fitted_on.contains(s) {
                return Err(Error::Internal(format!(
                    "leakage: subject `{s}` was used to fit normalization statistics"
                )));
            }
        }
        Ok(())
    }
}

pub fn standardize<T: Scalar>(w: &Window<T>, stats: &ChannelStats<T>) -> Window<T> {
    let values = w
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % CHANNELS;
            (v - stats.mean[c]) / stats.std[c]
        })
        .collect();
    Window { values, ..w.clone() }
}

pub fn destandardize<T: Scalar>(w: &Window<T>, stats: &ChannelStats<T>) -> Window<T> {
    let values = w
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % CHANNELS;
            v * stats.std[c] + stats.mean[c]
        })
        .collect();
    Window { values, ..w.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(len: usize) -> SignalSequence {
        let ramp = |k: f64| (0..len).map(|i| k * i as f64 + 0.01).collect::<Vec<_>>();
        SignalSequence {
            subject_id: "s".into(),
            session_id: "a".into(),
            ht: ramp(1.0),
            ft: ramp(2.0),
            pp: ramp(3.0),
            rr: ramp(4.0),
        }
    }

    fn window(subject: &str, ht: &[f64]) -> Window<f64> {
        let mut values = Vec::new();
        for (i, &h) in ht.iter().enumerate() {
            let i = i as f64;
            values.extend([h, 2.0 * h + i, 3.0 * h + 2.0 * i + 1.0, -h - i]);
        }
        Window { subject_id: subject.into(), session_id: "a".into(), start: 0, values }
    }

    #[test]
    fn counts() {
        assert_eq!(window_count(100, &WindowingConfig::new(90, 45).unwrap()), 1);
        assert_eq!(window_count(50, &WindowingConfig::new(60, 1).unwrap()), 0);
        assert_eq!(window_count(60, &WindowingConfig::new(60, 7).unwrap()), 1);
        assert!(WindowingConfig::new(0, 1).is_err());
        assert!(WindowingConfig::new(3, 0).is_err());
    }

    #[test]
    fn count_for_long_free_text_session() {
        let cfg = WindowingConfig::new(90, 90).unwrap();
        let enumerated = (0..).map(|k| k * 90).take_while(|s| s + 90 <= 1492).count();
        assert_eq!(enumerated, 16);
        assert_eq!(window_count(1492, &cfg), 16);
    }

    #[test]
    fn disjoint_and_overlapping() {
        let s = seq(4);
        let w: Vec<Window<f64>> = slide(&s, &WindowingConfig::new(2, 2).unwrap());
        assert_eq!(w.len(), 2);
        assert_eq!((w[0].start, w[1].start), (0, 2));
        assert_eq!(w[1].at(0, 0), s.ht[2]);
        let w: Vec<Window<f64>> = slide(&seq(3), &WindowingConfig::new(2, 1).unwrap());
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].at(1, 3), w[1].at(0, 3));
    }

    #[test]
    fn degenerate_channel() {
        let err = fit_stats(&[window("a", &[0.5, 0.5, 0.5])]).unwrap_err();
        assert!(matches!(err, Error::DegenerateChannel("ht")));
    }

    #[test]
    fn population_std() {
        let stats = fit_stats(&[window("a", &[0.0]), window("b", &[2.0])]).unwrap();
        assert_eq!(stats.mean[0], 1.0);
        assert_eq!(stats.std[0], 1.0);
    }

    #[test]
    fn standardize_roundtrip_and_mean() {
        let ws = vec![window("a", &[0.1, 0.4, 0.2]), window("b", &[0.3, 0.9, 0.05])];
        let stats = fit_stats(&ws).unwrap();
        let z: Vec<_> = ws.iter().map(|w| standardize(w, &stats)).collect();
        for c in 0..CHANNELS {
            let vals: Vec<f64> = z.iter().flat_map(|w| (0..w.steps()).map(move |t| w.at(t, c))).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-9 && (v.sqrt() - 1.0).abs() < 1e-9);
        }
        for (w, zw) in ws.iter().zip(&z) {
            let back = destandardize(zw, &stats);
            for (a, b) in w.values.iter().zip(&back.values) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let at_mean = Window { values: (0..8).map(|i| stats.mean[i % 4]).collect(), ..ws[0].clone() };
        assert!(standardize(&at_mean, &stats).values.iter().all(|&v| v == 0.0));
        assert!(stats.ensure_disjoint(["c"]).is_ok());
        assert!(stats.ensure_disjoint(["a"]).is_err());
    }
}
