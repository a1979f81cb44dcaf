//! Seeded synthetic keystroke cohorts.
//!
//! Hold and flight times are log-normal with the profile's mean and
//! coefficient of variation. Serial irregularity comes from an AR(1) latent
//! driving the log-scale noise, and fatigue adds a linear drift within each
//! session. None of this is a clinical model; it only gives the pipeline a
//! controllable class signal.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_labels, Cohort, Label};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeProfile {
    pub ht_mean: f64,
    pub ht_cv: f64,
    pub ft_mean: f64,
    pub ft_cv: f64,
    /// Lag-one autocorrelation of the latent noise, in `[0, 1)`.
    pub jitter_rho: f64,
    /// Seconds added to hold and flight times per 100 keystrokes.
    pub fatigue_drift: f64,
}

impl PhenotypeProfile {
    pub fn control() -> Self {
        Self { ht_mean: 0.10, ht_cv: 0.20, ft_mean: 0.20, ft_cv: 0.30, jitter_rho: 0.2, fatigue_drift: 0.0 }
    }

    /// Means slowed by 30% and variability inflated 2.5x relative to [`control`](Self::control).
    pub fn parkinson() -> Self {
        let hc = Self::control();
        Self {
            ht_mean: hc.ht_mean * 1.3,
            ht_cv: hc.ht_cv * 2.5,
            ft_mean: hc.ft_mean * 1.3,
            ft_cv: hc.ft_cv * 2.5,
            jitter_rho: 0.5,
            fatigue_drift: 0.005,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ht_mean > 0.0 && self.ft_mean > 0.0) {
            return Err(Error::Config("profile means must be positive".into()));
        }
        if !(self.ht_cv >= 0.0 && self.ft_cv >= 0.0) {
            return Err(Error::Config("profile coefficients of variation must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.jitter_rho) {
            return Err(Error::Config(format!("jitter_rho must be in [0, 1), got {}", self.jitter_rho)));
        }
        if !self.fatigue_drift.is_finite() {
            return Err(Error::Config("fatigue_drift must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_pd: usize,
    pub n_hc: usize,
    pub sessions_mean: f64,
    pub sessions_dispersion: f64,
    pub length_mean: f64,
    pub length_dispersion: f64,
    pub pd_profile: PhenotypeProfile,
    pub hc_profile: PhenotypeProfile,
    /// Prepended to every subject id, so cohorts from different stages never collide.
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_pd: 20,
            n_hc: 20,
            sessions_mean: 4.0,
            sessions_dispersion: 0.0,
            length_mean: 200.0,
            length_dispersion: 0.0,
            pd_profile: PhenotypeProfile::parkinson(),
            hc_profile: PhenotypeProfile::control(),
            id_prefix: String::new(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pd == 0 || self.n_hc == 0 {
            return Err(Error::Config("synthetic cohorts need at least one subject per class".into()));
        }
        if !(self.sessions_mean >= 1.0) || !(self.length_mean >= 2.0) {
            return Err(Error::Config("sessions_mean must be >= 1 and length_mean >= 2".into()));
        }
        if !(self.sessions_dispersion >= 0.0 && self.length_dispersion >= 0.0) {
            return Err(Error::Config("dispersions must be >= 0".into()));
        }
        self.pd_profile.validate()?;
        self.hc_profile.validate()
    }

    /// Subject ids and labels in generation order (Parkinson first).
    pub fn labels(&self) -> Vec<(String, Label)> {
        (0..self.n_pd)
            .map(|i| (format!("{}pd{i:03}", self.id_prefix), Label::Parkinson))
            .chain((0..self.n_hc).map(|i| (format!("{}hc{i:03}", self.id_prefix), Label::Control)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub events_csv: Vec<u8>,
    pub labels_csv: Vec<u8>,
}

/// Log-normal draw with the given mean and CV from a standard-normal latent `z`.
#[inline]
fn lognormal(mean: f64, cv: f64, z: f64) -> f64 {
    let sigma = (1.0 + cv * cv).ln().sqrt();
    mean * (sigma * z - 0.5 * sigma * sigma).exp()
}

struct Latent {
    rho: f64,
    z: f64,
}

impl Latent {
    fn new(rho: f64, rng: &mut rng::Rng) -> Self {
        Self { rho, z: rng.sample(StandardNormal) }
    }

    fn next(&mut self, rng: &mut rng::Rng) -> f64 {
        let eps: f64 = rng.sample(StandardNormal);
        self.z = self.rho * self.z + (1.0 - self.rho * self.rho).sqrt() * eps;
        self.z
    }
}

fn draw_count(mean: f64, dispersion: f64, min: usize, rng: &mut rng::Rng) -> usize {
    let z: f64 = rng.sample(StandardNormal);
    ((mean + dispersion * z).round().max(min as f64)) as usize
}

/// Press/release pairs of one session.
pub fn generate_session(profile: &PhenotypeProfile, length: usize, rng: &mut rng::Rng) -> Vec<(f64, f64)> {
    let mut ht_noise = Latent::new(profile.jitter_rho, rng);
    let mut ft_noise = Latent::new(profile.jitter_rho, rng);
    let mut press = rng.random_range(0.0..5.0);
    let mut out = Vec::with_capacity(length);
    for i in 0..length {
        let drift = profile.fatigue_drift * i as f64 / 100.0;
        if i > 0 {
            let ft = lognormal(profile.ft_mean, profile.ft_cv, ft_noise.next(rng)) + drift;
            press = out.last().map(|&(_, r): &(f64, f64)| r).unwrap_or(press) + ft;
        }
        let ht = lognormal(profile.ht_mean, profile.ht_cv, ht_noise.next(rng)) + drift;
        out.push((press, press + ht));
    }
    out
}

fn subject_rows(cfg: &SynthConfig, index: usize, id: &str, label: Label) -> String {
    let mut rng = rng::rng_for(cfg.seed, &[index as u64]);
    let profile = match label {
        Label::Parkinson => &cfg.pd_profile,
        Label::Control => &cfg.hc_profile,
    };
    let n_sessions = draw_count(cfg.sessions_mean, cfg.sessions_dispersion, 1, &mut rng);
    let mut rows = String::new();
    for s in 0..n_sessions {
        let length = draw_count(cfg.length_mean, cfg.length_dispersion, 2, &mut rng);
        for (press, release) in generate_session(profile, length, &mut rng) {
            let key = rng.random_range(0..40u32);
            rows.push_str(&format!("{id},s{s:02},k{key},{press},{release}\n"));
        }
    }
    rows
}

/// Renders the cohort as canonical event and label CSV. Subjects are generated
/// from independent substreams, so the parallel result equals the sequential one.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let labels = cfg.labels();
    let parts: Vec<String> = labels
        .par_iter()
        .enumerate()
        .map(|(i, (id, label))| subject_rows(cfg, i, id, *label))
        .collect();
    let mut events_csv = b"subject_id,session_id,key_id,press_ts,release_ts\n".to_vec();
    for p in parts {
        events_csv.extend_from_slice(p.as_bytes());
    }
    let mut labels_csv = Vec::new();
    write_labels(&labels, &mut labels_csv)?;
    Ok(SynthOutput { events_csv, labels_csv })
}

/// Permutes labels across subjects; the label multiset is unchanged.
pub fn shuffle_labels<S: Clone>(cohort: &Cohort<S>, seed: u64) -> Cohort<S> {
    let mut labels: Vec<Option<Label>> = cohort.subjects.iter().map(|s| s.label).collect();
    labels.shuffle(&mut rng::rng_for(seed, &[0x5EED]));
    let mut out = cohort.clone();
    for (s, l) in out.subjects.iter_mut().zip(labels) {
        s.label = l;
    }
    out
}

/// Label list variant of [`shuffle_labels`].
pub fn shuffle_label_list(labels: &[(String, Label)], seed: u64) -> Vec<(String, Label)> {
    let mut values: Vec<Label> = labels.iter().map(|(_, l)| *l).collect();
    values.shuffle(&mut rng::rng_for(seed, &[0x5EED]));
    labels.iter().zip(values).map(|((id, _), l)| (id.clone(), l)).collect()
}
