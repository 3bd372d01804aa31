use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::beat::{apply_forward, jitter_params, synth_epicardial_beat, BeatParams, BodySurfaceRecord, EpicardialBeat};
use super::geometry::{synth_transfer_matrix, TransferOperator};
use crate::error::{Error, Result};
use crate::rng;

const STREAM_OPERATOR: u64 = 1;
const STREAM_SITES: u64 = 2;
const STREAM_BEAT: u64 = 3;
const STREAM_NOISE: u64 = 4;
const STREAM_SPLIT: u64 = 5;
const STREAM_HEART: u64 = 6;

/// Parameters of a synthetic leave-hearts-out dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub hearts: usize,
    pub beats_per_heart: usize,
    /// Per-heart beat counts; overrides `beats_per_heart` when set.
    pub beat_counts: Option<Vec<usize>>,
    pub pacing_sites_per_heart: usize,
    pub n_h: usize,
    pub n_b: usize,
    pub t: usize,
    pub snr_db: f64,
    pub seed: u64,
    /// The last `test_hearts` heart ids form the test split.
    pub test_hearts: usize,
    /// Fraction of training-heart beats held out for validation.
    pub val_fraction: f64,
    pub beat: BeatParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            hearts: 6,
            beats_per_heart: 48,
            beat_counts: None,
            pacing_sites_per_heart: 8,
            n_h: 24,
            n_b: 12,
            t: 64,
            snr_db: 20.0,
            seed: 42,
            test_hearts: 1,
            val_fraction: 0.2,
            beat: BeatParams::default(),
        }
    }
}

impl DatasetConfig {
    /// Seven hearts and 380 beats: 309 from three training hearts and the
    /// rest from four held-out hearts.
    pub fn full_scale() -> Self {
        Self {
            hearts: 7,
            beat_counts: Some(vec![103, 103, 103, 18, 18, 18, 17]),
            test_hearts: 4,
            ..Self::default()
        }
    }

    fn beats_for(&self, heart: usize) -> usize {
        match &self.beat_counts {
            Some(counts) => counts[heart],
            None => self.beats_per_heart,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.hearts == 0 || self.n_h == 0 || self.n_b == 0 || self.pacing_sites_per_heart == 0 {
            return Err(Error::Config("hearts, n_h, n_b and pacing sites must be positive".into()));
        }
        if self.test_hearts > 0 && self.hearts < 2 {
            return Err(Error::Config("a test split needs at least 2 hearts".into()));
        }
        if self.test_hearts >= self.hearts && self.test_hearts > 0 {
            return Err(Error::Config(format!(
                "{} test hearts leave no training hearts out of {}",
                self.test_hearts, self.hearts
            )));
        }
        if let Some(c) = &self.beat_counts {
            if c.len() != self.hearts {
                return Err(Error::Config(format!(
                    "beat_counts has {} entries for {} hearts",
                    c.len(),
                    self.hearts
                )));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

/// One (x₀, y) training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub beat: EpicardialBeat,
    pub record: BodySurfaceRecord,
}

/// Leave-hearts-out partition of paired beats.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub n_h: usize,
    pub n_b: usize,
    pub t: usize,
    pub snr_db: f64,
    pub train: Vec<Pair>,
    pub validation: Vec<Pair>,
    pub test: Vec<Pair>,
    /// Transfer operator of each heart, indexed by heart id. Empty when the
    /// dataset was loaded without its operator sidecar.
    pub operators: Vec<(u32, TransferOperator)>,
}

impl DatasetSplit {
    pub fn operator(&self, heart_id: u32) -> Option<&TransferOperator> {
        self.operators
            .iter()
            .find(|(id, _)| *id == heart_id)
            .map(|(_, op)| op)
    }

    pub fn all_pairs(&self) -> impl Iterator<Item = &Pair> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

/// Generates the synthetic dataset. Every beat draws from generators
/// derived from `(seed, heart, beat)`, so generation order is irrelevant.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let mut operators = Vec::with_capacity(cfg.hearts);
    let mut trainval = Vec::new();
    let mut test = Vec::new();
    let first_test = cfg.hearts - cfg.test_hearts;
    for heart in 0..cfg.hearts {
        let h = heart as u64;
        let op = synth_transfer_matrix(cfg.n_b, cfg.n_h, rng::derive_seed(cfg.seed, &[STREAM_OPERATOR, h]))?;
        let mut site_rng = rng::stream(cfg.seed, &[STREAM_SITES, h]);
        let mut nodes: Vec<usize> = (0..cfg.n_h).collect();
        nodes.shuffle(&mut site_rng);
        let sites = &nodes[..cfg.pacing_sites_per_heart.min(cfg.n_h)];
        let heart_params = jitter_params(&cfg.beat, &mut rng::stream(cfg.seed, &[STREAM_HEART, h]));
        for b in 0..cfg.beats_for(heart) {
            let mut beat_rng = rng::stream(cfg.seed, &[STREAM_BEAT, h, b as u64]);
            let params = jitter_params(&heart_params, &mut beat_rng);
            let beat = synth_epicardial_beat(&op, sites[b % sites.len()], cfg.t, &params, heart as u32, &mut beat_rng)?;
            let noise_seed = rng::derive_seed(cfg.seed, &[STREAM_NOISE, h, b as u64]);
            let record = apply_forward(&op, &beat, cfg.snr_db, noise_seed)?;
            let pair = Pair { beat, record };
            if heart >= first_test {
                test.push(pair);
            } else {
                trainval.push(pair);
            }
        }
        operators.push((heart as u32, op));
    }

    let n_val = (cfg.val_fraction * trainval.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..trainval.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, &[STREAM_SPLIT]));
    let val_idx: BTreeSet<usize> = order[..n_val].iter().copied().collect();
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (i, pair) in trainval.into_iter().enumerate() {
        if val_idx.contains(&i) {
            validation.push(pair);
        } else {
            train.push(pair);
        }
    }

    let split = DatasetSplit {
        n_h: cfg.n_h,
        n_b: cfg.n_b,
        t: cfg.t,
        snr_db: cfg.snr_db,
        train,
        validation,
        test,
        operators,
    };
    audit_split(&split)?;
    Ok(split)
}

/// Sizes and heart sets of a split, after checking heart disjointness.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAudit {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub train_hearts: BTreeSet<u32>,
    pub test_hearts: BTreeSet<u32>,
}

pub fn audit_split(split: &DatasetSplit) -> Result<SplitAudit> {
    let hearts = |pairs: &[Pair]| -> BTreeSet<u32> { pairs.iter().map(|p| p.beat.heart_id).collect() };
    let mut train_hearts = hearts(&split.train);
    train_hearts.extend(hearts(&split.validation));
    let test_hearts = hearts(&split.test);
    if let Some(h) = train_hearts.intersection(&test_hearts).next() {
        return Err(Error::Config(format!("heart {h} appears in both training and test splits")));
    }
    for p in split.all_pairs() {
        let (xs, ys) = (p.beat.potentials.shape(), p.record.potentials.shape());
        if xs != [split.n_h, split.t] || ys != [split.n_b, split.t] {
            return Err(Error::Config(format!("pair shapes {xs:?}/{ys:?} disagree with header")));
        }
    }
    Ok(SplitAudit {
        train: split.train.len(),
        validation: split.validation.len(),
        test: split.test.len(),
        train_hearts,
        test_hearts,
    })
}
