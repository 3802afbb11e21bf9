//! Open-set verification metrics over pairs of embeddings.
//!
//! A pair is *accepted* as same-device when its cosine distance is `≤ T`.
//! FAR is the accepted fraction of impostor pairs, FRR the rejected
//! fraction of genuine pairs.

use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::counters::{self, CounterSnapshot};
use crate::error::{Error, Result};
use crate::extractor::Embedding;
use crate::seeds;

pub const DEFAULT_MAX_PAIRS: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub distance: f64,
    pub genuine: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
}

impl PairSet {
    pub fn from_distances(genuine: &[f64], impostor: &[f64]) -> Self {
        let pairs = genuine
            .iter()
            .map(|&distance| Pair {
                distance,
                genuine: true,
            })
            .chain(impostor.iter().map(|&distance| Pair {
                distance,
                genuine: false,
            }))
            .collect();
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn counts(&self) -> (usize, usize) {
        let g = self.pairs.iter().filter(|p| p.genuine).count();
        (g, self.pairs.len() - g)
    }

    fn check(&self) -> Result<(usize, usize)> {
        let (g, i) = self.counts();
        if g == 0 || i == 0 {
            return Err(Error::Protocol(format!(
                "need genuine and impostor pairs, got {g} genuine / {i} impostor"
            )));
        }
        if self.pairs.iter().any(|p| !p.distance.is_finite()) {
            return Err(Error::Protocol("non-finite pair distance".into()));
        }
        Ok((g, i))
    }

    fn sorted(&self) -> Vec<Pair> {
        let mut v = self.pairs.clone();
        v.sort_by(|a, b| a.distance.total_cmp(&b.distance));
        v
    }
}

/// Samples up to `max_pairs` pairs, balanced between genuine and impostor
/// where both kinds are plentiful. All pairs are returned when they fit.
pub fn make_pairs(embeddings: &[Embedding], labels: &[usize], max_pairs: usize, seed: u64) -> Result<PairSet> {
    if embeddings.len() != labels.len() {
        return Err(Error::dim("make_pairs", &[embeddings.len()], &[labels.len()]));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Protocol("pairwise protocol needs at least two devices".into()));
    }
    let units: Vec<Vec<f64>> = embeddings.iter().map(Embedding::unit).collect::<Result<_>>()?;

    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] {
                genuine.push((i, j));
            } else {
                impostor.push((i, j));
            }
        }
    }

    let (g_total, i_total) = (genuine.len(), impostor.len());
    let (g_take, i_take) = if g_total + i_total <= max_pairs {
        (g_total, i_total)
    } else {
        let half = max_pairs / 2;
        let g = g_total.min(half);
        let i = i_total.min(max_pairs - g);
        (g_total.min(max_pairs - i), i)
    };

    let mut rng = seeds::rng(seed);
    let mut pick = |all: &[(usize, usize)], n: usize| -> Vec<(usize, usize)> {
        if n >= all.len() {
            return all.to_vec();
        }
        let mut chosen = index::sample(&mut rng, all.len(), n).into_vec();
        chosen.sort_unstable();
        chosen.into_iter().map(|k| all[k]).collect()
    };
    let g_pairs = pick(&genuine, g_take);
    let i_pairs = pick(&impostor, i_take);

    let dist = |(i, j): (usize, usize)| unit_cosine_distance(&units[i], &units[j]);
    let pairs = g_pairs
        .into_iter()
        .map(|p| Pair {
            distance: dist(p),
            genuine: true,
        })
        .chain(i_pairs.into_iter().map(|p| Pair {
            distance: dist(p),
            genuine: false,
        }))
        .collect();
    Ok(PairSet { pairs })
}

/// `1 − u·v` for unit vectors, evaluated as `½‖u − v‖²` so identical inputs
/// give exactly zero and small distances keep their precision.
pub(crate) fn unit_cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (0.5 * sq).clamp(0.0, 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Operating points at every distinct distance, ascending.
pub fn roc(pairs: &PairSet) -> Result<Vec<RocPoint>> {
    let (g, i) = pairs.check()?;
    let sorted = pairs.sorted();
    let mut out = Vec::new();
    let (mut gen_acc, mut imp_acc) = (0usize, 0usize);
    let mut k = 0;
    while k < sorted.len() {
        let t = sorted[k].distance;
        while k < sorted.len() && sorted[k].distance == t {
            if sorted[k].genuine {
                gen_acc += 1;
            } else {
                imp_acc += 1;
            }
            k += 1;
        }
        out.push(RocPoint {
            threshold: t,
            far: imp_acc as f64 / i as f64,
            frr: (g - gen_acc) as f64 / g as f64,
        });
    }
    Ok(out)
}

/// Equal error rate and its threshold.
///
/// Candidate thresholds are the distinct distances and the midpoints between
/// neighbours; a midpoint accepts exactly the same pairs as the distance below
/// it, so only the distinct distances need evaluating. The first threshold
/// minimising `|FAR − FRR|` wins and `(FAR + FRR)/2` is reported there.
pub fn compute_eer(pairs: &PairSet) -> Result<(f64, f64)> {
    let points = roc(pairs)?;
    let mut best = &points[0];
    for p in &points[1..] {
        if (p.far - p.frr).abs() < (best.far - best.frr).abs() {
            best = p;
        }
    }
    Ok(((best.far + best.frr) / 2.0, best.threshold))
}

/// Probability that a random genuine pair is closer than a random impostor
/// pair, ties counting one half.
pub fn compute_auc(pairs: &PairSet) -> Result<f64> {
    let (g, i) = pairs.check()?;
    let sorted = pairs.sorted();
    let mut gen_below = 0usize;
    let mut favourable = 0.0;
    let mut k = 0;
    while k < sorted.len() {
        let t = sorted[k].distance;
        let (mut g_eq, mut i_eq) = (0usize, 0usize);
        while k < sorted.len() && sorted[k].distance == t {
            if sorted[k].genuine {
                g_eq += 1;
            } else {
                i_eq += 1;
            }
            k += 1;
        }
        favourable += i_eq as f64 * (gen_below as f64 + 0.5 * g_eq as f64);
        gen_below += g_eq;
    }
    Ok(favourable / (g as f64 * i as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub wall_seconds: f64,
    pub counters: CounterSnapshot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub roc: Vec<RocPoint>,
    pub auc: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub pair_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingRecord>,
}

impl EvalReport {
    pub fn from_pairs(pairs: &PairSet) -> Result<Self> {
        let (eer, eer_threshold) = compute_eer(pairs)?;
        Ok(Self {
            roc: roc(pairs)?,
            auc: compute_auc(pairs)?,
            eer,
            eer_threshold,
            pair_count: pairs.len(),
            timing: None,
        })
    }

    /// `threshold,far,frr` rows with a header line.
    pub fn roc_csv(&self) -> String {
        let mut s = String::from("threshold,far,frr\n");
        for p in &self.roc {
            s.push_str(&format!("{},{},{}\n", p.threshold, p.far, p.frr));
        }
        s
    }
}

/// Runs `procedure` with freshly reset counters and reports monotonic wall
/// time plus the counters accumulated on this thread.
pub fn timing_harness<T>(procedure: impl FnOnce() -> T) -> (T, TimingRecord) {
    counters::reset();
    let start = Instant::now();
    let out = procedure();
    let wall_seconds = start.elapsed().as_secs_f64();
    let record = TimingRecord {
        wall_seconds,
        counters: counters::snapshot(),
    };
    (out, record)
}
