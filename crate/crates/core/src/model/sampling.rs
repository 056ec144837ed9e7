//! In-memory training segments and triplet sampling.

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Domain, Mode};
use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    pub n_negatives: usize,
    pub mode: Mode,
    /// Keep the highest-scoring negatives out of `hard_pool` candidates.
    pub hard_negatives: bool,
    pub hard_pool: usize,
    pub seed: u64,
}

impl TripletConfig {
    pub fn new(mode: Mode, seed: u64) -> Self {
        TripletConfig {
            margin: 0.1,
            n_negatives: 4,
            mode,
            hard_negatives: false,
            hard_pool: 20,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config("margin must be positive".into()));
        }
        if self.n_negatives == 0 {
            return Err(Error::Config("at least one negative is required".into()));
        }
        if self.hard_negatives && self.hard_pool < self.n_negatives {
            return Err(Error::Config(
                "hard-negative pool smaller than the negative count".into(),
            ));
        }
        Ok(())
    }

    /// Negatives drawn per triplet before any hard selection.
    pub fn candidates_per_triplet(&self) -> usize {
        if self.hard_negatives {
            self.hard_pool
        } else {
            self.n_negatives
        }
    }
}

/// One 3-second segment's model input.
#[derive(Debug, Clone)]
pub struct TrainItem {
    /// Dense label in `0..n_singers`.
    pub singer: usize,
    pub track: usize,
    pub domain: Domain,
    pub features: Arc<[f32]>,
}

/// Model inputs for every training segment, indexed by domain and singer.
#[derive(Debug, Clone)]
pub struct SegmentBank {
    pub input_len: usize,
    pub n_singers: usize,
    items: Vec<TrainItem>,
    index: [Vec<Vec<usize>>; 2],
}

fn slot(d: Domain) -> usize {
    match d {
        Domain::Monophonic => 0,
        Domain::Mixed => 1,
    }
}

impl SegmentBank {
    pub fn new(input_len: usize, n_singers: usize) -> Self {
        SegmentBank {
            input_len,
            n_singers,
            items: Vec::new(),
            index: [vec![Vec::new(); n_singers], vec![Vec::new(); n_singers]],
        }
    }

    pub fn push(&mut self, item: TrainItem) -> Result<usize> {
        if item.features.len() != self.input_len {
            return Err(Error::shape(
                format!("{} features", self.input_len),
                format!("{}", item.features.len()),
            ));
        }
        if item.singer >= self.n_singers {
            return Err(Error::IndexOutOfRange {
                index: item.singer,
                len: self.n_singers,
            });
        }
        let id = self.items.len();
        self.index[slot(item.domain)][item.singer].push(id);
        self.items.push(item);
        Ok(id)
    }

    pub fn items(&self) -> &[TrainItem] {
        &self.items
    }

    pub fn item(&self, id: usize) -> &TrainItem {
        &self.items[id]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Item ids of one singer in one domain.
    pub fn of(&self, domain: Domain, singer: usize) -> &[usize] {
        &self.index[slot(domain)][singer]
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.index[slot(domain)].iter().map(Vec::len).sum()
    }

    /// All ids of one domain, in insertion order.
    pub fn ids(&self, domain: Domain) -> Vec<usize> {
        (0..self.items.len())
            .filter(|&i| self.items[i].domain == domain)
            .collect()
    }

    /// Concatenated features of the given items.
    pub fn gather(&self, ids: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(ids.len() * self.input_len);
        for &i in ids {
            out.extend_from_slice(&self.items[i].features);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Singers that can serve as anchors: an anchor-domain item plus a distinct
/// other-domain item.
fn anchor_singers(bank: &SegmentBank, mode: Mode) -> Vec<usize> {
    let (a, o) = (mode.anchor_domain(), mode.other_domain());
    (0..bank.n_singers)
        .filter(|&s| {
            let na = bank.of(a, s).len();
            let no = bank.of(o, s).len();
            if a == o {
                na >= 2
            } else {
                na >= 1 && no >= 1
            }
        })
        .collect()
}

/// Draws `batch_size` triplets. Anchor and positive share a singer (on
/// different tracks when one exists); negatives come from other singers.
/// With hard negatives enabled each triplet carries the whole candidate
/// pool; see [`keep_hardest`].
pub fn sample_triplets(
    bank: &SegmentBank,
    config: &TripletConfig,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<Triplet>> {
    config.validate()?;
    let (a_dom, o_dom) = (config.mode.anchor_domain(), config.mode.other_domain());
    let anchors = anchor_singers(bank, config.mode);
    let skipped = (0..bank.n_singers)
        .filter(|s| !bank.of(a_dom, *s).is_empty() && !anchors.contains(s))
        .count();
    if skipped > 0 {
        log::warn!("{skipped} singer(s) lack a second usable segment and are skipped as anchors");
    }
    let with_other: Vec<usize> = (0..bank.n_singers)
        .filter(|&s| !bank.of(o_dom, s).is_empty())
        .collect();
    if anchors.is_empty() || with_other.len() < 2 {
        return Err(Error::Empty("training segments for at least two singers"));
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let singer = *anchors.choose(rng).expect("non-empty");
        let anchor = *bank.of(a_dom, singer).choose(rng).expect("non-empty");
        let anchor_track = bank.item(anchor).track;
        let pool: Vec<usize> = bank
            .of(o_dom, singer)
            .iter()
            .copied()
            .filter(|&i| i != anchor)
            .collect();
        let other_tracks: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&i| bank.item(i).track != anchor_track)
            .collect();
        let positive = *if other_tracks.is_empty() {
            &pool
        } else {
            &other_tracks
        }
        .choose(rng)
        .expect("anchor singer has a positive");
        let negatives = (0..config.candidates_per_triplet())
            .map(|_| {
                let s = loop {
                    let s = with_other[rng.random_range(0..with_other.len())];
                    if s != singer {
                        break s;
                    }
                };
                *bank.of(o_dom, s).choose(rng).expect("non-empty")
            })
            .collect();
        out.push(Triplet {
            anchor,
            positive,
            negatives,
        });
    }
    Ok(out)
}

/// Keeps the `n` negatives with the highest similarity to the anchor
/// (stable: earlier candidates win ties).
pub fn keep_hardest(triplet: &mut Triplet, scores: &[f64], n: usize) {
    let mut order: Vec<usize> = (0..triplet.negatives.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    triplet.negatives = order[..n.min(order.len())]
        .iter()
        .map(|&i| triplet.negatives[i])
        .collect();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn toy_bank() -> SegmentBank {
        let mut b = SegmentBank::new(2, 4);
        for singer in 0..4 {
            for track in 0..3 {
                for domain in [Domain::Monophonic, Domain::Mixed] {
                    b.push(TrainItem {
                        singer,
                        track: singer * 10 + track,
                        domain,
                        features: Arc::from(vec![singer as f32, track as f32]),
                    })
                    .unwrap();
                }
            }
        }
        b
    }

    #[test]
    fn roles_follow_mode() {
        let bank = toy_bank();
        for mode in [Mode::Mono, Mode::Mixed, Mode::Cross] {
            let cfg = TripletConfig::new(mode, 3);
            let ts = sample_triplets(&bank, &cfg, 64, &mut seed::rng(1)).unwrap();
            for t in &ts {
                let a = bank.item(t.anchor);
                let p = bank.item(t.positive);
                assert_eq!(a.domain, mode.anchor_domain());
                assert_eq!(p.domain, mode.other_domain());
                assert_eq!(a.singer, p.singer);
                assert_ne!(a.track, p.track);
                assert_eq!(t.negatives.len(), 4);
                for &n in &t.negatives {
                    assert_ne!(bank.item(n).singer, a.singer);
                    assert_eq!(bank.item(n).domain, mode.other_domain());
                }
            }
        }
    }

    #[test]
    fn deterministic_and_hard_pool() {
        let bank = toy_bank();
        let mut cfg = TripletConfig::new(Mode::Cross, 3);
        let a = sample_triplets(&bank, &cfg, 8, &mut seed::rng(5)).unwrap();
        let b = sample_triplets(&bank, &cfg, 8, &mut seed::rng(5)).unwrap();
        assert_eq!(a, b);
        cfg.hard_negatives = true;
        let mut h = sample_triplets(&bank, &cfg, 1, &mut seed::rng(5)).unwrap();
        assert_eq!(h[0].negatives.len(), 20);
        let scores: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let top: Vec<usize> = h[0].negatives[16..].iter().rev().copied().collect();
        keep_hardest(&mut h[0], &scores, 4);
        assert_eq!(h[0].negatives, top);
    }

    #[test]
    fn needs_two_singers() {
        let mut b = SegmentBank::new(1, 1);
        for track in 0..2 {
            b.push(TrainItem {
                singer: 0,
                track,
                domain: Domain::Monophonic,
                features: Arc::from(vec![0.0f32]),
            })
            .unwrap();
        }
        let cfg = TripletConfig::new(Mode::Mono, 0);
        assert!(sample_triplets(&b, &cfg, 4, &mut seed::rng(0)).is_err());
    }
}
