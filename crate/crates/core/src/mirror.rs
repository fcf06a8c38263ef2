//! Mirror trials (left/right hemisphere channels exchanged, label flipped)
//! and the positive/negative pair lists built from them.

use serde::{Deserialize, Serialize};

use crate::data::trial::{Provenance, Trial};
use crate::error::{Error, Result};

/// Channel permutation exchanging homologous left/right electrodes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMirrorMap {
    pub swap_pairs: Vec<(usize, usize)>,
    pub fixed: Vec<usize>,
}

impl ChannelMirrorMap {
    /// `[C3, Cz, C4]`: swap C3 and C4, keep Cz.
    pub fn c3_cz_c4() -> Self {
        ChannelMirrorMap {
            swap_pairs: vec![(0, 2)],
            fixed: vec![1],
        }
    }

    /// Builds a map from electrode-name pairs over a montage; channels not
    /// named in any pair are midline (fixed).
    pub fn from_names(channel_names: &[String], pairs: &[(String, String)]) -> Result<Self> {
        let find = |n: &str| {
            channel_names
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| Error::Config(format!("mirror pair names unknown channel {n:?}")))
        };
        let mut swap_pairs = Vec::with_capacity(pairs.len());
        for (l, r) in pairs {
            swap_pairs.push((find(l)?, find(r)?));
        }
        let fixed = (0..channel_names.len())
            .filter(|i| !swap_pairs.iter().any(|&(a, b)| a == *i || b == *i))
            .collect();
        let map = ChannelMirrorMap { swap_pairs, fixed };
        map.validate(channel_names.len())?;
        Ok(map)
    }

    /// Every channel index `< n_channels` must occur exactly once.
    pub fn validate(&self, n_channels: usize) -> Result<()> {
        let mut seen = vec![0usize; n_channels];
        let all = self
            .swap_pairs
            .iter()
            .flat_map(|&(a, b)| [a, b])
            .chain(self.fixed.iter().copied());
        for i in all {
            if i >= n_channels {
                return Err(Error::Config(format!(
                    "mirror map refers to channel {i} but trials have {n_channels} channels"
                )));
            }
            seen[i] += 1;
        }
        if let Some(i) = seen.iter().position(|&c| c != 1) {
            return Err(Error::Config(format!(
                "mirror map covers channel {i} {} times (must be exactly once)",
                seen[i]
            )));
        }
        Ok(())
    }

    /// `perm[c]` is the source channel of output channel `c`.
    pub fn permutation(&self, n_channels: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n_channels).collect();
        for &(a, b) in &self.swap_pairs {
            perm[a] = b;
            perm[b] = a;
        }
        perm
    }
}

/// Mirror counterpart: channels permuted by `map`, label flipped.
/// The provenance toggles, so mirroring twice restores the original.
pub fn mirror_trial(t: &Trial, map: &ChannelMirrorMap) -> Result<Trial> {
    map.validate(t.channels())?;
    let perm = map.permutation(t.channels());
    let c = t.channels();
    let data: Vec<f64> = t
        .data()
        .chunks(c)
        .flat_map(|row| perm.iter().map(move |&src| row[src]))
        .collect();
    let mut out = Trial::new(t.samples(), c, data, t.label.flipped(), t.subject_id)?;
    out.provenance = match t.provenance {
        Provenance::Original => Provenance::Mirror,
        Provenance::Mirror => Provenance::Original,
    };
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairKind {
    OrigOrig,
    MirrorOrig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    /// +1 for same-class pairs, -1 otherwise.
    pub g: i8,
    pub kind: PairKind,
}

/// Pairs over a stacked batch of `B` originals followed by their `B`
/// mirrors: rows `0..B` are originals, row `B + k` is the mirror of `k`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairList {
    pub batch: usize,
    pub pairs: Vec<Pair>,
}

impl PairList {
    pub fn of_kind(&self, kind: PairKind) -> impl Iterator<Item = &Pair> {
        self.pairs.iter().filter(move |p| p.kind == kind)
    }

    pub fn count(&self, kind: PairKind) -> usize {
        self.of_kind(kind).count()
    }

    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.g > 0).count()
    }

    pub fn negatives(&self) -> usize {
        self.pairs.iter().filter(|p| p.g < 0).count()
    }
}

/// All unordered original pairs `i < j`, plus every mirror × original pair
/// (including each mirror with its own source trial).
pub fn build_pairs(originals: &[Trial], mirrors: &[Trial]) -> Result<PairList> {
    let b = originals.len();
    if b == 0 {
        return Err(Error::Pair("cannot build pairs from an empty batch".into()));
    }
    if mirrors.len() != b {
        return Err(Error::Pair(format!(
            "{} originals but {} mirrors",
            b,
            mirrors.len()
        )));
    }
    if let Some(k) = (0..b).find(|&k| mirrors[k].label != originals[k].label.flipped()) {
        return Err(Error::Pair(format!(
            "mirror #{k} does not carry the flipped label of its original"
        )));
    }
    let g = |a: &Trial, c: &Trial| if a.label == c.label { 1 } else { -1 };
    let mut pairs = Vec::with_capacity(b * (b - 1) / 2 + b * b);
    for i in 0..b {
        for j in i + 1..b {
            pairs.push(Pair {
                i,
                j,
                g: g(&originals[i], &originals[j]),
                kind: PairKind::OrigOrig,
            });
        }
    }
    for (m, mirror) in mirrors.iter().enumerate() {
        for (j, orig) in originals.iter().enumerate() {
            pairs.push(Pair {
                i: b + m,
                j,
                g: g(mirror, orig),
                kind: PairKind::MirrorOrig,
            });
        }
    }
    Ok(PairList { batch: b, pairs })
}
