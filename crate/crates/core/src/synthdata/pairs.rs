use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

use super::ClipRecord;

/// Anchors with one positive each (same identity and emotion) and a list of
/// negatives (different identity or emotion).
#[derive(Clone, Debug)]
pub struct PairBatch<'a> {
    pub anchors: Vec<&'a ClipRecord>,
    pub positives: Vec<&'a ClipRecord>,
    pub negatives: Vec<Vec<&'a ClipRecord>>,
}

impl PairBatch<'_> {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

fn cell(c: &ClipRecord) -> (u32, u32) {
    (c.identity, c.emotion)
}

/// Draws `batch_size` anchors uniformly from the corpus. A positive is drawn
/// uniformly from the anchor's (identity, emotion) cell excluding the anchor,
/// except that an anchor with a sibling segment of the same video takes that
/// sibling. Negatives are drawn uniformly (with replacement) from clips
/// outside the anchor's cell.
pub fn sample_pairs<'a, R: Rng + ?Sized>(
    corpus: &'a [ClipRecord],
    batch_size: usize,
    negatives_per_anchor: usize,
    rng: &mut R,
) -> Result<PairBatch<'a>> {
    if corpus.is_empty() {
        return Err(Error::data("empty corpus"));
    }
    let mut cells: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    let mut videos: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, c) in corpus.iter().enumerate() {
        cells.entry(cell(c)).or_default().push(i);
        videos.entry(c.video_id).or_default().push(i);
    }
    if let Some((key, members)) = cells.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::data(format!(
            "cell (identity {}, emotion {}) has {} clip(s), need at least 2",
            key.0,
            key.1,
            members.len()
        )));
    }
    if negatives_per_anchor > 0 && cells.len() < 2 {
        return Err(Error::data("no valid negatives: corpus has a single (identity, emotion) cell"));
    }

    let mut batch = PairBatch {
        anchors: Vec::with_capacity(batch_size),
        positives: Vec::with_capacity(batch_size),
        negatives: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let a = rng.random_range(0..corpus.len());
        let anchor = &corpus[a];
        let sibling = videos[&anchor.video_id].iter().copied().find(|&i| i != a);
        let p = match sibling {
            Some(s) => s,
            None => {
                let members = &cells[&cell(anchor)];
                // uniform over the cell minus the anchor
                let pick = rng.random_range(0..members.len() - 1);
                let mut chosen = members[pick];
                if chosen == a {
                    chosen = members[members.len() - 1];
                }
                chosen
            }
        };
        let mut negs = Vec::with_capacity(negatives_per_anchor);
        while negs.len() < negatives_per_anchor {
            let n = &corpus[rng.random_range(0..corpus.len())];
            if cell(n) != cell(anchor) {
                negs.push(n);
            }
        }
        batch.anchors.push(anchor);
        batch.positives.push(&corpus[p]);
        batch.negatives.push(negs);
    }
    Ok(batch)
}
