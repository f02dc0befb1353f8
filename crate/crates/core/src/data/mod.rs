//! Event schema, ingestion, stitching, trimming, windowing and batching.

mod batch;
mod ingest;
mod schema;
mod sequence;

use std::collections::BTreeMap;

pub use batch::{Batch, PAD_DOMAIN, Token, assemble_batch};
pub use ingest::{IngestOutcome, RecordError, UserDomainEvents, ingest_events, ingest_reader};
pub use schema::{DatasetManifest, DomainId, DomainSpec, Event, EventRecord, Intent, StitchedSequence, TrainingExample};
pub use sequence::{
    DEFAULT_SEQUENCE_CAP, DEFAULT_WINDOW_LEN, slide_windows, slide_windows_with_stride, stitch, trim_to_cap,
};

/// Categorical values observed for each item, taken from its first occurrence.
/// Used to build candidate targets for items that are not the current label.
#[derive(Clone, Debug, Default)]
pub struct ItemCatalog {
    items: BTreeMap<(DomainId, u32), Vec<u32>>,
}

impl ItemCatalog {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a StitchedSequence>) -> Self {
        let mut items = BTreeMap::new();
        for s in seqs {
            for e in &s.events {
                items.entry(e.item_key()).or_insert_with(|| e.categorical.clone());
            }
        }
        Self { items }
    }

    pub fn categorical(&self, domain: DomainId, item: u32) -> Option<&[u32]> {
        self.items.get(&(domain, item)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Stitched, trimmed sequences and their train/test windows.
///
/// Each user's chronologically final window is held out for testing; all of
/// that user's earlier windows are training examples.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub sequences: Vec<StitchedSequence>,
    pub train: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
    pub catalog: ItemCatalog,
}

pub fn prepare(users: &UserDomainEvents, sequence_cap: usize, window_len: usize, stride: usize) -> PreparedData {
    let sequences: Vec<StitchedSequence> = users
        .iter()
        .map(|(&user, lists)| trim_to_cap(stitch(user, lists), sequence_cap))
        .collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in &sequences {
        let mut windows = slide_windows_with_stride(s, window_len, stride);
        if let Some(last) = windows.pop() {
            test.push(last);
            train.extend(windows);
        }
    }
    let catalog = ItemCatalog::from_sequences(&sequences);
    PreparedData { sequences, train, test, catalog }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn users() -> UserDomainEvents {
        let e = |d: u16, i: u32, t: i64| Event {
            domain: DomainId(d),
            item_id: i,
            timestamp: t,
            intent: Intent::High,
            categorical: vec![i % 3],
            property: 0.0,
        };
        let mut m = UserDomainEvents::new();
        m.insert(1, vec![(0..5).map(|t| e(0, t as u32, t * 2)).collect(), (0..4).map(|t| e(1, t as u32, t * 2 + 1)).collect()]);
        m.insert(2, vec![vec![e(0, 7, 0)], vec![]]);
        m
    }

    #[test]
    fn final_window_is_held_out() {
        let p = prepare(&users(), 100, 4, 4);
        assert_eq!(p.sequences.len(), 2);
        // user 1: 9 events -> windows of 4,4 and a dropped 1-event tail
        assert_eq!(p.train.len(), 1);
        assert_eq!(p.test.len(), 1);
        assert!(p.train[0].label.timestamp < p.test[0].context[0].timestamp);
        assert_eq!(p.catalog.categorical(DomainId(0), 4), Some(&[1u32][..]));
    }
}
