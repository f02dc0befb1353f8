use super::schema::{Event, Intent, StitchedSequence, TrainingExample};

pub const DEFAULT_SEQUENCE_CAP: usize = 5000;
pub const DEFAULT_WINDOW_LEN: usize = 800;

/// Merges per-domain lists into one sequence ordered by
/// `(timestamp, domain index, item_id)`.
pub fn stitch(user_id: u64, per_domain: &[Vec<Event>]) -> StitchedSequence {
    let mut events: Vec<Event> = per_domain.iter().flatten().cloned().collect();
    // stable, so equal keys keep their per-domain order
    events.sort_by_key(|e| (e.timestamp, e.domain, e.item_id));
    StitchedSequence { user_id, events }
}

/// Caps the sequence length at `cap`, dropping the oldest low-intent events
/// first and only then the oldest high-intent events. Relative order is kept.
pub fn trim_to_cap(seq: StitchedSequence, cap: usize) -> StitchedSequence {
    assert!(cap >= 1, "sequence cap must be positive");
    let m = seq.events.len();
    if m <= cap {
        return seq;
    }
    let excess = m - cap;
    let low_total = seq.events.iter().filter(|e| e.intent == Intent::Low).count();
    let mut drop_low = excess.min(low_total);
    let mut drop_high = excess - drop_low;
    // events are time-ordered, so a forward scan visits the oldest first
    let events = seq
        .events
        .into_iter()
        .filter(|e| match e.intent {
            Intent::Low if drop_low > 0 => {
                drop_low -= 1;
                false
            }
            Intent::High if drop_high > 0 => {
                drop_high -= 1;
                false
            }
            _ => true,
        })
        .collect();
    StitchedSequence { user_id: seq.user_id, events }
}

/// Disjoint chunks of `window_len`; see [`slide_windows_with_stride`].
pub fn slide_windows(seq: &StitchedSequence, window_len: usize) -> Vec<TrainingExample> {
    slide_windows_with_stride(seq, window_len, window_len)
}

/// Chunks starting every `stride` events, each up to `window_len` long.
/// Chunks shorter than 2 events are dropped; each remaining chunk's last event
/// is its label and the rest is its context.
pub fn slide_windows_with_stride(seq: &StitchedSequence, window_len: usize, stride: usize) -> Vec<TrainingExample> {
    assert!(window_len >= 2, "window_len must be at least 2");
    assert!(stride >= 1, "stride must be positive");
    let mut out = Vec::new();
    let mut start = 0;
    while start < seq.events.len() {
        let end = (start + window_len).min(seq.events.len());
        let chunk = &seq.events[start..end];
        if chunk.len() >= 2 {
            let (label, context) = chunk.split_last().expect("non-empty");
            out.push(TrainingExample { user_id: seq.user_id, context: context.to_vec(), label: label.clone() });
        }
        if end == seq.events.len() {
            break;
        }
        start += stride;
    }
    out
}
