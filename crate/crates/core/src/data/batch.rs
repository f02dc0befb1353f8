use super::schema::{DomainId, Event, TrainingExample};

/// Domain id carried by padded slots.
pub const PAD_DOMAIN: DomainId = DomainId(u16::MAX);

#[derive(Clone, Debug, PartialEq)]
pub enum Token {
    Event(Event),
    Pad,
}

impl Token {
    pub fn event(&self) -> Option<&Event> {
        match self {
            Token::Event(e) => Some(e),
            Token::Pad => None,
        }
    }
}

/// Contexts right-padded to the longest context in the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub user_ids: Vec<u64>,
    pub tokens: Vec<Vec<Token>>,
    /// `true` at real tokens, `false` at padded slots.
    pub mask: Vec<Vec<bool>>,
    pub domains: Vec<Vec<DomainId>>,
    pub labels: Vec<Event>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    /// Real context events of each example, padding removed.
    pub fn unpad(&self) -> Vec<Vec<Event>> {
        self.tokens.iter().map(|row| row.iter().filter_map(|t| t.event().cloned()).collect()).collect()
    }
}

pub fn assemble_batch(examples: &[TrainingExample]) -> Batch {
    assert!(!examples.is_empty(), "batch must be non-empty");
    let max_len = examples.iter().map(|e| e.context.len()).max().unwrap_or(0);
    let mut batch = Batch {
        user_ids: Vec::with_capacity(examples.len()),
        tokens: Vec::with_capacity(examples.len()),
        mask: Vec::with_capacity(examples.len()),
        domains: Vec::with_capacity(examples.len()),
        labels: Vec::with_capacity(examples.len()),
    };
    for ex in examples {
        let pad = max_len - ex.context.len();
        let mut tokens: Vec<Token> = ex.context.iter().cloned().map(Token::Event).collect();
        tokens.extend(std::iter::repeat_n(Token::Pad, pad));
        let mut mask = vec![true; ex.context.len()];
        mask.extend(std::iter::repeat_n(false, pad));
        let mut domains: Vec<DomainId> = ex.context.iter().map(|e| e.domain).collect();
        domains.extend(std::iter::repeat_n(PAD_DOMAIN, pad));
        batch.user_ids.push(ex.user_id);
        batch.tokens.push(tokens);
        batch.mask.push(mask);
        batch.domains.push(domains);
        batch.labels.push(ex.label.clone());
    }
    batch
}
