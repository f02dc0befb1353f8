use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UumError};

/// Dense domain index into the manifest's domain list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DomainId(pub u16);

impl DomainId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intent {
    High,
    Low,
}

/// One interaction in one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub domain: DomainId,
    pub item_id: u32,
    pub timestamp: i64,
    pub intent: Intent,
    pub categorical: Vec<u32>,
    pub property: f64,
}

impl Event {
    /// Identity of the item, ignoring when and how it was consumed.
    pub fn item_key(&self) -> (DomainId, u32) {
        (self.domain, self.item_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub vocab_size: u32,
    /// Cardinality of each categorical slot; its length is the domain's arity.
    #[serde(default)]
    pub categorical_cardinalities: Vec<u32>,
}

/// Declares the domains of a dataset: names, vocabulary sizes, categorical slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub domains: Vec<DomainSpec>,
}

impl DatasetManifest {
    pub fn new(domains: Vec<DomainSpec>) -> Result<Self> {
        let m = Self { domains };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(UumError::Config(format!(
                "a dataset needs at least 2 domains, manifest declares {}",
                self.domains.len()
            )));
        }
        if self.domains.len() > u16::MAX as usize {
            return Err(UumError::Config("too many domains".into()));
        }
        let mut seen = HashSet::new();
        for d in &self.domains {
            if !seen.insert(d.name.as_str()) {
                return Err(UumError::Config(format!("duplicate domain name `{}`", d.name)));
            }
            if d.vocab_size == 0 {
                return Err(UumError::Config(format!("domain `{}` has an empty vocabulary", d.name)));
            }
            if d.categorical_cardinalities.contains(&0) {
                return Err(UumError::Config(format!("domain `{}` has a zero-cardinality slot", d.name)));
            }
        }
        Ok(())
    }

    pub fn domain_count(&self) -> usize {
        self.domains.len()
    }

    pub fn domain(&self, id: DomainId) -> &DomainSpec {
        &self.domains[id.index()]
    }

    pub fn domain_by_name(&self, name: &str) -> Option<DomainId> {
        self.domains.iter().position(|d| d.name == name).map(|i| DomainId(i as u16))
    }

    /// `|𝒱|`: total number of items across all domains.
    pub fn total_items(&self) -> u64 {
        self.domains.iter().map(|d| d.vocab_size as u64).sum()
    }

    /// Global categorical slot layout: `(domain, slot within domain, cardinality)`.
    pub fn categorical_slots(&self) -> Vec<(DomainId, usize, u32)> {
        self.domains
            .iter()
            .enumerate()
            .flat_map(|(d, spec)| {
                spec.categorical_cardinalities
                    .iter()
                    .enumerate()
                    .map(move |(s, &c)| (DomainId(d as u16), s, c))
            })
            .collect()
    }

    /// Checks an event against this manifest.
    pub fn check_event(&self, e: &Event) -> std::result::Result<(), String> {
        let Some(spec) = self.domains.get(e.domain.index()) else {
            return Err(format!("domain index {} out of range", e.domain.0));
        };
        if e.item_id >= spec.vocab_size {
            return Err(format!(
                "item_id {} out of vocabulary for domain `{}` (size {})",
                e.item_id, spec.name, spec.vocab_size
            ));
        }
        if e.timestamp < 0 {
            return Err(format!("negative timestamp {}", e.timestamp));
        }
        if e.categorical.len() != spec.categorical_cardinalities.len() {
            return Err(format!(
                "domain `{}` expects {} categorical values, got {}",
                spec.name,
                spec.categorical_cardinalities.len(),
                e.categorical.len()
            ));
        }
        for (slot, (&v, &card)) in e.categorical.iter().zip(&spec.categorical_cardinalities).enumerate() {
            if v >= card {
                return Err(format!("categorical slot {slot} value {v} exceeds cardinality {card}"));
            }
        }
        if !e.property.is_finite() {
            return Err("non-finite property value".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| UumError::io(path, e))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| UumError::Data(format!("{}: malformed manifest: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// One line of the event log. Field order is the on-disk order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub user_id: u64,
    pub domain: String,
    pub item_id: u64,
    pub ts_ms: i64,
    pub intent: Intent,
    pub cats: Vec<u32>,
    pub prop: f64,
}

impl EventRecord {
    pub fn from_event(user_id: u64, e: &Event, manifest: &DatasetManifest) -> Self {
        Self {
            user_id,
            domain: manifest.domain(e.domain).name.clone(),
            item_id: e.item_id as u64,
            ts_ms: e.timestamp,
            intent: e.intent,
            cats: e.categorical.clone(),
            prop: e.property,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    /// Resolves names and bounds against the manifest.
    pub fn into_event(self, manifest: &DatasetManifest) -> std::result::Result<(u64, Event), String> {
        let domain = manifest
            .domain_by_name(&self.domain)
            .ok_or_else(|| format!("unknown domain `{}`", self.domain))?;
        let item_id = u32::try_from(self.item_id).map_err(|_| format!("item_id {} out of vocabulary", self.item_id))?;
        let event = Event {
            domain,
            item_id,
            timestamp: self.ts_ms,
            intent: self.intent,
            categorical: self.cats,
            property: self.prop,
        };
        manifest.check_event(&event)?;
        Ok((self.user_id, event))
    }
}

/// Events of one user, time-ordered across domains.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchedSequence {
    pub user_id: u64,
    pub events: Vec<Event>,
}

impl StitchedSequence {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Context window plus the held-out next event.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub user_id: u64,
    pub context: Vec<Event>,
    pub label: Event,
}
