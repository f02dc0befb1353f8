//! Seeded generator of multi-domain user logs with a latent intent per user.
//!
//! Every user draws one dominant intent. Each intent owns a disjoint slice of
//! every domain's vocabulary (its cluster). An event picks a domain from the
//! propensity weights, then an item from the intent's cluster with probability
//! `signal_strength` (Zipf-skewed inside the cluster) or uniformly from the
//! whole domain vocabulary otherwise.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::Distribution;
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, DomainId, DomainSpec, Event, EventRecord, Intent, UserDomainEvents};
use crate::error::{Result, UumError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerLaw {
    pub exponent: f64,
    pub min: u32,
    pub max: u32,
}

impl Default for PowerLaw {
    fn default() -> Self {
        Self { exponent: 1.5, min: 10, max: 2000 }
    }
}

impl PowerLaw {
    /// Inverse-CDF draw from the continuous power law on `[min, max + 1)`, floored.
    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        let a = 1.0 - self.exponent;
        let lo = (self.min as f64).powf(a);
        let hi = (self.max as f64 + 1.0).powf(a);
        let u: f64 = rng.random();
        let x = (lo + u * (hi - lo)).powf(1.0 / a);
        (x.floor() as u32).clamp(self.min, self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub user_count: usize,
    pub domain_names: Vec<String>,
    pub vocab_sizes: Vec<u32>,
    pub categorical_cardinalities: Vec<Vec<u32>>,
    pub intent_count: usize,
    pub events_per_user: PowerLaw,
    pub domain_propensity: Vec<f64>,
    /// ρ: probability an event's item comes from the user's intent cluster.
    pub signal_strength: f64,
    /// Optional per-domain override of `signal_strength`.
    pub domain_signal_strength: Option<Vec<f64>>,
    /// Zipf exponent of item popularity inside a cluster (0 = uniform).
    pub cluster_popularity_exponent: f64,
    pub high_intent_in_cluster: f64,
    pub high_intent_outside: f64,
    pub property_noise_std: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            user_count: 1000,
            domain_names: vec!["video".into(), "lens".into()],
            vocab_sizes: vec![1000, 1000],
            categorical_cardinalities: vec![vec![4], vec![4]],
            intent_count: 8,
            events_per_user: PowerLaw::default(),
            domain_propensity: vec![0.5, 0.5],
            signal_strength: 0.9,
            domain_signal_strength: None,
            cluster_popularity_exponent: 1.0,
            high_intent_in_cluster: 0.7,
            high_intent_outside: 0.2,
            property_noise_std: 0.5,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn domain_count(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.domain_count();
        let bad = |m: String| Err(UumError::Config(m));
        if d < 2 {
            return bad(format!("generator needs at least 2 domains, got {d}"));
        }
        if self.domain_names.len() != d || self.categorical_cardinalities.len() != d || self.domain_propensity.len() != d {
            return bad("domain_names, vocab_sizes, categorical_cardinalities and domain_propensity must have one entry per domain".into());
        }
        if self.domain_propensity.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return bad("domain propensity weights must lie in [0, 1]".into());
        }
        let total: f64 = self.domain_propensity.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("domain propensity weights sum to {total}, expected 1"));
        }
        let rho_ok = |r: f64| (0.0..=1.0).contains(&r);
        if !rho_ok(self.signal_strength) {
            return bad(format!("signal_strength {} outside [0, 1]", self.signal_strength));
        }
        if let Some(per) = &self.domain_signal_strength {
            if per.len() != d || !per.iter().all(|&r| rho_ok(r)) {
                return bad("domain_signal_strength needs one value in [0, 1] per domain".into());
            }
        }
        if self.intent_count == 0 {
            return bad("intent_count must be positive".into());
        }
        for (name, &v) in self.domain_names.iter().zip(&self.vocab_sizes) {
            if (v as usize) < self.intent_count {
                return bad(format!(
                    "domain `{name}` vocabulary {v} is smaller than {} intent clusters",
                    self.intent_count
                ));
            }
        }
        let p = &self.events_per_user;
        if p.min == 0 || p.min > p.max || p.exponent <= 1.0 {
            return bad("events_per_user needs 0 < min <= max and exponent > 1".into());
        }
        for prob in [self.high_intent_in_cluster, self.high_intent_outside] {
            if !(0.0..=1.0).contains(&prob) {
                return bad("high-intent probabilities must lie in [0, 1]".into());
            }
        }
        if self.property_noise_std < 0.0 || self.cluster_popularity_exponent < 0.0 {
            return bad("property_noise_std and cluster_popularity_exponent must be non-negative".into());
        }
        Ok(())
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        DatasetManifest::new(
            self.domain_names
                .iter()
                .zip(&self.vocab_sizes)
                .zip(&self.categorical_cardinalities)
                .map(|((name, &vocab_size), cards)| DomainSpec {
                    name: name.clone(),
                    vocab_size,
                    categorical_cardinalities: cards.clone(),
                })
                .collect(),
        )
    }

    fn rho(&self, domain: usize) -> f64 {
        self.domain_signal_strength.as_ref().map_or(self.signal_strength, |v| v[domain])
    }

    fn cluster_size(&self, domain: usize) -> u32 {
        self.vocab_sizes[domain] / self.intent_count as u32
    }
}

/// Ground truth for one intent: its item slice in every domain.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentIntent {
    pub index: usize,
    /// Half-open item ranges, one per domain.
    pub clusters: Vec<(u32, u32)>,
    pub property_mean: f64,
}

impl LatentIntent {
    pub fn contains(&self, domain: DomainId, item: u32) -> bool {
        let (lo, hi) = self.clusters[domain.index()];
        (lo..hi).contains(&item)
    }
}

pub fn latent_intents(cfg: &GeneratorConfig) -> Vec<LatentIntent> {
    (0..cfg.intent_count)
        .map(|k| LatentIntent {
            index: k,
            clusters: (0..cfg.domain_count())
                .map(|d| {
                    let size = cfg.cluster_size(d);
                    (k as u32 * size, (k as u32 + 1) * size)
                })
                .collect(),
            property_mean: 1.0 + 0.5 * k as f64,
        })
        .collect()
}

/// Which intent cluster `item` belongs to, if any.
pub fn cluster_of(cfg: &GeneratorConfig, domain: DomainId, item: u32) -> Option<usize> {
    let size = cfg.cluster_size(domain.index());
    let k = (item / size) as usize;
    (k < cfg.intent_count).then_some(k)
}

#[derive(Clone, Debug)]
pub struct SyntheticUser {
    pub user_id: u64,
    pub intent: usize,
    /// Time-ordered across domains.
    pub events: Vec<Event>,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: GeneratorConfig,
    pub manifest: DatasetManifest,
    pub intents: Vec<LatentIntent>,
    pub users: Vec<SyntheticUser>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Categorical values are fixed attributes of an item.
fn item_categorical(seed: u64, domain: usize, item: u32, cards: &[u32]) -> Vec<u32> {
    cards
        .iter()
        .enumerate()
        .map(|(slot, &card)| {
            let key = seed ^ ((domain as u64) << 48) ^ ((item as u64) << 8) ^ slot as u64;
            (splitmix64(key) % card as u64) as u32
        })
        .collect()
}

pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let manifest = cfg.manifest()?;
    let intents = latent_intents(cfg);
    let domain_pick = WeightedIndex::new(&cfg.domain_propensity)
        .map_err(|e| UumError::Config(format!("domain propensity: {e}")))?;
    let noise = Normal::new(0.0, cfg.property_noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| UumError::Config(format!("property noise: {e}")))?;
    let popularity: Vec<WeightedIndex<f64>> = (0..cfg.domain_count())
        .map(|d| {
            let weights: Vec<f64> = (0..cfg.cluster_size(d))
                .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.cluster_popularity_exponent))
                .collect();
            WeightedIndex::new(weights).expect("positive weights")
        })
        .collect();

    let users = (0..cfg.user_count as u64)
        .map(|user_id| {
            // independent stream per user keeps users reproducible in isolation
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(user_id);
            let intent = rng.random_range(0..cfg.intent_count);
            let latent = &intents[intent];
            let n = cfg.events_per_user.sample(&mut rng);
            let mut ts: i64 = rng.random_range(0..86_400_000);
            let events = (0..n)
                .map(|_| {
                    ts += rng.random_range(1..=60_000);
                    let d = domain_pick.sample(&mut rng);
                    let item = if rng.random_bool(cfg.rho(d)) {
                        latent.clusters[d].0 + popularity[d].sample(&mut rng) as u32
                    } else {
                        rng.random_range(0..cfg.vocab_sizes[d])
                    };
                    let domain = DomainId(d as u16);
                    let p_high = if latent.contains(domain, item) {
                        cfg.high_intent_in_cluster
                    } else {
                        cfg.high_intent_outside
                    };
                    let intent_label = if rng.random_bool(p_high) { Intent::High } else { Intent::Low };
                    let property = if cfg.property_noise_std > 0.0 {
                        latent.property_mean + noise.sample(&mut rng)
                    } else {
                        latent.property_mean
                    };
                    Event {
                        domain,
                        item_id: item,
                        timestamp: ts,
                        intent: intent_label,
                        categorical: item_categorical(cfg.seed, d, item, &cfg.categorical_cardinalities[d]),
                        property,
                    }
                })
                .collect();
            SyntheticUser { user_id, intent, events }
        })
        .collect();

    Ok(SyntheticDataset { config: cfg.clone(), manifest, intents, users })
}

impl SyntheticDataset {
    pub fn event_count(&self) -> usize {
        self.users.iter().map(|u| u.events.len()).sum()
    }

    /// Newline-delimited event log, users in id order, events in time order.
    pub fn events_text(&self) -> String {
        let mut out = String::new();
        for u in &self.users {
            for e in &u.events {
                out.push_str(&EventRecord::from_event(u.user_id, e, &self.manifest).to_line());
                out.push('\n');
            }
        }
        out
    }

    pub fn ground_truth_text(&self) -> String {
        let mut out = String::from("user_id,intent\n");
        for u in &self.users {
            writeln!(out, "{},{}", u.user_id, u.intent).expect("string write");
        }
        out
    }

    pub fn write(&self, events: &Path, manifest: &Path, ground_truth: &Path) -> Result<()> {
        for (path, text) in [
            (events, self.events_text()),
            (manifest, self.manifest.to_json()),
            (ground_truth, self.ground_truth_text()),
        ] {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| UumError::io(parent, e))?;
            }
            fs::write(path, text).map_err(|e| UumError::io(path, e))?;
        }
        Ok(())
    }

    /// The same grouping `ingest_events` produces from the written log.
    pub fn user_domain_events(&self) -> UserDomainEvents {
        let mut map = UserDomainEvents::new();
        for u in &self.users {
            let mut lists = vec![Vec::new(); self.manifest.domain_count()];
            for e in &u.events {
                lists[e.domain.index()].push(e.clone());
            }
            for l in &mut lists {
                l.sort_by_key(|e| (e.timestamp, e.item_id));
            }
            map.insert(u.user_id, lists);
        }
        map
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ingest_reader;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            user_count: 50,
            vocab_sizes: vec![40, 24],
            intent_count: 4,
            events_per_user: PowerLaw { exponent: 1.5, min: 3, max: 60 },
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_dataset(&small(3)).unwrap();
        let b = generate_dataset(&small(3)).unwrap();
        assert_eq!(a.events_text(), b.events_text());
        assert_eq!(a.ground_truth_text(), b.ground_truth_text());
        assert_ne!(a.events_text(), generate_dataset(&small(4)).unwrap().events_text());
    }

    #[test]
    fn timestamps_strictly_increase_per_user() {
        let ds = generate_dataset(&small(5)).unwrap();
        for u in &ds.users {
            assert!(u.events.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        }
    }

    #[test]
    fn full_signal_keeps_users_in_their_cluster() {
        let cfg = GeneratorConfig { signal_strength: 1.0, intent_count: 1, ..small(9) };
        let ds = generate_dataset(&cfg).unwrap();
        for u in &ds.users {
            let latent = &ds.intents[u.intent];
            assert!(u.events.iter().all(|e| latent.contains(e.domain, e.item_id)));
        }
        let cfg = GeneratorConfig { signal_strength: 1.0, ..small(10) };
        let ds = generate_dataset(&cfg).unwrap();
        for u in &ds.users {
            let latent = &ds.intents[u.intent];
            assert!(u.events.iter().all(|e| latent.contains(e.domain, e.item_id)));
        }
    }

    #[test]
    fn clusters_are_disjoint() {
        let cfg = small(1);
        let intents = latent_intents(&cfg);
        for d in 0..cfg.domain_count() {
            for a in &intents {
                for b in &intents {
                    if a.index != b.index {
                        let (al, ah) = a.clusters[d];
                        let (bl, bh) = b.clusters[d];
                        assert!(ah <= bl || bh <= al);
                    }
                }
            }
        }
    }

    #[test]
    fn vocab_smaller_than_clusters_is_rejected() {
        let cfg = GeneratorConfig { vocab_sizes: vec![3, 40], intent_count: 4, ..small(1) };
        assert!(matches!(generate_dataset(&cfg), Err(UumError::Config(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(GeneratorConfig { domain_propensity: vec![0.7, 0.7], ..small(1) }.validate().is_err());
        assert!(GeneratorConfig { signal_strength: 1.5, ..small(1) }.validate().is_err());
        let one_domain = GeneratorConfig {
            domain_names: vec!["a".into()],
            vocab_sizes: vec![10],
            categorical_cardinalities: vec![vec![]],
            domain_propensity: vec![1.0],
            ..small(1)
        };
        assert!(one_domain.validate().is_err());
    }

    #[test]
    fn written_log_ingests_to_the_same_events() {
        let ds = generate_dataset(&small(11)).unwrap();
        let text = ds.events_text();
        let ingested = ingest_reader(text.as_bytes(), &ds.manifest, 0.0).unwrap();
        assert_eq!(ingested.users, ds.user_domain_events());
    }

    #[test]
    fn power_law_stays_in_bounds() {
        let p = PowerLaw { exponent: 1.5, min: 10, max: 2000 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws: Vec<u32> = (0..20_000).map(|_| p.sample(&mut rng)).collect();
        assert!(draws.iter().all(|&n| (10..=2000).contains(&n)));
        let small_share = draws.iter().filter(|&&n| n < 40).count() as f64 / draws.len() as f64;
        // P(n < 40) = (10^-0.5 - 40^-0.5) / (10^-0.5 - 2001^-0.5) ≈ 0.52
        assert!((small_share - 0.52).abs() < 0.02, "{small_share}");
    }

    #[test]
    fn no_signal_means_item_cluster_independent_of_intent() {
        let cfg = GeneratorConfig {
            user_count: 2000,
            vocab_sizes: vec![80, 80],
            intent_count: 4,
            signal_strength: 0.0,
            events_per_user: PowerLaw { exponent: 1.5, min: 20, max: 400 },
            seed: 21,
            ..Default::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert!(ds.event_count() >= 100_000, "{}", ds.event_count());
        let k = cfg.intent_count;
        let mut table = vec![vec![0f64; k]; k];
        for u in &ds.users {
            for e in &u.events {
                let c = cluster_of(&cfg, e.domain, e.item_id).unwrap();
                table[u.intent][c] += 1.0;
            }
        }
        let total: f64 = table.iter().flatten().sum();
        let row: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
        let col: Vec<f64> = (0..k).map(|c| table.iter().map(|r| r[c]).sum()).collect();
        let mut chi2 = 0.0;
        for i in 0..k {
            for j in 0..k {
                let expected = row[i] * col[j] / total;
                chi2 += (table[i][j] - expected).powi(2) / expected;
            }
        }
        let dof = ((k - 1) * (k - 1)) as f64;
        let critical = ChiSquared::new(dof).unwrap().inverse_cdf(0.999);
        assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
    }
}
