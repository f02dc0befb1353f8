use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use super::config::Variant;
use crate::data::DatasetManifest;
use crate::numerics::{BlockParams, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct IbLayer {
    pub intra: BlockParams,
    pub reattend: BlockParams,
    pub exchange_gain: ParamId,
    pub exchange_bias: ParamId,
}

#[derive(Clone, Debug)]
pub enum EncoderParams {
    Base { blocks: Vec<BlockParams> },
    DomainSpecific { private: Vec<Vec<BlockParams>>, shared: Vec<BlockParams> },
    IbToken { seeds: ParamId, layers: Vec<IbLayer> },
}

/// Handles into the [`ParamStore`] for every model component.
///
/// Lookup tables reserve two trailing rows: the null sentinel (a slot that
/// belongs to another domain) and the pad row.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub item_tables: Vec<ParamId>,
    pub categorical_tables: Vec<ParamId>,
    pub domain_table: ParamId,
    pub positions: ParamId,
    pub feature_w1: ParamId,
    pub feature_b1: ParamId,
    pub feature_w2: ParamId,
    pub feature_b2: ParamId,
    pub encoder: EncoderParams,
    /// Linear token scorer for pooling. No bias: pooling is a softmax.
    pub pool_w: ParamId,
    pub cross: Vec<(ParamId, ParamId)>,
    pub target_w1: ParamId,
    pub target_b1: ParamId,
    pub target_w2: ParamId,
    pub target_b2: ParamId,
    pub score_w1: ParamId,
    /// No hidden bias: the target tower's output bias already reaches this
    /// layer as `W1·b`. No output bias either: scores only enter softmaxes and
    /// rankings.
    pub score_w2: ParamId,
    pub domain_w: ParamId,
    pub domain_b: ParamId,
    pub property_w: ParamId,
    pub property_b: ParamId,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, manifest: &DatasetManifest, store: &mut ParamStore) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let rng = &mut rng;
        let f = config.latent_dim;
        let d_count = manifest.domain_count();
        let glorot = |fan_in: usize| (1.0 / fan_in as f64).sqrt();

        let item_tables = manifest
            .domains
            .iter()
            .enumerate()
            .map(|(d, spec)| {
                let dim = config.id_dim(d);
                store.add_normal(&format!("embed.item.{d}"), &[spec.vocab_size as usize + 2, dim], glorot(dim), rng)
            })
            .collect();
        let categorical_tables = manifest
            .categorical_slots()
            .into_iter()
            .map(|(d, slot, card)| {
                let dim = config.categorical_dim;
                store.add_normal(&format!("embed.cat.{}.{slot}", d.index()), &[card as usize + 2, dim], glorot(dim), rng)
            })
            .collect();
        let domain_table = store.add_normal("embed.domain", &[d_count + 1, config.domain_dim], glorot(config.domain_dim), rng);
        let positions = store.add_normal("embed.position", &[config.positional_capacity, f], 0.1, rng);

        let width = config.feature_width(manifest);
        let hid = config.feature_hidden;
        let feature_w1 = store.add_normal("feature.w1", &[width, hid], glorot(width), rng);
        let feature_b1 = store.add_const("feature.b1", &[hid], 0.0);
        let feature_w2 = store.add_normal("feature.w2", &[hid, f], glorot(hid), rng);
        let feature_b2 = store.add_const("feature.b2", &[f], 0.0);

        let bh = config.block_hidden();
        let blocks = |store: &mut ParamStore, prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> Vec<BlockParams> {
            (0..n).map(|i| BlockParams::init(store, &format!("{prefix}.{i}"), f, bh, rng)).collect()
        };
        let encoder = match config.variant {
            Variant::Base => EncoderParams::Base { blocks: blocks(store, "encoder", config.layers, rng) },
            Variant::DomainSpecificEncoder => {
                let private = (0..d_count)
                    .map(|d| blocks(store, &format!("encoder.private.{d}"), config.private_layers(), rng))
                    .collect();
                let shared = blocks(store, "encoder.shared", config.shared_layers(), rng);
                EncoderParams::DomainSpecific { private, shared }
            }
            Variant::IbToken => {
                let seeds = store.add_normal("encoder.ib.seeds", &[d_count, f], 1.0, rng);
                let layers = (0..config.layers)
                    .map(|l| IbLayer {
                        intra: BlockParams::init(store, &format!("encoder.ib.{l}.intra"), f, bh, rng),
                        reattend: BlockParams::init(store, &format!("encoder.ib.{l}.reattend"), f, bh, rng),
                        exchange_gain: store.add_const(&format!("encoder.ib.{l}.exchange.gain"), &[f], 1.0),
                        exchange_bias: store.add_const(&format!("encoder.ib.{l}.exchange.bias"), &[f], 0.0),
                    })
                    .collect();
                EncoderParams::IbToken { seeds, layers }
            }
        };

        let pool_w = store.add_normal("pool.w", &[f, 1], glorot(f), rng);
        let cross = (0..config.cross_layers)
            .map(|k| {
                (
                    store.add_normal(&format!("target.cross.{k}.w"), &[f, f], 0.5 * glorot(f), rng),
                    store.add_const(&format!("target.cross.{k}.b"), &[f], 0.0),
                )
            })
            .collect();
        let th = config.target_hidden;
        let target_w1 = store.add_normal("target.w1", &[f, th], glorot(f), rng);
        let target_b1 = store.add_const("target.b1", &[th], 0.0);
        let target_w2 = store.add_normal("target.w2", &[th, f], glorot(th), rng);
        let target_b2 = store.add_const("target.b2", &[f], 0.0);

        let sh = config.score_hidden;
        let score_w1 = store.add_normal("head.score.w1", &[f, sh], glorot(f), rng);
        let score_w2 = store.add_normal("head.score.w2", &[sh, 1], glorot(sh), rng);
        let domain_w = store.add_normal("head.domain.w", &[f, d_count], glorot(f), rng);
        let domain_b = store.add_const("head.domain.b", &[d_count], 0.0);
        let property_w = store.add_normal("head.property.w", &[f, 1], glorot(f), rng);
        let property_b = store.add_const("head.property.b", &[1], 0.0);

        Self {
            item_tables,
            categorical_tables,
            domain_table,
            positions,
            feature_w1,
            feature_b1,
            feature_w2,
            feature_b2,
            encoder,
            pool_w,
            cross,
            target_w1,
            target_b1,
            target_w2,
            target_b2,
            score_w1,
            score_w2,
            domain_w,
            domain_b,
            property_w,
            property_b,
        }
    }
}
