//! Named parameter store. Every tensor's name, shape, and init rule are
//! derived from the config in one canonical order; init, counting,
//! checkpointing, and optimizer state all walk that same order.

use indexmap::IndexMap;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Element, Tape, TapeId, Tensor};
use crate::rng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

const WEIGHT_STD: f64 = 0.02;

fn spec(out: &mut Vec<ParamSpec>, name: String, shape: Vec<usize>, init: Init) {
    out.push(ParamSpec { name, shape, init });
}

fn block_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize, mlp_ratio: usize) {
    let n = Init::Normal(WEIGHT_STD);
    spec(out, format!("{prefix}.ln1.g"), vec![c], Init::Ones);
    spec(out, format!("{prefix}.ln1.b"), vec![c], Init::Zeros);
    for w in ["wq", "wk", "wv", "wo"] {
        spec(out, format!("{prefix}.attn.{w}"), vec![c, c], n);
    }
    spec(out, format!("{prefix}.ln2.g"), vec![c], Init::Ones);
    spec(out, format!("{prefix}.ln2.b"), vec![c], Init::Zeros);
    let h = mlp_ratio * c;
    spec(out, format!("{prefix}.mlp.w1"), vec![c, h], n);
    spec(out, format!("{prefix}.mlp.b1"), vec![h], Init::Zeros);
    spec(out, format!("{prefix}.mlp.w2"), vec![h, c], n);
    spec(out, format!("{prefix}.mlp.b2"), vec![c], Init::Zeros);
}

/// Canonical enumeration of every parameter tensor the config implies.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let n = Init::Normal(WEIGHT_STD);
    let [c1, c2, c3] = cfg.stage_channels;
    let tokens = [cfg.tokens(0), cfg.tokens(1), cfg.tokens(2)];
    let mut out = Vec::new();

    let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
    spec(&mut out, "embed.proj.w".into(), vec![patch_dim, c1], n);
    spec(&mut out, "embed.proj.b".into(), vec![c1], Init::Zeros);
    spec(&mut out, "embed.norm.g".into(), vec![c1], Init::Ones);
    spec(&mut out, "embed.norm.b".into(), vec![c1], Init::Zeros);

    for s in 0..3 {
        for b in 0..cfg.depths[s] {
            block_specs(&mut out, &format!("enc.s{}.blk{}", s + 1, b), cfg.stage_channels[s], cfg.mlp_ratio);
        }
        if s < 2 {
            let c = cfg.stage_channels[s];
            spec(&mut out, format!("merge{}.w", s + 1), vec![4 * c, 2 * c], n);
            spec(&mut out, format!("merge{}.b", s + 1), vec![2 * c], Init::Zeros);
        }
    }

    if cfg.iscf_enabled {
        for (s, cs) in [(1usize, c1), (2, c2)] {
            spec(&mut out, format!("iscf.chan_eq{s}.w"), vec![cs, c3], n);
            spec(&mut out, format!("iscf.chan_eq{s}.b"), vec![c3], Init::Zeros);
            spec(&mut out, format!("iscf.token_eq{s}.w"), vec![tokens[s - 1], tokens[2]], n);
            spec(&mut out, format!("iscf.token_eq{s}.b"), vec![tokens[2]], Init::Zeros);
        }
        spec(&mut out, "iscf.gate.w1".into(), vec![3, cfg.iscf_hidden], n);
        spec(&mut out, "iscf.gate.b1".into(), vec![cfg.iscf_hidden], Init::Zeros);
        spec(&mut out, "iscf.gate.w2".into(), vec![cfg.iscf_hidden, 3], n);
        spec(&mut out, "iscf.gate.b2".into(), vec![3], Init::Zeros);
        spec(&mut out, "iscf.fuse.w".into(), vec![3], Init::Const(1.0 / 3.0));
        spec(&mut out, "iscf.fuse.b".into(), vec![1], Init::Zeros);
        for (s, cs) in [(1usize, c1), (2, c2), (3, c3)] {
            spec(&mut out, format!("iscf.token_remap{s}.w"), vec![tokens[2], tokens[s - 1]], n);
            spec(&mut out, format!("iscf.token_remap{s}.b"), vec![tokens[s - 1]], Init::Zeros);
            // Zero so the fusion residual vanishes at init and the network
            // starts exactly at the backbone's function.
            spec(&mut out, format!("iscf.chan_remap{s}.w"), vec![c3, cs], Init::Zeros);
            spec(&mut out, format!("iscf.chan_remap{s}.b"), vec![cs], Init::Zeros);
        }
    }

    for (lvl, c_from, c_to) in [(2usize, c3, c2), (1, c2, c1)] {
        let p = format!("dec.lvl{lvl}");
        spec(&mut out, format!("{p}.expand.w"), vec![c_from, 2 * c_from], n);
        spec(&mut out, format!("{p}.expand.b"), vec![2 * c_from], Init::Zeros);
        spec(&mut out, format!("{p}.fuse.w"), vec![2 * c_to, c_to], n);
        spec(&mut out, format!("{p}.fuse.b"), vec![c_to], Init::Zeros);
        block_specs(&mut out, &format!("{p}.blk0"), c_to, cfg.mlp_ratio);
    }

    spec(&mut out, "head.up1.w".into(), vec![c1, 2 * c1], n);
    spec(&mut out, "head.up1.b".into(), vec![2 * c1], Init::Zeros);
    spec(&mut out, "head.up2.w".into(), vec![c1 / 2, c1], n);
    spec(&mut out, "head.up2.b".into(), vec![c1], Init::Zeros);
    spec(&mut out, "head.out.w".into(), vec![c1 / 4, 1], n);
    // Lesions are the minority class, so the output bias starts negative to
    // put the initial foreground probability near 0.18 instead of 0.5. That
    // skips the first phase of training where the network only learns the
    // base rate.
    spec(&mut out, "head.out.b".into(), vec![1], Init::Const(-1.5));

    out
}

/// Totals derived straight from the specs, grouped by top-level prefix.
#[derive(Clone, Debug)]
pub struct ParamCount {
    pub total: usize,
    pub by_group: Vec<(String, usize)>,
}

pub fn count_params(cfg: &ModelConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let mut by_group: IndexMap<String, usize> = IndexMap::new();
    let mut total = 0;
    for s in param_specs(cfg) {
        let group = s.name.split('.').next().unwrap_or("").to_string();
        *by_group.entry(group).or_insert(0) += s.numel();
        total += s.numel();
    }
    Ok(ParamCount { total, by_group: by_group.into_iter().collect() })
}

/// All model weights, keyed by name in canonical order.
#[derive(Clone, Debug)]
pub struct ParamSet<E: Element> {
    entries: IndexMap<String, Tensor<E>>,
}

impl<E: Element> ParamSet<E> {
    /// Materializes every tensor. Each one draws from its own stream derived
    /// from (seed, name), so adding or removing unrelated tensors (such as the
    /// fusion branch) never changes the values another tensor receives.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut entries = IndexMap::new();
        for s in param_specs(cfg) {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(s.shape.clone()),
                Init::Ones => Tensor::full(s.shape.clone(), E::one()),
                Init::Const(v) => Tensor::full(s.shape.clone(), E::from_f64(v)),
                Init::Normal(std) => {
                    let mut rng = SplitMix64::for_tag(cfg.seed, &s.name);
                    Tensor::from_fn(s.shape.clone(), |_| E::from_f64(rng.normal() * std))
                }
            };
            entries.insert(s.name, t);
        }
        Ok(ParamSet { entries })
    }

    /// Rebuilds a set from externally supplied tensors, such as a restored
    /// checkpoint. The supplied entries must cover the config's schema
    /// exactly, and the result is stored in canonical order regardless of the
    /// order given.
    pub fn from_entries(cfg: &ModelConfig, mut supplied: IndexMap<String, Tensor<E>>) -> Result<Self> {
        let specs = param_specs(cfg);
        let mut entries = IndexMap::new();
        for s in &specs {
            let t = supplied
                .swap_remove(&s.name)
                .ok_or_else(|| Error::Argument(format!("missing parameter tensor {}", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::shape(
                    "param_set",
                    format!("{}: stored {:?}, schema wants {:?}", s.name, t.shape(), s.shape),
                ));
            }
            entries.insert(s.name.clone(), t);
        }
        if let Some(extra) = supplied.keys().next() {
            return Err(Error::Argument(format!("unexpected parameter tensor {extra}")));
        }
        Ok(ParamSet { entries })
    }

    pub fn get(&self, name: &str) -> &Tensor<E> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces a tensor, keeping its shape fixed.
    pub fn set(&mut self, name: &str, t: Tensor<E>) -> Result<()> {
        let cur = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter tensor {name}")))?;
        if cur.shape() != t.shape() {
            return Err(Error::shape(
                "param_set",
                format!("{name}: {:?} vs {:?}", cur.shape(), t.shape()),
            ));
        }
        *cur = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn cast<F: Element>(&self) -> ParamSet<F> {
        ParamSet {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Puts every tensor on a tape as a leaf, preserving canonical order.
    pub fn bind(&self, tape: &mut Tape<E>, trainable: bool) -> BoundParams {
        let ids = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
            .collect();
        BoundParams { ids }
    }
}

/// Tape handles for one forward pass, same keys as the owning ParamSet.
pub struct BoundParams {
    ids: IndexMap<String, TapeId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> TapeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TapeId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Points `name` at a different tape node. Gradient checks use this to
    /// swap one parameter for an externally controlled leaf.
    pub fn override_id(&mut self, name: &str, id: TapeId) {
        let slot = self
            .ids
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor {name}"));
        *slot = id;
    }
}
