//! Attention context model with context feature residuals and a multi-loss
//! occupancy branch.
//!
//! Per target node the trunk embeds `(occupancy, level, octant)` for each slot's
//! ancestor chain, projects the rows to `d_model` and runs one multi-head
//! attention layer queried by the target row. The output at the target is the
//! weighted context `wc_i`. The residual `r_i = wc_i - wc_{i-1}` is
//! concatenated with it, and `[wc_i ; r_i]` feeds two MLPs:
//!
//! * the main head: two hidden layers, then a final linear + softmax over the
//!   255 occupancy codes;
//! * the branch: one hidden layer and an 8-way sigmoid predicting each child's
//!   occupancy. Its output is concatenated with the main head's last hidden
//!   activation before the final layer.
//!
//! The residual and branch can be switched off independently (base/ER/EM/EMR);
//! a disabled part feeds zeros, so every variant shares one parameter layout.

mod graph;
mod runner;
mod train;

pub use runner::{Prediction, SequenceRunner};
pub use train::{train, LossRecord, Schedule, Stage, TrainOutcome};

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::context::{window_for, ContextConfig, ContextWindow, Feature};
use crate::error::{Error, Result};
use crate::geometry::MAX_DEPTH;
use crate::nn::{self, Grads, ParamStore, Tape};
use crate::octree::NodeSequence;

/// Number of occupancy classes (codes 1..=255).
pub const CLASSES: usize = 255;
/// Weight of the uniform distribution mixed into every prediction.
pub const PROB_FLOOR_MIX: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Base,
    Er,
    Em,
    Emr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Er, Variant::Em, Variant::Emr];

    pub fn from_flags(residual: bool, branch: bool) -> Self {
        match (residual, branch) {
            (false, false) => Variant::Base,
            (true, false) => Variant::Er,
            (false, true) => Variant::Em,
            (true, true) => Variant::Emr,
        }
    }

    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::Base => (false, false),
            Variant::Er => (true, false),
            Variant::Em => (false, true),
            Variant::Emr => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Er => "ER",
            Variant::Em => "EM",
            Variant::Emr => "EMR",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub context: ContextConfig,
    pub d_occupancy: usize,
    pub d_level: usize,
    pub d_octant: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Width of both main-head hidden layers (the first is the layer whose
    /// activations feed the inter-class statistics).
    pub d_hidden_main: usize,
    pub d_hidden_branch: usize,
    pub enable_residual: bool,
    pub enable_branch: bool,
    /// Start the main and branch output layers at zero (uniform predictions).
    pub zero_init_output: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            context: ContextConfig {
                n: 64,
                k: 2,
                strict_level: false,
            },
            d_occupancy: 16,
            d_level: 4,
            d_octant: 4,
            d_model: 64,
            heads: 4,
            d_hidden_main: 128,
            d_hidden_branch: 64,
            enable_residual: true,
            enable_branch: true,
            zero_init_output: false,
            seed: 0,
        }
    }

    pub fn full_scale() -> Self {
        ModelConfig {
            context: ContextConfig {
                n: 1024,
                k: 4,
                strict_level: false,
            },
            d_occupancy: 128,
            d_level: 6,
            d_octant: 4,
            d_model: 128,
            heads: 4,
            d_hidden_main: 552,
            d_hidden_branch: 128,
            ..ModelConfig::desk()
        }
    }

    /// Small enough for exhaustive gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            context: ContextConfig {
                n: 8,
                k: 1,
                strict_level: false,
            },
            d_occupancy: 4,
            d_level: 2,
            d_octant: 2,
            d_model: 16,
            heads: 2,
            d_hidden_main: 12,
            d_hidden_branch: 6,
            ..ModelConfig::desk()
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.enable_residual, self.enable_branch) = v.flags();
        self
    }

    pub fn variant(&self) -> Variant {
        Variant::from_flags(self.enable_residual, self.enable_branch)
    }

    pub fn validate(&self) -> Result<()> {
        self.context.validate()?;
        let dims = [
            self.d_occupancy,
            self.d_level,
            self.d_octant,
            self.d_model,
            self.heads,
            self.d_hidden_main,
            self.d_hidden_branch,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(
                "all model dimensions must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub(crate) fn embed_width(&self) -> usize {
        self.d_occupancy + self.d_level + self.d_octant
    }

    pub(crate) fn chain_width(&self) -> usize {
        self.embed_width() * self.context.chain_len()
    }

    /// Key/value pairs stored alongside the weights.
    pub fn to_echo(&self) -> Vec<(String, String)> {
        let onoff = |b: bool| if b { "on" } else { "off" }.to_string();
        vec![
            ("n".into(), self.context.n.to_string()),
            ("k".into(), self.context.k.to_string()),
            ("strict_level".into(), onoff(self.context.strict_level)),
            ("d_occupancy".into(), self.d_occupancy.to_string()),
            ("d_level".into(), self.d_level.to_string()),
            ("d_octant".into(), self.d_octant.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("d_hidden_main".into(), self.d_hidden_main.to_string()),
            ("d_hidden_branch".into(), self.d_hidden_branch.to_string()),
            ("residual".into(), onoff(self.enable_residual)),
            ("branch".into(), onoff(self.enable_branch)),
            ("zero_init_output".into(), onoff(self.zero_init_output)),
            ("seed".into(), self.seed.to_string()),
            ("variant".into(), self.variant().name().to_string()),
        ]
    }

    pub fn from_echo(echo: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| {
            echo.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Config(format!("checkpoint config lacks '{k}'")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("bad value for '{k}'")))
        };
        let flag = |k: &str| -> Result<bool> {
            match get(k)? {
                "on" => Ok(true),
                "off" => Ok(false),
                other => Err(Error::Config(format!("bad flag '{other}' for '{k}'"))),
            }
        };
        let cfg = ModelConfig {
            context: ContextConfig {
                n: num("n")?,
                k: num("k")?,
                strict_level: flag("strict_level")?,
            },
            d_occupancy: num("d_occupancy")?,
            d_level: num("d_level")?,
            d_octant: num("d_octant")?,
            d_model: num("d_model")?,
            heads: num("heads")?,
            d_hidden_main: num("d_hidden_main")?,
            d_hidden_branch: num("d_hidden_branch")?,
            enable_residual: flag("residual")?,
            enable_branch: flag("branch")?,
            zero_init_output: flag("zero_init_output")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Config("bad value for 'seed'".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Embeddings, input projection and attention.
    Trunk,
    Main,
    Branch,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("main.") {
        ParamGroup::Main
    } else if name.starts_with("branch.") {
        ParamGroup::Branch
    } else {
        ParamGroup::Trunk
    }
}

/// Weighted context `wc_i`: the attention output at the target slot.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedContext(pub Vec<f64>);

/// Normalized prediction over occupancy codes; index `j` is code `j + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution255(pub Vec<f64>);

impl Distribution255 {
    pub fn uniform() -> Self {
        Distribution255(vec![1.0 / CLASSES as f64; CLASSES])
    }

    pub fn prob(&self, occupancy: u8) -> f64 {
        self.0[occupancy as usize - 1]
    }
}

/// Branch output: per-child occupancy probabilities, octant order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchVector8(pub [f64; 8]);

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub wc: WeightedContext,
    pub residual: Vec<f64>,
    pub dist: Distribution255,
    pub branch: BranchVector8,
    /// First main-head layer activation.
    pub h1: Vec<f64>,
}

/// Code length in bits of `occupancy` under `q`.
pub fn loss_ce(q: &Distribution255, occupancy: u8) -> f64 {
    -q.prob(occupancy).log2()
}

/// Mean squared error between branch output and the true child occupancy.
pub fn loss_mse(o: &BranchVector8, l: [bool; 8]) -> f64 {
    o.0.iter()
        .zip(l)
        .map(|(&p, b)| {
            let t = if b { 1.0 } else { 0.0 };
            (t - p) * (t - p)
        })
        .sum::<f64>()
        / 8.0
}

pub fn occupancy_bits(occupancy: u8) -> [bool; 8] {
    crate::octree::child_mask(occupancy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Ce,
    Mse,
    /// `ce + mse`
    Both,
}

#[derive(Debug, Clone)]
pub struct BatchEval {
    pub ce: f64,
    pub mse: f64,
    pub grads: Grads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = &config;
        let mut p = ParamStore::new();
        let d = c.d_model;
        p.insert_normal("embed.occupancy", 256, c.d_occupancy, 0.02, &mut rng);
        p.insert_normal(
            "embed.level",
            MAX_DEPTH as usize + 1,
            c.d_level,
            0.02,
            &mut rng,
        );
        p.insert_normal("embed.octant", 8, c.d_octant, 0.02, &mut rng);
        p.insert_glorot("input.w", c.chain_width(), d, &mut rng);
        p.insert_zeros("input.b", &[d]);
        for name in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            p.insert_glorot(name, d, d, &mut rng);
        }
        p.insert_glorot("main.l1.w", 2 * d, c.d_hidden_main, &mut rng);
        p.insert_zeros("main.l1.b", &[c.d_hidden_main]);
        p.insert_glorot("main.l2.w", c.d_hidden_main, c.d_hidden_main, &mut rng);
        p.insert_zeros("main.l2.b", &[c.d_hidden_main]);
        p.insert_glorot("main.out.w", c.d_hidden_main + 8, CLASSES, &mut rng);
        // fused branch rows start at zero
        let out = p.get_mut("main.out.w").unwrap();
        out.data_mut()[c.d_hidden_main * CLASSES..]
            .iter_mut()
            .for_each(|x| *x = 0.0);
        p.insert_zeros("main.out.b", &[CLASSES]);
        p.insert_glorot("branch.l1.w", 2 * d, c.d_hidden_branch, &mut rng);
        p.insert_zeros("branch.l1.b", &[c.d_hidden_branch]);
        p.insert_glorot("branch.out.w", c.d_hidden_branch, 8, &mut rng);
        p.insert_zeros("branch.out.b", &[8]);
        if c.zero_init_output {
            p.insert_zeros("main.out.w", &[c.d_hidden_main + 8, CLASSES]);
            p.insert_zeros("branch.out.w", &[c.d_hidden_branch, 8]);
        }
        Ok(Model { config, params: p })
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        nn::save_checkpoint(&self.params, &self.config.to_echo())
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let (params, echo) = nn::load_checkpoint(bytes)?;
        let config = ModelConfig::from_echo(&echo)?;
        let reference = Model::new(config.clone())?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(u) if u.shape() == t.shape() => {}
                _ => {
                    return Err(Error::Config(format!(
                        "checkpoint tensor '{name}' missing or misshapen"
                    )))
                }
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Config("checkpoint holds unexpected tensors".into()));
        }
        Ok(Model { config, params })
    }

    /// SHA-256 of the checkpoint bytes; identifies the model in bitstreams.
    pub fn digest(&self) -> [u8; 32] {
        nn::digest(&self.to_checkpoint())
    }

    /// Evaluates one window. `wc_prev` is the previous node's weighted context,
    /// `None` for the first node of a sequence.
    pub fn forward(
        &self,
        window: &ContextWindow,
        wc_prev: Option<&WeightedContext>,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        if window.n != c.context.n || window.k != c.context.k {
            return Err(Error::invalid(format!(
                "window is N={} K={}, model expects N={} K={}",
                window.n, window.k, c.context.n, c.context.k
            )));
        }
        if window.slots.len() != window.n * (window.k + 1)
            || window.target.len() != window.k + 1
            || window.valid_mask.len() != window.n
        {
            return Err(Error::invalid("window arrays have inconsistent lengths"));
        }
        if let Some(p) = wc_prev {
            if p.0.len() != c.d_model {
                return Err(Error::invalid(format!(
                    "previous weighted context has width {}, expected {}",
                    p.0.len(),
                    c.d_model
                )));
            }
        }
        let in_range = |f: &Feature| f[1] <= MAX_DEPTH && f[2] < 8;
        if !window.slots.iter().chain(&window.target).all(in_range) {
            return Err(Error::invalid(
                "window feature level or octant out of range",
            ));
        }
        let mut pred_feats = Vec::new();
        for s in 0..window.n {
            if window.valid_mask[s] {
                pred_feats.extend_from_slice(window.slot(s));
            }
        }
        let valid = window.valid_count();
        let mut tape = Tape::new();
        let vars = graph::Vars::load(&mut tape, &self.params);
        let xp = graph::embed_rows(&mut tape, &vars.embed, c, &pred_feats);
        let xt = graph::embed_rows(&mut tape, &vars.embed, c, &window.target);
        let wc = graph::attend(&mut tape, &vars, c, xp, xt, vec![(0..valid).collect()]);
        let prev = wc_prev.map(|p| tape.constant(nn::Tensor::matrix(1, c.d_model, p.0.clone())));
        let out = graph::heads(&mut tape, &vars, c, wc, prev);
        tape.check_finite()?;
        Ok(graph::collect_single(&tape, &out))
    }

    /// Ideal code length in bits of a whole sequence, evaluated in coding order.
    pub fn sequence_entropy(&self, seq: &NodeSequence) -> Result<f64> {
        let mut runner = SequenceRunner::new(self);
        let mut bits = 0.0;
        for i in 0..seq.len() {
            let p = runner.predict(seq, i)?;
            bits += loss_ce(&p.dist, seq.nodes()[i].occupancy);
            runner.commit(seq, i)?;
        }
        Ok(bits)
    }

    /// Mean losses over the consecutive targets `range` of `seq` and the
    /// gradient of `objective` with respect to every parameter.
    pub fn batch_gradients(
        &self,
        seq: &NodeSequence,
        range: Range<usize>,
        objective: Objective,
    ) -> Result<BatchEval> {
        if range.is_empty() || range.end > seq.len() {
            return Err(Error::invalid(format!(
                "batch {range:?} outside sequence of {} nodes",
                seq.len()
            )));
        }
        let mut g = graph::batch_graph(self, seq, range);
        let loss = match objective {
            Objective::Ce => g.ce,
            Objective::Mse => g.mse,
            Objective::Both => g.tape.add(g.ce, g.mse),
        };
        let grads = g.tape.backward(loss)?;
        Ok(BatchEval {
            ce: g.tape.scalar(g.ce),
            mse: g.tape.scalar(g.mse),
            grads: grads.params,
        })
    }

    /// Forward pass over every node of `seq`, in order, via explicit windows.
    pub fn forward_sequence(&self, seq: &NodeSequence) -> Result<Vec<ForwardOutput>> {
        let mut outs: Vec<ForwardOutput> = Vec::with_capacity(seq.len());
        for i in 0..seq.len() {
            let w = window_for(seq, i, &self.config.context)?;
            let out = self.forward(&w, outs.last().map(|o| &o.wc))?;
            outs.push(out);
        }
        Ok(outs)
    }
}
