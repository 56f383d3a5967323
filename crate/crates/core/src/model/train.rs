use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{param_group, BatchEval, Model, Objective, ParamGroup};
use crate::error::{Error, Result};
use crate::nn::AdamConfig;
use crate::octree::NodeSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    /// Epochs of the first stage (branch only, squared-error loss).
    pub branch_epochs: usize,
    /// Epochs of the second stage (trunk and main head, cross-entropy).
    pub main_epochs: usize,
    /// Consecutive target nodes per batch.
    pub batch_size: usize,
    pub lr: f64,
    /// Per-epoch learning rate factor, restarted at each stage.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub shuffle: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            branch_epochs: 1,
            main_epochs: 3,
            batch_size: 32,
            lr: 1e-3,
            lr_decay: 0.95,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            shuffle: true,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let finite = [self.lr, self.lr_decay, self.beta1, self.beta2, self.eps];
        if finite.iter().any(|x| !x.is_finite()) || self.lr < 0.0 || self.lr_decay <= 0.0 {
            return Err(Error::Config(
                "learning rate settings must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return Err(Error::Config("Adam settings out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Branch,
    Main,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Branch => "branch",
            Stage::Main => "main",
        }
    }
}

/// Losses of one batch, measured before its update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub batch_index: usize,
    pub stage: Stage,
    pub epoch: usize,
    /// Mean code length in bits per node.
    pub ce: f64,
    pub mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<LossRecord>,
}

fn batches(corpus: &[NodeSequence], size: usize) -> Vec<(usize, std::ops::Range<usize>)> {
    let mut out = Vec::new();
    for (s, seq) in corpus.iter().enumerate() {
        let mut start = 0;
        while start < seq.len() {
            let end = (start + size).min(seq.len());
            out.push((s, start..end));
            start = end;
        }
    }
    out
}

/// Two-stage training. The branch is fitted first with the squared-error loss
/// while everything else is frozen; then the trunk and main head are fitted
/// with cross-entropy while the branch stays frozen. The first stage is
/// skipped when the branch is disabled.
pub fn train(
    mut model: Model,
    corpus: &[NodeSequence],
    schedule: &Schedule,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::invalid("training corpus has no nodes"));
    }
    let all = batches(corpus, schedule.batch_size);
    let mut trace = Vec::new();
    let mut stages = Vec::new();
    if model.config.enable_branch {
        stages.push((Stage::Branch, schedule.branch_epochs));
    }
    stages.push((Stage::Main, schedule.main_epochs));

    for (stage, epochs) in stages {
        // one shuffle stream per stage
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        rng.set_stream(stage as u64);
        let mut order = all.clone();
        let mut lr = schedule.lr;
        for epoch in 0..epochs {
            if schedule.shuffle {
                order.shuffle(&mut rng);
            }
            let adam = AdamConfig {
                lr,
                beta1: schedule.beta1,
                beta2: schedule.beta2,
                eps: schedule.eps,
            };
            for (s, range) in &order {
                let objective = match stage {
                    Stage::Branch => Objective::Mse,
                    Stage::Main => Objective::Ce,
                };
                let BatchEval { ce, mse, grads } =
                    model.batch_gradients(&corpus[*s], range.clone(), objective)?;
                if !ce.is_finite() || !mse.is_finite() {
                    return Err(Error::Numerical {
                        op: "training loss",
                    });
                }
                model.params.adam_step(&grads, &adam, |name| match stage {
                    Stage::Branch => param_group(name) == ParamGroup::Branch,
                    Stage::Main => param_group(name) != ParamGroup::Branch,
                })?;
                trace.push(LossRecord {
                    batch_index: trace.len(),
                    stage,
                    epoch,
                    ce,
                    mse,
                });
            }
            lr *= schedule.lr_decay;
        }
    }
    Ok(TrainOutcome { model, trace })
}
