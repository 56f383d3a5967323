use super::graph::{self, EmbedVars, Vars};
use super::{BranchVector8, Distribution255, Model, WeightedContext};
use crate::context::{chain_features, visible_predecessors};
use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor};
use crate::octree::NodeSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub dist: Distribution255,
    pub branch: BranchVector8,
    pub wc: WeightedContext,
    /// First main-head layer activation.
    pub h1: Vec<f64>,
}

/// Evaluates a sequence node by node, the way the decoder sees it.
///
/// Key and value rows of nodes whose occupancy is known are cached, and the
/// previous weighted context is carried for the residual. Call
/// [`predict`](Self::predict) then [`commit`](Self::commit) for nodes `0, 1, ...`.
pub struct SequenceRunner<'m> {
    model: &'m Model,
    keys: Vec<f64>,
    values: Vec<f64>,
    committed: usize,
    prev_wc: Option<WeightedContext>,
}

impl<'m> SequenceRunner<'m> {
    pub fn new(model: &'m Model) -> Self {
        SequenceRunner {
            model,
            keys: Vec::new(),
            values: Vec::new(),
            committed: 0,
            prev_wc: None,
        }
    }

    /// Distribution for node `i`. Reads only nodes before `i` and the target's
    /// own ancestors.
    pub fn predict(&mut self, seq: &NodeSequence, i: usize) -> Result<Prediction> {
        if i != self.committed {
            return Err(Error::invalid(format!(
                "expected node {}, got {i}",
                self.committed
            )));
        }
        let cfg = &self.model.config;
        let d = cfg.d_model;
        let preds: Vec<usize> = visible_predecessors(seq, i, &cfg.context).collect();
        let mut kp = Vec::with_capacity(preds.len() * d);
        let mut vp = Vec::with_capacity(preds.len() * d);
        for &j in &preds {
            kp.extend_from_slice(&self.keys[j * d..(j + 1) * d]);
            vp.extend_from_slice(&self.values[j * d..(j + 1) * d]);
        }

        let mut tape = Tape::new();
        let vars = Vars::load(&mut tape, &self.model.params);
        let xt = graph::embed_rows(
            &mut tape,
            &vars.embed,
            cfg,
            &chain_features(seq, i, cfg.context.k, true),
        );
        let kp = tape.constant(Tensor::matrix(preds.len(), d, kp));
        let vp = tape.constant(Tensor::matrix(preds.len(), d, vp));
        let wc = graph::attend_cached(
            &mut tape,
            &vars,
            cfg,
            kp,
            vp,
            xt,
            vec![(0..preds.len()).collect()],
        );
        let prev = self
            .prev_wc
            .as_ref()
            .map(|p| tape.constant(Tensor::matrix(1, d, p.0.clone())));
        let out = graph::heads(&mut tape, &vars, cfg, wc, prev);
        tape.check_finite()?;
        let f = graph::collect_single(&tape, &out);
        self.prev_wc = Some(f.wc.clone());
        Ok(Prediction {
            dist: f.dist,
            branch: f.branch,
            wc: f.wc,
            h1: f.h1,
        })
    }

    /// Records node `i` (occupancy now known) as a future key/value row.
    pub fn commit(&mut self, seq: &NodeSequence, i: usize) -> Result<()> {
        if i != self.committed {
            return Err(Error::invalid(format!(
                "expected node {}, got {i}",
                self.committed
            )));
        }
        let cfg = &self.model.config;
        let mut tape = Tape::new();
        let embed = EmbedVars::load(&mut tape, &self.model.params);
        let wk = self.model.params.var(&mut tape, "attn.wk");
        let wv = self.model.params.var(&mut tape, "attn.wv");
        let x = graph::embed_rows(
            &mut tape,
            &embed,
            cfg,
            &chain_features(seq, i, cfg.context.k, false),
        );
        let k = tape.matmul(x, wk);
        let v = tape.matmul(x, wv);
        self.keys.extend_from_slice(tape.value(k).data());
        self.values.extend_from_slice(tape.value(v).data());
        self.committed += 1;
        Ok(())
    }
}
