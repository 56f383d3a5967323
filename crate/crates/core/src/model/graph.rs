//! Tape construction shared by training, single-window inference and the
//! incremental runner. All three paths go through these functions, and every
//! kernel is row-independent, so they produce bit-identical predictions.

use std::ops::Range;

use super::{
    BranchVector8, Distribution255, ForwardOutput, Model, ModelConfig, WeightedContext, CLASSES,
    PROB_FLOOR_MIX,
};
use crate::context::{chain_features, visible_predecessors, Feature};
use crate::nn::{ParamStore, Tape, Tensor, Var};
use crate::octree::NodeSequence;

pub(crate) struct EmbedVars {
    occupancy: Var,
    level: Var,
    octant: Var,
    w: Var,
    b: Var,
}

impl EmbedVars {
    pub(crate) fn load(tape: &mut Tape, p: &ParamStore) -> Self {
        EmbedVars {
            occupancy: p.var(tape, "embed.occupancy"),
            level: p.var(tape, "embed.level"),
            octant: p.var(tape, "embed.octant"),
            w: p.var(tape, "input.w"),
            b: p.var(tape, "input.b"),
        }
    }
}

pub(crate) struct Vars {
    pub(crate) embed: EmbedVars,
    pub(crate) wq: Var,
    pub(crate) wk: Var,
    pub(crate) wv: Var,
    pub(crate) wo: Var,
    main: [Var; 6],
    branch: [Var; 4],
}

impl Vars {
    pub(crate) fn load(tape: &mut Tape, p: &ParamStore) -> Self {
        Vars {
            embed: EmbedVars::load(tape, p),
            wq: p.var(tape, "attn.wq"),
            wk: p.var(tape, "attn.wk"),
            wv: p.var(tape, "attn.wv"),
            wo: p.var(tape, "attn.wo"),
            main: [
                "main.l1.w",
                "main.l1.b",
                "main.l2.w",
                "main.l2.b",
                "main.out.w",
                "main.out.b",
            ]
            .map(|n| p.var(tape, n)),
            branch: ["branch.l1.w", "branch.l1.b", "branch.out.w", "branch.out.b"]
                .map(|n| p.var(tape, n)),
        }
    }
}

/// Embeds chains (`rows * (k + 1)` features, row-major) and projects each row
/// to the model width.
pub(crate) fn embed_rows(
    tape: &mut Tape,
    v: &EmbedVars,
    cfg: &ModelConfig,
    feats: &[Feature],
) -> Var {
    let c = cfg.context.chain_len();
    let rows = feats.len() / c;
    let mut parts = Vec::with_capacity(3 * c);
    for e in 0..c {
        for (f, table) in [v.occupancy, v.level, v.octant].into_iter().enumerate() {
            let idx = (0..rows)
                .map(|r| Some(feats[r * c + e][f] as usize))
                .collect();
            parts.push(tape.gather_rows(table, idx));
        }
    }
    let x = tape.concat_cols(&parts);
    tape.linear(x, v.w, v.b)
}

/// Weighted contexts for the target rows `xt`, each attending over its listed
/// rows of `xp` and itself.
pub(crate) fn attend(
    tape: &mut Tape,
    v: &Vars,
    cfg: &ModelConfig,
    xp: Var,
    xt: Var,
    preds: Vec<Vec<usize>>,
) -> Var {
    let kp = tape.matmul(xp, v.wk);
    let vp = tape.matmul(xp, v.wv);
    attend_cached(tape, v, cfg, kp, vp, xt, preds)
}

pub(crate) fn attend_cached(
    tape: &mut Tape,
    v: &Vars,
    cfg: &ModelConfig,
    kp: Var,
    vp: Var,
    xt: Var,
    preds: Vec<Vec<usize>>,
) -> Var {
    let q = tape.matmul(xt, v.wq);
    let kt = tape.matmul(xt, v.wk);
    let vt = tape.matmul(xt, v.wv);
    let att = tape.target_attention(q, kp, vp, kt, vt, preds, cfg.heads);
    tape.matmul(att, v.wo)
}

pub(crate) struct HeadVars {
    pub(crate) wc: Var,
    pub(crate) residual: Var,
    pub(crate) probs: Var,
    pub(crate) h1: Var,
    pub(crate) branch: Var,
}

/// Residual, both MLP heads and the branch-to-main fusion. `prev` holds each
/// row's previous weighted context; `None` means no predecessor (r = 0).
pub(crate) fn heads(
    tape: &mut Tape,
    v: &Vars,
    cfg: &ModelConfig,
    wc: Var,
    prev: Option<Var>,
) -> HeadVars {
    let rows = tape.value(wc).rows();
    let residual = match (cfg.enable_residual, prev) {
        (true, Some(p)) => tape.sub(wc, p),
        _ => tape.constant(Tensor::zeros(&[rows, cfg.d_model])),
    };
    let h0 = tape.concat_cols(&[wc, residual]);

    let [w1, b1, w2, b2, wo, bo] = v.main;
    let h1 = tape.linear(h0, w1, b1);
    let h1 = tape.relu(h1);
    let h2 = tape.linear(h1, w2, b2);
    let h2 = tape.relu(h2);

    let [bw1, bb1, bwo, bbo] = v.branch;
    let g = tape.linear(h0, bw1, bb1);
    let g = tape.relu(g);
    let g = tape.linear(g, bwo, bbo);
    let branch = tape.sigmoid(g);

    let fused = if cfg.enable_branch {
        branch
    } else {
        tape.constant(Tensor::zeros(&[rows, 8]))
    };
    let z = tape.concat_cols(&[h2, fused]);
    let logits = tape.linear(z, wo, bo);
    let sm = tape.softmax_rows(logits, None);
    let mixed = tape.scale(sm, 1.0 - PROB_FLOOR_MIX);
    let probs = tape.add_scalar(mixed, PROB_FLOOR_MIX / CLASSES as f64);
    HeadVars {
        wc,
        residual,
        probs,
        h1,
        branch,
    }
}

pub(crate) fn collect_row(tape: &Tape, out: &HeadVars, row: usize) -> ForwardOutput {
    let b = tape.value(out.branch).row(row);
    ForwardOutput {
        wc: WeightedContext(tape.value(out.wc).row(row).to_vec()),
        residual: tape.value(out.residual).row(row).to_vec(),
        dist: Distribution255(tape.value(out.probs).row(row).to_vec()),
        branch: BranchVector8(std::array::from_fn(|j| b[j])),
        h1: tape.value(out.h1).row(row).to_vec(),
    }
}

pub(crate) fn collect_single(tape: &Tape, out: &HeadVars) -> ForwardOutput {
    collect_row(tape, out, 0)
}

/// Training graph for the consecutive targets `range` of one sequence.
pub(crate) struct BatchGraph {
    pub tape: Tape,
    pub ce: Var,
    pub mse: Var,
}

pub(crate) fn batch_graph(model: &Model, seq: &NodeSequence, range: Range<usize>) -> BatchGraph {
    let cfg = &model.config;
    let k = cfg.context.k;
    // one extra leading target supplies wc_{start-1} for the first residual
    let ext = range.start.saturating_sub(1);
    let lo = ext.saturating_sub(cfg.context.n);
    let pred_end = range.end - 1;

    let mut pred_feats = Vec::new();
    for j in lo..pred_end.max(lo) {
        pred_feats.extend(chain_features(seq, j, k, false));
    }
    let mut target_feats = Vec::new();
    let mut preds = Vec::new();
    for i in ext..range.end {
        target_feats.extend(chain_features(seq, i, k, true));
        preds.push(
            visible_predecessors(seq, i, &cfg.context)
                .map(|j| j - lo)
                .collect(),
        );
    }

    let mut tape = Tape::new();
    let vars = Vars::load(&mut tape, &model.params);
    let xp = embed_rows(&mut tape, &vars.embed, cfg, &pred_feats);
    let xt = embed_rows(&mut tape, &vars.embed, cfg, &target_feats);
    let wc_all = attend(&mut tape, &vars, cfg, xp, xt, preds);

    let off = range.start - ext;
    let rows = range.end - ext;
    let wc = tape.gather_rows(wc_all, (off..rows).map(Some).collect());
    // row 0 of the whole sequence pairs with itself, giving r = 0
    let prev = tape.gather_rows(
        wc_all,
        (off..rows).map(|b| Some(b.saturating_sub(1))).collect(),
    );
    let heads = heads(&mut tape, &vars, cfg, wc, Some(prev));

    let labels: Vec<usize> = range
        .clone()
        .map(|i| seq.nodes()[i].occupancy as usize - 1)
        .collect();
    let bits: Vec<f64> = range
        .clone()
        .flat_map(|i| super::occupancy_bits(seq.nodes()[i].occupancy))
        .map(|b| if b { 1.0 } else { 0.0 })
        .collect();
    let ce = tape.nll_log2(heads.probs, labels);
    let mse = tape.mse(heads.branch, bits);
    BatchGraph { tape, ce, mse }
}
