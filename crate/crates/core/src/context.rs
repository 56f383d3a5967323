//! Per-node model inputs: a sliding window over the breadth-first node stream.
//!
//! Slot `s` of the window for target `i` holds node `i - N + s`, so the most
//! recent predecessor sits last. Every slot carries its node followed by up to
//! `K` ancestors, each as an `(occupancy, level, octant)` triple. The target
//! contributes its own chain with the occupancy zeroed, since the decoder does
//! not know it yet. Padding is the all-zero triple; occupancy 0 never occurs in
//! a real node.

use std::io::{BufRead, Write};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::octree::NodeSequence;

/// `(occupancy, level, octant)`.
pub type Feature = [u8; 3];

pub const PAD: Feature = [0, 0, 0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextConfig {
    /// Window length N.
    pub n: usize,
    /// Ancestors per slot K.
    pub k: usize,
    /// Mask predecessors from other octree levels.
    pub strict_level: bool,
}

impl ContextConfig {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        let cfg = ContextConfig {
            n,
            k,
            strict_level: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("context window length must be at least 1"));
        }
        Ok(())
    }

    pub fn chain_len(&self) -> usize {
        self.k + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow {
    pub n: usize,
    pub k: usize,
    /// `n * (k + 1)` features, slot-major.
    pub slots: Vec<Feature>,
    /// `k + 1` features: the target (occupancy zeroed) and its ancestors.
    pub target: Vec<Feature>,
    pub valid_mask: Vec<bool>,
    pub target_index: usize,
}

impl ContextWindow {
    pub fn slot(&self, s: usize) -> &[Feature] {
        let c = self.k + 1;
        &self.slots[s * c..(s + 1) * c]
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }
}

/// Node `j` followed by up to `k` ancestors, padded above the root.
pub fn chain_features(seq: &NodeSequence, j: usize, k: usize, hide_own: bool) -> Vec<Feature> {
    let nodes = seq.nodes();
    let mut out = Vec::with_capacity(k + 1);
    let n = nodes[j];
    out.push([if hide_own { 0 } else { n.occupancy }, n.level, n.octant]);
    out.extend(
        seq.ancestors(j)
            .take(k)
            .map(|a| [nodes[a].occupancy, nodes[a].level, nodes[a].octant]),
    );
    out.resize(k + 1, PAD);
    out
}

/// Indices of the predecessors visible to target `i`, oldest first. Slot `s`
/// of the window corresponds to `i - n + s`.
pub fn visible_predecessors<'a>(
    seq: &'a NodeSequence,
    i: usize,
    cfg: &ContextConfig,
) -> impl Iterator<Item = usize> + 'a {
    let level = seq.nodes()[i].level;
    let strict = cfg.strict_level;
    (i.saturating_sub(cfg.n)..i).filter(move |&j| !strict || seq.nodes()[j].level == level)
}

pub fn window_for(seq: &NodeSequence, i: usize, cfg: &ContextConfig) -> Result<ContextWindow> {
    cfg.validate()?;
    if i >= seq.len() {
        return Err(Error::invalid(format!(
            "node index {i} out of range (len {})",
            seq.len()
        )));
    }
    let c = cfg.chain_len();
    let mut slots = vec![PAD; cfg.n * c];
    let mut valid_mask = vec![false; cfg.n];
    for j in visible_predecessors(seq, i, cfg) {
        let s = j + cfg.n - i;
        slots[s * c..(s + 1) * c].copy_from_slice(&chain_features(seq, j, cfg.k, false));
        valid_mask[s] = true;
    }
    Ok(ContextWindow {
        n: cfg.n,
        k: cfg.k,
        slots,
        target: chain_features(seq, i, cfg.k, true),
        valid_mask,
        target_index: i,
    })
}

pub fn window_batch(
    seq: &NodeSequence,
    range: Range<usize>,
    cfg: &ContextConfig,
) -> Result<Vec<ContextWindow>> {
    if range.is_empty() {
        return Err(Error::invalid("empty window range"));
    }
    range.map(|i| window_for(seq, i, cfg)).collect()
}

/// A window plus the occupancy it should predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowRecord {
    pub window: ContextWindow,
    pub occupancy: u8,
}

/// Writes one record per line as flat integers:
/// `target_index occupancy n k mask[n] slots[n*(k+1)*3] target[(k+1)*3]`.
pub fn write_dump<W: Write>(out: &mut W, records: &[WindowRecord]) -> Result<()> {
    for r in records {
        let w = &r.window;
        let mut line = format!("{} {} {} {}", w.target_index, r.occupancy, w.n, w.k);
        for &m in &w.valid_mask {
            line.push_str(if m { " 1" } else { " 0" });
        }
        for f in w.slots.iter().chain(&w.target) {
            for v in f {
                line.push(' ');
                line.push_str(&v.to_string());
            }
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn read_dump<R: BufRead>(input: R) -> Result<Vec<WindowRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::parse(format!("dump line {}: malformed record", lineno + 1));
        let vals: Vec<usize> = line
            .split_ascii_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if vals.len() < 4 {
            return Err(bad());
        }
        let (target_index, occupancy, n, k) = (vals[0], vals[1], vals[2], vals[3]);
        let c = k + 1;
        if n == 0 || vals.len() != 4 + n + (n + 1) * c * 3 || occupancy > 255 {
            return Err(bad());
        }
        let mask = &vals[4..4 + n];
        if mask.iter().any(|&m| m > 1) {
            return Err(bad());
        }
        let feats: Vec<Feature> = vals[4 + n..]
            .chunks(3)
            .map(|f| {
                if f.iter().any(|&v| v > 255) {
                    Err(bad())
                } else {
                    Ok([f[0] as u8, f[1] as u8, f[2] as u8])
                }
            })
            .collect::<Result<_>>()?;
        records.push(WindowRecord {
            window: ContextWindow {
                n,
                k,
                slots: feats[..n * c].to_vec(),
                target: feats[n * c..].to_vec(),
                valid_mask: mask.iter().map(|&m| m == 1).collect(),
                target_index,
            },
            occupancy: occupancy as u8,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::QuantizedPointCloud;
    use crate::octree::{build, OctreeNode};

    fn tiny_tree() -> NodeSequence {
        // depth 2: root with children at octants 0, 3 and 7
        let q = QuantizedPointCloud::new(
            2,
            vec![[0, 0, 0], [0, 3, 3], [3, 3, 3], [2, 2, 3]],
            [0.0; 3],
            1.0,
        )
        .unwrap();
        build(&q)
    }

    fn cfg(n: usize, k: usize) -> ContextConfig {
        ContextConfig::new(n, k).unwrap()
    }

    #[test]
    fn root_window_is_padding() {
        let seq = tiny_tree();
        let w = window_for(&seq, 0, &cfg(4, 2)).unwrap();
        assert!(w.valid_mask.iter().all(|&m| !m));
        assert!(w.slots.iter().all(|&f| f == PAD));
        assert_eq!(w.target, vec![[0, 1, 0], PAD, PAD]);
    }

    #[test]
    fn hand_enumerated_tiny_tree() {
        let seq = tiny_tree();
        let nodes = seq.nodes();
        assert_eq!(nodes.len(), 4);
        let root = nodes[0];
        assert_eq!(root.occupancy, 1 | 1 << 3 | 1 << 7);
        let w = window_for(&seq, 3, &cfg(4, 1)).unwrap();
        assert_eq!(w.valid_mask, vec![false, true, true, true]);
        let r = [root.occupancy, 1, 0];
        let f = |n: OctreeNode| [n.occupancy, n.level, n.octant];
        assert_eq!(w.slot(0), &[PAD, PAD]);
        assert_eq!(w.slot(1), &[r, PAD]);
        assert_eq!(w.slot(2), &[f(nodes[1]), r]);
        assert_eq!(w.slot(3), &[f(nodes[2]), r]);
        assert_eq!(w.target, vec![[0, 2, 7], r]);
    }

    #[test]
    fn sliding_by_one() {
        let q = QuantizedPointCloud::new(
            4,
            (0..16).map(|i| [i, (i * 7) % 16, (i * 3) % 16]).collect(),
            [0.0; 3],
            1.0,
        )
        .unwrap();
        let seq = build(&q);
        let c = cfg(6, 2);
        for i in 0..seq.len() - 1 {
            let a = window_for(&seq, i, &c).unwrap();
            let b = window_for(&seq, i + 1, &c).unwrap();
            for s in 0..c.n - 1 {
                assert_eq!(a.slot(s + 1), b.slot(s));
                assert_eq!(a.valid_mask[s + 1], b.valid_mask[s]);
            }
            // the new last slot is the previous target with its occupancy revealed
            let mut revealed = a.target.clone();
            revealed[0][0] = seq.nodes()[i].occupancy;
            assert_eq!(b.slot(c.n - 1), revealed.as_slice());
        }
    }

    #[test]
    fn batch_equals_individual_calls() {
        let seq = build(
            &QuantizedPointCloud::new(
                3,
                (0..16)
                    .map(|i| [i % 8, (i * 3) % 8, (i * 5 + i / 8) % 8])
                    .collect(),
                [0.0; 3],
                1.0,
            )
            .unwrap(),
        );
        assert!(seq.len() >= 8);
        let c = cfg(3, 2);
        let batch = window_batch(&seq, 5..8, &c).unwrap();
        for (w, i) in batch.iter().zip(5..8) {
            assert_eq!(*w, window_for(&seq, i, &c).unwrap());
        }
        let all: Vec<_> = (0..seq.len())
            .map(|i| window_for(&seq, i, &c).unwrap())
            .collect();
        let mut chunked = Vec::new();
        let mut s = 0;
        while s < seq.len() {
            let e = (s + 4).min(seq.len());
            chunked.extend(window_batch(&seq, s..e, &c).unwrap());
            s = e;
        }
        assert_eq!(all, chunked);
        assert!(window_batch(&seq, 3..3, &c).is_err());
        assert!(window_for(&seq, seq.len(), &c).is_err());
    }

    #[test]
    fn level_boundary_features() {
        let seq = build(
            &QuantizedPointCloud::new(
                3,
                (0..8).map(|i| [i, 7 - i, i / 2]).collect(),
                [0.0; 3],
                1.0,
            )
            .unwrap(),
        );
        let c = cfg(4, 0);
        let start = seq.level_range(3).start;
        let windows = window_batch(&seq, start - 2..start + 2, &c).unwrap();
        for (w, i) in windows.iter().zip(start - 2..) {
            // oracle: slot s holds node i-4+s, whose level is read straight off the node list
            for s in 0..4 {
                let want = (i + s)
                    .checked_sub(4)
                    .map(|j| seq.nodes()[j].level)
                    .unwrap_or(0);
                assert_eq!(w.slot(s)[0][1], want);
            }
            assert_eq!(w.target[0][1], seq.nodes()[i].level);
        }
        let strict = ContextConfig {
            strict_level: true,
            ..c
        };
        let w = window_for(&seq, start, &strict).unwrap();
        assert!(w.valid_mask.iter().all(|&m| !m));
        let w = window_for(&seq, start + 1, &strict).unwrap();
        assert_eq!(w.valid_mask, vec![false, false, false, true]);
    }

    #[test]
    fn only_decoded_information_is_visible() {
        let seq = build(
            &QuantizedPointCloud::new(
                4,
                (0..40)
                    .map(|i| [i % 16, (i * 5) % 16, (i * 11) % 16])
                    .collect(),
                [0.0; 3],
                1.0,
            )
            .unwrap(),
        );
        let c = cfg(8, 3);
        for i in 0..seq.len() {
            // the decoder's tree before node i: later occupancies are unknown and
            // nodes below undecoded parents do not exist yet
            let hidden = HiddenTail::new(&seq, i);
            assert_eq!(
                window_for(&seq, i, &c).unwrap(),
                window_for(&hidden.0, i, &c).unwrap()
            );
        }
    }

    /// The tree as the decoder holds it just before decoding node `i`.
    struct HiddenTail(NodeSequence);

    impl HiddenTail {
        fn new(seq: &NodeSequence, i: usize) -> Self {
            let mut grown = NodeSequence::root_only(seq.depth());
            for j in 0..i {
                grown
                    .expand(j, seq.nodes()[j].occupancy, seq.depth())
                    .unwrap();
            }
            HiddenTail(grown)
        }
    }

    #[test]
    fn dump_round_trip() {
        let seq = tiny_tree();
        let c = cfg(3, 1);
        let records: Vec<WindowRecord> = (0..seq.len())
            .map(|i| WindowRecord {
                window: window_for(&seq, i, &c).unwrap(),
                occupancy: seq.nodes()[i].occupancy,
            })
            .collect();
        let mut buf = Vec::new();
        write_dump(&mut buf, &records).unwrap();
        assert_eq!(read_dump(buf.as_slice()).unwrap(), records);
        assert!(read_dump(&b"1 2 3\n"[..]).is_err());
    }
}
