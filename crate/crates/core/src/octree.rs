//! Breadth-first octree serialization.
//!
//! Nodes are emitted level by level. Within a level, children of earlier parents
//! come first and siblings follow ascending octant order, which is exactly the
//! sorted order of the nodes' Morton prefixes. Octant `j = 4x + 2y + z` (the
//! halves along each axis) maps to bit `j` of the occupancy code.

use crate::error::{Error, Result};
use crate::geometry::{QuantizedPointCloud, Voxel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OctreeNode {
    /// Child occupancy bits, 1..=255. Zero only as a not-yet-decoded placeholder.
    pub occupancy: u8,
    /// 1 for the root.
    pub level: u8,
    /// Position within the parent, 0..8. The root uses 0.
    pub octant: u8,
    pub parent: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSequence {
    depth: u8,
    nodes: Vec<OctreeNode>,
    /// `level_offsets[l - 1]` is the index of the first node at level `l`; the
    /// final entry is `nodes.len()`.
    level_offsets: Vec<usize>,
}

pub fn occupancy_code(child_mask: [bool; 8]) -> Result<u8> {
    let code = child_mask
        .iter()
        .enumerate()
        .fold(0u8, |acc, (j, &b)| acc | ((b as u8) << j));
    if code == 0 {
        return Err(Error::invalid("occupancy mask has no occupied child"));
    }
    Ok(code)
}

pub fn child_mask(code: u8) -> [bool; 8] {
    std::array::from_fn(|j| code >> j & 1 == 1)
}

pub fn octant_offset(octant: u8) -> [u32; 3] {
    [
        (octant >> 2 & 1) as u32,
        (octant >> 1 & 1) as u32,
        (octant & 1) as u32,
    ]
}

fn morton(v: &Voxel, depth: u8) -> u64 {
    let mut code = 0u64;
    for b in (0..depth).rev() {
        let oct = (v[0] >> b & 1) << 2 | (v[1] >> b & 1) << 1 | (v[2] >> b & 1);
        code = code << 3 | oct as u64;
    }
    code
}

pub fn build(qpc: &QuantizedPointCloud) -> NodeSequence {
    let depth = qpc.depth();
    let mut codes: Vec<u64> = qpc.voxels().iter().map(|v| morton(v, depth)).collect();
    codes.sort_unstable();
    codes.dedup();

    let mut nodes: Vec<OctreeNode> = Vec::new();
    let mut level_offsets = Vec::with_capacity(depth as usize + 1);
    let mut prev_level_start = 0usize;
    for level in 1..=depth {
        let level_start = nodes.len();
        level_offsets.push(level_start);
        let node_shift = 3 * (depth - level + 1) as u32;
        let child_shift = node_shift - 3;
        // parents of this level are the previous level's nodes, in the same order
        let mut parent_idx = prev_level_start;
        let mut cur_parent_key: Option<u64> = None;
        let mut cur_key: Option<u64> = None;
        for &c in &codes {
            let key = c.checked_shr(node_shift).unwrap_or(0);
            let child = (c >> child_shift & 7) as u8;
            if cur_key == Some(key) {
                if let Some(n) = nodes.last_mut() {
                    n.occupancy |= 1 << child;
                }
                continue;
            }
            cur_key = Some(key);
            let parent = if level == 1 {
                None
            } else {
                let pkey = key >> 3;
                match cur_parent_key {
                    Some(k) if k == pkey => {}
                    Some(_) => parent_idx += 1,
                    None => {}
                }
                cur_parent_key = Some(pkey);
                Some(parent_idx as u32)
            };
            nodes.push(OctreeNode {
                occupancy: 1 << child,
                level,
                octant: if level == 1 { 0 } else { (key & 7) as u8 },
                parent,
            });
        }
        prev_level_start = level_start;
    }
    level_offsets.push(nodes.len());
    NodeSequence {
        depth,
        nodes,
        level_offsets,
    }
}

pub fn reconstruct(seq: &NodeSequence, levels: u8) -> Result<QuantizedPointCloud> {
    seq.reconstruct(levels)
}

impl NodeSequence {
    /// Validates and wraps a node list.
    pub fn new(depth: u8, nodes: Vec<OctreeNode>) -> Result<Self> {
        if depth == 0 || depth > crate::geometry::MAX_DEPTH {
            return Err(Error::invalid(format!("depth {depth} out of range")));
        }
        let mut level_offsets = vec![0usize];
        let mut expected_children = 1usize;
        let mut idx = 0usize;
        for level in 1..=depth {
            let start = idx;
            let mut children = 0usize;
            for _ in 0..expected_children {
                let n = nodes
                    .get(idx)
                    .ok_or_else(|| Error::invalid(format!("level {level} is short of nodes")))?;
                if n.level != level || n.occupancy == 0 || n.octant > 7 {
                    return Err(Error::invalid(format!("node {idx} is malformed: {n:?}")));
                }
                match (level, n.parent) {
                    (1, None) if n.octant == 0 => {}
                    (1, _) => return Err(Error::invalid("root must have octant 0 and no parent")),
                    (_, Some(p))
                        if (p as usize) < start && nodes[p as usize].level == level - 1 => {}
                    _ => return Err(Error::invalid(format!("node {idx} has a bad parent"))),
                }
                children += n.occupancy.count_ones() as usize;
                idx += 1;
            }
            level_offsets.push(idx);
            expected_children = children;
        }
        if idx != nodes.len() {
            return Err(Error::invalid("trailing nodes after the last level"));
        }
        Ok(NodeSequence {
            depth,
            nodes,
            level_offsets,
        })
    }

    /// A sequence holding only an undecoded root, grown with [`Self::expand`].
    pub fn root_only(depth: u8) -> Self {
        NodeSequence {
            depth,
            nodes: vec![OctreeNode {
                occupancy: 0,
                level: 1,
                octant: 0,
                parent: None,
            }],
            level_offsets: vec![0, 1],
        }
    }

    /// Sets node `i`'s occupancy and, unless it sits at `max_level`, appends its
    /// children with placeholder occupancy. Nodes must be expanded in order.
    pub fn expand(&mut self, i: usize, occupancy: u8, max_level: u8) -> Result<()> {
        if occupancy == 0 {
            return Err(Error::corrupt("decoded an empty occupancy code"));
        }
        let node = self
            .nodes
            .get_mut(i)
            .ok_or_else(|| Error::invalid("expand index out of range"))?;
        node.occupancy = occupancy;
        let level = node.level;
        if level >= max_level.min(self.depth) {
            return Ok(());
        }
        if self.level_offsets.len() == level as usize + 1 {
            self.level_offsets.push(self.nodes.len());
        }
        for oct in 0..8u8 {
            if occupancy >> oct & 1 == 1 {
                self.nodes.push(OctreeNode {
                    occupancy: 0,
                    level: level + 1,
                    octant: oct,
                    parent: Some(i as u32),
                });
            }
        }
        *self.level_offsets.last_mut().unwrap() = self.nodes.len();
        Ok(())
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    pub fn nodes(&self) -> &[OctreeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of levels present.
    pub fn levels(&self) -> u8 {
        (self.level_offsets.len() - 1) as u8
    }

    pub fn level_offsets(&self) -> &[usize] {
        &self.level_offsets
    }

    /// Index range of the nodes at `level` (1-based).
    pub fn level_range(&self, level: u8) -> std::ops::Range<usize> {
        let l = level as usize;
        self.level_offsets[l - 1]..self.level_offsets[l]
    }

    /// Nodes of levels `1..=levels`, i.e. the prefix a truncated encoder codes.
    pub fn truncated_len(&self, levels: u8) -> usize {
        self.level_offsets[levels as usize]
    }

    /// Walks up to `k` ancestors of node `i`, nearest first.
    pub fn ancestors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        std::iter::successors(self.nodes[i].parent.map(|p| p as usize), move |&j| {
            self.nodes[j].parent.map(|p| p as usize)
        })
    }

    /// Minimum corner of each node's cell at full resolution.
    fn cell_origins(&self, upto: usize) -> Vec<[u32; 3]> {
        let mut origins: Vec<[u32; 3]> = Vec::with_capacity(upto);
        for n in &self.nodes[..upto] {
            let o = match n.parent {
                None => [0; 3],
                Some(p) => {
                    let half = 1u32 << (self.depth - n.level + 1);
                    let po = origins[p as usize];
                    let off = octant_offset(n.octant);
                    [
                        po[0] + off[0] * half,
                        po[1] + off[1] * half,
                        po[2] + off[2] * half,
                    ]
                }
            };
            origins.push(o);
        }
        origins
    }

    pub fn reconstruct(&self, levels: u8) -> Result<QuantizedPointCloud> {
        if levels == 0 || levels > self.levels() {
            return Err(Error::invalid(format!(
                "levels {levels} outside [1, {}]",
                self.levels()
            )));
        }
        let range = self.level_range(levels);
        let origins = self.cell_origins(range.end);
        // occupied child cells of the last kept level, each represented by its center
        let child = 1u32 << (self.depth - levels);
        let center = child / 2;
        let mut voxels = Vec::new();
        for i in range {
            let o = origins[i];
            for oct in 0..8u8 {
                if self.nodes[i].occupancy >> oct & 1 == 1 {
                    let off = octant_offset(oct);
                    voxels.push(std::array::from_fn(|a| o[a] + off[a] * child + center));
                }
            }
        }
        QuantizedPointCloud::new(self.depth, voxels, [0.0; 3], 1.0)
    }
}
