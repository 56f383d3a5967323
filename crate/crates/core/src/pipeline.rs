//! Encode and decode drivers. Both walk the breadth-first node stream with a
//! [`SequenceRunner`], so the decoder rebuilds every distribution from exactly
//! the nodes the encoder had seen.

use std::fmt;
use std::time::{Duration, Instant};

use crate::codec::{
    quantize_dist, Bitstream, FreqTable, Header, RangeDecoder, RangeEncoder, HEADER_LEN,
};
use crate::error::{Error, Result};
use crate::geometry::{quantize, QuantizedPointCloud, RawPointCloud};
use crate::model::{loss_ce, Model, SequenceRunner};
use crate::octree::{build, NodeSequence};

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeReport {
    pub point_count: u64,
    pub voxel_count: u64,
    pub node_count: u64,
    pub header_bits: u64,
    pub payload_bits: u64,
    pub total_bits: u64,
    pub bpip: f64,
    /// Model code length, `sum(-log2 q(x_i))`.
    pub ideal_bits: f64,
    /// Code length under the quantized tables, per level.
    pub level_bits: Vec<f64>,
    pub wall_time: Duration,
}

impl EncodeReport {
    /// `key = value` lines. Wall time is left out so reports of identical runs
    /// compare equal.
    pub fn to_record(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for EncodeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "point_count = {}", self.point_count)?;
        writeln!(f, "voxel_count = {}", self.voxel_count)?;
        writeln!(f, "node_count = {}", self.node_count)?;
        writeln!(f, "header_bits = {}", self.header_bits)?;
        writeln!(f, "payload_bits = {}", self.payload_bits)?;
        writeln!(f, "total_bits = {}", self.total_bits)?;
        writeln!(f, "bpip = {}", self.bpip)?;
        writeln!(f, "ideal_bits = {}", self.ideal_bits)?;
        for (l, b) in self.level_bits.iter().enumerate() {
            writeln!(f, "level_{}_bits = {}", l + 1, b)?;
        }
        Ok(())
    }
}

/// Parses a record written by [`EncodeReport::to_record`] into key/value pairs.
pub fn parse_record(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("record line without '=': {l}")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

pub fn encode(
    pc: &RawPointCloud,
    depth: u8,
    coded_levels: u8,
    model: &Model,
) -> Result<(Bitstream, EncodeReport)> {
    encode_recorded(pc, depth, coded_levels, model, |_| {})
}

/// As [`encode`], passing every frequency table to `record` in coding order.
pub fn encode_recorded(
    pc: &RawPointCloud,
    depth: u8,
    coded_levels: u8,
    model: &Model,
    mut record: impl FnMut(&FreqTable),
) -> Result<(Bitstream, EncodeReport)> {
    let start = Instant::now();
    pc.validate()?;
    if coded_levels == 0 || coded_levels > depth {
        return Err(Error::invalid(format!(
            "coded levels {coded_levels} outside [1, {depth}]"
        )));
    }
    model.config.validate()?;
    let qpc = quantize(pc, depth)?;
    let seq = build(&qpc);
    let count = seq.truncated_len(coded_levels);

    let mut runner = SequenceRunner::new(model);
    let mut enc = RangeEncoder::new();
    let mut ideal = 0.0;
    let mut level_bits = vec![0.0; coded_levels as usize];
    for (i, node) in seq.nodes()[..count].iter().enumerate() {
        let pred = runner.predict(&seq, i)?;
        let table = quantize_dist(&pred.dist);
        record(&table);
        enc.encode(&table, node.occupancy)?;
        ideal += loss_ce(&pred.dist, node.occupancy);
        level_bits[node.level as usize - 1] += table.bits(node.occupancy);
        runner.commit(&seq, i)?;
    }
    let payload = enc.finish();

    let cfg = &model.config;
    let header = Header {
        depth,
        coded_levels,
        residual: cfg.enable_residual,
        branch: cfg.enable_branch,
        strict_level: cfg.context.strict_level,
        origin: qpc.origin,
        scale: qpc.scale,
        point_count: pc.len() as u64,
        node_count: count as u64,
        model_digest: model.digest(),
    };
    let bs = Bitstream { header, payload };
    let total_bits = bs.len_bits();
    let report = EncodeReport {
        point_count: pc.len() as u64,
        voxel_count: qpc.len() as u64,
        node_count: count as u64,
        header_bits: 8 * HEADER_LEN as u64,
        payload_bits: 8 * bs.payload.len() as u64,
        total_bits,
        bpip: crate::analysis::bpip(total_bits as f64, pc.len())?,
        ideal_bits: ideal,
        level_bits,
        wall_time: start.elapsed(),
    };
    Ok((bs, report))
}

pub fn decode(bs: &Bitstream, model: &Model) -> Result<QuantizedPointCloud> {
    decode_recorded(bs, model, |_| {})
}

pub fn decode_recorded(
    bs: &Bitstream,
    model: &Model,
    mut record: impl FnMut(&FreqTable),
) -> Result<QuantizedPointCloud> {
    let h = &bs.header;
    if h.model_digest != model.digest() {
        return Err(Error::ModelMismatch);
    }
    // a level-l node has at most 8^(l-1) nodes above it in the stream
    let max_nodes: u128 = (0..h.coded_levels as u32).map(|l| 8u128.pow(l)).sum();
    if h.node_count as u128 > max_nodes || h.node_count == 0 {
        return Err(Error::corrupt(format!(
            "node count {} impossible",
            h.node_count
        )));
    }
    let count = h.node_count as usize;
    let mut seq = NodeSequence::root_only(h.depth);
    let mut runner = SequenceRunner::new(model);
    let mut dec = RangeDecoder::new(&bs.payload)?;
    for i in 0..count {
        if i >= seq.len() {
            return Err(Error::corrupt(
                "stream declares more nodes than the tree holds",
            ));
        }
        let pred = runner.predict(&seq, i)?;
        let table = quantize_dist(&pred.dist);
        record(&table);
        let sym = dec.decode(&table)?;
        seq.expand(i, sym, h.coded_levels)?;
        runner.commit(&seq, i)?;
    }
    if seq.len() != count || seq.levels() != h.coded_levels {
        return Err(Error::corrupt(
            "decoded tree does not match the declared node count",
        ));
    }
    let q = seq.reconstruct(h.coded_levels)?;
    QuantizedPointCloud::new(h.depth, q.voxels().to_vec(), h.origin, h.scale)
}

pub fn decode_bytes(bytes: &[u8], model: &Model) -> Result<QuantizedPointCloud> {
    decode(&Bitstream::from_bytes(bytes)?, model)
}
