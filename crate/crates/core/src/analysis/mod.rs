//! Rate and distortion metrics, and inter-class statistics of the main head's
//! first-layer features.

mod kdtree;

use kdtree::KdTree;

use crate::context::WindowRecord;
use crate::error::{Error, Result};
use crate::geometry::QuantizedPointCloud;
use crate::model::{Model, SequenceRunner, CLASSES};
use crate::octree::NodeSequence;

pub fn bpip(total_bits: f64, point_count: usize) -> Result<f64> {
    if point_count == 0 {
        return Err(Error::invalid("bits per point of an empty cloud"));
    }
    Ok(total_bits / point_count as f64)
}

fn world(q: &QuantizedPointCloud) -> Vec<[f64; 3]> {
    q.voxels()
        .iter()
        .map(|v| std::array::from_fn(|a| q.origin[a] + q.scale * v[a] as f64))
        .collect()
}

fn grid(q: &QuantizedPointCloud) -> Vec<[f64; 3]> {
    q.voxels().iter().map(|v| v.map(|c| c as f64)).collect()
}

/// Mean squared distance from each point of `from` to its nearest point in `to`.
fn mean_nn_sq(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let tree = KdTree::new(to.to_vec());
    let sum: f64 = from.iter().map(|p| tree.nearest_sq(p)).sum();
    sum / from.len() as f64
}

fn non_empty(a: &QuantizedPointCloud, b: &QuantizedPointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("distance to an empty cloud"));
    }
    Ok(())
}

/// Symmetric chamfer distance: the average of both directional mean squared
/// nearest-neighbour distances, in source units.
pub fn chamfer(a: &QuantizedPointCloud, b: &QuantizedPointCloud) -> Result<f64> {
    non_empty(a, b)?;
    let (pa, pb) = (world(a), world(b));
    Ok((mean_nn_sq(&pa, &pb) + mean_nn_sq(&pb, &pa)) / 2.0)
}

/// Point-to-point PSNR in dB with peak `3 * (2^depth - 1)^2`. The error is
/// the larger of the two directional mean squared errors, in voxel units.
/// Identical clouds give `f64::INFINITY`.
pub fn d1_psnr(a: &QuantizedPointCloud, b: &QuantizedPointCloud, depth: u8) -> Result<f64> {
    non_empty(a, b)?;
    let (pa, pb) = (grid(a), grid(b));
    let mse = mean_nn_sq(&pa, &pb).max(mean_nn_sq(&pb, &pa));
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = ((1u64 << depth) - 1) as f64;
    Ok(10.0 * (3.0 * peak * peak / mse).log10())
}

/// Per-class running sums of feature vectors; class `j` is occupancy `j + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatureBank {
    dim: usize,
    counts: Vec<u64>,
    sums: Vec<Vec<f64>>,
}

impl ClassFeatureBank {
    pub fn new(dim: usize) -> Self {
        ClassFeatureBank {
            dim,
            counts: vec![0; CLASSES],
            sums: vec![vec![0.0; dim]; CLASSES],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn add(&mut self, occupancy: u8, feature: &[f64]) -> Result<()> {
        if occupancy == 0 || feature.len() != self.dim {
            return Err(Error::invalid("feature does not fit the bank"));
        }
        let j = occupancy as usize - 1;
        self.counts[j] += 1;
        for (s, f) in self.sums[j].iter_mut().zip(feature) {
            *s += f;
        }
        Ok(())
    }

    pub fn count(&self, occupancy: u8) -> u64 {
        self.counts[occupancy as usize - 1]
    }

    pub fn mean(&self, occupancy: u8) -> Option<Vec<f64>> {
        let j = occupancy as usize - 1;
        let n = self.counts[j];
        (n > 0).then(|| self.sums[j].iter().map(|s| s / n as f64).collect())
    }

    /// Occupancy codes with at least one sample.
    pub fn present(&self) -> Vec<u8> {
        (1..=CLASSES as u8).filter(|&c| self.count(c) > 0).collect()
    }
}

pub fn collect_features(model: &Model, corpus: &[NodeSequence]) -> Result<ClassFeatureBank> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::invalid("feature corpus has no nodes"));
    }
    let mut bank = ClassFeatureBank::new(model.config.d_hidden_main);
    for seq in corpus {
        let mut runner = SequenceRunner::new(model);
        for i in 0..seq.len() {
            let p = runner.predict(seq, i)?;
            bank.add(seq.nodes()[i].occupancy, &p.h1)?;
            runner.commit(seq, i)?;
        }
    }
    Ok(bank)
}

/// Same as [`collect_features`] over dumped windows. A record is paired with
/// the previous record's weighted context when that record is its immediate
/// predecessor in the stream.
pub fn collect_features_from_dump(
    model: &Model,
    records: &[WindowRecord],
) -> Result<ClassFeatureBank> {
    if records.is_empty() {
        return Err(Error::invalid("window dump holds no records"));
    }
    let mut bank = ClassFeatureBank::new(model.config.d_hidden_main);
    let mut prev: Option<(usize, crate::model::WeightedContext)> = None;
    for r in records {
        let t = r.window.target_index;
        let wc_prev = prev.as_ref().filter(|(i, _)| *i + 1 == t).map(|(_, wc)| wc);
        let out = model.forward(&r.window, wc_prev)?;
        bank.add(r.occupancy, &out.h1)?;
        prev = Some((t, out.wc));
    }
    Ok(bank)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterClassStats {
    /// Average Euclidean distance between class means.
    pub ad: f64,
    /// Average cosine similarity between class means.
    pub acos: f64,
    pub classes_present: usize,
}

impl InterClassStats {
    pub fn to_record(&self) -> String {
        format!(
            "classes_present = {}\nad = {}\nacos = {}\n",
            self.classes_present, self.ad, self.acos
        )
    }
}

/// Averages over all ordered pairs of present classes, the diagonal included.
/// Cosine similarity with a zero vector counts as 0.
pub fn interclass_stats(bank: &ClassFeatureBank) -> Result<InterClassStats> {
    let means: Vec<Vec<f64>> = bank
        .present()
        .into_iter()
        .filter_map(|c| bank.mean(c))
        .collect();
    if means.len() < 2 {
        return Err(Error::InsufficientClasses(means.len()));
    }
    let norms: Vec<f64> = means
        .iter()
        .map(|m| m.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let (mut ad, mut acos) = (0.0, 0.0);
    for (i, a) in means.iter().enumerate() {
        for (j, b) in means.iter().enumerate() {
            ad += a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let denom = norms[i] * norms[j];
            if denom > 0.0 {
                acos += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / denom;
            }
        }
    }
    let pairs = (means.len() * means.len()) as f64;
    Ok(InterClassStats {
        ad: ad / pairs,
        acos: (acos / pairs).clamp(-1.0, 1.0),
        classes_present: means.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{window_for, WindowRecord};
    use crate::geometry::{quantize, synth, SynthKind};
    use crate::model::{ModelConfig, Variant};
    use crate::octree::build;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(depth: u8, v: Vec<[u32; 3]>) -> QuantizedPointCloud {
        QuantizedPointCloud::new(depth, v, [0.0; 3], 1.0).unwrap()
    }

    fn brute(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    }

    fn random_cloud(rng: &mut ChaCha8Rng, depth: u8, n: usize) -> QuantizedPointCloud {
        let side = 1u32 << depth;
        let v = (0..n)
            .map(|_| [0; 3].map(|_: u32| rng.gen_range(0..side)))
            .collect();
        QuantizedPointCloud::new(depth, v, [0.5, -2.0, 1.0], 0.125).unwrap()
    }

    #[test]
    fn bpip_examples() {
        assert_eq!(bpip(1000.0, 500).unwrap(), 2.0);
        assert!(bpip(10.0, 0).is_err());
    }

    #[test]
    fn chamfer_hand_values() {
        let a = cloud(4, vec![[0, 0, 0]]);
        let b = cloud(4, vec![[1, 0, 0]]);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer(&a, &b).unwrap(), 1.0);
        let empty = cloud(4, vec![]);
        assert!(chamfer(&a, &empty).is_err());
        assert!(d1_psnr(&empty, &a, 4).is_err());
    }

    #[test]
    fn psnr_hand_values() {
        let a = cloud(10, vec![[5, 5, 5]]);
        let b = cloud(10, vec![[5, 6, 5]]);
        assert_eq!(d1_psnr(&a, &a, 10).unwrap(), f64::INFINITY);
        let expect = 10.0 * (3.0 * 1023.0f64 * 1023.0).log10();
        assert!((d1_psnr(&a, &b, 10).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 64.97).abs() < 0.01);
    }

    #[test]
    fn metrics_match_brute_force_and_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let a = random_cloud(&mut rng, 6, 100);
            let b = random_cloud(&mut rng, 6, 100);
            let (wa, wb) = (world(&a), world(&b));
            let cd = (brute(&wa, &wb) + brute(&wb, &wa)) / 2.0;
            assert!((chamfer(&a, &b).unwrap() - cd).abs() < 1e-9);
            assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
            let (ga, gb) = (grid(&a), grid(&b));
            let mse = brute(&ga, &gb).max(brute(&gb, &ga));
            let psnr = 10.0 * (3.0 * 63.0f64 * 63.0 / mse).log10();
            assert!((d1_psnr(&a, &b, 6).unwrap() - psnr).abs() < 1e-6);
            assert_eq!(d1_psnr(&a, &b, 6).unwrap(), d1_psnr(&b, &a, 6).unwrap());
        }
    }

    #[test]
    fn dense_grids_with_shared_coordinates() {
        // many points share each axis value
        let mut v = Vec::new();
        for x in 0..16 {
            for y in 0..16 {
                v.push([x, y, 3]);
            }
        }
        let a = cloud(5, v.clone());
        let b = cloud(5, v.iter().map(|p| [p[0], p[1], 4]).collect());
        assert_eq!(chamfer(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn interclass_hand_example() {
        let mut bank = ClassFeatureBank::new(2);
        bank.add(1, &[1.0, 0.0]).unwrap();
        bank.add(2, &[0.0, 1.0]).unwrap();
        let s = interclass_stats(&bank).unwrap();
        assert!((s.ad - std::f64::consts::SQRT_2 / 2.0).abs() < 1e-15);
        assert!((s.acos - 0.5).abs() < 1e-15);
        assert_eq!(s.classes_present, 2);
    }

    #[test]
    fn identical_means_have_no_spread() {
        let mut bank = ClassFeatureBank::new(3);
        for c in [3, 9, 200] {
            bank.add(c, &[0.5, -1.0, 2.0]).unwrap();
        }
        let s = interclass_stats(&bank).unwrap();
        assert_eq!(s.ad, 0.0);
        assert!((s.acos - 1.0).abs() < 1e-15);
    }

    #[test]
    fn too_few_classes() {
        let mut bank = ClassFeatureBank::new(2);
        assert!(matches!(
            interclass_stats(&bank),
            Err(Error::InsufficientClasses(0))
        ));
        bank.add(7, &[1.0, 1.0]).unwrap();
        bank.add(7, &[3.0, 1.0]).unwrap();
        assert!(matches!(
            interclass_stats(&bank),
            Err(Error::InsufficientClasses(1))
        ));
        assert_eq!(bank.mean(7).unwrap(), vec![2.0, 1.0]);
    }

    #[test]
    fn stats_permutation_invariant_and_scale_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let vecs: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let codes = [1u8, 5, 9, 40, 128, 255];
        let mut a = ClassFeatureBank::new(4);
        let mut b = ClassFeatureBank::new(4);
        let mut c = ClassFeatureBank::new(4);
        for (i, v) in vecs.iter().enumerate() {
            a.add(codes[i], v).unwrap();
            b.add(codes[5 - i], v).unwrap();
            c.add(codes[i], &v.iter().map(|x| 3.0 * x).collect::<Vec<_>>())
                .unwrap();
        }
        let (sa, sb, sc) = (
            interclass_stats(&a).unwrap(),
            interclass_stats(&b).unwrap(),
            interclass_stats(&c).unwrap(),
        );
        assert!((sa.ad - sb.ad).abs() < 1e-12 && (sa.acos - sb.acos).abs() < 1e-12);
        assert!((sc.ad - 3.0 * sa.ad).abs() < 1e-12);
        assert!((sc.acos - sa.acos).abs() < 1e-12);
    }

    fn toy_model() -> Model {
        Model::new(ModelConfig::toy().with_variant(Variant::Emr)).unwrap()
    }

    #[test]
    fn features_match_independent_forward_passes() {
        let m = toy_model();
        let pc = synth(SynthKind::GaussianClusters, 200, 4).unwrap();
        let seq = build(&quantize(&pc, 6).unwrap());
        assert!(seq.len() >= 150);
        let bank = collect_features(&m, std::slice::from_ref(&seq)).unwrap();
        let outs = m.forward_sequence(&seq).unwrap();
        for code in bank.present() {
            let members: Vec<&Vec<f64>> = outs
                .iter()
                .zip(seq.nodes())
                .filter(|(_, n)| n.occupancy == code)
                .map(|(o, _)| &o.h1)
                .collect();
            let mean = bank.mean(code).unwrap();
            for d in 0..m.config.d_hidden_main {
                let brute = members.iter().map(|h| h[d]).sum::<f64>() / members.len() as f64;
                assert!((mean[d] - brute).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_corpus_fills_one_class() {
        let mut v = Vec::new();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    v.push([x, y, z]);
                }
            }
        }
        let seq = build(&cloud(2, v));
        let bank = collect_features(&toy_model(), &[seq]).unwrap();
        assert_eq!(bank.present(), vec![255]);
        assert!(collect_features(&toy_model(), &[]).is_err());
    }

    #[test]
    fn dump_features_match_sequence_features() {
        let m = toy_model();
        let pc = synth(SynthKind::Sphere, 80, 5).unwrap();
        let seq = build(&quantize(&pc, 4).unwrap());
        let records: Vec<WindowRecord> = (0..seq.len())
            .map(|i| WindowRecord {
                window: window_for(&seq, i, &m.config.context).unwrap(),
                occupancy: seq.nodes()[i].occupancy,
            })
            .collect();
        let mut buf = Vec::new();
        crate::context::write_dump(&mut buf, &records).unwrap();
        let back = crate::context::read_dump(&buf[..]).unwrap();
        let a = collect_features_from_dump(&m, &back).unwrap();
        let b = collect_features(&m, &[seq]).unwrap();
        assert_eq!(a, b);
    }
}
