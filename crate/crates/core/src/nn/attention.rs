use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Projection matrices of one multi-head attention layer, already on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Full masked self-attention over the rows of `x` (`[n, d]`).
///
/// Masked rows are excluded as keys; every row still produces an output, and
/// row `n - 1` is the weighted context for the last slot. Built from primitive
/// tape ops so it can serve as a reference for the fused target-only path.
pub fn self_attention(
    tape: &mut Tape,
    x: Var,
    mask: &[bool],
    heads: usize,
    w: AttentionVars,
) -> Result<Var> {
    let n = tape.value(x).rows();
    let d = tape.value(w.wq).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::invalid(format!(
            "width {d} is not divisible by {heads} heads"
        )));
    }
    if mask.len() != n {
        return Err(Error::invalid("mask length must equal the slot count"));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid("attention needs at least one unmasked slot"));
    }
    let dh = d / heads;
    let q = tape.matmul(x, w.wq);
    let k = tape.matmul(x, w.wk);
    let v = tape.matmul(x, w.wv);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
        let kt = tape.transpose(kh);
        let s = tape.matmul(qh, kt);
        let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
        let a = tape.softmax_rows(s, Some(mask));
        outs.push(tape.matmul(a, vh));
    }
    let o = tape.concat_cols(&outs);
    Ok(tape.matmul(o, w.wo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    struct Setup {
        tape: Tape,
        x: Var,
        w: AttentionVars,
        raw: [Tensor; 5],
    }

    fn setup(seed: u64, n: usize, d: usize) -> Setup {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = [
            rand_tensor(&mut rng, n, d),
            rand_tensor(&mut rng, d, d),
            rand_tensor(&mut rng, d, d),
            rand_tensor(&mut rng, d, d),
            rand_tensor(&mut rng, d, d),
        ];
        let mut tape = Tape::new();
        let x = tape.constant(raw[0].clone());
        let w = AttentionVars {
            wq: tape.param("wq", &raw[1]),
            wk: tape.param("wk", &raw[2]),
            wv: tape.param("wv", &raw[3]),
            wo: tape.param("wo", &raw[4]),
        };
        Setup { tape, x, w, raw }
    }

    fn project(x: &[f64], w: &Tensor) -> Vec<f64> {
        let d = w.cols();
        (0..d)
            .map(|j| (0..x.len()).map(|i| x[i] * w.data()[i * d + j]).sum())
            .collect()
    }

    #[test]
    fn single_unmasked_slot_returns_its_value() {
        let mut s = setup(1, 3, 4);
        let out = self_attention(&mut s.tape, s.x, &[false, true, false], 2, s.w).unwrap();
        let v = project(s.raw[0].row(1), &s.raw[3]);
        let want = project(&v, &s.raw[4]);
        for r in 0..3 {
            for j in 0..4 {
                assert!((s.tape.value(out).row(r)[j] - want[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_slots_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let row = rand_tensor(&mut rng, 1, 4);
        let x = Tensor::matrix(2, 4, [row.data(), row.data()].concat());
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wk = tape.constant(rand_tensor(&mut rng, 4, 4));
        let xk = tape.matmul(xv, wk);
        let wq = tape.constant(rand_tensor(&mut rng, 4, 4));
        let xq = tape.matmul(xv, wq);
        let t = tape.transpose(xk);
        let s = tape.matmul(xq, t);
        let a = tape.softmax_rows(s, None);
        for &p in tape.value(a).data() {
            assert!((p - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_direct_formula() {
        let (n, d, heads) = (4, 6, 2);
        let mut s = setup(3, n, d);
        let mask = [true, false, true, true];
        let out = self_attention(&mut s.tape, s.x, &mask, heads, s.w).unwrap();

        // oracle: softmax(q k^T / sqrt(dh)) v per head, written out longhand
        let dh = d / heads;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| s.raw[0].row(i).to_vec()).collect();
        let q: Vec<Vec<f64>> = rows.iter().map(|r| project(r, &s.raw[1])).collect();
        let k: Vec<Vec<f64>> = rows.iter().map(|r| project(r, &s.raw[2])).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|r| project(r, &s.raw[3])).collect();
        for i in 0..n {
            let mut concat = vec![0.0; d];
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        if mask[j] {
                            let dp: f64 = r.clone().map(|c| q[i][c] * k[j][c]).sum();
                            (dp / (dh as f64).sqrt()).exp()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let z: f64 = scores.iter().sum();
                for c in r.clone() {
                    concat[c] = (0..n).map(|j| scores[j] / z * v[j][c]).sum();
                }
            }
            let want = project(&concat, &s.raw[4]);
            for j in 0..d {
                assert!((s.tape.value(out).row(i)[j] - want[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fused_target_path_equals_last_row() {
        let (n, d, heads) = (5, 8, 4);
        let mut s = setup(4, n, d);
        let mask = [false, true, true, false, true];
        let full = self_attention(&mut s.tape, s.x, &mask, heads, s.w).unwrap();

        // fused: keys are the valid predecessors (rows 1, 2) then the target (row 4)
        let q = s.tape.matmul(s.x, s.w.wq);
        let k = s.tape.matmul(s.x, s.w.wk);
        let v = s.tape.matmul(s.x, s.w.wv);
        let qt = s.tape.gather_rows(q, vec![Some(4)]);
        let kt = s.tape.gather_rows(k, vec![Some(4)]);
        let vt = s.tape.gather_rows(v, vec![Some(4)]);
        let att = s
            .tape
            .target_attention(qt, k, v, kt, vt, vec![vec![1, 2]], heads);
        let fused = s.tape.matmul(att, s.w.wo);
        for j in 0..d {
            assert!((s.tape.value(fused).data()[j] - s.tape.value(full).row(4)[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn all_masked_is_rejected() {
        let mut s = setup(5, 2, 4);
        assert!(matches!(
            self_attention(&mut s.tape, s.x, &[false, false], 2, s.w),
            Err(Error::InvalidInput(_))
        ));
        assert!(self_attention(&mut s.tape, s.x, &[true, true], 3, s.w).is_err());
    }
}
