//! Exact nearest-neighbour search over a static 3-D point set.

const LEAF: usize = 8;

enum Node {
    Leaf(std::ops::Range<usize>),
    Split {
        axis: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

pub(crate) struct KdTree {
    points: Vec<[f64; 3]>,
    root: Node,
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

impl KdTree {
    pub(crate) fn new(mut points: Vec<[f64; 3]>) -> Self {
        let n = points.len();
        let root = Self::build(&mut points, 0..n);
        KdTree { points, root }
    }

    fn build(pts: &mut [[f64; 3]], range: std::ops::Range<usize>) -> Node {
        if range.len() <= LEAF {
            return Node::Leaf(range);
        }
        let slice = &pts[range.clone()];
        let axis = (0..3)
            .max_by(|&a, &b| {
                let spread = |ax: usize| {
                    let (lo, hi) = slice
                        .iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                            (lo.min(p[ax]), hi.max(p[ax]))
                        });
                    hi - lo
                };
                spread(a).total_cmp(&spread(b))
            })
            .unwrap();
        let mid = range.len() / 2;
        pts[range.clone()].select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
        let split = range.start + mid;
        let value = pts[split][axis];
        Node::Split {
            axis,
            value,
            left: Box::new(Self::build(pts, range.start..split)),
            right: Box::new(Self::build(pts, split..range.end)),
        }
    }

    /// Squared distance from `q` to the nearest stored point.
    pub(crate) fn nearest_sq(&self, q: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(&self.root, q, &mut best);
        best
    }

    fn search(&self, node: &Node, q: &[f64; 3], best: &mut f64) {
        match node {
            Node::Leaf(r) => {
                for p in &self.points[r.clone()] {
                    *best = best.min(sq_dist(p, q));
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let d = q[*axis] - value;
                // left holds coordinates <= value, right >= value
                let (near, far) = if d < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, best);
                if d * d <= *best {
                    self.search(far, q, best);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1, 2, 7, 9, 50, 500] {
            // coarse coordinates force many ties on every axis
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| [0; 3].map(|_: i32| rng.gen_range(0..6) as f64))
                .collect();
            let tree = KdTree::new(pts.clone());
            for _ in 0..50 {
                let q = [0; 3].map(|_: i32| rng.gen_range(-2.0..8.0));
                let brute = pts
                    .iter()
                    .map(|p| sq_dist(p, &q))
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(tree.nearest_sq(&q), brute);
            }
        }
    }
}
