use super::{dist2, PointSet};
use crate::se3kin::Vec3;

const LEAF_SIZE: usize = 8;

enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Exact k-d tree over a fixed point set. Neighbor ordering is by squared
/// distance, then by point index, so results are identical to a brute-force scan.
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(cloud: &PointSet) -> Self {
        let points = cloud.points().to_vec();
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build_rec(&points, &mut order, 0, points.len(), &mut nodes);
        }
        KdTree {
            points,
            order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Up to `k` nearest points as `(index, squared distance)`, nearest first.
    pub fn nearest(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        self.search(0, q, k, &mut best);
        best.into_iter().map(|(d, i)| (i, d)).collect()
    }

    fn search(&self, node: usize, q: &Vec3, k: usize, best: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(q, &self.points[i]);
                    insert_bounded(best, k, (d, i));
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, best);
                // Only strictly farther planes are pruned, so equal-distance
                // candidates with a lower index are still visited.
                let worst = if best.len() < k { f64::INFINITY } else { best[k - 1].0 };
                if diff * diff <= worst {
                    self.search(far, q, k, best);
                }
            }
        }
    }
}

fn insert_bounded(best: &mut Vec<(f64, usize)>, k: usize, item: (f64, usize)) {
    if best.len() == k {
        let last = best[k - 1];
        if !lex_less(item, last) {
            return;
        }
        best.pop();
    }
    let pos = best.partition_point(|&b| lex_less(b, item));
    best.insert(pos, item);
}

#[inline]
fn lex_less(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

fn build_rec(
    points: &[Vec3],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in &order[start..end] {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    if hi[axis] - lo[axis] <= 0.0 {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mid = start + (end - start) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis])
    });
    let value = points[order[mid]][axis];
    // Points left of `mid` have coordinate <= value, points from `mid` on >= value.
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let left = build_rec(points, order, start, mid, nodes);
    let right = build_rec(points, order, mid, end, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}
