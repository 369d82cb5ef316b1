use crate::error::{Error, Result};

use super::{sq_dist, DenseMatrix};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Exact k-d tree over the rows of a reference matrix.
///
/// Query results are identical to an exhaustive scan ordered by
/// `(squared distance, index)`.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    dim: usize,
    points: Vec<f64>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl NeighborIndex {
    pub fn new(reference: &DenseMatrix) -> Self {
        let (n, dim) = reference.shape();
        let mut points = Vec::with_capacity(n * dim);
        for r in 0..n {
            points.extend(reference.row(r).iter());
        }
        let mut index = NeighborIndex {
            dim,
            points,
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        if n > 0 {
            index.build(0, n);
        }
        index
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE || self.dim == 0 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split on the coordinate with the widest spread
        let mut dim = 0;
        let mut spread = f64::NEG_INFINITY;
        for d in 0..self.dim {
            let (lo, hi) = self.order[start..end]
                .iter()
                .map(|&i| self.points[i * self.dim + d])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                });
            if hi - lo > spread {
                spread = hi - lo;
                dim = d;
            }
        }
        if spread <= 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let stride = self.dim;
        let points = &self.points;
        self.order[start..end].sort_by(|&a, &b| {
            points[a * stride + dim]
                .total_cmp(&points[b * stride + dim])
                .then(a.cmp(&b))
        });
        let mid = start + (end - start) / 2;
        let value = self.points[self.order[mid] * stride + dim];

        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    /// The `k` nearest reference rows to `point`.
    pub fn query(&self, point: &[f64], k: usize) -> Result<Vec<usize>> {
        if point.len() != self.dim {
            return Err(Error::arg(format!(
                "query has dimension {}, index has {}",
                point.len(),
                self.dim
            )));
        }
        if k == 0 || k > self.len() {
            return Err(Error::arg(format!(
                "k = {k} must lie in 1..={}",
                self.len()
            )));
        }
        let mut best = Vec::with_capacity(k + 1);
        self.search(0, point, k, &mut best);
        Ok(best.into_iter().map(|(_, i)| i).collect())
    }

    fn search(&self, node: usize, q: &[f64], k: usize, best: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    offer(best, k, (sq_dist(q, self.point(i)), i));
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, k, best);
                // Equal bounds must still be visited: a tied point with a lower
                // index may sit on the far side.
                if best.len() < k || diff * diff <= best[best.len() - 1].0 {
                    self.search(far, q, k, best);
                }
            }
        }
    }
}

fn offer(best: &mut Vec<(f64, usize)>, k: usize, cand: (f64, usize)) {
    let key = |e: &(f64, usize)| (e.0, e.1);
    if best.len() == k {
        let worst = best[k - 1];
        if cand.0 > worst.0 || (cand.0 == worst.0 && cand.1 > worst.1) {
            return;
        }
    }
    let pos = best
        .binary_search_by(|e| {
            let (d, i) = key(e);
            d.total_cmp(&cand.0).then(i.cmp(&cand.1))
        })
        .unwrap_or_else(|p| p);
    best.insert(pos, cand);
    best.truncate(k);
}
