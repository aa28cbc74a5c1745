//! Exact k-nearest-neighbour search with a static kd-tree. Equal distances are
//! ordered by point index.

use crate::points::Points;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 16;

#[derive(Clone, Copy, Debug)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

enum Node {
    Leaf { start: usize, end: usize },
    Split {
        axis: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

pub struct KdTree<'a> {
    points: &'a Points,
    order: Vec<usize>,
    root: Node,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a Points) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let n = order.len();
        let root = Self::build_node(points, &mut order, 0, n);
        Self {
            points,
            order,
            root,
        }
    }

    fn build_node(points: &Points, order: &mut [usize], start: usize, end: usize) -> Node {
        if end - start <= LEAF_SIZE {
            return Node::Leaf { start, end };
        }
        let d = points.dim();
        let slice = &mut order[start..end];
        let axis = (0..d)
            .max_by(|&a, &b| {
                let spread = |k: usize| {
                    let (lo, hi) = slice.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                        let v = points.row(i)[k];
                        (lo.min(v), hi.max(v))
                    });
                    hi - lo
                };
                spread(a).total_cmp(&spread(b))
            })
            .unwrap_or(0);
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            points.row(a)[axis]
                .total_cmp(&points.row(b)[axis])
                .then(a.cmp(&b))
        });
        let value = points.row(slice[mid])[axis];
        let split = start + mid;
        Node::Split {
            axis,
            value,
            left: Box::new(Self::build_node(points, order, start, split)),
            right: Box::new(Self::build_node(points, order, split, end)),
        }
    }

    /// Indices of the `k` nearest points to `q`, nearest first.
    pub fn nearest(&self, q: &[f64], k: usize) -> Vec<usize> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(&self.root, q, k, &mut heap);
        heap.into_sorted_vec().into_iter().map(|c| c.index).collect()
    }

    fn search(&self, node: &Node, q: &[f64], k: usize, heap: &mut BinaryHeap<Candidate>) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let dist2: f64 = self
                        .points
                        .row(i)
                        .iter()
                        .zip(q)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    let c = Candidate { dist2, index: i };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("non-empty heap") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                let full = heap.len() >= k;
                if !full || diff * diff <= heap.peek().map_or(f64::INFINITY, |c| c.dist2) {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}
