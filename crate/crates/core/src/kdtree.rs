//! A small 3D k-d tree with fully deterministic tie handling.
//!
//! Candidates are ordered by `(squared distance, point index)`, so equal
//! distances always resolve to the lower index regardless of tree layout
//! or traversal order. That determinism is load-bearing: neighbor tables
//! feed the network and tests compare them against a brute-force oracle.

/// Max-heap entry; `cmp` is lexicographic on (distance², index).
#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    dist_sq: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.dist_sq
            .partial_cmp(&other.dist_sq)
            .expect("finite distances")
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

struct Node {
    point_index: usize,
    axis: usize,
    left: Option<Box<Node>>,
    right: Option<Box<Node>>,
}

/// Static k-d tree over a borrowed point set.
pub struct KdTree<'a> {
    points: &'a [[f64; 3]],
    root: Option<Box<Node>>,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [[f64; 3]]) -> Self {
        let mut indices: Vec<usize> = (0..points.len()).collect();
        let root = Self::build_node(points, &mut indices, 0);
        KdTree { points, root }
    }

    fn build_node(points: &[[f64; 3]], indices: &mut [usize], depth: usize) -> Option<Box<Node>> {
        if indices.is_empty() {
            return None;
        }
        let axis = depth % 3;
        // Sort by (coordinate, index) so duplicate coordinates split deterministically.
        indices.sort_unstable_by(|&a, &b| {
            points[a][axis]
                .partial_cmp(&points[b][axis])
                .expect("finite coordinates")
                .then(a.cmp(&b))
        });
        let mid = indices.len() / 2;
        let point_index = indices[mid];
        let (left, rest) = indices.split_at_mut(mid);
        let right = &mut rest[1..];
        Some(Box::new(Node {
            point_index,
            axis,
            left: Self::build_node(points, left, depth + 1),
            right: Self::build_node(points, right, depth + 1),
        }))
    }

    /// Indices of the `k` nearest points to `query`, ordered by
    /// (distance², index) ascending. Returns fewer when the tree is smaller.
    pub fn knn(&self, query: &[f64; 3], k: usize) -> Vec<usize> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap: std::collections::BinaryHeap<Candidate> = std::collections::BinaryHeap::new();
        self.search(self.root.as_deref(), query, k, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort_unstable();
        out.into_iter().map(|c| c.index).collect()
    }

    /// Index of the single nearest point (lowest index on ties).
    pub fn nearest(&self, query: &[f64; 3]) -> Option<usize> {
        self.knn(query, 1).into_iter().next()
    }

    fn search(
        &self,
        node: Option<&Node>,
        query: &[f64; 3],
        k: usize,
        heap: &mut std::collections::BinaryHeap<Candidate>,
    ) {
        let Some(node) = node else { return };
        let p = &self.points[node.point_index];
        let dist_sq = squared_distance(p, query);
        let cand = Candidate {
            dist_sq,
            index: node.point_index,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().expect("non-empty heap") {
            heap.pop();
            heap.push(cand);
        }

        let delta = query[node.axis] - p[node.axis];
        let (near, far) = if delta < 0.0 {
            (node.left.as_deref(), node.right.as_deref())
        } else {
            (node.right.as_deref(), node.left.as_deref())
        };
        self.search(near, query, k, heap);
        // The far side can still hold a winner when the splitting plane is
        // closer than the current worst candidate (or the heap is not full).
        let worst = heap.peek().map_or(f64::INFINITY, |c| c.dist_sq);
        if heap.len() < k || delta * delta <= worst {
            self.search(far, query, k, heap);
        }
    }
}

pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
