//! Axis-aligned bounding volume hierarchy for nearest-primitive queries.

use super::mesh::Vec3;

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.grow(p);
        }
        b
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn merge(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    /// Squared distance from `p` to the box (zero inside).
    pub fn distance_squared(&self, p: &Vec3) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let v = if p[k] < self.min[k] {
                self.min[k] - p[k]
            } else if p[k] > self.max[k] {
                p[k] - self.max[k]
            } else {
                0.0
            };
            d2 += v * v;
        }
        d2
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { aabb: Aabb, start: usize, len: usize },
    Inner { aabb: Aabb, left: usize, right: usize },
}

impl Node {
    fn aabb(&self) -> &Aabb {
        match self {
            Node::Leaf { aabb, .. } | Node::Inner { aabb, .. } => aabb,
        }
    }
}

/// Median-split BVH. Rebuild it whenever the primitives move.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

impl Bvh {
    pub fn build(boxes: &[Aabb]) -> Self {
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        let centers: Vec<Vec3> = boxes.iter().map(Aabb::center).collect();
        let mut nodes = Vec::with_capacity(2 * boxes.len() / LEAF_SIZE + 1);
        if !boxes.is_empty() {
            build_node(boxes, &centers, &mut order, 0, boxes.len(), &mut nodes);
        }
        Self { nodes, order }
    }

    /// Index and squared distance of the primitive nearest to `p`, where
    /// `dist2(i)` returns the exact squared distance to primitive `i`.
    /// Equal distances resolve to the lowest primitive index.
    pub fn nearest<F>(&self, p: &Vec3, mut dist2: F) -> Option<(usize, f64)>
    where
        F: FnMut(usize) -> f64,
    {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        let mut stack = Vec::with_capacity(64);
        stack.push(0usize);
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if node.aabb().distance_squared(p) > best.1 {
                continue;
            }
            match *node {
                Node::Leaf { start, len, .. } => {
                    for &prim in &self.order[start..start + len] {
                        let d2 = dist2(prim);
                        if d2 < best.1 || (d2 == best.1 && prim < best.0) {
                            best = (prim, d2);
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[left].aabb().distance_squared(p);
                    let dr = self.nodes[right].aabb().distance_squared(p);
                    // Push the farther child first so the nearer one is popped next.
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        (best.0 != usize::MAX).then_some(best)
    }
}

fn build_node(
    boxes: &[Aabb],
    centers: &[Vec3],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let aabb = order[start..end]
        .iter()
        .fold(Aabb::empty(), |acc, &i| acc.merge(&boxes[i]));
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            aabb,
            start,
            len: end - start,
        });
        return id;
    }
    let spread = Aabb::from_points(order[start..end].iter().map(|&i| &centers[i]));
    let extent = spread.max - spread.min;
    let axis = extent.imax();
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        centers[a][axis]
            .total_cmp(&centers[b][axis])
            .then(a.cmp(&b))
    });
    // Placeholder; children are appended after this slot.
    nodes.push(Node::Leaf { aabb, start, len: 0 });
    let left = build_node(boxes, centers, order, start, mid, nodes);
    let right = build_node(boxes, centers, order, mid, end, nodes);
    nodes[id] = Node::Inner { aabb, left, right };
    id
}
