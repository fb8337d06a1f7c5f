//! Median-split BVH over triangles: closest-point queries with feature
//! classification and ray-crossing counts for parity signs.

use crate::geom::{vec3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feature {
    Vertex(u32),
    Edge(u32, u32),
    Face,
}

#[derive(Clone, Copy, Debug)]
pub struct ClosestHit {
    pub point: Vec3,
    pub dist_sq: f64,
    pub tri: u32,
    pub feature: Feature,
}

struct Node {
    lo: Vec3,
    hi: Vec3,
    /// Leaf when count > 0; then `start..start+count` indexes `order`.
    start: u32,
    count: u32,
    left: u32,
    right: u32,
}

pub struct Bvh {
    nodes: Vec<Node>,
    /// Triangle order after median splits; values are original indices.
    order: Vec<u32>,
    verts: Vec<[Vec3; 3]>,
    ids: Vec<[u32; 3]>,
}

const LEAF_SIZE: usize = 8;

impl Bvh {
    pub fn build(verts: Vec<[Vec3; 3]>, ids: Vec<[u32; 3]>) -> Bvh {
        assert_eq!(verts.len(), ids.len());
        let mut order: Vec<u32> = (0..verts.len() as u32).collect();
        let centroids: Vec<Vec3> = verts
            .iter()
            .map(|t| (t[0] + t[1] + t[2]) / 3.0)
            .collect();
        let mut bvh = Bvh {
            nodes: Vec::new(),
            order: Vec::new(),
            verts,
            ids,
        };
        bvh.build_node(&mut order, &centroids, 0);
        bvh.order = order;
        bvh
    }

    fn tri_bounds(&self, idx: u32) -> (Vec3, Vec3) {
        let t = &self.verts[idx as usize];
        (
            t[0].min_by_component(t[1]).min_by_component(t[2]),
            t[0].max_by_component(t[1]).max_by_component(t[2]),
        )
    }

    fn build_node(&mut self, order: &mut [u32], centroids: &[Vec3], offset: u32) -> u32 {
        let mut lo = vec3(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        for &t in order.iter() {
            let (tlo, thi) = self.tri_bounds(t);
            lo = lo.min_by_component(tlo);
            hi = hi.max_by_component(thi);
        }
        let node_idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            lo,
            hi,
            start: 0,
            count: 0,
            left: 0,
            right: 0,
        });
        if order.len() <= LEAF_SIZE {
            self.nodes[node_idx as usize].start = offset;
            self.nodes[node_idx as usize].count = order.len() as u32;
            return node_idx;
        }
        let mut clo = vec3(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut chi = -clo;
        for &t in order.iter() {
            clo = clo.min_by_component(centroids[t as usize]);
            chi = chi.max_by_component(centroids[t as usize]);
        }
        let ext = chi - clo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = order.len() / 2;
        // Tie-break on index keeps the build order-independent of sort internals.
        order.select_nth_unstable_by(mid, |&a, &b| {
            let (ca, cb) = (centroids[a as usize].get(axis), centroids[b as usize].get(axis));
            ca.partial_cmp(&cb).unwrap().then(a.cmp(&b))
        });
        let (left_slice, right_slice) = order.split_at_mut(mid);
        let left = self.build_node(left_slice, centroids, offset);
        let right = self.build_node(right_slice, centroids, offset + mid as u32);
        self.nodes[node_idx as usize].left = left;
        self.nodes[node_idx as usize].right = right;
        node_idx
    }

    fn box_dist_sq(lo: Vec3, hi: Vec3, p: Vec3) -> f64 {
        let dx = (lo.x - p.x).max(0.0).max(p.x - hi.x);
        let dy = (lo.y - p.y).max(0.0).max(p.y - hi.y);
        let dz = (lo.z - p.z).max(0.0).max(p.z - hi.z);
        dx * dx + dy * dy + dz * dz
    }

    pub fn closest(&self, p: Vec3) -> ClosestHit {
        let mut best = ClosestHit {
            point: p,
            dist_sq: f64::INFINITY,
            tri: u32::MAX,
            feature: Feature::Face,
        };
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if Self::box_dist_sq(node.lo, node.hi, p) >= best.dist_sq {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let tri = &self.verts[t as usize];
                    let (cp, feat) = closest_point_triangle(p, tri[0], tri[1], tri[2]);
                    let d2 = (p - cp).norm_sq();
                    // Prefer the lowest triangle index among exact ties so
                    // queries are reproducible across traversal orders.
                    if d2 < best.dist_sq - 1e-30
                        || (d2 <= best.dist_sq + 1e-30 && t < best.tri)
                    {
                        best = ClosestHit {
                            point: cp,
                            dist_sq: d2,
                            tri: t,
                            feature: self.global_feature(t, feat),
                        };
                    }
                }
            } else {
                // Visit the nearer child first for tighter pruning.
                let (l, r) = (node.left, node.right);
                let dl = Self::box_dist_sq(self.nodes[l as usize].lo, self.nodes[l as usize].hi, p);
                let dr = Self::box_dist_sq(self.nodes[r as usize].lo, self.nodes[r as usize].hi, p);
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        best
    }

    fn global_feature(&self, tri: u32, feat: LocalFeature) -> Feature {
        let [a, b, c] = self.ids[tri as usize];
        match feat {
            LocalFeature::A => Feature::Vertex(a),
            LocalFeature::B => Feature::Vertex(b),
            LocalFeature::C => Feature::Vertex(c),
            LocalFeature::AB => Feature::Edge(a.min(b), a.max(b)),
            LocalFeature::BC => Feature::Edge(b.min(c), b.max(c)),
            LocalFeature::CA => Feature::Edge(c.min(a), c.max(a)),
            LocalFeature::Face => Feature::Face,
        }
    }

    /// All ray-triangle hit parameters t > 1e-12 along `dir` (unnormalized ok).
    pub fn ray_hits(&self, origin: Vec3, dir: Vec3) -> Vec<f64> {
        let inv = vec3(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut out = Vec::new();
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if !ray_box(origin, inv, node.lo, node.hi) {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let tri = &self.verts[t as usize];
                    if let Some(t_hit) = ray_triangle(origin, dir, tri[0], tri[1], tri[2]) {
                        out.push(t_hit);
                    }
                }
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
        out
    }

    pub fn n_triangles(&self) -> usize {
        self.verts.len()
    }

    pub fn ids(&self) -> &[[u32; 3]] {
        &self.ids
    }
}

#[derive(Clone, Copy)]
pub enum LocalFeature {
    A,
    B,
    C,
    AB,
    BC,
    CA,
    Face,
}

/// Ericson-style closest point on a triangle with the owning feature.
pub fn closest_point_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> (Vec3, LocalFeature) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, LocalFeature::A);
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, LocalFeature::B);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, LocalFeature::AB);
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, LocalFeature::C);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, LocalFeature::CA);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, LocalFeature::BC);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, LocalFeature::Face)
}

fn ray_box(origin: Vec3, inv_dir: Vec3, lo: Vec3, hi: Vec3) -> bool {
    let mut tmin = 0.0f64;
    let mut tmax = f64::INFINITY;
    for axis in 0..3 {
        let (o, i, l, h) = (
            origin.get(axis),
            inv_dir.get(axis),
            lo.get(axis),
            hi.get(axis),
        );
        if i.is_infinite() {
            // Ray parallel to this slab: inside it for all t or never.
            if o < l || o > h {
                return false;
            }
            continue;
        }
        let (t0, t1) = ((l - o) * i, (h - o) * i);
        let (t0, t1) = (t0.min(t1), t0.max(t1));
        tmin = tmin.max(t0);
        tmax = tmax.min(t1);
        if tmin > tmax {
            return false;
        }
    }
    true
}

/// Moller-Trumbore with slightly inclusive edges so a ray through a shared
/// edge reports a hit for both incident triangles (the caller deduplicates by
/// parameter value).
fn ray_triangle(origin: Vec3, dir: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<f64> {
    const EDGE_EPS: f64 = 1e-10;
    let e1 = b - a;
    let e2 = c - a;
    let pv = dir.cross(e2);
    let det = e1.dot(pv);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let tv = origin - a;
    let u = tv.dot(pv) * inv;
    if !(-EDGE_EPS..=1.0 + EDGE_EPS).contains(&u) {
        return None;
    }
    let qv = tv.cross(e1);
    let v = dir.dot(qv) * inv;
    if v < -EDGE_EPS || u + v > 1.0 + EDGE_EPS {
        return None;
    }
    let t = e2.dot(qv) * inv;
    (t > 1e-12).then_some(t)
}
