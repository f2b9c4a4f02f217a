use crate::scene::{Triangle, Vec3};

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub triangle: usize,
    pub u: f64,
    pub v: f64,
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            lo: Vec3::splat(f64::INFINITY),
            hi: Vec3::splat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: Vec3) {
        self.lo = self.lo.min(p);
        self.hi = self.hi.max(p);
    }

    fn hit(&self, o: Vec3, inv: Vec3, t_max: f64) -> bool {
        let mut t0: f64 = 0.0;
        let mut t1 = t_max;
        for a in 0..3 {
            let ta = (self.lo[a] - o[a]) * inv[a];
            let tb = (self.hi[a] - o[a]) * inv[a];
            let (near, far) = if ta < tb { (ta, tb) } else { (tb, ta) };
            // NaN from 0 * inf leaves the bound unchanged
            t0 = if near > t0 { near } else { t0 };
            t1 = if far < t1 { far } else { t1 };
            if t0 > t1 * (1.0 + 4.0 * f64::EPSILON) {
                return false;
            }
        }
        true
    }
}

#[derive(Clone, Debug)]
struct Node {
    bounds: Aabb,
    // leaf: triangles order[start..start + count]; inner: children left, left + 1
    start: usize,
    count: usize,
    left: usize,
}

/// Bounding-volume hierarchy over a fixed triangle list.
#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
    verts: Vec<[Vec3; 3]>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    pub fn build(triangles: &[Triangle]) -> Self {
        let verts: Vec<[Vec3; 3]> = triangles.iter().map(|t| t.vertices).collect();
        let centroids: Vec<Vec3> = triangles.iter().map(|t| t.centroid()).collect();
        let mut bvh = Bvh {
            nodes: Vec::new(),
            order: (0..triangles.len()).collect(),
            verts,
        };
        if !triangles.is_empty() {
            bvh.nodes.push(Node {
                bounds: Aabb::empty(),
                start: 0,
                count: triangles.len(),
                left: 0,
            });
            bvh.split(0, &centroids);
        }
        bvh
    }

    fn split(&mut self, node: usize, centroids: &[Vec3]) {
        let (start, count) = (self.nodes[node].start, self.nodes[node].count);
        let mut bounds = Aabb::empty();
        let mut cb = Aabb::empty();
        for &i in &self.order[start..start + count] {
            for v in self.verts[i] {
                bounds.grow(v);
            }
            cb.grow(centroids[i]);
        }
        self.nodes[node].bounds = bounds;
        if count <= LEAF_SIZE {
            return;
        }
        let ext = cb.hi - cb.lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let slice = &mut self.order[start..start + count];
        slice.sort_by(|&a, &b| {
            centroids[a][axis]
                .total_cmp(&centroids[b][axis])
                .then(a.cmp(&b))
        });
        let half = count / 2;
        let left = self.nodes.len();
        self.nodes.push(Node {
            bounds: Aabb::empty(),
            start,
            count: half,
            left: 0,
        });
        self.nodes.push(Node {
            bounds: Aabb::empty(),
            start: start + half,
            count: count - half,
            left: 0,
        });
        self.nodes[node].left = left;
        self.nodes[node].count = 0;
        self.split(left, centroids);
        self.split(left + 1, centroids);
    }

    /// Closest hit with `t` in `(t_min, t_max)`.
    pub fn intersect(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<Hit> {
        self.traverse(ray, t_min, t_max, false)
    }

    /// Whether anything blocks the segment `(t_min, t_max)`.
    pub fn occluded(&self, ray: &Ray, t_min: f64, t_max: f64) -> bool {
        self.traverse(ray, t_min, t_max, true).is_some()
    }

    fn traverse(&self, ray: &Ray, t_min: f64, mut t_max: f64, any: bool) -> Option<Hit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = Vec3::new(1.0 / ray.dir.x, 1.0 / ray.dir.y, 1.0 / ray.dir.z);
        let mut best = None;
        let mut stack = [0usize; 64];
        let mut sp = 1;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp]];
            if !node.bounds.hit(ray.origin, inv, t_max) {
                continue;
            }
            if node.count > 0 {
                for &i in &self.order[node.start..node.start + node.count] {
                    if let Some((t, u, v)) = intersect_triangle(ray, &self.verts[i]) {
                        if t > t_min && t < t_max {
                            t_max = t;
                            best = Some(Hit {
                                t,
                                triangle: i,
                                u,
                                v,
                            });
                            if any {
                                return best;
                            }
                        }
                    }
                }
            } else {
                stack[sp] = node.left;
                stack[sp + 1] = node.left + 1;
                sp += 2;
            }
        }
        best
    }
}

/// Moller-Trumbore; returns `(t, u, v)` with barycentrics of vertices 1 and 2.
pub fn intersect_triangle(ray: &Ray, v: &[Vec3; 3]) -> Option<(f64, f64, f64)> {
    let e1 = v[1] - v[0];
    let e2 = v[2] - v[0];
    let p = ray.dir.cross(e2);
    let det = e1.dot(p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = ray.origin - v[0];
    let u = s.dot(p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let w = ray.dir.dot(q) * inv;
    if w < 0.0 || u + w > 1.0 {
        return None;
    }
    Some((e2.dot(q) * inv, u, w))
}
