//! Turning a trained field back into geometry: indicator-weighted SDF
//! blending, marching cubes over a sampled grid, and chamfer-L2 evaluation.

use crate::error::{Error, Result};
use crate::field::CoordinateField;
use crate::geom::{vec3, Vec3};
use crate::mesh::TriangleMesh;
use crate::mlp::Mlp;
use crate::rng::child_seed;
use rayon::prelude::*;
use std::collections::{HashMap, VecDeque};
use std::sync::OnceLock;

/// The decoded SDF seen as one scalar field: each point is evaluated through
/// the frame and latent of its own voxel. Points in invalid voxels fall back
/// to the nearest valid voxel of the 27-cell ring (ties to the lowest cell
/// index). Where even the ring is empty the field is a one-cell sentinel:
/// positive in the region 6-connected to the grid boundary, negative in
/// pockets sealed off by valid voxels, so neither empty space nor a solid
/// interior grows spurious surfaces.
pub struct BlendedField<'a> {
    mlp: &'a Mlp,
    field: &'a CoordinateField,
    sentinel: f64,
    outside: Vec<bool>,
}

/// Flood fill through invalid voxels from the grid boundary.
fn outside_mask(grid: &crate::field::VoxelGrid) -> Vec<bool> {
    let v = grid.v();
    let mut outside = vec![false; (v * v * v) as usize];
    let mut queue = VecDeque::new();
    for idx in 0..outside.len() as u32 {
        let (x, y, z) = grid.cell_coords(idx);
        let on_boundary = [x, y, z].iter().any(|&c| c == 0 || c == v - 1);
        if on_boundary && !grid.is_valid(idx) {
            outside[idx as usize] = true;
            queue.push_back(idx);
        }
    }
    while let Some(idx) = queue.pop_front() {
        let (x, y, z) = grid.cell_coords(idx);
        for (dx, dy, dz) in [
            (1i64, 0i64, 0i64),
            (-1, 0, 0),
            (0, 1, 0),
            (0, -1, 0),
            (0, 0, 1),
            (0, 0, -1),
        ] {
            let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
            if nx < 0 || ny < 0 || nz < 0 || nx >= v as i64 || ny >= v as i64 || nz >= v as i64 {
                continue;
            }
            let n = grid.cell_index(nx as u32, ny as u32, nz as u32);
            if !grid.is_valid(n) && !outside[n as usize] {
                outside[n as usize] = true;
                queue.push_back(n);
            }
        }
    }
    outside
}

impl<'a> BlendedField<'a> {
    pub fn new(mlp: &'a Mlp, field: &'a CoordinateField) -> Result<BlendedField<'a>> {
        if mlp.config().latent_len() != field.latent_len() {
            return Err(Error::ConfigMismatch(format!(
                "decoder latent length {} != field {}",
                mlp.config().latent_len(),
                field.latent_len()
            )));
        }
        Ok(BlendedField {
            mlp,
            field,
            sentinel: field.grid.cell_size().max_component(),
            outside: outside_mask(&field.grid),
        })
    }

    fn decode(&self, slot: usize, x: Vec3) -> f64 {
        self.mlp
            .predict(self.field.frame(slot), self.field.latent(slot), x)
            .expect("shapes validated at construction")
    }

    pub fn value(&self, x: Vec3) -> f64 {
        let grid = &self.field.grid;
        let Some(idx) = grid.voxel_of(x) else {
            return self.sentinel;
        };
        if let Some(slot) = grid.slot(idx) {
            return self.decode(slot, x);
        }
        let mut best: Option<(f64, usize)> = None;
        for n in grid.valid_neighborhood(idx) {
            let d = (grid.cell_center(n) - x).norm_sq();
            let slot = grid.slot(n).unwrap();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, slot));
            }
        }
        match best {
            Some((_, slot)) => self.decode(slot, x),
            None if self.outside[idx as usize] => self.sentinel,
            None => -self.sentinel,
        }
    }
}

pub fn blended_sdf(mlp: &Mlp, field: &CoordinateField, x: Vec3) -> Result<f64> {
    Ok(BlendedField::new(mlp, field)?.value(x))
}

// --- marching cubes ---------------------------------------------------------

// Corner i sits at ((i>>0)&1, (i>>1)&1, (i>>2)&1); edges are listed x-axis
// first, then y, then z.
const EDGE_ENDPOINTS: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

// Each face's corners in cyclic order.
const FACES: [[usize; 4]; 6] = [
    [0, 2, 6, 4],
    [1, 3, 7, 5],
    [0, 1, 5, 4],
    [2, 3, 7, 6],
    [0, 1, 3, 2],
    [4, 5, 7, 6],
];

fn edge_of(a: usize, b: usize) -> usize {
    let (a, b) = (a.min(b), a.max(b));
    EDGE_ENDPOINTS
        .iter()
        .position(|&(x, y)| (x, y) == (a, b))
        .expect("corner pair is a cube edge")
}

/// Triangles (as edge-id triples) for one sign configuration. Bit i of `case`
/// set means corner i is inside. Face segments pair crossings so that inside
/// corners on ambiguous faces stay separated, which makes the choice agree
/// between the two cubes sharing the face.
fn case_triangles(case: u8) -> Vec<[u8; 3]> {
    let inside = |c: usize| case >> c & 1 == 1;
    let mut segments: Vec<(usize, usize)> = Vec::new();
    for face in FACES {
        let crossed: Vec<usize> = (0..4)
            .filter(|&i| inside(face[i]) != inside(face[(i + 1) % 4]))
            .collect();
        match crossed.len() {
            0 => {}
            2 => segments.push((
                edge_of(face[crossed[0]], face[(crossed[0] + 1) % 4]),
                edge_of(face[crossed[1]], face[(crossed[1] + 1) % 4]),
            )),
            4 => {
                for i in 0..4 {
                    if inside(face[i]) {
                        let prev = edge_of(face[(i + 3) % 4], face[i]);
                        let next = edge_of(face[i], face[(i + 1) % 4]);
                        segments.push((prev, next));
                    }
                }
            }
            _ => unreachable!("odd crossing count on a face"),
        }
    }

    let mut adjacent: Vec<Vec<usize>> = vec![Vec::new(); 12];
    for &(a, b) in &segments {
        adjacent[a].push(b);
        adjacent[b].push(a);
    }
    debug_assert!(adjacent.iter().all(|n| n.is_empty() || n.len() == 2));

    let mut triangles = Vec::new();
    let mut visited = [false; 12];
    for start in 0..12 {
        if adjacent[start].is_empty() || visited[start] {
            continue;
        }
        let mut ring = vec![start];
        visited[start] = true;
        let mut prev = start;
        let mut cur = *adjacent[start].iter().min().unwrap();
        while cur != start {
            visited[cur] = true;
            ring.push(cur);
            let next = if adjacent[cur][0] == prev {
                adjacent[cur][1]
            } else {
                adjacent[cur][0]
            };
            prev = cur;
            cur = next;
        }
        for i in 1..ring.len() - 1 {
            triangles.push([ring[0] as u8, ring[i] as u8, ring[i + 1] as u8]);
        }
    }
    triangles
}

fn mc_table() -> &'static [Vec<[u8; 3]>; 256] {
    static TABLE: OnceLock<[Vec<[u8; 3]>; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(|case| case_triangles(case as u8)))
}

/// Gradient of the trilinear interpolant of the cube's corner values at local
/// coordinates (u, v, w) in [0,1]^3, in grid-step units.
fn trilinear_gradient(vals: &[f64; 8], u: f64, v: f64, w: f64) -> Vec3 {
    let lerp2 = |a: f64, b: f64, c: f64, d: f64, s: f64, t: f64| {
        (1.0 - s) * (1.0 - t) * a + s * (1.0 - t) * b + (1.0 - s) * t * c + s * t * d
    };
    let gx = lerp2(
        vals[1] - vals[0],
        vals[3] - vals[2],
        vals[5] - vals[4],
        vals[7] - vals[6],
        v,
        w,
    );
    let gy = lerp2(
        vals[2] - vals[0],
        vals[3] - vals[1],
        vals[6] - vals[4],
        vals[7] - vals[5],
        u,
        w,
    );
    let gz = lerp2(
        vals[4] - vals[0],
        vals[5] - vals[1],
        vals[6] - vals[2],
        vals[7] - vals[3],
        u,
        v,
    );
    vec3(gx, gy, gz)
}

/// Extract the zero level set of `sdf` sampled on a `resolution`^3 cell grid.
/// Vertices land on grid edges and are shared exactly, so closed level sets
/// come out watertight; triangles face the gradient at their centroid.
pub fn marching_cubes(
    sdf: &(impl Fn(Vec3) -> f64 + Sync),
    resolution: usize,
    lower: Vec3,
    upper: Vec3,
) -> TriangleMesh {
    assert!(resolution >= 8, "marching cubes resolution must be >= 8");
    let n = resolution;
    let np = n + 1;
    let h = (upper - lower) / n as f64;
    let point = |ix: usize, iy: usize, iz: usize| {
        lower + vec3(ix as f64 * h.x, iy as f64 * h.y, iz as f64 * h.z)
    };

    // Sampling dominates; slabs evaluate in parallel and land in fixed order.
    let values: Vec<f64> = (0..np)
        .into_par_iter()
        .flat_map_iter(|iz| {
            let mut slab = Vec::with_capacity(np * np);
            for iy in 0..np {
                for ix in 0..np {
                    slab.push(sdf(point(ix, iy, iz)));
                }
            }
            slab
        })
        .collect();
    let sample = |ix: usize, iy: usize, iz: usize| values[ix + np * (iy + np * iz)];

    let table = mc_table();
    let mut vertex_of: HashMap<(u32, u32), u32> = HashMap::new();
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();

    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                let corner_grid = |c: usize| (ix + (c & 1), iy + (c >> 1 & 1), iz + (c >> 2 & 1));
                let mut vals = [0.0f64; 8];
                let mut case = 0usize;
                for (c, v) in vals.iter_mut().enumerate() {
                    let (gx, gy, gz) = corner_grid(c);
                    *v = sample(gx, gy, gz);
                    if *v < 0.0 {
                        case |= 1 << c;
                    }
                }
                if table[case].is_empty() {
                    continue;
                }

                // Local position and grid key of the crossing on each edge.
                let edge_data = |e: usize| {
                    let (ca, cb) = EDGE_ENDPOINTS[e];
                    let t = vals[ca] / (vals[ca] - vals[cb]);
                    let la = vec3(
                        (ca & 1) as f64,
                        (ca >> 1 & 1) as f64,
                        (ca >> 2 & 1) as f64,
                    );
                    let lb = vec3(
                        (cb & 1) as f64,
                        (cb >> 1 & 1) as f64,
                        (cb >> 2 & 1) as f64,
                    );
                    let local = la + (lb - la) * t;
                    let ga = corner_grid(ca);
                    let gb = corner_grid(cb);
                    let key = (
                        (ga.0 + np * (ga.1 + np * ga.2)) as u32,
                        (gb.0 + np * (gb.1 + np * gb.2)) as u32,
                    );
                    (local, key)
                };

                for tri in &table[case] {
                    let data = [
                        edge_data(tri[0] as usize),
                        edge_data(tri[1] as usize),
                        edge_data(tri[2] as usize),
                    ];
                    let world = |local: Vec3| {
                        point(ix, iy, iz)
                            + vec3(local.x * h.x, local.y * h.y, local.z * h.z)
                    };
                    let p = [world(data[0].0), world(data[1].0), world(data[2].0)];
                    let centroid = (data[0].0 + data[1].0 + data[2].0) / 3.0;
                    let grad_local = trilinear_gradient(&vals, centroid.x, centroid.y, centroid.z);
                    let grad = vec3(grad_local.x / h.x, grad_local.y / h.y, grad_local.z / h.z);
                    let normal = (p[1] - p[0]).cross(p[2] - p[0]);
                    let flip = normal.dot(grad) < 0.0;

                    let mut ids = [0u32; 3];
                    for (slot, d) in data.iter().enumerate() {
                        let next = vertices.len() as u32;
                        let id = *vertex_of.entry(d.1).or_insert_with(|| {
                            vertices.push(world(d.0));
                            next
                        });
                        ids[slot] = id;
                    }
                    if flip {
                        ids.swap(1, 2);
                    }
                    triangles.push(ids);
                }
            }
        }
    }

    TriangleMesh::new(vertices, triangles)
}

// --- chamfer ----------------------------------------------------------------

struct KdTree {
    pts: Vec<Vec3>,
    axis: Vec<u8>,
}

impl KdTree {
    fn build(mut pts: Vec<Vec3>) -> KdTree {
        let n = pts.len();
        let mut axis = vec![0u8; n];
        let mut stack = vec![(0usize, n)];
        while let Some((lo, hi)) = stack.pop() {
            if hi - lo <= 1 {
                continue;
            }
            let range = &mut pts[lo..hi];
            let mut min = range[0];
            let mut max = range[0];
            for p in range.iter() {
                min = min.min_by_component(*p);
                max = max.max_by_component(*p);
            }
            let extent = max - min;
            let ax = if extent.x >= extent.y && extent.x >= extent.z {
                0
            } else if extent.y >= extent.z {
                1
            } else {
                2
            };
            let mid = (hi - lo) / 2;
            range.select_nth_unstable_by(mid, |a, b| {
                a.get(ax).partial_cmp(&b.get(ax)).unwrap()
            });
            axis[lo + mid] = ax as u8;
            stack.push((lo, lo + mid));
            stack.push((lo + mid + 1, hi));
        }
        KdTree { pts, axis }
    }

    fn nearest_sq(&self, p: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(p, 0, self.pts.len(), &mut best);
        best
    }

    fn search(&self, p: Vec3, lo: usize, hi: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let d = (self.pts[mid] - p).norm_sq();
        if d < *best {
            *best = d;
        }
        let ax = self.axis[mid] as usize;
        let delta = p.get(ax) - self.pts[mid].get(ax);
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(p, near.0, near.1, best);
        if delta * delta < *best {
            self.search(p, far.0, far.1, best);
        }
    }
}

/// Sum of the two directed means of squared nearest-neighbor distances.
pub fn chamfer_l2(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet);
    }
    let ta = KdTree::build(a.to_vec());
    let tb = KdTree::build(b.to_vec());
    let ab: f64 = a.par_iter().map(|&p| tb.nearest_sq(p)).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.par_iter().map(|&p| ta.nearest_sq(p)).sum::<f64>() / b.len() as f64;
    Ok(ab + ba)
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub chamfer: f64,
    pub points: usize,
    pub resolution: usize,
    pub extracted_vertices: usize,
    pub extracted_triangles: usize,
    pub extract_seconds: f64,
    pub compare_seconds: f64,
}

impl EvalReport {
    pub fn chamfer_x1e4(&self) -> f64 {
        self.chamfer * 1e4
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "chamfer = {:.10}", self.chamfer)?;
        writeln!(f, "chamfer_x1e4 = {:.6}", self.chamfer_x1e4())?;
        writeln!(f, "points = {}", self.points)?;
        writeln!(f, "mc_resolution = {}", self.resolution)?;
        writeln!(f, "extracted_vertices = {}", self.extracted_vertices)?;
        writeln!(f, "extracted_triangles = {}", self.extracted_triangles)?;
        writeln!(f, "extract_seconds = {:.3}", self.extract_seconds)?;
        write!(f, "compare_seconds = {:.3}", self.compare_seconds)
    }
}

/// Marching cubes over the blended field on its own grid bounds.
pub fn extract_mesh(mlp: &Mlp, field: &CoordinateField, resolution: usize) -> Result<TriangleMesh> {
    let blended = BlendedField::new(mlp, field)?;
    let (lo, hi) = field.grid.bounds();
    Ok(marching_cubes(&|p| blended.value(p), resolution, lo, hi))
}

/// Full metric pipeline: extract, sample both meshes, chamfer.
pub fn evaluate(
    mlp: &Mlp,
    field: &CoordinateField,
    gt: &TriangleMesh,
    resolution: usize,
    n_points: usize,
    seed: u64,
) -> Result<EvalReport> {
    let t0 = std::time::Instant::now();
    let mesh = extract_mesh(mlp, field, resolution)?;
    let extract_seconds = t0.elapsed().as_secs_f64();
    if mesh.is_empty() {
        return Err(Error::EmptySet);
    }
    let t1 = std::time::Instant::now();
    let pa = mesh.sample_surface(n_points, child_seed(seed, 1))?;
    let pb = gt.sample_surface(n_points, child_seed(seed, 2))?;
    let chamfer = chamfer_l2(&pa, &pb)?;
    Ok(EvalReport {
        chamfer,
        points: n_points,
        resolution,
        extracted_vertices: mesh.vertices.len(),
        extracted_triangles: mesh.triangles.len(),
        extract_seconds,
        compare_seconds: t1.elapsed().as_secs_f64(),
    })
}
