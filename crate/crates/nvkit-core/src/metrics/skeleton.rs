//! Topology-preserving 3D thinning and centerline graph extraction.
//!
//! Thinning removes simple points (26-object / 6-background connectivity)
//! in sequential directional sweeps while protecting curve endpoints, which
//! reduces tubular masks to one-voxel-wide centerlines without changing
//! topology. The centerline is then cut into maximal simple paths between
//! junction clusters and endpoints, short terminal spurs are pruned, and
//! branch generations are assigned by traversal from the root (the terminal
//! branch with the largest mean inscribed radius).

use super::edt::squared_edt;
use crate::volume::BinaryMask;
use ndarray::Array3;
use serde::Serialize;

/// One maximal simple path of the centerline.
#[derive(Debug, Clone, Serialize)]
pub struct Branch {
    /// Path voxels including both terminal node voxels.
    pub voxels: Vec<[usize; 3]>,
    /// Physical length (sum of inter-voxel steps scaled by spacing), mm.
    pub length_mm: f64,
    /// Depth from the root branch; the root tube is generation 0 and every
    /// branch point increments by one.
    pub generation: usize,
}

/// Centerline graph of a mask.
#[derive(Debug, Clone, Serialize)]
pub struct TreeSkeleton {
    pub voxels: Vec<[usize; 3]>,
    /// Skeleton voxels with exactly one skeleton neighbor.
    pub endpoints: Vec<[usize; 3]>,
    /// Skeleton voxels with three or more skeleton neighbors.
    pub branch_points: Vec<[usize; 3]>,
    pub branches: Vec<Branch>,
    pub spacing: [f64; 3],
}

impl TreeSkeleton {
    pub fn empty(spacing: [f64; 3]) -> Self {
        TreeSkeleton {
            voxels: Vec::new(),
            endpoints: Vec::new(),
            branch_points: Vec::new(),
            branches: Vec::new(),
            spacing,
        }
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn total_length_mm(&self) -> f64 {
        self.branches.iter().map(|b| b.length_mm).sum()
    }

    pub fn max_generation(&self) -> usize {
        self.branches.iter().map(|b| b.generation).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SkeletonConfig {
    /// Terminal branches with at most this many voxels that end at a branch
    /// point are treated as thinning spurs and removed.
    pub prune_spur_voxels: usize,
    /// Internal branches with at most this many voxels whose both ends are
    /// junction clusters are treated as one split junction and contracted.
    pub collapse_internal_voxels: usize,
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        SkeletonConfig {
            prune_spur_voxels: 2,
            collapse_internal_voxels: 4,
        }
    }
}

#[inline]
fn at(m: &Array3<bool>, z: i64, y: i64, x: i64) -> bool {
    let (d, h, w) = m.dim();
    z >= 0
        && y >= 0
        && x >= 0
        && z < d as i64
        && y < h as i64
        && x < w as i64
        && m[[z as usize, y as usize, x as usize]]
}

/// Local 3x3x3 object occupancy around `p`; out-of-bounds reads as background.
fn local_cube(m: &Array3<bool>, p: [usize; 3]) -> [[[bool; 3]; 3]; 3] {
    let mut cube = [[[false; 3]; 3]; 3];
    for (dz, plane) in cube.iter_mut().enumerate() {
        for (dy, row) in plane.iter_mut().enumerate() {
            for (dx, cell) in row.iter_mut().enumerate() {
                *cell = at(
                    m,
                    p[0] as i64 + dz as i64 - 1,
                    p[1] as i64 + dy as i64 - 1,
                    p[2] as i64 + dx as i64 - 1,
                );
            }
        }
    }
    cube
}

/// Number of 26-connected components of object cells among the 26 neighbors.
fn object_components_26(cube: &[[[bool; 3]; 3]; 3]) -> usize {
    let mut visited = [[[false; 3]; 3]; 3];
    let mut comps = 0;
    let mut stack: Vec<[usize; 3]> = Vec::with_capacity(26);
    for sz in 0..3 {
        for sy in 0..3 {
            for sx in 0..3 {
                if (sz, sy, sx) == (1, 1, 1) || !cube[sz][sy][sx] || visited[sz][sy][sx] {
                    continue;
                }
                comps += 1;
                visited[sz][sy][sx] = true;
                stack.push([sz, sy, sx]);
                while let Some(c) = stack.pop() {
                    for nz in c[0].saturating_sub(1)..=(c[0] + 1).min(2) {
                        for ny in c[1].saturating_sub(1)..=(c[1] + 1).min(2) {
                            for nx in c[2].saturating_sub(1)..=(c[2] + 1).min(2) {
                                if (nz, ny, nx) == (1, 1, 1)
                                    || visited[nz][ny][nx]
                                    || !cube[nz][ny][nx]
                                {
                                    continue;
                                }
                                visited[nz][ny][nx] = true;
                                stack.push([nz, ny, nx]);
                            }
                        }
                    }
                }
            }
        }
    }
    comps
}

const FACES: [[i64; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

fn in_n18(dz: i64, dy: i64, dx: i64) -> bool {
    let s = dz.abs() + dy.abs() + dx.abs();
    s == 1 || s == 2
}

/// Number of 6-connected components of background cells within the
/// 18-neighborhood that touch a face neighbor of the center.
fn background_components_n18(cube: &[[[bool; 3]; 3]; 3]) -> usize {
    let mut visited = [[[false; 3]; 3]; 3];
    let mut comps = 0;
    let mut stack: Vec<[i64; 3]> = Vec::with_capacity(18);
    for f in FACES {
        let (sz, sy, sx) = ((f[0] + 1) as usize, (f[1] + 1) as usize, (f[2] + 1) as usize);
        if cube[sz][sy][sx] || visited[sz][sy][sx] {
            continue;
        }
        comps += 1;
        visited[sz][sy][sx] = true;
        stack.push(f);
        while let Some(c) = stack.pop() {
            for step in FACES {
                let n = [c[0] + step[0], c[1] + step[1], c[2] + step[2]];
                if n.iter().any(|&v| !(-1..=1).contains(&v)) || !in_n18(n[0], n[1], n[2]) {
                    continue;
                }
                let (nz, ny, nx) = ((n[0] + 1) as usize, (n[1] + 1) as usize, (n[2] + 1) as usize);
                if visited[nz][ny][nx] || cube[nz][ny][nx] {
                    continue;
                }
                visited[nz][ny][nx] = true;
                stack.push(n);
            }
        }
    }
    comps
}

/// A point is simple (removable without changing topology) iff its object
/// neighbors form one 26-component and the background cells of its
/// 18-neighborhood that touch a face form one 6-component.
fn is_simple(m: &Array3<bool>, p: [usize; 3]) -> bool {
    let cube = local_cube(m, p);
    object_components_26(&cube) == 1 && background_components_n18(&cube) == 1
}

fn neighbor_count(m: &Array3<bool>, p: [usize; 3]) -> usize {
    let mut n = 0;
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if (dz, dy, dx) == (0, 0, 0) {
                    continue;
                }
                if at(m, p[0] as i64 + dz, p[1] as i64 + dy, p[2] as i64 + dx) {
                    n += 1;
                }
            }
        }
    }
    n
}

fn is_curve_endpoint(m: &Array3<bool>, p: [usize; 3]) -> bool {
    neighbor_count(m, p) <= 1
}

/// Sequential directional thinning to a one-voxel-wide centerline.
pub fn thin(mask: &Array3<bool>) -> Array3<bool> {
    let mut m = mask.clone();
    let mut candidates: Vec<[usize; 3]> = Vec::new();
    loop {
        let mut changed = false;
        for dir in FACES {
            candidates.clear();
            for ((z, y, x), &v) in m.indexed_iter() {
                if !v {
                    continue;
                }
                let p = [z, y, x];
                // Border in this direction: the face neighbor is background.
                if at(&m, z as i64 + dir[0], y as i64 + dir[1], x as i64 + dir[2]) {
                    continue;
                }
                if is_curve_endpoint(&m, p) || !is_simple(&m, p) {
                    continue;
                }
                candidates.push(p);
            }
            // Re-check sequentially: earlier removals may make a candidate
            // non-simple or an endpoint.
            for &p in &candidates {
                if !is_curve_endpoint(&m, p) && is_simple(&m, p) {
                    m[p] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            return m;
        }
    }
}

const N26: [[i64; 3]; 26] = {
    let mut out = [[0i64; 3]; 26];
    let mut i = 0;
    let mut dz = -1i64;
    while dz <= 1 {
        let mut dy = -1i64;
        while dy <= 1 {
            let mut dx = -1i64;
            while dx <= 1 {
                if !(dz == 0 && dy == 0 && dx == 0) {
                    out[i] = [dz, dy, dx];
                    i += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
};

struct Graph {
    voxels: Vec<[usize; 3]>,
    index: Array3<i64>,
    degree: Vec<usize>,
    /// Node id per voxel: endpoints and junction clusters get ids, chain
    /// voxels get none.
    node_of: Vec<Option<usize>>,
    n_nodes: usize,
}

fn build_graph(skel: &Array3<bool>) -> Graph {
    let mut voxels = Vec::new();
    let mut index = Array3::<i64>::from_elem(skel.dim(), -1);
    for ((z, y, x), &v) in skel.indexed_iter() {
        if v {
            index[[z, y, x]] = voxels.len() as i64;
            voxels.push([z, y, x]);
        }
    }
    let degree: Vec<usize> = voxels.iter().map(|&p| neighbor_count(skel, p)).collect();
    // Union junction voxels (degree >= 3) that touch each other.
    let mut node_of: Vec<Option<usize>> = vec![None; voxels.len()];
    let mut n_nodes = 0usize;
    for (i, &p) in voxels.iter().enumerate() {
        if degree[i] == 2 || node_of[i].is_some() {
            continue;
        }
        if degree[i] >= 3 {
            // Flood the cluster of adjacent junction voxels.
            let id = n_nodes;
            n_nodes += 1;
            node_of[i] = Some(id);
            let mut stack = vec![p];
            while let Some(c) = stack.pop() {
                for d in N26 {
                    let (nz, ny, nx) = (c[0] as i64 + d[0], c[1] as i64 + d[1], c[2] as i64 + d[2]);
                    if !at(skel, nz, ny, nx) {
                        continue;
                    }
                    let j = index[[nz as usize, ny as usize, nx as usize]] as usize;
                    if degree[j] >= 3 && node_of[j].is_none() {
                        node_of[j] = Some(id);
                        stack.push([nz as usize, ny as usize, nx as usize]);
                    }
                }
            }
        } else {
            // Endpoint (degree 1) or isolated voxel (degree 0).
            node_of[i] = Some(n_nodes);
            n_nodes += 1;
        }
    }
    Graph {
        voxels,
        index,
        degree,
        node_of,
        n_nodes,
    }
}

fn neighbors_of(skel: &Array3<bool>, g: &Graph, i: usize) -> Vec<usize> {
    let p = g.voxels[i];
    let mut out = Vec::with_capacity(3);
    for d in N26 {
        let (nz, ny, nx) = (p[0] as i64 + d[0], p[1] as i64 + d[1], p[2] as i64 + d[2]);
        if at(skel, nz, ny, nx) {
            out.push(g.index[[nz as usize, ny as usize, nx as usize]] as usize);
        }
    }
    out
}

struct RawBranch {
    voxel_ids: Vec<usize>,
    node_a: usize,
    node_b: usize,
}

/// Cuts the skeleton into maximal simple paths between nodes.
fn trace_branches(skel: &Array3<bool>, g: &Graph) -> Vec<RawBranch> {
    let mut branches = Vec::new();
    let mut used_step: std::collections::HashSet<(usize, usize)> = std::collections::HashSet::new();
    // Isolated voxels become single-voxel branches.
    for i in 0..g.voxels.len() {
        if g.degree[i] == 0 {
            branches.push(RawBranch {
                voxel_ids: vec![i],
                node_a: g.node_of[i].unwrap(),
                node_b: g.node_of[i].unwrap(),
            });
        }
    }
    for start in 0..g.voxels.len() {
        let Some(node_a) = g.node_of[start] else {
            continue;
        };
        for first in neighbors_of(skel, g, start) {
            // Stay out of the cluster interior.
            if g.node_of[first] == Some(node_a) && g.degree[first] >= 3 && g.degree[start] >= 3 {
                continue;
            }
            if used_step.contains(&(start, first)) {
                continue;
            }
            let mut path = vec![start, first];
            let mut prev = start;
            let mut cur = first;
            while g.node_of[cur].is_none() {
                let ns = neighbors_of(skel, g, cur);
                // Degree-2 chain: step to the neighbor we did not come from.
                let next = match ns.iter().find(|&&n| n != prev) {
                    Some(&n) => n,
                    None => break, // dead end (shouldn't happen: deg 1 is a node)
                };
                path.push(next);
                prev = cur;
                cur = next;
            }
            let node_b = g.node_of[cur].unwrap_or(node_a);
            used_step.insert((start, first));
            used_step.insert((cur, prev));
            branches.push(RawBranch {
                voxel_ids: path,
                node_a,
                node_b,
            });
        }
    }
    // Pure cycles (every voxel degree 2) have no node voxels; walk them too.
    let mut in_branch = vec![false; g.voxels.len()];
    for b in &branches {
        for &v in &b.voxel_ids {
            in_branch[v] = true;
        }
    }
    for i in 0..g.voxels.len() {
        if in_branch[i] || g.degree[i] != 2 {
            continue;
        }
        let mut path = vec![i];
        in_branch[i] = true;
        let mut prev = i;
        let mut cur = neighbors_of(skel, g, i)[0];
        while cur != i {
            path.push(cur);
            in_branch[cur] = true;
            let ns = neighbors_of(skel, g, cur);
            let next = *ns.iter().find(|&&n| n != prev).unwrap_or(&i);
            prev = cur;
            cur = next;
        }
        branches.push(RawBranch {
            voxel_ids: path,
            node_a: usize::MAX,
            node_b: usize::MAX,
        });
    }
    branches
}

/// Walks each skeleton endpoint outward along the inscribed-radius plateau.
///
/// Thinning recedes the tip of a rounded tube by roughly its radius; the
/// medial axis actually continues to the cap center, where the inscribed
/// radius starts to fall. Each endpoint is extended along its chain
/// direction while the voxel stays in the mask, the extension keeps a clean
/// chain (no contact with other skeleton voxels), and the inscribed radius
/// does not drop step over step.
fn extend_tips(skel: &mut Array3<bool>, edt2: &Array3<f64>) {
    let (d, h, w) = skel.dim();
    let endpoints: Vec<[usize; 3]> = skel
        .indexed_iter()
        .filter(|(_, &v)| v)
        .map(|((z, y, x), _)| [z, y, x])
        .filter(|&p| neighbor_count(skel, p) == 1)
        .collect();
    for e in endpoints {
        if neighbor_count(skel, e) != 1 {
            continue; // a previous extension may have touched this tip
        }
        // Chain direction from up to four voxels back.
        let mut prev: Option<[usize; 3]> = None;
        let mut cur = e;
        for _ in 0..4 {
            let mut ns: Vec<[usize; 3]> = Vec::new();
            for dd in N26 {
                let (nz, ny, nx) = (
                    cur[0] as i64 + dd[0],
                    cur[1] as i64 + dd[1],
                    cur[2] as i64 + dd[2],
                );
                if at(skel, nz, ny, nx) {
                    let n = [nz as usize, ny as usize, nx as usize];
                    if Some(n) != prev {
                        ns.push(n);
                    }
                }
            }
            if ns.len() != 1 {
                break;
            }
            prev = Some(cur);
            cur = ns[0];
        }
        if cur == e {
            continue;
        }
        let mut dir = [
            e[0] as f64 - cur[0] as f64,
            e[1] as f64 - cur[1] as f64,
            e[2] as f64 - cur[2] as f64,
        ];
        let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        if n == 0.0 {
            continue;
        }
        dir = [dir[0] / n, dir[1] / n, dir[2] / n];
        // Tube radius estimated from the interior chain (the on-axis EDT
        // plateau); the walk stops once the inscribed radius falls clearly
        // below it, which happens right past the cap center.
        let mut plateau = edt2[e].sqrt();
        {
            let mut prev: Option<[usize; 3]> = None;
            let mut c = e;
            for _ in 0..4 {
                let mut ns: Vec<[usize; 3]> = Vec::new();
                for dd in N26 {
                    let (nz, ny, nx) =
                        (c[0] as i64 + dd[0], c[1] as i64 + dd[1], c[2] as i64 + dd[2]);
                    if at(skel, nz, ny, nx) {
                        let q = [nz as usize, ny as usize, nx as usize];
                        if Some(q) != prev {
                            ns.push(q);
                        }
                    }
                }
                if ns.len() != 1 {
                    break;
                }
                prev = Some(c);
                c = ns[0];
                plateau = plateau.max(edt2[c].sqrt());
            }
        }
        let stop_below = (plateau * 0.72).max(1.1);
        let mut pos = [e[0] as f64, e[1] as f64, e[2] as f64];
        let mut tail = e;
        let max_steps = (plateau.ceil() as usize + 3).max(4);
        'walk: for _ in 0..max_steps {
            pos = [pos[0] + dir[0], pos[1] + dir[1], pos[2] + dir[2]];
            let vz = pos[0].round();
            let vy = pos[1].round();
            let vx = pos[2].round();
            if vz < 0.0
                || vy < 0.0
                || vx < 0.0
                || vz >= d as f64
                || vy >= h as f64
                || vx >= w as f64
            {
                break;
            }
            let v = [vz as usize, vy as usize, vx as usize];
            if v == tail {
                continue;
            }
            if edt2[v].sqrt() < stop_below {
                break; // inscribed radius fell off the plateau: past the cap
            }
            // Keep the extension a clean chain: the new voxel may touch the
            // current tail only.
            for dd in N26 {
                let (nz, ny, nx) = (
                    v[0] as i64 + dd[0],
                    v[1] as i64 + dd[1],
                    v[2] as i64 + dd[2],
                );
                if at(skel, nz, ny, nx) && [nz as usize, ny as usize, nx as usize] != tail {
                    break 'walk;
                }
            }
            skel[v] = true;
            tail = v;
        }
    }
}

fn path_length_mm(voxels: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    voxels
        .windows(2)
        .map(|w| {
            let dz = (w[1][0] as f64 - w[0][0] as f64) * spacing[0];
            let dy = (w[1][1] as f64 - w[0][1] as f64) * spacing[1];
            let dx = (w[1][2] as f64 - w[0][2] as f64) * spacing[2];
            (dz * dz + dy * dy + dx * dx).sqrt()
        })
        .sum()
}

/// Extracts the centerline graph of `mask`.
///
/// Multi-component masks are handled per component: each component gets its
/// own root (generation 0). An empty mask yields an empty skeleton.
pub fn skeletonize(mask: &BinaryMask, cfg: &SkeletonConfig) -> TreeSkeleton {
    let spacing = mask.spacing;
    if mask.count() == 0 {
        return TreeSkeleton::empty(spacing);
    }
    let mut skel = thin(&mask.data);
    let radius2 = squared_edt(&mask.data);

    // Prune short terminal spurs, re-extracting until stable.
    loop {
        let g = build_graph(&skel);
        let branches = trace_branches(&skel, &g);
        let mut node_branch_count = vec![0usize; g.n_nodes];
        for b in &branches {
            if b.node_a != usize::MAX {
                node_branch_count[b.node_a] += 1;
                if b.node_b != b.node_a {
                    node_branch_count[b.node_b] += 1;
                }
            }
        }
        let mut pruned = false;
        let mut remove: Vec<usize> = Vec::new();
        for b in &branches {
            if b.node_a == usize::MAX || b.voxel_ids.len() > cfg.prune_spur_voxels {
                continue;
            }
            let deg_a = g.degree[b.voxel_ids[0]];
            let deg_b = g.degree[*b.voxel_ids.last().unwrap()];
            // Spur: one free end, the other anchored at a junction cluster,
            // and the anchor still has other branches.
            let (free, anchor, anchor_node) = if deg_a <= 1 && deg_b >= 3 {
                (0, b.voxel_ids.len() - 1, b.node_b)
            } else if deg_b <= 1 && deg_a >= 3 {
                (b.voxel_ids.len() - 1, 0, b.node_a)
            } else {
                continue;
            };
            let _ = free;
            if node_branch_count[anchor_node] < 3 {
                continue;
            }
            for (i, &v) in b.voxel_ids.iter().enumerate() {
                if i != anchor {
                    remove.push(v);
                }
            }
            node_branch_count[anchor_node] -= 1;
            pruned = true;
        }
        if !pruned {
            break;
        }
        for &v in &remove {
            let p = g.voxels[v];
            skel[p] = false;
        }
    }

    extend_tips(&mut skel, &radius2);

    let g = build_graph(&skel);
    let mut raw = trace_branches(&skel, &g);

    // A thick junction sometimes thins into two nearby junction clusters
    // joined by a voxel-scale bridge; contract such bridges so the branch
    // graph sees one junction.
    {
        let mut node_root: Vec<usize> = (0..g.n_nodes).collect();
        fn find(r: &mut Vec<usize>, i: usize) -> usize {
            let mut i = i;
            while r[i] != i {
                r[i] = r[r[i]];
                i = r[i];
            }
            i
        }
        let is_junction = |b: &RawBranch, start: bool| -> bool {
            let v = if start {
                b.voxel_ids[0]
            } else {
                *b.voxel_ids.last().unwrap()
            };
            g.degree[v] >= 3
        };
        let mut drop = vec![false; raw.len()];
        for (bi, b) in raw.iter().enumerate() {
            if b.node_a == usize::MAX {
                continue;
            }
            if b.voxel_ids.len() <= cfg.collapse_internal_voxels
                && is_junction(b, true)
                && is_junction(b, false)
            {
                let ra = find(&mut node_root, b.node_a);
                let rb = find(&mut node_root, b.node_b);
                node_root[rb] = ra;
                // Either a split-junction bridge or, when the ends already
                // coincide, a voxel-scale handle inside the junction; both
                // are junction interior, not branches.
                drop[bi] = true;
            }
        }
        let mut kept = Vec::with_capacity(raw.len());
        for (bi, mut b) in raw.into_iter().enumerate() {
            if drop[bi] {
                continue;
            }
            if b.node_a != usize::MAX {
                b.node_a = find(&mut node_root, b.node_a);
                b.node_b = find(&mut node_root, b.node_b);
            }
            kept.push(b);
        }
        raw = kept;
    }

    // Assign generations per connected piece of the branch graph.
    let mut generation = vec![usize::MAX; raw.len()];
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); g.n_nodes];
    for (bi, b) in raw.iter().enumerate() {
        if b.node_a == usize::MAX {
            generation[bi] = 0; // cycles: no root, generation 0
            continue;
        }
        incident[b.node_a].push(bi);
        if b.node_b != b.node_a {
            incident[b.node_b].push(bi);
        }
    }
    // Component roots: among terminal branches (one end an endpoint), take
    // the one with the largest mean inscribed radius; ties go to the
    // endpoint on the topmost slice.
    let mean_radius = |b: &RawBranch| -> f64 {
        let s: f64 = b
            .voxel_ids
            .iter()
            .map(|&v| radius2[g.voxels[v]].sqrt())
            .sum();
        s / b.voxel_ids.len() as f64
    };
    loop {
        let mut best: Option<(usize, usize, f64, usize)> = None; // (branch, root node, radius, endpoint z)
        for (bi, b) in raw.iter().enumerate() {
            if generation[bi] != usize::MAX || b.node_a == usize::MAX {
                continue;
            }
            let ends = [
                (b.voxel_ids[0], b.node_a),
                (*b.voxel_ids.last().unwrap(), b.node_b),
            ];
            for (v, node) in ends {
                if g.degree[v] > 1 {
                    continue; // not an endpoint
                }
                let r = mean_radius(b);
                let z = g.voxels[v][0];
                let better = match &best {
                    None => true,
                    Some((_, _, br, bz)) => r > *br || (r == *br && z < *bz),
                };
                if better {
                    best = Some((bi, node, r, z));
                }
            }
        }
        let Some((root_branch, root_node, _, _)) = best else {
            // Leftover unassigned branches without endpoints (cycle-connected
            // clusters); give them generation 0 and stop.
            for gen in generation.iter_mut() {
                if *gen == usize::MAX {
                    *gen = 0;
                }
            }
            break;
        };
        // BFS over the branch graph from the root node.
        let mut node_depth = vec![usize::MAX; g.n_nodes];
        node_depth[root_node] = 0;
        let mut queue = std::collections::VecDeque::from([root_node]);
        generation[root_branch] = 0;
        while let Some(node) = queue.pop_front() {
            let depth = node_depth[node];
            for &bi in &incident[node] {
                if generation[bi] == usize::MAX {
                    // The root branch leaves the depth-0 endpoint at
                    // generation 0; every junction crossed adds one.
                    generation[bi] = depth;
                }
                let b = &raw[bi];
                let other = if b.node_a == node { b.node_b } else { b.node_a };
                if node_depth[other] == usize::MAX {
                    node_depth[other] = depth + 1;
                    queue.push_back(other);
                }
            }
        }
        if generation.iter().all(|&gv| gv != usize::MAX) {
            break;
        }
    }

    let branches: Vec<Branch> = raw
        .iter()
        .zip(&generation)
        .map(|(b, &gen)| {
            let voxels: Vec<[usize; 3]> = b.voxel_ids.iter().map(|&v| g.voxels[v]).collect();
            let length_mm = path_length_mm(&voxels, spacing);
            Branch {
                voxels,
                length_mm,
                generation: gen,
            }
        })
        .collect();

    let endpoints = (0..g.voxels.len())
        .filter(|&i| g.degree[i] == 1)
        .map(|i| g.voxels[i])
        .collect();
    let branch_points = (0..g.voxels.len())
        .filter(|&i| g.degree[i] >= 3)
        .map(|i| g.voxels[i])
        .collect();
    TreeSkeleton {
        voxels: g.voxels,
        endpoints,
        branch_points,
        branches,
        spacing,
    }
}
