//! Prediction post-processing: threshold the confidence map, keep the
//! largest connected shape, and reconnect nearby broken branches by local
//! threshold relaxation around skeleton endpoints.

use crate::backbone::ConfidenceMaps;
use crate::error::{NvError, Result};
use crate::metrics::{skeletonize, SkeletonConfig};
use crate::scalar::Real;
use crate::volume::BinaryMask;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// One connected shape: its voxels and its lexicographically smallest one.
#[derive(Debug, Clone)]
pub struct Component {
    pub voxels: Vec<[usize; 3]>,
    pub seed: [usize; 3],
}

impl Component {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

/// Connected shapes sorted by size descending; ties broken by the smaller
/// seed voxel, so the largest-component choice is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ComponentSet {
    pub components: Vec<Component>,
}

impl ComponentSet {
    pub fn largest(&self) -> Option<&Component> {
        self.components.first()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconnectConfig {
    /// Search radius around endpoints, voxels.
    pub search_radius: f64,
    /// Relaxed confidence threshold used to fill gaps; must stay below the
    /// primary threshold.
    pub relaxed_threshold: f64,
}

impl Default for ReconnectConfig {
    fn default() -> Self {
        ReconnectConfig {
            search_radius: 5.0,
            relaxed_threshold: 0.3,
        }
    }
}

/// Full post-processing options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocConfig {
    pub threshold: f64,
    pub reconnect: bool,
    #[serde(flatten)]
    pub reconnect_cfg: ReconnectConfig,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        PostprocConfig {
            threshold: 0.5,
            reconnect: true,
            reconnect_cfg: ReconnectConfig::default(),
        }
    }
}

impl PostprocConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(NvError::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.reconnect {
            if self.reconnect_cfg.search_radius <= 0.0 {
                return Err(NvError::Config("search_radius must be > 0".into()));
            }
            if !(self.reconnect_cfg.relaxed_threshold > 0.0
                && self.reconnect_cfg.relaxed_threshold < self.threshold)
            {
                return Err(NvError::Config(format!(
                    "relaxed_threshold {} must lie in (0, threshold {})",
                    self.reconnect_cfg.relaxed_threshold, self.threshold
                )));
            }
        }
        Ok(())
    }
}

/// Voxel true iff airway confidence strictly exceeds `t`.
pub fn threshold_map<T: Real>(maps: &ConfidenceMaps<T>, t: f64) -> Result<BinaryMask> {
    threshold_map_with_spacing(maps, t, [1.0, 1.0, 1.0])
}

/// Like [`threshold_map`] but stamps the given spacing onto the mask.
pub fn threshold_map_with_spacing<T: Real>(
    maps: &ConfidenceMaps<T>,
    t: f64,
    spacing: [f64; 3],
) -> Result<BinaryMask> {
    if !(t > 0.0 && t < 1.0) {
        return Err(NvError::Contract(format!("threshold {t} not in (0, 1)")));
    }
    let tt = T::of(t);
    BinaryMask::new(maps.airway.mapv(|v| v > tt), spacing)
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

/// 26-connectivity component labeling, components sorted by size descending.
pub fn connected_components(mask: &BinaryMask) -> ComponentSet {
    let (d, h, w) = mask.data.dim();
    let mut seen = Array3::from_elem(mask.data.dim(), false);
    let mut components: Vec<Component> = Vec::new();
    for ((z, y, x), &v) in mask.data.indexed_iter() {
        if !v || seen[[z, y, x]] {
            continue;
        }
        let seed = [z, y, x];
        let mut voxels = vec![seed];
        seen[seed] = true;
        let mut head = 0usize;
        while head < voxels.len() {
            let c = voxels[head];
            head += 1;
            for o in N26 {
                let (nz, ny, nx) = (c[0] as i64 + o[0], c[1] as i64 + o[1], c[2] as i64 + o[2]);
                if nz < 0 || ny < 0 || nx < 0 || nz >= d as i64 || ny >= h as i64 || nx >= w as i64
                {
                    continue;
                }
                let n = [nz as usize, ny as usize, nx as usize];
                if mask.data[n] && !seen[n] {
                    seen[n] = true;
                    voxels.push(n);
                }
            }
        }
        components.push(Component { voxels, seed });
    }
    components.sort_by(|a, b| b.len().cmp(&a.len()).then(a.seed.cmp(&b.seed)));
    ComponentSet { components }
}

fn mask_from_component(c: &Component, dim: (usize, usize, usize), spacing: [f64; 3]) -> BinaryMask {
    let mut data = Array3::from_elem(dim, false);
    for &v in &c.voxels {
        data[v] = true;
    }
    BinaryMask { data, spacing }
}

/// Reconnects broken branches to the largest shape.
///
/// For every skeleton endpoint of the main shape, any other shape within the
/// search ball gets merged and ball voxels whose airway confidence exceeds
/// the relaxed threshold are added to bridge the gap. The sweep repeats until
/// no endpoint merges anything; the result is reduced to one 26-connected
/// component.
pub fn reconnect_branches<T: Real>(
    maps: &ConfidenceMaps<T>,
    comps: &ComponentSet,
    cfg: &ReconnectConfig,
    spacing: [f64; 3],
) -> Result<BinaryMask> {
    let shape = maps.shape();
    let dim = (shape[0], shape[1], shape[2]);
    let Some(largest) = comps.largest() else {
        return BinaryMask::new(Array3::from_elem(dim, false), spacing);
    };
    let mut main = mask_from_component(largest, dim, spacing);
    let mut pool: Vec<Component> = comps.components[1..].to_vec();
    let relax = T::of(cfg.relaxed_threshold);
    let r = cfg.search_radius;
    let r2 = r * r;
    let ri = r.ceil() as i64;
    loop {
        let skel = skeletonize(&main, &SkeletonConfig::default());
        let mut endpoints = skel.endpoints.clone();
        endpoints.sort_unstable();
        let mut merged_any = false;
        for e in endpoints {
            let mut keep: Vec<Component> = Vec::with_capacity(pool.len());
            let mut hit = false;
            for c in pool.drain(..) {
                let close = c.voxels.iter().any(|&v| {
                    let dz = v[0] as f64 - e[0] as f64;
                    let dy = v[1] as f64 - e[1] as f64;
                    let dx = v[2] as f64 - e[2] as f64;
                    dz * dz + dy * dy + dx * dx <= r2
                });
                if close {
                    for &v in &c.voxels {
                        main.data[v] = true;
                    }
                    hit = true;
                } else {
                    keep.push(c);
                }
            }
            pool = keep;
            if !hit {
                continue;
            }
            merged_any = true;
            // Fill the gap: relax the threshold inside the ball.
            for dz in -ri..=ri {
                for dy in -ri..=ri {
                    for dx in -ri..=ri {
                        if (dz * dz + dy * dy + dx * dx) as f64 > r2 {
                            continue;
                        }
                        let (nz, ny, nx) = (e[0] as i64 + dz, e[1] as i64 + dy, e[2] as i64 + dx);
                        if nz < 0
                            || ny < 0
                            || nx < 0
                            || nz >= dim.0 as i64
                            || ny >= dim.1 as i64
                            || nx >= dim.2 as i64
                        {
                            continue;
                        }
                        let v = [nz as usize, ny as usize, nx as usize];
                        if maps.airway[v] > relax {
                            main.data[v] = true;
                        }
                    }
                }
            }
        }
        if !merged_any {
            break;
        }
    }
    // Gap filling is best-effort; anything that stayed disconnected from the
    // main shape is dropped so exactly one component remains.
    let final_comps = connected_components(&main);
    match final_comps.largest() {
        Some(c) => Ok(mask_from_component(c, dim, spacing)),
        None => BinaryMask::new(Array3::from_elem(dim, false), spacing),
    }
}

/// Threshold, keep the largest shape, reconnect nearby fragments.
pub fn full_postprocess<T: Real>(
    maps: &ConfidenceMaps<T>,
    cfg: &PostprocConfig,
    spacing: [f64; 3],
) -> Result<BinaryMask> {
    cfg.validate()?;
    let mask = threshold_map_with_spacing(maps, cfg.threshold, spacing)?;
    let comps = connected_components(&mask);
    if !cfg.reconnect {
        let dim = mask.data.dim();
        return match comps.largest() {
            Some(c) => Ok(mask_from_component(c, dim, spacing)),
            None => BinaryMask::new(Array3::from_elem(dim, false), spacing),
        };
    }
    reconnect_branches(maps, &comps, &cfg.reconnect_cfg, spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn maps_from(airway: Array3<f64>) -> ConfidenceMaps<f64> {
        let background = airway.mapv(|v| 1.0 - v);
        ConfidenceMaps::new(airway, background).unwrap()
    }

    #[test]
    fn threshold_is_strict() {
        let maps = maps_from(Array3::from_elem((3, 3, 3), 0.5));
        let m = threshold_map(&maps, 0.5).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn higher_threshold_masks_are_subsets() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let maps = maps_from(Array3::from_shape_fn((6, 6, 6), |_| rng.gen_range(0.0..1.0)));
        let m5 = threshold_map(&maps, 0.5).unwrap();
        let m7 = threshold_map(&maps, 0.7).unwrap();
        for (a, b) in m7.data.iter().zip(m5.data.iter()) {
            assert!(!a | b, "0.7 mask must be a subset of 0.5 mask");
        }
    }

    fn cube_at(m: &mut Array3<bool>, corner: [usize; 3], size: usize) {
        for z in corner[0]..corner[0] + size {
            for y in corner[1]..corner[1] + size {
                for x in corner[2]..corner[2] + size {
                    m[[z, y, x]] = true;
                }
            }
        }
    }

    /// Recursive flood-fill oracle, independent of the queue-based labeling.
    fn brute_components(mask: &BinaryMask) -> Vec<usize> {
        fn fill(m: &Array3<bool>, seen: &mut Array3<bool>, p: [usize; 3]) -> usize {
            let (d, h, w) = m.dim();
            let mut n = 1;
            seen[p] = true;
            for o in N26 {
                let (nz, ny, nx) = (p[0] as i64 + o[0], p[1] as i64 + o[1], p[2] as i64 + o[2]);
                if nz < 0 || ny < 0 || nx < 0 || nz >= d as i64 || ny >= h as i64 || nx >= w as i64
                {
                    continue;
                }
                let q = [nz as usize, ny as usize, nx as usize];
                if m[q] && !seen[q] {
                    n += fill(m, seen, q);
                }
            }
            n
        }
        let mut seen = Array3::from_elem(mask.data.dim(), false);
        let mut sizes = Vec::new();
        for ((z, y, x), &v) in mask.data.indexed_iter() {
            if v && !seen[[z, y, x]] {
                sizes.push(fill(&mask.data, &mut seen, [z, y, x]));
            }
        }
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        sizes
    }

    #[test]
    fn two_cubes_sorted_by_size() {
        let mut m = Array3::from_elem((12, 12, 12), false);
        cube_at(&mut m, [1, 1, 1], 3); // 27 voxels
        cube_at(&mut m, [8, 8, 8], 2); // 8 voxels
        let mask = BinaryMask::new(m, [1.0; 3]).unwrap();
        let cs = connected_components(&mask);
        assert_eq!(cs.components.len(), 2);
        assert_eq!(cs.components[0].len(), 27);
        assert_eq!(cs.components[1].len(), 8);
        assert_eq!(cs.largest().unwrap().seed, [1, 1, 1]);
        let brute = brute_components(&mask);
        let got: Vec<usize> = cs.components.iter().map(|c| c.len()).collect();
        assert_eq!(got, brute);
    }

    #[test]
    fn single_voxel_component() {
        let mut m = Array3::from_elem((3, 3, 3), false);
        m[[1, 1, 1]] = true;
        let cs = connected_components(&BinaryMask::new(m, [1.0; 3]).unwrap());
        assert_eq!(cs.components.len(), 1);
        assert_eq!(cs.components[0].len(), 1);
    }

    #[test]
    fn diagonal_voxels_are_one_component_under_26_connectivity() {
        let mut m = Array3::from_elem((4, 4, 4), false);
        m[[0, 0, 0]] = true;
        m[[1, 1, 1]] = true;
        m[[2, 2, 2]] = true;
        let cs = connected_components(&BinaryMask::new(m, [1.0; 3]).unwrap());
        assert_eq!(cs.components.len(), 1);
    }

    #[test]
    fn tie_break_is_lowest_seed() {
        let mut m = Array3::from_elem((8, 8, 8), false);
        cube_at(&mut m, [4, 4, 4], 2);
        cube_at(&mut m, [0, 0, 0], 2);
        let cs = connected_components(&BinaryMask::new(m, [1.0; 3]).unwrap());
        assert_eq!(cs.components[0].seed, [0, 0, 0]);
    }

    #[test]
    fn reconnect_without_candidates_returns_largest_unchanged() {
        let mut a = Array3::from_elem((10, 10, 10), 0.0);
        for z in 2..8 {
            a[[z, 5, 5]] = 0.9;
        }
        let maps = maps_from(a);
        let mask = threshold_map(&maps, 0.5).unwrap();
        let comps = connected_components(&mask);
        let out =
            reconnect_branches(&maps, &comps, &ReconnectConfig::default(), [1.0; 3]).unwrap();
        assert_eq!(out.data, mask.data);
    }

    /// The worked two-voxel-gap case: a tube, a fragment two voxels away,
    /// gap confidences 0.4, primary threshold 0.5, relaxed 0.3, radius 5.
    #[test]
    fn two_voxel_gap_reconnects_into_single_component() {
        let mut a = Array3::from_elem((24, 9, 9), 0.0);
        for z in 2..12 {
            a[[z, 4, 4]] = 0.9; // main tube
        }
        a[[12, 4, 4]] = 0.4; // gap
        a[[13, 4, 4]] = 0.4; // gap
        for z in 14..20 {
            a[[z, 4, 4]] = 0.8; // fragment
        }
        let maps = maps_from(a);
        let mask = threshold_map(&maps, 0.5).unwrap();
        let comps = connected_components(&mask);
        assert_eq!(comps.components.len(), 2);
        let cfg = ReconnectConfig {
            search_radius: 5.0,
            relaxed_threshold: 0.3,
        };
        let out = reconnect_branches(&maps, &comps, &cfg, [1.0; 3]).unwrap();
        let cs = connected_components(&out);
        assert_eq!(cs.components.len(), 1);
        assert!(out.data[[12, 4, 4]] && out.data[[13, 4, 4]], "gap filled");
        assert!(out.data[[15, 4, 4]], "fragment merged");
    }

    #[test]
    fn distant_fragments_are_discarded() {
        let mut a = Array3::from_elem((30, 9, 9), 0.0);
        for z in 2..10 {
            a[[z, 4, 4]] = 0.9;
        }
        for z in 22..28 {
            a[[z, 4, 4]] = 0.9; // far beyond R = 5 of any endpoint
        }
        let maps = maps_from(a);
        let mask = threshold_map(&maps, 0.5).unwrap();
        let comps = connected_components(&mask);
        let out =
            reconnect_branches(&maps, &comps, &ReconnectConfig::default(), [1.0; 3]).unwrap();
        assert!(!out.data[[23, 4, 4]]);
        assert_eq!(connected_components(&out).components.len(), 1);
    }

    fn random_blobby_maps(seed: u64, shape: (usize, usize, usize)) -> ConfidenceMaps<f64> {
        // A few smoothed random blobs so thresholding yields real components.
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut a = Array3::from_elem(shape, 0.0f64);
        for _ in 0..6 {
            let c = [
                rng.gen_range(0.0..shape.0 as f64),
                rng.gen_range(0.0..shape.1 as f64),
                rng.gen_range(0.0..shape.2 as f64),
            ];
            let r = rng.gen_range(1.5..4.0);
            let peak = rng.gen_range(0.55..1.0);
            for ((z, y, x), v) in a.indexed_iter_mut() {
                let d2 = (z as f64 - c[0]).powi(2)
                    + (y as f64 - c[1]).powi(2)
                    + (x as f64 - c[2]).powi(2);
                let contrib = peak * (-d2 / (2.0 * r * r)).exp();
                *v = (*v + contrib).min(1.0);
            }
        }
        maps_from(a)
    }

    #[test]
    fn full_postprocess_always_yields_single_component() {
        for seed in 0..20 {
            let maps = random_blobby_maps(seed, (16, 16, 16));
            let out = full_postprocess(&maps, &PostprocConfig::default(), [1.0; 3]).unwrap();
            let n = connected_components(&out).components.len();
            assert!(n <= 1, "seed {seed}: {n} components");
        }
    }

    #[test]
    fn full_postprocess_is_idempotent() {
        for seed in 0..20 {
            let maps = random_blobby_maps(seed, (16, 16, 16));
            let cfg = PostprocConfig::default();
            let once = full_postprocess(&maps, &cfg, [1.0; 3]).unwrap();
            // Re-apply on the binary output taken as confidences.
            let as_maps = ConfidenceMaps::new(
                once.data.mapv(|b| f64::from(b)),
                once.data.mapv(|b| 1.0 - f64::from(b)),
            )
            .unwrap();
            let twice = full_postprocess(&as_maps, &cfg, [1.0; 3]).unwrap();
            assert_eq!(once.data, twice.data, "seed {seed}");
        }
    }

    #[test]
    fn output_bounded_by_relaxed_threshold_support() {
        // Superset of the largest shape; subset of voxels above the relaxed
        // threshold.
        for seed in 0..10 {
            let maps = random_blobby_maps(seed + 100, (14, 14, 14));
            let cfg = PostprocConfig::default();
            let mask = threshold_map(&maps, cfg.threshold).unwrap();
            let comps = connected_components(&mask);
            let Some(largest) = comps.largest() else {
                continue;
            };
            let out = full_postprocess(&maps, &cfg, [1.0; 3]).unwrap();
            let out_set: std::collections::HashSet<[usize; 3]> = out
                .data
                .indexed_iter()
                .filter(|(_, &v)| v)
                .map(|((z, y, x), _)| [z, y, x])
                .collect();
            for &v in &largest.voxels {
                assert!(out_set.contains(&v), "seed {seed}: lost main voxel {v:?}");
            }
            for v in &out_set {
                assert!(
                    maps.airway[*v] > cfg.reconnect_cfg.relaxed_threshold,
                    "seed {seed}: voxel {v:?} below relaxed threshold"
                );
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_thresholds() {
        let mut cfg = PostprocConfig::default();
        cfg.reconnect_cfg.relaxed_threshold = 0.6;
        assert!(cfg.validate().is_err());
        let cfg = PostprocConfig {
            threshold: 1.2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
