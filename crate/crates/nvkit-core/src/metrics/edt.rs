//! Exact squared Euclidean distance transform (separable lower-envelope
//! method, one 1D pass per axis).

use ndarray::Array3;

const INF: f64 = 1e20;

/// 1D squared distance transform of a sampled function.
fn dt1d(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, 0.0);
    let mut v = vec![0usize; n]; // parabola sites
    let mut z = vec![0.0f64; n + 1]; // envelope boundaries
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = INF;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        out[q] = d * d + f[v[k]];
    }
}

/// Squared distance (in voxel units) from every object voxel to the nearest
/// background voxel; background voxels get 0. Distances are measured inside
/// the grid only.
pub fn squared_edt(mask: &Array3<bool>) -> Array3<f64> {
    let (d, h, w) = mask.dim();
    let mut g = mask.mapv(|b| if b { INF } else { 0.0 });
    let mut line: Vec<f64> = Vec::new();
    let mut out: Vec<f64> = Vec::new();
    // x axis
    for z in 0..d {
        for y in 0..h {
            line.clear();
            line.extend((0..w).map(|x| g[[z, y, x]]));
            dt1d(&line, &mut out);
            for x in 0..w {
                g[[z, y, x]] = out[x];
            }
        }
    }
    // y axis
    for z in 0..d {
        for x in 0..w {
            line.clear();
            line.extend((0..h).map(|y| g[[z, y, x]]));
            dt1d(&line, &mut out);
            for y in 0..h {
                g[[z, y, x]] = out[y];
            }
        }
    }
    // z axis
    for y in 0..h {
        for x in 0..w {
            line.clear();
            line.extend((0..d).map(|z| g[[z, y, x]]));
            dt1d(&line, &mut out);
            for z in 0..d {
                g[[z, y, x]] = out[z];
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn brute(mask: &Array3<bool>) -> Array3<f64> {
        let (d, h, w) = mask.dim();
        let bg: Vec<[i64; 3]> = mask
            .indexed_iter()
            .filter(|(_, &b)| !b)
            .map(|((z, y, x), _)| [z as i64, y as i64, x as i64])
            .collect();
        Array3::from_shape_fn((d, h, w), |(z, y, x)| {
            if !mask[[z, y, x]] {
                return 0.0;
            }
            bg.iter()
                .map(|p| {
                    let dz = p[0] - z as i64;
                    let dy = p[1] - y as i64;
                    let dx = p[2] - x as i64;
                    (dz * dz + dy * dy + dx * dx) as f64
                })
                .fold(1e20, f64::min)
        })
    }

    #[test]
    fn matches_brute_force_on_random_grids() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..5 {
            let mask = Array3::from_shape_fn((7, 6, 8), |_| rng.gen_bool(0.6));
            if mask.iter().all(|&b| b) {
                continue;
            }
            let got = squared_edt(&mask);
            let want = brute(&mask);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn center_of_cube_is_distance_to_face() {
        let mut mask = Array3::from_elem((9, 9, 9), false);
        for z in 2..7 {
            for y in 2..7 {
                for x in 2..7 {
                    mask[[z, y, x]] = true;
                }
            }
        }
        let g = squared_edt(&mask);
        assert_eq!(g[[4, 4, 4]], 9.0); // 3 voxels to the nearest background
        assert_eq!(g[[2, 4, 4]], 1.0);
        assert_eq!(g[[0, 0, 0]], 0.0);
    }
}
