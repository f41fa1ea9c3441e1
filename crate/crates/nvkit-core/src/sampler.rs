//! Fineness scoring of cuboids, the fineness-weighted sampling distribution,
//! and the iterative coarse/fine alternation schedule.
//!
//! A cuboid's fineness `t` is the fraction of its airway voxels that sit on
//! the airway surface (6-neighbor exposure). Thin high-generation branches
//! have high `t`, thick low-generation ones low `t`, so a distribution over
//! cuboids proportional to `t` focuses training on fine structures and the
//! inverse focuses on coarse ones.

use crate::error::{NvError, Result};
use ndarray::Array3;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Sampling emphasis for one training phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Probability proportional to fineness: focus on high generations.
    MoreHigh,
    /// Probability inversely proportional to fineness: focus on low generations.
    MoreLow,
    /// Uniform over cuboids.
    SameFrequency,
}

/// Weight assigned to airway-free cuboids (`t = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaRule {
    /// Fixed absolute weight.
    Absolute(f64),
    /// Fraction of the mean nonzero weight; keeps empty cuboids reachable
    /// without letting them dominate.
    MeanFraction(f64),
}

impl Default for DeltaRule {
    fn default() -> Self {
        DeltaRule::MeanFraction(0.01)
    }
}

/// How `beta` enters the nonzero-fineness weights.
///
/// `Linear` is the normalized form of the published proportionality rules;
/// after normalization a global `beta` rescale cancels, so `beta` only moves
/// mass between airway-free and airway-containing cuboids. `Power` treats
/// `beta` as a concentration exponent (`t^beta` / `t^-beta`), which is the
/// reading under which extreme fine-focused settings actually change the
/// sampled population; the strategy-comparison harness uses it for its
/// `beta != 1` arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Linear,
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Scale of the nonzero-fineness weights; must be > 0.
    pub beta: f64,
    /// Weight rule for airway-free cuboids; resolved value must be > 0.
    pub delta: DeltaRule,
    /// Active sampling emphasis.
    pub mode: Mode,
    /// Training steps per mode before the iterative schedule alternates.
    pub phase_length: usize,
    pub weighting: Weighting,
    /// Reproduces the literal published weight table, which assigns `beta`
    /// (not `delta`) to airway-free cuboids.
    pub literal_empty_beta: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            beta: 1.0,
            delta: DeltaRule::default(),
            mode: Mode::MoreHigh,
            phase_length: 1,
            weighting: Weighting::default(),
            literal_empty_beta: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(NvError::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        let d = match self.delta {
            DeltaRule::Absolute(d) | DeltaRule::MeanFraction(d) => d,
        };
        if !(d > 0.0 && d.is_finite()) {
            return Err(NvError::Config(format!("delta must be > 0, got {d}")));
        }
        if self.phase_length == 0 {
            return Err(NvError::Config("phase_length must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-cuboid unnormalized weights and normalized probabilities.
#[derive(Debug, Clone)]
pub struct SamplingTable {
    pub weights: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Fineness `t` of a label patch: the fraction of airway voxels with at
/// least one 6-neighbor that is background or out of bounds. Zero when the
/// patch contains no airway voxel.
pub fn compute_fineness(label: &Array3<bool>) -> f64 {
    let (d, h, w) = label.dim();
    let mut total = 0usize;
    let mut surface = 0usize;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !label[[z, y, x]] {
                    continue;
                }
                total += 1;
                let exposed = (z == 0 || !label[[z - 1, y, x]])
                    || (z + 1 >= d || !label[[z + 1, y, x]])
                    || (y == 0 || !label[[z, y - 1, x]])
                    || (y + 1 >= h || !label[[z, y + 1, x]])
                    || (x == 0 || !label[[z, y, x - 1]])
                    || (x + 1 >= w || !label[[z, y, x + 1]]);
                if exposed {
                    surface += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        surface as f64 / total as f64
    }
}

fn nonzero_weight(t: f64, cfg: &SamplerConfig) -> f64 {
    match (cfg.mode, cfg.weighting) {
        (Mode::SameFrequency, _) => 1.0,
        (Mode::MoreHigh, Weighting::Linear) => cfg.beta * t,
        (Mode::MoreLow, Weighting::Linear) => 1.0 / (cfg.beta * t),
        (Mode::MoreHigh, Weighting::Power) => t.powf(cfg.beta),
        (Mode::MoreLow, Weighting::Power) => t.powf(-cfg.beta),
    }
}

/// Builds the sampling distribution over cuboid fineness scores.
///
/// Every cuboid ends up with strictly positive probability; the airway-free
/// branch never divides by zero.
pub fn build_table(fineness: &[f64], cfg: &SamplerConfig) -> Result<SamplingTable> {
    cfg.validate()?;
    if fineness.is_empty() {
        return Err(NvError::Contract("at least one cuboid required".into()));
    }
    let mut weights = vec![0.0f64; fineness.len()];
    let mut nonzero_sum = 0.0;
    let mut nonzero_n = 0usize;
    for (i, &t) in fineness.iter().enumerate() {
        if t > 0.0 {
            let w = nonzero_weight(t, cfg);
            weights[i] = w;
            nonzero_sum += w;
            nonzero_n += 1;
        }
    }
    let empty_weight = if cfg.mode == Mode::SameFrequency {
        1.0
    } else if cfg.literal_empty_beta {
        cfg.beta
    } else {
        match cfg.delta {
            DeltaRule::Absolute(d) => d,
            DeltaRule::MeanFraction(f) => {
                if nonzero_n == 0 {
                    f
                } else {
                    f * nonzero_sum / nonzero_n as f64
                }
            }
        }
    };
    for (w, &t) in weights.iter_mut().zip(fineness) {
        if t <= 0.0 {
            *w = empty_weight;
        }
    }
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(NvError::Contract(format!(
            "weights do not form a distribution (sum {sum})"
        )));
    }
    let probs = weights.iter().map(|w| w / sum).collect();
    Ok(SamplingTable { weights, probs })
}

/// Draws `batch_size` cuboid indices i.i.d. with replacement.
pub fn draw_batch(table: &SamplingTable, batch_size: usize, rng: &mut impl Rng) -> Vec<usize> {
    let dist = WeightedIndex::new(&table.probs).expect("table probabilities are positive");
    (0..batch_size).map(|_| dist.sample(rng)).collect()
}

/// Training-phase strategy over sampling modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Strategy {
    /// Alternate focus between high and low generations every
    /// `phase_length` steps, starting on high.
    Iterative,
    /// Coarse focus first, fine focus after `switch_step`.
    FirstCoarseThenFine { switch_step: usize },
    /// Fine focus first, coarse after `switch_step`.
    FirstFineThenCoarse { switch_step: usize },
    SameFrequency,
    /// Fixed single-mode training.
    Fixed { mode: Mode },
}

/// Mode active at `step` under `strategy` with the config's phase length.
pub fn advance_schedule(strategy: &Strategy, cfg: &SamplerConfig, step: usize) -> Mode {
    match strategy {
        Strategy::Iterative => {
            if (step / cfg.phase_length.max(1)) % 2 == 0 {
                Mode::MoreHigh
            } else {
                Mode::MoreLow
            }
        }
        Strategy::FirstCoarseThenFine { switch_step } => {
            if step < *switch_step {
                Mode::MoreLow
            } else {
                Mode::MoreHigh
            }
        }
        Strategy::FirstFineThenCoarse { switch_step } => {
            if step < *switch_step {
                Mode::MoreHigh
            } else {
                Mode::MoreLow
            }
        }
        Strategy::SameFrequency => Mode::SameFrequency,
        Strategy::Fixed { mode } => *mode,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Naive reference: for every airway voxel enumerate all 6 neighbors.
    fn fineness_brute(label: &Array3<bool>) -> f64 {
        let (d, h, w) = label.dim();
        let offs: [[i64; 3]; 6] = [
            [1, 0, 0],
            [-1, 0, 0],
            [0, 1, 0],
            [0, -1, 0],
            [0, 0, 1],
            [0, 0, -1],
        ];
        let mut total = 0;
        let mut surf = 0;
        for z in 0..d as i64 {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    if !label[[z as usize, y as usize, x as usize]] {
                        continue;
                    }
                    total += 1;
                    let mut exposed = false;
                    for o in offs {
                        let (nz, ny, nx) = (z + o[0], y + o[1], x + o[2]);
                        if nz < 0
                            || ny < 0
                            || nx < 0
                            || nz >= d as i64
                            || ny >= h as i64
                            || nx >= w as i64
                            || !label[[nz as usize, ny as usize, nx as usize]]
                        {
                            exposed = true;
                            break;
                        }
                    }
                    if exposed {
                        surf += 1;
                    }
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            surf as f64 / total as f64
        }
    }

    #[test]
    fn fineness_empty_label_is_zero() {
        let label = Array3::from_elem((4, 4, 4), false);
        assert_eq!(compute_fineness(&label), 0.0);
    }

    #[test]
    fn fineness_single_voxel_is_one() {
        let mut label = Array3::from_elem((4, 4, 4), false);
        label[[2, 2, 2]] = true;
        assert_eq!(compute_fineness(&label), 1.0);
    }

    #[test]
    fn fineness_solid_cube_matches_brute_force() {
        // 3x3x3 solid cube inside a 5^3 patch: only the center voxel is interior.
        let mut label = Array3::from_elem((5, 5, 5), false);
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    label[[z, y, x]] = true;
                }
            }
        }
        assert_eq!(compute_fineness(&label), 26.0 / 27.0);
        assert_eq!(compute_fineness(&label), fineness_brute(&label));
    }

    #[test]
    fn fineness_counts_out_of_bounds_as_exposed() {
        let label = Array3::from_elem((2, 2, 2), true);
        assert_eq!(compute_fineness(&label), 1.0);
    }

    #[test]
    fn fineness_matches_brute_force_on_random_patches() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..20 {
            let label =
                Array3::from_shape_fn((6, 6, 6), |_| rand::Rng::gen_bool(&mut rng, 0.4));
            assert_eq!(compute_fineness(&label), fineness_brute(&label));
        }
    }

    #[test]
    fn table_more_high_normalizes() {
        let cfg = SamplerConfig::default();
        let t = build_table(&[0.1, 0.2], &cfg).unwrap();
        assert!((t.probs[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((t.probs[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn table_more_low_inverts() {
        let cfg = SamplerConfig {
            mode: Mode::MoreLow,
            ..Default::default()
        };
        let t = build_table(&[0.1, 0.2], &cfg).unwrap();
        assert!((t.weights[0] - 10.0).abs() < 1e-12);
        assert!((t.weights[1] - 5.0).abs() < 1e-12);
        assert!((t.probs[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((t.probs[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_cuboids_get_delta_in_both_modes_without_division_by_zero() {
        for mode in [Mode::MoreHigh, Mode::MoreLow] {
            let cfg = SamplerConfig {
                mode,
                delta: DeltaRule::Absolute(0.05),
                ..Default::default()
            };
            let t = build_table(&[0.5, 0.0], &cfg).unwrap();
            assert!((t.weights[1] - 0.05).abs() < 1e-12);
            assert!(t.probs.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn literal_empty_beta_switch() {
        let cfg = SamplerConfig {
            beta: 3.0,
            literal_empty_beta: true,
            ..Default::default()
        };
        let t = build_table(&[0.5, 0.0], &cfg).unwrap();
        assert!((t.weights[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn probabilities_sum_to_one_and_stay_positive() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let fineness: Vec<f64> = (0..100)
            .map(|i| {
                if i % 7 == 0 {
                    0.0
                } else {
                    rand::Rng::gen_range(&mut rng, 0.01..1.0)
                }
            })
            .collect();
        for mode in [Mode::MoreHigh, Mode::MoreLow, Mode::SameFrequency] {
            let cfg = SamplerConfig {
                mode,
                ..Default::default()
            };
            let t = build_table(&fineness, &cfg).unwrap();
            let sum: f64 = t.probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum {sum} mode {mode:?}");
            assert!(t.probs.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn ranking_reverses_between_modes() {
        let fineness = [0.11, 0.31, 0.17, 0.82, 0.44];
        let hi = build_table(
            &fineness,
            &SamplerConfig {
                mode: Mode::MoreHigh,
                ..Default::default()
            },
        )
        .unwrap();
        let lo = build_table(
            &fineness,
            &SamplerConfig {
                mode: Mode::MoreLow,
                ..Default::default()
            },
        )
        .unwrap();
        let rank = |p: &[f64]| {
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap());
            idx
        };
        let mut hi_rank = rank(&hi.probs);
        hi_rank.reverse();
        assert_eq!(hi_rank, rank(&lo.probs));
    }

    #[test]
    fn beta_cancels_for_nonzero_fineness_in_linear_weighting() {
        let fineness = [0.2, 0.5, 0.9];
        for mode in [Mode::MoreHigh, Mode::MoreLow] {
            let p1 = build_table(
                &fineness,
                &SamplerConfig {
                    beta: 1.0,
                    mode,
                    ..Default::default()
                },
            )
            .unwrap();
            let p9 = build_table(
                &fineness,
                &SamplerConfig {
                    beta: 9.0,
                    mode,
                    ..Default::default()
                },
            )
            .unwrap();
            for (a, b) in p1.probs.iter().zip(&p9.probs) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn power_weighting_concentrates_with_beta() {
        let fineness = [0.3, 0.9];
        let sharp = build_table(
            &fineness,
            &SamplerConfig {
                beta: 10.0,
                weighting: Weighting::Power,
                ..Default::default()
            },
        )
        .unwrap();
        let mild = build_table(
            &fineness,
            &SamplerConfig {
                beta: 1.0,
                weighting: Weighting::Power,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(sharp.probs[1] > 0.999);
        assert!((mild.probs[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_cuboid_table_always_drawn() {
        let t = build_table(&[0.4], &SamplerConfig::default()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(draw_batch(&t, 50, &mut rng).iter().all(|&i| i == 0));
    }

    #[test]
    fn draw_frequencies_match_probabilities() {
        let t = build_table(&[0.1, 0.2], &SamplerConfig::default()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let draws = draw_batch(&t, 300_000, &mut rng);
        let f0 = draws.iter().filter(|&&i| i == 0).count() as f64 / draws.len() as f64;
        assert!((f0 - 1.0 / 3.0).abs() < 0.01, "f0 {f0}");
    }

    #[test]
    fn same_frequency_is_uniform() {
        let cfg = SamplerConfig {
            mode: Mode::SameFrequency,
            ..Default::default()
        };
        let t = build_table(&[0.0, 0.3, 0.6, 0.9], &cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let draws = draw_batch(&t, 100_000, &mut rng);
        for i in 0..4 {
            let f = draws.iter().filter(|&&d| d == i).count() as f64 / draws.len() as f64;
            assert!((f - 0.25).abs() < 0.01, "index {i} freq {f}");
        }
    }

    #[test]
    fn iterative_schedule_alternates() {
        let cfg = SamplerConfig {
            phase_length: 100,
            ..Default::default()
        };
        let s = Strategy::Iterative;
        assert_eq!(advance_schedule(&s, &cfg, 0), Mode::MoreHigh);
        assert_eq!(advance_schedule(&s, &cfg, 99), Mode::MoreHigh);
        assert_eq!(advance_schedule(&s, &cfg, 100), Mode::MoreLow);
        assert_eq!(advance_schedule(&s, &cfg, 199), Mode::MoreLow);
        assert_eq!(advance_schedule(&s, &cfg, 200), Mode::MoreHigh);
    }

    #[test]
    fn staged_strategies_switch_once() {
        let cfg = SamplerConfig::default();
        let s = Strategy::FirstCoarseThenFine { switch_step: 50 };
        let modes: Vec<Mode> = (0..100).map(|i| advance_schedule(&s, &cfg, i)).collect();
        let switches = modes.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(switches, 1);
        assert_eq!(modes[0], Mode::MoreLow);
        assert_eq!(modes[99], Mode::MoreHigh);
    }

    #[test]
    fn fixed_fine_beta10_is_constructible() {
        let cfg = SamplerConfig {
            beta: 10.0,
            weighting: Weighting::Power,
            ..Default::default()
        };
        let s = Strategy::Fixed {
            mode: Mode::MoreHigh,
        };
        assert_eq!(advance_schedule(&s, &cfg, 1234), Mode::MoreHigh);
        assert!(cfg.validate().is_ok());
    }
}
