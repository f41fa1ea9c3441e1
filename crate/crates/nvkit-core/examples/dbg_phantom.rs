use nvkit_core::metrics::{skeletonize, SkeletonConfig};
use nvkit_core::phantom::{generate, PhantomConfig};
use std::time::Instant;

fn check(tag: &str, n_seeds: u64, cfg: &PhantomConfig) {
    let mut worst: f64 = 0.0;
    let mut bad = 0;
    let t0 = Instant::now();
    for seed in 0..n_seeds {
        let mut c2 = cfg.clone();
        c2.seed = seed;
        let case = generate::<f32>(&c2).unwrap();
        let skel = skeletonize(&case.mask, &SkeletonConfig::default());
        let rel = (skel.total_length_mm() - case.meta.total_length_mm) / case.meta.total_length_mm;
        if rel.abs() > worst.abs() { worst = rel; }
        if skel.branch_count() != case.meta.branch_count || skel.max_generation() != case.meta.max_generation {
            bad += 1;
            println!("  {tag} seed {seed}: count {} vs {} maxgen {} vs {}", skel.branch_count(), case.meta.branch_count, skel.max_generation(), case.meta.max_generation);
        }
    }
    println!("{tag}: bad {bad}/{n_seeds} worst_len_rel {:+.3} ({:.1}s)", worst, t0.elapsed().as_secs_f32());
}

fn main() {
    check("oracle-gen2", 16, &PhantomConfig {
        max_generation: 2, volume_shape: [96, 112, 112], root_radius: 2.5, radius_ratio: 0.75,
        length_ratio: 0.9, branch_angle: 30.0, root_length: 30.0, asymmetry: 0.08, noise_sigma: 0.0,
        ..Default::default() });
    check("oracle-gen3b", 16, &PhantomConfig {
        max_generation: 3, volume_shape: [96, 160, 160], root_radius: 3.0, radius_ratio: 0.76,
        length_ratio: 0.85, branch_angle: 34.0, root_length: 26.0, asymmetry: 0.05, noise_sigma: 0.0,
        ..Default::default() });
    check("default64", 6, &PhantomConfig { max_generation: 3, volume_shape: [64, 128, 128], root_radius: 5.0, noise_sigma: 0.0, ..Default::default() });
}
