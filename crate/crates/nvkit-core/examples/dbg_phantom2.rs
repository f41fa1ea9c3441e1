use nvkit_core::metrics::{skeletonize, thin, SkeletonConfig};
use nvkit_core::phantom::{generate, PhantomConfig};

fn main() {
    let cfg = PhantomConfig {
        max_generation: 3, volume_shape: [96, 160, 160], root_radius: 3.0, radius_ratio: 0.76,
        length_ratio: 0.85, branch_angle: 34.0, root_length: 26.0, asymmetry: 0.05, noise_sigma: 0.0,
        seed: 10, ..Default::default() };
    let case = generate::<f32>(&cfg).unwrap();
    let skel = skeletonize(&case.mask, &SkeletonConfig::default());
    println!("branch_points: {:?}", skel.branch_points);
    println!("endpoints near [65..68,70..72,61]:");
    for e in &skel.endpoints {
        if e[0] >= 60 && e[0] <= 72 && e[1] >= 64 && e[1] <= 78 {
            println!("  endpoint {e:?}");
        }
    }
    // raw thinned grid neighborhood dump around z 63..70, y 68..74, x 58..64
    let t = thin(&case.mask.data);
    for z in 62..=70 {
        for y in 67..=74 {
            for x in 57..=64 {
                if t[[z, y, x]] {
                    println!("skelvox [{z}, {y}, {x}]");
                }
            }
        }
    }
}
