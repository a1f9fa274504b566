use ghostkit_core::acquisition::*;

fn main() {
    for seed in [17u64, 18, 19, 20] {
        for size in [64usize, 100] {
            let phantom = generate_phantom(PhantomKind::Blobs, size, size, seed).unwrap();
            let m = size * size / 10;
            let masks = generate_masks(m, size, size, seed + 1).unwrap();
            let clean = forward_project(&masks, &phantom).unwrap();
            let noisy = apply_poisson(&clean, &NoiseModel::new(100.0, seed + 2).unwrap()).unwrap();
            let ratio = noise_fluctuation_ratio(&clean.values, &noisy.values);
            let fill = phantom.pixels.iter().filter(|&&v| v > 0.5).count() as f64 / (size*size) as f64;
            println!("seed {seed} size {size}: ratio {ratio:.2}% fill {fill:.3} mean_b {:.1}", clean.values.iter().sum::<f64>()/clean.values.len() as f64);
        }
    }
}
