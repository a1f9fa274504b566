//! CGLS against an independent dense normal-equations oracle, the
//! minimum-norm property, and the partition bookkeeping.

use ghostkit_core::acquisition::{forward_project, generate_masks, BucketVector, MaskSet};
use ghostkit_core::image::Image;
use ghostkit_core::linear::{
    cgls_reconstruct, data_residual, nullspace_probe, permuted_splits, split_realizations,
    sub_reconstruct_all, CglsConfig,
};
use ghostkit_core::rng::Rng64;
use proptest::prelude::*;

fn random_masks(m: usize, h: usize, w: usize, seed: u64) -> MaskSet {
    let mut rng = Rng64::new(seed);
    let data = (0..m * h * w).map(|_| rng.uniform()).collect();
    MaskSet {
        count: m,
        height: h,
        width: w,
        data,
    }
}

/// Brute-force oracle: form W^T W and W^T y densely and solve by Gaussian
/// elimination with partial pivoting. Only valid for full-column-rank W.
fn dense_normal_solve(masks: &MaskSet, y: &[f64]) -> Vec<f64> {
    let n = masks.pixel_count();
    let m = masks.count;
    let mut ata = vec![0.0f64; n * n];
    let mut aty = vec![0.0f64; n];
    for r in 0..m {
        let row = masks.row(r);
        for i in 0..n {
            aty[i] += row[i] * y[r];
            for j in 0..n {
                ata[i * n + j] += row[i] * row[j];
            }
        }
    }
    // Gaussian elimination with partial pivoting
    let mut x = aty;
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if ata[r * n + col].abs() > ata[pivot * n + col].abs() {
                pivot = r;
            }
        }
        if pivot != col {
            for j in 0..n {
                ata.swap(col * n + j, pivot * n + j);
            }
            x.swap(col, pivot);
        }
        let diag = ata[col * n + col];
        assert!(diag.abs() > 1e-12, "oracle needs full column rank");
        for r in col + 1..n {
            let factor = ata[r * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                ata[r * n + j] -= factor * ata[col * n + j];
            }
            x[r] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        for j in col + 1..n {
            x[col] -= ata[col * n + j] * x[j];
        }
        x[col] /= ata[col * n + col];
    }
    x
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    num / den
}

#[test]
fn cgls_matches_dense_solver_on_overdetermined_systems() {
    // 50 random full-column-rank systems up to 32 unknowns
    let config = CglsConfig {
        max_iters: 400,
        tol: 1e-12,
    };
    for case in 0..50u64 {
        let n_side = 3 + (case % 3) as usize; // 9, 16 or 25 unknowns
        let n = n_side * n_side;
        let m = n + 8 + (case % 5) as usize;
        let masks = random_masks(m, n_side, n_side, 100 + case);
        let mut rng = Rng64::new(500 + case);
        let y: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        let cgls = cgls_reconstruct(&masks, &BucketVector::clean_only(y.clone()), &config).unwrap();
        let oracle = dense_normal_solve(&masks, &y);
        let err = rel_err(&cgls.pixels, &oracle);
        assert!(err < 1e-6, "case {case}: rel err {err:.3e}");
    }
}

#[test]
fn cgls_underdetermined_solution_has_minimum_norm() {
    // 8 equations, 16 unknowns: perturbing along any kernel vector must not
    // shrink the norm, i.e. the solution is orthogonal to ker W.
    let masks = random_masks(8, 4, 4, 42);
    let mut rng = Rng64::new(43);
    let y: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
    let config = CglsConfig {
        max_iters: 300,
        tol: 1e-13,
    };
    let x = cgls_reconstruct(&masks, &BucketVector::clean_only(y.clone()), &config).unwrap();

    // project a random vector onto ker W by subtracting the CGLS solution
    // of W z = W v; the leftover is in the kernel up to solver tolerance
    let v: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
    let wv = forward_project(&masks, &Image::new(4, 4, v.clone()).unwrap()).unwrap();
    let v_range = cgls_reconstruct(&masks, &wv, &config).unwrap();
    let kernel: Vec<f64> = v
        .iter()
        .zip(v_range.pixels.iter())
        .map(|(a, b)| a - b)
        .collect();
    let kernel_norm = kernel.iter().map(|k| k * k).sum::<f64>().sqrt();
    assert!(kernel_norm > 1e-6, "degenerate kernel direction");

    // orthogonality <x, kernel> ~ 0 means no kernel step can reduce |x|
    let dot: f64 = x.pixels.iter().zip(kernel.iter()).map(|(a, b)| a * b).sum();
    let xnorm = x.pixels.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(
        dot.abs() / (xnorm * kernel_norm) < 1e-6,
        "solution has a kernel component: cos = {:.3e}",
        dot.abs() / (xnorm * kernel_norm)
    );
    for t in [-0.5, -0.1, 0.1, 0.5] {
        let shifted: f64 = x
            .pixels
            .iter()
            .zip(kernel.iter())
            .map(|(a, b)| (a + t * b) * (a + t * b))
            .sum::<f64>()
            .sqrt();
        assert!(shifted >= xnorm - 1e-9, "norm decreased along kernel");
    }
}

#[test]
fn cgls_residual_nonincreasing_over_iteration_budget() {
    let masks = random_masks(20, 5, 5, 7);
    let mut rng = Rng64::new(8);
    let y = BucketVector::clean_only((0..20).map(|_| rng.normal()).collect());
    let mut last = f64::INFINITY;
    for iters in [1, 2, 4, 8, 16, 32, 64] {
        let x = cgls_reconstruct(
            &masks,
            &y,
            &CglsConfig {
                max_iters: iters,
                tol: 1e-14,
            },
        )
        .unwrap();
        let r = data_residual(&masks, &y, &x);
        assert!(r <= last + 1e-10, "residual rose at {iters} iters: {r} > {last}");
        last = r;
    }
}

#[test]
fn cgls_permutation_equivariant() {
    let masks = random_masks(24, 4, 4, 11);
    let mut rng = Rng64::new(12);
    let y: Vec<f64> = (0..24).map(|_| rng.normal()).collect();
    let config = CglsConfig::default();
    let x1 = cgls_reconstruct(&masks, &BucketVector::clean_only(y.clone()), &config).unwrap();

    // reorder (mask, bucket) pairs identically
    let perm: Vec<usize> = (0..24).rev().collect();
    let masks2 = masks.subset(&perm);
    let y2: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
    let x2 = cgls_reconstruct(&masks2, &BucketVector::clean_only(y2), &config).unwrap();
    assert!(rel_err(&x1.pixels, &x2.pixels) < 1e-10);
}

#[test]
fn noiseless_full_data_beats_quarter_splits() {
    // more data -> better LS image on an undersampled system
    let masks = generate_masks(128, 12, 12, 3).unwrap();
    let mut phantom = Image::zeros(12, 12);
    for y in 3..9 {
        for x in 4..8 {
            phantom.set(y, x, 1.0);
        }
    }
    let buckets = forward_project(&masks, &phantom).unwrap();
    let config = CglsConfig {
        max_iters: 200,
        tol: 1e-12,
    };
    let full = cgls_reconstruct(&masks, &buckets, &config).unwrap();
    let subs = split_realizations(&masks, &buckets, 4, 5).unwrap();
    let sub_images = sub_reconstruct_all(&subs, &config).unwrap();
    let mse = |img: &Image| {
        img.pixels
            .iter()
            .zip(phantom.pixels.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    let full_err = mse(&full);
    for sub in &sub_images {
        assert!(
            mse(sub) > full_err,
            "a quarter split reconstructed better than the full set"
        );
    }
}

#[test]
fn nullspace_probe_zero_noise_full_rank() {
    let masks = random_masks(40, 4, 4, 21);
    let phantom = Image::new(4, 4, (0..16).map(|i| (i % 5) as f64 * 0.2).collect()).unwrap();
    let clean = forward_project(&masks, &phantom).unwrap();
    let buckets = BucketVector {
        values: clean.values.clone(),
        clean: Some(clean.values.clone()),
    };
    let subs = split_realizations(&masks, &buckets, 1, 2).unwrap();
    let config = CglsConfig {
        max_iters: 400,
        tol: 1e-13,
    };
    let recon = cgls_reconstruct(&subs[0].masks, &subs[0].buckets, &config).unwrap();
    let probe = nullspace_probe(&subs[0], &recon, &phantom, &config).unwrap();
    let vnorm: f64 = probe.nullspace_part.pixels.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tnorm: f64 = probe.noise_part.pixels.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(vnorm < 1e-7, "v_k should vanish, got {vnorm:.3e}");
    assert!(tnorm < 1e-10, "t_k should vanish, got {tnorm:.3e}");
}

#[test]
fn nullspace_probe_underdetermined_annihilation() {
    // 12 realizations for 36 pixels: x_k - x* - t_k lies in ker W_k
    let masks = generate_masks(12, 6, 6, 31).unwrap();
    let mut phantom = Image::zeros(6, 6);
    for i in [7, 8, 13, 14, 21, 22] {
        phantom.pixels[i] = 1.0;
    }
    let clean = forward_project(&masks, &phantom).unwrap();
    let buckets = BucketVector {
        values: clean.values.clone(),
        clean: Some(clean.values.clone()),
    };
    let subs = split_realizations(&masks, &buckets, 1, 4).unwrap();
    let config = CglsConfig {
        max_iters: 600,
        tol: 1e-14,
    };
    let recon = cgls_reconstruct(&subs[0].masks, &subs[0].buckets, &config).unwrap();
    let probe = nullspace_probe(&subs[0], &recon, &phantom, &config).unwrap();
    assert!(
        probe.annihilation_ratio < 1e-8,
        "W_k v_k should vanish: ratio {:.3e}",
        probe.annihilation_ratio
    );
}

#[test]
fn nullspace_probe_noise_only_equals_noise_part() {
    // x* = 0: the sub-reconstruction is exactly t_k by linearity
    let masks = random_masks(30, 4, 4, 51);
    let zero = Image::zeros(4, 4);
    let clean = forward_project(&masks, &zero).unwrap();
    let mut rng = Rng64::new(52);
    let noisy: Vec<f64> = clean.values.iter().map(|_| rng.normal() * 0.1).collect();
    let buckets = BucketVector {
        values: noisy,
        clean: Some(clean.values.clone()),
    };
    let subs = split_realizations(&masks, &buckets, 2, 6).unwrap();
    let config = CglsConfig {
        max_iters: 400,
        tol: 1e-13,
    };
    let recon = cgls_reconstruct(&subs[0].masks, &subs[0].buckets, &config).unwrap();
    let probe = nullspace_probe(&subs[0], &recon, &zero, &config).unwrap();
    for (x, t) in recon.pixels.iter().zip(probe.noise_part.pixels.iter()) {
        assert!((x - t).abs() < 1e-8);
    }
}

#[test]
fn distinct_permutations_rarely_collide() {
    // over 100 seeds, no two of the first two permutations group identically
    let masks = generate_masks(16, 4, 4, 77).unwrap();
    let y = BucketVector::clean_only(vec![0.0; 16]);
    let mut collisions = 0;
    for seed in 0..100u64 {
        let (plan, _) = permuted_splits(&masks, &y, 4, 2, seed).unwrap();
        let grouping = |p: usize| {
            let mut groups: Vec<Vec<usize>> = plan.indices[p]
                .iter()
                .map(|g| {
                    let mut g = g.clone();
                    g.sort_unstable();
                    g
                })
                .collect();
            groups.sort();
            groups
        };
        if grouping(0) == grouping(1) {
            collisions += 1;
        }
    }
    assert_eq!(collisions, 0, "{collisions} of 100 seeds collided");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_coverage_and_disjointness(
        m in 2usize..40,
        k in 1usize..8,
        p in 1usize..4,
        seed in 0u64..1000,
    ) {
        prop_assume!(k <= m);
        let masks = random_masks(m, 2, 3, seed.wrapping_add(1));
        let y = BucketVector::clean_only(vec![0.0; m]);
        let (plan, subs) = permuted_splits(&masks, &y, k, p, seed).unwrap();
        prop_assert_eq!(subs.len(), k * p);
        for perm in 0..p {
            let mut seen: Vec<usize> = plan.indices[perm].iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..m).collect::<Vec<_>>());
            let sizes: Vec<usize> = plan.indices[perm].iter().map(|s| s.len()).collect();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "split sizes differ by more than 1: {:?}", sizes);
        }
    }
}
