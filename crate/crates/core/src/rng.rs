//! Pinned pseudo-random number generation.
//!
//! Every randomized operation in the toolkit draws from this module so that
//! a (seed, stream) pair reproduces the identical byte stream on any host.
//! The algorithms are fixed as part of the file-format/reproducibility
//! contract and must not be swapped for library generators:
//!
//! * core generator: xoshiro256** (Blackman & Vigna), state seeded by four
//!   successive splitmix64 outputs starting from
//!   `seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)`
//! * `uniform()`: 53 high bits of `next_u64`, mapped to `[0, 1)`
//! * `normal()`: Box-Muller on `(1 - u1, u2)`, second variate cached
//! * `poisson(lambda)`: sequential inversion for `lambda < 10`, Hörmann's
//!   PTRS transformed rejection otherwise

/// splitmix64 step; used for seeding only.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xoshiro256** generator with a cached Box-Muller variate.
#[derive(Clone, Debug)]
pub struct Rng64 {
    s: [u64; 4],
    spare_normal: Option<f64>,
}

impl Rng64 {
    pub fn new(seed: u64) -> Self {
        Self::from_seed_stream(seed, 0)
    }

    /// Independent stream `stream` of the generator family identified by `seed`.
    pub fn from_seed_stream(seed: u64, stream: u64) -> Self {
        let mut sm = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut s = [0u64; 4];
        for slot in &mut s {
            *slot = splitmix64(&mut sm);
        }
        if s == [0, 0, 0, 0] {
            s[0] = 1; // xoshiro must not start from the all-zero state
        }
        Rng64 {
            s,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform double in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n); uses the modulo reduction (documented,
    /// bias < n / 2^64, irrelevant at our scales).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller; consumes two uniforms per pair.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // in (0, 1], keeps ln finite
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Poisson draw with mean `lambda` (>= 0, finite).
    pub fn poisson(&mut self, lambda: f64) -> u64 {
        assert!(
            lambda.is_finite() && lambda >= 0.0,
            "poisson mean must be finite and nonnegative, got {lambda}"
        );
        if lambda == 0.0 {
            0
        } else if lambda < 10.0 {
            self.poisson_inversion(lambda)
        } else {
            self.poisson_ptrs(lambda)
        }
    }

    fn poisson_inversion(&mut self, lambda: f64) -> u64 {
        let limit = (-lambda).exp();
        let mut k = 0u64;
        let mut p = 1.0;
        loop {
            p *= self.uniform();
            if p <= limit {
                return k;
            }
            k += 1;
        }
    }

    /// PTRS transformed rejection (Hörmann 1993), valid for lambda >= 10.
    fn poisson_ptrs(&mut self, lambda: f64) -> u64 {
        let slam = lambda.sqrt();
        let loglam = lambda.ln();
        let b = 0.931 + 2.53 * slam;
        let a = -0.059 + 0.02483 * b;
        let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        let v_r = 0.9277 - 3.6224 / (b - 2.0);
        loop {
            let u = self.uniform() - 0.5;
            let v = self.uniform();
            let us = 0.5 - u.abs();
            let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
            if us >= 0.07 && v <= v_r {
                return k as u64;
            }
            if k < 0.0 || (us < 0.013 && v > us) {
                continue;
            }
            let lhs = (v * inv_alpha / (a / (us * us) + b)).ln();
            let rhs = k * loglam - lambda - ln_factorial(k as u64);
            if lhs <= rhs {
                return k as u64;
            }
        }
    }
}

/// ln(k!) — exact table below 16, Stirling series above (error < 1e-12).
pub fn ln_factorial(k: u64) -> f64 {
    const TABLE: [f64; 16] = [
        0.0,
        0.0,
        0.6931471805599453,
        1.791759469228055,
        3.1780538303479458,
        4.787491742782046,
        6.579251212010101,
        8.525161361065415,
        10.60460290274525,
        12.801827480081469,
        15.104412573075516,
        17.502307845873887,
        19.987214495661885,
        22.552163853123425,
        25.19122118273868,
        27.89927138384089,
    ];
    if k < 16 {
        return TABLE[k as usize];
    }
    let x = (k + 1) as f64;
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln()
        + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 / 1260.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed_and_stream() {
        let mut a = Rng64::from_seed_stream(42, 3);
        let mut b = Rng64::from_seed_stream(42, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng64::from_seed_stream(42, 4);
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn uniform_range_and_mean() {
        let mut rng = Rng64::new(7);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 4.0 / (12.0f64 * n as f64).sqrt());
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng64::new(11);
        let n = 200_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.normal();
            s1 += z;
            s2 += z * z;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn poisson_moments_both_regimes() {
        // inversion (lambda = 4) and PTRS (lambda = 40)
        for &lambda in &[4.0, 40.0] {
            let mut rng = Rng64::new(23);
            let n = 100_000;
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let k = rng.poisson(lambda) as f64;
                s1 += k;
                s2 += k * k;
            }
            let mean = s1 / n as f64;
            let var = s2 / n as f64 - mean * mean;
            let se = (lambda / n as f64).sqrt();
            assert!((mean - lambda).abs() < 4.0 * se, "mean {mean} vs {lambda}");
            assert!((var - lambda).abs() < 0.05 * lambda, "var {var} vs {lambda}");
        }
    }

    #[test]
    fn poisson_zero_is_zero() {
        let mut rng = Rng64::new(1);
        for _ in 0..100 {
            assert_eq!(rng.poisson(0.0), 0);
        }
    }

    #[test]
    fn ln_factorial_matches_direct_product() {
        for k in 0..40u64 {
            let direct: f64 = (1..=k).map(|i| (i as f64).ln()).sum();
            assert!(
                (ln_factorial(k) - direct).abs() < 1e-10,
                "k={k}: {} vs {direct}",
                ln_factorial(k)
            );
        }
    }
}
