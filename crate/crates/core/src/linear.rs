//! Least-squares reconstruction via CGLS and the realization
//! split/permutation bookkeeping used by the self-supervised engines.

use crate::acquisition::{BucketVector, MaskSet};
use crate::error::{GhostError, Result};
use crate::image::Image;
use crate::rng::Rng64;
use rayon::prelude::*;

const STREAM_SPLIT: u64 = 0x5350_4c54_0000_0000; // "SPLT" << 32

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct CglsConfig {
    pub max_iters: usize,
    /// Relative tolerance on the normal-equations residual |W^T r|.
    pub tol: f64,
}

impl Default for CglsConfig {
    fn default() -> Self {
        CglsConfig {
            max_iters: 100,
            tol: 1e-8,
        }
    }
}

/// Index bookkeeping for P permutations split into K near-equal parts.
#[derive(Clone, Debug)]
pub struct PartitionPlan {
    pub splits: usize,
    pub permutations: usize,
    pub seed: u64,
    /// indices[p][k] lists the realization indices of split k in permutation p.
    pub indices: Vec<Vec<Vec<usize>>>,
}

impl PartitionPlan {
    pub fn split_indices(&self, p: usize, k: usize) -> &[usize] {
        &self.indices[p][k]
    }
}

/// One split's masks and buckets, aligned by index.
#[derive(Clone, Debug)]
pub struct SubDataset {
    pub permutation: usize,
    pub split: usize,
    pub masks: MaskSet,
    pub buckets: BucketVector,
    pub parent_indices: Vec<usize>,
}

/// Decomposition of a sub-reconstruction into base + null-space + noise
/// parts: x_k = x + v_k + t_k with W_k v_k = 0.
#[derive(Clone, Debug)]
pub struct NoiseDecomposition {
    pub base: Image,
    pub nullspace_part: Image,
    pub noise_part: Image,
    /// |W_k v_k| / (|W_k|_F |v_k|); tiny when v_k lies in ker W_k.
    pub annihilation_ratio: f64,
}

fn matvec(masks: &MaskSet, x: &[f64]) -> Vec<f64> {
    let n = masks.pixel_count();
    (0..masks.count)
        .into_par_iter()
        .map(|m| {
            let row = &masks.data[m * n..(m + 1) * n];
            let mut acc = 0.0f64;
            for (w, v) in row.iter().zip(x.iter()) {
                acc += w * v;
            }
            acc
        })
        .collect()
}

fn matvec_transpose(masks: &MaskSet, r: &[f64]) -> Vec<f64> {
    let n = masks.pixel_count();
    // Deterministic: accumulate rows in fixed order into one buffer.
    let mut out = vec![0.0f64; n];
    for (m, &rv) in r.iter().enumerate() {
        if rv == 0.0 {
            continue;
        }
        let row = &masks.data[m * n..(m + 1) * n];
        for (o, w) in out.iter_mut().zip(row.iter()) {
            *o += w * rv;
        }
    }
    out
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Conjugate gradient on the normal equations, started from zero, which
/// converges to the minimum-norm least-squares solution W† y. Stops at
/// `max_iters` or when |W^T r| falls below `tol` times its initial value.
pub fn cgls_reconstruct(masks: &MaskSet, buckets: &BucketVector, config: &CglsConfig) -> Result<Image> {
    if buckets.len() != masks.count {
        return Err(GhostError::ShapeMismatch {
            op: "cgls_reconstruct",
            axis: "realizations",
            expected: masks.count,
            got: buckets.len(),
        });
    }
    if buckets.values.iter().any(|v| !v.is_finite())
        || masks.data.iter().any(|v| !v.is_finite())
    {
        return Err(GhostError::non_finite("cgls inputs"));
    }
    let n = masks.pixel_count();
    let mut x = vec![0.0f64; n];
    let mut residual = buckets.values.clone(); // r = y - W x, x = 0
    let mut s = matvec_transpose(masks, &residual);
    let mut gamma = s.iter().map(|v| v * v).sum::<f64>();
    let gamma0 = gamma;
    if gamma0 == 0.0 {
        return Image::new(masks.height, masks.width, x);
    }
    let mut p = s.clone();
    for _ in 0..config.max_iters {
        let q = matvec(masks, &p);
        let qq = q.iter().map(|v| v * v).sum::<f64>();
        if qq == 0.0 {
            break;
        }
        let alpha = gamma / qq;
        for (xi, pi) in x.iter_mut().zip(p.iter()) {
            *xi += alpha * pi;
        }
        for (ri, qi) in residual.iter_mut().zip(q.iter()) {
            *ri -= alpha * qi;
        }
        s = matvec_transpose(masks, &residual);
        let gamma_new = s.iter().map(|v| v * v).sum::<f64>();
        if gamma_new <= config.tol * config.tol * gamma0 {
            break;
        }
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        for (pi, si) in p.iter_mut().zip(s.iter()) {
            *pi = si + beta * *pi;
        }
    }
    Image::new(masks.height, masks.width, x)
}

/// Data residual |W x - y| (diagnostics and tests).
pub fn data_residual(masks: &MaskSet, buckets: &BucketVector, x: &Image) -> f64 {
    let wx = matvec(masks, &x.pixels);
    let d: Vec<f64> = wx
        .iter()
        .zip(buckets.values.iter())
        .map(|(a, b)| a - b)
        .collect();
    norm2(&d)
}

fn shuffled_indices(count: usize, seed: u64, permutation: u64) -> Vec<usize> {
    let mut rng = Rng64::from_seed_stream(seed, STREAM_SPLIT + permutation);
    let mut idx: Vec<usize> = (0..count).collect();
    // Fisher-Yates, top-down
    for i in (1..count).rev() {
        let j = rng.below(i + 1);
        idx.swap(i, j);
    }
    idx
}

/// Contiguous near-equal slices of a shuffled index list; the first
/// `count % splits` slices take the extra element.
fn slice_into_splits(shuffled: &[usize], splits: usize) -> Vec<Vec<usize>> {
    let count = shuffled.len();
    let base = count / splits;
    let extra = count % splits;
    let mut out = Vec::with_capacity(splits);
    let mut start = 0;
    for k in 0..splits {
        let len = base + usize::from(k < extra);
        out.push(shuffled[start..start + len].to_vec());
        start += len;
    }
    out
}

fn subdataset(masks: &MaskSet, buckets: &BucketVector, p: usize, k: usize, idx: &[usize]) -> SubDataset {
    SubDataset {
        permutation: p,
        split: k,
        masks: masks.subset(idx),
        buckets: buckets.subset(idx),
        parent_indices: idx.to_vec(),
    }
}

/// One seeded shuffle of the realizations sliced into K near-equal splits,
/// each paired with its least-squares-ready masks and buckets.
pub fn split_realizations(
    masks: &MaskSet,
    buckets: &BucketVector,
    splits: usize,
    seed: u64,
) -> Result<Vec<SubDataset>> {
    let (plan, subs) = permuted_splits(masks, buckets, splits, 1, seed)?;
    let _ = plan;
    Ok(subs)
}

/// P independent shuffles, each sliced into K splits; P = 1 reduces to
/// `split_realizations` for the same seed.
pub fn permuted_splits(
    masks: &MaskSet,
    buckets: &BucketVector,
    splits: usize,
    permutations: usize,
    seed: u64,
) -> Result<(PartitionPlan, Vec<SubDataset>)> {
    if splits == 0 || permutations == 0 {
        return Err(GhostError::invalid("splits and permutations must be >= 1"));
    }
    if splits > masks.count {
        return Err(GhostError::invalid(format!(
            "cannot split {} realizations into {} parts",
            masks.count, splits
        )));
    }
    if buckets.len() != masks.count {
        return Err(GhostError::ShapeMismatch {
            op: "permuted_splits",
            axis: "realizations",
            expected: masks.count,
            got: buckets.len(),
        });
    }
    let mut indices = Vec::with_capacity(permutations);
    let mut subs = Vec::with_capacity(permutations * splits);
    for p in 0..permutations {
        let shuffled = shuffled_indices(masks.count, seed, p as u64);
        let slices = slice_into_splits(&shuffled, splits);
        for (k, idx) in slices.iter().enumerate() {
            subs.push(subdataset(masks, buckets, p, k, idx));
        }
        indices.push(slices);
    }
    Ok((
        PartitionPlan {
            splits,
            permutations,
            seed,
            indices,
        },
        subs,
    ))
}

/// CGLS reconstruction of every sub-dataset, in parallel.
pub fn sub_reconstruct_all(subs: &[SubDataset], config: &CglsConfig) -> Result<Vec<Image>> {
    subs.par_iter()
        .map(|s| cgls_reconstruct(&s.masks, &s.buckets, config))
        .collect()
}

/// Split a sub-reconstruction into base/null-space/noise parts against a
/// known reference (synthetic mode): t_k = W_k† eps_k from the recorded
/// clean buckets, v_k = x_k - reference - t_k.
pub fn nullspace_probe(
    sub: &SubDataset,
    sub_reconstruction: &Image,
    reference: &Image,
    config: &CglsConfig,
) -> Result<NoiseDecomposition> {
    let clean = sub.buckets.clean.as_ref().ok_or_else(|| {
        GhostError::invalid("nullspace_probe requires buckets with a clean counterpart")
    })?;
    let eps: Vec<f64> = sub
        .buckets
        .values
        .iter()
        .zip(clean.iter())
        .map(|(y, b)| y - b)
        .collect();
    let noise_part = cgls_reconstruct(
        &sub.masks,
        &BucketVector::clean_only(eps),
        config,
    )?;
    let mut v = Image::zeros(reference.height, reference.width);
    for i in 0..v.pixels.len() {
        v.pixels[i] = sub_reconstruction.pixels[i] - reference.pixels[i] - noise_part.pixels[i];
    }
    let wv = matvec(&sub.masks, &v.pixels);
    let frob = norm2(&sub.masks.data);
    let vnorm = norm2(&v.pixels);
    let annihilation_ratio = if vnorm == 0.0 {
        0.0
    } else {
        norm2(&wv) / (frob * vnorm)
    };
    Ok(NoiseDecomposition {
        base: reference.clone(),
        nullspace_part: v,
        noise_part,
        annihilation_ratio,
    })
}
