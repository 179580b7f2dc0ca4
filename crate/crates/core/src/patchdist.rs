//! Patch-distribution machinery: extraction, the symmetric
//! nearest-neighbour patch distance, a sliced-Wasserstein cross-check,
//! binary export, and the empirical harness that checks the low-resolution
//! bridging property on a trained restorer.
//!
//! A patch set is the empirical support of a uniform patch distribution;
//! all distances here are between such uniform empirical distributions.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{psnr_db, ImageTensor};

/// Boundary handling when sliding the patch window.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Window stays inside the signal: `(H-s+1)(W-s+1)` patches.
    Valid,
    /// Toroidal wrap-around: one patch per position, `H*W` (or `len`) total.
    Circular,
}

/// Flattened patch matrix plus the geometry it came from. Row `i` holds
/// patch `i` flattened channel-major: entry `(c, dy, dx)` lives at
/// `(c*sh + dy)*sw + dx`.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub patches: Array2<f32>,
    /// `(sh, sw)`; 1-D sets use `(1, s)`.
    pub window: (usize, usize),
    pub channels: usize,
    /// `(h, w)` of the source; 1-D signals use `(1, len)`.
    pub source_dims: (usize, usize),
    pub boundary: Boundary,
    /// Top-left corner of each patch, parallel to the rows.
    pub positions: Vec<(usize, usize)>,
}

impl PatchSet {
    pub fn count(&self) -> usize {
        self.patches.nrows()
    }

    pub fn dim(&self) -> usize {
        self.patches.ncols()
    }
}

/// Uniform empirical distribution over a patch set.
#[derive(Clone, Debug)]
pub struct PatchDistribution {
    pub support: PatchSet,
}

impl From<PatchSet> for PatchDistribution {
    fn from(support: PatchSet) -> Self {
        PatchDistribution { support }
    }
}

impl PatchDistribution {
    pub fn distance(&self, other: &PatchDistribution) -> Result<f64> {
        patch_distance(&self.support, &other.support)
    }
}

/// All length-`s` windows of a 1-D signal with circular boundary:
/// patch `i`, element `k` is `x[(i + k) mod len]`, 0-based.
pub fn extract_patches_1d(x: &[f32], s: usize) -> Result<PatchSet> {
    let n = x.len();
    if s == 0 || s > n {
        return Err(Error::InvalidArgument(format!(
            "1-d patch size {s} invalid for signal of length {n}"
        )));
    }
    let mut patches = Array2::<f32>::zeros((n, s));
    for i in 0..n {
        for k in 0..s {
            patches[[i, k]] = x[(i + k) % n];
        }
    }
    Ok(PatchSet {
        patches,
        window: (1, s),
        channels: 1,
        source_dims: (1, n),
        boundary: Boundary::Circular,
        positions: (0..n).map(|i| (0, i)).collect(),
    })
}

/// All `s x s` windows of an image. `Valid` slides inside the image,
/// row-major by top-left corner; `Circular` wraps toroidally and yields
/// one patch per pixel.
pub fn extract_patches_2d(img: &ImageTensor, s: usize, boundary: Boundary) -> Result<PatchSet> {
    let (c, h, w) = img.data.dim();
    if s == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    match boundary {
        Boundary::Valid => {
            if h < s || w < s {
                return Err(Error::InvalidArgument(format!(
                    "patch size {s} does not fit {h}x{w} image with valid boundary"
                )));
            }
            let (nh, nw) = (h - s + 1, w - s + 1);
            let mut patches = Array2::<f32>::zeros((nh * nw, c * s * s));
            let mut positions = Vec::with_capacity(nh * nw);
            for py in 0..nh {
                for px in 0..nw {
                    let row = py * nw + px;
                    positions.push((py, px));
                    for ci in 0..c {
                        for dy in 0..s {
                            for dx in 0..s {
                                patches[[row, (ci * s + dy) * s + dx]] =
                                    img.data[[ci, py + dy, px + dx]];
                            }
                        }
                    }
                }
            }
            Ok(PatchSet {
                patches,
                window: (s, s),
                channels: c,
                source_dims: (h, w),
                boundary,
                positions,
            })
        }
        Boundary::Circular => {
            if s > h || s > w {
                return Err(Error::InvalidArgument(format!(
                    "patch size {s} larger than {h}x{w} image"
                )));
            }
            let mut patches = Array2::<f32>::zeros((h * w, c * s * s));
            let mut positions = Vec::with_capacity(h * w);
            for py in 0..h {
                for px in 0..w {
                    let row = py * w + px;
                    positions.push((py, px));
                    for ci in 0..c {
                        for dy in 0..s {
                            for dx in 0..s {
                                patches[[row, (ci * s + dy) * s + dx]] =
                                    img.data[[ci, (py + dy) % h, (px + dx) % w]];
                            }
                        }
                    }
                }
            }
            Ok(PatchSet {
                patches,
                window: (s, s),
                channels: c,
                source_dims: (h, w),
                boundary,
                positions,
            })
        }
    }
}

/// One direction of the NN distance: `mean_i min_j ||a_i - b_j||_2`.
///
/// Candidate minima come from a blocked f64 Gram computation
/// (`||a||^2 + ||b||^2 - 2 a.b`); the winning pair's distance is then
/// recomputed by direct subtraction so identical patches give exactly 0
/// instead of Gram round-off noise.
fn nn_mean_dist(a: &Array2<f64>, b: &Array2<f64>, b_sq: &[f64]) -> f64 {
    let (na, d) = a.dim();
    let nb = b.nrows();
    debug_assert_eq!(d, b.ncols());
    // Keep the Gram block around ~8M f64 (64 MB) regardless of nb.
    let block = (8_000_000 / nb.max(1)).clamp(8, 4096);
    let mut total = 0.0f64;
    let mut row0 = 0;
    while row0 < na {
        let rows = block.min(na - row0);
        let ablk = a.slice(ndarray::s![row0..row0 + rows, ..]);
        let gram = ablk.dot(&b.t()); // [rows, nb]
        for r in 0..rows {
            let a_sq: f64 = ablk.row(r).iter().map(|v| v * v).sum();
            let mut best_j = 0usize;
            let mut best = f64::INFINITY;
            for j in 0..nb {
                let d2 = a_sq + b_sq[j] - 2.0 * gram[[r, j]];
                if d2 < best {
                    best = d2;
                    best_j = j;
                }
            }
            // Exact recompute for the winner.
            let mut d2 = 0.0f64;
            for (x, y) in ablk.row(r).iter().zip(b.row(best_j).iter()) {
                let diff = x - y;
                d2 += diff * diff;
            }
            total += d2.sqrt();
        }
        row0 += rows;
    }
    total / na as f64
}

/// Symmetric mean nearest-neighbour L2 distance between two uniform patch
/// distributions: `0.5 * (mean_i min_j ||a_i-b_j|| + mean_j min_i ||b_j-a_i||)`.
///
/// Zero iff every patch of each set appears in the other (in particular,
/// identical multisets give exactly 0). Not a metric (no triangle
/// inequality) but symmetric and non-negative.
pub fn patch_distance(a: &PatchSet, b: &PatchSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidArgument(format!(
            "patch dimensionality mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.count() == 0 || b.count() == 0 {
        return Err(Error::InvalidArgument("empty patch set".into()));
    }
    let af = a.patches.mapv(|v| v as f64);
    let bf = b.patches.mapv(|v| v as f64);
    let a_sq: Vec<f64> = af.rows().into_iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let b_sq: Vec<f64> = bf.rows().into_iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let forward = nn_mean_dist(&af, &bf, &b_sq);
    let backward = nn_mean_dist(&bf, &af, &a_sq);
    Ok(0.5 * (forward + backward))
}

/// Sliced 1-Wasserstein distance between the two uniform patch
/// distributions: project onto `n_proj` random unit directions, compare
/// the sorted projections through a common quantile grid, average.
/// A cheaper cross-check for [`patch_distance`]; agreement is approximate
/// (different geometry), but both are 0 on identical sets and grow
/// together under perturbation.
pub fn patch_distance_sliced(
    a: &PatchSet,
    b: &PatchSet,
    n_proj: usize,
    rng: &mut crate::rng::Rng,
) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidArgument(format!(
            "patch dimensionality mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if n_proj == 0 {
        return Err(Error::InvalidArgument("need at least one projection".into()));
    }
    let d = a.dim();
    let quantiles = a.count().max(b.count());
    let mut total = 0.0f64;
    for _ in 0..n_proj {
        let mut dir = vec![0.0f64; d];
        let mut norm = 0.0;
        for v in dir.iter_mut() {
            *v = rng.normal_f32() as f64;
            norm += *v * *v;
        }
        let norm = norm.sqrt().max(1e-12);
        dir.iter_mut().for_each(|v| *v /= norm);
        let project = |m: &Array2<f32>| -> Vec<f64> {
            let mut p: Vec<f64> = m
                .rows()
                .into_iter()
                .map(|r| r.iter().zip(dir.iter()).map(|(x, w)| *x as f64 * w).sum())
                .collect();
            p.sort_by(|x, y| x.partial_cmp(y).unwrap());
            p
        };
        let pa = project(&a.patches);
        let pb = project(&b.patches);
        // Linear-interpolated quantile function of a sorted sample.
        let quant = |sorted: &[f64], q: f64| -> f64 {
            let pos = q * sorted.len() as f64 - 0.5;
            let lo = pos.floor().clamp(0.0, (sorted.len() - 1) as f64) as usize;
            let hi = (lo + 1).min(sorted.len() - 1);
            let frac = (pos - lo as f64).clamp(0.0, 1.0);
            sorted[lo] * (1.0 - frac) + sorted[hi] * frac
        };
        let mut acc = 0.0;
        for t in 0..quantiles {
            let q = (t as f64 + 0.5) / quantiles as f64;
            acc += (quant(&pa, q) - quant(&pb, q)).abs();
        }
        total += acc / quantiles as f64;
    }
    Ok(total / n_proj as f64)
}

#[derive(Serialize, Deserialize)]
struct PatchSetHeader {
    format: String,
    count: usize,
    dim: usize,
    window: (usize, usize),
    channels: usize,
    source_dims: (usize, usize),
    boundary: Boundary,
    dtype: String,
    data_file: String,
}

/// Write `<name>.bin` (row-major little-endian f32) and `<name>.json`
/// (geometry header) into `dir`.
pub fn export_patch_set(set: &PatchSet, dir: &Path, name: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin_name = format!("{name}.bin");
    let bin_path = dir.join(&bin_name);
    let mut bin = std::io::BufWriter::new(
        std::fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?,
    );
    for v in set.patches.iter() {
        bin.write_f32::<LE>(*v).map_err(|e| Error::io(&bin_path, e))?;
    }
    bin.flush().map_err(|e| Error::io(&bin_path, e))?;
    let header = PatchSetHeader {
        format: "patchset-1".into(),
        count: set.count(),
        dim: set.dim(),
        window: set.window,
        channels: set.channels,
        source_dims: set.source_dims,
        boundary: set.boundary,
        dtype: "f32-le".into(),
        data_file: bin_name,
    };
    let json_path = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::InvalidArgument(format!("header serialization: {e}")))?;
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

/// Read back a patch set written by [`export_patch_set`]. Positions are
/// not stored in the export and come back empty.
pub fn import_patch_set(dir: &Path, name: &str) -> Result<PatchSet> {
    let json_path = dir.join(format!("{name}.json"));
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: PatchSetHeader = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidArgument(format!("bad patch-set header: {e}")))?;
    if header.format != "patchset-1" {
        return Err(Error::InvalidArgument(format!(
            "unknown patch-set format {:?}",
            header.format
        )));
    }
    let bin_path = dir.join(&header.data_file);
    let mut file = std::io::BufReader::new(
        std::fs::File::open(&bin_path).map_err(|e| Error::io(&bin_path, e))?,
    );
    let mut data = vec![0f32; header.count * header.dim];
    for v in data.iter_mut() {
        *v = file.read_f32::<LE>().map_err(|e| Error::io(&bin_path, e))?;
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing).map_err(|e| Error::io(&bin_path, e))? != 0 {
        return Err(Error::InvalidArgument(
            "patch-set payload longer than header declares".into(),
        ));
    }
    Ok(PatchSet {
        patches: Array2::from_shape_vec((header.count, header.dim), data)
            .map_err(|e| Error::InvalidArgument(format!("bad patch-set payload: {e}")))?,
        window: header.window,
        channels: header.channels,
        source_dims: header.source_dims,
        boundary: header.boundary,
        positions: Vec::new(),
    })
}

/// Configuration for [`verify_proposition1`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prop1Config {
    /// Patch size on full-resolution images.
    pub s_full: usize,
    /// Patch size on low-resolution images.
    pub s_low: usize,
    /// Boundary used for full-resolution distances.
    pub boundary_full: Boundary,
    /// Boundary used for low-resolution distances.
    pub boundary_low: Boundary,
    /// Minimum reconstruction quality of the restorer on the reference
    /// image; below this the harness refuses to run (the bridging claim is
    /// conditioned on a faithful restorer).
    pub psnr_floor_db: f64,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Prop1Config {
            s_full: 7,
            s_low: 7,
            boundary_full: Boundary::Valid,
            boundary_low: Boundary::Circular,
            psnr_floor_db: 25.0,
        }
    }
}

/// Per-candidate measurements from the bridging harness.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prop1Sample {
    /// Low-resolution patch distance between the candidate and the
    /// reference's low-resolution image.
    pub low_dist: f64,
    /// Full-resolution patch distance after restoring the candidate
    /// *without* patch transfer (restorer alone).
    pub direct: f64,
    /// Full-resolution patch distance after the full pipeline
    /// (patch transfer, then restoration).
    pub matched: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prop1Report {
    pub recon_psnr_db: f64,
    pub samples: Vec<Prop1Sample>,
    pub mean_direct: f64,
    pub mean_matched: f64,
    /// Whether patch transfer moved the restored outputs closer to the
    /// reference patch distribution on average.
    pub holds: bool,
}

/// Empirically check the bridging claim: if a candidate low-resolution
/// image is close to the reference's low-resolution patch distribution,
/// then routing it through patch transfer + restoration lands closer to
/// the reference's full-resolution patch distribution than restoration
/// alone does.
///
/// Precondition (checked): the restorer reconstructs the reference image
/// from its own low-resolution version at `psnr_floor_db` or better.
pub fn verify_proposition1(
    full: &ImageTensor,
    low: &ImageTensor,
    f: &crate::dipnet::DipNet,
    candidates: &[ImageTensor],
    cfg: &Prop1Config,
) -> Result<Prop1Report> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate images supplied".into()));
    }
    for (i, c) in candidates.iter().enumerate() {
        if c.dims() != low.dims() {
            return Err(Error::InvalidArgument(format!(
                "candidate {i} has dims {:?}, expected {:?}",
                c.dims(),
                low.dims()
            )));
        }
    }
    let recon = f.apply(low)?.0;
    let recon_psnr_db = psnr_db(&recon, full);
    if recon_psnr_db < cfg.psnr_floor_db {
        return Err(Error::Precondition(format!(
            "restorer reconstructs the reference at {recon_psnr_db:.2} dB, \
             below the {:.2} dB floor required for the bridging check",
            cfg.psnr_floor_db
        )));
    }
    let ref_full = extract_patches_2d(full, cfg.s_full, cfg.boundary_full)?;
    let ref_low = extract_patches_2d(low, cfg.s_low, cfg.boundary_low)?;
    let samples: Result<Vec<Prop1Sample>> = candidates
        .par_iter()
        .map(|c| -> Result<Prop1Sample> {
            let c_set = extract_patches_2d(c, cfg.s_low, cfg.boundary_low)?;
            let low_dist = patch_distance(&ref_low, &c_set)?;
            let restored_only = f.restore(c)?;
            let through_pipeline = f.apply(c)?.0;
            let direct =
                patch_distance(&ref_full, &extract_patches_2d(&restored_only, cfg.s_full, cfg.boundary_full)?)?;
            let matched = patch_distance(
                &ref_full,
                &extract_patches_2d(&through_pipeline, cfg.s_full, cfg.boundary_full)?,
            )?;
            Ok(Prop1Sample {
                low_dist,
                direct,
                matched,
            })
        })
        .collect();
    let samples = samples?;
    let mean_direct = samples.iter().map(|s| s.direct).sum::<f64>() / samples.len() as f64;
    let mean_matched = samples.iter().map(|s| s.matched).sum::<f64>() / samples.len() as f64;
    Ok(Prop1Report {
        recon_psnr_db,
        holds: mean_matched < mean_direct,
        samples,
        mean_direct,
        mean_matched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn one_dim_patches_use_circular_indexing() {
        // Signal [1,2,3,4], s=2: patch 3 wraps to [4,1].
        let set = extract_patches_1d(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(set.count(), 4);
        assert_eq!(set.patches.row(0).to_vec(), vec![1.0, 2.0]);
        assert_eq!(set.patches.row(3).to_vec(), vec![4.0, 1.0]);
    }

    fn gradient_image(h: usize, w: usize) -> ImageTensor {
        let mut data = Array3::zeros((3, h, w));
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[[c, y, x]] = (y * w + x) as f32 / (h * w) as f32 * (c + 1) as f32 / 3.0;
                }
            }
        }
        ImageTensor::new(data)
    }

    #[test]
    fn valid_grid_count_and_order() {
        // 5x6 image, s=3 -> 3*4 = 12 patches, row-major by top-left.
        let img = gradient_image(5, 6);
        let set = extract_patches_2d(&img, 3, Boundary::Valid).unwrap();
        assert_eq!(set.count(), 12);
        assert_eq!(set.dim(), 3 * 9);
        assert_eq!(set.positions[0], (0, 0));
        assert_eq!(set.positions[1], (0, 1));
        assert_eq!(set.positions[4], (1, 0));
        // First element of patch at (1, 2) is pixel (c=0, y=1, x=2).
        let row = 1 * 4 + 2;
        assert_eq!(set.patches[[row, 0]], img.data[[0, 1, 2]]);
        // Channel-major flattening: entry (c=2, dy=1, dx=2) of that patch.
        assert_eq!(set.patches[[row, (2 * 3 + 1) * 3 + 2]], img.data[[2, 2, 4]]);
    }

    #[test]
    fn circular_grid_covers_every_pixel() {
        let img = gradient_image(4, 5);
        let set = extract_patches_2d(&img, 3, Boundary::Circular).unwrap();
        assert_eq!(set.count(), 20);
        // Patch at (3, 4) wraps: element (0, dy=2, dx=2) is pixel (1, 1).
        let row = 3 * 5 + 4;
        assert_eq!(set.patches[[row, 2 * 3 + 2]], img.data[[0, 1, 1]]);
    }

    #[test]
    fn identical_sets_have_exactly_zero_distance() {
        let img = gradient_image(8, 8);
        let a = extract_patches_2d(&img, 3, Boundary::Valid).unwrap();
        let b = extract_patches_2d(&img, 3, Boundary::Valid).unwrap();
        assert_eq!(patch_distance(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn toroidal_shift_preserves_circular_patch_distribution() {
        // Shifting an image toroidally permutes the circular patch
        // multiset, so the distance must be exactly zero.
        let img = gradient_image(6, 7);
        let (h, w) = img.dims();
        let mut shifted = ImageTensor::zeros(3, h, w);
        let (dy, dx) = (2usize, 3usize);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    shifted.data[[c, (y + dy) % h, (x + dx) % w]] = img.data[[c, y, x]];
                }
            }
        }
        let a = extract_patches_2d(&img, 3, Boundary::Circular).unwrap();
        let b = extract_patches_2d(&shifted, 3, Boundary::Circular).unwrap();
        assert_eq!(patch_distance(&a, &b).unwrap(), 0.0);
    }

    /// Brute-force oracle: direct double loop, no Gram trick.
    fn nn_distance_naive(a: &PatchSet, b: &PatchSet) -> f64 {
        let one_way = |p: &Array2<f32>, q: &Array2<f32>| -> f64 {
            let mut total = 0.0f64;
            for i in 0..p.nrows() {
                let mut best = f64::INFINITY;
                for j in 0..q.nrows() {
                    let mut d2 = 0.0f64;
                    for k in 0..p.ncols() {
                        let d = p[[i, k]] as f64 - q[[j, k]] as f64;
                        d2 += d * d;
                    }
                    best = best.min(d2);
                }
                total += best.sqrt();
            }
            total / p.nrows() as f64
        };
        0.5 * (one_way(&a.patches, &b.patches) + one_way(&b.patches, &a.patches))
    }

    #[test]
    fn gram_distance_matches_brute_force() {
        let mut rng = crate::rng::Rng::new(17, "patchdist-oracle");
        for trial in 0..4 {
            let mut da = Array3::zeros((3, 9, 8));
            let mut db = Array3::zeros((3, 7, 10));
            for v in da.iter_mut() {
                *v = rng.uniform_f32();
            }
            for v in db.iter_mut() {
                *v = rng.uniform_f32();
            }
            let a = extract_patches_2d(&ImageTensor::new(da), 3, Boundary::Valid).unwrap();
            let b = extract_patches_2d(&ImageTensor::new(db), 3, Boundary::Valid).unwrap();
            let fast = patch_distance(&a, &b).unwrap();
            let slow = nn_distance_naive(&a, &b);
            assert!(
                (fast - slow).abs() < 1e-9 * (1.0 + slow),
                "trial {trial}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn known_one_dim_distance() {
        // A = {(0,0)}, B = {(3,4)}: single patches, distance = 5 both ways.
        let a = extract_patches_1d(&[0.0, 0.0], 2).unwrap();
        let b = extract_patches_1d(&[3.0, 4.0], 2).unwrap();
        // Both sets hold two patches: A = {(0,0),(0,0)}, B = {(3,4),(4,3)}.
        // min over B from (0,0) is 5 either way; from B to A likewise.
        let d = patch_distance(&a, &b).unwrap();
        assert!((d - 5.0).abs() < 1e-9, "{d}");
    }

    #[test]
    fn distance_is_symmetric_and_grows_with_perturbation() {
        let img = gradient_image(10, 10);
        let mut bumped = img.clone();
        for v in bumped.data.iter_mut() {
            *v = (*v + 0.25).min(1.0);
        }
        let a = extract_patches_2d(&img, 3, Boundary::Valid).unwrap();
        let b = extract_patches_2d(&bumped, 3, Boundary::Valid).unwrap();
        let ab = patch_distance(&a, &b).unwrap();
        let ba = patch_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0);
        let mut worse = img.clone();
        for v in worse.data.iter_mut() {
            *v = (*v + 0.5).min(1.0);
        }
        let c = extract_patches_2d(&worse, 3, Boundary::Valid).unwrap();
        assert!(patch_distance(&a, &c).unwrap() > ab);
    }

    #[test]
    fn sliced_distance_tracks_nn_distance() {
        let img = gradient_image(9, 9);
        let same = extract_patches_2d(&img, 3, Boundary::Valid).unwrap();
        let mut rng = crate::rng::Rng::new(3, "sliced");
        let zero = patch_distance_sliced(&same, &same, 16, &mut rng).unwrap();
        assert!(zero.abs() < 1e-9, "{zero}");
        let mut bumped = img.clone();
        for v in bumped.data.iter_mut() {
            *v = (*v + 0.3).min(1.0);
        }
        let other = extract_patches_2d(&bumped, 3, Boundary::Valid).unwrap();
        let d_small = patch_distance_sliced(&same, &other, 16, &mut rng).unwrap();
        assert!(d_small > 0.0);
    }

    #[test]
    fn export_import_round_trip() {
        let img = gradient_image(6, 6);
        let set = extract_patches_2d(&img, 3, Boundary::Valid).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_patch_set(&set, dir.path(), "ref").unwrap();
        assert!(dir.path().join("ref.bin").exists());
        assert!(dir.path().join("ref.json").exists());
        let back = import_patch_set(dir.path(), "ref").unwrap();
        assert_eq!(back.count(), set.count());
        assert_eq!(back.dim(), set.dim());
        assert_eq!(back.window, set.window);
        assert_eq!(back.boundary, set.boundary);
        assert_eq!(back.patches, set.patches);
        assert_eq!(patch_distance(&set, &back).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let img = gradient_image(6, 6);
        let a = extract_patches_2d(&img, 3, Boundary::Valid).unwrap();
        let b = extract_patches_2d(&img, 5, Boundary::Valid).unwrap();
        assert!(matches!(patch_distance(&a, &b), Err(Error::InvalidArgument(_))));
    }
}
