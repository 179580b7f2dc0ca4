//! Evaluation metrics and the two downstream applications.
//!
//! Metrics: a single-image Fréchet feature distance (Gaussians fit to the
//! per-location features of one real and one synthesized image), a
//! pairwise feature-space diversity score, and the nearest-neighbour patch
//! distance from [`crate::patchdist`]. The bundled feature extractor is a
//! frozen random conv stack, so absolute values are comparable only within
//! one extractor; every report records which extractor produced it.
//!
//! Applications: `hires_upscale` trains a fresh restoration net that lifts
//! the trained pipeline's outputs by another power-of-two factor using
//! reconstruction loss alone, and `manipulate` routes an edited /
//! composited / painted content image through patch transfer + restoration
//! so its statistics are pulled toward the exemplar's. Both reuse the
//! trained networks read-only.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::dipnet::{internal_prior_loss, perturb_signed, AttentionMap, DipNet, DipNetCfg, IrNet};
use crate::error::{Error, Result};
use crate::imaging::{psnr_db, resize, ImageTensor, ResizeMode};
use crate::nn::adam::Adam;
use crate::nn::conv::Pad;
use crate::nn::graph::Graph;
use crate::nn::layers::{Binder, Conv2dLayer};
use crate::nn::linalg::sqrtm_psd;
use crate::patchdist::{extract_patches_2d, patch_distance, Boundary};
use crate::rng::Rng;
use crate::trainer::Trainer;

/// Frozen feature extractor mapping an image to `[n_locations, feat_dim]`
/// features. The default is a random 3-layer conv stack with 4x spatial
/// pooling; weights never train, so features are deterministic per seed.
pub struct FeatureExtractor {
    convs: Vec<Conv2dLayer>,
    kind: String,
}

impl FeatureExtractor {
    /// Conv(3→16) → pool → Conv(16→24) → pool → Conv(24→16); leaky-ReLU
    /// between stages.
    pub fn fixed_random(seed: u64) -> Self {
        let mut rng = Rng::new(seed, "feature-extractor");
        let convs = vec![
            Conv2dLayer::new(&mut rng, 3, 16, 3, Pad::Zero(1), 1),
            Conv2dLayer::new(&mut rng, 16, 24, 3, Pad::Zero(1), 1),
            Conv2dLayer::new(&mut rng, 24, 16, 3, Pad::Zero(1), 1),
        ];
        FeatureExtractor {
            convs,
            kind: "fixed_random".to_string(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn feat_dim(&self) -> usize {
        16
    }

    /// Features at every retained spatial location, row-major, as f64 so
    /// the downstream covariance arithmetic is stable.
    pub fn features(&self, img: &ImageTensor) -> Result<Array2<f64>> {
        let (h, w) = img.dims();
        if h < 4 || w < 4 {
            return Err(Error::InvalidArgument(format!(
                "feature extraction needs at least 4x4 input, got {h}x{w}"
            )));
        }
        let signed = img
            .to_signed()
            .into_shape_with_order((1, 3, h, w))
            .expect("contiguous")
            .into_dyn();
        let mut g = Graph::<f32>::new();
        let mut binder = Binder::frozen();
        let mut x = g.constant(signed);
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&mut g, x, &mut binder);
            if i + 1 < self.convs.len() {
                x = g.leaky_relu(x, 0.2);
                x = g.avg_pool2(x);
            }
        }
        let v = g.value(x);
        let dims = v.shape();
        let (f, fh, fw) = (dims[1], dims[2], dims[3]);
        let mut rows = Array2::<f64>::zeros((fh * fw, f));
        for c in 0..f {
            for y in 0..fh {
                for xx in 0..fw {
                    rows[[y * fw + xx, c]] = v[[0, c, y, xx]] as f64;
                }
            }
        }
        Ok(rows)
    }
}

/// Fréchet distance result; `diagonal` is set when too few feature
/// locations were available to estimate a full covariance and the
/// diagonal-covariance formula was used instead.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sifid {
    pub value: f64,
    pub diagonal: bool,
}

fn mean_and_cov(f: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let (n, d) = f.dim();
    let mu = f.mean_axis(Axis(0)).expect("n >= 1");
    let mut cov = Array2::<f64>::zeros((d, d));
    for row in f.axis_iter(Axis(0)) {
        let centered = &row - &mu;
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += centered[i] * centered[j];
            }
        }
    }
    // Population covariance: metric definitions fit a Gaussian to exactly
    // the observed feature set.
    cov.mapv_inplace(|x| x / n as f64);
    (mu, cov)
}

/// Fréchet distance between Gaussians fit to two feature sets:
/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`.
///
/// The cross term uses the equivalent symmetric form
/// `Tr((S1 S2)^{1/2}) = Tr((S S2 S)^{1/2})` with `S = S1^{1/2}`, so only
/// PSD square roots are ever taken. When either set has fewer rows than
/// feature dimensions the full covariance is singular in an unhelpful
/// way, so the distance falls back to diagonal covariances and says so.
pub fn frechet_gaussian(f1: &Array2<f64>, f2: &Array2<f64>) -> Result<Sifid> {
    let (n1, d1) = f1.dim();
    let (n2, d2) = f2.dim();
    if d1 != d2 {
        return Err(Error::InvalidArgument(format!(
            "feature dims differ: {d1} vs {d2}"
        )));
    }
    if n1 < 2 || n2 < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 feature locations per set, got {n1} and {n2}"
        )));
    }
    let d = d1;
    let (mu1, s1) = mean_and_cov(f1);
    let (mu2, s2) = mean_and_cov(f2);
    let mean_term: f64 = (&mu1 - &mu2).iter().map(|x| x * x).sum();
    let diagonal = n1 < d || n2 < d;
    let value = if diagonal {
        let mut acc = mean_term;
        for i in 0..d {
            let a = s1[[i, i]].max(0.0);
            let b = s2[[i, i]].max(0.0);
            acc += a + b - 2.0 * (a * b).sqrt();
        }
        acc
    } else {
        let root1 = sqrtm_psd(&s1);
        let inner = root1.dot(&s2).dot(&root1);
        let cross = sqrtm_psd(&inner);
        let tr = |m: &Array2<f64>| (0..d).map(|i| m[[i, i]]).sum::<f64>();
        mean_term + tr(&s1) + tr(&s2) - 2.0 * tr(&cross)
    };
    Ok(Sifid {
        // The exact distance is nonnegative; round-off in the matrix
        // square root can leave a tiny negative residue.
        value: value.max(0.0),
        diagonal,
    })
}

/// Single-image Fréchet feature distance between a real and a generated
/// image under the given extractor.
pub fn sifid(real: &ImageTensor, fake: &ImageTensor, fx: &FeatureExtractor) -> Result<Sifid> {
    if real.dims() != fake.dims() {
        return Err(Error::InvalidArgument(format!(
            "sifid needs equal dims, got {:?} vs {:?}",
            real.dims(),
            fake.dims()
        )));
    }
    frechet_gaussian(&fx.features(real)?, &fx.features(fake)?)
}

/// Mean over feature locations of the L2 distance between two feature
/// sets, location by location.
pub fn feature_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidArgument(format!(
            "feature sets differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (n, _) = a.dim();
    let mut acc = 0.0;
    for (ra, rb) in a.axis_iter(Axis(0)).zip(b.axis_iter(Axis(0))) {
        acc += (&ra - &rb).iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    Ok(acc / n as f64)
}

/// Mean of `feature_distance` over all unordered pairs.
pub fn mean_pairwise_distance(sets: &[Array2<f64>]) -> Result<f64> {
    if sets.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pairwise distance needs at least 2 sets, got {}",
            sets.len()
        )));
    }
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            acc += feature_distance(&sets[i], &sets[j])?;
            pairs += 1;
        }
    }
    Ok(acc / pairs as f64)
}

fn normalize_rows(f: &mut Array2<f64>) {
    for mut row in f.axis_iter_mut(Axis(0)) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            row.mapv_inplace(|x| x / norm);
        }
    }
}

/// Perceptual diversity of a sample set: every sample's features are
/// unit-normalized per location, then the mean pairwise feature distance
/// is returned. Computed among the syntheses themselves (not against the
/// original), matching the "higher is more diverse" reading.
pub fn diversity(samples: &[ImageTensor], fx: &FeatureExtractor) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "diversity needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let dims = samples[0].dims();
    let mut sets = Vec::with_capacity(samples.len());
    for s in samples {
        if s.dims() != dims {
            return Err(Error::InvalidArgument(
                "diversity samples must share dims".into(),
            ));
        }
        let mut f = fx.features(s)?;
        normalize_rows(&mut f);
        sets.push(f);
    }
    mean_pairwise_distance(&sets)
}

/// One row of the quantitative comparison, JSON- and CSV-serializable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub sifid: f64,
    pub diversity: f64,
    pub patch_dist: f64,
    pub train_seconds: f64,
    pub n_samples: usize,
    /// Which feature extractor produced sifid/diversity; values are only
    /// comparable within one extractor.
    pub extractor: String,
    /// True when any sifid computation fell back to diagonal covariance.
    pub diagonal_covariance: bool,
}

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "name,sifid,diversity,patch_dist,train_seconds,n_samples,extractor,diagonal_covariance"
    }

    pub fn csv_row(&self, name: &str) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.3},{},{},{}",
            name,
            self.sifid,
            self.diversity,
            self.patch_dist,
            self.train_seconds,
            self.n_samples,
            self.extractor,
            self.diagonal_covariance
        )
    }
}

/// Write an aggregate CSV: header plus one row per named report.
pub fn write_csv(reports: &[(String, EvalReport)], path: &Path) -> Result<()> {
    let mut text = String::from(EvalReport::csv_header());
    text.push('\n');
    for (name, r) in reports {
        text.push_str(&r.csv_row(name));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Evaluation knobs: how many samples to draw and the patch size for the
/// nearest-neighbour patch distance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalCfg {
    pub n_samples: usize,
    pub patch_size: usize,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            n_samples: 8,
            patch_size: 5,
        }
    }
}

/// Evaluate a trained model: draws samples at the training resolution and
/// reports mean sifid vs. the training image, pairwise diversity, and the
/// mean patch distance. `train_seconds` is whatever the caller measured
/// (0 when unknown).
pub fn evaluate(
    trainer: &Trainer,
    fx: &FeatureExtractor,
    cfg: &EvalCfg,
    train_seconds: f64,
    label: &str,
) -> Result<EvalReport> {
    if cfg.n_samples < 2 {
        return Err(Error::InvalidArgument(
            "evaluation needs at least 2 samples".into(),
        ));
    }
    let (h, w) = trainer.full.dims();
    let batch = trainer.generate_samples(cfg.n_samples, h, w, label)?;
    let real_feats = fx.features(&trainer.full)?;
    let real_patches = extract_patches_2d(&trainer.full, cfg.patch_size, Boundary::Valid)?;
    let mut sifid_acc = 0.0;
    let mut diag = false;
    let mut pd_acc = 0.0;
    for img in &batch.images {
        let s = frechet_gaussian(&real_feats, &fx.features(img)?)?;
        sifid_acc += s.value;
        diag |= s.diagonal;
        let p = extract_patches_2d(img, cfg.patch_size, Boundary::Valid)?;
        pd_acc += patch_distance(&p, &real_patches)?;
    }
    let div = diversity(&batch.images, fx)?;
    Ok(EvalReport {
        sifid: sifid_acc / cfg.n_samples as f64,
        diversity: div,
        patch_dist: pd_acc / cfg.n_samples as f64,
        train_seconds,
        n_samples: cfg.n_samples,
        extractor: fx.kind().to_string(),
        diagonal_covariance: diag,
    })
}

/// Budget for the standalone reconstruction-only transfer+restoration
/// training used by the applications.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconCfg {
    pub steps: usize,
    pub lr: f32,
    pub lambda_sparse: f32,
    pub delta_sigma: f32,
    pub seed: u64,
    pub dip: DipNetCfg,
}

impl Default for ReconCfg {
    fn default() -> Self {
        ReconCfg {
            steps: 400,
            lr: 2e-3,
            lambda_sparse: 0.01,
            delta_sigma: 0.05,
            seed: 7,
            dip: DipNetCfg::default(),
        }
    }
}

/// A transfer+restoration net trained on one image with reconstruction
/// loss alone.
pub struct ReconTrained {
    pub dip: DipNet,
    pub psnr_db: f64,
    pub steps_run: usize,
}

/// Train `F = IR(PT(.))` to reconstruct `full` from (a perturbed copy of)
/// `low`, nothing else. This is the one-stage model the manipulation
/// tasks run on, and the reconstruction half of the bridging check.
pub fn train_recon_dipnet(
    full: &ImageTensor,
    low: &ImageTensor,
    cfg: &ReconCfg,
) -> Result<ReconTrained> {
    let factor = cfg.dip.up_factor;
    let (lh, lw) = low.dims();
    if full.dims() != (lh * factor, lw * factor) {
        return Err(Error::InvalidArgument(format!(
            "full {:?} is not low {:?} x factor {factor}",
            full.dims(),
            low.dims()
        )));
    }
    let mut dip = DipNet::new(&mut Rng::new(cfg.seed, "recon/init"), low, &cfg.dip)?;
    let mut opt = {
        let mut refs = Vec::new();
        dip.collect(&mut refs);
        Adam::new(cfg.lr, &refs.iter().map(|(_, p)| &**p).collect::<Vec<_>>())
    };
    for step in 0..cfg.steps {
        let perturbed = perturb_signed(
            low,
            &mut Rng::new(cfg.seed, &format!("recon/delta/{step}")),
            cfg.delta_sigma,
        );
        let mut g = Graph::<f32>::new();
        let mut binder = Binder::trainable();
        let il = internal_prior_loss(&mut g, &dip, &mut binder, full, &perturbed, cfg.lambda_sparse)?;
        g.backward(il.loss);
        if !g.scalar_value(il.loss).is_finite() {
            return Err(Error::Divergence {
                epoch: step,
                term: "recon".to_string(),
            });
        }
        let grads = binder.grads(&g);
        let mut muts = Vec::new();
        dip.collect_mut(&mut muts);
        let mut arrays: Vec<&mut ArrayD<f32>> = muts.into_iter().map(|(_, p)| p).collect();
        opt.step(&mut arrays, &grads);
    }
    let (recon, _attn) = dip.apply(low)?;
    let psnr = psnr_db(&recon, full);
    Ok(ReconTrained {
        dip,
        psnr_db: psnr,
        steps_run: cfg.steps,
    })
}

/// Budget for the super-resolution plug-in stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UpscaleCfg {
    pub steps: usize,
    pub lr: f32,
    /// High-resolution crop side used per training step (rounded up to a
    /// multiple of the factor).
    pub crop: usize,
    pub channels: usize,
    pub res_blocks: usize,
    pub seed: u64,
}

impl Default for UpscaleCfg {
    fn default() -> Self {
        UpscaleCfg {
            steps: 500,
            lr: 2e-3,
            crop: 48,
            channels: 24,
            res_blocks: 2,
            seed: 11,
        }
    }
}

/// Result of the super-resolution plug-in: the freshly trained restorer,
/// its reconstruction quality against the high-resolution original, and
/// upscaled syntheses from the base model.
pub struct Upscaled {
    pub ir: IrNet,
    pub psnr_db: f64,
    pub syntheses: Vec<ImageTensor>,
    pub factor: usize,
}

fn ir_apply(ir: &IrNet, img: &ImageTensor) -> ImageTensor {
    let (h, w) = img.dims();
    let signed = img
        .to_signed()
        .into_shape_with_order((1, 3, h, w))
        .expect("contiguous")
        .into_dyn();
    let mut g = Graph::<f32>::new();
    let x = g.constant(signed);
    let mut binder = Binder::frozen();
    let out = ir.forward(&mut g, x, &mut binder);
    let v = g.value(out);
    let v4 = v.view().into_dimensionality::<ndarray::Ix4>().expect("4-d");
    ImageTensor::from_signed(&v4.index_axis(Axis(0), 0).to_owned())
}

/// Train a fresh restoration net lifting base-resolution images by
/// `factor`, with reconstruction loss against `hi` only, then upscale
/// `n_syntheses` samples from the (untouched) base model.
///
/// The base model is borrowed immutably: its generator, transfer net and
/// critics cannot train here by construction.
pub fn hires_upscale(
    base: &Trainer,
    hi: &ImageTensor,
    factor: usize,
    cfg: &UpscaleCfg,
    n_syntheses: usize,
) -> Result<Upscaled> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "upscale factor must be a power of two, got {factor}"
        )));
    }
    let (hh, hw) = hi.dims();
    if hh % factor != 0 || hw % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "high-resolution dims {hh}x{hw} must be multiples of factor {factor}"
        )));
    }
    let crop = cfg.crop.div_ceil(factor).max(1) * factor;
    let (ch, cw) = (crop.min(hh), crop.min(hw));
    let mut ir = IrNet::new(
        &mut Rng::new(cfg.seed, "upscale/init"),
        cfg.channels,
        cfg.res_blocks,
        factor,
    )?;
    let mut opt = {
        let mut refs = Vec::new();
        ir.collect("up", &mut refs);
        Adam::new(cfg.lr, &refs.iter().map(|(_, p)| &**p).collect::<Vec<_>>())
    };
    for step in 0..cfg.steps {
        let mut rng = Rng::new(cfg.seed, &format!("upscale/crop/{step}"));
        let y0 = if hh > ch { rng.below(hh - ch + 1) } else { 0 };
        let x0 = if hw > cw { rng.below(hw - cw + 1) } else { 0 };
        let target = hi.crop(y0, x0, ch, cw);
        let low = resize(&target, ch / factor, cw / factor, ResizeMode::Bicubic)?;
        let low_signed = low
            .to_signed()
            .into_shape_with_order((1, 3, ch / factor, cw / factor))
            .expect("contiguous")
            .into_dyn();
        let target_unit = target
            .data
            .clone()
            .into_shape_with_order((1, 3, ch, cw))
            .expect("contiguous")
            .into_dyn();
        let mut g = Graph::<f32>::new();
        let x = g.constant(low_signed);
        let t = g.constant(target_unit);
        let mut binder = Binder::trainable();
        let out_signed = ir.forward(&mut g, x, &mut binder);
        // Match the reconstruction convention: L1 in unit space.
        let half = g.scale(out_signed, 0.5);
        let out_unit = g.add_scalar(half, 0.5);
        let loss = g.mean_abs_diff(out_unit, t);
        g.backward(loss);
        if !g.scalar_value(loss).is_finite() {
            return Err(Error::Divergence {
                epoch: step,
                term: "upscale".to_string(),
            });
        }
        let grads = binder.grads(&g);
        let mut muts = Vec::new();
        ir.collect_mut("up", &mut muts);
        let mut arrays: Vec<&mut ArrayD<f32>> = muts.into_iter().map(|(_, p)| p).collect();
        opt.step(&mut arrays, &grads);
    }
    // Reconstruction quality: restore the downsampled original and compare.
    let low_full = resize(hi, hh / factor, hw / factor, ResizeMode::Bicubic)?;
    let recon = ir_apply(&ir, &low_full);
    let psnr = psnr_db(&recon, hi);
    // Upscaled syntheses from the untouched base model.
    let (bh, bw) = base.full.dims();
    let batch = base.generate_samples(n_syntheses, bh, bw, "upscale")?;
    let syntheses = batch.images.iter().map(|s| ir_apply(&ir, s)).collect();
    Ok(Upscaled {
        ir,
        psnr_db: psnr,
        syntheses,
        factor,
    })
}

/// The manipulation tasks all share one code path; the variant is kept
/// for reporting and CLI parity.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Harmonize,
    StyleTransfer,
    Edit,
    Paint2Image,
}

/// Output of a manipulation run.
pub struct Manipulated {
    pub image: ImageTensor,
    /// Set when the content dims were not a multiple of the restoration
    /// factor and the content was resized to the nearest workable size.
    pub resized: bool,
    pub attention: AttentionMap,
    pub task: Task,
}

/// Pull a content image (composite, sketch, styled copy, ...) toward the
/// exemplar's internal statistics: downsample, re-paint with exemplar
/// patches via soft attention, restore. Output dims follow the content,
/// rounded to the restoration grid when needed.
pub fn manipulate(task: Task, content: &ImageTensor, dip: &DipNet) -> Result<Manipulated> {
    let f = dip.up_factor();
    let (wh, ww) = dip.window();
    let (h, w) = content.dims();
    let th = (h.div_ceil(f).max(wh)) * f;
    let tw = (w.div_ceil(f).max(ww)) * f;
    let resized = (th, tw) != (h, w);
    let fitted;
    let content_fit = if resized {
        fitted = resize(content, th, tw, ResizeMode::Bicubic)?;
        &fitted
    } else {
        content
    };
    let low = resize(content_fit, th / f, tw / f, ResizeMode::Bicubic)?;
    let (image, attention) = dip.apply(&low)?;
    Ok(Manipulated {
        image,
        resized,
        attention,
        task,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::RunConfig;
    use ndarray::{array, Array3};

    fn textured_image(h: usize, w: usize, phase: f32) -> ImageTensor {
        let mut a = Array3::<f32>::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                let fy = y as f32 / h as f32;
                let fx = x as f32 / w as f32;
                let bars = if (x / 3) % 2 == 0 { 0.25 } else { 0.0 };
                let block = if y > h / 2 && x > w / 2 { 0.3 } else { 0.0 };
                a[[0, y, x]] = (0.2 + 0.5 * fx + bars).min(1.0);
                a[[1, y, x]] = (0.3 + 0.4 * fy + block).min(1.0);
                a[[2, y, x]] = (0.5 + 0.3 * ((fx + phase) * 9.0).sin().abs()).min(1.0);
            }
        }
        ImageTensor::new(a)
    }

    #[test]
    fn frechet_is_zero_for_identical_features_and_symmetric() {
        let fx = FeatureExtractor::fixed_random(3);
        let a = textured_image(24, 20, 0.0);
        let b = textured_image(24, 20, 0.37);
        let s = sifid(&a, &a, &fx).unwrap();
        assert!(s.value <= 1e-6, "self-distance {}", s.value);
        let ab = sifid(&a, &b, &fx).unwrap();
        let ba = sifid(&b, &a, &fx).unwrap();
        assert!(ab.value > 1e-4, "distinct images should separate");
        assert!(
            (ab.value - ba.value).abs() <= 1e-6 * ab.value.max(1.0),
            "symmetry: {} vs {}",
            ab.value,
            ba.value
        );
    }

    #[test]
    fn frechet_matches_the_one_dimensional_closed_form() {
        // N(0,1) vs N(1,4) as exact empirical moments:
        // {-1, 1} has mean 0, population variance 1;
        // {-1, 3} has mean 1, population variance 4.
        // Closed form: (0-1)^2 + (1-2)^2 = 2.
        let f1 = array![[-1.0], [1.0]];
        let f2 = array![[-1.0], [3.0]];
        let s = frechet_gaussian(&f1, &f2).unwrap();
        assert!(!s.diagonal, "2 rows >= 1 dim: full covariance path");
        assert!((s.value - 2.0).abs() < 1e-9, "got {}", s.value);
    }

    #[test]
    fn frechet_matches_the_isotropic_closed_form() {
        // Equal means, S2 = 4*S1 = 4*I_d: distance = d*(1 + 4 - 2*2) = d.
        let d = 3;
        let r = (d as f64).sqrt();
        let mut f1 = Array2::<f64>::zeros((2 * d, d));
        for i in 0..d {
            f1[[2 * i, i]] = r;
            f1[[2 * i + 1, i]] = -r;
        }
        let f2 = f1.mapv(|x| 2.0 * x);
        let s = frechet_gaussian(&f1, &f2).unwrap();
        assert!(!s.diagonal);
        assert!((s.value - d as f64).abs() < 1e-6, "got {}", s.value);
    }

    #[test]
    fn frechet_falls_back_to_diagonal_when_locations_are_scarce() {
        // 2 rows of 3-dim features: full covariance is rank-deficient,
        // the fallback must engage and match the hand-computed diagonal
        // formula.
        let f1 = array![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]; // mu=(1,0,0), var=(1,0,0)
        let f2 = array![[1.0, 1.0, 0.0], [3.0, 1.0, 0.0]]; // mu=(2,1,0), var=(1,0,0)
        let s = frechet_gaussian(&f1, &f2).unwrap();
        assert!(s.diagonal);
        // mean term (1+1) + variance terms (1+1-2) + 0 + 0 = 2.
        assert!((s.value - 2.0).abs() < 1e-12, "got {}", s.value);
    }

    #[test]
    fn pairwise_distances_one_two_three_average_to_two() {
        // Single-location 1-d feature sets at 0, 1, -2: pairwise
        // distances 1, 2, 3; mean = 2.
        let sets = vec![array![[0.0]], array![[1.0]], array![[-2.0]]];
        let m = mean_pairwise_distance(&sets).unwrap();
        assert!((m - 2.0).abs() < 1e-12, "got {m}");
        assert!(mean_pairwise_distance(&sets[..1]).is_err());
    }

    #[test]
    fn diversity_is_zero_for_identical_samples_and_permutation_invariant() {
        let fx = FeatureExtractor::fixed_random(5);
        let a = textured_image(24, 20, 0.0);
        let b = textured_image(24, 20, 0.5);
        let c = textured_image(24, 20, 0.9);
        let same = diversity(&[a.clone(), a.clone(), a.clone()], &fx).unwrap();
        assert!(same <= 1e-9, "identical samples: {same}");
        let v1 = diversity(&[a.clone(), b.clone(), c.clone()], &fx).unwrap();
        let v2 = diversity(&[c, a.clone(), b], &fx).unwrap();
        assert!(v1 > 1e-4);
        assert!((v1 - v2).abs() <= 1e-12, "order must not matter");
        assert!(diversity(&[a], &fx).is_err());
    }

    #[test]
    fn feature_extractor_is_deterministic_per_seed() {
        let a = textured_image(24, 20, 0.2);
        let f1 = FeatureExtractor::fixed_random(9).features(&a).unwrap();
        let f2 = FeatureExtractor::fixed_random(9).features(&a).unwrap();
        assert_eq!(f1, f2);
        let f3 = FeatureExtractor::fixed_random(10).features(&a).unwrap();
        assert_ne!(f1, f3);
        assert_eq!(f1.ncols(), 16);
        // 24x20 pooled twice -> 6x5 = 30 locations.
        assert_eq!(f1.nrows(), 30);
        assert_eq!(FeatureExtractor::fixed_random(9).kind(), "fixed_random");
    }

    fn recon_fixture() -> (ImageTensor, ImageTensor, ReconTrained) {
        let full = textured_image(24, 20, 0.0);
        let low = resize(&full, 6, 5, ResizeMode::Bicubic).unwrap();
        let cfg = ReconCfg {
            steps: 350,
            dip: DipNetCfg {
                pt_window: 3,
                temperature: 0.05,
                embed_dim: 16,
                ir_channels: 16,
                ir_res_blocks: 1,
                up_factor: 4,
                ..DipNetCfg::default()
            },
            ..ReconCfg::default()
        };
        let trained = train_recon_dipnet(&full, &low, &cfg).unwrap();
        (full, low, trained)
    }

    #[test]
    fn reconstruction_training_reaches_a_useful_fixed_point() {
        let (full, _low, trained) = recon_fixture();
        assert!(
            trained.psnr_db >= 18.0,
            "reconstruction PSNR {:.2} dB below bar",
            trained.psnr_db
        );
        // The exemplar itself round-trips: manipulate(full) stays close.
        let m = manipulate(Task::Edit, &full, &trained.dip).unwrap();
        assert!(!m.resized);
        assert_eq!(m.image.dims(), full.dims());
        let p = psnr_db(&m.image, &full);
        assert!(p >= 17.0, "fixed-point PSNR {p:.2} dB");
    }

    #[test]
    fn manipulation_pulls_a_composite_toward_the_exemplar() {
        let (full, _low, trained) = recon_fixture();
        // Paste a flat alien block into the image.
        let mut composite = full.clone();
        for ch in 0..3 {
            for y in 4..12 {
                for x in 3..10 {
                    composite.data[[ch, y, x]] = if ch == 0 { 0.95 } else { 0.05 };
                }
            }
        }
        let m = manipulate(Task::Harmonize, &composite, &trained.dip).unwrap();
        let real = extract_patches_2d(&full, 3, Boundary::Valid).unwrap();
        let before =
            patch_distance(&extract_patches_2d(&composite, 3, Boundary::Valid).unwrap(), &real)
                .unwrap();
        let after =
            patch_distance(&extract_patches_2d(&m.image, 3, Boundary::Valid).unwrap(), &real)
                .unwrap();
        assert!(
            after < before,
            "patch distance must drop: {after:.4} vs {before:.4}"
        );
    }

    #[test]
    fn manipulating_flat_gray_uses_only_valid_patch_indices() {
        let (_full, low, trained) = recon_fixture();
        let gray = ImageTensor::new(Array3::from_elem((3, 24, 20), 0.5));
        let m = manipulate(Task::Paint2Image, &gray, &trained.dip).unwrap();
        let (lh, lw) = low.dims();
        let (wh, ww) = trained.dip.window();
        let n_keys = (lh - wh + 1) * (lw - ww + 1);
        assert!(!m.attention.argmax.is_empty());
        for &i in &m.attention.argmax {
            assert!(i < n_keys, "index {i} outside the exemplar patch bank");
        }
        assert!(m.image.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn manipulation_resizes_awkward_content_and_says_so() {
        let (_full, _low, trained) = recon_fixture();
        let content = textured_image(25, 21, 0.1);
        let m = manipulate(Task::StyleTransfer, &content, &trained.dip).unwrap();
        assert!(m.resized);
        assert_eq!(m.image.dims(), (28, 24), "rounded up to the x4 grid");
    }

    fn tiny_trainer(epochs: usize) -> Trainer {
        let img = textured_image(30, 26, 0.0);
        let mut cfg = RunConfig::desk();
        cfg.max_side = 24;
        cfg.down_factor = 4;
        cfg.pt_window = 3;
        cfg.epochs = epochs;
        cfg.warmup_frac = 0.34;
        cfg.batch_prior = 2;
        cfg.noise_channels = 4;
        cfg.pe_channels = 4;
        cfg.g_hidden = 8;
        cfg.g_depth = 2;
        cfg.dg_hidden = 8;
        cfg.dg_depth = 2;
        cfg.f_embed_dim = 8;
        cfg.f_ir_channels = 8;
        cfg.f_ir_res_blocks = 1;
        cfg.d_hidden = 8;
        cfg.d_layers = 2;
        cfg.d_dilations = vec![1];
        let mut t = Trainer::new(cfg, &img, None).unwrap();
        t.train(None).unwrap();
        t
    }

    #[test]
    fn evaluate_emits_a_finite_report_and_csv_round_trips() {
        let t = tiny_trainer(2);
        let fx = FeatureExtractor::fixed_random(4);
        let cfg = EvalCfg {
            n_samples: 2,
            patch_size: 3,
        };
        let report = evaluate(&t, &fx, &cfg, 1.5, "eval-test").unwrap();
        assert!(report.sifid.is_finite() && report.sifid >= 0.0);
        assert!(report.diversity.is_finite() && report.diversity >= 0.0);
        assert!(report.patch_dist.is_finite() && report.patch_dist >= 0.0);
        assert_eq!(report.n_samples, 2);
        assert_eq!(report.extractor, "fixed_random");

        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.n_samples, report.n_samples);
        assert!((back.sifid - report.sifid).abs() < 1e-12);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agg.csv");
        write_csv(
            &[("img1".to_string(), report.clone()), ("img2".to_string(), report)],
            &path,
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("name,sifid"));
        assert!(lines[1].starts_with("img1,"));
    }

    #[test]
    fn hires_upscale_trains_a_restorer_without_touching_the_base() {
        let t = tiny_trainer(1);
        let before = t.fingerprint();
        let hi = textured_image(48, 40, 0.0);
        let cfg = UpscaleCfg {
            steps: 350,
            crop: 24,
            channels: 12,
            res_blocks: 1,
            ..UpscaleCfg::default()
        };
        let up = hires_upscale(&t, &hi, 2, &cfg, 2).unwrap();
        assert_eq!(t.fingerprint(), before, "base model must stay frozen");
        assert_eq!(up.syntheses.len(), 2);
        let (bh, bw) = t.full.dims();
        for s in &up.syntheses {
            assert_eq!(s.dims(), (bh * 2, bw * 2));
            assert!(s.in_range(0.0, 1.0, 0.0));
        }
        // The trained restorer must beat plain nearest-neighbour blowup
        // of the low-resolution image as a sanity floor.
        let low = resize(&hi, 24, 20, ResizeMode::Bicubic).unwrap();
        let naive = resize(&low, 48, 40, ResizeMode::Nearest).unwrap();
        let naive_psnr = psnr_db(&naive, &hi);
        assert!(
            up.psnr_db > naive_psnr,
            "restorer {:.2} dB should beat nearest {naive_psnr:.2} dB",
            up.psnr_db
        );
        // Degenerate and invalid factors.
        assert!(hires_upscale(&t, &hi, 3, &cfg, 1).is_err());
        let id = hires_upscale(&t, &textured_image(24, 20, 0.0), 1, &cfg, 1).unwrap();
        assert_eq!(id.syntheses[0].dims(), (bh, bw));
    }
}
