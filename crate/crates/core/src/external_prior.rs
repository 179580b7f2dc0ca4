//! External prior: batches of plausible low-resolution layouts.
//!
//! The low-resolution generator needs something to imitate beyond the one
//! downscaled exemplar. A [`PriorProvider`] supplies batches of related
//! low-resolution images; three implementations are included:
//!
//! * [`SyntheticAugment`] — crops, flips and photometric jitter of the
//!   exemplar itself (no external assets needed);
//! * [`DirectoryProvider`] — images from a folder, downscaled on demand;
//! * [`InversionProvider`] — inverts the exemplar through a pretrained
//!   latent-variable generator and samples perturbations of the recovered
//!   latent, so every batch element is a coherent whole image near the
//!   exemplar.
//!
//! Pretrained generators plug in through [`LatentGenerator`], either
//! in-process (see [`ToyLinearGenerator`]) or out-of-process over a Unix
//! socket ([`SocketGenerator`]). Inversion uses gradient descent through
//! the generator's graph when available and falls back to central finite
//! differences in latent space otherwise.

use std::io::{BufRead, BufReader, Read, Write};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array3, ArrayD};

use crate::error::{Error, Result};
use crate::imaging::{resize, ImageTensor, ResizeMode};
use crate::nn::adam::Adam;
use crate::nn::graph::{Graph, Tensor};
use crate::rng::Rng;

/// A pretrained generator mapping a latent vector to a small image.
pub trait LatentGenerator {
    fn latent_dim(&self) -> usize;
    /// `(channels, height, width)` of decoded images.
    fn output_dims(&self) -> (usize, usize, usize);
    /// Decode a latent to a unit-range image.
    fn decode(&mut self, z: &[f32]) -> Result<ImageTensor>;
    /// Optional differentiable decode: append the generator to `g` with
    /// `z` as a `[latent_dim]` node and return the `[c, h, w]` output
    /// node. Generators that cannot expose gradients return `None` and
    /// inversion falls back to finite differences.
    fn decode_graph(&self, _g: &mut Graph<f32>, _z: Tensor) -> Option<Tensor> {
        None
    }
}

/// Small in-process generator: `sigmoid(W z + b)` reshaped to an image.
/// Smooth and injective for random `W`, which makes it a good ground
/// truth for exercising the inversion machinery.
pub struct ToyLinearGenerator {
    w: Array2<f32>,
    b: Array1<f32>,
    dims: (usize, usize, usize),
    latent_dim: usize,
}

impl ToyLinearGenerator {
    pub fn new_random(rng: &mut Rng, latent_dim: usize, dims: (usize, usize, usize)) -> Self {
        let (c, h, w) = dims;
        let n = c * h * w;
        let std = 1.0 / (latent_dim as f32).sqrt();
        let mut wm = Array2::<f32>::zeros((n, latent_dim));
        for v in wm.iter_mut() {
            *v = rng.normal_f32() * std;
        }
        let mut b = Array1::<f32>::zeros(n);
        for v in b.iter_mut() {
            *v = rng.normal_f32() * 0.3;
        }
        ToyLinearGenerator {
            w: wm,
            b,
            dims,
            latent_dim,
        }
    }
}

impl LatentGenerator for ToyLinearGenerator {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn output_dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    fn decode(&mut self, z: &[f32]) -> Result<ImageTensor> {
        if z.len() != self.latent_dim {
            return Err(Error::InvalidArgument(format!(
                "latent has {} entries, generator expects {}",
                z.len(),
                self.latent_dim
            )));
        }
        let zv = Array1::from(z.to_vec());
        let lin = self.w.dot(&zv) + &self.b;
        let (c, h, w) = self.dims;
        let data = Array3::from_shape_vec(
            (c, h, w),
            lin.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
        )
        .expect("shape");
        Ok(ImageTensor::new(data))
    }

    fn decode_graph(&self, g: &mut Graph<f32>, z: Tensor) -> Option<Tensor> {
        let (c, h, w) = self.dims;
        let n = c * h * w;
        let z2 = g.reshape(z, &[self.latent_dim, 1]);
        let wt = g.constant(self.w.clone().into_dyn());
        let lin = g.matmul(wt, z2);
        let bt = g.constant(
            self.b
                .clone()
                .into_shape_with_order((n, 1))
                .expect("contiguous")
                .into_dyn(),
        );
        let with_bias = g.add(lin, bt);
        let act = g.sigmoid(with_bias);
        Some(g.reshape(act, &[c, h, w]))
    }
}

#[derive(serde::Deserialize)]
struct Handshake {
    latent_dim: usize,
    channels: usize,
    height: usize,
    width: usize,
}

/// Client for an out-of-process generator behind a Unix socket.
///
/// Wire format: on connect the server sends one JSON line
/// `{"latent_dim":k,"channels":c,"height":h,"width":w}`. Each request is
/// a little-endian `u32` latent length followed by that many `f32`s; each
/// response is three `u32`s (`c`, `h`, `w`) followed by `c*h*w` `f32`s in
/// unit range, `[c, h, w]` row-major.
pub struct SocketGenerator {
    reader: BufReader<UnixStream>,
    writer: UnixStream,
    latent_dim: usize,
    dims: (usize, usize, usize),
}

impl SocketGenerator {
    pub fn connect(path: &Path) -> Result<Self> {
        let stream = UnixStream::connect(path).map_err(|e| Error::io(path, e))?;
        let writer = stream.try_clone().map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(stream);
        let mut line = String::new();
        reader
            .read_line(&mut line)
            .map_err(|e| Error::Protocol(format!("reading handshake: {e}")))?;
        let hs: Handshake = serde_json::from_str(line.trim())
            .map_err(|e| Error::Protocol(format!("bad handshake {line:?}: {e}")))?;
        if hs.latent_dim == 0 || hs.channels == 0 || hs.height == 0 || hs.width == 0 {
            return Err(Error::Protocol(format!(
                "degenerate handshake: latent_dim={} dims={}x{}x{}",
                hs.latent_dim, hs.channels, hs.height, hs.width
            )));
        }
        Ok(SocketGenerator {
            reader,
            writer,
            latent_dim: hs.latent_dim,
            dims: (hs.channels, hs.height, hs.width),
        })
    }
}

impl LatentGenerator for SocketGenerator {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn output_dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    fn decode(&mut self, z: &[f32]) -> Result<ImageTensor> {
        if z.len() != self.latent_dim {
            return Err(Error::InvalidArgument(format!(
                "latent has {} entries, server expects {}",
                z.len(),
                self.latent_dim
            )));
        }
        let proto = |e: std::io::Error, what: &str| Error::Protocol(format!("{what}: {e}"));
        self.writer
            .write_u32::<LittleEndian>(z.len() as u32)
            .map_err(|e| proto(e, "writing latent length"))?;
        for &v in z {
            self.writer
                .write_f32::<LittleEndian>(v)
                .map_err(|e| proto(e, "writing latent"))?;
        }
        self.writer.flush().map_err(|e| proto(e, "flushing request"))?;
        let c = self
            .reader
            .read_u32::<LittleEndian>()
            .map_err(|e| proto(e, "reading channel count"))? as usize;
        let h = self
            .reader
            .read_u32::<LittleEndian>()
            .map_err(|e| proto(e, "reading height"))? as usize;
        let w = self
            .reader
            .read_u32::<LittleEndian>()
            .map_err(|e| proto(e, "reading width"))? as usize;
        if (c, h, w) != self.dims {
            return Err(Error::Protocol(format!(
                "server announced {:?} but sent {}x{}x{}",
                self.dims, c, h, w
            )));
        }
        let mut buf = vec![0f32; c * h * w];
        {
            let mut raw = vec![0u8; buf.len() * 4];
            self.reader
                .read_exact(&mut raw)
                .map_err(|e| proto(e, "reading pixels"))?;
            for (i, chunk) in raw.chunks_exact(4).enumerate() {
                buf[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
        }
        if buf.iter().any(|v| !v.is_finite() || *v < -0.01 || *v > 1.01) {
            return Err(Error::Protocol("server sent pixels outside unit range".into()));
        }
        let data = Array3::from_shape_vec((c, h, w), buf)
            .expect("shape")
            .mapv(|v| v.clamp(0.0, 1.0));
        Ok(ImageTensor::new(data))
    }
}

/// Settings for latent inversion.
#[derive(Clone, Debug)]
pub struct InvertCfg {
    pub iters: usize,
    pub lr: f32,
    /// Halve the learning rate every this many iterations.
    pub decay_every: usize,
    /// Finite-difference step for generators without a graph path.
    pub fd_step: f32,
}

impl Default for InvertCfg {
    fn default() -> Self {
        InvertCfg {
            iters: 500,
            lr: 0.05,
            decay_every: 100,
            fd_step: 1e-3,
        }
    }
}

/// Result of inverting a target image through a generator.
#[derive(Clone, Debug)]
pub struct Inversion {
    /// Best latent found.
    pub z: Vec<f32>,
    /// Mean squared error of `decode(z)` against the target.
    pub mse: f32,
    pub iters_run: usize,
    pub used_graph: bool,
    /// MSE after each iteration.
    pub trace: Vec<f32>,
}

fn mse_value(img: &ImageTensor, target: &ImageTensor) -> f32 {
    let n = img.data.len() as f64;
    let s: f64 = img
        .data
        .iter()
        .zip(target.data.iter())
        .map(|(a, b)| {
            let d = (*a - *b) as f64;
            d * d
        })
        .sum();
    (s / n) as f32
}

/// Recover a latent whose decoding matches `target` (same dims as the
/// generator's output). Keeps the best iterate seen; the learning rate
/// halves on a fixed schedule so late iterations refine rather than
/// oscillate.
pub fn invert(
    gen: &mut dyn LatentGenerator,
    target: &ImageTensor,
    cfg: &InvertCfg,
) -> Result<Inversion> {
    let dims = gen.output_dims();
    let tdims = (target.channels(), target.height(), target.width());
    if tdims != dims {
        return Err(Error::InvalidArgument(format!(
            "target is {tdims:?} but the generator outputs {dims:?} — resize first"
        )));
    }
    if cfg.iters == 0 {
        return Err(Error::InvalidArgument("inversion needs at least one iteration".into()));
    }
    let k = gen.latent_dim();
    let used_graph = {
        let mut probe = Graph::<f32>::new();
        let z = probe.constant(ArrayD::zeros(ndarray::IxDyn(&[k])));
        gen.decode_graph(&mut probe, z).is_some()
    };

    let mut z = ArrayD::<f32>::zeros(ndarray::IxDyn(&[k]));
    let mut opt = Adam::new(cfg.lr, &[&z]);
    let mut best_z = z.clone();
    let mut best_mse = f32::INFINITY;
    let mut trace = Vec::with_capacity(cfg.iters);

    for it in 0..cfg.iters {
        if it > 0 && cfg.decay_every > 0 && it % cfg.decay_every == 0 {
            opt.set_lr(opt.lr() * 0.5);
        }
        let (mse, grad) = if used_graph {
            let mut g = Graph::<f32>::new();
            let zt = g.leaf(z.clone());
            let out = gen.decode_graph(&mut g, zt).expect("probed as graph-capable");
            let tgt = g.constant(target.data.clone().into_dyn());
            let d = g.sub(out, tgt);
            let sq = g.mul(d, d);
            let loss = g.mean_all(sq);
            g.backward(loss);
            (g.scalar_value(loss), g.grad(zt).cloned().expect("leaf grad"))
        } else {
            let zs: Vec<f32> = z.iter().copied().collect();
            let base = mse_value(&gen.decode(&zs)?, target);
            let mut grad = ArrayD::<f32>::zeros(ndarray::IxDyn(&[k]));
            for i in 0..k {
                let mut zp = zs.clone();
                zp[i] += cfg.fd_step;
                let lp = mse_value(&gen.decode(&zp)?, target);
                zp[i] = zs[i] - cfg.fd_step;
                let lm = mse_value(&gen.decode(&zp)?, target);
                grad[i] = (lp - lm) / (2.0 * cfg.fd_step);
            }
            (base, grad)
        };
        trace.push(mse);
        if mse < best_mse {
            best_mse = mse;
            best_z = z.clone();
        }
        let grads = vec![Some(grad)];
        let mut params: Vec<&mut ArrayD<f32>> = vec![&mut z];
        opt.step(&mut params, &grads);
    }
    // Score the final iterate too.
    let final_mse = {
        let zs: Vec<f32> = z.iter().copied().collect();
        mse_value(&gen.decode(&zs)?, target)
    };
    if final_mse < best_mse {
        best_mse = final_mse;
        best_z = z;
    }
    Ok(Inversion {
        z: best_z.iter().copied().collect(),
        mse: best_mse,
        iters_run: cfg.iters,
        used_graph,
        trace,
    })
}

/// Decode `n` Gaussian perturbations of `z` (scale `sigma`).
pub fn perturb_and_sample(
    gen: &mut dyn LatentGenerator,
    z: &[f32],
    sigma: f32,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<ImageTensor>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let zp: Vec<f32> = z.iter().map(|&v| v + sigma * rng.normal_f32()).collect();
        out.push(gen.decode(&zp)?);
    }
    Ok(out)
}

/// Supplies batches of low-resolution prior images at a requested size.
pub trait PriorProvider {
    fn batch(&mut self, rng: &mut Rng, n: usize, h: usize, w: usize) -> Result<Vec<ImageTensor>>;
    fn name(&self) -> &'static str;
}

/// Photometric/geometric augmentation settings for [`SyntheticAugment`].
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AugSpec {
    pub hflip: bool,
    /// Smallest crop scale, in `(0, 1]`; `1.0` disables cropping.
    pub crop_min: f32,
    /// Brightness/contrast jitter amplitude.
    pub jitter: f32,
    /// Additive Gaussian pixel noise scale.
    pub noise: f32,
}

impl Default for AugSpec {
    fn default() -> Self {
        AugSpec {
            hflip: true,
            crop_min: 0.75,
            jitter: 0.1,
            noise: 0.02,
        }
    }
}

impl AugSpec {
    /// True when every augmentation is disabled — such a spec would feed
    /// the critic identical copies and teach it nothing.
    pub fn is_trivial(&self) -> bool {
        !self.hflip && self.crop_min >= 1.0 && self.jitter == 0.0 && self.noise == 0.0
    }
}

/// Prior built from augmented crops of the source image itself.
pub struct SyntheticAugment {
    source: ImageTensor,
    spec: AugSpec,
}

impl SyntheticAugment {
    pub fn new(source: ImageTensor, spec: AugSpec) -> Result<Self> {
        if spec.is_trivial() {
            return Err(Error::InvalidArgument(
                "all augmentations disabled: the synthetic prior would be a constant".into(),
            ));
        }
        if !(0.0..=1.0).contains(&spec.crop_min) || spec.crop_min == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "crop_min must be in (0, 1], got {}",
                spec.crop_min
            )));
        }
        if source.height() < 2 || source.width() < 2 {
            return Err(Error::ImageTooSmall {
                height: source.height(),
                width: source.width(),
                min: 2,
            });
        }
        Ok(SyntheticAugment { source, spec })
    }
}

impl PriorProvider for SyntheticAugment {
    fn batch(&mut self, rng: &mut Rng, n: usize, h: usize, w: usize) -> Result<Vec<ImageTensor>> {
        let (sh, sw) = self.source.dims();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut img = if self.spec.crop_min < 1.0 {
                let u = self.spec.crop_min + (1.0 - self.spec.crop_min) * rng.uniform_f32();
                let ch = ((sh as f32 * u).round() as usize).clamp(2, sh);
                let cw = ((sw as f32 * u).round() as usize).clamp(2, sw);
                let y0 = rng.below(sh - ch + 1);
                let x0 = rng.below(sw - cw + 1);
                self.source.crop(y0, x0, ch, cw)
            } else {
                self.source.clone()
            };
            if self.spec.hflip && rng.uniform_f32() < 0.5 {
                img = img.hflip();
            }
            let mut img = resize(&img, h, w, ResizeMode::Bicubic)?;
            if self.spec.jitter > 0.0 || self.spec.noise > 0.0 {
                let contrast = 1.0 + self.spec.jitter * (2.0 * rng.uniform_f32() - 1.0);
                let bright = 0.5 * self.spec.jitter * (2.0 * rng.uniform_f32() - 1.0);
                for v in img.data.iter_mut() {
                    let mut x = (*v - 0.5) * contrast + 0.5 + bright;
                    if self.spec.noise > 0.0 {
                        x += self.spec.noise * rng.normal_f32();
                    }
                    *v = x.clamp(0.0, 1.0);
                }
            }
            out.push(img);
        }
        Ok(out)
    }

    fn name(&self) -> &'static str {
        "synthetic"
    }
}

/// Prior drawn from a folder of images (PNG/JPEG), resized per batch.
pub struct DirectoryProvider {
    images: Vec<ImageTensor>,
    pub dir: PathBuf,
}

impl DirectoryProvider {
    pub fn new(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|ent| ent.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| {
                        let e = e.to_ascii_lowercase();
                        e == "png" || e == "jpg" || e == "jpeg"
                    })
                    .unwrap_or(false)
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no PNG/JPEG images found in {}",
                dir.display()
            )));
        }
        let mut images = Vec::with_capacity(paths.len());
        for (index, p) in paths.iter().enumerate() {
            let img = crate::imaging::load_image(p).map_err(|e| Error::Provider {
                index,
                reason: format!("{}: {e}", p.display()),
            })?;
            images.push(img);
        }
        Ok(DirectoryProvider {
            images,
            dir: dir.to_owned(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl PriorProvider for DirectoryProvider {
    fn batch(&mut self, rng: &mut Rng, n: usize, h: usize, w: usize) -> Result<Vec<ImageTensor>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let img = &self.images[rng.below(self.images.len())];
            out.push(resize(img, h, w, ResizeMode::Bicubic)?);
        }
        Ok(out)
    }

    fn name(&self) -> &'static str {
        "directory"
    }
}

/// Prior that inverts the exemplar through a pretrained generator once,
/// then samples latent perturbations around the recovered point.
pub struct InversionProvider {
    gen: Box<dyn LatentGenerator>,
    z_star: Vec<f32>,
    sigma: f32,
}

impl InversionProvider {
    /// Inverts `exemplar_low` (resized to the generator's native output
    /// size first) and keeps the recovered latent.
    pub fn new(
        mut gen: Box<dyn LatentGenerator>,
        exemplar_low: &ImageTensor,
        sigma: f32,
        cfg: &InvertCfg,
    ) -> Result<(Self, Inversion)> {
        if sigma < 0.0 {
            return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
        }
        let (_, gh, gw) = gen.output_dims();
        let target = if (exemplar_low.height(), exemplar_low.width()) == (gh, gw) {
            exemplar_low.clone()
        } else {
            resize(exemplar_low, gh, gw, ResizeMode::Bicubic)?
        };
        let inv = invert(gen.as_mut(), &target, cfg)?;
        Ok((
            InversionProvider {
                gen,
                z_star: inv.z.clone(),
                sigma,
            },
            inv,
        ))
    }

    pub fn latent(&self) -> &[f32] {
        &self.z_star
    }
}

impl PriorProvider for InversionProvider {
    fn batch(&mut self, rng: &mut Rng, n: usize, h: usize, w: usize) -> Result<Vec<ImageTensor>> {
        let samples = perturb_and_sample(self.gen.as_mut(), &self.z_star, self.sigma, n, rng)?;
        samples
            .into_iter()
            .map(|img| {
                if (img.height(), img.width()) == (h, w) {
                    Ok(img)
                } else {
                    resize(&img, h, w, ResizeMode::Bicubic)
                }
            })
            .collect()
    }

    fn name(&self) -> &'static str {
        "inversion"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::os::unix::net::UnixListener;

    #[test]
    fn toy_generator_decodes_unit_range_deterministically() {
        let mut rng = Rng::new(51, "prior-toy");
        let mut gen = ToyLinearGenerator::new_random(&mut rng, 6, (3, 8, 8));
        let z = vec![0.3f32, -0.2, 0.8, 0.0, -1.1, 0.4];
        let a = gen.decode(&z).unwrap();
        let b = gen.decode(&z).unwrap();
        assert_eq!(a.data, b.data);
        assert!(a.in_range(0.0, 1.0, 0.0));
        assert_eq!((a.channels(), a.height(), a.width()), (3, 8, 8));
        assert!(gen.decode(&z[..3]).is_err(), "wrong latent length");
    }

    #[test]
    fn graph_decode_matches_value_decode() {
        let mut rng = Rng::new(52, "prior-graph");
        let mut gen = ToyLinearGenerator::new_random(&mut rng, 5, (3, 6, 6));
        let z: Vec<f32> = (0..5).map(|i| (i as f32 - 2.0) * 0.3).collect();
        let by_value = gen.decode(&z).unwrap();
        let mut g = Graph::<f32>::new();
        let zt = g.constant(Array1::from(z).into_dyn());
        let out = gen.decode_graph(&mut g, zt).unwrap();
        let gv = g.value(out);
        let max_err = gv
            .iter()
            .zip(by_value.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 1e-6, "graph and value decode diverge by {max_err}");
    }

    #[test]
    fn inversion_recovers_a_reachable_target() {
        let mut rng = Rng::new(53, "prior-invert");
        let mut gen = ToyLinearGenerator::new_random(&mut rng, 6, (3, 8, 8));
        let z_true: Vec<f32> = (0..6).map(|_| rng.normal_f32()).collect();
        let target = gen.decode(&z_true).unwrap();
        let cfg = InvertCfg {
            iters: 400,
            ..InvertCfg::default()
        };
        let inv = invert(&mut gen, &target, &cfg).unwrap();
        assert!(inv.used_graph);
        assert!(inv.mse < 1e-4, "inversion MSE {}", inv.mse);
        assert!(
            inv.trace.first().copied().unwrap() > inv.mse * 10.0,
            "optimization should make large progress"
        );
    }

    /// Wrapper that hides the graph path, forcing finite differences.
    struct NoGraph(ToyLinearGenerator);

    impl LatentGenerator for NoGraph {
        fn latent_dim(&self) -> usize {
            self.0.latent_dim()
        }
        fn output_dims(&self) -> (usize, usize, usize) {
            self.0.output_dims()
        }
        fn decode(&mut self, z: &[f32]) -> Result<ImageTensor> {
            self.0.decode(z)
        }
    }

    #[test]
    fn finite_difference_fallback_also_inverts() {
        let mut rng = Rng::new(54, "prior-fd");
        let inner = ToyLinearGenerator::new_random(&mut rng, 4, (3, 6, 6));
        let mut gen = NoGraph(inner);
        let z_true: Vec<f32> = (0..4).map(|_| rng.normal_f32() * 0.8).collect();
        let target = gen.decode(&z_true).unwrap();
        let cfg = InvertCfg {
            iters: 300,
            ..InvertCfg::default()
        };
        let inv = invert(&mut gen, &target, &cfg).unwrap();
        assert!(!inv.used_graph);
        assert!(inv.mse < 1e-3, "FD inversion MSE {}", inv.mse);
    }

    #[test]
    fn inversion_rejects_mismatched_target() {
        let mut rng = Rng::new(55, "prior-dims");
        let mut gen = ToyLinearGenerator::new_random(&mut rng, 4, (3, 8, 8));
        let target = ImageTensor::new(Array3::zeros((3, 6, 6)));
        assert!(invert(&mut gen, &target, &InvertCfg::default()).is_err());
    }

    fn serve_toy(listener: UnixListener, mut gen: ToyLinearGenerator) {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut writer = stream;
        let (c, h, w) = gen.output_dims();
        let hello = format!(
            "{{\"latent_dim\":{},\"channels\":{c},\"height\":{h},\"width\":{w}}}\n",
            gen.latent_dim()
        );
        writer.write_all(hello.as_bytes()).unwrap();
        writer.flush().unwrap();
        loop {
            let dim = match reader.read_u32::<LittleEndian>() {
                Ok(d) => d as usize,
                Err(_) => return, // client hung up
            };
            let mut z = vec![0f32; dim];
            for v in z.iter_mut() {
                *v = reader.read_f32::<LittleEndian>().unwrap();
            }
            let img = gen.decode(&z).unwrap();
            writer.write_u32::<LittleEndian>(c as u32).unwrap();
            writer.write_u32::<LittleEndian>(h as u32).unwrap();
            writer.write_u32::<LittleEndian>(w as u32).unwrap();
            for v in img.data.iter() {
                writer.write_f32::<LittleEndian>(*v).unwrap();
            }
            writer.flush().unwrap();
        }
    }

    #[test]
    fn socket_generator_round_trips_the_protocol() {
        let dir = tempfile::tempdir().unwrap();
        let sock = dir.path().join("gen.sock");
        let mut rng = Rng::new(56, "prior-sock");
        let gen = ToyLinearGenerator::new_random(&mut rng, 5, (3, 8, 8));
        let mut local = ToyLinearGenerator::new_random(&mut Rng::new(56, "prior-sock"), 5, (3, 8, 8));
        let listener = UnixListener::bind(&sock).unwrap();
        let handle = std::thread::spawn(move || serve_toy(listener, gen));

        let mut client = SocketGenerator::connect(&sock).unwrap();
        assert_eq!(client.latent_dim(), 5);
        assert_eq!(client.output_dims(), (3, 8, 8));
        let z = vec![0.5f32, -0.25, 0.1, 0.9, -0.4];
        let remote = client.decode(&z).unwrap();
        let expected = local.decode(&z).unwrap();
        assert_eq!(remote.data, expected.data, "socket decode must match local decode");
        drop(client);
        handle.join().unwrap();
    }

    #[test]
    fn socket_generator_rejects_bad_handshake() {
        let dir = tempfile::tempdir().unwrap();
        let sock = dir.path().join("bad.sock");
        let listener = UnixListener::bind(&sock).unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            stream.write_all(b"not json at all\n").unwrap();
        });
        let err = match SocketGenerator::connect(&sock) {
            Ok(_) => panic!("connect should fail on a bad handshake"),
            Err(e) => e,
        };
        assert!(matches!(err, Error::Protocol(_)), "got {err:?}");
        handle.join().unwrap();
    }

    fn gradient_image(h: usize, w: usize) -> ImageTensor {
        let mut a = Array3::<f32>::zeros((3, h, w));
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    a[[c, y, x]] = (x as f32 / (w - 1) as f32 + c as f32 * 0.1).min(1.0);
                }
            }
        }
        ImageTensor::new(a)
    }

    #[test]
    fn synthetic_prior_produces_varied_batches() {
        let src = gradient_image(32, 32);
        let mut provider = SyntheticAugment::new(src.clone(), AugSpec::default()).unwrap();
        let mut rng = Rng::new(57, "prior-aug");
        let batch = provider.batch(&mut rng, 6, 8, 8).unwrap();
        assert_eq!(batch.len(), 6);
        for img in &batch {
            assert_eq!((img.channels(), img.height(), img.width()), (3, 8, 8));
            assert!(img.in_range(0.0, 1.0, 0.0));
        }
        // Batch elements should not all be identical.
        let distinct = batch
            .iter()
            .any(|img| img.data != batch[0].data);
        assert!(distinct, "augmentations must produce variety");
        // Determinism: a fresh rng with the same key gives the same batch.
        let mut provider2 = SyntheticAugment::new(src, AugSpec::default()).unwrap();
        let mut rng2 = Rng::new(57, "prior-aug");
        let batch2 = provider2.batch(&mut rng2, 6, 8, 8).unwrap();
        for (a, b) in batch.iter().zip(batch2.iter()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn trivial_augmentation_spec_is_rejected() {
        let src = gradient_image(16, 16);
        let spec = AugSpec {
            hflip: false,
            crop_min: 1.0,
            jitter: 0.0,
            noise: 0.0,
        };
        assert!(SyntheticAugment::new(src, spec).is_err());
    }

    #[test]
    fn directory_provider_loads_and_resizes() {
        let dir = tempfile::tempdir().unwrap();
        let a = gradient_image(20, 24);
        let b = gradient_image(14, 14);
        crate::imaging::save_png(&a, &dir.path().join("a.png")).unwrap();
        crate::imaging::save_png(&b, &dir.path().join("b.png")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let mut provider = DirectoryProvider::new(dir.path()).unwrap();
        assert_eq!(provider.len(), 2);
        let mut rng = Rng::new(58, "prior-dir");
        let batch = provider.batch(&mut rng, 4, 10, 10).unwrap();
        for img in &batch {
            assert_eq!((img.height(), img.width()), (10, 10));
        }
        let empty = tempfile::tempdir().unwrap();
        assert!(DirectoryProvider::new(empty.path()).is_err());
    }

    #[test]
    fn inversion_provider_centers_on_the_recovered_latent() {
        let mut rng = Rng::new(59, "prior-invprov");
        let mut gen = ToyLinearGenerator::new_random(&mut rng, 6, (3, 8, 8));
        let z_true: Vec<f32> = (0..6).map(|_| rng.normal_f32() * 0.7).collect();
        let exemplar = gen.decode(&z_true).unwrap();
        let cfg = InvertCfg {
            iters: 300,
            ..InvertCfg::default()
        };
        let (mut provider, inv) =
            InversionProvider::new(Box::new(gen), &exemplar, 0.0, &cfg).unwrap();
        assert!(inv.mse < 1e-3);
        // sigma = 0: every batch element is the reconstruction itself.
        let batch = provider.batch(&mut rng.stream("b"), 3, 8, 8).unwrap();
        for img in &batch {
            assert_eq!(img.data, batch[0].data);
        }
        let err = mse_value(&batch[0], &exemplar);
        assert!(err < 1e-3, "reconstruction error {err}");
        // Positive sigma produces variety.
        let (mut provider2, _) = InversionProvider::new(
            Box::new(ToyLinearGenerator::new_random(&mut Rng::new(59, "g2"), 6, (3, 8, 8))),
            &exemplar,
            0.5,
            &cfg,
        )
        .unwrap();
        let batch2 = provider2.batch(&mut rng.stream("b2"), 4, 8, 8).unwrap();
        assert!(batch2.iter().any(|img| img.data != batch2[0].data));
    }
}
