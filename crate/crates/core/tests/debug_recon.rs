//! Scratch debugging for desk-scale reconstruction (removed before final).

use ndarray::Array3;
use petsgan::dipnet::{internal_prior_loss, perturb_signed, DipNet, DipNetCfg};
use petsgan::imaging::{preprocess, psnr_db, ImageTensor};
use petsgan::nn::adam::Adam;
use petsgan::nn::graph::Graph;
use petsgan::nn::layers::Binder;
use petsgan::rng::Rng;
use petsgan::trainer::RunConfig;

fn desk_source(side: usize) -> ImageTensor {
    let mut a = Array3::<f32>::zeros((3, side, side));
    for y in 0..side {
        for x in 0..side {
            let fy = y as f32 / side as f32;
            let fx = x as f32 / side as f32;
            let bars = if (x / 5) % 2 == 0 { 0.25 } else { 0.0 };
            let block = if y > side / 2 && x > side / 2 { 0.3 } else { 0.0 };
            a[[0, y, x]] = (0.2 + 0.5 * fx + bars).min(1.0);
            a[[1, y, x]] = (0.3 + 0.4 * fy + block).min(1.0);
            a[[2, y, x]] = (0.5 + 0.3 * (fx * 13.0).sin().abs()).min(1.0);
        }
    }
    ImageTensor::new(a)
}

#[test]
#[ignore]
fn loss_curve_at_desk_scale() {
    let img = desk_source(256);
    let pre = preprocess(&img, 64, 8, 24).unwrap();
    println!("full {:?}, low {:?}", pre.full.dims(), pre.low.dims());

    let dcfg = {
        let mut c = RunConfig::desk();
        c.epochs = 1;
        DipNetCfg {
            pt_window: c.pt_window,
            temperature: c.temperature,
            embedder: c.f_embedder,
            embed_dim: c.f_embed_dim,
            ir_channels: c.f_ir_channels,
            ir_res_blocks: c.f_ir_res_blocks,
            up_factor: c.down_factor,
        }
    };
    println!("cfg: {:?}", dcfg);
    let mut dip = DipNet::new(&mut Rng::new(7, "dbg/init"), &pre.low, &dcfg).unwrap();
    let mut opt = {
        let mut refs = Vec::new();
        dip.collect(&mut refs);
        Adam::new(2e-3, &refs.iter().map(|(_, p)| &**p).collect::<Vec<_>>())
    };
    for step in 0..400 {
        let perturbed = perturb_signed(&pre.low, &mut Rng::new(7, &format!("dbg/{step}")), 0.05);
        let mut g = Graph::<f32>::new();
        let mut binder = Binder::trainable();
        let il = internal_prior_loss(&mut g, &dip, &mut binder, &pre.full, &perturbed, 0.01).unwrap();
        g.backward(il.loss);
        let recon = g.scalar_value(il.recon);
        let mmc = il.meta.mean_max_coeff;
        if step % 50 == 0 || step == 399 {
            // Also gradient magnitude of the first IR parameter.
            let grads = binder.grads(&g);
            let gnorm: f32 = grads
                .iter()
                .flatten()
                .map(|a| a.iter().map(|x| x * x).sum::<f32>())
                .sum::<f32>()
                .sqrt();
            println!(
                "step {step}: recon {recon:.4}, mean_max_coeff {mmc:.3}, grad norm {gnorm:.4}"
            );
        }
        let grads = binder.grads(&g);
        let mut muts = Vec::new();
        dip.collect_mut(&mut muts);
        let mut arrays: Vec<&mut ndarray::ArrayD<f32>> =
            muts.into_iter().map(|(_, p)| p).collect();
        opt.step(&mut arrays, &grads);
    }
    let (recon_img, attn) = dip.apply(&pre.low).unwrap();
    println!(
        "final psnr {:.2} dB, attn mean max {:.3}",
        psnr_db(&recon_img, &pre.full),
        attn.mean_max_coeff
    );
}
