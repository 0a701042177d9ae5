//! Overfits the desk VAE to a checkerboard sphere and reports held-out PSNR.
//!
//! Usage: `cargo run --release --example overfit_sphere -- [max_steps] [lr]`

use std::time::Instant;

use texfield::bake::point_psnr;
use texfield::geometry::{sample_surface, shapes::checker_sphere};
use texfield::vae::{train_vae, Plateau, PreparedCloud, Vae, VaeConfig, VaeTrainOptions};

fn main() -> texfield::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let mesh = checker_sphere(64, 32, 8, 4, [0.85, 0.2, 0.15], [0.15, 0.25, 0.85]);
    let train = sample_surface(&mesh, 200_000, 1, false)?;
    let held = sample_surface(&mesh, 20_000, 2, false)?;
    let points: Vec<[f64; 3]> = held.iter().map(|s| s.position).collect();
    let truth: Vec<[f64; 3]> = held.iter().map(|s| s.color).collect();

    let mut vae = Vae::<f32>::new(VaeConfig::desk(), 0)?;
    let evaluate = |vae: &Vae<f32>| -> texfield::Result<f64> {
        let latent = vae.encode(&train, 32, 0, false)?;
        let pred = vae.color_field(&latent)?.query_all(&points)?;
        Ok(point_psnr(&pred, &truth)?.psnr)
    };
    println!("untrained psnr {:.2}", evaluate(&vae)?);

    let opts = VaeTrainOptions {
        steps,
        lr,
        plateau: Some(Plateau { window: 250, patience: 4, min_improvement: 0.01 }),
        ..VaeTrainOptions::default()
    };
    let t0 = Instant::now();
    let losses = train_vae(&mut vae, &[PreparedCloud::new(train.clone(), 32)?], &opts, |s, l| {
        if s % 250 == 0 {
            println!("step {s} loss {l:.5} t {:.0}s", t0.elapsed().as_secs_f64());
        }
    })?;
    println!("stopped after {} steps, {:.0}s", losses.len(), t0.elapsed().as_secs_f64());
    println!("trained psnr {:.2}", evaluate(&vae)?);
    Ok(())
}
