use std::collections::BTreeMap;
use std::path::Path;
use vidmask::codec::Codec;
use vidmask::data::{make_dataset, tokenize};
use vidmask::diffusion::{ddim_step, ddim_timesteps, forward_corrupt, sample_noise_grid, training_loss};
use vidmask::grid::LatentGrid;
use vidmask::io::config::Config;
use vidmask::io::{load_checkpoint, save_checkpoint};
use vidmask::mask::{apply_mask, assemble_input, transition_mask};
use vidmask::nn::{embed_caption, predict_noise};
use vidmask::schedule::build_schedule;
use vidmask::tasks::{transition, SamplerSettings, TransitionRequest};
use vidmask::train::{train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = Config::default();
    let arch = cfg.arch();
    let data = make_dataset(8, 153, 16, 16, 16).unwrap();
    let sched = build_schedule(200, 1e-4, 0.06).unwrap();
    let ckpt = Path::new("/root/notes/debug_ckpt.bin");

    let params = if ckpt.exists() {
        load_checkpoint(ckpt).unwrap().params
    } else {
        let tc = TrainConfig {
            total_steps: 20_000,
            batch_size: 2,
            checkpoint_every: 0,
            target_loss: Some(0.035),
            ..TrainConfig::default()
        };
        let out = train(&tc, &arch, &data, &Codec::Identity, &sched, |s, l| {
            if s % 500 == 0 { eprintln!("step {s} loss {l:.4}"); }
        }, |_, _| Ok(())).unwrap();
        save_checkpoint(ckpt, &out.params, &Codec::Identity, &cfg).unwrap();
        out.params
    };

    let clip = &data[0];
    println!("clip: {}", clip.caption);
    let z0 = LatentGrid { values: clip.frames.clone() };
    let mask = transition_mask(16).unwrap();
    let z0m = apply_mask(&z0, &mask).unwrap();
    let tokens = tokenize(&clip.caption).unwrap();
    let text = embed_caption(&params, &tokens).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    // 1) on-distribution eps-MSE and z0-recovery per t
    for t in [5usize, 25, 50, 100, 150, 200] {
        let eps = sample_noise_grid(16, 3, 16, 16, &mut rng);
        let z_t = forward_corrupt(&z0, t, &eps, &sched).unwrap();
        let input = assemble_input(&z_t, &mask, &z0m).unwrap();
        let pred = predict_noise(&params, &input, t, &text).unwrap();
        let mse = training_loss(&eps, &pred).unwrap();
        let ab = sched.alphabar(t);
        let z0_hat = LatentGrid {
            values: (&z_t.values - &(&pred.values * (1.0 - ab).sqrt() as f32)) / (ab.sqrt() as f32),
        };
        let z0_mae: f32 = z0_hat.values.iter().zip(z0.values.iter()).map(|(a, b)| (a - b).abs()).sum::<f32>() / z0.values.len() as f32;
        println!("t={t:3}: eps MSE {mse:.4}, z0_hat MAE {z0_mae:.4}");
    }

    // 2) chain from on-distribution z_T vs pure noise
    for start in ["on-dist", "pure-noise"] {
        let eps = sample_noise_grid(16, 3, 16, 16, &mut rng);
        let mut z = if start == "on-dist" {
            forward_corrupt(&z0, 200, &eps, &sched).unwrap()
        } else {
            eps.clone()
        };
        let ts = ddim_timesteps(200, 50).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
            let input = assemble_input(&z, &mask, &z0m).unwrap();
            let pred = predict_noise(&params, &input, t, &text).unwrap();
            z = ddim_step(&z, &pred, t, t_prev, &sched, 0.0, None).unwrap();
        }
        let mae: f32 = z.values.iter().zip(z0.values.iter()).map(|(a, b)| (a - b).abs()).sum::<f32>() / z0.values.len() as f32;
        let mean_out: f32 = z.values.iter().sum::<f32>() / z.values.len() as f32;
        let mean_true: f32 = z0.values.iter().sum::<f32>() / z0.values.len() as f32;
        println!("chain[{start}]: latent MAE {mae:.4}, mean out {mean_out:.3} vs true {mean_true:.3}");
    }

    // 3) the actual transition task
    let req = TransitionRequest {
        s1: clip.frame_owned(0),
        s2: clip.frame_owned(15),
        caption: clip.caption.clone(),
        n: 16,
        seed: 5,
        sampler: SamplerSettings::default(),
    };
    let gen = transition(&req, &params, &Codec::Identity, &sched).unwrap();
    let mut sum = 0.0f32;
    let mut cnt = 0;
    for f in 1..15 {
        for (a, b) in gen.frame(f).iter().zip(clip.frame(f).iter()) {
            sum += (a - b).abs();
            cnt += 1;
        }
    }
    println!("transition interior MAE {:.4}", sum / cnt as f32);
}
