use std::time::Instant;
use vidmask::codec::Codec;
use vidmask::data::make_dataset;
use vidmask::nn::ArchConfig;
use vidmask::schedule::build_schedule;
use vidmask::tasks::{transition, SamplerSettings, TransitionRequest};
use vidmask::train::{smoothed_loss, train, TrainConfig};

fn main() {
    let arch = ArchConfig::default();
    let data = make_dataset(8, 153, 16, 16, 16).unwrap();
    let sched = build_schedule(200, 1e-4, 0.06).unwrap();
    let cfg = TrainConfig {
        total_steps: 20_000,
        batch_size: 2,
        checkpoint_every: 0,
        target_loss: Some(0.035),
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train(
        &cfg, &arch, &data, &Codec::Identity, &sched,
        |step, _| {
            if step % 500 == 0 {
                eprintln!("step {step} ({:.0}s)", t0.elapsed().as_secs_f64());
            }
        },
        |_, _| Ok(()),
    )
    .unwrap();
    println!(
        "trained: target at {:?}, smoothed {:.4}, wall {:.0}s",
        out.reached_target_at,
        smoothed_loss(&out.history, 50).unwrap(),
        t0.elapsed().as_secs_f64()
    );

    for (i, clip) in data.iter().enumerate() {
        let req = TransitionRequest {
            s1: clip.frame_owned(0),
            s2: clip.frame_owned(15),
            caption: clip.caption.clone(),
            n: 16,
            seed: 1000 + i as u64,
            sampler: SamplerSettings::default(),
        };
        let gen = transition(&req, &out.params, &Codec::Identity, &sched).unwrap();
        // interior MAE vs ground truth
        let mut sum = 0.0f64;
        let mut cnt = 0usize;
        for f in 1..15 {
            for (a, b) in gen.frame(f).iter().zip(clip.frame(f).iter()) {
                sum += (a - b).abs() as f64;
                cnt += 1;
            }
        }
        println!("clip {i} [{}]: interior MAE {:.4}", clip.caption, sum / cnt as f64);
    }
    println!("total wall {:.0}s", t0.elapsed().as_secs_f64());
}
