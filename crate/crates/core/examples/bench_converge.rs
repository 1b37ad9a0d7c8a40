use std::time::Instant;
use vidmask::codec::Codec;
use vidmask::data::make_dataset;
use vidmask::nn::ArchConfig;
use vidmask::schedule::build_schedule;
use vidmask::train::{smoothed_loss, train, TrainConfig};

fn main() {
    let arch = ArchConfig::default();
    let data = make_dataset(8, 160, 16, 16, 16).unwrap();
    let sched = build_schedule(200, 1e-4, 0.02).unwrap();
    let cfg = TrainConfig {
        total_steps: 8000,
        batch_size: 2,
        checkpoint_every: 0,
        target_loss: Some(0.045),
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let mut hist = Vec::new();
    let out = train(
        &cfg,
        &arch,
        &data,
        &Codec::Identity,
        &sched,
        |step, loss| {
            hist.push((step, loss));
            if step % 200 == 0 {
                let sm = smoothed_loss(&hist, 50).unwrap();
                println!("step {step}: loss {loss:.4} smoothed {sm:.4} ({:.0}s)", t0.elapsed().as_secs_f64());
            }
        },
        |_, _| Ok(()),
    )
    .unwrap();
    println!(
        "done: reached target at {:?}, final smoothed {:.4}, wall {:.0}s",
        out.reached_target_at,
        smoothed_loss(&out.history, 50).unwrap(),
        t0.elapsed().as_secs_f64()
    );
}
