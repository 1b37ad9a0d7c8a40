use std::time::Instant;
use vidmask::codec::Codec;
use vidmask::data::make_dataset;
use vidmask::nn::ArchConfig;
use vidmask::schedule::build_schedule;
use vidmask::train::{train, TrainConfig};

fn main() {
    let arch = ArchConfig::default();
    let data = make_dataset(8, 160, 16, 16, 16).unwrap();
    let sched = build_schedule(200, 1e-4, 0.02).unwrap();
    for batch in [1usize, 2, 4] {
        let cfg = TrainConfig {
            total_steps: 30,
            batch_size: batch,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let out = train(&cfg, &arch, &data, &Codec::Identity, &sched, |_, _| {}, |_, _| Ok(())).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!(
            "batch {batch}: {:.3} s/step ({:.1} steps/s), last loss {:.4}",
            dt / 30.0,
            30.0 / dt,
            out.history.last().unwrap().1
        );
    }
}
