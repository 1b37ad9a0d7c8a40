use vidmask::codec::Codec;
use vidmask::data::make_dataset;
use vidmask::nn::ArchConfig;
use vidmask::schedule::build_schedule;
use vidmask::tasks::{transition, SamplerSettings, TransitionRequest};
use vidmask::train::{smoothed_loss, train, TrainConfig};

fn main() {
    let arch = ArchConfig::default();
    let data = make_dataset(1, 153, 16, 16, 16).unwrap();
    println!("clip: {}", data[0].caption);
    let sched = build_schedule(200, 1e-4, 0.06).unwrap();
    let tc = TrainConfig {
        total_steps: 6000,
        batch_size: 2,
        checkpoint_every: 0,
        target_loss: Some(0.015),
        ..TrainConfig::default()
    };
    let out = train(&tc, &arch, &data, &Codec::Identity, &sched, |s, l| {
        if s % 500 == 0 { eprintln!("step {s} loss {l:.4}"); }
    }, |_, _| Ok(())).unwrap();
    println!("smoothed {:.4} at {} steps", smoothed_loss(&out.history, 50).unwrap(), out.history.len());

    let clip = &data[0];
    let req = TransitionRequest {
        s1: clip.frame_owned(0),
        s2: clip.frame_owned(15),
        caption: clip.caption.clone(),
        n: 16,
        seed: 5,
        sampler: SamplerSettings::default(),
    };
    let gen = transition(&req, &out.params, &Codec::Identity, &sched).unwrap();
    let mut sum = 0.0f32;
    let mut cnt = 0;
    for f in 1..15 {
        for (a, b) in gen.frame(f).iter().zip(clip.frame(f).iter()) {
            sum += (a - b).abs();
            cnt += 1;
        }
    }
    println!("single-clip transition interior MAE {:.4}", sum / cnt as f32);
}
