//! Command-line surface: training, the three generation tasks, story
//! assembly, baselines, evaluation, and dataset export.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use vidmask::baselines::{cross_dissolve, inversion_interp, latent_interp, morph_with_correspondences};
use vidmask::codec::{train_codec, Codec, CodecTrainConfig};
use vidmask::data::make_dataset;
use vidmask::error::{Error, Result};
use vidmask::io::config::{CodecKind, Config};
use vidmask::io::{
    load_checkpoint, parse_storyboard, read_ppm_frame, read_video, report_to_text,
    save_checkpoint, write_run_manifest, write_video,
};
use vidmask::metrics::{evaluate_transition, Embedder};
use vidmask::schedule::build_schedule;
use vidmask::tasks::{
    animate, assemble_story, predict_autoregressive, transition, TransitionRequest,
};
use vidmask::train::{history_lines, train};

#[derive(Parser)]
#[command(name = "vidmask", version, about = "Masked-frame conditional video diffusion")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the denoiser (and codec, if learned) on the synthetic dataset.
    Train {
        /// Config file (line-oriented `key = value`); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the in-between frames connecting two scene images.
    Transition {
        #[arg(long)]
        s1: PathBuf,
        #[arg(long)]
        s2: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extend a video autoregressively.
    Predict {
        #[arg(long = "seed-video")]
        seed_video: PathBuf,
        #[arg(long)]
        iterations: usize,
        #[arg(long, default_value_t = 2)]
        overlap: usize,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Animate a reference image as the first frame of a clip.
    Animate {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Assemble a storyboard into one clip with generated transitions.
    Story {
        #[arg(long)]
        board: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a comparison transition method.
    Baseline {
        /// dissolve | morph | latent-interp | inversion-interp
        #[arg(long)]
        method: String,
        #[arg(long)]
        s1: PathBuf,
        #[arg(long)]
        s2: PathBuf,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        /// Point correspondences for morph: `x1 y1 x2 y2` per line.
        #[arg(long)]
        points: Option<PathBuf>,
        /// Checkpoint for latent-interp (codec) and inversion-interp (model).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a generated clip against its scene images and prompt.
    Eval {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        s1: PathBuf,
        #[arg(long)]
        s2: PathBuf,
        #[arg(long)]
        prompt: String,
        /// pooled | flatten | codec
        #[arg(long, default_value = "pooled")]
        embedder: String,
        #[arg(long)]
        report: PathBuf,
        /// Checkpoint supplying the codec for `--embedder codec`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Export a synthetic dataset as video containers.
    Dataset {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Config file for clip dims and frame counts.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    if let Err(e) = run(cli.cmd, &argv[1..]) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn load_model(ckpt: &Path) -> Result<vidmask::io::CheckpointContents> {
    load_checkpoint(ckpt)
}

fn run(cmd: Cmd, argv: &[String]) -> Result<()> {
    match cmd {
        Cmd::Train { config, out } => {
            let mut cfg = load_config(&config)?;
            std::fs::create_dir_all(&out)?;
            let dataset =
                make_dataset(cfg.dataset_count, cfg.dataset_seed, cfg.frames, cfg.height, cfg.width)?;
            let codec = match cfg.codec {
                CodecKind::Identity => Codec::Identity,
                CodecKind::Learned => {
                    eprintln!("training codec ({} steps)...", cfg.codec_steps);
                    Codec::Learned(train_codec(
                        &dataset,
                        &CodecTrainConfig {
                            steps: cfg.codec_steps,
                            lr: cfg.codec_lr,
                            hidden: cfg.codec_hidden,
                            latent_channels: cfg.codec_latent_channels,
                            seed: cfg.seed,
                        },
                    )?)
                }
            };
            let sched = build_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end)?;
            let ckpt_path = out.join("checkpoint.bin");

            let result = train(
                &cfg.train_config(),
                &cfg.arch(),
                &dataset,
                &codec,
                &sched,
                |step, loss| {
                    if step % 100 == 0 || step == 1 {
                        eprintln!("step {step}: loss {loss:.5}");
                    }
                },
                |step, params| {
                    let mut snapshot = cfg.clone();
                    snapshot.train_step = step;
                    save_checkpoint(&ckpt_path, params, &codec, &snapshot)
                },
            );
            let output = match result {
                Ok(o) => o,
                Err(e @ Error::Diverged { .. }) => {
                    eprintln!("training aborted; last good checkpoint kept at {}", ckpt_path.display());
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            std::fs::write(out.join("loss.txt"), history_lines(&output.history))?;
            cfg.train_step = output.history.last().map(|(s, _)| *s).unwrap_or(0);
            save_checkpoint(&ckpt_path, &output.params, &codec, &cfg)?;
            std::fs::write(out.join("config.txt"), cfg.to_text())?;
            write_run_manifest(&out, "train", argv, &cfg.to_text(), &[])?;
            println!(
                "trained {} steps, final loss {:.5}, checkpoint at {}",
                output.history.len(),
                output.history.last().map(|(_, l)| *l).unwrap_or(f32::NAN),
                ckpt_path.display()
            );
            Ok(())
        }

        Cmd::Transition { s1, s2, prompt, frames, seed, ckpt, out } => {
            let model = load_model(&ckpt)?;
            let sched = build_schedule(
                model.config.schedule_steps,
                model.config.beta_start,
                model.config.beta_end,
            )?;
            let req = TransitionRequest {
                s1: read_ppm_frame(&s1)?,
                s2: read_ppm_frame(&s2)?,
                caption: prompt,
                n: frames,
                seed,
                sampler: model.config.sampler(),
            };
            let clip = transition(&req, &model.params, &model.codec, &sched)?;
            write_video(&out, &clip)?;
            write_run_manifest(
                &out,
                "transition",
                argv,
                &model.config.to_text(),
                &[("s1".into(), s1), ("s2".into(), s2), ("ckpt".into(), ckpt)],
            )?;
            println!("wrote {}-frame transition to {}", clip.len(), out.display());
            Ok(())
        }

        Cmd::Predict { seed_video, iterations, overlap, prompt, ckpt, out, seed } => {
            let model = load_model(&ckpt)?;
            let sched = build_schedule(
                model.config.schedule_steps,
                model.config.beta_start,
                model.config.beta_end,
            )?;
            let seed_clip = read_video(&seed_video)?;
            let clip = predict_autoregressive(
                &model.params,
                &model.codec,
                &sched,
                &seed_clip,
                iterations,
                overlap,
                model.config.frames,
                &prompt,
                seed,
                &model.config.sampler(),
            )?;
            write_video(&out, &clip)?;
            write_run_manifest(
                &out,
                "predict",
                argv,
                &model.config.to_text(),
                &[("seed_video".into(), seed_video.join("tensor.bin")), ("ckpt".into(), ckpt)],
            )?;
            println!("wrote {}-frame prediction to {}", clip.len(), out.display());
            Ok(())
        }

        Cmd::Animate { image, prompt, frames, ckpt, out, seed } => {
            let model = load_model(&ckpt)?;
            let sched = build_schedule(
                model.config.schedule_steps,
                model.config.beta_start,
                model.config.beta_end,
            )?;
            let frame = read_ppm_frame(&image)?;
            let clip = animate(
                &frame,
                &prompt,
                &model.params,
                &model.codec,
                &sched,
                frames,
                seed,
                &model.config.sampler(),
            )?;
            write_video(&out, &clip)?;
            write_run_manifest(
                &out,
                "animate",
                argv,
                &model.config.to_text(),
                &[("image".into(), image), ("ckpt".into(), ckpt)],
            )?;
            println!("wrote {}-frame animation to {}", clip.len(), out.display());
            Ok(())
        }

        Cmd::Story { board, ckpt, out, seed } => {
            let model = load_model(&ckpt)?;
            let sched = build_schedule(
                model.config.schedule_steps,
                model.config.beta_start,
                model.config.beta_end,
            )?;
            let base = board.parent().unwrap_or(Path::new("."));
            let storyboard = parse_storyboard(&std::fs::read_to_string(&board)?, base)?;
            let (clip, segments) = assemble_story(
                &storyboard,
                &model.params,
                &model.codec,
                &sched,
                model.config.height,
                model.config.width,
                seed,
                &model.config.sampler(),
            )?;
            write_video(&out, &clip)?;
            let mut seg_text = String::new();
            for s in &segments {
                seg_text.push_str(&format!("{} {} {} {}\n", s.start, s.len, s.kind.name(), s.caption));
            }
            std::fs::write(out.join("segments.txt"), seg_text)?;
            write_run_manifest(
                &out,
                "story",
                argv,
                &model.config.to_text(),
                &[("board".into(), board), ("ckpt".into(), ckpt)],
            )?;
            println!("wrote {}-frame story ({} segments) to {}", clip.len(), segments.len(), out.display());
            Ok(())
        }

        Cmd::Baseline { method, s1, s2, prompt, frames, points, ckpt, out } => {
            let f1 = read_ppm_frame(&s1)?;
            let f2 = read_ppm_frame(&s2)?;
            let mut inputs = vec![("s1".to_string(), s1.clone()), ("s2".to_string(), s2.clone())];
            let (clip, config_text) = match method.as_str() {
                "dissolve" => (cross_dissolve(&f1, &f2, frames)?, Config::default().to_text()),
                "morph" => {
                    let pts_path = points
                        .ok_or_else(|| Error::InvalidArg("morph needs --points".into()))?;
                    let (p1, p2) = read_points(&pts_path)?;
                    inputs.push(("points".into(), pts_path));
                    (morph_with_correspondences(&f1, &f2, &p1, &p2, frames)?, Config::default().to_text())
                }
                "latent-interp" => {
                    let (codec, text) = match &ckpt {
                        Some(p) => {
                            let model = load_model(p)?;
                            inputs.push(("ckpt".into(), p.clone()));
                            (model.codec, model.config.to_text())
                        }
                        None => (Codec::Identity, Config::default().to_text()),
                    };
                    (latent_interp(&codec, &f1, &f2, frames)?, text)
                }
                "inversion-interp" => {
                    let ckpt_path = ckpt
                        .ok_or_else(|| Error::InvalidArg("inversion-interp needs --ckpt".into()))?;
                    let model = load_model(&ckpt_path)?;
                    inputs.push(("ckpt".into(), ckpt_path));
                    let sched = build_schedule(
                        model.config.schedule_steps,
                        model.config.beta_start,
                        model.config.beta_end,
                    )?;
                    let caption = prompt
                        .ok_or_else(|| Error::InvalidArg("inversion-interp needs --prompt".into()))?;
                    (
                        inversion_interp(
                            &model.params,
                            &model.codec,
                            &sched,
                            &f1,
                            &f2,
                            &caption,
                            frames,
                            &model.config.sampler(),
                        )?,
                        model.config.to_text(),
                    )
                }
                other => {
                    return Err(Error::InvalidArg(format!(
                        "unknown baseline '{other}' (dissolve | morph | latent-interp | inversion-interp)"
                    )))
                }
            };
            write_video(&out, &clip)?;
            write_run_manifest(&out, "baseline", argv, &config_text, &inputs)?;
            println!("wrote {}-frame {method} baseline to {}", clip.len(), out.display());
            Ok(())
        }

        Cmd::Eval { video, s1, s2, prompt, embedder, report, ckpt } => {
            let clip = read_video(&video)?;
            let f1 = read_ppm_frame(&s1)?;
            let f2 = read_ppm_frame(&s2)?;
            let emb = match embedder.as_str() {
                "pooled" => Embedder::Pooled,
                "flatten" => Embedder::Flatten,
                "codec" => {
                    let codec = match &ckpt {
                        Some(p) => load_model(p)?.codec,
                        None => Codec::Identity,
                    };
                    Embedder::CodecLatent(codec)
                }
                other => {
                    return Err(Error::InvalidArg(format!(
                        "unknown embedder '{other}' (pooled | flatten | codec)"
                    )))
                }
            };
            let result = evaluate_transition(&clip, &f1, &f2, &prompt, &emb)?;
            std::fs::write(&report, report_to_text(&result))?;
            println!(
                "sim_text {:.4}  sim_scenes {:.4}  sim_frames {:.4} (report at {})",
                result.sim_text,
                result.sim_scenes,
                result.sim_frames,
                report.display()
            );
            Ok(())
        }

        Cmd::Dataset { count, seed, out, config } => {
            let cfg = load_config(&config)?;
            std::fs::create_dir_all(&out)?;
            let clips = make_dataset(count, seed, cfg.frames, cfg.height, cfg.width)?;
            for (i, clip) in clips.iter().enumerate() {
                write_video(&out.join(format!("clip_{i:04}")), clip)?;
            }
            write_run_manifest(&out, "dataset", argv, &cfg.to_text(), &[])?;
            println!("wrote {count} clips to {}", out.display());
            Ok(())
        }
    }
}

fn read_points(path: &Path) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>)> {
    let text = std::fs::read_to_string(path)?;
    let mut p1 = Vec::new();
    let mut p2 = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: Vec<f64> = line
            .split_whitespace()
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Parse(format!("points line {}: '{v}'", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if nums.len() != 4 {
            return Err(Error::Parse(format!(
                "points line {}: expected 'x1 y1 x2 y2'",
                lineno + 1
            )));
        }
        p1.push((nums[0], nums[1]));
        p2.push((nums[2], nums[3]));
    }
    Ok((p1, p2))
}
