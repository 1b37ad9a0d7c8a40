//! Storyboard manifest: line-oriented shot and transition records.
//!
//! ```text
//! # comments and blank lines are ignored
//! shot 16 a red circle moving left to right on a white background
//! transition 12 a red circle staying still on a white background
//! clip path/to/container
//! ```
//!
//! Records must alternate shot/clip and transition; the board starts and
//! ends with a shot. `clip` paths are resolved against the manifest's
//! directory.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::video::read_video;
use crate::tasks::{JunctionSpec, Shot, StoryBoard};

pub fn parse_storyboard(text: &str, base_dir: &Path) -> Result<StoryBoard> {
    let mut shots = Vec::new();
    let mut junctions = Vec::new();
    let mut expect_shot = true;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = || format!("storyboard line {}", lineno + 1);
        let mut parts = line.splitn(2, char::is_whitespace);
        let kind = parts.next().unwrap();
        let rest = parts.next().unwrap_or("").trim();
        match kind {
            "shot" | "transition" => {
                let (len_str, caption) = rest
                    .split_once(char::is_whitespace)
                    .ok_or_else(|| Error::Parse(format!("{}: expected '<len> <caption>'", at())))?;
                let len: usize = len_str
                    .parse()
                    .map_err(|_| Error::Parse(format!("{}: bad length '{len_str}'", at())))?;
                let caption = caption.trim().to_string();
                if kind == "shot" {
                    if !expect_shot {
                        return Err(Error::Parse(format!(
                            "{}: consecutive shots need a transition between them",
                            at()
                        )));
                    }
                    shots.push(Shot::Rendered { caption, len });
                    expect_shot = false;
                } else {
                    if expect_shot {
                        return Err(Error::Parse(format!(
                            "{}: transition must follow a shot",
                            at()
                        )));
                    }
                    junctions.push(JunctionSpec { caption, len });
                    expect_shot = true;
                }
            }
            "clip" => {
                if !expect_shot {
                    return Err(Error::Parse(format!(
                        "{}: consecutive shots need a transition between them",
                        at()
                    )));
                }
                if rest.is_empty() {
                    return Err(Error::Parse(format!("{}: clip needs a path", at())));
                }
                let clip = read_video(&base_dir.join(rest))?;
                shots.push(Shot::Clip(clip));
                expect_shot = false;
            }
            other => {
                return Err(Error::Parse(format!("{}: unknown record '{other}'", at())));
            }
        }
    }
    if expect_shot {
        return Err(Error::Parse("storyboard must end with a shot".into()));
    }
    let board = StoryBoard { shots, junctions };
    board.validate()?;
    Ok(board)
}
