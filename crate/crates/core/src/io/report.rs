//! Metrics report as `key: value` lines plus whitespace-separated trace
//! arrays.

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

pub fn report_to_text(r: &MetricsReport) -> String {
    let join = |xs: &[f64]| {
        xs.iter().map(|v| format!("{v:.9}")).collect::<Vec<_>>().join(" ")
    };
    format!(
        "embedder: {}\ncaption: {}\nsim_text: {:.9}\nsim_scenes: {:.9}\nsim_frames: {:.9}\nsim_frames_min: {:.9}\ntrace_scenes: {}\ntrace_frames: {}\n",
        r.embedder,
        r.caption,
        r.sim_text,
        r.sim_scenes,
        r.sim_frames,
        r.sim_frames_min,
        join(&r.scenes_trace),
        join(&r.frames_trace),
    )
}

pub fn parse_report(text: &str) -> Result<MetricsReport> {
    let mut embedder = None;
    let mut caption = None;
    let mut sim_text = None;
    let mut sim_scenes = None;
    let mut sim_frames = None;
    let mut sim_frames_min = None;
    let mut scenes_trace = None;
    let mut frames_trace = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("report line '{line}'")))?;
        let value = value.trim();
        let scalar = || -> Result<f64> {
            value.parse().map_err(|_| Error::Parse(format!("bad number '{value}'")))
        };
        let trace = || -> Result<Vec<f64>> {
            value
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::Parse(format!("bad trace value '{v}'"))))
                .collect()
        };
        match key.trim() {
            "embedder" => embedder = Some(value.to_string()),
            "caption" => caption = Some(value.to_string()),
            "sim_text" => sim_text = Some(scalar()?),
            "sim_scenes" => sim_scenes = Some(scalar()?),
            "sim_frames" => sim_frames = Some(scalar()?),
            "sim_frames_min" => sim_frames_min = Some(scalar()?),
            "trace_scenes" => scenes_trace = Some(trace()?),
            "trace_frames" => frames_trace = Some(trace()?),
            other => return Err(Error::Parse(format!("unknown report key '{other}'"))),
        }
    }
    Ok(MetricsReport {
        sim_text: sim_text.ok_or_else(|| Error::Parse("report missing sim_text".into()))?,
        sim_scenes: sim_scenes.ok_or_else(|| Error::Parse("report missing sim_scenes".into()))?,
        sim_frames: sim_frames.ok_or_else(|| Error::Parse("report missing sim_frames".into()))?,
        sim_frames_min: sim_frames_min
            .ok_or_else(|| Error::Parse("report missing sim_frames_min".into()))?,
        scenes_trace: scenes_trace.unwrap_or_default(),
        frames_trace: frames_trace.unwrap_or_default(),
        embedder: embedder.unwrap_or_default(),
        caption: caption.unwrap_or_default(),
    })
}
