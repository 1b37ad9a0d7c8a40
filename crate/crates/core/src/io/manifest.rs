//! Run manifest: the resolved configuration, seeds, arguments, and content
//! hashes of inputs and outputs of one CLI invocation. Two runs that produce
//! byte-identical artifacts produce byte-identical manifests.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::Result;

pub const RUN_MANIFEST: &str = "run_manifest.txt";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// All regular files under `dir`, sorted, skipping the manifest itself.
fn walk_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != RUN_MANIFEST) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Writes `run_manifest.txt` into `out_dir`: command line, resolved config,
/// input hashes, and hashes of every artifact in the output directory.
pub fn write_run_manifest(
    out_dir: &Path,
    command: &str,
    argv: &[String],
    config_text: &str,
    inputs: &[(String, PathBuf)],
) -> Result<()> {
    let mut s = String::new();
    s.push_str(&format!("command = {command}\n"));
    s.push_str(&format!("argv = {}\n", argv.join(" ")));
    for line in config_text.lines() {
        s.push_str(&format!("config.{line}\n"));
    }
    for (name, path) in inputs {
        s.push_str(&format!("input.{name} = sha256:{}\n", sha256_file(path)?));
    }
    for path in walk_sorted(out_dir)? {
        let rel = path.strip_prefix(out_dir).unwrap_or(&path).display();
        s.push_str(&format!("output.{rel} = sha256:{}\n", sha256_file(&path)?));
    }
    std::fs::write(out_dir.join(RUN_MANIFEST), s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn manifest_is_deterministic_and_covers_outputs() {
        let dir = tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "alpha").unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/b.bin"), [1u8, 2, 3]).unwrap();

        let argv = vec!["dataset".to_string(), "--count".into(), "2".into()];
        write_run_manifest(dir.path(), "dataset", &argv, "seed = 1\n", &[]).unwrap();
        let first = std::fs::read_to_string(dir.path().join(RUN_MANIFEST)).unwrap();
        assert!(first.contains("output.a.txt = sha256:"));
        assert!(first.contains("output.sub/b.bin = sha256:"));
        assert!(first.contains("config.seed = 1"));

        write_run_manifest(dir.path(), "dataset", &argv, "seed = 1\n", &[]).unwrap();
        let second = std::fs::read_to_string(dir.path().join(RUN_MANIFEST)).unwrap();
        assert_eq!(first, second);
    }
}
