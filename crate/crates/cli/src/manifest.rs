//! Plain-text key-value run manifests, one per command invocation, written
//! next to the primary output as `<output>.manifest.txt`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

pub fn manifest_path(primary_output: &Path) -> PathBuf {
    let mut name = primary_output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.txt");
    primary_output.with_file_name(name)
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Write the manifest for a finished run. Keys appear in the given order,
/// preceded by command/version and followed by the wall time.
pub fn write(
    primary_output: &Path,
    command: &str,
    entries: &[(&str, String)],
    started: Instant,
) -> std::io::Result<()> {
    let path = manifest_path(primary_output);
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "command = {command}")?;
    writeln!(f, "tool_version = {}", env!("CARGO_PKG_VERSION"))?;
    for (k, v) in entries {
        writeln!(f, "{k} = {v}")?;
    }
    writeln!(f, "wall_time_secs = {:.3}", started.elapsed().as_secs_f64())?;
    Ok(())
}
