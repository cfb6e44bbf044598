use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Parse every non-blank line of `source` as JSON. Errors carry the 1-based
/// line number.
pub(crate) fn parse_lines<T: DeserializeOwned>(
    source: &str,
) -> Result<Vec<(usize, T)>, (usize, serde_json::Error)> {
    source
        .lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(idx, line)| {
            serde_json::from_str(line)
                .map(|value| (idx + 1, value))
                .map_err(|err| (idx + 1, err))
        })
        .collect()
}

pub(crate) fn to_line<T: Serialize>(value: &T) -> String {
    let mut line = serde_json::to_string(value).expect("record serializes");
    line.push('\n');
    line
}

/// Replace `path` atomically with `contents` (write, fsync, rename).
pub(crate) fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut file = File::create(&tmp)?;
        file.write_all(contents)?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        // Directory fsync is best effort; some filesystems refuse it.
        if let Ok(dir) = File::open(dir) {
            let _ = dir.sync_all();
        }
    }
    Ok(())
}
