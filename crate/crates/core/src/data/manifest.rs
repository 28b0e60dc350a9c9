//! Plain-text dataset lists: one sample directory per line, `#` starts a comment.
//! Relative entries resolve against the manifest's own directory.

use std::fs;
use std::path::{Path, PathBuf};

use super::DataError;

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let entries: Vec<PathBuf> = text
        .lines()
        .map(|line| line.split('#').next().unwrap_or("").trim())
        .filter(|line| !line.is_empty())
        .map(|line| {
            let p = Path::new(line);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        })
        .collect();
    if entries.is_empty() {
        return Err(DataError::Manifest(format!("{} lists no samples", path.display())));
    }
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[PathBuf]) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut text = String::from("# sample directories\n");
    for e in entries {
        text.push_str(&e.display().to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| DataError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("list.txt");
        fs::write(&m, "# header\nscene_a\n\n  scene_b  # trailing\n/abs/scene\n").unwrap();
        let e = read_manifest(&m).unwrap();
        assert_eq!(
            e,
            vec![dir.path().join("scene_a"), dir.path().join("scene_b"), PathBuf::from("/abs/scene")]
        );
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.txt");
        write_manifest(&m, &[PathBuf::from("x"), PathBuf::from("y")]).unwrap();
        assert_eq!(read_manifest(&m).unwrap().len(), 2);
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.txt");
        fs::write(&m, "# nothing\n").unwrap();
        assert!(read_manifest(&m).is_err());
        assert!(matches!(read_manifest(dir.path().join("nope")), Err(DataError::MissingFile(_))));
    }
}
