//! All-or-nothing output files.
//!
//! Outputs are written next to their destination under a temporary name and
//! only renamed into place by [`Outputs::commit`]. Dropping an uncommitted
//! set removes every temporary file, so a failed command leaves nothing
//! behind.

use std::fs;
use std::path::{Path, PathBuf};

use uum_core::{Result, UumError};

#[derive(Default)]
pub struct Outputs {
    staged: Vec<(PathBuf, PathBuf)>,
    created_dirs: Vec<PathBuf>,
}

fn temp_path(path: &Path) -> PathBuf {
    let name = path.file_name().map_or_else(|| "output".into(), |n| n.to_string_lossy().into_owned());
    path.with_file_name(format!(".{name}.partial"))
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stage(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            if !parent.exists() {
                let mut missing = Vec::new();
                let mut dir = parent;
                while !dir.as_os_str().is_empty() && !dir.exists() {
                    missing.push(dir.to_path_buf());
                    dir = dir.parent().unwrap_or(Path::new(""));
                }
                fs::create_dir_all(parent).map_err(|e| UumError::io(parent, e))?;
                self.created_dirs.extend(missing);
            }
        }
        let tmp = temp_path(path);
        fs::write(&tmp, bytes).map_err(|e| UumError::io(&tmp, e))?;
        self.staged.push((tmp, path.to_path_buf()));
        Ok(())
    }

    /// Moves every staged file into place. If a rename fails, files already
    /// moved are deleted again.
    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        let staged = std::mem::take(&mut self.staged);
        let mut done: Vec<PathBuf> = Vec::new();
        for (i, (tmp, dest)) in staged.iter().enumerate() {
            if let Err(e) = fs::rename(tmp, dest) {
                for d in &done {
                    let _ = fs::remove_file(d);
                }
                for (t, _) in &staged[i..] {
                    let _ = fs::remove_file(t);
                }
                return Err(UumError::io(dest, e));
            }
            done.push(dest.clone());
        }
        self.created_dirs.clear();
        Ok(done)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        for (tmp, _) in &self.staged {
            let _ = fs::remove_file(tmp);
        }
        // innermost first; only empty directories are removed
        for dir in &self.created_dirs {
            let _ = fs::remove_dir(dir);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nothing_is_visible_before_commit() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("sub/a.txt");
        let mut out = Outputs::new();
        out.stage(&a, b"hello").unwrap();
        assert!(!a.exists());
        let written = out.commit().unwrap();
        assert_eq!(written, vec![a.clone()]);
        assert_eq!(fs::read(&a).unwrap(), b"hello");
        assert!(!temp_path(&a).exists());
    }

    #[test]
    fn dropping_removes_temporaries_and_new_directories() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("x/y/a.txt");
        {
            let mut out = Outputs::new();
            out.stage(&a, b"1").unwrap();
            assert!(temp_path(&a).exists());
        }
        assert!(!temp_path(&a).exists());
        assert!(!dir.path().join("x").exists());
    }

    #[test]
    fn existing_outputs_survive_a_failed_run() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        fs::write(&a, b"old").unwrap();
        {
            let mut out = Outputs::new();
            out.stage(&a, b"new").unwrap();
        }
        assert_eq!(fs::read(&a).unwrap(), b"old");
    }
}
