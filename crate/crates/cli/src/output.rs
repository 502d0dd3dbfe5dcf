use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};
use tempfile::{NamedTempFile, TempDir};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn parent_of(path: &Path) -> Result<&Path> {
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    Ok(parent)
}

pub fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!(
            "{} already exists; pass --force to overwrite",
            path.display()
        );
    }
    Ok(())
}

/// Writes through a sibling temp file renamed into place on success.
pub fn write_atomic(
    path: &Path,
    force: bool,
    fill: impl FnOnce(&mut dyn Write) -> Result<()>,
) -> Result<()> {
    refuse_existing(path, force)?;
    let mut tmp = NamedTempFile::new_in(parent_of(path)?)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    if force {
        tmp.persist(path)?;
    } else {
        tmp.persist_noclobber(path)?;
    }
    Ok(())
}

/// An output directory built in a temp sibling; dropped without `commit`, it vanishes.
pub struct Staging {
    dir: TempDir,
    target: PathBuf,
    force: bool,
    files: Vec<PathBuf>,
}

impl Staging {
    pub fn new(target: &Path, force: bool) -> Result<Self> {
        refuse_existing(target, force)?;
        let dir = tempfile::Builder::new()
            .prefix(".staging-")
            .tempdir_in(parent_of(target)?)?;
        Ok(Self {
            dir,
            target: target.to_path_buf(),
            force,
            files: Vec::new(),
        })
    }

    pub fn file(
        &mut self,
        rel: &str,
        fill: impl FnOnce(&mut dyn Write) -> Result<()>,
    ) -> Result<()> {
        let path = self.dir.path().join(rel);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        let mut w = BufWriter::new(
            fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        );
        fill(&mut w)?;
        w.flush()?;
        self.files.push(PathBuf::from(rel));
        Ok(())
    }

    /// Moves the staged tree into place and returns `(relative path, sha256)` per file.
    pub fn commit(self) -> Result<Vec<(PathBuf, String)>> {
        let mut sums = Vec::new();
        for rel in &self.files {
            sums.push((
                self.target.join(rel),
                sha256_file(&self.dir.path().join(rel))?,
            ));
        }
        if self.target.exists() {
            if !self.force {
                bail!(
                    "{} appeared during the run; not overwriting",
                    self.target.display()
                );
            }
            fs::remove_dir_all(&self.target)
                .with_context(|| format!("removing {}", self.target.display()))?;
        }
        let staged = self.dir.keep();
        if let Err(e) = fs::rename(&staged, &self.target) {
            let _ = fs::remove_dir_all(&staged);
            return Err(e).with_context(|| format!("moving outputs to {}", self.target.display()));
        }
        Ok(sums)
    }
}

pub fn print_sums(sums: &[(PathBuf, String)]) {
    for (path, sum) in sums {
        println!("sha256 {sum}  {}", path.display());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_guards_existing_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, false, |w| Ok(w.write_all(b"one")?)).unwrap();
        assert!(write_atomic(&p, false, |w| Ok(w.write_all(b"two")?)).is_err());
        assert_eq!(fs::read(&p).unwrap(), b"one");
        write_atomic(&p, true, |w| Ok(w.write_all(b"two")?)).unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
    }

    #[test]
    fn failed_write_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        assert!(write_atomic(&p, false, |_| bail!("boom")).is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn dropped_staging_is_removed() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("run");
        {
            let mut s = Staging::new(&target, false).unwrap();
            s.file("x.csv", |w| Ok(w.write_all(b"x")?)).unwrap();
        }
        assert!(!target.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);

        let mut s = Staging::new(&target, false).unwrap();
        s.file("sub/x.csv", |w| Ok(w.write_all(b"x")?)).unwrap();
        let sums = s.commit().unwrap();
        assert_eq!(sums.len(), 1);
        assert_eq!(fs::read(target.join("sub/x.csv")).unwrap(), b"x");
        assert!(Staging::new(&target, false).is_err());
    }
}
