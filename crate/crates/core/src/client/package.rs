//! Deterministic program archive.
//!
//! Entries are the regular files under the program directory, sorted by
//! relative path, with zeroed timestamps and owners, so packaging an unchanged
//! directory twice yields the same bytes.

use std::fs;
use std::io;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::ValidatedJobSpec;

#[derive(Debug, Error)]
pub enum PackageError {
    #[error("cannot read {path}: {source}")]
    UnreadablePath {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0} contains no files: nothing to run")]
    EmptyDirectory(PathBuf),
    #[error("{0} is not a directory")]
    NotADirectory(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub size: u64,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct SubmissionPackage {
    pub archive: Vec<u8>,
    pub manifest: Vec<ManifestEntry>,
    pub job_spec: ValidatedJobSpec,
}

impl SubmissionPackage {
    pub fn entry_paths(&self) -> Vec<&str> {
        self.manifest.iter().map(|e| e.path.as_str()).collect()
    }
}

fn unreadable(path: &Path) -> impl FnOnce(io::Error) -> PackageError + '_ {
    move |source| PackageError::UnreadablePath {
        path: path.to_path_buf(),
        source,
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<(), PackageError> {
    for entry in fs::read_dir(dir).map_err(unreadable(dir))? {
        let entry = entry.map_err(unreadable(dir))?;
        let path = entry.path();
        let kind = entry.file_type().map_err(unreadable(&path))?;
        if kind.is_dir() {
            collect(root, &path, out)?;
        } else if kind.is_file() {
            let rel = path.strip_prefix(root).expect("walked from root");
            let rel: Vec<String> = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect();
            out.push((rel.join("/"), path));
        }
    }
    Ok(())
}

pub fn package(program_dir: &Path, spec: ValidatedJobSpec) -> Result<SubmissionPackage, PackageError> {
    let meta = fs::metadata(program_dir).map_err(unreadable(program_dir))?;
    if !meta.is_dir() {
        return Err(PackageError::NotADirectory(program_dir.to_path_buf()));
    }
    let mut files = Vec::new();
    collect(program_dir, program_dir, &mut files)?;
    if files.is_empty() {
        return Err(PackageError::EmptyDirectory(program_dir.to_path_buf()));
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));

    let mut builder = tar::Builder::new(Vec::new());
    let mut manifest = Vec::with_capacity(files.len());
    for (rel, path) in &files {
        let data = fs::read(path).map_err(unreadable(path))?;
        let executable = fs::metadata(path).map_err(unreadable(path))?.permissions().mode() & 0o111 != 0;
        let mut header = tar::Header::new_ustar();
        header.set_path(rel).map_err(unreadable(path))?;
        header.set_size(data.len() as u64);
        header.set_mode(if executable { 0o755 } else { 0o644 });
        header.set_mtime(0);
        header.set_uid(0);
        header.set_gid(0);
        header.set_entry_type(tar::EntryType::Regular);
        header.set_cksum();
        builder.append(&header, data.as_slice()).map_err(unreadable(path))?;
        manifest.push(ManifestEntry {
            path: rel.clone(),
            size: data.len() as u64,
            sha256: hex::encode(Sha256::digest(&data)),
        });
    }
    let archive = builder.into_inner().map_err(unreadable(program_dir))?;
    Ok(SubmissionPackage {
        archive,
        manifest,
        job_spec: spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_job_spec, JobSpec, ResourceRequest, TaskGroupSpec};

    fn spec() -> ValidatedJobSpec {
        let mut j = JobSpec::new(
            "p",
            vec![TaskGroupSpec::new("worker", 1, ResourceRequest::new(1, 1, 0))],
        );
        j.command = vec!["run.sh".into()];
        validate_job_spec(j).unwrap()
    }

    fn tar_paths(bytes: &[u8]) -> Vec<String> {
        let mut a = tar::Archive::new(bytes);
        a.entries()
            .unwrap()
            .map(|e| e.unwrap().path().unwrap().display().to_string())
            .collect()
    }

    #[test]
    fn sorted_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.sh"), "#!/bin/sh\n").unwrap();
        fs::create_dir(dir.path().join("model")).unwrap();
        fs::write(dir.path().join("model/train.py"), "print(1)\n").unwrap();
        let a = package(dir.path(), spec()).unwrap();
        assert_eq!(tar_paths(&a.archive), vec!["model/train.py", "run.sh"]);
        assert_eq!(a.entry_paths(), vec!["model/train.py", "run.sh"]);
        // touching the files changes mtimes but not the archive
        std::thread::sleep(std::time::Duration::from_millis(20));
        fs::write(dir.path().join("run.sh"), "#!/bin/sh\n").unwrap();
        let b = package(dir.path(), spec()).unwrap();
        assert_eq!(a.archive, b.archive);
        assert_eq!(a.manifest[1].sha256, hex::encode(Sha256::digest(b"#!/bin/sh\n")));
    }

    #[test]
    fn empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        assert!(matches!(
            package(dir.path(), spec()),
            Err(PackageError::EmptyDirectory(_))
        ));
    }

    #[test]
    fn missing_directory() {
        assert!(matches!(
            package(Path::new("/nonexistent/orch"), spec()),
            Err(PackageError::UnreadablePath { .. })
        ));
    }
}
