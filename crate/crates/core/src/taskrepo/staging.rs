//! Moving task files between the repository and the shared directory.
//!
//! Archives are checked entry by entry before anything is written: absolute
//! paths, `..` segments and links of any kind reject the whole archive. If
//! any input fails, everything staged so far is removed again.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Cursor, Read};
use std::os::unix::fs::PermissionsExt;
use std::path::{Component, Path, PathBuf};

use super::{ClaimTicket, RepoClient, RepoError};
use crate::model::{is_contained_relative, ArchiveKind};

/// A validated archive member.
enum Member {
    Dir(String),
    File { path: String, data: Vec<u8>, executable: bool },
}

fn unsafe_entry(archive: &str, entry: impl Into<String>) -> RepoError {
    RepoError::UnsafeArchive {
        archive: archive.to_string(),
        entry: entry.into(),
    }
}

fn archive_err(archive: &str, e: impl std::fmt::Display) -> RepoError {
    RepoError::Archive {
        archive: archive.to_string(),
        message: e.to_string(),
    }
}

/// Strips `.` segments so `./a` and `a` compare equal.
fn normalized(path: &str) -> String {
    Path::new(path)
        .components()
        .filter_map(|c| match c {
            Component::Normal(s) => Some(s.to_string_lossy().into_owned()),
            _ => None,
        })
        .collect::<Vec<_>>()
        .join("/")
}

fn read_tar<R: Read>(archive: &str, reader: R) -> Result<Vec<Member>, RepoError> {
    let mut tar = tar::Archive::new(reader);
    let mut members = Vec::new();
    for entry in tar.entries().map_err(|e| archive_err(archive, e))? {
        let mut entry = entry.map_err(|e| archive_err(archive, e))?;
        let raw = entry.path_bytes();
        let path = String::from_utf8_lossy(&raw).into_owned();
        if !is_contained_relative(&path) {
            // a bare "./" directory entry is harmless
            if normalized(&path).is_empty() && entry.header().entry_type().is_dir() && !path.starts_with('/') {
                continue;
            }
            return Err(unsafe_entry(archive, path));
        }
        let kind = entry.header().entry_type();
        if kind.is_dir() {
            members.push(Member::Dir(normalized(&path)));
        } else if kind.is_file() {
            let executable = entry.header().mode().map(|m| m & 0o111 != 0).unwrap_or(false);
            let mut data = Vec::new();
            entry.read_to_end(&mut data).map_err(|e| archive_err(archive, e))?;
            members.push(Member::File {
                path: normalized(&path),
                data,
                executable,
            });
        } else if kind.is_pax_global_extensions() || kind.is_pax_local_extensions() || kind.is_gnu_longname() {
            continue;
        } else {
            return Err(unsafe_entry(archive, format!("{path} ({kind:?})")));
        }
    }
    Ok(members)
}

fn read_zip(archive: &str, bytes: &[u8]) -> Result<Vec<Member>, RepoError> {
    let mut zip = zip::ZipArchive::new(Cursor::new(bytes)).map_err(|e| archive_err(archive, e))?;
    let mut members = Vec::new();
    for i in 0..zip.len() {
        let mut file = zip.by_index(i).map_err(|e| archive_err(archive, e))?;
        let name = file.name().to_string();
        if file.enclosed_name().is_none() || !is_contained_relative(&name) {
            return Err(unsafe_entry(archive, name));
        }
        let mode = file.unix_mode().unwrap_or(0);
        if mode & 0o170000 == 0o120000 {
            return Err(unsafe_entry(archive, format!("{name} (symlink)")));
        }
        if file.is_dir() {
            members.push(Member::Dir(normalized(&name)));
        } else {
            let mut data = Vec::new();
            file.read_to_end(&mut data).map_err(|e| archive_err(archive, e))?;
            members.push(Member::File {
                path: normalized(&name),
                data,
                executable: mode & 0o111 != 0,
            });
        }
    }
    Ok(members)
}

fn read_archive(name: &str, kind: ArchiveKind, bytes: &[u8]) -> Result<Vec<Member>, RepoError> {
    match kind {
        ArchiveKind::Tar => read_tar(name, Cursor::new(bytes)),
        ArchiveKind::TarGz => read_tar(name, flate2::read::GzDecoder::new(Cursor::new(bytes))),
        ArchiveKind::Zip => read_zip(name, bytes),
    }
}

/// Tracks created paths so a failed staging can be undone.
struct Undo {
    created: Vec<PathBuf>,
}

impl Undo {
    fn mkdirs(&mut self, dest: &Path, rel: &Path) -> Result<(), RepoError> {
        let mut path = dest.to_path_buf();
        for c in rel.components() {
            path.push(c);
            match fs::symlink_metadata(&path) {
                Ok(m) if m.is_dir() => {}
                Ok(_) => {
                    return Err(RepoError::Rejected(format!("{} exists and is not a directory", path.display())))
                }
                Err(_) => {
                    fs::create_dir(&path).map_err(RepoError::io(&path))?;
                    self.created.push(path.clone());
                }
            }
        }
        Ok(())
    }

    fn write(&mut self, dest: &Path, rel: &str, data: &[u8], executable: bool) -> Result<(), RepoError> {
        let rel_path = Path::new(rel);
        if let Some(parent) = rel_path.parent() {
            self.mkdirs(dest, parent)?;
        }
        let path = dest.join(rel_path);
        if fs::symlink_metadata(&path).is_ok_and(|m| !m.is_file()) {
            return Err(RepoError::Rejected(format!("{} exists and is not a file", path.display())));
        }
        let existed = path.exists();
        fs::write(&path, data).map_err(RepoError::io(&path))?;
        let mode = if executable { 0o755 } else { 0o644 };
        fs::set_permissions(&path, fs::Permissions::from_mode(mode)).map_err(RepoError::io(&path))?;
        if !existed {
            self.created.push(path);
        }
        Ok(())
    }

    fn rollback(self) {
        for path in self.created.iter().rev() {
            if path.is_dir() {
                let _ = fs::remove_dir_all(path);
            } else {
                let _ = fs::remove_file(path);
            }
        }
    }
}

/// Fetches every input into `dest`, unpacking archives marked `unpack` in
/// the directory that would have held the archive. Returns the staged file
/// paths relative to `dest`.
pub fn stage_inputs(client: &dyn RepoClient, ticket: &ClaimTicket, dest: &Path) -> Result<Vec<String>, RepoError> {
    if !dest.is_absolute() || !dest.is_dir() {
        return Err(RepoError::Rejected(format!("{} is not an absolute directory", dest.display())));
    }
    let mut undo = Undo { created: Vec::new() };
    let result = stage_all(client, ticket, dest, &mut undo);
    if result.is_err() {
        undo.rollback();
    }
    result
}

fn stage_all(client: &dyn RepoClient, ticket: &ClaimTicket, dest: &Path, undo: &mut Undo) -> Result<Vec<String>, RepoError> {
    let mut staged = BTreeSet::new();
    for input in &ticket.task.input_files {
        if !is_contained_relative(&input.name) {
            return Err(RepoError::Rejected(format!("input name {:?} escapes the directory", input.name)));
        }
        let bytes = client.fetch_input(ticket, &input.name)?;
        let kind = ArchiveKind::from_name(&input.name).filter(|_| input.unpack);
        let Some(kind) = kind else {
            let rel = normalized(&input.name);
            undo.write(dest, &rel, &bytes, false)?;
            staged.insert(rel);
            continue;
        };
        // validate everything before writing anything
        let members = read_archive(&input.name, kind, &bytes)?;
        let base = Path::new(&input.name).parent().map(|p| normalized(&p.to_string_lossy())).unwrap_or_default();
        let join = |p: &str| if base.is_empty() { p.to_string() } else { format!("{base}/{p}") };
        for m in members {
            match m {
                Member::Dir(p) => undo.mkdirs(dest, Path::new(&join(&p)))?,
                Member::File { path, data, executable } => {
                    let rel = join(&path);
                    undo.write(dest, &rel, &data, executable)?;
                    staged.insert(rel);
                }
            }
        }
    }
    Ok(staged.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UploadSummary {
    pub uploaded: usize,
    /// Declared outputs that were absent (or not regular files inside the
    /// base directory).
    pub missing: Vec<String>,
}

/// Uploads each declared output found under `base`. Symlinks and anything
/// resolving outside `base` count as missing: the payload controls these
/// paths and the pilot must not read files on its behalf.
pub fn upload_outputs(client: &dyn RepoClient, ticket: &ClaimTicket, base: &Path) -> Result<UploadSummary, RepoError> {
    let root = base.canonicalize().map_err(RepoError::io(base))?;
    let mut summary = UploadSummary::default();
    for name in &ticket.task.output_files {
        let path = root.join(name);
        let resolved = match (is_contained_relative(name), fs::symlink_metadata(&path)) {
            (true, Ok(meta)) if meta.is_file() => path.canonicalize().ok().filter(|p| p.starts_with(&root)),
            _ => None,
        };
        let Some(resolved) = resolved else {
            if path.exists() || fs::symlink_metadata(&path).is_ok() {
                log::warn!("output {name} is not a regular file inside the shared directory; treated as missing");
            }
            summary.missing.push(name.clone());
            continue;
        };
        let data = fs::read(&resolved).map_err(RepoError::io(&resolved))?;
        client.upload_output(ticket, name, &data)?;
        summary.uploaded += 1;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InputFile, TaskSpec};
    use crate::taskrepo::{CompletionRequest, PilotDescriptor};
    use std::cell::RefCell;
    use std::collections::BTreeMap;
    use std::io::Write;

    #[derive(Default)]
    struct Memory {
        inputs: BTreeMap<String, Vec<u8>>,
        outputs: RefCell<BTreeMap<String, Vec<u8>>>,
    }

    impl RepoClient for Memory {
        fn acquire_task(&self, _: &PilotDescriptor) -> Result<Option<ClaimTicket>, RepoError> {
            Ok(None)
        }
        fn fetch_input(&self, _: &ClaimTicket, name: &str) -> Result<Vec<u8>, RepoError> {
            self.inputs
                .get(name)
                .cloned()
                .ok_or_else(|| RepoError::Transport(format!("no {name}")))
        }
        fn upload_output(&self, _: &ClaimTicket, name: &str, data: &[u8]) -> Result<(), RepoError> {
            self.outputs.borrow_mut().insert(name.to_string(), data.to_vec());
            Ok(())
        }
        fn report_completion(&self, _: &ClaimTicket, _: &CompletionRequest) -> Result<(), RepoError> {
            Ok(())
        }
    }

    fn ticket(inputs: &[(&str, bool)], outputs: &[&str]) -> ClaimTicket {
        let mut task = TaskSpec::new("t", "img:1", "/bin/x");
        task.input_files = inputs
            .iter()
            .map(|(n, u)| InputFile {
                name: n.to_string(),
                source: n.to_string(),
                unpack: *u,
            })
            .collect();
        task.output_files = outputs.iter().map(|s| s.to_string()).collect();
        ClaimTicket {
            task,
            claim_id: "c".into(),
            lease_expiry: 0,
        }
    }

    fn tar_gz(entries: &[(&str, &[u8])]) -> Vec<u8> {
        let mut builder = tar::Builder::new(flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast()));
        for (path, data) in entries {
            let mut header = tar::Header::new_gnu();
            header.set_size(data.len() as u64);
            header.set_mode(0o644);
            header.set_entry_type(tar::EntryType::Regular);
            // bypass the builder's own path checks to build hostile archives
            let name = header.as_old_mut().name.as_mut();
            name[..path.len()].copy_from_slice(path.as_bytes());
            header.set_cksum();
            builder.append(&header, *data).unwrap();
        }
        builder.into_inner().unwrap().finish().unwrap()
    }

    fn listing(dir: &Path) -> Vec<String> {
        let mut out = Vec::new();
        fn walk(base: &Path, dir: &Path, out: &mut Vec<String>) {
            for e in fs::read_dir(dir).unwrap() {
                let p = e.unwrap().path();
                out.push(p.strip_prefix(base).unwrap().to_string_lossy().into_owned());
                if p.is_dir() {
                    walk(base, &p, out);
                }
            }
        }
        walk(dir, dir, &mut out);
        out.sort();
        out
    }

    #[test]
    fn no_inputs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(stage_inputs(&Memory::default(), &ticket(&[], &[]), dir.path()).unwrap().is_empty());
    }

    #[test]
    fn tar_gz_is_unpacked_and_archive_absent() {
        let dir = tempfile::tempdir().unwrap();
        let mut repo = Memory::default();
        repo.inputs.insert("data.tar.gz".into(), tar_gz(&[("a", b"A"), ("b", b"B")]));
        repo.inputs.insert("plain.txt".into(), b"P".to_vec());
        let t = ticket(&[("data.tar.gz", true), ("plain.txt", false)], &[]);
        assert_eq!(stage_inputs(&repo, &t, dir.path()).unwrap(), ["a", "b", "plain.txt"]);
        assert_eq!(listing(dir.path()), ["a", "b", "plain.txt"]);
        assert_eq!(fs::read(dir.path().join("b")).unwrap(), b"B");
    }

    #[test]
    fn traversal_rejected_and_nothing_left_behind() {
        for evil in ["../evil", "/etc/evil", "ok/../../evil"] {
            let dir = tempfile::tempdir().unwrap();
            let mut repo = Memory::default();
            repo.inputs.insert("first.txt".into(), b"1".to_vec());
            repo.inputs.insert("bad.tgz".into(), tar_gz(&[("fine", b"x"), (evil, b"pwned")]));
            let t = ticket(&[("first.txt", false), ("bad.tgz", true)], &[]);
            let err = stage_inputs(&repo, &t, dir.path()).unwrap_err();
            assert!(matches!(err, RepoError::UnsafeArchive { .. }), "{evil}: {err}");
            assert!(listing(dir.path()).is_empty(), "{evil}");
        }
    }

    #[test]
    fn tar_symlink_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut builder = tar::Builder::new(Vec::new());
        let mut header = tar::Header::new_gnu();
        header.set_entry_type(tar::EntryType::Symlink);
        header.set_size(0);
        builder.append_link(&mut header, "link", "/etc/passwd").unwrap();
        let mut repo = Memory::default();
        repo.inputs.insert("l.tar".into(), builder.into_inner().unwrap());
        let err = stage_inputs(&repo, &ticket(&[("l.tar", true)], &[]), dir.path()).unwrap_err();
        assert!(matches!(err, RepoError::UnsafeArchive { .. }));
        assert!(listing(dir.path()).is_empty());
    }

    #[test]
    fn zip_unpacked_into_subdirectory() {
        let dir = tempfile::tempdir().unwrap();
        let mut buf = Cursor::new(Vec::new());
        {
            let mut w = zip::ZipWriter::new(&mut buf);
            let opts = zip::write::SimpleFileOptions::default();
            w.add_directory("d/", opts).unwrap();
            w.start_file("d/x.txt", opts).unwrap();
            w.write_all(b"X").unwrap();
            w.finish().unwrap();
        }
        let mut repo = Memory::default();
        repo.inputs.insert("sub/z.zip".into(), buf.into_inner());
        let staged = stage_inputs(&repo, &ticket(&[("sub/z.zip", true)], &[]), dir.path()).unwrap();
        assert_eq!(staged, ["sub/d/x.txt"]);
        assert!(!dir.path().join("sub/z.zip").exists());
    }

    #[test]
    fn zip_traversal_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut buf = Cursor::new(Vec::new());
        {
            let mut w = zip::ZipWriter::new(&mut buf);
            w.start_file("../evil", zip::write::SimpleFileOptions::default()).unwrap();
            w.write_all(b"X").unwrap();
            w.finish().unwrap();
        }
        let mut repo = Memory::default();
        repo.inputs.insert("z.zip".into(), buf.into_inner());
        assert!(stage_inputs(&repo, &ticket(&[("z.zip", true)], &[]), dir.path()).is_err());
        assert!(listing(dir.path()).is_empty());
    }

    #[test]
    fn failed_fetch_rolls_back() {
        let dir = tempfile::tempdir().unwrap();
        let mut repo = Memory::default();
        repo.inputs.insert("a/one.txt".into(), b"1".to_vec());
        let t = ticket(&[("a/one.txt", false), ("two.txt", false)], &[]);
        assert!(stage_inputs(&repo, &t, dir.path()).unwrap_err().is_transient());
        assert!(listing(dir.path()).is_empty());
    }

    #[test]
    fn staged_files_stay_inside_dest() {
        let dir = tempfile::tempdir().unwrap();
        let mut repo = Memory::default();
        repo.inputs.insert("x.tar.gz".into(), tar_gz(&[("./p/q", b"1"), ("r", b"2")]));
        let staged = stage_inputs(&repo, &ticket(&[("x.tar.gz", true)], &[]), dir.path()).unwrap();
        let root = dir.path().canonicalize().unwrap();
        for rel in staged {
            assert!(root.join(&rel).canonicalize().unwrap().starts_with(&root), "{rel}");
        }
    }

    #[test]
    fn outputs_missing_and_symlinks() {
        let dir = tempfile::tempdir().unwrap();
        let secret = tempfile::NamedTempFile::new().unwrap();
        fs::write(dir.path().join("a.txt"), b"A").unwrap();
        std::os::unix::fs::symlink(secret.path(), dir.path().join("link.txt")).unwrap();
        let repo = Memory::default();
        let t = ticket(&[], &["a.txt", "b.txt", "link.txt"]);
        let summary = upload_outputs(&repo, &t, dir.path()).unwrap();
        assert_eq!(summary.uploaded, 1);
        assert_eq!(summary.missing, ["b.txt", "link.txt"]);
        assert_eq!(repo.outputs.borrow()["a.txt"], b"A");
    }
}
