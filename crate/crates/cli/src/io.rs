use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lazyprune::engine::{tokenize, BOS};

use crate::args::PromptSource;
use crate::CliError;

#[derive(Debug, Clone)]
pub struct Prompt {
    pub name: String,
    pub ids: Vec<u32>,
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Corpus files in file-name order; hidden files and directories skipped.
pub fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Io(e.to_string()))?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if path.is_file() && !hidden {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("corpus {} has no files", dir.display())));
    }
    Ok(files)
}

/// Tokenized prompts from whichever source was given. Prompts that would
/// not leave room for `reserve` generated positions lose bytes from the
/// front; BOS is kept.
pub fn load_prompts(source: &PromptSource, max_position: usize, reserve: usize) -> Result<Vec<Prompt>, CliError> {
    let raw: Vec<(String, Vec<u8>)> = match (&source.prompt, &source.prompt_file, &source.corpus) {
        (Some(text), None, None) => vec![("inline".to_string(), text.as_bytes().to_vec())],
        (None, Some(path), None) => vec![(path.display().to_string(), read(path)?)],
        (None, None, Some(dir)) => corpus_files(dir)?
            .into_iter()
            .map(|p| Ok((p.file_name().unwrap_or_default().to_string_lossy().into_owned(), read(&p)?)))
            .collect::<Result<_, CliError>>()?,
        _ => return Err(CliError::Usage("exactly one of --prompt, --prompt-file, --corpus is required".into())),
    };
    let limit = max_position.saturating_sub(reserve);
    if limit < 2 {
        return Err(CliError::Usage(format!(
            "max_position {max_position} leaves no room for a prompt and {reserve} new tokens"
        )));
    }
    Ok(raw
        .into_iter()
        .map(|(name, bytes)| {
            let mut ids = tokenize(&bytes);
            if ids.len() > limit {
                eprintln!(
                    "warning: prompt {name} has {} tokens; keeping the last {} (plus BOS)",
                    ids.len(),
                    limit - 1
                );
                let tail = ids.split_off(ids.len() - (limit - 1));
                ids = std::iter::once(BOS).chain(tail).collect();
            }
            Prompt { name, ids }
        })
        .collect())
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so a failed command never leaves a partial file behind.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let io_err = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(contents).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push(b'\n');
    write_atomic(path, &text)
}
