//! On-disk task data: `label<TAB>text` text files and JSON suite dumps.

use std::fs;
use std::path::Path;

use super::{featurize, Example, FeaturizerConfig, TaskSpec};
use crate::error::{Error, Result};

/// Parses `label<TAB>text` records, one per line. Blank lines are skipped;
/// labels are global class ids.
pub fn parse_text_records(
    content: &str,
    featurizer: &FeaturizerConfig,
    num_classes: usize,
) -> std::result::Result<Vec<Example>, String> {
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, text) = line
            .split_once('\t')
            .ok_or_else(|| format!("line {}: expected label<TAB>text", lineno + 1))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| format!("line {}: label {label:?} is not a class id", lineno + 1))?;
        if label >= num_classes {
            return Err(format!(
                "line {}: label {label} out of range for {num_classes} classes",
                lineno + 1
            ));
        }
        out.push(Example::new(featurize(text, featurizer), label));
    }
    Ok(out)
}

fn read_records(path: &Path, featurizer: &FeaturizerConfig, num_classes: usize) -> Result<Vec<Example>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_text_records(&content, featurizer, num_classes).map_err(|detail| Error::Format {
        path: path.to_path_buf(),
        detail,
    })
}

pub fn load_text_task(
    id: usize,
    name: &str,
    train: &Path,
    test: &Path,
    featurizer: &FeaturizerConfig,
    num_classes: usize,
) -> Result<TaskSpec> {
    featurizer.validate()?;
    Ok(TaskSpec {
        id,
        name: name.to_string(),
        train: read_records(train, featurizer, num_classes)?,
        test: read_records(test, featurizer, num_classes)?,
    })
}

pub fn save_suite(path: &Path, tasks: &[TaskSpec]) -> Result<()> {
    let json = serde_json::to_vec(tasks).expect("tasks serialize");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_suite(path: &Path) -> Result<Vec<TaskSpec>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}
