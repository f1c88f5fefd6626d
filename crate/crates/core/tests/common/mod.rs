//! Fixture helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use memrec::config::RunConfig;
use memrec::pipeline::{Pipeline, RunOptions, StageOutput};

pub fn fixture_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

/// Recursively copies `src` into `dst`, skipping any `out` directory.
pub fn copy_tree(src: &Path, dst: &Path) {
    std::fs::create_dir_all(dst).unwrap();
    for entry in std::fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let path = entry.path();
        let target = dst.join(entry.file_name());
        if path.is_dir() {
            if entry.file_name() != "out" {
                copy_tree(&path, &target);
            }
        } else {
            std::fs::copy(&path, &target).unwrap();
        }
    }
}

/// A private copy of a fixture, so runs never write into the source tree.
pub struct FixtureRun {
    pub dir: tempfile::TempDir,
}

impl FixtureRun {
    pub fn new(name: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        copy_tree(&fixture_dir(name), dir.path());
        Self { dir }
    }

    pub fn config_path(&self) -> PathBuf {
        self.dir.path().join("memrec.toml")
    }

    pub fn pipeline(&self) -> Pipeline {
        let cfg = RunConfig::load(&self.config_path()).unwrap();
        Pipeline::new(
            cfg,
            RunOptions {
                deterministic: true,
                jobs: 1,
            },
        )
    }

    pub fn run_all(&self) -> StageOutput {
        self.pipeline().run_all().unwrap()
    }

    pub fn out(&self, rel: &str) -> PathBuf {
        self.dir.path().join("out").join(rel)
    }

    pub fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.out(rel)).unwrap()
    }

    /// Every file under `out/<rel>` keyed by its path relative to that directory.
    pub fn tree(&self, rel: &str) -> BTreeMap<String, Vec<u8>> {
        let mut files = BTreeMap::new();
        collect(&self.out(rel), Path::new(""), &mut files);
        files
    }
}

fn collect(dir: &Path, prefix: &Path, files: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let rel = prefix.join(entry.file_name());
        if entry.path().is_dir() {
            collect(&entry.path(), &rel, files);
        } else {
            files.insert(
                rel.display().to_string(),
                std::fs::read(entry.path()).unwrap(),
            );
        }
    }
}

/// Compares `actual` with the golden file, or rewrites it when `UPDATE_GOLDEN=1`.
pub fn check_golden(golden: &Path, actual: &str) -> Result<(), String> {
    if std::env::var("UPDATE_GOLDEN").as_deref() == Ok("1") {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(golden, actual).unwrap();
        return Ok(());
    }
    let expected = std::fs::read_to_string(golden).map_err(|e| {
        format!(
            "cannot read golden {}: {e} (regenerate with UPDATE_GOLDEN=1)",
            golden.display()
        )
    })?;
    if expected == actual {
        return Ok(());
    }
    let line = expected
        .lines()
        .zip(actual.lines())
        .position(|(a, b)| a != b)
        .map(|i| i + 1)
        .unwrap_or_else(|| expected.lines().count().min(actual.lines().count()) + 1);
    Err(format!(
        "{} differs from the run output at line {line}",
        golden.display()
    ))
}
