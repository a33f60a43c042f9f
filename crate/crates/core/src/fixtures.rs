//! The fixture manifest: which objects exist, where their sources are,
//! which native function mirrors each bench kernel.

use std::path::{Path, PathBuf};
use std::process::Command;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("FixtureMissing: {0}")]
    FixtureMissing(String),
    #[error("CompilerMissing: {0}")]
    CompilerMissing(String),
    #[error("manifest line {line}: {why}")]
    Malformed { line: usize, why: String },
    #[error("compile {source_path}: {why}")]
    CompileFailed { source_path: String, why: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureGroup {
    Bench,
    Tracing,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: String,
    pub group: FixtureGroup,
    pub source: PathBuf,
    pub object: PathBuf,
    pub native_twin: Option<String>,
    pub sections: Vec<String>,
}

impl Fixture {
    pub fn read_object(&self) -> Result<Vec<u8>, FixtureError> {
        std::fs::read(&self.object).map_err(|_| FixtureError::FixtureMissing(self.object.display().to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct FixtureManifest {
    pub root: PathBuf,
    pub compiler: String,
    pub flags: Vec<String>,
    pub fixtures: Vec<Fixture>,
}

/// The fixture directory: `UEBPF_FIXTURES` if set, else the one in the
/// source tree this crate was built from.
pub fn fixture_dir() -> PathBuf {
    match std::env::var_os("UEBPF_FIXTURES") {
        Some(d) => PathBuf::from(d),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures"),
    }
}

impl FixtureManifest {
    pub fn load_default() -> Result<Self, FixtureError> {
        Self::load(&fixture_dir())
    }

    pub fn load(dir: &Path) -> Result<Self, FixtureError> {
        let path = dir.join("manifest.txt");
        let text = std::fs::read_to_string(&path).map_err(|_| FixtureError::FixtureMissing(path.display().to_string()))?;
        Self::parse(&text, dir)
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self, FixtureError> {
        let mut compiler = None;
        let mut flags = None;
        let mut fixtures = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: &str| FixtureError::Malformed { line: i + 1, why: why.to_string() };
            let (key, rest) = line.split_once(char::is_whitespace).ok_or_else(|| bad("missing fields"))?;
            let rest = rest.trim();
            match key {
                "compiler" => compiler = Some(rest.to_string()),
                "flags" => flags = Some(rest.split_whitespace().map(String::from).collect()),
                "fixture" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    if f.len() != 6 {
                        return Err(bad("fixture needs 6 fields"));
                    }
                    let group = match f[1] {
                        "bench" => FixtureGroup::Bench,
                        "tracing" => FixtureGroup::Tracing,
                        _ => return Err(bad("unknown group")),
                    };
                    let native_twin = (f[4] != "-").then(|| f[4].to_string());
                    if group == FixtureGroup::Bench && native_twin.is_none() {
                        return Err(bad("bench fixture without a native twin"));
                    }
                    fixtures.push(Fixture {
                        name: f[0].to_string(),
                        group,
                        source: root.join(f[2]),
                        object: root.join(f[3]),
                        native_twin,
                        sections: f[5].split(',').map(String::from).collect(),
                    });
                }
                _ => return Err(bad("unknown record")),
            }
        }
        let missing = |what: &str| FixtureError::Malformed { line: 0, why: format!("no {what} record") };
        Ok(FixtureManifest {
            root: root.to_path_buf(),
            compiler: compiler.ok_or_else(|| missing("compiler"))?,
            flags: flags.ok_or_else(|| missing("flags"))?,
            fixtures,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Fixture, FixtureError> {
        self.fixtures.iter().find(|f| f.name == name).ok_or_else(|| FixtureError::FixtureMissing(name.to_string()))
    }

    pub fn bench(&self) -> impl Iterator<Item = &Fixture> {
        self.fixtures.iter().filter(|f| f.group == FixtureGroup::Bench)
    }

    /// Compiles `fixture` with the manifest flags and returns the object
    /// bytes. The checked-in object is not touched.
    pub fn rebuild(&self, fixture: &Fixture, clang: &str) -> Result<Vec<u8>, FixtureError> {
        let out = std::env::temp_dir().join(format!("uebpf-fixture-{}-{}.o", std::process::id(), fixture.name));
        let status = Command::new(clang)
            .current_dir(&self.root)
            .args(&self.flags)
            .arg(&fixture.source)
            .arg("-o")
            .arg(&out)
            .output()
            .map_err(|e| FixtureError::CompilerMissing(format!("{clang}: {e}")))?;
        if !status.status.success() {
            return Err(FixtureError::CompileFailed {
                source_path: fixture.source.display().to_string(),
                why: String::from_utf8_lossy(&status.stderr).into_owned(),
            });
        }
        let bytes = std::fs::read(&out)?;
        let _ = std::fs::remove_file(&out);
        Ok(bytes)
    }
}

/// First line of `clang --version`, or `CompilerMissing`.
pub fn compiler_version(clang: &str) -> Result<String, FixtureError> {
    let out = Command::new(clang)
        .arg("--version")
        .output()
        .map_err(|e| FixtureError::CompilerMissing(format!("{clang}: {e}")))?;
    if !out.status.success() {
        return Err(FixtureError::CompilerMissing(clang.to_string()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).lines().next().unwrap_or_default().trim().to_string())
}
