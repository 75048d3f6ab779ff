use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const STORE_FILE: &str = "store.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const PROVENANCE_FILE: &str = "provenance.jsonl";
pub const REPORTS_DIR: &str = "reports";

/// Where an artifact lives: shared by every ratio, or owned by one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope<'a> {
    Global,
    Ratio(&'a str),
}

impl Scope<'_> {
    pub fn name(&self) -> String {
        match self {
            Scope::Global => "global".into(),
            Scope::Ratio(label) => (*label).to_string(),
        }
    }

    fn dir(&self) -> PathBuf {
        match self {
            Scope::Global => PathBuf::from("global"),
            Scope::Ratio(label) => Path::new("ratios").join(label.replace(':', "-")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreHeader {
    config_hash: String,
    master_seed: u64,
    created: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Done,
    Failed,
}

/// One line of the store's provenance log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub scope: String,
    pub stage: String,
    pub status: StageStatus,
    pub seed: Option<u64>,
    pub artifacts: Vec<String>,
    pub error: Option<String>,
    pub timestamp: String,
}

/// Directory of immutable per-(scope, stage) artifacts. Writers for distinct
/// artifacts may run concurrently; writing an existing artifact is refused.
#[derive(Debug)]
pub struct ResultsStore {
    root: PathBuf,
    config: ExperimentConfig,
    config_hash: String,
    log: Mutex<()>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl ResultsStore {
    /// Creates a fresh store at `config.experiment.out`.
    pub fn create(config: &ExperimentConfig) -> Result<Self> {
        let root = config.experiment.out.clone();
        if root.join(STORE_FILE).exists() {
            return Err(Error::Store(format!(
                "{} already holds a results store; resume it instead",
                root.display()
            )));
        }
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let store = ResultsStore {
            config_hash: config.hash()?,
            root,
            config: config.clone(),
            log: Mutex::new(()),
        };
        store.write_root(CONFIG_FILE, config.to_toml()?.as_bytes())?;
        let header = StoreHeader {
            config_hash: store.config_hash.clone(),
            master_seed: config.experiment.seed,
            created: now(),
        };
        store.write_root(STORE_FILE, &serde_json::to_vec_pretty(&header)?)?;
        Ok(store)
    }

    /// Opens an existing store; its recorded config must still hash to the
    /// recorded value.
    pub fn open(root: &Path) -> Result<Self> {
        let header_path = root.join(STORE_FILE);
        let raw = fs::read(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: StoreHeader = serde_json::from_slice(&raw)?;
        let mut config = ExperimentConfig::load(&root.join(CONFIG_FILE))?;
        config.experiment.out = root.to_path_buf();
        let hash = config.hash()?;
        if hash != header.config_hash {
            return Err(Error::Store(format!(
                "{} was edited after the store was created",
                root.join(CONFIG_FILE).display()
            )));
        }
        Ok(ResultsStore {
            root: root.to_path_buf(),
            config,
            config_hash: hash,
            log: Mutex::new(()),
        })
    }

    /// Refuses a config that differs from the stored one, naming the keys.
    pub fn check_config(&self, config: &ExperimentConfig) -> Result<()> {
        let changed = self.config.changed_keys(config)?;
        if changed.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigChanged(changed))
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn scope_dir(&self, scope: Scope) -> PathBuf {
        self.root.join(scope.dir())
    }

    pub fn path(&self, scope: Scope, name: &str) -> PathBuf {
        self.scope_dir(scope).join(name)
    }

    pub fn exists(&self, scope: Scope, name: &str) -> bool {
        self.path(scope, name).exists()
    }

    fn write_root(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        write_new(&self.root.join(name), bytes)
    }

    /// Writes a new artifact atomically; an existing artifact is never
    /// replaced.
    pub fn write_bytes(&self, scope: Scope, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let dir = self.scope_dir(scope);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_new(&dir.join(name), bytes)
    }

    pub fn write_json<T: Serialize>(&self, scope: Scope, name: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(scope, name, &bytes)
    }

    pub fn read_json<T: DeserializeOwned>(&self, scope: Scope, name: &str) -> Result<T> {
        let path = self.path(scope, name);
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&raw)?)
    }

    /// Publishes a directory built elsewhere (e.g. a staging directory) as
    /// the artifact `name`; refuses when it already exists.
    pub fn publish_dir(&self, scope: Scope, staging: &Path, name: &str) -> Result<PathBuf> {
        let target = self.path(scope, name);
        if target.exists() {
            return Err(Error::Store(format!("{} already exists", target.display())));
        }
        fs::rename(staging, &target).map_err(|e| Error::io(&target, e))?;
        Ok(target)
    }

    /// Appends a provenance entry (serialized across writers).
    pub fn record(
        &self,
        scope: Scope,
        stage: &str,
        seed: Option<u64>,
        outcome: std::result::Result<&[PathBuf], &Error>,
    ) -> Result<()> {
        let (status, artifacts, error) = match outcome {
            Ok(paths) => (
                StageStatus::Done,
                paths
                    .iter()
                    .map(|p| {
                        p.strip_prefix(&self.root)
                            .unwrap_or(p)
                            .to_string_lossy()
                            .into_owned()
                    })
                    .collect(),
                None,
            ),
            Err(e) => (StageStatus::Failed, Vec::new(), Some(e.to_string())),
        };
        let entry = ProvenanceEntry {
            scope: scope.name(),
            stage: stage.to_string(),
            status,
            seed,
            artifacts,
            error,
            timestamp: now(),
        };
        let line = serde_json::to_string(&entry)?;
        let _guard = self.log.lock().unwrap_or_else(|p| p.into_inner());
        let path = self.root.join(PROVENANCE_FILE);
        let mut f = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        f.sync_data().map_err(|e| Error::io(&path, e))
    }

    pub fn provenance(&self) -> Result<Vec<ProvenanceEntry>> {
        let path = self.root.join(PROVENANCE_FILE);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}

/// Writes through a temporary file and hard-links it into place, which
/// fails instead of overwriting when `path` exists.
fn write_new(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    if path.exists() {
        return Err(Error::Store(format!("{} already exists", path.display())));
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Store(format!("{} is not a file path", path.display())))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{file_name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    let linked = fs::hard_link(&tmp, path);
    let _ = fs::remove_file(&tmp);
    match linked {
        Ok(()) => Ok(path.to_path_buf()),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            Err(Error::Store(format!("{} already exists", path.display())))
        }
        Err(e) => Err(Error::io(path, e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.experiment.out = dir.join("store");
        c
    }

    #[test]
    fn artifacts_are_write_once() {
        let tmp = tempfile::tempdir().unwrap();
        let store = ResultsStore::create(&config(tmp.path())).unwrap();
        store.write_json(Scope::Ratio("1:0"), "a.json", &1).unwrap();
        assert!(matches!(
            store.write_json(Scope::Ratio("1:0"), "a.json", &2),
            Err(Error::Store(_))
        ));
        assert_eq!(store.read_json::<i32>(Scope::Ratio("1:0"), "a.json").unwrap(), 1);
        assert!(store.path(Scope::Ratio("1:0"), "a.json").ends_with("ratios/1-0/a.json"));
    }

    #[test]
    fn concurrent_writers_of_distinct_keys_all_land() {
        let tmp = tempfile::tempdir().unwrap();
        let store = ResultsStore::create(&config(tmp.path())).unwrap();
        std::thread::scope(|s| {
            for i in 0..8 {
                let store = &store;
                s.spawn(move || {
                    let label = format!("{i}:1");
                    let p = store.write_json(Scope::Ratio(&label), "x.json", &i).unwrap();
                    store.record(Scope::Ratio(&label), "x", Some(i), Ok(&[p])).unwrap();
                });
            }
        });
        assert_eq!(store.provenance().unwrap().len(), 8);
        // Racing writers of one key: exactly one wins.
        let wins = std::thread::scope(|s| {
            let handles: Vec<_> = (0..4)
                .map(|i| {
                    let store = &store;
                    s.spawn(move || store.write_json(Scope::Global, "same.json", &i).is_ok())
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).filter(|won| *won).count()
        });
        assert_eq!(wins, 1);
    }

    #[test]
    fn second_create_is_refused_and_open_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let c = config(tmp.path());
        let store = ResultsStore::create(&c).unwrap();
        assert!(matches!(ResultsStore::create(&c), Err(Error::Store(_))));
        let reopened = ResultsStore::open(store.root()).unwrap();
        assert_eq!(reopened.config(), &c);
        reopened.check_config(&c).unwrap();
        let mut edited = c.clone();
        edited.training.epochs = 1;
        match reopened.check_config(&edited) {
            Err(Error::ConfigChanged(keys)) => assert_eq!(keys, vec!["training.epochs"]),
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn tampered_config_file_is_detected() {
        let tmp = tempfile::tempdir().unwrap();
        let store = ResultsStore::create(&config(tmp.path())).unwrap();
        let path = store.root().join(CONFIG_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("tau = 0.5", "tau = 0.6");
        fs::write(&path, text).unwrap();
        assert!(matches!(ResultsStore::open(store.root()), Err(Error::Store(_))));
    }
}
