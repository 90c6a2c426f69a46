//! Shared data: append-only, per-variable histories of tagged records.
//!
//! Each variable lives in its own table addressed by a [`TableKey`]
//! (`("sensor", 1)`, `("actuator", 2)`, ...). Tables are created on first
//! insert. Every operation is atomic per key; concurrent tasks share one
//! store through an `Arc`.
//!
//! [`SharedData`] is the backend contract the rest of the crate programs
//! against. [`DataStore`] is the in-process implementation, optionally
//! journaling every table to an append-only file.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{decode_record, encode_record};
use crate::record::Record;

pub const SENSOR: &str = "sensor";
pub const ACTUATOR: &str = "actuator";
pub const SETPOINT: &str = "setpoint";
pub const OPMODE: &str = "opmode";
pub const DIM: &str = "dim";
pub const TUNING_KP: &str = "tuning_kp";
pub const TUNING_TAUI: &str = "tuning_taui";
pub const TUNING_UBAR: &str = "tuning_ubar";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid table name {0:?}")]
    InvalidTable(String),
    #[error("table index must be >= 1, got {0}")]
    InvalidIndex(usize),
    #[error("no data in {0}")]
    NoData(TableKey),
    #[error("unknown table {0}")]
    NotFound(TableKey),
    #[error("{key}: value {value} is not finite")]
    NonFinite { key: TableKey, value: f64 },
    #[error("{0} holds a different value kind")]
    KindMismatch(TableKey),
    #[error("invalid dimensions ({0}, {1}, {2}): all counts must be >= 1")]
    InvalidDims(i64, i64, i64),
    #[error("journal {path}: {source}")]
    Journal { path: PathBuf, source: io::Error },
    #[error("journal {path} line {line}: {reason}")]
    JournalFormat { path: PathBuf, line: usize, reason: String },
    #[error("csv export: {0}")]
    Csv(#[from] csv::Error),
}

/// Address of one variable's history: table name plus 1-based index.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TableKey {
    table: String,
    index: usize,
}

impl TableKey {
    pub fn new(table: impl Into<String>, index: usize) -> Result<Self, StoreError> {
        let table = table.into();
        let valid = !table.is_empty()
            && table.len() <= 64
            && table.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !valid {
            return Err(StoreError::InvalidTable(table));
        }
        if index == 0 {
            return Err(StoreError::InvalidIndex(index));
        }
        Ok(TableKey { table, index })
    }

    pub fn table(&self) -> &str {
        &self.table
    }

    pub fn index(&self) -> usize {
        self.index
    }
}

impl fmt::Display for TableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.table, self.index)
    }
}

/// Measurement, setpoint and manipulated-variable counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionSpec {
    pub n_meas: usize,
    pub n_setp: usize,
    pub n_manip: usize,
}

impl DimensionSpec {
    pub const SCALAR: DimensionSpec = DimensionSpec { n_meas: 1, n_setp: 1, n_manip: 1 };

    pub fn new(n_meas: usize, n_setp: usize, n_manip: usize) -> Result<Self, StoreError> {
        if n_meas == 0 || n_setp == 0 || n_manip == 0 {
            return Err(StoreError::InvalidDims(n_meas as i64, n_setp as i64, n_manip as i64));
        }
        Ok(DimensionSpec { n_meas, n_setp, n_manip })
    }
}

/// Whether a table holds float or integer records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Float,
    Int,
}

/// Receives every successful insert. Called while the table is locked, so
/// delivery is in per-key order; implementations must not block.
pub trait StoreObserver: Send + Sync {
    fn on_insert(&self, key: &TableKey, record: &Record<f64>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ObserverId(u64);

/// Backend contract for shared data.
pub trait SharedData: Send + Sync {
    fn insert_float(&self, key: &TableKey, record: Record<f64>) -> Result<(), StoreError>;
    fn insert_int(&self, key: &TableKey, record: Record<i64>) -> Result<(), StoreError>;
    fn recent_float(&self, key: &TableKey) -> Result<Record<f64>, StoreError>;
    fn recent_int(&self, key: &TableKey) -> Result<Record<i64>, StoreError>;
    /// Full history in insertion order; integer tables are widened to f64.
    fn history(&self, key: &TableKey) -> Result<Vec<Record<f64>>, StoreError>;
    fn keys(&self) -> Vec<(TableKey, ValueKind)>;
    fn observe(&self, observer: Arc<dyn StoreObserver>) -> ObserverId;
    fn unobserve(&self, id: ObserverId);

    /// Up to `limit` most recent records, newest first.
    fn history_newest(&self, key: &TableKey, limit: usize) -> Result<Vec<Record<f64>>, StoreError> {
        let mut all = self.history(key)?;
        all.reverse();
        all.truncate(limit);
        Ok(all)
    }

    /// Most recent record of indices `1..=count` of `table`.
    fn read_recent_multi_float(&self, table: &str, count: usize) -> Result<Vec<Record<f64>>, StoreError> {
        (1..=count).map(|i| self.recent_float(&TableKey::new(table, i)?)).collect()
    }

    fn read_recent_int(&self, table: &str, index: usize) -> Result<i64, StoreError> {
        Ok(self.recent_int(&TableKey::new(table, index)?)?.value)
    }

    fn read_recent_multi_int(&self, table: &str, count: usize) -> Result<Vec<i64>, StoreError> {
        (1..=count).map(|i| self.read_recent_int(table, i)).collect()
    }

    /// Reads the three-entry "dim" table.
    fn read_dims(&self) -> Result<DimensionSpec, StoreError> {
        let n = self.read_recent_multi_int(DIM, 3)?;
        if n.iter().any(|&v| v < 1) {
            return Err(StoreError::InvalidDims(n[0], n[1], n[2]));
        }
        DimensionSpec::new(n[0] as usize, n[1] as usize, n[2] as usize)
    }

    fn write_dims(&self, dims: DimensionSpec, ts: crate::time::Timestamp) -> Result<(), StoreError> {
        for (i, n) in [dims.n_meas, dims.n_setp, dims.n_manip].into_iter().enumerate() {
            self.insert_int(&TableKey::new(DIM, i + 1)?, Record::ok(ts, n as i64))?;
        }
        Ok(())
    }
}

enum Series {
    Float(Vec<Record<f64>>),
    Int(Vec<Record<i64>>),
}

impl Series {
    fn kind(&self) -> ValueKind {
        match self {
            Series::Float(_) => ValueKind::Float,
            Series::Int(_) => ValueKind::Int,
        }
    }
}

struct Table {
    series: Series,
    journal: Option<(PathBuf, File)>,
}

type Observers = Vec<(ObserverId, Arc<dyn StoreObserver>)>;

/// In-process [`SharedData`] backend.
#[derive(Default)]
pub struct DataStore {
    tables: RwLock<BTreeMap<TableKey, Arc<Mutex<Table>>>>,
    journal_dir: Option<PathBuf>,
    observers: RwLock<Observers>,
    next_observer: AtomicU64,
}

impl DataStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// A store that appends every insert to `<dir>/<table>.<index>.<kind>.journal`.
    /// Existing journals in `dir` are replayed first.
    pub fn with_journal(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| StoreError::Journal { path: dir.clone(), source })?;
        let store = DataStore { journal_dir: Some(dir.clone()), ..Default::default() };
        store.replay(&dir)?;
        Ok(store)
    }

    /// Loads journals from `dir` into a fresh store without journaling further.
    pub fn from_journal(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let store = DataStore::new();
        store.replay(dir.as_ref())?;
        Ok(store)
    }

    fn replay(&self, dir: &Path) -> Result<(), StoreError> {
        let entries = fs::read_dir(dir).map_err(|source| StoreError::Journal { path: dir.to_owned(), source })?;
        let mut files: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        files.sort();
        for path in files {
            let Some((key, kind)) = parse_journal_name(&path) else { continue };
            let file = File::open(&path).map_err(|source| StoreError::Journal { path: path.clone(), source })?;
            let mut series = match kind {
                ValueKind::Float => Series::Float(Vec::new()),
                ValueKind::Int => Series::Int(Vec::new()),
            };
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|source| StoreError::Journal { path: path.clone(), source })?;
                let bad = |reason: String| StoreError::JournalFormat { path: path.clone(), line: n + 1, reason };
                let rec = decode_record(&line).map_err(|e| bad(e.to_string()))?;
                match &mut series {
                    Series::Float(v) => v.push(rec),
                    Series::Int(v) => {
                        if rec.value.fract() != 0.0 {
                            return Err(bad(format!("non-integer value {}", rec.value)));
                        }
                        v.push(Record::new(rec.ts, rec.status, rec.value as i64));
                    }
                }
            }
            let journal = self.open_journal(&key, kind)?;
            self.tables.write().unwrap().insert(key, Arc::new(Mutex::new(Table { series, journal })));
        }
        Ok(())
    }

    fn open_journal(&self, key: &TableKey, kind: ValueKind) -> Result<Option<(PathBuf, File)>, StoreError> {
        let Some(dir) = &self.journal_dir else { return Ok(None) };
        let kind = match kind {
            ValueKind::Float => "f",
            ValueKind::Int => "i",
        };
        let path = dir.join(format!("{}.{}.{kind}.journal", key.table, key.index));
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| StoreError::Journal { path: path.clone(), source })?;
        Ok(Some((path, file)))
    }

    fn table(&self, key: &TableKey) -> Option<Arc<Mutex<Table>>> {
        self.tables.read().unwrap().get(key).cloned()
    }

    fn table_or_create(&self, key: &TableKey, kind: ValueKind) -> Result<Arc<Mutex<Table>>, StoreError> {
        if let Some(t) = self.table(key) {
            return Ok(t);
        }
        let mut tables = self.tables.write().unwrap();
        if let Some(t) = tables.get(key) {
            return Ok(t.clone());
        }
        let series = match kind {
            ValueKind::Float => Series::Float(Vec::new()),
            ValueKind::Int => Series::Int(Vec::new()),
        };
        let table = Arc::new(Mutex::new(Table { series, journal: self.open_journal(key, kind)? }));
        tables.insert(key.clone(), table.clone());
        Ok(table)
    }

    fn append(&self, key: &TableKey, record: Record<f64>, int_value: Option<i64>) -> Result<(), StoreError> {
        let kind = if int_value.is_some() { ValueKind::Int } else { ValueKind::Float };
        let table = self.table_or_create(key, kind)?;
        let mut table = table.lock().unwrap();
        if table.series.kind() != kind {
            return Err(StoreError::KindMismatch(key.clone()));
        }
        if let Some((path, file)) = &mut table.journal {
            let mut line = encode_record(&record);
            line.push('\n');
            file.write_all(line.as_bytes())
                .map_err(|source| StoreError::Journal { path: path.clone(), source })?;
        }
        match (&mut table.series, int_value) {
            (Series::Int(v), Some(i)) => v.push(Record::new(record.ts, record.status.clone(), i)),
            (Series::Float(v), None) => v.push(record.clone()),
            _ => unreachable!("kind checked above"),
        }
        for (_, obs) in self.observers.read().unwrap().iter() {
            obs.on_insert(key, &record);
        }
        Ok(())
    }

    /// Writes every record as `table,index,timestamp,status,value`.
    pub fn export_csv<W: Write>(&self, writer: W) -> Result<(), StoreError> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["table", "index", "timestamp", "status", "value"])?;
        let keys: Vec<TableKey> = self.tables.read().unwrap().keys().cloned().collect();
        for key in keys {
            for r in self.history(&key)? {
                out.write_record([
                    key.table.clone(),
                    key.index.to_string(),
                    r.ts.to_string(),
                    r.status.to_string(),
                    crate::protocol::render_value(r.value),
                ])?;
            }
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn parse_journal_name(path: &Path) -> Option<(TableKey, ValueKind)> {
    let name = path.file_name()?.to_str()?.strip_suffix(".journal")?;
    let mut parts = name.rsplitn(3, '.');
    let kind = match parts.next()? {
        "f" => ValueKind::Float,
        "i" => ValueKind::Int,
        _ => return None,
    };
    let index = parts.next()?.parse().ok()?;
    let table = parts.next()?;
    Some((TableKey::new(table, index).ok()?, kind))
}

impl SharedData for DataStore {
    fn insert_float(&self, key: &TableKey, record: Record<f64>) -> Result<(), StoreError> {
        if !record.value.is_finite() {
            return Err(StoreError::NonFinite { key: key.clone(), value: record.value });
        }
        self.append(key, record, None)
    }

    fn insert_int(&self, key: &TableKey, record: Record<i64>) -> Result<(), StoreError> {
        let value = record.value;
        self.append(key, record.to_float(), Some(value))
    }

    fn recent_float(&self, key: &TableKey) -> Result<Record<f64>, StoreError> {
        let table = self.table(key).ok_or_else(|| StoreError::NoData(key.clone()))?;
        let table = table.lock().unwrap();
        match &table.series {
            Series::Float(v) => v.last().cloned().ok_or_else(|| StoreError::NoData(key.clone())),
            Series::Int(_) => Err(StoreError::KindMismatch(key.clone())),
        }
    }

    fn recent_int(&self, key: &TableKey) -> Result<Record<i64>, StoreError> {
        let table = self.table(key).ok_or_else(|| StoreError::NoData(key.clone()))?;
        let table = table.lock().unwrap();
        match &table.series {
            Series::Int(v) => v.last().cloned().ok_or_else(|| StoreError::NoData(key.clone())),
            Series::Float(_) => Err(StoreError::KindMismatch(key.clone())),
        }
    }

    fn history(&self, key: &TableKey) -> Result<Vec<Record<f64>>, StoreError> {
        let table = self.table(key).ok_or_else(|| StoreError::NotFound(key.clone()))?;
        let table = table.lock().unwrap();
        Ok(match &table.series {
            Series::Float(v) => v.clone(),
            Series::Int(v) => v.iter().map(Record::to_float).collect(),
        })
    }

    fn history_newest(&self, key: &TableKey, limit: usize) -> Result<Vec<Record<f64>>, StoreError> {
        let table = self.table(key).ok_or_else(|| StoreError::NotFound(key.clone()))?;
        let table = table.lock().unwrap();
        Ok(match &table.series {
            Series::Float(v) => v.iter().rev().take(limit).cloned().collect(),
            Series::Int(v) => v.iter().rev().take(limit).map(Record::to_float).collect(),
        })
    }

    fn keys(&self) -> Vec<(TableKey, ValueKind)> {
        self.tables
            .read()
            .unwrap()
            .iter()
            .map(|(k, t)| (k.clone(), t.lock().unwrap().series.kind()))
            .collect()
    }

    fn observe(&self, observer: Arc<dyn StoreObserver>) -> ObserverId {
        let id = ObserverId(self.next_observer.fetch_add(1, Ordering::Relaxed));
        self.observers.write().unwrap().push((id, observer));
        id
    }

    fn unobserve(&self, id: ObserverId) {
        self.observers.write().unwrap().retain(|(i, _)| *i != id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::Timestamp;

    fn t(micros: i64) -> Timestamp {
        Timestamp::from_unix_micros(1_700_000_000_000_000 + micros).unwrap()
    }

    fn key(table: &str, index: usize) -> TableKey {
        TableKey::new(table, index).unwrap()
    }

    #[test]
    fn write_then_read() {
        let store = DataStore::new();
        store.insert_float(&key(SENSOR, 1), Record::ok(t(0), 1.5)).unwrap();
        assert_eq!(store.recent_float(&key(SENSOR, 1)).unwrap(), Record::ok(t(0), 1.5));
    }

    #[test]
    fn most_recent_wins() {
        let store = DataStore::new();
        store.insert_float(&key(SENSOR, 1), Record::ok(t(0), 1.0)).unwrap();
        store.insert_float(&key(SENSOR, 1), Record::ok(t(1), 2.0)).unwrap();
        assert_eq!(store.recent_float(&key(SENSOR, 1)).unwrap().value, 2.0);
    }

    #[test]
    fn rejects_non_finite() {
        let store = DataStore::new();
        for v in [f64::NAN, f64::INFINITY, f64::NEG_INFINITY] {
            let err = store.insert_float(&key(SENSOR, 1), Record::ok(t(0), v)).unwrap_err();
            assert!(matches!(err, StoreError::NonFinite { .. }));
        }
        assert!(matches!(store.history(&key(SENSOR, 1)), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn multi_read_per_index() {
        let store = DataStore::new();
        store.insert_float(&key(ACTUATOR, 1), Record::ok(t(0), 0.1)).unwrap();
        store.insert_float(&key(ACTUATOR, 1), Record::ok(t(1), 0.3)).unwrap();
        store.insert_float(&key(ACTUATOR, 2), Record::ok(t(2), 0.7)).unwrap();
        let values: Vec<f64> = store.read_recent_multi_float(ACTUATOR, 2).unwrap().iter().map(|r| r.value).collect();
        assert_eq!(values, vec![0.3, 0.7]);
        match store.read_recent_multi_float(ACTUATOR, 3) {
            Err(StoreError::NoData(k)) => assert_eq!(k, key(ACTUATOR, 3)),
            other => panic!("expected no-data, got {other:?}"),
        }
    }

    #[test]
    fn integer_tables() {
        let store = DataStore::new();
        assert!(matches!(store.read_recent_int(OPMODE, 1), Err(StoreError::NoData(_))));
        store.insert_int(&key(OPMODE, 1), Record::ok(t(0), 0)).unwrap();
        store.insert_int(&key(OPMODE, 1), Record::ok(t(1), 1)).unwrap();
        assert_eq!(store.read_recent_int(OPMODE, 1).unwrap(), 1);

        store.write_dims(DimensionSpec::SCALAR, t(2)).unwrap();
        assert_eq!(store.read_dims().unwrap(), DimensionSpec::new(1, 1, 1).unwrap());

        assert!(matches!(
            store.insert_float(&key(OPMODE, 1), Record::ok(t(3), 1.0)),
            Err(StoreError::KindMismatch(_))
        ));
    }

    #[test]
    fn zero_dims_rejected() {
        let store = DataStore::new();
        store.write_dims(DimensionSpec::SCALAR, t(0)).unwrap();
        store.insert_int(&key(DIM, 2), Record::ok(t(1), 0)).unwrap();
        assert!(matches!(store.read_dims(), Err(StoreError::InvalidDims(1, 0, 1))));
    }

    #[test]
    fn key_validation() {
        assert!(matches!(TableKey::new("sensor", 0), Err(StoreError::InvalidIndex(0))));
        assert!(matches!(TableKey::new("../etc", 1), Err(StoreError::InvalidTable(_))));
        assert!(TableKey::new("tuning_kp", 1).is_ok());
    }

    #[test]
    fn history_in_insertion_order() {
        let store = DataStore::new();
        let k = key(SENSOR, 1);
        for i in 0..5 {
            store.insert_float(&k, Record::ok(t(i), i as f64)).unwrap();
        }
        let values: Vec<f64> = store.history(&k).unwrap().iter().map(|r| r.value).collect();
        assert_eq!(values, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        let newest: Vec<f64> = store.history_newest(&k, 3).unwrap().iter().map(|r| r.value).collect();
        assert_eq!(newest, vec![4.0, 3.0, 2.0]);
        assert!(store.history_newest(&k, 0).unwrap().is_empty());
    }

    #[test]
    fn journal_replays() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = DataStore::with_journal(dir.path()).unwrap();
            store.insert_float(&key(SENSOR, 1), Record::ok(t(0), 1.25)).unwrap();
            store.insert_float(&key(SENSOR, 1), Record::ok(t(1), -0.0)).unwrap();
            store.insert_int(&key(OPMODE, 1), Record::ok(t(2), 1)).unwrap();
        }
        let text = fs::read_to_string(dir.path().join("sensor.1.f.journal")).unwrap();
        assert_eq!(text.lines().next().unwrap(), format!("{}|ok|1.25", t(0)));

        let replayed = DataStore::from_journal(dir.path()).unwrap();
        let hist = replayed.history(&key(SENSOR, 1)).unwrap();
        assert_eq!(hist.len(), 2);
        assert_eq!(hist[1].value.to_bits(), (-0.0f64).to_bits());
        assert_eq!(replayed.read_recent_int(OPMODE, 1).unwrap(), 1);

        // Reopening for append keeps history and extends it.
        let reopened = DataStore::with_journal(dir.path()).unwrap();
        reopened.insert_float(&key(SENSOR, 1), Record::ok(t(3), 9.0)).unwrap();
        assert_eq!(DataStore::from_journal(dir.path()).unwrap().history(&key(SENSOR, 1)).unwrap().len(), 3);
    }

    #[test]
    fn csv_export() {
        let store = DataStore::new();
        store.insert_float(&key(SENSOR, 1), Record::ok(t(0), 1.5)).unwrap();
        store.insert_int(&key(OPMODE, 1), Record::ok(t(0), 1)).unwrap();
        let mut out = Vec::new();
        store.export_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "table,index,timestamp,status,value");
        assert_eq!(lines[1], format!("opmode,1,{},ok,1.0", t(0)));
        assert_eq!(lines[2], format!("sensor,1,{},ok,1.5", t(0)));
    }

    #[test]
    fn observers_see_inserts() {
        struct Count(Mutex<Vec<f64>>);
        impl StoreObserver for Count {
            fn on_insert(&self, _: &TableKey, r: &Record<f64>) {
                self.0.lock().unwrap().push(r.value);
            }
        }
        let store = DataStore::new();
        let obs = Arc::new(Count(Mutex::new(Vec::new())));
        let id = store.observe(obs.clone());
        store.insert_float(&key(SENSOR, 1), Record::ok(t(0), 1.0)).unwrap();
        store.insert_int(&key(OPMODE, 1), Record::ok(t(0), 1)).unwrap();
        store.unobserve(id);
        store.insert_float(&key(SENSOR, 1), Record::ok(t(0), 3.0)).unwrap();
        assert_eq!(*obs.0.lock().unwrap(), vec![1.0, 1.0]);
    }
}
