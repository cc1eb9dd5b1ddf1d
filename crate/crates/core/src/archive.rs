//! Versioned binary archive for trained models.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic          8 bytes   "CFENSARC"
//! version        u32       1
//! kind           u32       1 = k-NN, 2 = MF, 3 = FNM, 4 = ensemble
//! section count  u32
//! sections, each:
//!   name length  u16
//!   name         UTF-8 bytes
//!   element type u8        0 = raw bytes, 1 = f64, 2 = u64, 3 = u32, 4 = u8
//!   byte length  u64
//!   payload
//! ```
//!
//! Every record carries a `meta` section (UTF-8 JSON, hyperparameters and
//! shapes). Numeric state lives in typed sections. An ensemble stores each
//! member as a nested record in a raw section `member.<t>`. A top-level file
//! may carry `user_ids` and `item_ids` (u64) mapping dense indices back to the
//! identifiers of the source data.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::{Means, RatingScale};
use crate::ensemble::{EnsembleMethod, EnsembleModel, MemberRecord, PredictorModel};
use crate::error::{Error, Result};
use crate::eval::TrainedModel;
use crate::factorization::{MfHyperParams, MfModel};
use crate::fnm::{Baselines, FnmEntry, FnmHyperParams, FnmModel};
use crate::fsutil::write_atomic;
use crate::knn::{KnnConfig, KnnModel, KnnTable, NeighborTable, ProfileEntry, Profiles};

pub const MAGIC: [u8; 8] = *b"CFENSARC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Knn = 1,
    Mf = 2,
    Fnm = 3,
    Ensemble = 4,
}

impl RecordKind {
    fn from_u32(v: u32) -> Result<Self> {
        Ok(match v {
            1 => RecordKind::Knn,
            2 => RecordKind::Mf,
            3 => RecordKind::Fnm,
            4 => RecordKind::Ensemble,
            _ => return Err(Error::Archive(format!("unknown record kind {v}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementType {
    Bytes = 0,
    F64 = 1,
    U64 = 2,
    U32 = 3,
    U8 = 4,
}

impl ElementType {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => ElementType::Bytes,
            1 => ElementType::F64,
            2 => ElementType::U64,
            3 => ElementType::U32,
            4 => ElementType::U8,
            _ => return Err(Error::Archive(format!("unknown element type {v}"))),
        })
    }

    fn width(self) -> usize {
        match self {
            ElementType::Bytes | ElementType::U8 => 1,
            ElementType::F64 | ElementType::U64 => 8,
            ElementType::U32 => 4,
        }
    }
}

/// A trained model with the identifier maps of its training data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArchive {
    pub model: TrainedModel,
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
}

struct RecordWriter {
    kind: RecordKind,
    sections: Vec<(String, ElementType, Vec<u8>)>,
}

impl RecordWriter {
    fn new(kind: RecordKind, meta: Value) -> Self {
        let mut w = RecordWriter { kind, sections: Vec::new() };
        w.raw("meta", meta.to_string().into_bytes());
        w
    }

    fn raw(&mut self, name: &str, bytes: Vec<u8>) {
        self.sections.push((name.to_string(), ElementType::Bytes, bytes));
    }

    fn f64s(&mut self, name: &str, values: &[f64]) {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.sections.push((name.to_string(), ElementType::F64, bytes));
    }

    fn u64s(&mut self, name: &str, values: impl IntoIterator<Item = u64>) {
        let bytes = values.into_iter().flat_map(|v| v.to_le_bytes()).collect();
        self.sections.push((name.to_string(), ElementType::U64, bytes));
    }

    fn u32s(&mut self, name: &str, values: impl IntoIterator<Item = u32>) {
        let bytes = values.into_iter().flat_map(|v| v.to_le_bytes()).collect();
        self.sections.push((name.to_string(), ElementType::U32, bytes));
    }

    fn flags(&mut self, name: &str, values: &[bool]) {
        self.sections.push((name.to_string(), ElementType::U8, values.iter().map(|&b| b as u8).collect()));
    }

    fn finish(self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, ty, payload) in self.sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(ty as u8);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }
}

/// A parsed record: its kind and its sections by name.
#[derive(Debug, Clone)]
pub struct Record<'a> {
    pub version: u32,
    pub kind: RecordKind,
    sections: BTreeMap<String, (ElementType, &'a [u8])>,
    order: Vec<String>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Archive("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl<'a> Record<'a> {
    pub fn parse(bytes: &'a [u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8)? != MAGIC {
            return Err(Error::Archive("not a model archive (bad magic)".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Archive(format!("unsupported archive version {version}")));
        }
        let kind = RecordKind::from_u32(c.u32()?)?;
        let count = c.u32()?;
        let mut sections = BTreeMap::new();
        let mut order = Vec::new();
        for _ in 0..count {
            let len = c.u16()? as usize;
            let name = std::str::from_utf8(c.take(len)?)
                .map_err(|_| Error::Archive("section name is not UTF-8".into()))?
                .to_string();
            let ty = ElementType::from_u8(c.u8()?)?;
            let size = usize::try_from(c.u64()?).map_err(|_| Error::Archive("section too large".into()))?;
            if size % ty.width() != 0 {
                return Err(Error::Archive(format!("section {name}: length {size} is not a multiple of its element width")));
            }
            let payload = c.take(size)?;
            if sections.insert(name.clone(), (ty, payload)).is_some() {
                return Err(Error::Archive(format!("duplicate section {name}")));
            }
            order.push(name);
        }
        if c.pos != bytes.len() {
            return Err(Error::Archive("trailing bytes after the last section".into()));
        }
        Ok(Record { version, kind, sections, order })
    }

    /// `(name, element type, byte length)` in file order.
    pub fn sections(&self) -> Vec<(String, ElementType, usize)> {
        self.order
            .iter()
            .map(|n| {
                let (ty, p) = self.sections[n];
                (n.clone(), ty, p.len())
            })
            .collect()
    }

    fn section(&self, name: &str, ty: ElementType) -> Result<&'a [u8]> {
        match self.sections.get(name) {
            Some(&(t, p)) if t == ty => Ok(p),
            Some(&(t, _)) => Err(Error::Archive(format!("section {name} has type {t:?}, expected {ty:?}"))),
            None => Err(Error::Archive(format!("missing section {name}"))),
        }
    }

    /// Raw payload of a section, whatever its element type.
    pub fn payload(&self, name: &str) -> Option<&'a [u8]> {
        self.sections.get(name).map(|&(_, p)| p)
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    pub fn meta(&self) -> Result<Value> {
        Ok(serde_json::from_slice(self.section("meta", ElementType::Bytes)?)?)
    }

    fn meta_as<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let meta = self.meta()?;
        let v = meta.get(key).ok_or_else(|| Error::Archive(format!("meta lacks {key}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    fn raw(&self, name: &str) -> Result<&'a [u8]> {
        self.section(name, ElementType::Bytes)
    }

    fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self
            .section(name, ElementType::F64)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        Ok(self
            .section(name, ElementType::U64)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn usizes(&self, name: &str) -> Result<Vec<usize>> {
        self.u64s(name)?
            .into_iter()
            .map(|v| usize::try_from(v).map_err(|_| Error::Archive(format!("{name}: offset overflow"))))
            .collect()
    }

    fn u32s(&self, name: &str) -> Result<Vec<u32>> {
        Ok(self
            .section(name, ElementType::U32)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn flags(&self, name: &str) -> Result<Vec<bool>> {
        self.section(name, ElementType::U8)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::Archive(format!("{name}: flag byte {b}"))),
            })
            .collect()
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        match self.f64s(name)?.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Archive(format!("{name} must hold exactly one value"))),
        }
    }
}

fn expect_len<T>(name: &str, v: &[T], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Archive(format!("{name}: {} entries, expected {len}", v.len())));
    }
    Ok(())
}

/// Offsets must start at 0, never decrease and end at `total`.
fn check_offsets(name: &str, offsets: &[usize], rows: usize, total: usize) -> Result<()> {
    expect_len(name, offsets, rows + 1)?;
    if offsets[0] != 0 || offsets[rows] != total || offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Archive(format!("{name}: malformed offsets")));
    }
    Ok(())
}

fn check_indices(name: &str, indices: &[u32], bound: usize) -> Result<()> {
    if indices.iter().any(|&i| i as usize >= bound) {
        return Err(Error::Archive(format!("{name}: index out of range")));
    }
    Ok(())
}

fn encode_knn(m: &KnnModel) -> Vec<u8> {
    let t = m.table();
    let mut w = RecordWriter::new(
        RecordKind::Knn,
        json!({
            "config": t.config,
            "neighbor_pool_factor": m.neighbor_pool_factor(),
            "selection_seed": m.selection_seed(),
            "scale": t.scale,
        }),
    );
    w.f64s("global_mean", &[t.means.global]);
    w.f64s("user_means", &t.means.users);
    w.f64s("item_means", &t.means.items);
    w.u64s("profile_offsets", t.profiles.offsets.iter().map(|&o| o as u64));
    w.u32s("profile_index", t.profiles.entries.iter().map(|e| e.index));
    w.f64s("profile_value", &t.profiles.entries.iter().map(|e| e.value).collect::<Vec<_>>());
    w.f64s("profile_weight", &t.profiles.entries.iter().map(|e| e.weight).collect::<Vec<_>>());
    w.u64s("neighbor_offsets", t.table.offsets.iter().map(|&o| o as u64));
    w.u32s("neighbor_index", t.table.neighbors.iter().map(|n| n.0));
    w.f64s("neighbor_similarity", &t.table.neighbors.iter().map(|n| n.1).collect::<Vec<_>>());
    w.finish()
}

fn decode_knn(r: &Record) -> Result<KnnModel> {
    let config: KnnConfig = r.meta_as("config")?;
    config.validate()?;
    let pool: usize = r.meta_as("neighbor_pool_factor")?;
    let seed: u64 = r.meta_as("selection_seed")?;
    let scale: RatingScale = r.meta_as("scale")?;
    let means = Means { global: r.scalar("global_mean")?, users: r.f64s("user_means")?, items: r.f64s("item_means")? };
    let (rows, cols) = match config.perspective {
        crate::knn::Perspective::UserUser => (means.users.len(), means.items.len()),
        crate::knn::Perspective::ItemItem => (means.items.len(), means.users.len()),
    };
    let p_off = r.usizes("profile_offsets")?;
    let p_idx = r.u32s("profile_index")?;
    let p_val = r.f64s("profile_value")?;
    let p_wt = r.f64s("profile_weight")?;
    check_offsets("profile_offsets", &p_off, rows, p_idx.len())?;
    expect_len("profile_value", &p_val, p_idx.len())?;
    expect_len("profile_weight", &p_wt, p_idx.len())?;
    check_indices("profile_index", &p_idx, cols)?;
    let n_off = r.usizes("neighbor_offsets")?;
    let n_idx = r.u32s("neighbor_index")?;
    let n_sim = r.f64s("neighbor_similarity")?;
    check_offsets("neighbor_offsets", &n_off, rows, n_idx.len())?;
    expect_len("neighbor_similarity", &n_sim, n_idx.len())?;
    check_indices("neighbor_index", &n_idx, rows)?;
    let profiles = Profiles {
        offsets: p_off,
        entries: p_idx
            .iter()
            .zip(&p_val)
            .zip(&p_wt)
            .map(|((&index, &value), &weight)| ProfileEntry { index, value, weight })
            .collect(),
    };
    let table = NeighborTable { offsets: n_off, neighbors: n_idx.into_iter().zip(n_sim).collect() };
    let model = KnnModel {
        table: Arc::new(KnnTable { config, means, profiles, table, scale }),
        neighbor_pool_factor: 1,
        selection_seed: 0,
    };
    model.with_selection(pool, seed)
}

fn encode_mf(m: &MfModel) -> Vec<u8> {
    let mut w = RecordWriter::new(
        RecordKind::Mf,
        json!({
            "hyper": m.hyper,
            "num_users": m.num_users,
            "num_items": m.num_items,
            "scale": m.scale,
        }),
    );
    w.f64s("global_mean", &[m.global_mean]);
    w.f64s("user_factors", &m.user_factors);
    w.f64s("item_factors", &m.item_factors);
    w.flags("known_users", &m.known_users);
    w.flags("known_items", &m.known_items);
    w.f64s("train_log", &m.train_log);
    w.finish()
}

fn decode_mf(r: &Record) -> Result<MfModel> {
    let hyper: MfHyperParams = r.meta_as("hyper")?;
    hyper.validate()?;
    let num_users: usize = r.meta_as("num_users")?;
    let num_items: usize = r.meta_as("num_items")?;
    let m = MfModel {
        hyper,
        num_users,
        num_items,
        user_factors: r.f64s("user_factors")?,
        item_factors: r.f64s("item_factors")?,
        known_users: r.flags("known_users")?,
        known_items: r.flags("known_items")?,
        global_mean: r.scalar("global_mean")?,
        scale: r.meta_as("scale")?,
        train_log: r.f64s("train_log")?,
    };
    expect_len("user_factors", &m.user_factors, num_users * hyper.factors)?;
    expect_len("item_factors", &m.item_factors, num_items * hyper.factors)?;
    expect_len("known_users", &m.known_users, num_users)?;
    expect_len("known_items", &m.known_items, num_items)?;
    Ok(m)
}

fn encode_fnm(m: &FnmModel) -> Vec<u8> {
    let mut w = RecordWriter::new(
        RecordKind::Fnm,
        json!({
            "hyper": m.hyper,
            "num_users": m.num_users,
            "num_items": m.num_items,
            "scale": m.scale,
        }),
    );
    w.f64s("global_mean", &[m.baselines.global]);
    w.f64s("static_user_bias", &m.baselines.users);
    w.f64s("static_item_bias", &m.baselines.items);
    w.f64s("user_bias", &m.user_bias);
    w.f64s("item_bias", &m.item_bias);
    w.f64s("q", &m.q);
    w.f64s("x", &m.x);
    w.f64s("y", &m.y);
    w.u64s("rated_offsets", m.offsets.iter().map(|&o| o as u64));
    w.u32s("rated_item", m.entries.iter().map(|e| e.item));
    w.f64s("rated_value", &m.entries.iter().map(|e| e.value).collect::<Vec<_>>());
    w.f64s("rated_weight", &m.entries.iter().map(|e| e.weight).collect::<Vec<_>>());
    w.f64s("rated_residual", &m.entries.iter().map(|e| e.residual).collect::<Vec<_>>());
    w.f64s("user_weight", &m.user_weight);
    w.flags("known_items", &m.known_items);
    w.finish()
}

fn decode_fnm(r: &Record) -> Result<FnmModel> {
    let hyper: FnmHyperParams = r.meta_as("hyper")?;
    hyper.validate()?;
    let (mu, mi): (usize, usize) = (r.meta_as("num_users")?, r.meta_as("num_items")?);
    let f = hyper.factors;
    let offsets = r.usizes("rated_offsets")?;
    let items = r.u32s("rated_item")?;
    let values = r.f64s("rated_value")?;
    let weights = r.f64s("rated_weight")?;
    let residuals = r.f64s("rated_residual")?;
    check_offsets("rated_offsets", &offsets, mu, items.len())?;
    check_indices("rated_item", &items, mi)?;
    for (name, v) in [("rated_value", &values), ("rated_weight", &weights), ("rated_residual", &residuals)] {
        expect_len(name, v, items.len())?;
    }
    let mut m = FnmModel {
        hyper,
        num_users: mu,
        num_items: mi,
        baselines: Baselines {
            global: r.scalar("global_mean")?,
            users: r.f64s("static_user_bias")?,
            items: r.f64s("static_item_bias")?,
        },
        user_bias: r.f64s("user_bias")?,
        item_bias: r.f64s("item_bias")?,
        q: r.f64s("q")?,
        x: r.f64s("x")?,
        y: r.f64s("y")?,
        offsets,
        entries: (0..items.len())
            .map(|j| FnmEntry { item: items[j], value: values[j], weight: weights[j], residual: residuals[j] })
            .collect(),
        user_weight: r.f64s("user_weight")?,
        known_items: r.flags("known_items")?,
        scale: r.meta_as("scale")?,
        user_vectors: Vec::new(),
    };
    expect_len("static_user_bias", &m.baselines.users, mu)?;
    expect_len("user_bias", &m.user_bias, mu)?;
    expect_len("user_weight", &m.user_weight, mu)?;
    expect_len("static_item_bias", &m.baselines.items, mi)?;
    expect_len("item_bias", &m.item_bias, mi)?;
    expect_len("known_items", &m.known_items, mi)?;
    for (name, v) in [("q", &m.q), ("x", &m.x), ("y", &m.y)] {
        expect_len(name, v, mi * f)?;
    }
    m.refresh_user_vectors();
    Ok(m)
}

fn encode_base(m: &PredictorModel) -> Vec<u8> {
    match m {
        PredictorModel::Knn(k) => encode_knn(k),
        PredictorModel::Mf(k) => encode_mf(k),
        PredictorModel::Fnm(k) => encode_fnm(k),
    }
}

fn encode_ensemble(e: &EnsembleModel<PredictorModel>) -> Vec<u8> {
    let mut w = RecordWriter::new(
        RecordKind::Ensemble,
        json!({
            "method": e.method,
            "size": e.members.len(),
            "build_log": e.build_log,
            "scale": e.scale,
        }),
    );
    w.f64s("member_weights", &e.member_weights);
    for (t, m) in e.members.iter().enumerate() {
        w.raw(&format!("member.{t}"), encode_base(m));
    }
    w.finish()
}

fn decode_base(r: &Record) -> Result<PredictorModel> {
    match r.kind {
        RecordKind::Knn => decode_knn(r).map(PredictorModel::Knn),
        RecordKind::Mf => decode_mf(r).map(PredictorModel::Mf),
        RecordKind::Fnm => decode_fnm(r).map(PredictorModel::Fnm),
        RecordKind::Ensemble => Err(Error::Archive("nested ensembles are not supported".into())),
    }
}

fn decode_ensemble(r: &Record) -> Result<EnsembleModel<PredictorModel>> {
    let method: EnsembleMethod = r.meta_as("method")?;
    let size: usize = r.meta_as("size")?;
    let log: Vec<MemberRecord> = r.meta_as("build_log")?;
    let scale: RatingScale = r.meta_as("scale")?;
    let weights = r.f64s("member_weights")?;
    let members = (0..size)
        .map(|t| decode_base(&Record::parse(r.raw(&format!("member.{t}"))?)?))
        .collect::<Result<Vec<_>>>()?;
    EnsembleModel::from_parts(members, weights, method, log, scale)
        .map_err(|e| Error::Archive(format!("inconsistent ensemble: {e}")))
}

/// Serialises a model and its identifier maps.
pub fn encode(archive: &ModelArchive) -> Vec<u8> {
    let inner = match &archive.model {
        TrainedModel::Single(m) => encode_base(m),
        TrainedModel::Ensemble(e) => encode_ensemble(e),
    };
    // Re-open the record to append the identifier sections.
    let record = Record::parse(&inner).expect("freshly encoded record");
    let mut w = RecordWriter { kind: record.kind, sections: Vec::new() };
    for (name, ty, _) in record.sections() {
        let (_, payload) = record.sections[&name];
        w.sections.push((name, ty, payload.to_vec()));
    }
    w.u64s("user_ids", archive.user_ids.iter().copied());
    w.u64s("item_ids", archive.item_ids.iter().copied());
    w.finish()
}

pub fn decode(bytes: &[u8]) -> Result<ModelArchive> {
    let r = Record::parse(bytes)?;
    let model = match r.kind {
        RecordKind::Ensemble => TrainedModel::Ensemble(decode_ensemble(&r)?),
        _ => TrainedModel::Single(decode_base(&r)?),
    };
    let ids = |name| if r.has(name) { r.u64s(name) } else { Ok(Vec::new()) };
    Ok(ModelArchive { model, user_ids: ids("user_ids")?, item_ids: ids("item_ids")? })
}

/// Writes the archive atomically.
pub fn write_archive(path: impl AsRef<Path>, archive: &ModelArchive) -> Result<()> {
    let bytes = encode(archive);
    write_atomic(path, |w| Ok(w.write_all(&bytes)?))
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<ModelArchive> {
    decode(&std::fs::read(path)?)
}
