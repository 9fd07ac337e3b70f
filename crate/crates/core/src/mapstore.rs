//! Parent map: an uncertainty-annotated embedding dictionary maintained
//! across repeated traversals.
//!
//! A new scan competes with every stored slot within `match_threshold`
//! meters. Slots holding a strictly more uncertain scan take over the new
//! embedding and uncertainty but keep their position. A scan with no slot in
//! range opens a new one. Nothing else changes, so repeated traversals of
//! covered ground never grow the map.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{write_atomic, LeReader};

pub const MAP_MAGIC: &[u8; 4] = b"PMAP";
pub const MAP_VERSION: u32 = 1;
pub const DEFAULT_MATCH_THRESHOLD_M: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MapEntry {
    pub entry_id: u64,
    pub embedding: Vec<f32>,
    pub uncertainty: f32,
    /// `(x, y)` in meters.
    pub position: (f64, f64),
    pub source_session: String,
    pub source_frame: u64,
}

impl MapEntry {
    fn validate(&self) -> Result<()> {
        if !(self.uncertainty >= 0.0) || !self.uncertainty.is_finite() {
            return Err(Error::domain(format!(
                "entry uncertainty {} must be finite and >= 0",
                self.uncertainty
            )));
        }
        if !self.embedding.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("entry embedding is not finite"));
        }
        if !self.position.0.is_finite() || !self.position.1.is_finite() {
            return Err(Error::domain("entry position is not finite"));
        }
        Ok(())
    }

    fn distance_to(&self, p: (f64, f64)) -> f64 {
        (self.position.0 - p.0).hypot(self.position.1 - p.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeAction {
    Replaced,
    Discarded,
    Appended,
}

impl MergeAction {
    fn code(self) -> u8 {
        match self {
            MergeAction::Replaced => 0,
            MergeAction::Discarded => 1,
            MergeAction::Appended => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => MergeAction::Replaced,
            1 => MergeAction::Discarded,
            2 => MergeAction::Appended,
            _ => return Err(Error::format(format!("unknown merge action {c}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeRecord {
    pub session: String,
    pub frame: u64,
    pub action: MergeAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    /// Position radius `D_t` within which scans compete, meters.
    pub match_threshold: f64,
    /// Inverted rule: replace when the new scan is *more* uncertain. Off by
    /// default.
    pub alg1_literal: bool,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            match_threshold: DEFAULT_MATCH_THRESHOLD_M,
            alg1_literal: false,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.match_threshold > 0.0) || !self.match_threshold.is_finite() {
            return Err(Error::config("match_threshold must be finite and > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParentMap {
    pub entries: Vec<MapEntry>,
    pub config: MapConfig,
    pub merge_log: Vec<MergeRecord>,
    next_id: u64,
}

impl ParentMap {
    /// Embedding dimension, if the map has entries.
    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.embedding.len())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mean_uncertainty(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries
            .iter()
            .map(|e| e.uncertainty as f64)
            .sum::<f64>()
            / self.entries.len() as f64
    }

    pub fn entry(&self, id: u64) -> Option<&MapEntry> {
        self.entries.iter().find(|e| e.entry_id == id)
    }

    fn check_dim(&self, e: &MapEntry) -> Result<()> {
        match self.dim() {
            Some(d) if d != e.embedding.len() => Err(Error::dim("map entry", d, e.embedding.len())),
            _ => Ok(()),
        }
    }
}

/// Founds a map from one session; entry ids follow frame order from 0.
pub fn init_map(session: &[MapEntry], config: MapConfig) -> Result<ParentMap> {
    config.validate()?;
    if session.is_empty() {
        return Err(Error::domain("cannot found a map from an empty session"));
    }
    let mut map = ParentMap {
        entries: Vec::with_capacity(session.len()),
        config,
        merge_log: Vec::new(),
        next_id: 0,
    };
    for e in session {
        e.validate()?;
        map.check_dim(e)?;
        let mut e = e.clone();
        e.entry_id = map.next_id;
        map.next_id += 1;
        map.entries.push(e);
    }
    Ok(map)
}

/// Merges one scan into the map and records what happened to it.
pub fn merge_scan(map: &mut ParentMap, new: &MapEntry) -> Result<MergeAction> {
    new.validate()?;
    map.check_dim(new)?;
    let d_t = map.config.match_threshold;
    let literal = map.config.alg1_literal;
    let mut matched = false;
    let mut replaced = false;
    for slot in map.entries.iter_mut() {
        if slot.distance_to(new.position) >= d_t {
            continue;
        }
        matched = true;
        let wins = if literal {
            new.uncertainty > slot.uncertainty
        } else {
            new.uncertainty < slot.uncertainty
        };
        if wins {
            slot.embedding.clone_from(&new.embedding);
            slot.uncertainty = new.uncertainty;
            slot.source_session.clone_from(&new.source_session);
            slot.source_frame = new.source_frame;
            replaced = true;
        }
    }
    let action = if replaced {
        MergeAction::Replaced
    } else if matched {
        MergeAction::Discarded
    } else {
        let mut e = new.clone();
        e.entry_id = map.next_id;
        map.next_id += 1;
        map.entries.push(e);
        MergeAction::Appended
    };
    map.merge_log.push(MergeRecord {
        session: new.source_session.clone(),
        frame: new.source_frame,
        action,
    });
    Ok(action)
}

/// Merges a session frame by frame, in the order given.
pub fn merge_session(map: &mut ParentMap, session: &[MapEntry]) -> Result<Vec<MergeAction>> {
    session.iter().map(|e| merge_scan(map, e)).collect()
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut LeReader<'_>) -> Result<String> {
    let n = r.u32()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::format("session name is not UTF-8"))
}

/// Serialises the map.
///
/// Layout (little-endian): magic `PMAP`, u32 version, u32 d, u64 entry
/// count; per entry: u64 id, d f32 embedding, f32 U, 2 f64 position,
/// length-prefixed session name, u64 frame. Then u64 merge-log length and
/// per record a length-prefixed session, u64 frame, u8 action
/// (0 replaced, 1 discarded, 2 appended). Trailer: f64 match threshold, u8
/// literal flag, u64 next id.
pub fn map_bytes(map: &ParentMap) -> Vec<u8> {
    let d = map.dim().unwrap_or(0);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAP_MAGIC);
    buf.extend_from_slice(&MAP_VERSION.to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(map.entries.len() as u64).to_le_bytes());
    for e in &map.entries {
        buf.extend_from_slice(&e.entry_id.to_le_bytes());
        for v in &e.embedding {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&e.uncertainty.to_le_bytes());
        buf.extend_from_slice(&e.position.0.to_le_bytes());
        buf.extend_from_slice(&e.position.1.to_le_bytes());
        put_str(&mut buf, &e.source_session);
        buf.extend_from_slice(&e.source_frame.to_le_bytes());
    }
    buf.extend_from_slice(&(map.merge_log.len() as u64).to_le_bytes());
    for r in &map.merge_log {
        put_str(&mut buf, &r.session);
        buf.extend_from_slice(&r.frame.to_le_bytes());
        buf.push(r.action.code());
    }
    buf.extend_from_slice(&map.config.match_threshold.to_le_bytes());
    buf.push(map.config.alg1_literal as u8);
    buf.extend_from_slice(&map.next_id.to_le_bytes());
    buf
}

pub fn parse_map(bytes: &[u8]) -> Result<ParentMap> {
    let mut r = LeReader::new(bytes, "map file");
    if r.take(4)? != MAP_MAGIC {
        return Err(Error::format("bad map magic"));
    }
    let version = r.u32()?;
    if version != MAP_VERSION {
        return Err(Error::format(format!("unsupported map version {version}")));
    }
    let d = r.u32()? as usize;
    let count = r.u64()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let entry_id = r.u64()?;
        let embedding = (0..d).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let uncertainty = r.f32()?;
        let position = (r.f64()?, r.f64()?);
        let source_session = get_str(&mut r)?;
        let source_frame = r.u64()?;
        entries.push(MapEntry {
            entry_id,
            embedding,
            uncertainty,
            position,
            source_session,
            source_frame,
        });
    }
    let log_len = r.u64()?;
    let mut merge_log = Vec::new();
    for _ in 0..log_len {
        let session = get_str(&mut r)?;
        let frame = r.u64()?;
        let action = MergeAction::from_code(r.u8()?)?;
        merge_log.push(MergeRecord {
            session,
            frame,
            action,
        });
    }
    let config = MapConfig {
        match_threshold: r.f64()?,
        alg1_literal: match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::format(format!("bad literal flag {v}"))),
        },
    };
    let next_id = r.u64()?;
    r.finish()?;
    config
        .validate()
        .map_err(|e| Error::format(e.to_string()))?;
    Ok(ParentMap {
        entries,
        config,
        merge_log,
        next_id,
    })
}

pub fn save_map(map: &ParentMap, path: &Path) -> Result<()> {
    write_atomic(path, &map_bytes(map))
}

pub fn load_map(path: &Path) -> Result<ParentMap> {
    parse_map(&std::fs::read(path)?)
}
