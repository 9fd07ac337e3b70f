//! CSV bridge for precomputed embeddings: `frame,x,y,u,e0..e{d-1}`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::mapstore::MapEntry;

#[derive(Debug, Clone, PartialEq)]
pub struct DumpRecord {
    pub frame: u64,
    pub position: (f64, f64),
    pub uncertainty: f64,
    pub embedding: Vec<f64>,
}

/// Per-frame embeddings of one session, all of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalEmbeddingDump {
    pub dim: usize,
    pub records: Vec<DumpRecord>,
}

impl ExternalEmbeddingDump {
    pub fn new(records: Vec<DumpRecord>) -> Result<Self> {
        let dim = records.first().map(|r| r.embedding.len()).unwrap_or(0);
        if dim == 0 {
            return Err(Error::domain(
                "embedding dump needs at least one record with d >= 1",
            ));
        }
        for r in &records {
            if r.embedding.len() != dim {
                return Err(Error::dim("embedding dump record", dim, r.embedding.len()));
            }
            if !r.uncertainty.is_finite()
                || r.uncertainty < 0.0
                || r.embedding.iter().any(|v| !v.is_finite())
            {
                return Err(Error::format(format!(
                    "frame {}: non-finite or negative value",
                    r.frame
                )));
            }
        }
        Ok(Self { dim, records })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::format(e.to_string()))?
            .clone();
        let fixed = ["frame", "x", "y", "u"];
        let dim = header.len().saturating_sub(fixed.len());
        let expected: Vec<String> = fixed
            .iter()
            .map(|s| s.to_string())
            .chain((0..dim).map(|i| format!("e{i}")))
            .collect();
        if dim == 0 || header.iter().ne(expected.iter().map(|s| s.as_str())) {
            return Err(Error::format(format!(
                "embedding dump header must be frame,x,y,u,e0..e{{d-1}}; got {}",
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let num = |field: &str, line: u64| -> Result<f64> {
            field
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("dump line {line}: bad number {field:?}")))
        };
        let mut records = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let line = i as u64 + 2;
            let row = row.map_err(|e| Error::format(format!("dump line {line}: {e}")))?;
            if row.len() != header.len() {
                return Err(Error::dim(
                    "embedding dump row",
                    dim,
                    row.len().saturating_sub(fixed.len()),
                ));
            }
            let frame = row[0].trim().parse().map_err(|_| {
                Error::format(format!("dump line {line}: bad frame id {:?}", &row[0]))
            })?;
            records.push(DumpRecord {
                frame,
                position: (num(&row[1], line)?, num(&row[2], line)?),
                uncertainty: num(&row[3], line)?,
                embedding: row
                    .iter()
                    .skip(fixed.len())
                    .map(|f| num(f, line))
                    .collect::<Result<_>>()?,
            });
        }
        Self::new(records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,x,y,u");
        for i in 0..self.dim {
            out += &format!(",e{i}");
        }
        out.push('\n');
        for r in &self.records {
            out += &format!(
                "{},{},{},{}",
                r.frame, r.position.0, r.position.1, r.uncertainty
            );
            for v in &r.embedding {
                out += &format!(",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    /// Map entries in record order, ids assigned on insertion into a map.
    pub fn entries(&self, session: &str) -> Vec<MapEntry> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| MapEntry {
                entry_id: i as u64,
                embedding: r.embedding.iter().map(|v| *v as f32).collect(),
                uncertainty: r.uncertainty as f32,
                position: r.position,
                source_session: session.to_string(),
                source_frame: r.frame,
            })
            .collect()
    }

    /// Fails unless the dump matches a map of dimension `dim`.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if self.dim != dim {
            return Err(Error::dim("embedding dump vs map", dim, self.dim));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ExternalEmbeddingDump {
        ExternalEmbeddingDump::new(vec![
            DumpRecord {
                frame: 0,
                position: (1.5, -2.0),
                uncertainty: 0.25,
                embedding: vec![1.0, 0.5],
            },
            DumpRecord {
                frame: 7,
                position: (3.0, 4.0),
                uncertainty: 1.0,
                embedding: vec![-0.125, 2.0],
            },
        ])
        .unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let d = sample();
        let text = d.to_csv();
        assert!(text.starts_with("frame,x,y,u,e0,e1\n0,1.5,-2,0.25,1,0.5\n"));
        assert_eq!(ExternalEmbeddingDump::parse(&text).unwrap(), d);
    }

    #[test]
    fn ragged_rows_and_bad_headers_are_rejected() {
        assert!(ExternalEmbeddingDump::parse("frame,x,y,u,e0,e1\n0,0,0,1,1\n").is_err());
        assert!(ExternalEmbeddingDump::parse("frame,x,y,u,e1\n0,0,0,1,1\n").is_err());
        assert!(ExternalEmbeddingDump::parse("frame,x,y,u\n0,0,0,1\n").is_err());
        assert!(ExternalEmbeddingDump::parse("frame,x,y,u,e0\n0,0,0,-1,1\n").is_err());
    }

    #[test]
    fn dimension_check_is_explicit() {
        let d = sample();
        assert!(d.check_dim(2).is_ok());
        assert!(matches!(
            d.check_dim(3),
            Err(Error::Dimension {
                expected: 3,
                got: 2,
                ..
            })
        ));
    }
}
