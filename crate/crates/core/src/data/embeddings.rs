//! Per-patch embedding tables as comma-separated text.
//!
//! Columns: `patch`, `bag`, `iso_<i>` for each invariant value, then
//! `ori_<j>_<n>` for the orientation posterior in row-major order.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub patch: String,
    pub bag: String,
    pub iso: Vec<f32>,
    /// `[M', N]` row-major; empty for models without angular latents.
    pub ori: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub iso_dim: usize,
    pub ori_latents: usize,
    pub orientations: usize,
    pub rows: Vec<EmbeddingRow>,
}

impl Embeddings {
    pub fn new(iso_dim: usize, ori_latents: usize, orientations: usize) -> Self {
        Self {
            iso_dim,
            ori_latents,
            orientations,
            rows: Vec::new(),
        }
    }

    pub fn ori_len(&self) -> usize {
        self.ori_latents * self.orientations
    }

    pub fn columns(&self) -> usize {
        2 + self.iso_dim + self.ori_len()
    }

    pub fn push(&mut self, row: EmbeddingRow) -> Result<()> {
        if row.iso.len() != self.iso_dim || row.ori.len() != self.ori_len() {
            return Err(Error::shape(
                "embeddings",
                format!(
                    "row {} has {} + {} values, table expects {} + {}",
                    row.patch,
                    row.iso.len(),
                    row.ori.len(),
                    self.iso_dim,
                    self.ori_len()
                ),
            ));
        }
        self.rows.push(row);
        Ok(())
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["patch".to_string(), "bag".to_string()];
        h.extend((0..self.iso_dim).map(|i| format!("iso_{i}")));
        for j in 0..self.ori_latents {
            h.extend((0..self.orientations).map(|n| format!("ori_{j}_{n}")));
        }
        h
    }
}

pub fn write_embeddings(path: &Path, table: &Embeddings) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(table.header()).map_err(super::csv_error)?;
        for r in &table.rows {
            let mut rec = vec![r.patch.clone(), r.bag.clone()];
            rec.extend(r.iso.iter().chain(&r.ori).map(f32::to_string));
            w.write_record(&rec).map_err(super::csv_error)?;
        }
        w.flush()?;
    }
    super::write_file(path, &buf)
}

fn parse_header(header: &csv::StringRecord) -> Result<(usize, usize, usize)> {
    let bad = |msg: String| Error::Parse { offset: 0, msg };
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 2 || cols[0] != "patch" || cols[1] != "bag" {
        return Err(bad("embedding header must start with patch,bag".into()));
    }
    let iso = cols[2..].iter().take_while(|c| c.starts_with("iso_")).count();
    let ori: Vec<(usize, usize)> = cols[2 + iso..]
        .iter()
        .map(|c| {
            c.strip_prefix("ori_")
                .and_then(|r| r.split_once('_'))
                .and_then(|(j, n)| Some((j.parse().ok()?, n.parse().ok()?)))
                .ok_or_else(|| bad(format!("unexpected column {c:?}")))
        })
        .collect::<Result<_>>()?;
    let (m, n) = ori.last().map_or((0, 0), |&(j, n)| (j + 1, n + 1));
    let expect: Vec<(usize, usize)> = (0..m).flat_map(|j| (0..n).map(move |k| (j, k))).collect();
    if ori != expect {
        return Err(bad("orientation columns are not a full row-major grid".into()));
    }
    for (i, c) in cols[2..2 + iso].iter().enumerate() {
        if *c != format!("iso_{i}") {
            return Err(bad(format!("unexpected column {c:?}")));
        }
    }
    Ok((iso, m, n))
}

pub fn read_embeddings(path: &Path) -> Result<Embeddings> {
    let mut r = csv::Reader::from_path(path).map_err(super::csv_error)?;
    let header = r.headers().map_err(super::csv_error)?.clone();
    let (iso, m, n) = parse_header(&header)?;
    let mut table = Embeddings::new(iso, m, n);
    for rec in r.records() {
        let rec = rec.map_err(super::csv_error)?;
        let offset = rec.position().map_or(0, |p| p.byte());
        if rec.len() != table.columns() {
            return Err(Error::Parse {
                offset,
                msg: format!("expected {} columns, got {}", table.columns(), rec.len()),
            });
        }
        let values: Vec<f32> = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                offset,
                msg: format!("embedding value: {e}"),
            })?;
        table.push(EmbeddingRow {
            patch: rec[0].to_string(),
            bag: rec[1].to_string(),
            iso: values[..iso].to_vec(),
            ori: values[iso..].to_vec(),
        })?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_round_trip_with_expected_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/e.csv");
        let mut t = Embeddings::new(3, 2, 4);
        for i in 0..3 {
            t.push(EmbeddingRow {
                patch: format!("p{i}.png"),
                bag: "b".into(),
                iso: vec![0.1 * i as f32, -1e-7, 3.5],
                ori: (0..8).map(|k| k as f32 / 28.0).collect(),
            })
            .unwrap();
        }
        write_embeddings(&p, &t).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        for line in text.lines() {
            assert_eq!(line.split(',').count(), 2 + 3 + 2 * 4);
        }
        assert!(text.starts_with("patch,bag,iso_0,iso_1,iso_2,ori_0_0,"));
        assert_eq!(read_embeddings(&p).unwrap(), t);
        assert!(t
            .push(EmbeddingRow {
                patch: "x".into(),
                bag: "b".into(),
                iso: vec![0.0],
                ori: vec![],
            })
            .is_err());
    }

    #[test]
    fn iso_only_tables_and_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let mut t = Embeddings::new(2, 0, 0);
        t.push(EmbeddingRow {
            patch: "a".into(),
            bag: "b".into(),
            iso: vec![1.0, 2.0],
            ori: vec![],
        })
        .unwrap();
        write_embeddings(&p, &t).unwrap();
        assert_eq!(read_embeddings(&p).unwrap(), t);
        std::fs::write(&p, "patch,bag,iso_0\na,b,1\nc,d\n").unwrap();
        assert!(matches!(read_embeddings(&p), Err(Error::Parse { .. })));
        std::fs::write(&p, "patch,bag,iso_0,ori_0_1\n").unwrap();
        assert!(read_embeddings(&p).is_err());
        std::fs::write(&p, "patch,bag,iso_0\na,b,x\n").unwrap();
        match read_embeddings(&p) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("{other:?}"),
        }
    }
}
