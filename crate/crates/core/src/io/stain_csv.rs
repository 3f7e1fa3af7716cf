use std::path::Path;

use crate::stain::StainMatrix;
use crate::{Error, Result};

pub const STAIN_CSV_HEADER: [&str; 7] = ["image", "w11", "w21", "w31", "w12", "w22", "w32"];

/// One row of a stain CSV: an image name and its stain matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StainRecord {
    pub image: String,
    pub stains: StainMatrix,
}

/// Writes records with the shortest round-trip float representation, so
/// reading the file back reproduces the matrices exactly.
pub fn write_stain_csv(path: &Path, records: &[StainRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_stain_records(file, records).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        e => e,
    })
}

/// Same format as [`write_stain_csv`] into any writer.
pub fn write_stain_records<W: std::io::Write>(out: W, records: &[StainRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STAIN_CSV_HEADER)?;
    for r in records {
        let mut row = vec![r.image.clone()];
        row.extend(r.stains.to_column_major().iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<stain csv>", e))
}

pub fn read_stain_csv(path: &Path) -> Result<Vec<StainRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != STAIN_CSV_HEADER {
        return Err(Error::InvalidArgument(format!(
            "{}: expected header {}, got {}",
            path.display(),
            STAIN_CSV_HEADER.join(","),
            header.join(",")
        )));
    }
    let mut out = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row?;
        let bad = |what: String| {
            Error::InvalidArgument(format!("{}: row {}: {what}", path.display(), line + 1))
        };
        let mut v = [0.0; 6];
        for (i, slot) in v.iter_mut().enumerate() {
            let field = row.get(i + 1).ok_or_else(|| bad("missing column".into()))?;
            *slot = field
                .trim()
                .parse()
                .map_err(|_| bad(format!("not a number: {field:?}")))?;
        }
        let stains = StainMatrix::from_column_major(v).map_err(|e| bad(e.to_string()))?;
        out.push(StainRecord {
            image: row[0].to_string(),
            stains,
        });
    }
    Ok(out)
}
