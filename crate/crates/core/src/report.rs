//! CSV tables that end with the hash of the configuration that produced
//! them.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

pub const HASH_PREFIX: &str = "# config-sha256: ";

/// Writes `rows` with a header row, then the config-hash comment line.
/// The header is written even when `rows` is empty.
pub fn write_rows<W: Write, R: Serialize>(
    out: W,
    header: &[&str],
    rows: &[R],
    config_hash: &str,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut out = w.into_inner().map_err(|e| e.into_error())?;
    writeln!(out, "{HASH_PREFIX}{config_hash}")?;
    Ok(())
}

pub fn write_rows_to<R: Serialize>(
    path: &Path,
    header: &[&str],
    rows: &[R],
    config_hash: &str,
) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_rows(file, header, rows, config_hash)
}

/// The hash recorded in a table written by [`write_rows`].
pub fn config_hash_of(text: &str) -> Option<&str> {
    text.lines().rev().find_map(|l| l.strip_prefix(HASH_PREFIX))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        seed: u64,
        loss: f64,
    }

    #[test]
    fn table_with_trailing_hash() {
        let mut buf = Vec::new();
        let rows = [
            Row { seed: 1, loss: 0.5 },
            Row {
                seed: 2,
                loss: 0.25,
            },
        ];
        write_rows(&mut buf, &["seed", "loss"], &rows, "abc").unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "seed,loss\n1,0.5\n2,0.25\n# config-sha256: abc\n");
        assert_eq!(config_hash_of(&text), Some("abc"));
    }

    #[test]
    fn empty_table_keeps_header() {
        let mut buf = Vec::new();
        write_rows::<_, Row>(&mut buf, &["seed", "loss"], &[], "h").unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "seed,loss\n# config-sha256: h\n"
        );
    }
}
