//! Byte-stable CSV and JSON-lines output for benchmark records.

use std::io::Write;

use super::sweep::BenchRecord;
use crate::error::Result;

pub const CSV_HEADER: &str = "mechanism,n,m,d,heads,reps,wall_ns_median,flops,checksum";

/// Checksums use Rust's shortest round-trip float formatting.
pub fn write_csv<W: Write>(mut out: W, records: &[BenchRecord]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:?}",
            r.mechanism, r.n, r.m, r.d, r.heads, r.reps, r.wall_ns_median, r.flops, r.checksum
        )?;
    }
    Ok(())
}

/// One JSON object per line with the CSV columns as keys, in CSV order.
pub fn write_jsonl<W: Write>(mut out: W, records: &[BenchRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec() -> BenchRecord {
        BenchRecord {
            mechanism: "anchor-fast".into(),
            n: 512,
            m: 32,
            d: 64,
            heads: 1,
            reps: 3,
            wall_ns_median: 123456,
            flops: 6_340_608,
            checksum: -1.25,
        }
    }

    #[test]
    fn csv_bytes() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[rec()]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "mechanism,n,m,d,heads,reps,wall_ns_median,flops,checksum\nanchor-fast,512,32,64,1,3,123456,6340608,-1.25\n"
        );
    }

    #[test]
    fn jsonl_bytes() {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[rec(), rec()]).unwrap();
        let line = r#"{"mechanism":"anchor-fast","n":512,"m":32,"d":64,"heads":1,"reps":3,"wall_ns_median":123456,"flops":6340608,"checksum":-1.25}"#;
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{line}\n{line}\n"));
    }
}
