//! Record CSV format, one row per [`UncertaintyRecord`]:
//!
//! ```text
//! sample_id,method,partner_class,predicted_class,true_class,uncertainty,normalized_uncertainty,confidence,afd
//! ```
//!
//! `partner_class` and `afd` are empty except for class-dependent records.
//! Floats are written in shortest round-trip form.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::Result;
use crate::types::UncertaintyRecord;

pub fn write_records<W: Write>(w: W, records: &[UncertaintyRecord]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(true).from_writer(w);
    if records.is_empty() {
        out.write_record([
            "sample_id",
            "method",
            "partner_class",
            "predicted_class",
            "true_class",
            "uncertainty",
            "normalized_uncertainty",
            "confidence",
            "afd",
        ])?;
    }
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<UncertaintyRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn write_records_file(path: &Path, records: &[UncertaintyRecord]) -> Result<()> {
    write_records(std::fs::File::create(path)?, records)
}

pub fn read_records_file(path: &Path) -> Result<Vec<UncertaintyRecord>> {
    read_records(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Method;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn csv_round_trip(
            rows in prop::collection::vec(
                (any::<u64>(), 0usize..5, 0usize..7, 0usize..7, 0.0f64..2.0, 0.0f64..=1.0,
                 prop::option::of((0usize..7, 0.0f64..2.0))),
                0..20),
        ) {
            let records: Vec<UncertaintyRecord> = rows
                .into_iter()
                .map(|(id, m, p, t, u, c, cdu)| {
                    let mut r = UncertaintyRecord::new(id, Method::ALL[m], p, t, u, 7, c);
                    if let Some((j, afd)) = cdu {
                        r.partner_class = Some(j);
                        r.afd = Some(afd);
                    }
                    r
                })
                .collect();
            let mut buf = Vec::new();
            write_records(&mut buf, &records).unwrap();
            let back = read_records(buf.as_slice()).unwrap();
            prop_assert_eq!(back, records);
        }
    }

    #[test]
    fn header_and_optional_columns() {
        let mut r = UncertaintyRecord::new(3, Method::TtmaDu, 1, 1, 0.0, 2, 1.0);
        let mut buf = Vec::new();
        write_records(&mut buf, std::slice::from_ref(&r)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "sample_id,method,partner_class,predicted_class,true_class,uncertainty,normalized_uncertainty,confidence,afd\n3,ttma_du,,1,1,0.0,0.0,1.0,\n"
        );
        r.partner_class = Some(0);
        r.afd = Some(0.25);
        r.method = Method::TtmaCdu;
        let mut buf = Vec::new();
        write_records(&mut buf, &[r]).unwrap();
        assert!(String::from_utf8(buf).unwrap().ends_with("3,ttma_cdu,0,1,1,0.0,0.0,1.0,0.25\n"));
    }
}
