use std::io::{Read, Write};

use super::{ArtifactMask, EdaTrace};
use crate::error::{Error, Result};
use crate::util::{csv_reader, csv_writer, expect_header, parse_f64};

const EDA_HEADER: [&str; 2] = ["unix_time", "sc_microsiemens"];
const MASK_HEADER: [&str; 2] = ["start_unix", "end_unix"];

/// Reads `unix_time, sc_microsiemens` rows. The sampling rate is inferred
/// from the median sample spacing and rounded to the nearest integer Hz.
pub fn read_eda_csv<R: Read>(
    rdr: R,
    participant_id: &str,
    session_id: &str,
) -> Result<EdaTrace> {
    let mut rdr = csv_reader(rdr);
    expect_header(rdr.headers()?, &EDA_HEADER, "EDA file")?;
    let (mut t, mut sc) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < 2 {
            return Err(Error::format("EDA file", format!("line {line}: expected 2 fields")));
        }
        t.push(parse_f64(&rec[0], "EDA file", line)?);
        sc.push(parse_f64(&rec[1], "EDA file", line)?);
    }
    if t.len() < 2 {
        return Err(Error::EmptyTrace {
            len: t.len(),
            needed: 2,
        });
    }
    let mut dts: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    dts.sort_by(f64::total_cmp);
    let median_dt = dts[dts.len() / 2];
    if median_dt <= 0.0 {
        return Err(Error::InvalidTrace("cannot infer sampling rate".into()));
    }
    let rate = (1.0 / median_dt).round();
    EdaTrace::new(participant_id, session_id, t, sc, rate)
}

pub fn write_eda_csv<W: Write>(w: W, trace: &EdaTrace) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(EDA_HEADER)?;
    for (t, v) in trace.t.iter().zip(&trace.sc) {
        wtr.write_record([t.to_string(), v.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::io("<eda writer>", e))?;
    Ok(())
}

pub fn read_artifact_mask<R: Read>(rdr: R) -> Result<ArtifactMask> {
    let mut rdr = csv_reader(rdr);
    expect_header(rdr.headers()?, &MASK_HEADER, "artifact mask")?;
    let mut intervals = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < 2 {
            return Err(Error::format("artifact mask", format!("line {line}: expected 2 fields")));
        }
        intervals.push((
            parse_f64(&rec[0], "artifact mask", line)?,
            parse_f64(&rec[1], "artifact mask", line)?,
        ));
    }
    ArtifactMask::new(intervals)
}

pub fn write_artifact_mask<W: Write>(w: W, mask: &ArtifactMask) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(MASK_HEADER)?;
    for (a, b) in mask.intervals() {
        wtr.write_record([a.to_string(), b.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::io("<mask writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_eda_with_spaced_header() {
        let text = "unix_time, sc_microsiemens\n1677282033.00, 5.1\n1677282033.01, 5.2\n1677282033.02, 5.3\n";
        let tr = read_eda_csv(text.as_bytes(), "0001", "s4").unwrap();
        assert_eq!(tr.len(), 3);
        assert_eq!(tr.rate_hz, 100.0);
        assert_eq!(tr.sc, vec![5.1, 5.2, 5.3]);
    }

    #[test]
    fn header_is_required() {
        let text = "1677282033.00,5.1\n1677282033.01,5.2\n";
        assert!(read_eda_csv(text.as_bytes(), "p", "s").is_err());
    }

    #[test]
    fn rejects_negative_conductance() {
        let text = "unix_time,sc_microsiemens\n1.0,5.0\n1.01,-1.0\n";
        assert!(matches!(
            read_eda_csv(text.as_bytes(), "p", "s"),
            Err(Error::InvalidTrace(_))
        ));
    }

    #[test]
    fn mask_file_round_trip() {
        let mask = ArtifactMask::new(vec![(1.5, 2.0), (3.25, 4.0)]).unwrap();
        let mut buf = Vec::new();
        write_artifact_mask(&mut buf, &mask).unwrap();
        assert_eq!(read_artifact_mask(buf.as_slice()).unwrap(), mask);
    }
}
