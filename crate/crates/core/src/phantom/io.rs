//! `CSQ1` dataset files and ground-truth CSV.
//!
//! Layout (little-endian): magic `CSQ1`, u8 version (1), u16 width,
//! u16 height, u8 slices, u8 n_labels, u16 T, u32 n_subjects; then per
//! subject a u32 id, a u8 label (0, 1, 255 = unknown) and `T·slices·H·W`
//! label bytes in frame, slice, row order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, Dims, LabelFrame, SegSequence};
use crate::biomarkers::BiomarkerSet;
use crate::error::{Error, Result};
use crate::N_LABELS;

const MAGIC: &[u8; 4] = b"CSQ1";
const VERSION: u8 = 1;
const UNKNOWN_LABEL: u8 = 255;

pub fn write_dataset<W: Write>(mut w: W, data: &Dataset) -> Result<()> {
    let d = data.dims;
    let narrow = |v: usize, what: &str| -> Result<u16> {
        u16::try_from(v).map_err(|_| Error::Parameter(format!("{what} {v} does not fit in u16")))
    };
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&narrow(d.width, "width")?.to_le_bytes())?;
    w.write_all(&narrow(d.height, "height")?.to_le_bytes())?;
    w.write_all(&[d.slices as u8, N_LABELS as u8])?;
    w.write_all(&narrow(data.frames, "frame count")?.to_le_bytes())?;
    w.write_all(&(data.subjects.len() as u32).to_le_bytes())?;
    for s in &data.subjects {
        w.write_all(&s.subject_id.to_le_bytes())?;
        let label = match s.label {
            Some(true) => 1,
            Some(false) => 0,
            None => UNKNOWN_LABEL,
        };
        w.write_all(&[label])?;
        for f in &s.frames {
            w.write_all(f.labels())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated CSQ1 stream".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    if &take::<4, _>(&mut r)? != MAGIC {
        return Err(Error::Format("not a CSQ1 file".into()));
    }
    let [version] = take::<1, _>(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported CSQ1 version {version}")));
    }
    let width = u16::from_le_bytes(take(&mut r)?) as usize;
    let height = u16::from_le_bytes(take(&mut r)?) as usize;
    let [slices, n_labels] = take::<2, _>(&mut r)?;
    if n_labels as usize != N_LABELS {
        return Err(Error::Format(format!("expected {N_LABELS} labels, header says {n_labels}")));
    }
    let frames = u16::from_le_bytes(take(&mut r)?) as usize;
    let n = u32::from_le_bytes(take(&mut r)?) as usize;
    let dims = Dims::new(width, height, slices as usize).map_err(|e| Error::Format(e.to_string()))?;
    let mut subjects = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let id = u32::from_le_bytes(take(&mut r)?);
        let label = match take::<1, _>(&mut r)?[0] {
            0 => Some(false),
            1 => Some(true),
            UNKNOWN_LABEL => None,
            other => return Err(Error::Format(format!("subject {id}: bad label byte {other}"))),
        };
        let mut seq_frames = Vec::with_capacity(frames);
        for _ in 0..frames {
            let mut buf = vec![0u8; dims.pixels()];
            r.read_exact(&mut buf).map_err(|_| Error::Format(format!("subject {id}: truncated frames")))?;
            seq_frames.push(LabelFrame::from_labels(dims, buf).map_err(|e| Error::Format(e.to_string()))?);
        }
        subjects.push(SegSequence::new(id, seq_frames, label).map_err(|e| Error::Format(e.to_string()))?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last subject".into()));
    }
    Dataset::new(dims, frames, subjects)
}

pub fn write_dataset_file(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), data)
}

pub fn read_dataset_file(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// `subject_id,ef,per,pfr,pafr,lvt,label`
pub fn write_truth_csv<W: Write>(mut w: W, rows: &[(u32, BiomarkerSet, Option<bool>)]) -> Result<()> {
    writeln!(w, "subject_id,ef,per,pfr,pafr,lvt,label")?;
    for (id, b, label) in rows {
        let label = match label {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        writeln!(w, "{id},{},{},{},{},{},{label}", b.ef, b.per, b.pfr, b.pafr, b.lvt)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_cohort, CohortSpec};

    #[test]
    fn header_layout_is_bit_exact() {
        let cohort = generate_cohort(&CohortSpec { frames: 8, ..CohortSpec::new(2, 0.5, 1) }).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &cohort.dataset).unwrap();
        assert_eq!(&buf[..4], b"CSQ1");
        assert_eq!(buf[4], 1);
        assert_eq!(&buf[5..7], &32u16.to_le_bytes());
        assert_eq!(&buf[7..9], &32u16.to_le_bytes());
        assert_eq!(buf[9], 1);
        assert_eq!(buf[10], 4);
        assert_eq!(&buf[11..13], &8u16.to_le_bytes());
        assert_eq!(&buf[13..17], &2u32.to_le_bytes());
        assert_eq!(&buf[17..21], &0u32.to_le_bytes());
        assert_eq!(buf.len(), 17 + 2 * (5 + 8 * 32 * 32));
        let back = read_dataset(&buf[..]).unwrap();
        assert_eq!(back, cohort.dataset);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(matches!(read_dataset(&b"CSQ2\x01"[..]), Err(Error::Format(_))));
        let cohort = generate_cohort(&CohortSpec { frames: 8, ..CohortSpec::new(1, 0.0, 1) }).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &cohort.dataset).unwrap();
        assert!(read_dataset(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[21] = 7; // label byte
        assert!(read_dataset(&bad[..]).is_err());
        let mut bad = buf.clone();
        bad[30] = 9; // pixel class
        assert!(read_dataset(&bad[..]).is_err());
    }

    #[test]
    fn unknown_labels_round_trip() {
        let mut cohort = generate_cohort(&CohortSpec { frames: 8, ..CohortSpec::new(1, 0.0, 1) }).unwrap();
        cohort.dataset.subjects[0].label = None;
        let mut buf = Vec::new();
        write_dataset(&mut buf, &cohort.dataset).unwrap();
        assert_eq!(buf[21], 255);
        assert_eq!(read_dataset(&buf[..]).unwrap().subjects[0].label, None);
    }
}
