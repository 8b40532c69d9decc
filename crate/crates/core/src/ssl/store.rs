//! Pseudo-label table on disk: `"LGPL"`, u32 N, N × u32 K_i, then one u32
//! label per clusterer for every slice of every volume, all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::kmeans::PseudoLabelSet;

pub const LGPL_MAGIC: &[u8; 4] = b"LGPL";

pub fn write_labels(w: &mut impl Write, set: &PseudoLabelSet) -> std::io::Result<()> {
    w.write_all(LGPL_MAGIC)?;
    w.write_all(&(set.ks.len() as u32).to_le_bytes())?;
    for &k in &set.ks {
        w.write_all(&(k as u32).to_le_bytes())?;
    }
    for &l in &set.labels {
        w.write_all(&l.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_labels(bytes: &[u8]) -> Result<PseudoLabelSet> {
    if bytes.len() < 8 || &bytes[..4] != LGPL_MAGIC {
        return Err(Error::Format("bad magic: not a pseudo-label table".into()));
    }
    let words: Vec<u32> = bytes[4..]
        .chunks(4)
        .map(|c| {
            c.try_into()
                .map(u32::from_le_bytes)
                .map_err(|_| Error::Format("truncated pseudo-label table".into()))
        })
        .collect::<Result<_>>()?;
    let n = words[0] as usize;
    if n == 0 || words.len() < 1 + n {
        return Err(Error::Format(format!("pseudo-label header declares {n} clusterers")));
    }
    let ks: Vec<usize> = words[1..=n].iter().map(|&k| k as usize).collect();
    let labels = words[1 + n..].to_vec();
    if !labels.len().is_multiple_of(n) {
        return Err(Error::Format("label payload is not a whole number of rows".into()));
    }
    for (j, &l) in labels.iter().enumerate() {
        if l as usize >= ks[j % n] {
            return Err(Error::Format(format!("label {l} exceeds K = {}", ks[j % n])));
        }
    }
    Ok(PseudoLabelSet { ks, labels })
}

pub fn save_labels(path: &Path, set: &PseudoLabelSet) -> Result<()> {
    let mut buf = Vec::new();
    write_labels(&mut buf, set).map_err(|e| Error::io(path, e))?;
    crate::io::write_file(path, &buf)
}

pub fn load_labels(path: &Path) -> Result<PseudoLabelSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_labels(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_bad_magic() {
        let set = PseudoLabelSet {
            ks: vec![3, 8],
            labels: vec![0, 7, 2, 1, 1, 5],
        };
        let mut buf = Vec::new();
        write_labels(&mut buf, &set).unwrap();
        assert_eq!(&buf[..4], b"LGPL");
        assert_eq!(buf.len(), 4 + 4 + 8 + 6 * 4);
        assert_eq!(read_labels(&buf).unwrap(), set);
        buf[0] = b'X';
        assert!(read_labels(&buf).unwrap_err().to_string().contains("bad magic"));
    }
}
