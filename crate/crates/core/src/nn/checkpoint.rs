//! Portable checkpoint files.
//!
//! A checkpoint is a single ASCII header line followed by the raw weights:
//!
//! ```text
//! PFCM-CHECKPOINT v1 total=<n> layout=<name>[<d0>,<d1>,...]@<offset>;...\n
//! <n little-endian IEEE-754 f64 values>
//! ```
//!
//! The layout lists every parameter tensor in flattening order. Readers must
//! check that the offsets are contiguous and that the payload holds exactly
//! `total * 8` bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::weights::{FlatWeights, LayerSlot, Layout};
use crate::error::{Error, Result};

const MAGIC: &str = "PFCM-CHECKPOINT";
const VERSION: &str = "v1";

pub fn write_checkpoint<W: Write>(weights: &FlatWeights, mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "{MAGIC} {VERSION} total={} layout={}",
        weights.len(),
        weights.layout()
    )?;
    for v in weights.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()
}

pub fn write_checkpoint_file(weights: &FlatWeights, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(weights, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

fn parse_slot(entry: &str) -> Result<LayerSlot> {
    let bad = || Error::Checkpoint(format!("bad layout entry `{entry}`"));
    let (head, offset) = entry.rsplit_once('@').ok_or_else(bad)?;
    let (name, dims) = head.split_once('[').ok_or_else(bad)?;
    let dims = dims.strip_suffix(']').ok_or_else(bad)?;
    let shape = dims
        .split(',')
        .map(|d| d.parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerSlot {
        name: name.to_owned(),
        shape,
        offset: offset.parse().map_err(|_| bad())?,
    })
}

fn parse_header(line: &str) -> Result<Layout> {
    let mut fields = line.trim_end_matches('\n').split(' ');
    if fields.next() != Some(MAGIC) {
        return Err(Error::Checkpoint("missing magic".into()));
    }
    if fields.next() != Some(VERSION) {
        return Err(Error::Checkpoint("unsupported version".into()));
    }
    let total: usize = fields
        .next()
        .and_then(|f| f.strip_prefix("total="))
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing total".into()))?;
    let layout = fields
        .next()
        .and_then(|f| f.strip_prefix("layout="))
        .ok_or_else(|| Error::Checkpoint("missing layout".into()))?;
    if fields.next().is_some() {
        return Err(Error::Checkpoint("trailing header fields".into()));
    }
    let slots = layout
        .split(';')
        .map(parse_slot)
        .collect::<Result<Vec<_>>>()?;
    let layout = Layout::from_slots(slots)?;
    if layout.total() != total {
        return Err(Error::Checkpoint(format!(
            "header total {total} disagrees with layout total {}",
            layout.total()
        )));
    }
    Ok(layout)
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<FlatWeights> {
    let mut reader = BufReader::new(input);
    let mut header = String::new();
    reader
        .read_line(&mut header)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let layout = parse_header(&header)?;
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if payload.len() != layout.total() * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} payload bytes, found {}",
            layout.total() * 8,
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    FlatWeights::new(Arc::new(layout), values)
}

pub fn read_checkpoint_file(path: &Path) -> Result<FlatWeights> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_weights, CnnSpec};

    #[test]
    fn roundtrip_is_bit_exact() {
        let w = init_weights(&CnnSpec::with_classes(2), 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&w, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.to_le_bytes(), w.to_le_bytes());
        assert_eq!(back.layout(), w.layout());
    }

    #[test]
    fn header_is_human_readable() {
        let w = init_weights(&CnnSpec::default(), 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&w, &mut buf).unwrap();
        let header = buf.split(|b| *b == b'\n').next().unwrap();
        assert_eq!(
            std::str::from_utf8(header).unwrap(),
            "PFCM-CHECKPOINT v1 total=83123 layout=conv1.weight[10,1,3,3]@0;conv1.bias[10]@90;\
             conv2.weight[20,10,3,3]@100;conv2.bias[20]@1900;fc1.weight[50,1620]@1920;\
             fc1.bias[50]@82920;fc2.weight[3,50]@82970;fc2.bias[3]@83120"
        );
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let w = init_weights(&CnnSpec::default(), 3).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&w, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_checkpoint(buf.as_slice()),
            Err(Error::Checkpoint(_))
        ));
        assert!(read_checkpoint(&b"NOPE v1 total=1 layout=a[1]@0\n"[..]).is_err());
        assert!(read_checkpoint(&b"PFCM-CHECKPOINT v1 total=2 layout=a[1]@0\n"[..]).is_err());
    }
}
