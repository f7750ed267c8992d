//! Little-endian binary dataset format.
//!
//! Header: magic `L2GS`, u32 version, u32 count, u16 H, u16 W, u16 C,
//! u16 classes, u64 seed. Then per sample C·H·W f32 intensities followed
//! by H·W u8 labels. The split name is not stored; readers take it from
//! the file stem.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{Manifest, SegDataset, SegSample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"L2GS";
pub const FORMAT_VERSION: u32 = 1;

fn narrow(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::invalid(format!("{what} = {v} does not fit the format")))
}

pub fn write_dataset(ds: &SegDataset, out: &mut impl Write) -> Result<()> {
    ds.validate()?;
    let m = &ds.manifest;
    out.write_all(&MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let count = u32::try_from(ds.len()).map_err(|_| Error::invalid("too many samples"))?;
    out.write_all(&count.to_le_bytes())?;
    for (v, what) in [(m.height, "height"), (m.width, "width"), (m.channels, "channels"), (m.classes, "classes")] {
        out.write_all(&narrow(v, what)?.to_le_bytes())?;
    }
    out.write_all(&m.seed.to_le_bytes())?;
    for s in &ds.samples {
        for &v in s.image.data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        out.write_all(&s.labels)?;
    }
    Ok(())
}

fn read_exact(input: &mut impl Read, buf: &mut [u8], what: impl FnOnce() -> String) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated { what: what() },
        _ => Error::Io(e),
    })
}

pub fn read_dataset(input: &mut impl Read, split: &str) -> Result<SegDataset> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic, || "magic".into())?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let mut header = [0u8; 4 + 4 + 2 * 4 + 8];
    read_exact(input, &mut header, || "header".into())?;
    let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().expect("4 bytes"));
    let u16_at = |o: usize| u16::from_le_bytes(header[o..o + 2].try_into().expect("2 bytes")) as usize;
    let version = u32_at(0);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let count = u32_at(4) as usize;
    let manifest = Manifest {
        height: u16_at(8),
        width: u16_at(10),
        channels: u16_at(12),
        classes: u16_at(14),
        seed: u64::from_le_bytes(header[16..24].try_into().expect("8 bytes")),
        split: split.to_string(),
    };
    let pixels = manifest.height * manifest.width;
    let values = manifest.channels * pixels;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    let mut raw = vec![0u8; values * 4];
    for i in 0..count {
        read_exact(input, &mut raw, || format!("sample {i} image"))?;
        let image: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let mut labels = vec![0u8; pixels];
        read_exact(input, &mut labels, || format!("sample {i} labels"))?;
        samples.push(SegSample {
            image: Tensor::new(&[manifest.channels, manifest.height, manifest.width], image)?,
            labels,
        });
    }
    let mut extra = [0u8; 1];
    if input.read(&mut extra)? != 0 {
        return Err(Error::Corrupt(format!("trailing bytes after {count} samples")));
    }
    let ds = SegDataset { manifest, samples };
    ds.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
    Ok(ds)
}

pub fn save_dataset(ds: &SegDataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut out)?;
    out.flush()?;
    Ok(())
}

/// Loads a dataset; the split name is the file stem.
pub fn load_dataset(path: &Path) -> Result<SegDataset> {
    let split = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_dataset(&mut BufReader::new(File::open(path)?), &split)
}
