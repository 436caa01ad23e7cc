//! Feature file: 8-byte magic, u32 frames, u32 dim (16-byte header), then
//! `frames * dim` little-endian f64 values, row-major.

use std::io::{Read, Write};
use std::path::Path;

use lhuc_autograd::Tensor;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LHUCFEAT";

pub fn write_features(mut w: impl Write, features: &Tensor<f64>) -> Result<()> {
    if features.ndim() != 2 {
        return Err(Error::Format("features must be a [frames, dim] matrix".into()));
    }
    let frames = u32::try_from(features.shape()[0]).map_err(|_| Error::Format("too many frames".into()))?;
    let dim = u32::try_from(features.shape()[1]).map_err(|_| Error::Format("feature dim too large".into()))?;
    let mut buf = Vec::with_capacity(16 + features.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&frames.to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_features(mut r: impl Read) -> Result<Tensor<f64>> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..8] != MAGIC {
        return Err(Error::Format("not a feature file".into()));
    }
    let frames = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(header[12..16].try_into().expect("4 bytes")) as usize;
    let mut raw = vec![0u8; frames * dim * 8];
    r.read_exact(&mut raw)?;
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(Tensor::new(vec![frames, dim], data)?)
}

pub fn save_features(path: &Path, features: &Tensor<f64>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write_features(&mut f, features)?;
    f.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Tensor<f64>> {
    let f = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFeatureFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    read_features(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 1.0 / 3.0]).unwrap();
        let mut buf = Vec::new();
        write_features(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 16 + 6 * 8);
        let back = read_features(&buf[..]).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = [0u8; 16];
        assert!(matches!(read_features(&buf[..]), Err(Error::Format(_))));
    }
}
