//! Checkpoint container: magic `CATO1`, then per-parameter records of
//! (name length u64 LE, name UTF-8, rank u64 LE, dims u64 LE, payload f64 LE).
//!
//! The payload is always written as f64 regardless of the in-memory scalar
//! type, so checkpoints are portable across `f32`/`f64` builds.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Parameter, Tensor};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 5] = b"CATO1";

pub fn write_records<F: Scalar, W: Write>(
    w: &mut W,
    records: &[(&str, &Tensor<F>)],
) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, tensor) in records {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape.len() as u64).to_le_bytes())?;
        for &d in &tensor.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &tensor.data {
            w.write_all(&v.to_f64_c().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_records<F: Scalar, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<F>)>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut out = Vec::new();
    loop {
        let mut len_buf = [0u8; 8];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u64::from_le_bytes(len_buf) as usize;
        if name_len > 1 << 20 {
            return Err(Error::Checkpoint(format!("implausible name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| Error::Checkpoint(format!("name not UTF-8: {e}")))?;
        r.read_exact(&mut len_buf)?;
        let rank = u64::from_le_bytes(len_buf) as usize;
        if rank > 16 {
            return Err(Error::Checkpoint(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut len_buf)?;
            shape.push(u64::from_le_bytes(len_buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut len_buf)?;
            data.push(F::c(f64::from_le_bytes(len_buf)));
        }
        let tensor = Tensor::new(shape, data)?;
        tensor.ensure_finite("checkpoint record")?;
        out.push((name, tensor));
    }
    Ok(out)
}

pub fn save_params<F: Scalar>(path: &Path, params: &[Parameter<F>]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let records: Vec<(&str, &Tensor<F>)> =
        params.iter().map(|p| (p.name.as_str(), &p.tensor)).collect();
    write_records(&mut file, &records)?;
    file.flush()?;
    Ok(())
}

pub fn load_records<F: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<F>)>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_records(&mut file)
}

/// Write a single named tensor (dataset field files use this).
pub fn save_tensor<F: Scalar>(path: &Path, name: &str, tensor: &Tensor<F>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_records(&mut file, &[(name, tensor)])?;
    file.flush()?;
    Ok(())
}

/// Read a file expected to hold exactly one tensor record.
pub fn load_tensor<F: Scalar>(path: &Path) -> Result<(String, Tensor<F>)> {
    let mut records = load_records(path)?;
    if records.len() != 1 {
        return Err(Error::Checkpoint(format!(
            "{} holds {} records, expected 1",
            path.display(),
            records.len()
        )));
    }
    Ok(records.pop().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_and_bits() {
        let t1 = Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, 1e-300, 3.7, -0.125]).unwrap();
        let t2 = Tensor::scalar(42.0);
        let mut buf = Vec::new();
        write_records(&mut buf, &[("w", &t1), ("b", &t2)]).unwrap();
        assert_eq!(&buf[..5], MAGIC);
        let records: Vec<(String, Tensor<f64>)> = read_records(&mut buf.as_slice()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].0, "w");
        assert_eq!(records[0].1.shape, vec![2, 3]);
        assert_eq!(records[0].1.data, t1.data);
        assert_eq!(records[1].0, "b");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"NOPE!".to_vec();
        assert!(read_records::<f64, _>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let t1 = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_records(&mut buf, &[("w", &t1)]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_records::<f64, _>(&mut buf.as_slice()).is_err());
    }
}
