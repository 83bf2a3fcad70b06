//! Versioned little-endian binary cache for preprocessed windows.
//!
//! Layout: magic `MBCIWIN\0`, `u32` version, `u64` window count, then per
//! window a `u16`-prefixed subject id, task code, session, label, split,
//! outlier flag and `f64` outlier probability, `u32` channels, `u32`
//! samples and the sample values as `f64`.

use std::io::{self, Read, Write};

use metabci_autodiff::Tensor;
use thiserror::Error;

use crate::recording::TaskId;
use crate::window::{Split, Window};

pub const MAGIC: &[u8; 8] = b"MBCIWIN\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a window cache")]
    Magic,
    #[error("cache version {found} is not supported (expected {VERSION})")]
    Version { found: u32 },
    #[error("corrupt cache: {0}")]
    Corrupt(String),
}

pub fn write_windows<W: Write>(mut out: W, windows: &[Window]) -> Result<(), CacheError> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(windows.len() as u64).to_le_bytes())?;
    for w in windows {
        let id = w.subject_id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| CacheError::Corrupt("subject id too long".into()))?;
        out.write_all(&id_len.to_le_bytes())?;
        out.write_all(id)?;
        out.write_all(&[
            w.task_id.code(),
            w.session_index,
            w.label,
            w.split.code(),
            w.outlier_prob.is_some() as u8,
        ])?;
        out.write_all(&w.outlier_prob.unwrap_or(0.0).to_le_bytes())?;
        out.write_all(&(w.n_channels() as u32).to_le_bytes())?;
        out.write_all(&(w.n_samples() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(w.samples.len() * 8);
        for v in w.samples.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], CacheError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CacheError::Corrupt("unexpected end of cache".into()),
        _ => CacheError::Io(e),
    })?;
    Ok(b)
}

pub fn read_windows<R: Read>(mut r: R) -> Result<Vec<Window>, CacheError> {
    if &read_array::<_, 8>(&mut r)? != MAGIC {
        return Err(CacheError::Magic);
    }
    let found = u32::from_le_bytes(read_array(&mut r)?);
    if found != VERSION {
        return Err(CacheError::Version { found });
    }
    let count = u64::from_le_bytes(read_array(&mut r)?);
    let mut windows = Vec::new();
    for _ in 0..count {
        let id_len = u16::from_le_bytes(read_array(&mut r)?) as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(|_| CacheError::Corrupt("truncated subject id".into()))?;
        let subject_id = String::from_utf8(id).map_err(|_| CacheError::Corrupt("subject id is not UTF-8".into()))?;
        let [task, session_index, label, split, has_outlier] = read_array::<_, 5>(&mut r)?;
        let task_id = TaskId::from_code(task).ok_or_else(|| CacheError::Corrupt(format!("task code {task}")))?;
        let split = Split::from_code(split).ok_or_else(|| CacheError::Corrupt(format!("split code {split}")))?;
        let p = f64::from_le_bytes(read_array(&mut r)?);
        let c = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let t = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let n = c
            .checked_mul(t)
            .ok_or_else(|| CacheError::Corrupt("window size overflows".into()))?;
        // Read in bounded chunks so a forged size cannot force a huge allocation.
        let mut data = Vec::new();
        let mut chunk = [0u8; 8 * 1024];
        let mut remaining = n;
        while remaining > 0 {
            let take = remaining.min(1024);
            r.read_exact(&mut chunk[..take * 8])
                .map_err(|_| CacheError::Corrupt("truncated sample data".into()))?;
            data.extend(chunk[..take * 8].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())));
            remaining -= take;
        }
        windows.push(Window {
            samples: Tensor::new(vec![c, t], data).map_err(|e| CacheError::Corrupt(e.to_string()))?,
            label,
            subject_id,
            task_id,
            session_index,
            outlier_prob: (has_outlier != 0).then_some(p),
            split,
        });
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let windows = vec![
            Window {
                samples: Tensor::new(vec![2, 3], vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0, 1e300, -7.25]).unwrap(),
                label: 1,
                subject_id: "S042".into(),
                task_id: TaskId::Task4,
                session_index: 3,
                outlier_prob: Some(0.125),
                split: Split::Eval,
            },
            Window {
                samples: Tensor::zeros(&[17, 320]),
                label: 0,
                subject_id: String::new(),
                task_id: TaskId::Task2,
                session_index: 1,
                outlier_prob: None,
                split: Split::Unassigned,
            },
        ];
        let mut buf = Vec::new();
        write_windows(&mut buf, &windows).unwrap();
        assert_eq!(read_windows(&buf[..]).unwrap(), windows);
        for cut in [0, 7, 12, 20, 30, buf.len() - 1] {
            assert!(read_windows(&buf[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn rejects_other_versions() {
        let mut buf = Vec::new();
        write_windows(&mut buf, &[]).unwrap();
        buf[8] = 9;
        assert!(matches!(read_windows(&buf[..]), Err(CacheError::Version { found: 9 })));
        buf[0] = b'X';
        assert!(matches!(read_windows(&buf[..]), Err(CacheError::Magic)));
    }
}
