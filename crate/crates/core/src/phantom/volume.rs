//! Dense scalar volumes and the `RVOL` container.
//!
//! Layout (little-endian): `b"RVOL"`, `u32` version (1), three `u32` dims,
//! three `f32` spacings, then `dims` product `f32` voxels with x varying
//! fastest.

use std::fs;
use std::path::Path;

use rankage_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::util::atomic_write;

const MAGIC: &[u8; 4] = b"RVOL";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 12 + 12;
/// Upper bound on voxels per file (4 GiB of payload).
const MAX_VOXELS: u64 = 1 << 30;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid("volume", format!("zero extent in {dims:?}")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("volume", format!("non-positive spacing {spacing:?}")));
        }
        let n = dims.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::invalid(
                "volume",
                format!("{dims:?} needs {n} voxels, got {}", voxels.len()),
            ));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("volume", "non-finite voxel"));
        }
        Ok(Self { dims, spacing, voxels })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            voxels: vec![0.0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    /// `[1, 1, nz, ny, nx]` network input view.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [nx, ny, nz] = self.dims;
        Tensor::new(vec![1, 1, nz, ny, nx], self.voxels.clone()).expect("volume length matches dims")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.voxels.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |expected: usize| Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        };
        if bytes.len() < 4 {
            return Err(truncated(HEADER_LEN));
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[..4]);
        if &magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: magic,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(HEADER_LEN));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let raw_dims = [u32_at(8), u32_at(12), u32_at(16)];
        let count = raw_dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        let count = match count {
            Some(c) if c <= MAX_VOXELS => c as usize,
            _ => {
                return Err(Error::DimensionOverflow {
                    path: path.to_path_buf(),
                    dims: raw_dims,
                })
            }
        };
        let spacing = [0, 1, 2].map(|i| f32::from_le_bytes(bytes[20 + 4 * i..24 + 4 * i].try_into().expect("4 bytes")));
        let expected = HEADER_LEN + 4 * count;
        if bytes.len() < expected {
            return Err(truncated(expected));
        }
        let voxels = bytes[HEADER_LEN..expected]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let dims = raw_dims.map(|d| d as usize);
        Volume::new(dims, spacing, voxels).map_err(|e| match e {
            Error::Invalid { detail, .. } => Error::invalid("volume file", format!("{}: {detail}", path.display())),
            other => other,
        })
    }
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    atomic_write(path, &volume.to_bytes())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        let voxels = (0..8 * 8 * 8).map(|i| ((i * 37) % 101) as f32 / 101.0).collect();
        Volume::new([8, 8, 8], [1.0, 1.5, 2.0], voxels).unwrap()
    }

    #[test]
    fn write_then_read_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.rvol");
        let v = sample();
        write_volume(&path, &v).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.spacing().map(f32::to_bits), v.spacing().map(f32::to_bits));
        let bits = |v: &Volume| v.voxels().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&v));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[..4].copy_from_slice(b"NIFT");
        let err = Volume::from_bytes(&bytes, Path::new("x.rvol")).unwrap_err();
        assert!(matches!(err, Error::BadMagic { found, .. } if &found == b"NIFT"));
    }

    #[test]
    fn truncation_reports_expected_and_actual_lengths() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 10];
        match Volume::from_bytes(cut, Path::new("x.rvol")).unwrap_err() {
            Error::Truncated { expected, actual, .. } => {
                assert_eq!(expected, HEADER_LEN + 4 * 512);
                assert_eq!(actual, HEADER_LEN + 4 * 512 - 10);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn absurd_dims_overflow() {
        let mut bytes = sample().to_bytes();
        for i in 0..3 {
            bytes[8 + 4 * i..12 + 4 * i].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(
            Volume::from_bytes(&bytes, Path::new("x.rvol")).unwrap_err(),
            Error::DimensionOverflow { .. }
        ));
    }

    #[test]
    fn header_is_little_endian_with_x_fastest_payload() {
        let mut v = Volume::zeros([3, 2, 1]);
        let at = v.index(2, 1, 0);
        v.voxels_mut()[at] = 1.0;
        let bytes = v.to_bytes();
        assert_eq!(&bytes[..4], b"RVOL");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(at, 5);
        assert_eq!(&bytes[HEADER_LEN + 20..HEADER_LEN + 24], &1.0f32.to_le_bytes());
    }
}
