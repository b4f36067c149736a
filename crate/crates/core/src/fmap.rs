//! Feature-map container, the `.fmap` binary format and the grid-to-image-plane projection.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "FMAP"            4 bytes magic
//! 0x01              format version
//! u32 id_len        followed by id_len bytes of UTF-8 image id
//! u32 layer_index
//! u32 C, u32 H, u32 W
//! u32 image_width_px, u32 image_height_px
//! C*H*W f32         channel-major, row-major within a channel
//! ```

use std::fs;
use std::io::Write;
use std::ops::{Add, Mul, Sub};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FMAP";
pub const FORMAT_VERSION: u8 = 1;

/// A point on the normalized image plane, `(0,0)` top-left and `(1,1)` bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UnitPosition {
    pub x: f64,
    pub y: f64,
}

impl UnitPosition {
    pub const ORIGIN: UnitPosition = UnitPosition { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        UnitPosition { x, y }
    }

    pub fn norm_sq(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn dist(self, other: UnitPosition) -> f64 {
        (self - other).norm_sq().sqrt()
    }

    pub fn dot(self, other: UnitPosition) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for UnitPosition {
    type Output = UnitPosition;
    fn add(self, rhs: UnitPosition) -> UnitPosition {
        UnitPosition::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for UnitPosition {
    type Output = UnitPosition;
    fn sub(self, rhs: UnitPosition) -> UnitPosition {
        UnitPosition::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for UnitPosition {
    type Output = UnitPosition;
    fn mul(self, rhs: f64) -> UnitPosition {
        UnitPosition::new(self.x * rhs, self.y * rhs)
    }
}

/// Projects grid cell `(row, col)` of an `h`x`w` map to the center of that cell on the unit square.
pub fn project_unit(row: usize, col: usize, h: usize, w: usize) -> Result<UnitPosition> {
    if row >= h || col >= w {
        return Err(Error::domain(format!(
            "unit ({row},{col}) outside a {h}x{w} grid"
        )));
    }
    Ok(UnitPosition::new(
        (col as f64 + 0.5) / w as f64,
        (row as f64 + 0.5) / h as f64,
    ))
}

#[derive(Debug, Error)]
pub enum FmapError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated payload: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated {
        offset: usize,
        needed: usize,
        len: usize,
    },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("zero dimension: {0}")]
    ZeroDimension(&'static str),
    #[error("image id is not valid UTF-8")]
    InvalidId,
    #[error("value count {got} does not match C*H*W = {expected}")]
    ShapeMismatch { expected: usize, got: usize },
}

/// One image's activations for one conv-layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub image_id: String,
    pub layer_index: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub image_width_px: u32,
    pub image_height_px: u32,
    values: Vec<f32>,
}

impl FeatureMap {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        image_id: impl Into<String>,
        layer_index: u32,
        channels: usize,
        height: usize,
        width: usize,
        image_width_px: u32,
        image_height_px: u32,
        values: Vec<f32>,
    ) -> Result<Self, FmapError> {
        for (name, v) in [
            ("channels", channels),
            ("height", height),
            ("width", width),
            ("image_width_px", image_width_px as usize),
            ("image_height_px", image_height_px as usize),
        ] {
            if v == 0 {
                return Err(FmapError::ZeroDimension(name));
            }
        }
        let expected = channels * height * width;
        if values.len() != expected {
            return Err(FmapError::ShapeMismatch {
                expected,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FmapError::NonFinite(i));
        }
        Ok(FeatureMap {
            image_id: image_id.into(),
            layer_index,
            channels,
            height,
            width,
            image_width_px,
            image_height_px,
            values,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn zeros(
        image_id: impl Into<String>,
        layer_index: u32,
        channels: usize,
        height: usize,
        width: usize,
        image_width_px: u32,
        image_height_px: u32,
    ) -> Result<Self, FmapError> {
        let n = channels * height * width;
        Self::new(
            image_id,
            layer_index,
            channels,
            height,
            width,
            image_width_px,
            image_height_px,
            vec![0.0; n],
        )
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.values[(c * self.height + row) * self.width + col]
    }

    /// Panics on non-finite input; the container never holds NaN or Inf.
    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f32) {
        assert!(v.is_finite(), "feature-map responses must be finite");
        self.values[(c * self.height + row) * self.width + col] = v;
    }

    pub fn unit_position(&self, row: usize, col: usize) -> UnitPosition {
        UnitPosition::new(
            (col as f64 + 0.5) / self.width as f64,
            (row as f64 + 0.5) / self.height as f64,
        )
    }

    pub fn encoded_len(&self) -> usize {
        4 + 1 + 4 + self.image_id.len() + 4 + 12 + 8 + 4 * self.values.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(self.image_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.image_id.as_bytes());
        for v in [
            self.layer_index,
            self.channels as u32,
            self.height as u32,
            self.width as u32,
            self.image_width_px,
            self.image_height_px,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FmapError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(FmapError::BadMagic(magic));
        }
        let version = cur.take(1)?[0];
        if version != FORMAT_VERSION {
            return Err(FmapError::UnsupportedVersion(version));
        }
        let id_len = cur.u32()? as usize;
        let image_id = std::str::from_utf8(cur.take(id_len)?)
            .map_err(|_| FmapError::InvalidId)?
            .to_owned();
        let layer_index = cur.u32()?;
        let channels = cur.u32()? as usize;
        let height = cur.u32()? as usize;
        let width = cur.u32()? as usize;
        let image_width_px = cur.u32()?;
        let image_height_px = cur.u32()?;
        for (name, v) in [
            ("channels", channels),
            ("height", height),
            ("width", width),
            ("image_width_px", image_width_px as usize),
            ("image_height_px", image_height_px as usize),
        ] {
            if v == 0 {
                return Err(FmapError::ZeroDimension(name));
            }
        }
        let count = channels
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .ok_or(FmapError::Truncated {
                offset: cur.pos,
                needed: usize::MAX,
                len: bytes.len(),
            })?;
        let payload = cur.take(count.checked_mul(4).unwrap_or(usize::MAX))?;
        if cur.pos != bytes.len() {
            return Err(FmapError::TrailingBytes(bytes.len() - cur.pos));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        FeatureMap::new(
            image_id,
            layer_index,
            channels,
            height,
            width,
            image_width_px,
            image_height_px,
            values,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FmapError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FmapError::Truncated {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32, FmapError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn projection_examples() {
        assert_eq!(project_unit(0, 0, 1, 1).unwrap(), UnitPosition::new(0.5, 0.5));
        assert_eq!(project_unit(0, 0, 2, 2).unwrap(), UnitPosition::new(0.25, 0.25));
        let p = project_unit(6, 13, 14, 14).unwrap();
        assert!((p.x - 13.5 / 14.0).abs() < 1e-15);
        assert!((p.y - 6.5 / 14.0).abs() < 1e-15);
        assert!((p.x - 0.964_285_714_285_714_3).abs() < 1e-12);
        assert!((p.y - 0.464_285_714_285_714_3).abs() < 1e-12);
    }

    #[test]
    fn projection_out_of_range() {
        assert!(matches!(project_unit(2, 0, 2, 2), Err(Error::Domain(_))));
        assert!(matches!(project_unit(0, 5, 2, 5), Err(Error::Domain(_))));
    }

    #[test]
    fn smallest_file() {
        let m = FeatureMap::new("a", 0, 1, 1, 1, 1, 1, vec![0.0]).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(bytes.len(), 38);
        assert_eq!(bytes.len(), m.encoded_len());
        let back = FeatureMap::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn parse_errors_are_distinct() {
        let m = FeatureMap::new("img", 2, 2, 2, 2, 10, 10, vec![1.0; 8]).unwrap();
        let good = m.to_bytes();

        let mut bad = good.clone();
        bad[3] = b'Q';
        let err = FeatureMap::from_bytes(&bad).unwrap_err();
        assert!(matches!(err, FmapError::BadMagic(m) if &m == b"FMAQ"));
        assert!(err.to_string().contains("bad magic"));

        let err = FeatureMap::from_bytes(&good[..good.len() - 3]).unwrap_err();
        assert!(matches!(err, FmapError::Truncated { .. }));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(
            FeatureMap::from_bytes(&long).unwrap_err(),
            FmapError::TrailingBytes(1)
        ));

        let mut nan = good.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            FeatureMap::from_bytes(&nan).unwrap_err(),
            FmapError::NonFinite(7)
        ));

        let mut zero = good.clone();
        // C lives after magic, version, id_len, id and layer_index.
        let c_off = 4 + 1 + 4 + 3 + 4;
        zero[c_off..c_off + 4].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            FeatureMap::from_bytes(&zero).unwrap_err(),
            FmapError::ZeroDimension("channels")
        ));

        let mut ver = good;
        ver[4] = 9;
        assert!(matches!(
            FeatureMap::from_bytes(&ver).unwrap_err(),
            FmapError::UnsupportedVersion(9)
        ));
    }

    #[test]
    fn rejects_non_finite_on_construction() {
        assert!(matches!(
            FeatureMap::new("x", 0, 1, 1, 2, 1, 1, vec![0.0, f32::INFINITY]),
            Err(FmapError::NonFinite(1))
        ));
        assert!(matches!(
            FeatureMap::new("x", 0, 1, 1, 2, 1, 1, vec![0.0]),
            Err(FmapError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn indexing_is_channel_major() {
        let vals: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let m = FeatureMap::new("x", 0, 2, 2, 3, 6, 4, vals).unwrap();
        assert_eq!(m.get(1, 0, 0), 6.0);
        assert_eq!(m.get(0, 1, 2), 5.0);
        assert_eq!(m.channel(1), &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    fn arb_fmap() -> impl Strategy<Value = FeatureMap> {
        (1usize..=8, 1usize..=16, 1usize..=16, "[a-z0-9_]{0,12}", any::<u32>(), 1u32..4000, 1u32..4000)
            .prop_flat_map(|(c, h, w, id, layer, iw, ih)| {
                let n = c * h * w;
                (
                    Just((c, h, w, id, layer, iw, ih)),
                    proptest::collection::vec(
                        any::<f32>().prop_filter("finite", |v| v.is_finite()),
                        n,
                    ),
                )
            })
            .prop_map(|((c, h, w, id, layer, iw, ih), vals)| {
                FeatureMap::new(id, layer, c, h, w, iw, ih, vals).unwrap()
            })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(m in arb_fmap()) {
            let bytes = m.to_bytes();
            let back = FeatureMap::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(&back.image_id, &m.image_id);
            for (a, b) in back.values().iter().zip(m.values()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn projection_is_monotone_and_interior(h in 1usize..64, w in 1usize..64, r in 0usize..64, c in 0usize..64) {
            let (r, c) = (r % h, c % w);
            let p = project_unit(r, c, h, w).unwrap();
            prop_assert!(p.x > 0.0 && p.x < 1.0 && p.y > 0.0 && p.y < 1.0);
            if c + 1 < w {
                prop_assert!(project_unit(r, c + 1, h, w).unwrap().x > p.x);
            }
            if r + 1 < h {
                prop_assert!(project_unit(r + 1, c, h, w).unwrap().y > p.y);
            }
        }
    }
}
