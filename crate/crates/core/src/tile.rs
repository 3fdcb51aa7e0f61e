//! The spatio-temporal sample tile and its binary file format.
//!
//! File layout (all integers little-endian):
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 8     | magic `STBNTILE`                        |
//! | 4     | version (`u32`, currently 1)            |
//! | 20    | `X`, `Y`, `T`, `spp`, `dim` (`u32` each) |
//! | 8     | seed (`u64`)                            |
//! | ...   | `f32` payload, `(t, y, x, s, component)` with `t` slowest |

use std::io::{self, Read, Write};

use rand::Rng;
use thiserror::Error;

use crate::rng;

pub const MAGIC: &[u8; 8] = b"STBNTILE";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 40;

#[derive(Debug, Error)]
pub enum TileError {
    #[error("invalid tile parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("not a tile file: magic bytes {0:?} do not match `STBNTILE`")]
    MagicMismatch([u8; 8]),
    #[error("unsupported tile version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated tile: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("trailing data after tile payload")]
    TrailingData,
    #[error("payload coordinate {value} at index {index} lies outside [0, 1)")]
    OutOfRange { index: usize, value: f32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A cell position; any integers are accepted and wrap toroidally on access.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct CellIndex {
    pub x: i64,
    pub y: i64,
    pub t: i64,
}

impl CellIndex {
    pub fn new(x: i64, y: i64, t: i64) -> Self {
        Self { x, y, t }
    }

    /// Wraps into `[0, X) x [0, Y) x [0, T)`.
    pub fn wrapped(self, dims: [usize; 3]) -> [usize; 3] {
        [
            self.x.rem_euclid(dims[0] as i64) as usize,
            self.y.rem_euclid(dims[1] as i64) as usize,
            self.t.rem_euclid(dims[2] as i64) as usize,
        ]
    }
}

/// `X * Y * T` cells, each owning `spp` points in `[0, 1)^dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTile {
    dims: [usize; 3],
    spp: usize,
    dim: usize,
    seed: u64,
    samples: Vec<f64>,
}

impl SampleTile {
    /// Independent uniform coordinates from the seeded ChaCha8 master stream,
    /// drawn in storage order.
    pub fn init_random(dims: [usize; 3], spp: usize, dim: usize, seed: u64) -> Result<Self, TileError> {
        check_shape(dims, spp, dim)?;
        let mut rng = rng::master(seed);
        let n = dims[0] * dims[1] * dims[2] * spp * dim;
        let samples = (0..n).map(|_| rng.random::<f64>()).collect();
        Ok(Self {
            dims,
            spp,
            dim,
            seed,
            samples,
        })
    }

    /// Builds a tile from explicit cell-major coordinates.
    pub fn from_samples(
        dims: [usize; 3],
        spp: usize,
        dim: usize,
        seed: u64,
        samples: Vec<f64>,
    ) -> Result<Self, TileError> {
        check_shape(dims, spp, dim)?;
        let expected = dims[0] * dims[1] * dims[2] * spp * dim;
        if samples.len() != expected {
            return Err(TileError::InvalidParameter {
                name: "samples",
                reason: format!("expected {expected} coordinates, got {}", samples.len()),
            });
        }
        if let Some(index) = samples.iter().position(|v| !(0.0..1.0).contains(v)) {
            return Err(TileError::OutOfRange {
                index,
                value: samples[index] as f32,
            });
        }
        Ok(Self {
            dims,
            spp,
            dim,
            seed,
            samples,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spp(&self) -> usize {
        self.spp
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cell_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn sample_count(&self) -> usize {
        self.cell_count() * self.spp
    }

    /// All coordinates, cell-major.
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Mutable coordinates. Callers must keep every value in `[0, 1)`.
    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    /// Linear cell index of an already wrapped position.
    #[inline]
    pub fn cell_linear(&self, [x, y, t]: [usize; 3]) -> usize {
        (t * self.dims[1] + y) * self.dims[0] + x
    }

    /// Offset of the first coordinate of `(cell, slot)` in [`Self::samples`].
    #[inline]
    pub fn coord_offset(&self, cell: usize, slot: usize) -> usize {
        (cell * self.spp + slot) * self.dim
    }

    fn cell_range(&self, c: CellIndex) -> std::ops::Range<usize> {
        let start = self.coord_offset(self.cell_linear(c.wrapped(self.dims)), 0);
        start..start + self.spp * self.dim
    }

    /// The `spp` points of the wrapped cell, each a `dim`-slice.
    pub fn samples_in_cell(&self, c: CellIndex) -> Vec<&[f64]> {
        self.samples[self.cell_range(c)].chunks(self.dim).collect()
    }

    /// Mutable view of the wrapped cell's `spp * dim` coordinates.
    pub fn cell_mut(&mut self, c: CellIndex) -> &mut [f64] {
        let r = self.cell_range(c);
        &mut self.samples[r]
    }

    /// One point of a cell.
    pub fn sample(&self, c: CellIndex, slot: usize) -> &[f64] {
        let start = self.coord_offset(self.cell_linear(c.wrapped(self.dims)), slot);
        &self.samples[start..start + self.dim]
    }

    /// Serialized size in bytes.
    pub fn file_len(&self) -> usize {
        HEADER_BYTES + 4 * self.samples.len()
    }

    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<(), TileError> {
        let mut header = Vec::with_capacity(HEADER_BYTES);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.dims[0], self.dims[1], self.dims[2], self.spp, self.dim] {
            let v = u32::try_from(v).map_err(|_| TileError::InvalidParameter {
                name: "dims",
                reason: format!("{v} does not fit in 32 bits"),
            })?;
            header.extend_from_slice(&v.to_le_bytes());
        }
        header.extend_from_slice(&self.seed.to_le_bytes());
        sink.write_all(&header)?;
        let mut payload = Vec::with_capacity(4 * self.samples.len());
        for &v in &self.samples {
            payload.extend_from_slice(&to_unit_f32(v).to_le_bytes());
        }
        sink.write_all(&payload)?;
        sink.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut source: R) -> Result<Self, TileError> {
        let mut header = [0u8; HEADER_BYTES];
        let got = read_full(&mut source, &mut header)?;
        if got >= 8 {
            let magic: [u8; 8] = header[..8].try_into().unwrap();
            if &magic != MAGIC {
                return Err(TileError::MagicMismatch(magic));
            }
        }
        if got < HEADER_BYTES {
            return Err(TileError::Truncated {
                expected: HEADER_BYTES as u64,
                found: got as u64,
            });
        }
        let u32_at = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(TileError::UnsupportedVersion(version));
        }
        let dims = [u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize];
        let spp = u32_at(24) as usize;
        let dim = u32_at(28) as usize;
        let seed = u64::from_le_bytes(header[32..40].try_into().unwrap());
        check_shape(dims, spp, dim)?;

        let count = dims[0] * dims[1] * dims[2] * spp * dim;
        let mut payload = vec![0u8; 4 * count];
        let got = read_full(&mut source, &mut payload)?;
        if got < payload.len() {
            return Err(TileError::Truncated {
                expected: (HEADER_BYTES + payload.len()) as u64,
                found: (HEADER_BYTES + got) as u64,
            });
        }
        let mut probe = [0u8; 1];
        if source.read(&mut probe)? != 0 {
            return Err(TileError::TrailingData);
        }
        let samples: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Self::from_samples(dims, spp, dim, seed, samples)
    }

    /// Coordinates rounded to the 32-bit values a file would hold.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        out.samples
            .iter_mut()
            .for_each(|v| *v = to_unit_f32(*v) as f64);
        out
    }
}

/// Largest `f32` strictly below one.
const F32_BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;

fn to_unit_f32(v: f64) -> f32 {
    (v as f32).min(F32_BELOW_ONE)
}

fn read_full<R: Read>(source: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn check_shape(dims: [usize; 3], spp: usize, dim: usize) -> Result<(), TileError> {
    if dims.contains(&0) {
        return Err(TileError::InvalidParameter {
            name: "dims",
            reason: format!("all of X, Y, T must be positive, got {dims:?}"),
        });
    }
    if spp == 0 {
        return Err(TileError::InvalidParameter {
            name: "spp",
            reason: "must be at least 1".into(),
        });
    }
    if dim == 0 {
        return Err(TileError::InvalidParameter {
            name: "dim",
            reason: "must be at least 1".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn production_tile_counts() {
        let t = SampleTile::init_random([128, 128, 30], 1, 2, 1).unwrap();
        assert_eq!(t.sample_count(), 491_520);
        assert_eq!(t.samples().len(), 983_040);
        assert_eq!(t.file_len(), 40 + 3_932_160);
    }

    #[test]
    fn same_seed_same_tile() {
        let a = SampleTile::init_random([8, 8, 4], 2, 3, 99).unwrap();
        let b = SampleTile::init_random([8, 8, 4], 2, 3, 99).unwrap();
        let c = SampleTile::init_random([8, 8, 4], 2, 3, 100).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_to(&mut ba).unwrap();
        b.write_to(&mut bb).unwrap();
        assert_eq!(ba, bb);
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_mean_per_axis() {
        // 10^6 coordinates per axis; sd of the mean is 1/sqrt(12e6) ~ 2.9e-4.
        let t = SampleTile::init_random([100, 100, 100], 1, 2, 5).unwrap();
        for axis in 0..2 {
            let mean: f64 = t.samples().iter().skip(axis).step_by(2).sum::<f64>() / 1e6;
            assert!((mean - 0.5).abs() < 0.002, "axis {axis}: {mean}");
        }
        assert!(t.samples().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn zero_sizes_are_rejected() {
        assert!(matches!(
            SampleTile::init_random([0, 4, 4], 1, 2, 0),
            Err(TileError::InvalidParameter { name: "dims", .. })
        ));
        assert!(SampleTile::init_random([4, 4, 4], 0, 2, 0).is_err());
        assert!(SampleTile::init_random([4, 4, 4], 1, 0, 0).is_err());
    }

    #[test]
    fn cell_access_wraps() {
        let t = SampleTile::init_random([5, 6, 7], 4, 2, 3).unwrap();
        assert_eq!(t.samples_in_cell(CellIndex::new(0, 0, 0)), t.samples_in_cell(CellIndex::new(5, 6, 7)));
        assert_eq!(t.samples_in_cell(CellIndex::new(-1, -1, -1)), t.samples_in_cell(CellIndex::new(4, 5, 6)));
        assert_eq!(t.samples_in_cell(CellIndex::new(2, 3, 1)).len(), 4);
    }

    #[test]
    fn set_then_get() {
        let mut t = SampleTile::init_random([3, 3, 3], 2, 2, 3).unwrap();
        t.cell_mut(CellIndex::new(4, 1, 2)).copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
        let got = t.samples_in_cell(CellIndex::new(1, 1, 2));
        assert_eq!(got, vec![&[0.1, 0.2][..], &[0.3, 0.4][..]]);
        assert_eq!(t.sample(CellIndex::new(1, 1, -1), 1), &[0.3, 0.4]);
    }

    #[test]
    fn header_layout() {
        let t = SampleTile::init_random([3, 2, 1], 1, 2, 0x0102030405060708).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"STBNTILE");
        assert_eq!(&buf[8..12], &[1, 0, 0, 0]);
        assert_eq!(&buf[12..16], &[3, 0, 0, 0]);
        assert_eq!(&buf[16..20], &[2, 0, 0, 0]);
        assert_eq!(&buf[20..24], &[1, 0, 0, 0]);
        assert_eq!(&buf[24..28], &[1, 0, 0, 0]);
        assert_eq!(&buf[28..32], &[2, 0, 0, 0]);
        assert_eq!(&buf[32..40], &[8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(buf.len(), 40 + 4 * 12);
        let first = f32::from_le_bytes(buf[40..44].try_into().unwrap());
        assert_eq!(first, t.samples()[0] as f32);
    }

    #[test]
    fn read_errors_are_typed() {
        let t = SampleTile::init_random([4, 4, 2], 1, 2, 1).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(SampleTile::read_from(&bad[..]), Err(TileError::MagicMismatch(_))));

        let mut bad = buf.clone();
        bad[8] = 2;
        assert!(matches!(SampleTile::read_from(&bad[..]), Err(TileError::UnsupportedVersion(2))));

        let short = &buf[..buf.len() - 3];
        assert!(matches!(
            SampleTile::read_from(short),
            Err(TileError::Truncated { expected, found }) if expected == buf.len() as u64 && found == buf.len() as u64 - 3
        ));
        assert!(matches!(SampleTile::read_from(&buf[..20]), Err(TileError::Truncated { .. })));

        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(SampleTile::read_from(&long[..]), Err(TileError::TrailingData)));
    }

    #[test]
    fn values_near_one_stay_below_one() {
        let t = SampleTile::from_samples([1, 1, 1], 1, 2, 0, vec![1.0 - 1e-12, 0.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let r = SampleTile::read_from(&buf[..]).unwrap();
        assert!(r.samples()[0] < 1.0);
        assert_eq!(r, t.quantized());
    }

    proptest! {
        #[test]
        fn round_trip_at_f32_precision(x in 1usize..6, y in 1usize..6, t in 1usize..4, spp in 1usize..4, dim in 1usize..4, seed: u64) {
            let tile = SampleTile::init_random([x, y, t], spp, dim, seed).unwrap();
            let mut buf = Vec::new();
            tile.write_to(&mut buf).unwrap();
            prop_assert_eq!(buf.len(), tile.file_len());
            let back = SampleTile::read_from(&buf[..]).unwrap();
            prop_assert_eq!(&back, &tile.quantized());
            let mut again = Vec::new();
            back.write_to(&mut again).unwrap();
            prop_assert_eq!(buf, again);
        }

        #[test]
        fn toroidal_access(x in -50i64..50, y in -50i64..50, t in -50i64..50) {
            let tile = SampleTile::init_random([3, 4, 5], 2, 2, 11).unwrap();
            let a = tile.samples_in_cell(CellIndex::new(x, y, t));
            let b = tile.samples_in_cell(CellIndex::new(x + 3, y + 4, t + 5));
            prop_assert_eq!(a, b);
        }
    }
}
