//! Binary container for labelled particle snapshots.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic  b"LRCD"
//! u32    format version (currently 1)
//! u32    d            spatial dimension
//! u32    n_particles  particles per snapshot
//! u32    n_sample     snapshot count
//! f64    length       box side L
//! u32    kernel kind  0 exponential, 1 screened-Coulomb, 2 mixed
//! f64    mu1, mu2, alpha1, alpha2, delta_min
//! u64    seed
//! ```
//!
//! followed by `n_sample` records of `positions (n*d f64), energy (f64),
//! forces (n*d f64)`. Coordinates are stored wrapped into `[0, L)`; the
//! reader rejects non-finite payloads and malformed headers outright.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LRCD";
pub const FORMAT_VERSION: u32 = 1;

/// Reference interaction kind recorded in a dataset header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    /// Both components decay as `alpha * exp(-mu r)`.
    Exponential,
    /// Both components are periodic screened-Coulomb (Yukawa) potentials.
    ScreenedCoulomb,
    /// Component 1 exponential with `mu1`, component 2 screened-Coulomb
    /// with `mu2`.
    Mixed,
}

impl KernelKind {
    pub fn code(self) -> u32 {
        match self {
            KernelKind::Exponential => 0,
            KernelKind::ScreenedCoulomb => 1,
            KernelKind::Mixed => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(KernelKind::Exponential),
            1 => Ok(KernelKind::ScreenedCoulomb),
            2 => Ok(KernelKind::Mixed),
            other => Err(Error::DatasetFormat(format!(
                "unknown kernel kind code {other}"
            ))),
        }
    }
}

/// Provenance and shape metadata stored ahead of the snapshot records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub d: usize,
    pub n_particles: usize,
    pub n_sample: usize,
    pub length: f64,
    pub kind: KernelKind,
    pub mu1: f64,
    pub mu2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub delta_min: f64,
    pub seed: u64,
}

impl DatasetHeader {
    pub fn domain(&self) -> Result<Domain> {
        Domain::new(self.d, self.length)
    }

    fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.d) {
            return Err(Error::DatasetFormat(format!(
                "dimension must be 1, 2 or 3, got {}",
                self.d
            )));
        }
        if self.n_particles == 0 {
            return Err(Error::DatasetFormat("empty snapshots".into()));
        }
        if !self.length.is_finite() || self.length <= 0.0 {
            return Err(Error::DatasetFormat(format!(
                "box side must be finite and positive, got {}",
                self.length
            )));
        }
        for (name, v) in [
            ("mu1", self.mu1),
            ("mu2", self.mu2),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("delta_min", self.delta_min),
        ] {
            if !v.is_finite() {
                return Err(Error::DatasetFormat(format!("non-finite header field {name}")));
            }
        }
        Ok(())
    }
}

/// One labelled configuration: wrapped positions, total energy and the
/// force on every particle, flattened as `n * d` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub positions: Vec<f64>,
    pub energy: f64,
    pub forces: Vec<f64>,
}

/// An in-memory dataset; `header.n_sample` always equals `snapshots.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub snapshots: Vec<Snapshot>,
}

/// Serializes a dataset. Coordinates are wrapped into `[0, L)` on the way
/// out so files are valid regardless of how positions were produced.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let header = &dataset.header;
    header.validate()?;
    if header.n_sample != dataset.snapshots.len() {
        return Err(Error::DatasetFormat(format!(
            "header announces {} snapshots, got {}",
            header.n_sample,
            dataset.snapshots.len()
        )));
    }
    let dom = header.domain()?;
    let per_snap = header.n_particles * header.d;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(header.d as u32)?;
    w.write_u32::<LittleEndian>(header.n_particles as u32)?;
    w.write_u32::<LittleEndian>(header.n_sample as u32)?;
    w.write_f64::<LittleEndian>(header.length)?;
    w.write_u32::<LittleEndian>(header.kind.code())?;
    for v in [header.mu1, header.mu2, header.alpha1, header.alpha2, header.delta_min] {
        w.write_f64::<LittleEndian>(v)?;
    }
    w.write_u64::<LittleEndian>(header.seed)?;
    for (idx, snap) in dataset.snapshots.iter().enumerate() {
        if snap.positions.len() != per_snap || snap.forces.len() != per_snap {
            return Err(Error::DatasetFormat(format!(
                "snapshot {idx} has {} positions / {} forces, expected {per_snap}",
                snap.positions.len(),
                snap.forces.len()
            )));
        }
        if !snap.energy.is_finite()
            || snap.positions.iter().any(|v| !v.is_finite())
            || snap.forces.iter().any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite(format!("snapshot {idx} payload")));
        }
        for &x in &snap.positions {
            w.write_f64::<LittleEndian>(dom.wrap(x))?;
        }
        w.write_f64::<LittleEndian>(snap.energy)?;
        for &f in &snap.forces {
            w.write_f64::<LittleEndian>(f)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads and fully validates a dataset file.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::DatasetFormat("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::DatasetFormat(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::DatasetFormat(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let d = r.read_u32::<LittleEndian>()? as usize;
    let n_particles = r.read_u32::<LittleEndian>()? as usize;
    let n_sample = r.read_u32::<LittleEndian>()? as usize;
    let length = r.read_f64::<LittleEndian>()?;
    let kind = KernelKind::from_code(r.read_u32::<LittleEndian>()?)?;
    let mu1 = r.read_f64::<LittleEndian>()?;
    let mu2 = r.read_f64::<LittleEndian>()?;
    let alpha1 = r.read_f64::<LittleEndian>()?;
    let alpha2 = r.read_f64::<LittleEndian>()?;
    let delta_min = r.read_f64::<LittleEndian>()?;
    let seed = r.read_u64::<LittleEndian>()?;
    let header = DatasetHeader {
        d,
        n_particles,
        n_sample,
        length,
        kind,
        mu1,
        mu2,
        alpha1,
        alpha2,
        delta_min,
        seed,
    };
    header.validate()?;

    let per_snap = n_particles * d;
    let mut snapshots = Vec::with_capacity(n_sample);
    for idx in 0..n_sample {
        let mut positions = vec![0.0f64; per_snap];
        let mut forces = vec![0.0f64; per_snap];
        r.read_f64_into::<LittleEndian>(&mut positions)
            .map_err(|_| Error::DatasetFormat(format!("truncated positions in snapshot {idx}")))?;
        let energy = r
            .read_f64::<LittleEndian>()
            .map_err(|_| Error::DatasetFormat(format!("truncated energy in snapshot {idx}")))?;
        r.read_f64_into::<LittleEndian>(&mut forces)
            .map_err(|_| Error::DatasetFormat(format!("truncated forces in snapshot {idx}")))?;
        if !energy.is_finite()
            || positions.iter().any(|v| !v.is_finite())
            || forces.iter().any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite(format!("snapshot {idx} payload")));
        }
        if positions.iter().any(|&x| !(0.0..length).contains(&x)) {
            return Err(Error::DatasetFormat(format!(
                "snapshot {idx} has coordinates outside [0, {length})"
            )));
        }
        snapshots.push(Snapshot {
            positions,
            energy,
            forces,
        });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::DatasetFormat("trailing bytes after last snapshot".into()));
    }
    Ok(Dataset { header, snapshots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Seek, SeekFrom};

    fn sample_dataset() -> Dataset {
        let header = DatasetHeader {
            d: 2,
            n_particles: 3,
            n_sample: 2,
            length: 4.0,
            kind: KernelKind::Mixed,
            mu1: 5.0,
            mu2: 0.5,
            alpha1: 0.5,
            alpha2: 0.5,
            delta_min: 0.05,
            seed: 42,
        };
        let snapshots = vec![
            Snapshot {
                positions: vec![0.0, 3.9999999, 1.25, 2.5, 3.0, 0.125],
                energy: -1.5e-308,
                forces: vec![1.0, -0.0, 2.5e17, -3.25, 0.1, 1e-300],
            },
            Snapshot {
                positions: vec![0.5; 6],
                energy: 7.25,
                forces: vec![0.0; 6],
            },
        ];
        Dataset { header, snapshots }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.lrcd");
        let ds = sample_dataset();
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.header, ds.header);
        for (a, b) in back.snapshots.iter().zip(&ds.snapshots) {
            assert_eq!(a.energy.to_bits(), b.energy.to_bits());
            for (x, y) in a.positions.iter().zip(&b.positions) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.forces.iter().zip(&b.forces) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn writer_wraps_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.lrcd");
        let mut ds = sample_dataset();
        ds.snapshots[0].positions[0] = -0.5; // wraps to 3.5
        ds.snapshots[0].positions[1] = 4.0; // wraps to 0.0
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.snapshots[0].positions[0], 3.5);
        assert_eq!(back.snapshots[0].positions[1], 0.0);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.lrcd");
        write_dataset(&path, &sample_dataset()).unwrap();

        let mut f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.write_all(b"NOPE").unwrap();
        drop(f);
        assert!(matches!(read_dataset(&path), Err(Error::DatasetFormat(_))));

        write_dataset(&path, &sample_dataset()).unwrap();
        let mut f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.seek(SeekFrom::Start(4)).unwrap();
        f.write_all(&9u32.to_le_bytes()).unwrap();
        drop(f);
        assert!(matches!(read_dataset(&path), Err(Error::DatasetFormat(_))));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.lrcd");
        write_dataset(&path, &sample_dataset()).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::DatasetFormat(_))));

        let mut extended = bytes.clone();
        extended.push(0);
        std::fs::write(&path, &extended).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::DatasetFormat(_))));
    }

    #[test]
    fn rejects_non_finite_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.lrcd");
        let mut ds = sample_dataset();
        ds.snapshots[1].forces[2] = f64::NAN;
        assert!(matches!(write_dataset(&path, &ds), Err(Error::NonFinite(_))));

        // Patch a NaN into an otherwise valid file: reader must reject it.
        let ds = sample_dataset();
        write_dataset(&path, &ds).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let header_len = 4 + 4 + 3 * 4 + 8 + 4 + 5 * 8 + 8;
        let energy_off = header_len + 6 * 8;
        bytes[energy_off..energy_off + 8].copy_from_slice(&f64::INFINITY.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_shape_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.lrcd");
        let mut ds = sample_dataset();
        ds.snapshots[0].forces.pop();
        assert!(matches!(write_dataset(&path, &ds), Err(Error::DatasetFormat(_))));

        let mut ds = sample_dataset();
        ds.header.n_sample = 5;
        assert!(matches!(write_dataset(&path, &ds), Err(Error::DatasetFormat(_))));
    }
}
