//! Tensor persistence: header-less little-endian binary of interleaved
//! (re, im) 64-bit floats in x-fastest order, plus a JSON sidecar describing
//! shape, domain, and provenance. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{C64, Domain, ImageTensor, KSpaceTensor};

/// JSON sidecar stored next to the binary payload.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorSidecar {
    /// `[nx, ny, c]`
    pub shape: [usize; 3],
    pub domain: Domain,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub description: String,
}

fn sidecar_path(bin: &Path) -> PathBuf {
    let mut p = bin.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub(crate) fn write_raw(path: &Path, data: &Array3<C64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    // x-fastest: y is the slower spatial index, channel slowest
    let (nx, ny, nc) = data.dim();
    for c in 0..nc {
        for y in 0..ny {
            for x in 0..nx {
                let z = data[[x, y, c]];
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_raw(path: &Path, shape: [usize; 3]) -> Result<Array3<C64>> {
    let [nx, ny, nc] = shape;
    let expected = nx * ny * nc * 16;
    let mut buf = Vec::with_capacity(expected);
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    if buf.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "{} holds {} bytes but sidecar shape {shape:?} needs {expected}",
            path.display(),
            buf.len()
        )));
    }
    let mut data = Array3::zeros((nx, ny, nc));
    let mut it = buf.chunks_exact(8);
    for c in 0..nc {
        for y in 0..ny {
            for x in 0..nx {
                let re = f64::from_le_bytes(it.next().unwrap().try_into().unwrap());
                let im = f64::from_le_bytes(it.next().unwrap().try_into().unwrap());
                data[[x, y, c]] = C64::new(re, im);
            }
        }
    }
    Ok(data)
}

fn save(
    path: &Path,
    data: &Array3<C64>,
    domain: Domain,
    seed: Option<u64>,
    description: &str,
) -> Result<()> {
    let (nx, ny, nc) = data.dim();
    let sidecar = TensorSidecar {
        shape: [nx, ny, nc],
        domain,
        dtype: "c128".into(),
        seed,
        description: description.into(),
    };
    write_raw(path, data)?;
    serde_json::to_writer_pretty(
        BufWriter::new(File::create(sidecar_path(path))?),
        &sidecar,
    )?;
    Ok(())
}

/// Read the sidecar for a tensor file.
pub fn load_sidecar(path: &Path) -> Result<TensorSidecar> {
    let sc: TensorSidecar =
        serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
    if sc.dtype != "c128" {
        return Err(Error::InvalidArgument(format!(
            "unsupported dtype {:?} in {}",
            sc.dtype,
            sidecar_path(path).display()
        )));
    }
    Ok(sc)
}

pub fn save_kspace(
    path: &Path,
    s: &KSpaceTensor,
    seed: Option<u64>,
    description: &str,
) -> Result<()> {
    save(path, s.data(), Domain::KSpace, seed, description)
}

pub fn save_image(
    path: &Path,
    s: &ImageTensor,
    seed: Option<u64>,
    description: &str,
) -> Result<()> {
    save(path, s.data(), Domain::Image, seed, description)
}

pub fn load_kspace(path: &Path) -> Result<(KSpaceTensor, TensorSidecar)> {
    let sc = load_sidecar(path)?;
    if sc.domain != Domain::KSpace {
        return Err(Error::InvalidArgument(format!(
            "{} is declared {:?}, expected k-space",
            path.display(),
            sc.domain
        )));
    }
    Ok((KSpaceTensor::new(read_raw(path, sc.shape)?)?, sc))
}

pub fn load_image(path: &Path) -> Result<(ImageTensor, TensorSidecar)> {
    let sc = load_sidecar(path)?;
    if sc.domain != Domain::Image {
        return Err(Error::InvalidArgument(format!(
            "{} is declared {:?}, expected image",
            path.display(),
            sc.domain
        )));
    }
    Ok((ImageTensor::new(read_raw(path, sc.shape)?)?, sc))
}
