//! Run-directory writer: collects every emitted file into a manifest, writes
//! JSON/CSV artifacts, raw `f64` maps with 16-bit PGM renders, and tensor
//! binaries through the core serialization format.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use recon_core::io;
use recon_core::tensor::{ImageTensor, KSpaceTensor};
use serde_json::{json, Value};

use crate::CliError;

pub struct RunWriter {
    dir: PathBuf,
    command: &'static str,
    /// (file name, role, volatile). Volatile files hold wall-clock data and
    /// are excluded from byte-identity guarantees.
    entries: Vec<(String, String, bool)>,
}

impl RunWriter {
    pub fn create(dir: &Path, command: &'static str) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            entries: Vec::new(),
        })
    }

    fn register(&mut self, name: &str, role: &str, volatile: bool) {
        self.entries.push((name.to_string(), role.to_string(), volatile));
    }

    pub fn write_json(&mut self, name: &str, value: &Value, role: &str) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value)?;
        fs::write(self.dir.join(name), text + "\n")?;
        self.register(name, role, false);
        Ok(())
    }

    /// Wall-clock data: referenced by the manifest but marked volatile.
    pub fn write_timings(&mut self, value: &Value) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value)?;
        fs::write(self.dir.join("timings.json"), text + "\n")?;
        self.register("timings.json", "wall-clock report (volatile)", true);
        Ok(())
    }

    pub fn write_csv(
        &mut self,
        name: &str,
        header: &str,
        rows: &[String],
        role: &str,
    ) -> Result<(), CliError> {
        let mut out = String::with_capacity(rows.len() * 32 + header.len() + 1);
        out.push_str(header);
        out.push('\n');
        for r in rows {
            out.push_str(r);
            out.push('\n');
        }
        fs::write(self.dir.join(name), out)?;
        self.register(name, role, false);
        Ok(())
    }

    pub fn save_kspace(
        &mut self,
        name: &str,
        s: &KSpaceTensor,
        seed: Option<u64>,
        role: &str,
    ) -> Result<(), CliError> {
        io::save_kspace(&self.dir.join(name), s, seed, role)?;
        self.register(name, role, false);
        self.register(&format!("{name}.json"), &format!("{role} (sidecar)"), false);
        Ok(())
    }

    pub fn save_image(
        &mut self,
        name: &str,
        s: &ImageTensor,
        seed: Option<u64>,
        role: &str,
    ) -> Result<(), CliError> {
        io::save_image(&self.dir.join(name), s, seed, role)?;
        self.register(name, role, false);
        self.register(&format!("{name}.json"), &format!("{role} (sidecar)"), false);
        Ok(())
    }

    /// Raw little-endian `f64` map (row-major) plus a 16-bit grayscale PGM
    /// render scaled to the map's maximum.
    pub fn write_map(&mut self, stem: &str, map: &Array2<f64>, role: &str) -> Result<(), CliError> {
        let raw_name = format!("{stem}.f64");
        let mut bytes = Vec::with_capacity(map.len() * 8 + 16);
        let (nx, ny) = map.dim();
        bytes.extend_from_slice(&(nx as u64).to_le_bytes());
        bytes.extend_from_slice(&(ny as u64).to_le_bytes());
        for v in map.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(self.dir.join(&raw_name), bytes)?;
        self.register(&raw_name, role, false);

        let pgm_name = format!("{stem}.pgm");
        write_pgm(&self.dir.join(&pgm_name), map)?;
        self.register(&pgm_name, &format!("{role} (render)"), false);
        Ok(())
    }

    pub fn write_mask(&mut self, stem: &str, mask: &Array2<bool>, role: &str) -> Result<(), CliError> {
        let map = mask.map(|&b| if b { 1.0 } else { 0.0 });
        self.write_map(stem, &map, role)
    }

    /// Write the manifest; every previously registered file is listed. Call
    /// last so no output is orphaned.
    pub fn finish(mut self) -> Result<(), CliError> {
        self.entries.sort();
        let files: Vec<Value> = self
            .entries
            .iter()
            .map(|(name, role, volatile)| {
                json!({ "name": name, "role": role, "volatile": volatile })
            })
            .collect();
        let manifest = json!({ "command": self.command, "files": files });
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(self.dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

/// 16-bit binary PGM (P5, big-endian samples per the format), linearly scaled
/// so the map maximum maps to full white. Deterministic for identical maps.
fn write_pgm(path: &Path, map: &Array2<f64>) -> Result<(), CliError> {
    let (nx, ny) = map.dim();
    let max = map.iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{ny} {nx}\n65535\n")?;
    let mut data = Vec::with_capacity(nx * ny * 2);
    for x in 0..nx {
        for y in 0..ny {
            let v = (map[[x, y]].max(0.0) * scale).round().min(65535.0) as u16;
            data.extend_from_slice(&v.to_be_bytes());
        }
    }
    f.write_all(&data)?;
    Ok(())
}
