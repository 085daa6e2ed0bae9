//! Run directories and their manifests.
//!
//! A manifest records the subcommand, seed, replayable arguments, the fully
//! resolved config and SHA-256 hashes of inputs and outputs. It is written
//! when the run directory is created and rewritten with output hashes at the
//! end. Outputs marked volatile (wall-clock timings) are hashed but excluded
//! from reproducibility checks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

pub const TOOL: &str = concat!("pfn ", env!("CARGO_PKG_VERSION"));

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub tool: String,
    pub subcommand: String,
    pub seed: u64,
    /// Arguments after the subcommand, without `--out`.
    pub args: Vec<String>,
    /// `key = value` lines applied on top of the config file, in order.
    pub overrides: Vec<String>,
    pub inputs: Vec<(String, String)>,
    /// `(hash, file name, volatile)`.
    pub outputs: Vec<(String, String, bool)>,
    pub config: String,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("tool = {}\nsubcommand = {}\nseed = {}\n", self.tool, self.subcommand, self.seed);
        for a in &self.args {
            let _ = writeln!(s, "arg = {a}");
        }
        for o in &self.overrides {
            let _ = writeln!(s, "override = {o}");
        }
        for (h, p) in &self.inputs {
            let _ = writeln!(s, "input = {h}  {p}");
        }
        for (h, p, volatile) in &self.outputs {
            let key = if *volatile { "volatile" } else { "output" };
            let _ = writeln!(s, "{key} = {h}  {p}");
        }
        s.push_str("[config]\n");
        s.push_str(&self.config);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        let mut lines = text.lines();
        for line in lines.by_ref() {
            if line == "[config]" {
                break;
            }
            let (k, v) = line
                .split_once(" = ")
                .with_context(|| format!("malformed manifest line '{line}'"))?;
            let hashed = || -> Result<(String, String)> {
                let (h, p) = v.split_once("  ").context("expected '<hash>  <file>'")?;
                Ok((h.to_string(), p.to_string()))
            };
            match k {
                "tool" => m.tool = v.to_string(),
                "subcommand" => m.subcommand = v.to_string(),
                "seed" => m.seed = v.parse().context("manifest seed")?,
                "arg" => m.args.push(v.to_string()),
                "override" => m.overrides.push(v.to_string()),
                "input" => m.inputs.push(hashed()?),
                "output" | "volatile" => {
                    let (h, p) = hashed()?;
                    m.outputs.push((h, p, k == "volatile"));
                }
                other => bail!("unknown manifest key '{other}'"),
            }
        }
        m.config = lines.map(|l| format!("{l}\n")).collect();
        Ok(m)
    }
}

/// Output directory of one run.
pub struct RunDir {
    pub path: PathBuf,
    pub manifest: Manifest,
}

impl RunDir {
    /// Creates `<root>/<subcommand>-<seed>-<utc>` and writes the initial manifest.
    pub fn create(root: &Path, manifest: Manifest) -> Result<Self> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
        let base = format!("{}-{}-{}", manifest.subcommand, manifest.seed, stamp);
        let mut path = root.join(&base);
        let mut k = 1;
        while path.exists() {
            k += 1;
            path = root.join(format!("{base}-{k}"));
        }
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        let run = Self { path, manifest };
        run.write_manifest()?;
        Ok(run)
    }

    fn write_manifest(&self) -> Result<()> {
        let p = self.path.join("manifest.txt");
        fs::write(&p, self.manifest.to_text()).with_context(|| format!("writing {}", p.display()))
    }

    fn record(&mut self, name: &str, bytes: &[u8], volatile: bool) -> Result<()> {
        let p = self.path.join(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        self.manifest.outputs.push((sha256_hex(bytes), name.to_string(), volatile));
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        self.record(name, bytes.as_ref(), false)
    }

    /// Output whose content depends on wall-clock time.
    pub fn write_volatile(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        self.record(name, bytes.as_ref(), true)
    }

    pub fn finish(self) -> Result<PathBuf> {
        self.write_manifest()?;
        Ok(self.path)
    }
}

/// Hash of an input file for the manifest.
pub fn input_entry(path: &Path) -> Result<(String, String)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok((sha256_hex(&bytes), path.display().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            tool: TOOL.into(),
            subcommand: "train".into(),
            seed: 7,
            args: vec!["--seed".into(), "7".into()],
            overrides: vec!["lr = 0.01".into()],
            inputs: vec![("ab".into(), "cfg.txt".into())],
            outputs: vec![("cd".into(), "log.csv".into(), false), ("ef".into(), "timing.csv".into(), true)],
            config: "epochs = 2\nlr = 0.01\n".into(),
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
