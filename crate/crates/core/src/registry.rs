//! Membrane files, compatibility checks and composition.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! "SPMF" | u32 format_version | u64 manifest_len | manifest (JSON) | payload
//! ```
//!
//! The payload is the concatenation of every tensor listed in the manifest,
//! as row-major `f32`. The manifest comes first so metadata can be read
//! without touching the tensors.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{Applied, Membrane, ModelSignature, SpmLayer, TrainMeta};
use crate::concept::{TextEncoder, Tokenizer};
use crate::diffusion::{denoise_with, standard_normal, NoisePredictor};
use crate::error::{Result, SpmError};
use crate::gating::{gate, GateConfig, GateReport};

pub const MAGIC: &[u8; 4] = b"SPMF";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// One payload tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    /// `layers/<layer_id>/v_sig` or `layers/<layer_id>/v_reg`.
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub name: String,
    pub targets: Vec<String>,
    pub surrogate: String,
    pub train_meta: TrainMeta,
    pub dim: usize,
    pub source_signature: ModelSignature,
    pub signature_digest: String,
    /// RFC 3339 creation time.
    pub created: String,
    /// SHA-256 of the payload, hex.
    pub checksum: String,
    pub tensors: Vec<TensorEntry>,
}

/// Manifest plus payload size: everything about a file except its tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct MembraneFile {
    pub path: PathBuf,
    pub manifest: Manifest,
    pub payload_bytes: u64,
}

impl fmt::Display for MembraneFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.manifest;
        writeln!(f, "file: {}", self.path.display())?;
        writeln!(f, "format_version: {}", m.format_version)?;
        writeln!(f, "name: {}", m.name)?;
        writeln!(f, "targets: {}", m.targets.join(", "))?;
        writeln!(f, "surrogate: {:?}", m.surrogate)?;
        writeln!(
            f,
            "train: eta={} alpha={} lambda={} steps={} seed={} anchor_samples={} la={}",
            m.train_meta.eta,
            m.train_meta.alpha,
            m.train_meta.lambda,
            m.train_meta.steps,
            m.train_meta.seed,
            m.train_meta.anchor_samples,
            m.train_meta.enable_la
        )?;
        writeln!(f, "dim: {}", m.dim)?;
        writeln!(f, "signature: {}", m.signature_digest)?;
        writeln!(f, "created: {}", m.created)?;
        writeln!(f, "checksum: {}", m.checksum)?;
        writeln!(f, "payload_bytes: {}", self.payload_bytes)?;
        writeln!(f, "tensors: {}", m.tensors.len())?;
        for t in &m.tensors {
            writeln!(f, "  {} [{}, {}]", t.name, t.shape[0], t.shape[1])?;
        }
        Ok(())
    }
}

fn tensor_entries(membrane: &Membrane) -> Vec<TensorEntry> {
    membrane
        .layers()
        .iter()
        .flat_map(|l| {
            let id = l.layer_id();
            [
                TensorEntry { name: format!("layers/{id}/v_sig"), shape: [l.v_sig().nrows(), l.v_sig().ncols()] },
                TensorEntry { name: format!("layers/{id}/v_reg"), shape: [l.v_reg().nrows(), l.v_reg().ncols()] },
            ]
        })
        .collect()
}

fn encode_payload(membrane: &Membrane) -> Vec<u8> {
    let mut out = Vec::with_capacity(membrane.parameter_count() * 4);
    for v in membrane.parameters() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Removes the lock file when dropped.
struct WriteLock(PathBuf);

impl WriteLock {
    fn acquire(target: &Path) -> Result<WriteLock> {
        let mut name = target.as_os_str().to_owned();
        name.push(".lock");
        let lock = PathBuf::from(name);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(WriteLock(lock)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(SpmError::Locked(lock.display().to_string())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Writes `membrane` to `path` atomically. Parameters are stored as `f32`.
pub fn save(membrane: &Membrane, path: &Path) -> Result<MembraneFile> {
    if membrane.targets.is_empty() {
        return Err(SpmError::Config(format!("membrane `{}` has no target concepts", membrane.name)));
    }
    let payload = encode_payload(membrane);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: membrane.name.clone(),
        targets: membrane.targets.clone(),
        surrogate: membrane.surrogate.clone(),
        train_meta: membrane.train_meta.clone(),
        dim: membrane.dim(),
        source_signature: membrane.source_signature().clone(),
        signature_digest: membrane.source_signature().digest(),
        created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        checksum: sha256_hex(&payload),
        tensors: tensor_entries(membrane),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    let mut bytes = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);

    let _lock = WriteLock::acquire(path)?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| SpmError::Io(e.error))?;
    Ok(MembraneFile { path: path.to_path_buf(), manifest, payload_bytes: payload.len() as u64 })
}

/// Parses header and manifest from the front of `bytes`, returning the
/// manifest and the payload offset.
fn parse_header(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(SpmError::Truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(SpmError::Malformed("missing SPMF magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version == 0 || version > FORMAT_VERSION {
        return Err(SpmError::Version { found: version, supported: FORMAT_VERSION });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(HEADER_LEN))
        .ok_or_else(|| SpmError::Malformed(format!("manifest length {len}")))?;
    if bytes.len() < end {
        return Err(SpmError::Truncated(format!("manifest needs {len} bytes, {} available", bytes.len() - HEADER_LEN)));
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[HEADER_LEN..end]).map_err(|e| SpmError::Malformed(format!("manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(SpmError::Malformed(format!(
            "header version {version} disagrees with manifest version {}",
            manifest.format_version
        )));
    }
    Ok((manifest, end))
}

fn read_prefix(path: &Path) -> Result<Vec<u8>> {
    let mut f = File::open(path)?;
    let mut header = [0u8; HEADER_LEN];
    let n = read_up_to(&mut f, &mut header)?;
    let mut bytes = header[..n].to_vec();
    if n == HEADER_LEN && &header[..4] == MAGIC {
        let len = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
        let mut rest = Vec::new();
        f.take(len).read_to_end(&mut rest)?;
        bytes.extend(rest);
    }
    Ok(bytes)
}

fn read_up_to(f: &mut File, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match f.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

/// Reads the manifest only.
pub fn inspect(path: &Path) -> Result<MembraneFile> {
    let bytes = read_prefix(path)?;
    let (manifest, offset) = parse_header(&bytes)?;
    let total = fs::metadata(path)?.len();
    Ok(MembraneFile { path: path.to_path_buf(), manifest, payload_bytes: total - offset as u64 })
}

/// Reads and verifies a membrane file.
pub fn load(path: &Path) -> Result<Membrane> {
    let bytes = fs::read(path)?;
    let (manifest, offset) = parse_header(&bytes)?;
    let payload = &bytes[offset..];

    let signature = &manifest.source_signature;
    if signature.digest() != manifest.signature_digest {
        return Err(SpmError::Malformed("signature digest does not match the listed signature".into()));
    }
    let expected: Vec<TensorEntry> = signature
        .layers()
        .iter()
        .flat_map(|s| {
            [
                TensorEntry { name: format!("layers/{}/v_sig", s.layer_id), shape: [s.m, manifest.dim] },
                TensorEntry { name: format!("layers/{}/v_reg", s.layer_id), shape: [manifest.dim, s.fan_in()] },
            ]
        })
        .collect();
    if expected != manifest.tensors {
        return Err(SpmError::Malformed("tensor list does not match the source signature".into()));
    }
    let floats: usize = manifest.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum();
    if payload.len() < floats * 4 {
        return Err(SpmError::Truncated(format!("payload has {} bytes, tensors need {}", payload.len(), floats * 4)));
    }
    if payload.len() > floats * 4 {
        return Err(SpmError::Malformed(format!("{} trailing payload bytes", payload.len() - floats * 4)));
    }
    let actual = sha256_hex(payload);
    if actual != manifest.checksum {
        return Err(SpmError::Checksum { expected: manifest.checksum.clone(), actual });
    }

    let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    let mut take = |rows: usize, cols: usize| Array2::from_shape_fn((rows, cols), |_| values.next().expect("length checked"));
    let mut layers = Vec::with_capacity(signature.layers().len());
    for shape in signature.layers() {
        let v_sig = take(shape.m, manifest.dim);
        let v_reg = take(manifest.dim, shape.fan_in());
        layers.push(SpmLayer::new(shape.clone(), v_sig, v_reg).map_err(|e| SpmError::Malformed(e.to_string()))?);
    }
    Membrane::from_parts(manifest.name, manifest.targets, manifest.surrogate, manifest.train_meta, layers, signature.clone())
}

/// Outcome of a transfer-compatibility check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Compatibility {
    Ok,
    Mismatch(String),
}

impl Compatibility {
    pub fn is_ok(&self) -> bool {
        matches!(self, Compatibility::Ok)
    }
}

impl fmt::Display for Compatibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Compatibility::Ok => write!(f, "ok"),
            Compatibility::Mismatch(r) => write!(f, "mismatch: {r}"),
        }
    }
}

pub fn check_compatibility(membrane: &Membrane, signature: &ModelSignature) -> Compatibility {
    match membrane.source_signature().mismatch(signature) {
        None => Compatibility::Ok,
        Some(report) => Compatibility::Mismatch(report),
    }
}

/// Frozen model plus a set of membranes gated per prompt.
pub struct ComposedModel<'a, M: ?Sized, E: ?Sized> {
    model: &'a M,
    encoder: &'a E,
    membranes: Vec<Membrane>,
    gate: GateConfig,
}

/// Composes `membranes` over `model`; any incompatible membrane aborts.
pub fn compose<'a, M, E>(membranes: Vec<Membrane>, model: &'a M, encoder: &'a E, gate: GateConfig) -> Result<ComposedModel<'a, M, E>>
where
    M: NoisePredictor + ?Sized,
    E: TextEncoder + Tokenizer + ?Sized,
{
    gate.validate()?;
    let signature = model.signature();
    for m in &membranes {
        if let Compatibility::Mismatch(report) = check_compatibility(m, &signature) {
            return Err(SpmError::Incompatible { membrane: m.name.clone(), report });
        }
    }
    Ok(ComposedModel { model, encoder, membranes, gate })
}

impl<'a, M, E> ComposedModel<'a, M, E>
where
    M: NoisePredictor + ?Sized,
    E: TextEncoder + Tokenizer + ?Sized,
{
    pub fn membranes(&self) -> &[Membrane] {
        &self.membranes
    }

    pub fn gate_config(&self) -> &GateConfig {
        &self.gate
    }

    pub fn model(&self) -> &'a M {
        self.model
    }

    pub fn encoder(&self) -> &'a E {
        self.encoder
    }

    /// One report per membrane.
    pub fn gates(&self, prompt: &str) -> Result<Vec<GateReport>> {
        self.membranes.iter().map(|m| gate(m, prompt, self.encoder, self.encoder, &self.gate)).collect()
    }

    fn gammas(&self, prompt: &str) -> Result<Vec<f64>> {
        Ok(self.gates(prompt)?.into_iter().map(|r| r.gamma_scaled).collect())
    }

    fn applied(&self, gammas: &[f64]) -> Vec<Applied<'_>> {
        self.membranes.iter().zip(gammas).map(|(m, &g)| Applied::new(m, g)).collect()
    }

    /// Rows grouped by identical permeabilities, in order of first appearance.
    fn groups(&self, prompts: &[&str]) -> Result<Vec<(Vec<f64>, Vec<usize>)>> {
        let mut by_key: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
        let mut groups: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
        let mut cache: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (i, p) in prompts.iter().enumerate() {
            let gammas = match cache.get(p) {
                Some(g) => g.clone(),
                None => {
                    let g = self.gammas(p)?;
                    cache.insert(p, g.clone());
                    g
                }
            };
            let key: Vec<u64> = gammas.iter().map(|g| g.to_bits()).collect();
            match by_key.get(&key) {
                Some(&gi) => groups[gi].1.push(i),
                None => {
                    by_key.insert(key, groups.len());
                    groups.push((gammas, vec![i]));
                }
            }
        }
        Ok(groups)
    }

    fn predict_grouped(
        &self,
        groups: &[(Vec<f64>, Vec<usize>)],
        x_t: &Array2<f64>,
        cond: &Array2<f64>,
        t: &[usize],
    ) -> Result<Array2<f64>> {
        if groups.len() == 1 {
            return self.model.predict(x_t, cond, t, &self.applied(&groups[0].0));
        }
        let mut out = Array2::zeros(x_t.dim());
        for (gammas, rows) in groups {
            let xs = x_t.select(ndarray::Axis(0), rows);
            let cs = cond.select(ndarray::Axis(0), rows);
            let ts: Vec<usize> = rows.iter().map(|&r| t[r]).collect();
            let eps = self.model.predict(&xs, &cs, &ts, &self.applied(gammas))?;
            for (k, &r) in rows.iter().enumerate() {
                out.row_mut(r).assign(&eps.row(k));
            }
        }
        Ok(out)
    }

    /// Noise prediction with every row gated by its own prompt.
    pub fn predict(&self, x_t: &Array2<f64>, prompts: &[&str], t: &[usize]) -> Result<Array2<f64>> {
        let cond = self.encode(prompts)?;
        let groups = self.groups(prompts)?;
        self.predict_grouped(&groups, x_t, &cond, t)
    }

    fn encode(&self, prompts: &[&str]) -> Result<Array2<f64>> {
        let mut cond = Array2::zeros((prompts.len(), self.model.cond_width()));
        for (i, p) in prompts.iter().enumerate() {
            let e = self.encoder.encode(p)?;
            if e.vector.len() != cond.ncols() {
                return Err(SpmError::Contract(format!(
                    "encoder width {} does not match model conditioning width {}",
                    e.vector.len(),
                    cond.ncols()
                )));
            }
            cond.row_mut(i).assign(&e.vector);
        }
        Ok(cond)
    }

    /// One sample per prompt. With no membranes the random stream, and so the
    /// output, is identical to frozen sampling under the same seed.
    pub fn generate(&self, prompts: &[&str], sampler_steps: usize, seed: u64) -> Result<Array2<f64>> {
        let cond = self.encode(prompts)?;
        let groups = self.groups(prompts)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_t = standard_normal(prompts.len(), self.model.sample_width(), &mut rng);
        let schedule = self.model.schedule();
        let steps = schedule.spaced_timesteps(sampler_steps);
        denoise_with(schedule, x_t, &steps, &mut rng, |x, t| self.predict_grouped(&groups, x, &cond, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{inject, LayerShape};
    use rand::Rng;

    fn trained_like(seed: u64) -> Membrane {
        let sig = ModelSignature::new(vec![LayerShape::new("fc", 4, 3, 1), LayerShape::new("conv", 2, 3, 3)]);
        let mut m = inject(&sig, 2, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = m.parameters().iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
        m.set_parameters(&p).unwrap();
        m.round_to_f32();
        m.name = "red square".into();
        m.targets = vec!["red square".into()];
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.spm");
        let m = trained_like(1);
        let file = save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, m);
        let bits = |m: &Membrane| m.parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
        assert_eq!(inspect(&path).unwrap().manifest, file.manifest);
        assert!(!dir.path().join("m.spm.lock").exists());
    }

    #[test]
    fn corruption_is_reported_distinctly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.spm");
        save(&trained_like(2), &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut flipped = good.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x40;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(load(&path), Err(SpmError::Checksum { .. })));

        let mut future = good.clone();
        future[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        fs::write(&path, &future).unwrap();
        assert!(matches!(load(&path), Err(SpmError::Version { .. })));
        assert!(matches!(inspect(&path), Err(SpmError::Version { .. })));

        fs::write(&path, &good[..good.len() - 5]).unwrap();
        assert!(matches!(load(&path), Err(SpmError::Truncated(_))));
        fs::write(&path, &good[..10]).unwrap();
        assert!(matches!(load(&path), Err(SpmError::Truncated(_))));

        fs::write(&path, b"not a membrane file at all").unwrap();
        assert!(matches!(load(&path), Err(SpmError::Malformed(_))));
    }

    #[test]
    fn held_lock_blocks_writers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.spm");
        let _held = WriteLock::acquire(&path).unwrap();
        assert!(matches!(save(&trained_like(3), &path), Err(SpmError::Locked(_))));
    }

    #[test]
    fn compatibility_reports_first_offending_layer() {
        let m = trained_like(4);
        assert!(check_compatibility(&m, m.source_signature()).is_ok());
        let wider = ModelSignature::new(vec![LayerShape::new("fc", 5, 3, 1), LayerShape::new("conv", 2, 3, 3)]);
        match check_compatibility(&m, &wider) {
            Compatibility::Mismatch(r) => assert!(r.contains("fc"), "{r}"),
            Compatibility::Ok => panic!("widened layer accepted"),
        }
    }

    #[test]
    fn membrane_without_targets_is_not_saved() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = trained_like(5);
        m.targets.clear();
        assert!(matches!(save(&m, &dir.path().join("x.spm")), Err(SpmError::Config(_))));
    }
}
