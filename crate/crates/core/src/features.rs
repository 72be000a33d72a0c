//! On-disk feature container, utterance manifests and the synthetic corpus
//! generator.
//!
//! A feature file is a 20-byte header followed by an `L × T × D` block of
//! little-endian `f32` values in `[layer][frame][channel]` order:
//!
//! ```text
//! 0..4    magic   b"SVFT"
//! 4..8    version u32 LE (= 1)
//! 8..12   L       u32 LE
//! 12..16  T       u32 LE
//! 16..20  D       u32 LE
//! 20..    payload L·T·D × f32 LE
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MAGIC: [u8; 4] = *b"SVFT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;
/// Frame hop used to synthesize utterance durations.
pub const FRAME_HOP_S: f64 = 0.02;

/// All layers of one utterance, `layers × frames × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    layers: usize,
    frames: usize,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureStack {
    pub fn new(layers: usize, frames: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if layers == 0 || frames == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "feature stack dimensions must be >= 1, got {layers}x{frames}x{dim}"
            )));
        }
        if values.len() != layers * frames * dim {
            return Err(Error::Shape(format!(
                "{} values for a {layers}x{frames}x{dim} stack",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(FeatureStack {
            layers,
            frames,
            dim,
            values,
        })
    }

    /// Builds a stack from 64-bit per-layer frame matrices (rounded to `f32`).
    pub fn from_layers(layers: &[Mat]) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Shape("no layers".into()))?;
        let (t, d) = (first.rows, first.cols);
        let mut values = Vec::with_capacity(layers.len() * t * d);
        for m in layers {
            if m.rows != t || m.cols != d {
                return Err(Error::Shape("layers differ in shape".into()));
            }
            values.extend(m.data.iter().map(|&v| v as f32));
        }
        FeatureStack::new(layers.len(), t, d, values)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Contiguous `frames × dim` slice of one layer.
    pub fn layer(&self, l: usize) -> &[f32] {
        let n = self.frames * self.dim;
        &self.values[l * n..(l + 1) * n]
    }

    pub fn layer_mat(&self, l: usize) -> Mat {
        Mat {
            rows: self.frames,
            cols: self.dim,
            data: self.layer(l).iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn layer_mats(&self) -> Vec<Mat> {
        (0..self.layers).map(|l| self.layer_mat(l)).collect()
    }
}

pub fn write_features(stack: &FeatureStack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(index) = stack.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * stack.values.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    for n in [stack.layers, stack.frames, stack.dim] {
        let n = u32::try_from(n).map_err(|_| Error::Shape("dimension exceeds u32".into()))?;
        bytes.extend_from_slice(&n.to_le_bytes());
    }
    for v in &stack.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parsed header of a feature file: `(layers, frames, dim)`.
pub fn read_header(path: impl AsRef<Path>) -> Result<(usize, usize, usize)> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        let n = file
            .read(&mut header[filled..])
            .map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    let dims = parse_header(path, &header[..filled])?;
    let expected = (HEADER_LEN + 4 * dims.0 * dims.1 * dims.2) as u64;
    let found = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if found < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found,
        });
    }
    Ok(dims)
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            found: magic,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            version,
        });
    }
    let (l, t, d) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    if l == 0 || t == 0 || d == 0 {
        return Err(Error::Shape(format!(
            "{}: header declares empty tensor {l}x{t}x{d}",
            path.display()
        )));
    }
    Ok((l, t, d))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureStack> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (layers, frames, dim) = parse_header(path, &bytes)?;
    let count = layers * frames * dim;
    let expected = (HEADER_LEN + 4 * count) as u64;
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let mut values = Vec::with_capacity(count);
    for (index, chunk) in bytes[HEADER_LEN..HEADER_LEN + 4 * count]
        .chunks_exact(4)
        .enumerate()
    {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::NonFinitePayload {
                path: path.into(),
                index,
            });
        }
        values.push(v);
    }
    Ok(FeatureStack {
        layers,
        frames,
        dim,
        values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub speaker_id: String,
    pub duration_s: f64,
    pub path: String,
}

/// Ordered utterance records; feature paths resolve against `base_dir`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub records: Vec<UtteranceRecord>,
}

impl Manifest {
    /// Validates record-level invariants (unique ids, positive durations,
    /// at least one record). Feature files are not touched.
    pub fn new(base_dir: impl Into<PathBuf>, records: Vec<UtteranceRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Manifest("no utterances".into()));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.utt_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate utt_id {:?}", r.utt_id)));
            }
            if !(r.duration_s > 0.0 && r.duration_s.is_finite()) {
                return Err(Error::Manifest(format!(
                    "utterance {:?} has non-positive duration {}",
                    r.utt_id, r.duration_s
                )));
            }
        }
        Ok(Manifest {
            base_dir: base_dir.into(),
            records,
        })
    }

    /// Reads a manifest CSV and checks that every feature file has a
    /// well-formed header.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let manifest = Self::load_unchecked(path)?;
        manifest.validate_files()?;
        Ok(manifest)
    }

    /// Reads a manifest CSV without opening the referenced feature files.
    pub fn load_unchecked(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        let expected = ["utt_id", "speaker_id", "duration_s", "path"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Manifest(format!(
                "{}: header must be utt_id,speaker_id,duration_s,path",
                path.display()
            )));
        }
        let mut records = Vec::new();
        for row in reader.deserialize() {
            records.push(row.map_err(|e| Error::csv(path, e))?);
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::new(base_dir, records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for r in &self.records {
            writer.serialize(r).map_err(|e| Error::csv(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn validate_files(&self) -> Result<()> {
        for r in &self.records {
            read_header(self.resolve(r))?;
        }
        Ok(())
    }

    pub fn resolve(&self, record: &UtteranceRecord) -> PathBuf {
        self.base_dir.join(&record.path)
    }

    pub fn get(&self, utt_id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.utt_id == utt_id)
    }

    /// Index from utterance id to record position.
    pub fn index(&self) -> BTreeMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.utt_id.as_str(), i))
            .collect()
    }

    /// Distinct speaker ids in sorted order.
    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.records.iter().map(|r| r.speaker_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn load_features(&self, record: &UtteranceRecord) -> Result<FeatureStack> {
        read_features(self.resolve(record))
    }

    /// Identity string used to tag trial lists built from this manifest.
    pub fn identity(&self) -> String {
        format!("{}#{}", self.base_dir.display(), self.records.len())
    }
}

/// Parameters of the synthetic multi-layer corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub layers: usize,
    pub dim: usize,
    pub frames_range: (usize, usize),
    pub speaker_scale: f64,
    pub frame_noise: f64,
    pub layer_mix: Vec<f64>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_speakers == 0 || self.utts_per_speaker == 0 {
            return bad("n_speakers and utts_per_speaker must be >= 1");
        }
        if self.layers == 0 || self.dim == 0 {
            return bad("layers and dim must be >= 1");
        }
        let (lo, hi) = self.frames_range;
        if lo == 0 || lo > hi {
            return bad("frames_range must satisfy 1 <= T_min <= T_max");
        }
        if !(self.speaker_scale >= 0.0 && self.frame_noise >= 0.0)
            || !self.speaker_scale.is_finite()
            || !self.frame_noise.is_finite()
        {
            return bad("speaker_scale and frame_noise must be finite and >= 0");
        }
        if self.layer_mix.len() != self.layers {
            return bad("layer_mix must have one entry per layer");
        }
        if self.layer_mix.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("layer_mix entries must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Writes a synthetic corpus (`manifest.csv` plus `feats/*.svf`) into
/// `out_dir` and returns its manifest.
///
/// Speaker `s` gets a mean vector `m_s ~ N(0, σ_spk² I)`; every frame of
/// layer `l` is `layer_mix[l] · m_s + N(0, σ_frm² I)`. A single ChaCha8
/// stream drives all draws, so the bytes depend only on the spec.
pub fn generate_synthetic_corpus(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let feats = out_dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let speaker_dist = Normal::new(0.0, spec.speaker_scale).expect("validated scale");
    let noise_dist = Normal::new(0.0, spec.frame_noise).expect("validated scale");

    let speaker_means: Vec<Vec<f64>> = (0..spec.n_speakers)
        .map(|_| {
            (0..spec.dim)
                .map(|_| speaker_dist.sample(&mut rng))
                .collect()
        })
        .collect();

    let mut records = Vec::with_capacity(spec.n_speakers * spec.utts_per_speaker);
    for (s, mean) in speaker_means.iter().enumerate() {
        let speaker_id = format!("spk{s:04}");
        for u in 0..spec.utts_per_speaker {
            let utt_id = format!("{speaker_id}_u{u:04}");
            let frames = rng.random_range(spec.frames_range.0..=spec.frames_range.1);
            let mut values = Vec::with_capacity(spec.layers * frames * spec.dim);
            for &mix in &spec.layer_mix {
                for _ in 0..frames {
                    for &m in mean {
                        let v = mix * m + noise_dist.sample(&mut rng);
                        values.push(v as f32);
                    }
                }
            }
            let stack = FeatureStack::new(spec.layers, frames, spec.dim, values)?;
            let rel = format!("feats/{utt_id}.svf");
            write_features(&stack, out_dir.join(&rel))?;
            records.push(UtteranceRecord {
                utt_id,
                speaker_id: speaker_id.clone(),
                duration_s: frames as f64 * FRAME_HOP_S,
                path: rel,
            });
        }
    }
    let manifest = Manifest::new(out_dir, records)?;
    manifest.save(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn smallest_tensor_is_24_bytes() {
        let dir = tmp();
        let p = dir.path().join("a.svf");
        let s = FeatureStack::new(1, 1, 1, vec![0.0]).unwrap();
        write_features(&s, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[0..4], b"SVFT");
        assert_eq!(read_features(&p).unwrap(), s);
    }

    #[test]
    fn nan_rejected_before_writing() {
        assert!(matches!(
            FeatureStack::new(1, 1, 2, vec![0.0, f32::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn distinct_read_errors() {
        let dir = tmp();
        let good = FeatureStack::new(2, 3, 4, (0..24).map(|i| i as f32).collect()).unwrap();
        let p = dir.path().join("g.svf");
        write_features(&good, &p).unwrap();
        let bytes = fs::read(&p).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0..4].copy_from_slice(b"XXXX");
        let q = dir.path().join("m.svf");
        fs::write(&q, &bad_magic).unwrap();
        assert!(matches!(read_features(&q), Err(Error::BadMagic { .. })));

        let mut bad_version = bytes.clone();
        bad_version[4..8].copy_from_slice(&7u32.to_le_bytes());
        fs::write(&q, &bad_version).unwrap();
        assert!(matches!(
            read_features(&q),
            Err(Error::UnsupportedVersion { version: 7, .. })
        ));

        fs::write(&q, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_features(&q), Err(Error::Truncated { .. })));
        assert!(matches!(read_header(&q), Err(Error::Truncated { .. })));

        let mut nan = bytes.clone();
        nan[HEADER_LEN + 8..HEADER_LEN + 12].copy_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(&q, &nan).unwrap();
        assert!(matches!(
            read_features(&q),
            Err(Error::NonFinitePayload { index: 2, .. })
        ));
    }

    #[test]
    fn layer_major_order() {
        let s = FeatureStack::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.layer(1), &[3.0, 4.0]);
    }

    fn spec(seed: u64) -> SynthSpec {
        SynthSpec {
            n_speakers: 3,
            utts_per_speaker: 2,
            layers: 2,
            dim: 3,
            frames_range: (4, 9),
            speaker_scale: 1.0,
            frame_noise: 0.5,
            layer_mix: vec![0.0, 1.0],
            seed,
        }
    }

    fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = vec![(
            "manifest.csv".to_string(),
            fs::read(dir.join("manifest.csv")).unwrap(),
        )];
        let mut names: Vec<_> = fs::read_dir(dir.join("feats"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        for n in names {
            out.push((n.clone(), fs::read(dir.join("feats").join(n)).unwrap()));
        }
        out
    }

    #[test]
    fn synthetic_corpus_is_deterministic() {
        let (a, b) = (tmp(), tmp());
        generate_synthetic_corpus(&spec(7), a.path()).unwrap();
        generate_synthetic_corpus(&spec(7), b.path()).unwrap();
        assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
        let c = tmp();
        generate_synthetic_corpus(&spec(8), c.path()).unwrap();
        assert_ne!(tree_bytes(a.path()), tree_bytes(c.path()));
    }

    #[test]
    fn noiseless_frames_equal_speaker_vector() {
        let dir = tmp();
        let mut s = spec(3);
        s.frame_noise = 0.0;
        s.layer_mix = vec![1.0, 1.0];
        let m = generate_synthetic_corpus(&s, dir.path()).unwrap();
        let reloaded = Manifest::load(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(reloaded.records, m.records);
        let first = m.load_features(&m.records[0]).unwrap();
        let second = m.load_features(&m.records[1]).unwrap();
        let row = &first.layer(0)[..3];
        for chunk in first.values().chunks(3).chain(second.values().chunks(3)) {
            assert_eq!(chunk, row);
        }
        for r in &m.records {
            let st = m.load_features(r).unwrap();
            assert!((r.duration_s - st.frames() as f64 * 0.02).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = spec(1);
        s.frames_range = (9, 4);
        assert!(s.validate().is_err());
        let mut s = spec(1);
        s.layer_mix = vec![0.5, 1.5];
        assert!(s.validate().is_err());
    }

    #[test]
    fn manifest_invariants() {
        let rec = |id: &str, d: f64| UtteranceRecord {
            utt_id: id.into(),
            speaker_id: "s".into(),
            duration_s: d,
            path: "x".into(),
        };
        assert!(Manifest::new(".", vec![rec("a", 1.0), rec("a", 2.0)]).is_err());
        assert!(Manifest::new(".", vec![rec("a", 0.0)]).is_err());
        assert!(Manifest::new(".", vec![]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_bit_exact(
            l in 1usize..4, t in 1usize..6, d in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f32> = (0..l * t * d)
                .map(|_| f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF))
                .collect();
            let s = FeatureStack::new(l, t, d, values).unwrap();
            let dir = tmp();
            let p = dir.path().join("r.svf");
            write_features(&s, &p).unwrap();
            let back = read_features(&p).unwrap();
            let a: Vec<u32> = s.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.values().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!((back.layers(), back.frames(), back.dim()), (l, t, d));
        }
    }
}
