//! Binary model files and the archive directory that ties them together.
//!
//! Every file starts with the magic `MDC1`, a little-endian `u32` format
//! version, a one-byte kind tag and the architecture fingerprint. Parameters
//! are stored as raw little-endian `f64`, so a save/load round trip is exact.
//!
//! An archive directory holds:
//!
//! ```text
//! manifest.txt          key=value lines: version, feature_dim, fingerprint, sha256 per file
//! shared.mdc            shared FC layers, extractor spec, priming state
//! domains/<name>.mdc    adapters, refiner and optimiser state of one domain
//! classifier.mdc        optional domain classifier head
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::adapters::{counting_dims, AdapterModule, DomainModuleSet};
use crate::classifier::DomainClassifierHead;
use crate::features::{ConvLayerSpec, FrozenExtractorSpec, Nonlinearity};
use crate::nn::Dense;
use crate::refiner::{ConvLayer, RefinementNet};
use crate::regressor::{AdagradState, DomainId, DomainSlot, ModelParams, SharedCore, HEAD_WIDTHS};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MDC1";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const SHARED_FILE: &str = "shared.mdc";
pub const CLASSIFIER_FILE: &str = "classifier.mdc";
pub const DOMAINS_DIR: &str = "domains";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
enum Kind {
    Shared = 1,
    Domain = 2,
    Classifier = 3,
}

/// Architecture summary that every file of an archive must agree on.
pub fn fingerprint(feature_dim: usize) -> String {
    let widths: Vec<String> = HEAD_WIDTHS.iter().map(|w| w.to_string()).collect();
    let adapters: Vec<String> = counting_dims(feature_dim)
        .iter()
        .map(|d| d.to_string())
        .collect();
    format!(
        "fc={feature_dim}-{};adapters={};refiner=1-16-16-16-1",
        widths.join("-"),
        adapters.join(",")
    )
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(kind: Kind, feature_dim: usize) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.buf.push(kind as u8);
        w.str(&fingerprint(feature_dim));
        w.u64(feature_dim as u64);
        w
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn f64s<'a>(&mut self, values: impl ExactSizeIterator<Item = &'a f64>) {
        self.u64(values.len() as u64);
        for v in values {
            self.f64(*v);
        }
    }

    fn matrix(&mut self, m: &Array2<f64>) {
        self.u64(m.nrows() as u64);
        self.u64(m.ncols() as u64);
        for v in m.iter() {
            self.f64(*v);
        }
    }

    fn dense(&mut self, d: &Dense) {
        self.matrix(&d.weights);
        self.f64s(d.bias.iter());
    }

    fn adapter(&mut self, m: &AdapterModule) {
        self.f64s(m.gamma.iter());
        self.f64s(m.bn_gain.iter());
        self.f64s(m.bn_bias.iter());
        self.f64s(m.running_mean.iter());
        self.f64s(m.running_var.iter());
        self.f64(m.bn_epsilon);
        self.f64(m.bn_momentum);
    }

    fn optimizer(&mut self, s: &Option<AdagradState>) {
        match s {
            None => self.u8(0),
            Some(s) => {
                self.u8(1);
                self.u64(s.accum.len() as u64);
                for a in &s.accum {
                    self.f64s(a.iter());
                }
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: String,
}

impl<'a> Reader<'a> {
    /// Check the header and return a reader positioned at the payload, plus
    /// the file's feature dimension.
    fn open(buf: &'a [u8], kind: Kind, what: &str) -> Result<(Self, usize)> {
        if buf.len() < 4 || &buf[..4] != MAGIC {
            return Err(Error::Format(format!("{what}: bad magic bytes")));
        }
        let mut r = Reader {
            buf,
            pos: 4,
            what: what.to_string(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let k = r.u8()?;
        if k != kind as u8 {
            return Err(Error::Format(format!(
                "{what}: file kind {k}, expected {}",
                kind as u8
            )));
        }
        let fp = r.str()?;
        let dim = r.len()?;
        if fp != fingerprint(dim) {
            return Err(Error::Fingerprint(format!(
                "{what}: `{fp}` is not a known architecture"
            )));
        }
        Ok((r, dim))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(self.what.clone()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    /// A length field, bounded by the bytes left so corrupt sizes cannot
    /// trigger huge allocations.
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > (self.buf.len() - self.pos) as u64 + (1 << 20) {
            return Err(Error::Format(format!(
                "{}: implausible length {v}",
                self.what
            )));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format(format!("{}: invalid UTF-8 string", self.what)))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Truncated(self.what.clone()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn vector(&mut self, expected: usize) -> Result<Array1<f64>> {
        let v = self.f64s()?;
        if v.len() != expected {
            return Err(Error::Fingerprint(format!(
                "{}: tensor of length {}, expected {expected}",
                self.what,
                v.len()
            )));
        }
        Ok(Array1::from(v))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let (r, c) = (self.len()?, self.len()?);
        if (r, c) != (rows, cols) {
            return Err(Error::Fingerprint(format!(
                "{}: {r}x{c} matrix, expected {rows}x{cols}",
                self.what
            )));
        }
        let bytes = self.take(r * c * 8)?;
        let v = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Ok(Array2::from_shape_vec((r, c), v).expect("checked shape"))
    }

    fn dense(&mut self, fan_in: usize, fan_out: usize) -> Result<Dense> {
        let weights = self.matrix(fan_in, fan_out)?;
        let bias = self.vector(fan_out)?;
        Ok(Dense { weights, bias })
    }

    fn adapter(&mut self, dim: usize) -> Result<AdapterModule> {
        Ok(AdapterModule {
            gamma: self.vector(dim)?,
            bn_gain: self.vector(dim)?,
            bn_bias: self.vector(dim)?,
            running_mean: self.vector(dim)?,
            running_var: self.vector(dim)?,
            bn_epsilon: self.f64()?,
            bn_momentum: self.f64()?,
        })
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("{}: bad flag byte {v}", self.what))),
        }
    }

    fn optimizer(&mut self) -> Result<Option<AdagradState>> {
        if !self.flag()? {
            return Ok(None);
        }
        let n = self.len()?;
        let accum = (0..n).map(|_| self.f64s()).collect::<Result<_>>()?;
        Ok(Some(AdagradState { accum }))
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn write_extractor(w: &mut Writer, spec: &Option<FrozenExtractorSpec>) {
    match spec {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            w.u64(s.in_channels as u64);
            w.u8(match s.nonlinearity {
                Nonlinearity::Relu => 0,
                Nonlinearity::Identity => 1,
            });
            w.u64(s.seed);
            w.u64(s.layers.len() as u64);
            for l in &s.layers {
                w.u64(l.kernel as u64);
                w.u64(l.out_channels as u64);
                w.u64(l.stride as u64);
            }
        }
    }
}

fn read_extractor(r: &mut Reader<'_>) -> Result<Option<FrozenExtractorSpec>> {
    if !r.flag()? {
        return Ok(None);
    }
    let in_channels = r.len()?;
    let nonlinearity = match r.u8()? {
        0 => Nonlinearity::Relu,
        1 => Nonlinearity::Identity,
        v => {
            return Err(Error::Format(format!(
                "{}: unknown nonlinearity tag {v}",
                r.what
            )))
        }
    };
    let seed = r.u64()?;
    let n = r.len()?;
    let layers = (0..n)
        .map(|_| {
            Ok(ConvLayerSpec {
                kernel: r.len()?,
                out_channels: r.len()?,
                stride: r.len()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Some(FrozenExtractorSpec {
        in_channels,
        layers,
        nonlinearity,
        seed,
    }))
}

/// Shared FC layers, extractor spec, priming state and shared optimiser
/// state. Domain slots are not included.
pub fn encode_shared(model: &ModelParams) -> Vec<u8> {
    let mut w = Writer::new(Kind::Shared, model.feature_dim());
    w.u8(model.frozen_shared as u8);
    match &model.primed_domain {
        None => w.u8(0),
        Some(d) => {
            w.u8(1);
            w.str(d.as_str());
        }
    }
    write_extractor(&mut w, &model.extractor);
    for l in &model.shared.layers {
        w.dense(l);
    }
    w.optimizer(&model.shared_optimizer);
    w.buf
}

/// A model with the stored shared state and no domains registered.
pub fn decode_shared(bytes: &[u8], what: &str) -> Result<ModelParams> {
    let (mut r, dim) = Reader::open(bytes, Kind::Shared, what)?;
    let frozen_shared = r.flag()?;
    let primed_domain = if r.flag()? {
        Some(DomainId::new(&r.str()?))
    } else {
        None
    };
    let extractor = read_extractor(&mut r)?;
    let mut fan_in = dim;
    let mut layers = Vec::with_capacity(HEAD_WIDTHS.len());
    for &w in &HEAD_WIDTHS {
        layers.push(r.dense(fan_in, w)?);
        fan_in = w;
    }
    let shared_optimizer = r.optimizer()?;
    r.finish()?;
    Ok(ModelParams {
        shared: SharedCore { layers },
        domains: BTreeMap::new(),
        frozen_shared,
        primed_domain,
        extractor,
        shared_optimizer,
    })
}

fn write_refiner(w: &mut Writer, net: &Option<RefinementNet>) {
    match net {
        None => w.u8(0),
        Some(n) => {
            w.u8(1);
            w.u64(n.layers.len() as u64);
            for l in &n.layers {
                w.u64(l.in_channels as u64);
                w.u64(l.out_channels as u64);
                w.matrix(&l.weights);
                w.f64s(l.bias.iter());
            }
        }
    }
}

fn read_refiner(r: &mut Reader<'_>) -> Result<Option<RefinementNet>> {
    if !r.flag()? {
        return Ok(None);
    }
    let n = r.len()?;
    let layers = (0..n)
        .map(|_| {
            let (cin, cout) = (r.len()?, r.len()?);
            let k2 = crate::refiner::REFINER_KERNEL * crate::refiner::REFINER_KERNEL;
            Ok(ConvLayer {
                in_channels: cin,
                out_channels: cout,
                weights: r.matrix(k2 * cin, cout)?,
                bias: r.vector(cout)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Some(RefinementNet { layers }))
}

pub fn encode_domain(model: &ModelParams, domain: &DomainId) -> Result<Vec<u8>> {
    let slot = model.domain(domain)?;
    let mut w = Writer::new(Kind::Domain, model.feature_dim());
    w.str(domain.as_str());
    w.u64(slot.adapters.modules.len() as u64);
    for m in &slot.adapters.modules {
        w.adapter(m);
    }
    w.optimizer(&slot.optimizer);
    write_refiner(&mut w, &slot.refiner);
    w.optimizer(&slot.refiner_optimizer);
    Ok(w.buf)
}

/// Decode a domain file and register it in `model`, replacing any slot of
/// the same name.
pub fn decode_domain_into(model: &mut ModelParams, bytes: &[u8], what: &str) -> Result<DomainId> {
    let (mut r, dim) = Reader::open(bytes, Kind::Domain, what)?;
    if dim != model.feature_dim() {
        return Err(Error::Fingerprint(format!(
            "{what}: built for feature_dim {dim}, model has {}",
            model.feature_dim()
        )));
    }
    let domain = DomainId::new(&r.str()?);
    let dims = counting_dims(dim);
    if r.len()? != dims.len() {
        return Err(Error::Fingerprint(format!(
            "{what}: wrong number of adapter modules"
        )));
    }
    let modules = dims.iter().map(|&d| r.adapter(d)).collect::<Result<_>>()?;
    let optimizer = r.optimizer()?;
    let refiner = read_refiner(&mut r)?;
    let refiner_optimizer = r.optimizer()?;
    r.finish()?;
    model.domains.insert(
        domain.clone(),
        DomainSlot {
            adapters: DomainModuleSet {
                domain: domain.clone(),
                modules,
            },
            refiner,
            optimizer,
            refiner_optimizer,
        },
    );
    Ok(domain)
}

pub fn encode_classifier(head: &DomainClassifierHead) -> Vec<u8> {
    let mut w = Writer::new(Kind::Classifier, head.feature_dim());
    w.u64(head.domains.len() as u64);
    for d in &head.domains {
        w.str(d.as_str());
    }
    for m in &head.adapters {
        w.adapter(m);
    }
    w.dense(&head.output);
    w.optimizer(&head.optimizer);
    w.buf
}

pub fn decode_classifier(
    bytes: &[u8],
    feature_dim: usize,
    what: &str,
) -> Result<DomainClassifierHead> {
    let (mut r, dim) = Reader::open(bytes, Kind::Classifier, what)?;
    if dim != feature_dim {
        return Err(Error::Fingerprint(format!(
            "{what}: built for feature_dim {dim}, model has {feature_dim}"
        )));
    }
    let k = r.len()?;
    let domains: Vec<DomainId> = (0..k)
        .map(|_| Ok(DomainId::new(&r.str()?)))
        .collect::<Result<_>>()?;
    let adapters = [dim, 256, 128, 64, 64]
        .iter()
        .map(|&d| r.adapter(d))
        .collect::<Result<_>>()?;
    let output = r.dense(64, k)?;
    let optimizer = r.optimizer()?;
    r.finish()?;
    Ok(DomainClassifierHead {
        domains,
        adapters,
        output,
        optimizer,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_shared(model: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_shared(model))
}

pub fn load_shared(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    decode_shared(&read_file(path)?, &path.display().to_string())
}

pub fn save_domain(model: &ModelParams, domain: &DomainId, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_domain(model, domain)?)
}

pub fn load_domain(model: &mut ModelParams, path: impl AsRef<Path>) -> Result<DomainId> {
    let path = path.as_ref();
    decode_domain_into(model, &read_file(path)?, &path.display().to_string())
}

pub fn save_classifier(head: &DomainClassifierHead, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_classifier(head))
}

pub fn load_classifier(path: impl AsRef<Path>, feature_dim: usize) -> Result<DomainClassifierHead> {
    let path = path.as_ref();
    decode_classifier(&read_file(path)?, feature_dim, &path.display().to_string())
}

/// Domain names become file names, so they are restricted to a safe set.
pub fn check_domain_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "domain name `{name}` must be non-empty ASCII letters, digits, '-', '_' or '.'"
        )))
    }
}

pub fn domain_file(dir: &Path, domain: &DomainId) -> PathBuf {
    dir.join(DOMAINS_DIR).join(format!("{domain}.mdc"))
}

/// Parsed `manifest.txt`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub version: u32,
    pub feature_dim: usize,
    pub fingerprint: String,
    /// Relative file path -> sha256 hex, sorted by path.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut s = format!(
            "format_version={}\nfeature_dim={}\nfingerprint={}\n",
            self.version, self.feature_dim, self.fingerprint
        );
        for (f, h) in &self.files {
            s.push_str(&format!("sha256:{f}={h}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let mut feature_dim = None;
        let mut fp = None;
        let mut files = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("manifest line {}: expected key=value", n + 1))
            })?;
            let bad =
                |what: &str| Error::Format(format!("manifest line {}: bad {what} `{v}`", n + 1));
            match k {
                "format_version" => version = Some(v.parse().map_err(|_| bad("version"))?),
                "feature_dim" => feature_dim = Some(v.parse().map_err(|_| bad("feature_dim"))?),
                "fingerprint" => fp = Some(v.to_string()),
                _ => match k.strip_prefix("sha256:") {
                    Some(f) => {
                        files.insert(f.to_string(), v.to_string());
                    }
                    None => {
                        return Err(Error::Format(format!(
                            "manifest line {}: unknown key `{k}`",
                            n + 1
                        )))
                    }
                },
            }
        }
        let missing = |k: &str| Error::Format(format!("manifest is missing `{k}`"));
        Ok(Manifest {
            version: version.ok_or_else(|| missing("format_version"))?,
            feature_dim: feature_dim.ok_or_else(|| missing("feature_dim"))?,
            fingerprint: fp.ok_or_else(|| missing("fingerprint"))?,
            files,
        })
    }
}

/// A model (shared core plus every registered domain) and an optional
/// domain classifier, stored as a directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelArchive {
    pub model: ModelParams,
    pub classifier: Option<DomainClassifierHead>,
}

impl ModelArchive {
    pub fn new(model: ModelParams) -> Self {
        ModelArchive {
            model,
            classifier: None,
        }
    }

    /// Write every component and the manifest. Domain files no longer in the
    /// model are removed so the directory matches the manifest.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Manifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = BTreeMap::new();
        let shared = encode_shared(&self.model);
        write_file(&dir.join(SHARED_FILE), &shared)?;
        files.insert(SHARED_FILE.to_string(), sha256_hex(&shared));
        let ddir = dir.join(DOMAINS_DIR);
        if ddir.is_dir() {
            for entry in fs::read_dir(&ddir).map_err(|e| Error::io(&ddir, e))? {
                let p = entry.map_err(|e| Error::io(&ddir, e))?.path();
                if p.extension().is_some_and(|e| e == "mdc") {
                    fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
        for d in self.model.domains.keys() {
            check_domain_name(d.as_str())?;
            let bytes = encode_domain(&self.model, d)?;
            write_file(&domain_file(dir, d), &bytes)?;
            files.insert(format!("{DOMAINS_DIR}/{d}.mdc"), sha256_hex(&bytes));
        }
        let cpath = dir.join(CLASSIFIER_FILE);
        match &self.classifier {
            Some(head) => {
                let bytes = encode_classifier(head);
                write_file(&cpath, &bytes)?;
                files.insert(CLASSIFIER_FILE.to_string(), sha256_hex(&bytes));
            }
            None if cpath.exists() => fs::remove_file(&cpath).map_err(|e| Error::io(&cpath, e))?,
            None => {}
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            feature_dim: self.model.feature_dim(),
            fingerprint: fingerprint(self.model.feature_dim()),
            files,
        };
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, manifest.render()).map_err(|e| Error::io(&mpath, e))?;
        Ok(manifest)
    }

    /// Load and verify an archive: the manifest must match each file's
    /// header and recorded hash.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest = Manifest::parse(&text)?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Version {
                found: manifest.version,
                expected: FORMAT_VERSION,
            });
        }
        if manifest.fingerprint != fingerprint(manifest.feature_dim) {
            return Err(Error::Fingerprint(format!(
                "manifest fingerprint `{}` does not describe feature_dim {}",
                manifest.fingerprint, manifest.feature_dim
            )));
        }
        let verified = |rel: &str| -> Result<Vec<u8>> {
            let bytes = read_file(&dir.join(rel))?;
            match manifest.files.get(rel) {
                Some(h) if *h == sha256_hex(&bytes) => Ok(bytes),
                Some(_) => Err(Error::Format(format!(
                    "{rel}: content does not match the manifest hash"
                ))),
                None => Err(Error::Format(format!(
                    "{rel} is not listed in the manifest"
                ))),
            }
        };
        let shared = verified(SHARED_FILE)?;
        let mut model = decode_shared(&shared, SHARED_FILE)?;
        if model.feature_dim() != manifest.feature_dim {
            return Err(Error::Fingerprint(format!(
                "manifest says feature_dim {}, {SHARED_FILE} has {}",
                manifest.feature_dim,
                model.feature_dim()
            )));
        }
        let prefix = format!("{DOMAINS_DIR}/");
        for rel in manifest.files.keys().filter(|f| f.starts_with(&prefix)) {
            let bytes = verified(rel)?;
            let d = decode_domain_into(&mut model, &bytes, rel)?;
            if *rel != format!("{DOMAINS_DIR}/{d}.mdc") {
                return Err(Error::Format(format!("{rel} holds domain `{d}`")));
            }
        }
        let classifier = if manifest.files.contains_key(CLASSIFIER_FILE) {
            Some(decode_classifier(
                &verified(CLASSIFIER_FILE)?,
                model.feature_dim(),
                CLASSIFIER_FILE,
            )?)
        } else {
            None
        };
        Ok(ModelArchive { model, classifier })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn busy_model(n: usize, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = ModelParams::new(n, seed)
            .unwrap()
            .with_extractor(FrozenExtractorSpec::with_output_dim(1, n, 3));
        m.frozen_shared = true;
        m.primed_domain = Some(DomainId::new("a"));
        m.shared_optimizer = Some(AdagradState {
            accum: vec![vec![rng.random(); 3], vec![]],
        });
        for name in ["a", "b"] {
            let d = DomainId::new(name);
            m.register_domain(&d);
            let slot = m.domain_mut(&d).unwrap();
            for md in &mut slot.adapters.modules {
                md.gamma.mapv_inplace(|_| rng.random_range(-1.0..1.0));
                md.running_var.mapv_inplace(|_| rng.random_range(0.5..2.0));
            }
            if name == "b" {
                slot.refiner = Some(RefinementNet::new(seed));
                slot.refiner_optimizer = Some(AdagradState {
                    accum: vec![vec![0.25; 4]],
                });
            }
        }
        m
    }

    #[test]
    fn shared_round_trip_is_exact() {
        let m = busy_model(8, 1);
        let back = decode_shared(&encode_shared(&m), "t").unwrap();
        assert_eq!(back.shared, m.shared);
        assert_eq!(back.extractor, m.extractor);
        assert_eq!(back.primed_domain, m.primed_domain);
        assert_eq!(back.shared_optimizer, m.shared_optimizer);
        assert_eq!(encode_shared(&back), encode_shared(&m));
    }

    #[test]
    fn domain_round_trip_reproduces_predictions() {
        let m = busy_model(8, 2);
        let mut fresh = decode_shared(&encode_shared(&m), "t").unwrap();
        for d in ["a", "b"] {
            let bytes = encode_domain(&m, &DomainId::new(d)).unwrap();
            decode_domain_into(&mut fresh, &bytes, d).unwrap();
        }
        assert_eq!(fresh, m);
        let x = Array2::from_shape_fn((5, 8), |(i, j)| (i * 8 + j) as f64 * 0.1);
        let d = DomainId::new("b");
        let (p, q) = (m.predict(&x, &d).unwrap(), fresh.predict(&x, &d).unwrap());
        assert_eq!(
            p.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            q.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn header_errors() {
        let m = busy_model(8, 3);
        let mut bytes = encode_shared(&m);
        bytes[0] = b'X';
        assert!(matches!(decode_shared(&bytes, "t"), Err(Error::Format(_))));
        let mut bytes = encode_shared(&m);
        bytes[4] = 9;
        assert!(matches!(
            decode_shared(&bytes, "t"),
            Err(Error::Version { found: 9, .. })
        ));
        let bytes = encode_shared(&m);
        assert!(matches!(
            decode_shared(&bytes[..bytes.len() - 3], "t"),
            Err(Error::Truncated(_))
        ));
        let dom = encode_domain(&m, &DomainId::new("a")).unwrap();
        let mut other = ModelParams::new(16, 0).unwrap();
        assert!(matches!(
            decode_domain_into(&mut other, &dom, "t"),
            Err(Error::Fingerprint(_))
        ));
        assert!(matches!(decode_shared(&dom, "t"), Err(Error::Format(_))));
    }

    #[test]
    fn archive_round_trip_and_manifest_checks() {
        let dir = tempfile::tempdir().unwrap();
        let m = busy_model(8, 4);
        let mut archive = ModelArchive::new(m);
        archive.classifier = Some(
            DomainClassifierHead::new(8, vec![DomainId::new("a"), DomainId::new("b")], 5).unwrap(),
        );
        let manifest = archive.save(dir.path()).unwrap();
        assert_eq!(manifest.files.len(), 4);
        let back = ModelArchive::load(dir.path()).unwrap();
        assert_eq!(back, archive);

        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap();
        fs::write(&mpath, text.replace("feature_dim=8", "feature_dim=9")).unwrap();
        assert!(matches!(
            ModelArchive::load(dir.path()),
            Err(Error::Fingerprint(_))
        ));
        fs::write(&mpath, &text).unwrap();

        let spath = dir.path().join(SHARED_FILE);
        let mut bytes = fs::read(&spath).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&spath, &bytes).unwrap();
        assert!(matches!(
            ModelArchive::load(dir.path()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn manifest_parse_rejects_unknown_keys() {
        assert!(
            Manifest::parse("format_version=1\nfeature_dim=4\nfingerprint=x\nbogus=1\n").is_err()
        );
        let m = Manifest {
            version: 1,
            feature_dim: 4,
            fingerprint: fingerprint(4),
            files: BTreeMap::from([("shared.mdc".to_string(), "ab".to_string())]),
        };
        assert_eq!(Manifest::parse(&m.render()).unwrap(), m);
    }

    #[test]
    fn domain_names_are_checked() {
        assert!(check_domain_name("cell-like_2").is_ok());
        for bad in ["", "../x", "a b", ".hidden"] {
            assert!(check_domain_name(bad).is_err(), "{bad}");
        }
    }
}
