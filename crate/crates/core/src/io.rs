//! Binary artifact formats. All integers and floats are little-endian.
//!
//! Activation file (`LPAC`):
//!
//! ```text
//! "LPAC" | version u32 | rows u32 | cols u32 | has_labels u8 | 3 zero bytes
//! | rows·cols f32 (row-major) | rows u32 labels (only if has_labels = 1)
//! ```
//!
//! Model file (`LPMD`), one or more records back to back:
//!
//! ```text
//! "LPMD" | version u32 | kind u8 | layer_count u32
//! | per layer: in u32 | out u32 | act u8 | out·in f32 weights | out f32 bias
//! | s u32 | |A_s| u32 | |z| u32 | p f32 | feature_boundary u32 | role u8
//! ```
//!
//! `kind` is 0 for a classifier MLP, 1 for a VAE encoder, 2 for a VAE decoder.
//! A VAE is stored as an encoder record, its decoder record, then its
//! standardizer as `|A_s|` f32 shifts and one f32 scale; a per-class pack as
//! one such VAE per class, in class order.

use std::path::Path;

use serde::Serialize;

use crate::cvae::{Standardizer, UncondVaePack, Vae, VaeArch};
use crate::error::{Error, FormatError, Result};
use crate::models::{ActivationBatch, Dataset, MlpModel, ModelMeta, ModelRole, Provenance};
use crate::numerics::{Activation, DenseLayer, Matrix, Network};

pub const ACTIVATION_MAGIC: [u8; 4] = *b"LPAC";
pub const MODEL_MAGIC: [u8; 4] = *b"LPMD";
pub const FORMAT_VERSION: u32 = 1;
pub const ACTIVATION_HEADER_BYTES: u64 = 20;

type FResult<T> = std::result::Result<T, FormatError>;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: u64) -> FResult<&'a [u8]> {
        if (self.remaining() as u64) < n {
            return Err(FormatError::Truncated {
                expected: self.pos as u64 + n,
                actual: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }

    fn u8(&mut self) -> FResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> FResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> FResult<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: [u8; 4]) -> FResult<()> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    fn version(&mut self) -> FResult<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion {
                found: v,
                supported: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    fn f32s(&mut self, n: u64) -> FResult<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or(FormatError::Inconsistent("length overflow".into()))?,
        )?;
        let v: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(FormatError::Inconsistent(
                "non-finite value in payload".into(),
            ));
        }
        Ok(v)
    }

    fn finish(&self) -> FResult<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes { trailing: n as u64 }),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} = {v} exceeds u32")))
}

/// Serializes a matrix with optional labels.
pub fn encode_activations(features: &Matrix, labels: Option<&[usize]>) -> Result<Vec<u8>> {
    if let Some(l) = labels {
        if l.len() != features.rows() {
            return Err(Error::Shape {
                op: "encode_activations",
                left: features.shape(),
                right: (l.len(), 1),
            });
        }
    }
    let mut out =
        Vec::with_capacity(20 + 4 * features.data().len() + labels.map_or(0, |l| 4 * l.len()));
    out.extend_from_slice(&ACTIVATION_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, to_u32(features.rows(), "rows")?);
    put_u32(&mut out, to_u32(features.cols(), "cols")?);
    out.push(labels.is_some() as u8);
    out.extend_from_slice(&[0; 3]);
    put_f32s(&mut out, features.data());
    if let Some(l) = labels {
        for &v in l {
            put_u32(&mut out, to_u32(v, "label")?);
        }
    }
    Ok(out)
}

/// Exact byte length implied by an activation header.
pub fn activation_file_len(rows: u32, cols: u32, has_labels: bool) -> u64 {
    let rows = rows as u64;
    ACTIVATION_HEADER_BYTES + 4 * rows * cols as u64 + if has_labels { 4 * rows } else { 0 }
}

pub fn decode_activations(buf: &[u8]) -> FResult<(Matrix, Option<Vec<usize>>)> {
    let mut r = Reader::new(buf);
    r.magic(ACTIVATION_MAGIC)?;
    r.version()?;
    let rows = r.u32()?;
    let cols = r.u32()?;
    let flag = r.u8()?;
    let pad = r.take(3)?;
    if flag > 1 {
        return Err(FormatError::Inconsistent(format!(
            "label flag {flag} is not 0 or 1"
        )));
    }
    if pad != [0, 0, 0] {
        return Err(FormatError::Inconsistent("nonzero header padding".into()));
    }
    let expected = activation_file_len(rows, cols, flag == 1);
    let actual = buf.len() as u64;
    if actual < expected {
        return Err(FormatError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(FormatError::TrailingBytes {
            trailing: actual - expected,
        });
    }
    let data = r.f32s(rows as u64 * cols as u64)?;
    let features = Matrix::from_vec(rows as usize, cols as usize, data)
        .map_err(|e| FormatError::Inconsistent(e.to_string()))?;
    let labels = if flag == 1 {
        Some(
            (0..rows)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<FResult<Vec<_>>>()?,
        )
    } else {
        None
    };
    r.finish()?;
    Ok((features, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Classifier,
    Encoder,
    Decoder,
}

impl RecordKind {
    fn code(self) -> u8 {
        match self {
            RecordKind::Classifier => 0,
            RecordKind::Encoder => 1,
            RecordKind::Decoder => 2,
        }
    }

    fn from_code(c: u8) -> FResult<Self> {
        match c {
            0 => Ok(RecordKind::Classifier),
            1 => Ok(RecordKind::Encoder),
            2 => Ok(RecordKind::Decoder),
            _ => Err(FormatError::Inconsistent(format!("unknown model kind {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct RecordMeta {
    classes: u32,
    activation_dim: u32,
    latent_dim: u32,
    prune_fraction: f32,
    feature_boundary: u32,
    role: u8,
}

struct Record {
    kind: RecordKind,
    layers: Vec<DenseLayer>,
    meta: RecordMeta,
}

fn encode_record(
    out: &mut Vec<u8>,
    kind: RecordKind,
    layers: &[DenseLayer],
    meta: RecordMeta,
) -> Result<()> {
    out.extend_from_slice(&MODEL_MAGIC);
    put_u32(out, FORMAT_VERSION);
    out.push(kind.code());
    put_u32(out, to_u32(layers.len(), "layer count")?);
    for l in layers {
        put_u32(out, to_u32(l.inputs(), "layer inputs")?);
        put_u32(out, to_u32(l.outputs(), "layer outputs")?);
        out.push(l.activation.code());
        put_f32s(out, l.weight.data());
        put_f32s(out, &l.bias);
    }
    put_u32(out, meta.classes);
    put_u32(out, meta.activation_dim);
    put_u32(out, meta.latent_dim);
    out.extend_from_slice(&meta.prune_fraction.to_le_bytes());
    put_u32(out, meta.feature_boundary);
    out.push(meta.role);
    Ok(())
}

fn decode_record(r: &mut Reader<'_>) -> FResult<Record> {
    r.magic(MODEL_MAGIC)?;
    r.version()?;
    let kind = RecordKind::from_code(r.u8()?)?;
    let count = r.u32()?;
    let mut layers = Vec::new();
    for i in 0..count {
        let inputs = r.u32()? as usize;
        let outputs = r.u32()? as usize;
        let act = r.u8()?;
        let activation = Activation::from_code(act).ok_or_else(|| {
            FormatError::Inconsistent(format!("layer {i}: unknown activation {act}"))
        })?;
        if let Some(prev) = layers.last().map(DenseLayer::outputs) {
            if prev != inputs {
                return Err(FormatError::Inconsistent(format!(
                    "layer {i} takes {inputs} inputs but layer {} emits {prev}",
                    i - 1
                )));
            }
        }
        let weights = r.f32s(inputs as u64 * outputs as u64)?;
        let bias = r.f32s(outputs as u64)?;
        let weight = Matrix::from_vec(outputs, inputs, weights)
            .map_err(|e| FormatError::Inconsistent(e.to_string()))?;
        layers.push(
            DenseLayer::new(weight, bias, activation)
                .map_err(|e| FormatError::Inconsistent(e.to_string()))?,
        );
    }
    let meta = RecordMeta {
        classes: r.u32()?,
        activation_dim: r.u32()?,
        latent_dim: r.u32()?,
        prune_fraction: r.f32()?,
        feature_boundary: r.u32()?,
        role: r.u8()?,
    };
    Ok(Record { kind, layers, meta })
}

pub fn encode_mlp(model: &MlpModel) -> Result<Vec<u8>> {
    let m = model.meta();
    let mut out = Vec::new();
    encode_record(
        &mut out,
        RecordKind::Classifier,
        model.layers(),
        RecordMeta {
            classes: to_u32(m.num_classes, "classes")?,
            activation_dim: to_u32(m.activation_dim, "activation dim")?,
            latent_dim: 0,
            prune_fraction: m.prune_fraction,
            feature_boundary: to_u32(model.feature_boundary(), "feature boundary")?,
            role: match m.role {
                ModelRole::Deployed => 0,
                ModelRole::Pruned => 1,
            },
        },
    )?;
    Ok(out)
}

pub fn decode_mlp(buf: &[u8]) -> FResult<MlpModel> {
    let mut r = Reader::new(buf);
    let rec = decode_record(&mut r)?;
    r.finish()?;
    if rec.kind != RecordKind::Classifier {
        return Err(FormatError::Inconsistent(format!(
            "expected a classifier record, found {:?}",
            rec.kind
        )));
    }
    let role = match rec.meta.role {
        0 => ModelRole::Deployed,
        1 => ModelRole::Pruned,
        other => return Err(FormatError::Inconsistent(format!("unknown role {other}"))),
    };
    MlpModel::new(
        rec.layers,
        rec.meta.feature_boundary as usize,
        ModelMeta {
            role,
            prune_fraction: rec.meta.prune_fraction,
            num_classes: rec.meta.classes as usize,
            activation_dim: rec.meta.activation_dim as usize,
        },
    )
    .map_err(|e| FormatError::Inconsistent(e.to_string()))
}

fn encode_vae_into(out: &mut Vec<u8>, vae: &Vae) -> Result<()> {
    let a = vae.arch();
    for (kind, net) in [
        (RecordKind::Encoder, vae.encoder()),
        (RecordKind::Decoder, vae.decoder()),
    ] {
        encode_record(
            out,
            kind,
            &net.layers,
            RecordMeta {
                classes: to_u32(a.num_classes, "classes")?,
                activation_dim: to_u32(a.data_dim, "data dim")?,
                latent_dim: to_u32(a.latent_dim, "latent dim")?,
                prune_fraction: 0.0,
                feature_boundary: to_u32(net.layers.len(), "layer count")?,
                role: 0,
            },
        )?;
    }
    put_f32s(out, &vae.standardizer().shift);
    out.extend_from_slice(&vae.standardizer().scale.to_le_bytes());
    Ok(())
}

fn decode_vae_from(r: &mut Reader<'_>) -> FResult<Vae> {
    let enc = decode_record(r)?;
    let dec = decode_record(r)?;
    if enc.kind != RecordKind::Encoder || dec.kind != RecordKind::Decoder {
        return Err(FormatError::Inconsistent(format!(
            "expected encoder then decoder, found {:?} then {:?}",
            enc.kind, dec.kind
        )));
    }
    if enc.meta != dec.meta_with_boundary(enc.meta.feature_boundary) {
        return Err(FormatError::Inconsistent(
            "encoder and decoder metadata disagree".into(),
        ));
    }
    let hidden = |layers: &[DenseLayer]| -> Vec<usize> {
        layers[..layers.len().saturating_sub(1)]
            .iter()
            .map(DenseLayer::outputs)
            .collect()
    };
    let arch = VaeArch {
        data_dim: enc.meta.activation_dim as usize,
        num_classes: enc.meta.classes as usize,
        latent_dim: enc.meta.latent_dim as usize,
        encoder_hidden: hidden(&enc.layers),
        decoder_hidden: hidden(&dec.layers),
    };
    if enc.layers.is_empty() || dec.layers.is_empty() {
        return Err(FormatError::Inconsistent("empty VAE network".into()));
    }
    let standardizer = Standardizer {
        shift: r.f32s(arch.data_dim as u64)?,
        scale: r.f32()?,
    };
    Vae::from_parts(
        arch,
        Network { layers: enc.layers },
        Network { layers: dec.layers },
        standardizer,
    )
    .map_err(|e| FormatError::Inconsistent(e.to_string()))
}

impl Record {
    fn meta_with_boundary(&self, boundary: u32) -> RecordMeta {
        RecordMeta {
            feature_boundary: boundary,
            ..self.meta
        }
    }
}

pub fn encode_vae(vae: &Vae) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_vae_into(&mut out, vae)?;
    Ok(out)
}

pub fn decode_vae(buf: &[u8]) -> FResult<Vae> {
    let mut r = Reader::new(buf);
    let vae = decode_vae_from(&mut r)?;
    r.finish()?;
    Ok(vae)
}

pub fn encode_pack(pack: &UncondVaePack) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for vae in pack.vaes() {
        encode_vae_into(&mut out, vae)?;
    }
    Ok(out)
}

pub fn decode_pack(buf: &[u8]) -> FResult<UncondVaePack> {
    let mut r = Reader::new(buf);
    let mut vaes = Vec::new();
    while r.remaining() > 0 {
        vaes.push(decode_vae_from(&mut r)?);
    }
    UncondVaePack::new(vaes).map_err(|e| FormatError::Inconsistent(e.to_string()))
}

fn read_file(path: &Path, producer: &'static str) -> Result<Vec<u8>> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingInput {
            path: path.to_path_buf(),
            producer,
        }),
        Err(e) => Err(e.into()),
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn save_activations(path: &Path, batch: &ActivationBatch) -> Result<()> {
    write_bytes(
        path,
        &encode_activations(&batch.features, batch.labels.as_deref())?,
    )
}

/// Loads an activation file; `producer` names the command that writes it.
pub fn load_activations(path: &Path, producer: &'static str) -> Result<ActivationBatch> {
    let (features, labels) = decode_activations(&read_file(path, producer)?)?;
    Ok(ActivationBatch {
        features,
        labels,
        provenance: Provenance::Real,
    })
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_bytes(path, &encode_activations(&data.inputs, Some(&data.labels))?)
}

pub fn load_dataset(path: &Path, producer: &'static str) -> Result<Dataset> {
    let (inputs, labels) = decode_activations(&read_file(path, producer)?)?;
    let labels = labels.ok_or_else(|| {
        Error::Format(FormatError::Inconsistent(format!(
            "{} carries no labels",
            path.display()
        )))
    })?;
    Ok(Dataset { inputs, labels })
}

pub fn save_model(path: &Path, model: &MlpModel) -> Result<()> {
    write_bytes(path, &encode_mlp(model)?)
}

pub fn load_model(path: &Path, producer: &'static str) -> Result<MlpModel> {
    Ok(decode_mlp(&read_file(path, producer)?)?)
}

pub fn save_vae(path: &Path, vae: &Vae) -> Result<()> {
    write_bytes(path, &encode_vae(vae)?)
}

pub fn load_vae(path: &Path, producer: &'static str) -> Result<Vae> {
    Ok(decode_vae(&read_file(path, producer)?)?)
}

pub fn save_pack(path: &Path, pack: &UncondVaePack) -> Result<()> {
    write_bytes(path, &encode_pack(pack)?)
}

pub fn load_pack(path: &Path, producer: &'static str) -> Result<UncondVaePack> {
    Ok(decode_pack(&read_file(path, producer)?)?)
}

/// Pretty JSON with a trailing newline.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s =
        serde_json::to_string_pretty(value).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path, producer: &'static str) -> Result<T> {
    let bytes = read_file(path, producer)?;
    serde_json::from_slice(&bytes).map_err(|e| {
        Error::Format(FormatError::Inconsistent(format!(
            "{}: {e}",
            path.display()
        )))
    })
}
