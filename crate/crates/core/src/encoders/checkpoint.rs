//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! form and parsed exactly, so `load(save(m)) == m` bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::models::{Affine, CeHead, CeModel, DeModel};
use super::transformer::Encoder;
use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};

pub const FORMAT_VERSION: u32 = 1;

/// Models that can be stored as checkpoints.
pub trait Checkpointable: Serialize + DeserializeOwned {
    const KIND: &'static str;

    fn pooling(&self) -> String;

    /// Named parameter shapes, recorded alongside the arrays and checked on load.
    fn shapes(&self) -> BTreeMap<String, [usize; 2]>;
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope<T> {
    format_version: u32,
    model_kind: String,
    pooling: String,
    shapes: BTreeMap<String, [usize; 2]>,
    params: T,
}

pub(crate) fn encoder_shapes(prefix: &str, e: &Encoder, out: &mut BTreeMap<String, [usize; 2]>) {
    let mut put = |name: String, (r, c): (usize, usize)| {
        out.insert(name, [r, c]);
    };
    put(format!("{prefix}.tok_emb"), e.tok_emb.shape());
    put(format!("{prefix}.seg_emb"), e.seg_emb.shape());
    for (i, b) in e.blocks.iter().enumerate() {
        put(format!("{prefix}.block{i}.wq"), b.wq.shape());
        put(format!("{prefix}.block{i}.wk"), b.wk.shape());
        put(format!("{prefix}.block{i}.wv"), b.wv.shape());
        put(format!("{prefix}.block{i}.w_ff"), b.w_ff.shape());
        put(format!("{prefix}.block{i}.b_ff"), (1, b.b_ff.len()));
    }
    put(format!("{prefix}.w_out"), e.w_out.shape());
    put(format!("{prefix}.b_out"), (1, e.b_out.len()));
}

pub(crate) fn affine_shapes(prefix: &str, a: &Affine, out: &mut BTreeMap<String, [usize; 2]>) {
    let (r, c) = a.w.shape();
    out.insert(format!("{prefix}.w"), [r, c]);
    out.insert(format!("{prefix}.b"), [1, a.b.len()]);
}

impl Checkpointable for Encoder {
    const KIND: &'static str = "encoder";

    fn pooling(&self) -> String {
        format!("{:?}", self.config.pooling)
    }

    fn shapes(&self) -> BTreeMap<String, [usize; 2]> {
        let mut m = BTreeMap::new();
        encoder_shapes("encoder", self, &mut m);
        m
    }
}

impl Checkpointable for DeModel {
    const KIND: &'static str = "dual-encoder";

    fn pooling(&self) -> String {
        format!("{:?}", self.query.config.pooling)
    }

    fn shapes(&self) -> BTreeMap<String, [usize; 2]> {
        let mut m = BTreeMap::new();
        encoder_shapes("query", &self.query, &mut m);
        if let Some(d) = &self.doc {
            encoder_shapes("doc", d, &mut m);
        }
        m
    }
}

impl Checkpointable for CeModel {
    const KIND: &'static str = "cross-encoder";

    fn pooling(&self) -> String {
        match &self.head {
            CeHead::Classification(_) => "FirstToken".to_string(),
            CeHead::DualPool(k) => format!("{k:?}"),
        }
    }

    fn shapes(&self) -> BTreeMap<String, [usize; 2]> {
        let mut m = BTreeMap::new();
        encoder_shapes("encoder", &self.encoder, &mut m);
        if let CeHead::Classification(w) = &self.head {
            m.insert("head.w".to_string(), [1, w.len()]);
        }
        if let Some(d) = &self.decoder {
            affine_shapes("decoder", d, &mut m);
        }
        m
    }
}

/// Serializes `model` into checkpoint JSON bytes.
pub fn to_checkpoint_bytes<T: Checkpointable>(model: &T) -> Result<Vec<u8>> {
    let env = Envelope {
        format_version: FORMAT_VERSION,
        model_kind: T::KIND.to_string(),
        pooling: model.pooling(),
        shapes: model.shapes(),
        params: model,
    };
    Ok(serde_json::to_vec(&env)?)
}

pub fn from_checkpoint_bytes<T: Checkpointable>(bytes: &[u8]) -> Result<T> {
    let env: Envelope<T> = serde_json::from_slice(bytes)?;
    if env.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersion(env.format_version));
    }
    if env.model_kind != T::KIND {
        return Err(Error::invalid(format!(
            "checkpoint holds a {}, expected a {}",
            env.model_kind,
            T::KIND
        )));
    }
    if env.shapes != env.params.shapes() {
        return Err(Error::invalid("checkpoint shapes do not match parameter arrays"));
    }
    Ok(env.params)
}

/// Reads only the `model_kind` field of a checkpoint.
pub fn checkpoint_kind(bytes: &[u8]) -> Result<String> {
    #[derive(Deserialize)]
    struct Peek {
        model_kind: String,
    }
    Ok(serde_json::from_slice::<Peek>(bytes)?.model_kind)
}

pub fn save_checkpoint<T: Checkpointable>(model: &T, path: &Path) -> Result<()> {
    write_atomic(path, &to_checkpoint_bytes(model)?)
}

pub fn load_checkpoint<T: Checkpointable>(path: &Path) -> Result<T> {
    from_checkpoint_bytes(&read_file(path)?)
}
