//! JSON checkpoints and atomic file output.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioner::{Encoder, Mlp, MlpConfig};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel, Layer};
use crate::rng;
use crate::scalar::Scalar;
use crate::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    /// Row-major nested rows.
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngRecord {
    pub algorithm: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub config: TrainConfig,
    /// `None` when the run ended on a non-finite loss.
    pub final_nll: Option<f64>,
    pub iterations: usize,
    pub skipped: usize,
    pub unstable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub architecture: FlowConfig,
    /// `None` for the identity encoder.
    pub encoder: Option<MlpConfig>,
    pub actnorm_initialized: Vec<bool>,
    pub parameters: Vec<NamedTensor>,
    pub rng: RngRecord,
    pub training: Option<TrainingMeta>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &FlowModel<T>, seed: u64, training: Option<TrainingMeta>) -> Result<Self> {
        let mut parameters = Vec::new();
        for (name, t) in model.state() {
            if !t.all_finite() {
                return Err(Error::Checkpoint(format!("tensor `{name}` holds non-finite values")));
            }
            parameters.push(NamedTensor {
                shape: t.shape(),
                values: (0..t.rows())
                    .map(|r| t.row_slice(r).iter().map(|v| v.as_f64()).collect())
                    .collect(),
                name,
            });
        }
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            architecture: model.config().clone(),
            encoder: match model.encoder() {
                Encoder::Identity { .. } => None,
                Encoder::Mlp(m) => Some(m.config().clone()),
            },
            actnorm_initialized: model
                .layers()
                .iter()
                .filter_map(|l| match l {
                    Layer::ActNorm(a) => Some(a.initialized),
                    _ => None,
                })
                .collect(),
            parameters,
            rng: RngRecord {
                algorithm: rng::RNG_ALGORITHM.into(),
                seed,
            },
            training,
        })
    }

    /// Rebuilds the model, checking every tensor against the architecture.
    pub fn to_model<T: Scalar>(&self) -> Result<FlowModel<T>> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.rng.algorithm != rng::RNG_ALGORITHM {
            return Err(Error::Checkpoint(format!(
                "rng algorithm `{}` is not supported (expected `{}`)",
                self.rng.algorithm,
                rng::RNG_ALGORITHM
            )));
        }
        let mut scratch = rng::seeded(0);
        let mut model = FlowModel::<T>::new(self.architecture.clone(), &mut scratch)
            .map_err(|e| Error::Checkpoint(format!("architecture: {e}")))?;
        if let Some(cfg) = &self.encoder {
            let enc = Mlp::new(cfg.clone(), &mut scratch)
                .map_err(|e| Error::Checkpoint(format!("encoder: {e}")))?;
            model
                .set_encoder(Encoder::Mlp(enc))
                .map_err(|e| Error::Checkpoint(format!("encoder: {e}")))?;
        }

        let mut stored: BTreeMap<&str, &NamedTensor> = BTreeMap::new();
        for p in &self.parameters {
            if stored.insert(&p.name, p).is_some() {
                return Err(Error::Checkpoint(format!("tensor `{}` appears twice", p.name)));
            }
        }
        let mut expected = Vec::new();
        for (name, slot) in model.state_mut() {
            let Some(p) = stored.remove(name.as_str()) else {
                return Err(Error::Checkpoint(format!("tensor `{name}` is missing")));
            };
            let want = slot.shape();
            let rows_ok = p.values.len() == want[0] && p.values.iter().all(|r| r.len() == want[1]);
            if p.shape != want || !rows_ok {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}`: expected shape {want:?}, found declared {:?} with {} rows of lengths {:?}",
                    p.shape,
                    p.values.len(),
                    p.values.iter().map(Vec::len).collect::<Vec<_>>()
                )));
            }
            for (r, row) in p.values.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    slot.set(r, c, T::lit(v));
                }
            }
            expected.push(name);
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }

        let mut flags = self.actnorm_initialized.iter();
        for layer in model.layers_mut() {
            if let Layer::ActNorm(a) = layer {
                a.initialized = *flags
                    .next()
                    .ok_or_else(|| Error::Checkpoint("actnorm_initialized is too short".into()))?;
            }
        }
        if flags.next().is_some() {
            return Err(Error::Checkpoint("actnorm_initialized is too long".into()));
        }
        // re-run structural validation (mixer invertibility and shapes)
        let (config, layers, encoder) = (
            model.config().clone(),
            model.layers().to_vec(),
            model.encoder().clone(),
        );
        FlowModel::from_parts(config, layers, encoder).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // check the version before the field layout so old files get a clear message
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed document: {e}")))?;
        match value.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "schema version {v} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(Error::Checkpoint("missing schema_version".into())),
        }
        serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("malformed document: {e}")))
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, checkpoint.to_json()?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&std::fs::read_to_string(path)?)
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
