//! Single-file checkpoints: named tensors plus JSON metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::{Dtype, SafeTensors};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::engine::Trainer;

pub const FORMAT: &str = "voxflow-checkpoint";
pub const VERSION: &str = "1";

const PARAM: &str = "param/";
const GEN_OPT: &str = "opt.gen/";
const DISC_OPT: &str = "opt.disc/";

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<usize>, Vec<u8>)> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (Dtype::F64, shape, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        _ => (
            Dtype::F32,
            shape,
            flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
    })
}

fn from_view(view: &safetensors::tensor::TensorView<'_>, device: &Device) -> Result<Tensor> {
    let data = view.data();
    let shape = view.shape().to_vec();
    match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Tensor::from_vec(v, shape, device)?)
        }
        Dtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Tensor::from_vec(v, shape, device)?)
        }
        other => Err(Error::Checkpoint(format!("unsupported tensor type {other:?}"))),
    }
}

/// Decoded checkpoint contents.
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub step: u64,
    pub steps_per_epoch: u64,
    pub optimizer_steps: (u64, u64),
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn save_checkpoint(trainer: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut blobs: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, var) in trainer.model.store.iter() {
        let (dt, shape, bytes) = to_bytes(var.as_tensor())?;
        blobs.push((format!("{PARAM}{name}"), dt, shape, bytes));
    }
    let (gen, disc) = trainer.optimizers();
    let (gen_state, gen_t) = gen.state();
    let (disc_state, disc_t) = disc.state();
    for (prefix, state) in [(GEN_OPT, gen_state), (DISC_OPT, disc_state)] {
        for (name, m, v) in state {
            for (kind, t) in [("m", m), ("v", v)] {
                let (dt, shape, bytes) = to_bytes(&t)?;
                blobs.push((format!("{prefix}{kind}/{name}"), dt, shape, bytes));
            }
        }
    }
    let views = blobs
        .iter()
        .map(|(n, dt, shape, bytes)| Ok((n.clone(), safetensors::tensor::TensorView::new(*dt, shape.clone(), bytes)?)))
        .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let metadata = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("version".to_string(), VERSION.to_string()),
        ("step".to_string(), trainer.step().to_string()),
        ("steps_per_epoch".to_string(), trainer.steps_per_epoch().to_string()),
        ("optimizer_steps".to_string(), format!("{gen_t},{disc_t}")),
        ("model_config".to_string(), json(&trainer.model.cfg)?),
        ("train_config".to_string(), json(trainer.config())?),
    ]);
    let bytes = safetensors::serialize(views, Some(metadata)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn load_checkpoint(path: impl AsRef<Path>, device: &Device) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let info = meta.metadata().clone().ok_or_else(|| bad("missing metadata".into()))?;
    let field = |k: &str| info.get(k).cloned().ok_or_else(|| bad(format!("missing metadata field `{k}`")));
    if field("format")? != FORMAT {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = field("version")?;
    if version != VERSION {
        return Err(bad(format!("checkpoint version {version} is not supported (expected {VERSION})")));
    }
    let num = |k: &str| -> Result<u64> { field(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
    let opt_steps = field("optimizer_steps")?;
    let (g, d) = opt_steps.split_once(',').ok_or_else(|| bad("bad `optimizer_steps`".into()))?;
    let parse = |s: &str| s.parse::<u64>().map_err(|_| bad("bad `optimizer_steps`".into()));
    let model_config = serde_json::from_str(&field("model_config")?).map_err(|e| bad(e.to_string()))?;
    let train_config = serde_json::from_str(&field("train_config")?).map_err(|e| bad(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        tensors.insert(name, from_view(&view, device)?);
    }
    Ok(Checkpoint {
        model_config,
        train_config,
        step: num("step")?,
        steps_per_epoch: num("steps_per_epoch")?,
        optimizer_steps: (parse(g)?, parse(d)?),
        tensors,
    })
}

impl Checkpoint {
    fn apply_params(&self, model: &Model) -> Result<()> {
        let expected = model.store.len();
        let found = self.tensors.keys().filter(|k| k.starts_with(PARAM)).count();
        if found != expected {
            return Err(Error::Checkpoint(format!("checkpoint has {found} parameters, model has {expected}")));
        }
        let mut staged = Vec::with_capacity(expected);
        for (name, var) in model.store.iter() {
            let t = self
                .tensors
                .get(&format!("{PARAM}{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` missing from checkpoint")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!("parameter `{name}` is {:?}, expected {:?}", t.dims(), var.dims())));
            }
            staged.push((name.clone(), t));
        }
        for (name, t) in staged {
            model.store.set(&name, t)?;
        }
        Ok(())
    }

    fn moments(&self, prefix: &str, params: &[(String, candle_core::Var)]) -> Result<Vec<(String, Tensor, Tensor)>> {
        params
            .iter()
            .map(|(name, _)| {
                let get = |kind: &str| {
                    self.tensors
                        .get(&format!("{prefix}{kind}/{name}"))
                        .cloned()
                        .ok_or_else(|| Error::Checkpoint(format!("optimizer state for `{name}` missing")))
                };
                Ok((name.clone(), get("m")?, get("v")?))
            })
            .collect()
    }

    /// Model with the stored parameters, in `dtype`.
    pub fn model(&self, dtype: DType, device: &Device) -> Result<Model> {
        let model = Model::new(self.model_config.clone(), 0, dtype, device)?;
        self.apply_params(&model)?;
        Ok(model)
    }

    /// Trainer state ready to continue from the saved step.
    pub fn trainer(&self, dtype: DType, device: &Device) -> Result<Trainer> {
        let model = self.model(dtype, device)?;
        let gen_moments = self.moments(GEN_OPT, &model.generator_params())?;
        let disc_moments = self.moments(DISC_OPT, &model.discriminator_params())?;
        let mut trainer = Trainer::new(model, self.train_config.clone(), self.steps_per_epoch as usize)?;
        trainer.restore(self.step, (gen_moments, self.optimizer_steps.0), (disc_moments, self.optimizer_steps.1))?;
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::metrics::{read_metrics, MetricsLog};
    use crate::train::testutil::{small_config, small_dataset, trainer};

    #[test]
    fn resume_reproduces_the_unbroken_run() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");

        let mut unbroken = trainer(&ds, DType::F32, small_config());
        let mut reports = Vec::new();
        unbroken.run(&ds, 3, |_, r| {
            reports.push(*r);
            Ok(())
        }).unwrap();

        let mut first = trainer(&ds, DType::F32, small_config());
        first.run(&ds, 2, |_, _| Ok(())).unwrap();
        save_checkpoint(&first, &path).unwrap();
        assert!(!path.with_extension("partial").exists());

        let ckpt = load_checkpoint(&path, &Device::Cpu).unwrap();
        assert_eq!(ckpt.step, 2);
        assert_eq!(ckpt.optimizer_steps, (2, 2));
        assert_eq!(&ckpt.train_config, first.config());
        assert_eq!(ckpt.model_config, first.model.cfg);
        let mut resumed = ckpt.trainer(DType::F32, &Device::Cpu).unwrap();
        let batch = resumed.next_batch(&ds).unwrap();
        assert_eq!(resumed.train_step(&batch).unwrap(), reports[2]);
    }

    fn saved(dir: &Path) -> PathBuf {
        let ds = small_dataset();
        let t = trainer(&ds, DType::F32, small_config());
        let path = dir.join("c.ckpt");
        save_checkpoint(&t, &path).unwrap();
        path
    }

    use std::path::PathBuf;

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = saved(dir.path());
        let bytes = std::fs::read(&path).unwrap();
        for keep in [10, bytes.len() / 2, bytes.len() - 3] {
            std::fs::write(&path, &bytes[..keep]).unwrap();
            assert!(matches!(load_checkpoint(&path, &Device::Cpu), Err(Error::Checkpoint(_))), "{keep}");
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = saved(dir.path());
        let bytes = std::fs::read(&path).unwrap();
        let st = SafeTensors::deserialize(&bytes).unwrap();
        let (_, meta) = SafeTensors::read_metadata(&bytes).unwrap();
        let mut info = meta.metadata().clone().unwrap();
        info.insert("version".into(), "99".into());
        let views: Vec<_> = st.tensors();
        let out = safetensors::serialize(views, Some(info)).unwrap();
        std::fs::write(&path, out).unwrap();
        let err = load_checkpoint(&path, &Device::Cpu).err().unwrap().to_string();
        assert!(err.contains("version 99"), "{err}");
    }

    #[test]
    fn params_must_match_the_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let path = saved(dir.path());
        let mut ckpt = load_checkpoint(&path, &Device::Cpu).unwrap();
        ckpt.model_config.flow_hidden += 1;
        assert!(matches!(ckpt.model(DType::F32, &Device::Cpu), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn metrics_log_round_trips() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut t = trainer(&ds, DType::F32, small_config());
        let mut log = MetricsLog::open(&path, false).unwrap();
        let mut reports = Vec::new();
        t.run(&ds, 2, |_, r| {
            reports.push(*r);
            log.write(r)
        })
        .unwrap();
        assert_eq!(read_metrics(&path).unwrap(), reports);
        let mut again = MetricsLog::open(&path, true).unwrap();
        again.write(&reports[0]).unwrap();
        assert_eq!(read_metrics(&path).unwrap().len(), 3);
    }
}
