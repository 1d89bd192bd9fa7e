//! Model checkpoints and generic named tensor blocks.
//!
//! Checkpoint layout: magic "GTO1", a u64-length-prefixed manifest of
//! `key=value` lines (model configuration, optimizer step, provenance),
//! then a sequence of tensor records to end of file:
//!
//! ```text
//! name_len u32 | name bytes | rows u64 | cols u64 | rows*cols f32 LE
//! ```
//!
//! Optimizer moments ride along as reserved `opt.m.*` / `opt.v.*` records so
//! resumed training continues the step counter. The same record format with
//! magic "GTOB" carries attention dumps for the inspect command.

use crate::error::{CliError, Result};
use gto_core::encoder::NodeTypeEncoding;
use gto_core::model::{Mode, ModelConfig, ModelParams};
use gto_core::tape::Activation;
use gto_core::tensor::Tensor;
use gto_core::train::OptimizerState;
use gto_core::Real;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"GTO1";
pub const BLOCK_MAGIC: &[u8; 4] = b"GTOB";

#[derive(Clone, Debug, Default)]
pub struct Manifest(pub BTreeMap<String, String>);

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| CliError::Config(format!("checkpoint manifest misses {key}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| CliError::Config(format!("bad manifest value for {key}")))
    }

    fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.0 {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    fn from_text(text: &str) -> Result<Manifest> {
        let mut map = BTreeMap::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("bad manifest line {line:?}")))?;
            map.insert(k.to_string(), v.to_string());
        }
        Ok(Manifest(map))
    }
}

pub fn config_manifest(config: &ModelConfig) -> Manifest {
    let mut m = Manifest::default();
    m.set("mode", config.mode.name());
    m.set("dim", config.dim);
    m.set("in_channels", config.in_channels);
    m.set("out_channels", config.out_channels);
    m.set("global_dim", config.global_dim);
    m.set("latent", config.latent);
    m.set("blocks", config.blocks);
    m.set("queries", config.queries);
    m.set("heads", config.heads);
    m.set("spe_bands", config.spe_bands);
    m.set("edge_ratio", config.edge_ratio);
    m.set("activation", config.activation.name());
    m.set(
        "node_type_encoding",
        match config.node_type_encoding {
            NodeTypeEncoding::Scalar => "scalar",
            NodeTypeEncoding::OneHot => "onehot",
        },
    );
    m
}

pub fn config_from_manifest(m: &Manifest) -> Result<ModelConfig> {
    let mode = Mode::parse(m.get("mode")?)?;
    let mut config = ModelConfig::new(
        mode,
        m.parse("dim")?,
        m.parse("in_channels")?,
        m.parse("out_channels")?,
        m.parse("global_dim")?,
    );
    config.latent = m.parse("latent")?;
    config.blocks = m.parse("blocks")?;
    config.queries = m.parse("queries")?;
    config.heads = m.parse("heads")?;
    config.spe_bands = m.parse("spe_bands")?;
    config.edge_ratio = m.parse("edge_ratio")?;
    config.activation = Activation::parse(m.get("activation")?)?;
    config.node_type_encoding = match m.get("node_type_encoding")? {
        "scalar" => NodeTypeEncoding::Scalar,
        "onehot" => NodeTypeEncoding::OneHot,
        other => return Err(CliError::Config(format!("unknown node encoding {other}"))),
    };
    config.validate()?;
    Ok(config)
}

fn write_record<W: Write>(w: &mut W, name: &str, rows: usize, cols: usize, data: impl Iterator<Item = f32>) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    for x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn tensor_record<W: Write, R: Real>(w: &mut W, name: &str, t: &Tensor<R>) -> std::io::Result<()> {
    write_record(
        w,
        name,
        t.rows(),
        t.cols(),
        t.data().iter().map(|x| x.into_f64() as f32),
    )
}

/// Save parameters (values stored as 32-bit) plus optional optimizer state.
pub fn save_checkpoint<R: Real>(
    path: &Path,
    params: &ModelParams<R>,
    optimizer: Option<&OptimizerState<R>>,
    extra: &[(String, String)],
) -> Result<()> {
    let mut manifest = config_manifest(&params.config);
    for (k, v) in extra {
        manifest.set(k, v);
    }
    if let Some(opt) = optimizer {
        manifest.set("opt_step", opt.step);
        manifest.set("opt_skipped", opt.skipped);
    }
    let text = manifest.to_text();

    let handle = std::fs::File::create(path).map_err(CliError::io(path.display().to_string()))?;
    let mut w = std::io::BufWriter::new(handle);
    let ioerr = CliError::io(path.display().to_string());
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(text.len() as u64).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        let mut out: std::io::Result<()> = Ok(());
        params.visit(&mut |name, t, _| {
            if out.is_ok() {
                out = tensor_record(&mut w, &name, t);
            }
        });
        out?;
        if let Some(opt) = optimizer {
            let names: Vec<String> = {
                let mut v = Vec::new();
                params.visit(&mut |name, _, trainable| {
                    if trainable {
                        v.push(name);
                    }
                });
                v
            };
            for (k, name) in names.iter().enumerate() {
                tensor_record(&mut w, &format!("opt.m.{name}"), &opt.m[k])?;
                tensor_record(&mut w, &format!("opt.v.{name}"), &opt.v[k])?;
            }
        }
        w.flush()
    })()
    .map_err(ioerr)?;
    Ok(())
}

fn read_records(path: &Path, expect_magic: &[u8; 4]) -> Result<(String, Vec<(String, Tensor<f32>)>)> {
    let bytes = std::fs::read(path).map_err(CliError::io(path.display().to_string()))?;
    let fail = |offset: u64, what: &str| CliError::Parse {
        path: path.display().to_string(),
        offset,
        what: what.to_string(),
    };
    if bytes.len() < 4 || &bytes[..4] != expect_magic {
        return Err(fail(0, "bad magic"));
    }
    let mut at = 4usize;
    let mut take = |n: usize, at: &mut usize| -> Result<&[u8]> {
        if *at + n > bytes.len() {
            return Err(fail(*at as u64, "truncated file"));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let manifest = if expect_magic == MAGIC {
        let len = u64::from_le_bytes(take(8, &mut at)?.try_into().unwrap()) as usize;
        let text = take(len, &mut at)?;
        String::from_utf8(text.to_vec()).map_err(|_| fail(12, "manifest is not utf-8"))?
    } else {
        String::new()
    };
    let mut records = Vec::new();
    while at < bytes.len() {
        let name_len = u32::from_le_bytes(take(4, &mut at)?.try_into().unwrap()) as usize;
        if name_len > 4096 {
            return Err(fail(at as u64, "implausible record name length"));
        }
        let name = String::from_utf8(take(name_len, &mut at)?.to_vec())
            .map_err(|_| fail(at as u64, "record name is not utf-8"))?;
        let rows = u64::from_le_bytes(take(8, &mut at)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(8, &mut at)?.try_into().unwrap()) as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| fail(at as u64, "record size overflow"))?;
        let mut data = Vec::with_capacity(count);
        let raw = take(count * 4, &mut at)?;
        for ch in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(ch.try_into().unwrap()));
        }
        records.push((
            name,
            Tensor::from_vec(rows, cols, data).map_err(|e| fail(at as u64, &e.to_string()))?,
        ));
    }
    Ok((manifest, records))
}

pub struct LoadedCheckpoint<R: Real> {
    pub params: ModelParams<R>,
    pub optimizer: Option<OptimizerState<R>>,
    pub manifest: Manifest,
}

pub fn load_checkpoint<R: Real>(path: &Path) -> Result<LoadedCheckpoint<R>> {
    let (manifest_text, records) = read_records(path, MAGIC)?;
    let manifest = Manifest::from_text(&manifest_text)?;
    let config = config_from_manifest(&manifest)?;

    // Stats channel widths are derivable from the configuration, so start
    // from placeholder statistics and overwrite every tensor from the file.
    let stats = gto_core::encoder::NormStats {
        field_mean: Tensor::zeros(1, config.in_channels),
        field_std: Tensor::filled(1, config.in_channels, R::one()),
        global_mean: Tensor::zeros(1, config.global_dim + 1),
        global_std: Tensor::filled(1, config.global_dim + 1, R::one()),
        target_mean: Tensor::zeros(1, config.out_channels),
        target_std: Tensor::filled(1, config.out_channels, R::one()),
    };
    let mut params = ModelParams::<R>::init(config, stats, 0)?;

    let map: BTreeMap<String, Tensor<f32>> = records.into_iter().collect();
    let mut missing = Vec::new();
    params.visit_mut(&mut |name, t, _| match map.get(&name) {
        Some(src) if src.shape() == t.shape() => {
            *t = src.cast::<R>();
        }
        Some(src) => missing.push(format!(
            "{name}: shape {:?} vs stored {:?}",
            t.shape(),
            src.shape()
        )),
        None => missing.push(format!("{name}: missing")),
    });
    if !missing.is_empty() {
        return Err(CliError::Config(format!(
            "checkpoint does not match its configuration: {}",
            missing.join("; ")
        )));
    }

    let optimizer = if manifest.0.contains_key("opt_step") {
        let mut names = Vec::new();
        params.visit(&mut |name, _, trainable| {
            if trainable {
                names.push(name);
            }
        });
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for name in &names {
            let mk = map
                .get(&format!("opt.m.{name}"))
                .ok_or_else(|| CliError::Config(format!("missing optimizer moment for {name}")))?;
            let vk = map
                .get(&format!("opt.v.{name}"))
                .ok_or_else(|| CliError::Config(format!("missing optimizer moment for {name}")))?;
            m.push(mk.cast::<R>());
            v.push(vk.cast::<R>());
        }
        let mut state = OptimizerState {
            m,
            v,
            step: manifest.parse("opt_step")?,
            skipped: manifest.parse("opt_skipped").unwrap_or(0),
            hyper: Default::default(),
        };
        // Shape sanity against the freshly built parameters.
        let flat = params.trainable_tensors();
        for ((_, p), mm) in flat.iter().zip(&state.m) {
            if p.shape() != mm.shape() {
                return Err(CliError::Config("optimizer moment shape mismatch".into()));
            }
        }
        state.hyper = Default::default();
        Some(state)
    } else {
        None
    };

    Ok(LoadedCheckpoint {
        params,
        optimizer,
        manifest,
    })
}

/// Plain named tensor blocks (attention dumps and similar artifacts).
pub fn write_blocks(path: &Path, blocks: &[(String, Tensor<f32>)]) -> Result<()> {
    let handle = std::fs::File::create(path).map_err(CliError::io(path.display().to_string()))?;
    let mut w = std::io::BufWriter::new(handle);
    let ioerr = CliError::io(path.display().to_string());
    (|| -> std::io::Result<()> {
        w.write_all(BLOCK_MAGIC)?;
        for (name, t) in blocks {
            tensor_record(&mut w, name, t)?;
        }
        w.flush()
    })()
    .map_err(ioerr)?;
    Ok(())
}

pub fn read_blocks(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let (_, records) = read_records(path, BLOCK_MAGIC)?;
    Ok(records)
}

// Allow Read to be unused on some toolchains that inline fs::read.
#[allow(unused)]
fn _uses_read<T: Read>(_: T) {}

#[cfg(test)]
mod tests {
    use super::*;
    use gto_core::model::ModelConfig;

    fn toy_params() -> ModelParams<f32> {
        let mut config = ModelConfig::new(Mode::Transient, 2, 1, 1, 1);
        config.latent = 8;
        config.blocks = 2;
        config.queries = 4;
        config.heads = 2;
        config.spe_bands = 1;
        let stats = gto_core::encoder::NormStats {
            field_mean: Tensor::from_vec(1, 1, vec![0.25]).unwrap(),
            field_std: Tensor::from_vec(1, 1, vec![1.5]).unwrap(),
            global_mean: Tensor::from_vec(1, 2, vec![0.1, 0.2]).unwrap(),
            global_std: Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap(),
            target_mean: Tensor::from_vec(1, 1, vec![-0.05]).unwrap(),
            target_std: Tensor::from_vec(1, 1, vec![0.4]).unwrap(),
        };
        ModelParams::init(config, stats, 11).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gto");
        let params = toy_params();
        let tensors = params.trainable_tensors();
        let flat: Vec<Tensor<f32>> = tensors.into_iter().map(|(_, t)| t).collect();
        let mut opt = OptimizerState::new(&flat);
        opt.step = 42;
        save_checkpoint(&path, &params, Some(&opt), &[("epochs_done".into(), "7".into())]).unwrap();

        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.manifest.get("epochs_done").unwrap(), "7");
        assert_eq!(loaded.optimizer.as_ref().unwrap().step, 42);

        // Bit-exact file round trip.
        let path2 = dir.path().join("model2.gto");
        save_checkpoint(
            &path2,
            &loaded.params,
            loaded.optimizer.as_ref(),
            &[("epochs_done".into(), "7".into())],
        )
        .unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        // And the tensors match in memory.
        let mut a = Vec::new();
        params.visit(&mut |n, t, _| a.push((n, t.clone())));
        let mut b = Vec::new();
        loaded.params.visit(&mut |n, t, _| b.push((n, t.clone())));
        assert_eq!(a, b);
    }

    #[test]
    fn f64_round_trip_preserves_f32_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gto");
        let params = toy_params();
        save_checkpoint(&path, &params, None, &[]).unwrap();
        let as64 = load_checkpoint::<f64>(&path).unwrap();
        let path2 = dir.path().join("model64.gto");
        save_checkpoint(&path2, &as64.params, None, &[]).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.gto");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(CliError::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn block_dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.gtob");
        let blocks = vec![
            ("layer0.head0".to_string(), Tensor::from_fn(2, 3, |i, j| (i * 3 + j) as f32)),
            ("corr".to_string(), Tensor::from_fn(2, 2, |i, j| (i == j) as u8 as f32)),
        ];
        write_blocks(&path, &blocks).unwrap();
        let back = read_blocks(&path).unwrap();
        assert_eq!(back, blocks);
    }
}
