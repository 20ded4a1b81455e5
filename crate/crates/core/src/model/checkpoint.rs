//! Checkpoint file: magic `PJOD`, version, the network config as
//! length-prefixed `key=value` lines, then named tensors
//! (name length, name, rank, dims, f64 data).

use std::collections::BTreeMap;
use std::path::Path;

use super::layers::Layer;
use super::{NetworkConfig, NetworkModel};
use crate::binio::{Reader, Writer};
use crate::centroids::{CentroidSet, GeneratorKind};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PJOD";
const VERSION: u32 = 1;

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn config_lines(cfg: &NetworkConfig, generator: GeneratorKind) -> String {
    let mut kv: Vec<(&str, String)> = vec![
        ("architecture", cfg.architecture.clone()),
        ("input_shape", join(&cfg.input_shape)),
        ("pedcc_dim", cfg.pedcc_dim.to_string()),
        ("final_bn_relu", cfg.final_bn_relu.to_string()),
        ("fc1_bias", cfg.fc1_bias.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("learning_rate", format!("{:?}", cfg.learning_rate)),
        ("lr_decay", format!("{:?}", cfg.lr_decay)),
        (
            "decay_fractions",
            cfg.decay_fractions.iter().map(|f| format!("{f:?}")).collect::<Vec<_>>().join(","),
        ),
        ("momentum", format!("{:?}", cfg.momentum)),
        ("weight_decay", format!("{:?}", cfg.weight_decay)),
        ("seed", cfg.seed.to_string()),
        ("checkpoint_fraction", format!("{:?}", cfg.checkpoint_fraction)),
        (
            "centroid_generator",
            match generator {
                GeneratorKind::Simplex => "simplex".into(),
                GeneratorKind::Iterative => "iterative".into(),
            },
        ),
    ];
    if let Some(m) = cfg.conv_feature_dim {
        kv.push(("conv_feature_dim", m.to_string()));
    }
    kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn parse_config(text: &str, path: &str) -> Result<(NetworkConfig, GeneratorKind)> {
    let malformed = |reason: String| Error::MalformedFile {
        path: path.to_string(),
        reason,
    };
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| malformed(format!("config line `{line}` has no `=`")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| map.get(k).cloned().ok_or_else(|| malformed(format!("config lacks `{k}`")));
    fn num<T: std::str::FromStr>(v: &str, k: &str, path: &str) -> Result<T> {
        v.parse().map_err(|_| Error::MalformedFile {
            path: path.to_string(),
            reason: format!("bad value `{v}` for `{k}`"),
        })
    }
    let list = |k: &str| -> Result<Vec<String>> {
        let v = get(k)?;
        Ok(if v.is_empty() { Vec::new() } else { v.split(',').map(str::to_string).collect() })
    };
    let cfg = NetworkConfig {
        architecture: get("architecture")?,
        input_shape: list("input_shape")?.iter().map(|v| num(v, "input_shape", path)).collect::<Result<_>>()?,
        conv_feature_dim: map.get("conv_feature_dim").map(|v| num(v, "conv_feature_dim", path)).transpose()?,
        pedcc_dim: num(&get("pedcc_dim")?, "pedcc_dim", path)?,
        final_bn_relu: num(&get("final_bn_relu")?, "final_bn_relu", path)?,
        fc1_bias: num(&get("fc1_bias")?, "fc1_bias", path)?,
        epochs: num(&get("epochs")?, "epochs", path)?,
        batch_size: num(&get("batch_size")?, "batch_size", path)?,
        learning_rate: num(&get("learning_rate")?, "learning_rate", path)?,
        lr_decay: num(&get("lr_decay")?, "lr_decay", path)?,
        decay_fractions: list("decay_fractions")?
            .iter()
            .map(|v| num(v, "decay_fractions", path))
            .collect::<Result<_>>()?,
        momentum: num(&get("momentum")?, "momentum", path)?,
        weight_decay: num(&get("weight_decay")?, "weight_decay", path)?,
        seed: num(&get("seed")?, "seed", path)?,
        checkpoint_fraction: num(&get("checkpoint_fraction")?, "checkpoint_fraction", path)?,
    };
    let generator = match get("centroid_generator")?.as_str() {
        "simplex" => GeneratorKind::Simplex,
        "iterative" => GeneratorKind::Iterative,
        other => return Err(malformed(format!("unknown centroid generator `{other}`"))),
    };
    Ok((cfg, generator))
}

struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn tensors(model: &NetworkModel) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        match layer {
            Layer::Dense(d) => {
                out.push((format!("layer{i}.weight"), Tensor { dims: vec![d.inputs, d.outputs], data: d.weight.clone() }));
                out.push((format!("layer{i}.bias"), Tensor { dims: vec![d.outputs], data: d.bias.clone() }));
            }
            Layer::Conv(c) => {
                out.push((
                    format!("layer{i}.weight"),
                    Tensor { dims: vec![c.out_channels, c.in_channels, 3, 3], data: c.weight.clone() },
                ));
                out.push((format!("layer{i}.bias"), Tensor { dims: vec![c.out_channels], data: c.bias.clone() }));
            }
            Layer::BatchNorm(b) => {
                for (name, v) in [
                    ("gamma", &b.gamma),
                    ("beta", &b.beta),
                    ("running_mean", &b.running_mean),
                    ("running_var", &b.running_var),
                ] {
                    out.push((format!("layer{i}.{name}"), Tensor { dims: vec![b.channels], data: v.clone() }));
                }
            }
            _ => {}
        }
    }
    out.push((
        "fc1.weight".into(),
        Tensor { dims: vec![model.feature_dim(), model.pedcc_dim()], data: model.fc1_weight().to_vec() },
    ));
    if let Some(b) = model.fc1_bias() {
        out.push(("fc1.bias".into(), Tensor { dims: vec![b.len()], data: b.to_vec() }));
    }
    let cs = model.centroids();
    out.push((
        "centroids".into(),
        Tensor { dims: vec![cs.class_count(), cs.feature_dim()], data: cs.as_slice().to_vec() },
    ));
    out
}

pub fn save_checkpoint(model: &NetworkModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = Writer::new(MAGIC, VERSION);
    let cfg = config_lines(model.config(), model.centroids().generator());
    w.u32(cfg.len() as u32);
    w.bytes(cfg.as_bytes());
    let ts = tensors(model);
    w.u32(ts.len() as u32);
    for (name, t) in ts {
        w.u32(name.len() as u32);
        w.bytes(name.as_bytes());
        w.u32(t.dims.len() as u32);
        for d in &t.dims {
            w.u32(*d as u32);
        }
        w.f64s(&t.data);
    }
    w.finish(path.as_ref())
}

/// Reads a checkpoint. When `expected_centroids` is given, the stored
/// centroid frame must have the same dimensions.
pub fn load_checkpoint(path: impl AsRef<Path>, expected_centroids: Option<&CentroidSet>) -> Result<NetworkModel> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let mut r = Reader::open(path, MAGIC, VERSION)?;
    let cfg_len = r.u32()? as usize;
    let cfg_bytes = r.bytes(cfg_len)?;
    let cfg_text = String::from_utf8(cfg_bytes).map_err(|_| r.malformed("config is not UTF-8"))?;
    let (config, generator) = parse_config(&cfg_text, &shown)?;

    let count = r.u32()? as usize;
    let mut stored: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?).map_err(|_| r.malformed("tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(r.malformed(format!("tensor {name} has rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.f64s(dims.iter().product())?;
        stored.insert(name, Tensor { dims, data });
    }
    r.expect_end()?;

    let centroid_t = stored.remove("centroids").ok_or_else(|| r.malformed("no centroid tensor"))?;
    if centroid_t.dims.len() != 2 {
        return Err(r.malformed("centroid tensor must be 2-D"));
    }
    let rows: Vec<Vec<f64>> = centroid_t.data.chunks(centroid_t.dims[1].max(1)).map(<[f64]>::to_vec).collect();
    let centroids = CentroidSet::from_rows(&rows, generator).map_err(|e| r.malformed(e.to_string()))?;
    if let Some(expected) = expected_centroids {
        if expected.feature_dim() != config.pedcc_dim || expected.class_count() != centroids.class_count() {
            return Err(Error::ArchitectureMismatch(format!(
                "checkpoint has pedcc_dim {} with {} classes, supplied centroids are {} x {}",
                config.pedcc_dim,
                centroids.class_count(),
                expected.class_count(),
                expected.feature_dim()
            )));
        }
    }

    let mut model = NetworkModel::new(config, centroids).map_err(|e| match e {
        Error::ArchitectureMismatch(m) => Error::ArchitectureMismatch(m),
        other => Error::ArchitectureMismatch(format!("stored config is inconsistent: {other}")),
    })?;
    let mut take = |name: &str, dims: &[usize]| -> Result<Vec<f64>> {
        let t = stored
            .remove(name)
            .ok_or_else(|| Error::ArchitectureMismatch(format!("checkpoint lacks tensor {name}")))?;
        if t.dims != dims {
            return Err(Error::ArchitectureMismatch(format!(
                "tensor {name} has dims {:?}, architecture needs {:?}",
                t.dims, dims
            )));
        }
        Ok(t.data)
    };
    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        match layer {
            Layer::Dense(d) => {
                d.weight = take(&format!("layer{i}.weight"), &[d.inputs, d.outputs])?;
                d.bias = take(&format!("layer{i}.bias"), &[d.outputs])?;
            }
            Layer::Conv(c) => {
                c.weight = take(&format!("layer{i}.weight"), &[c.out_channels, c.in_channels, 3, 3])?;
                c.bias = take(&format!("layer{i}.bias"), &[c.out_channels])?;
            }
            Layer::BatchNorm(b) => {
                let ch = [b.channels];
                b.gamma = take(&format!("layer{i}.gamma"), &ch)?;
                b.beta = take(&format!("layer{i}.beta"), &ch)?;
                b.running_mean = take(&format!("layer{i}.running_mean"), &ch)?;
                b.running_var = take(&format!("layer{i}.running_var"), &ch)?;
            }
            _ => {}
        }
    }
    let (m, n) = (model.feature_dim(), model.pedcc_dim());
    let weight = take("fc1.weight", &[m, n])?;
    let bias = if model.fc1_bias().is_some() { Some(take("fc1.bias", &[n])?) } else { None };
    model.set_fc1(weight, bias)?;
    if let Some(extra) = stored.keys().next() {
        return Err(Error::ArchitectureMismatch(format!("unexpected tensor {extra}")));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centroids::generate_simplex;
    use crate::data::Shape;
    use crate::model::layers::Batch;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(bn: bool) -> NetworkModel {
        let cfg = NetworkConfig {
            architecture: "conv3x3(2),maxpool2,flatten,dense(6)".into(),
            input_shape: vec![1, 4, 4],
            pedcc_dim: 3,
            final_bn_relu: bn,
            decay_fractions: vec![0.25, 0.5, 0.75],
            learning_rate: 0.0123456789,
            ..NetworkConfig::default()
        };
        NetworkModel::new(cfg, generate_simplex(3, 3).unwrap()).unwrap()
    }

    #[test]
    fn round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        for bn in [false, true] {
            let mut m = model(bn);
            if let Some(Layer::BatchNorm(b)) = m.layers_mut().iter_mut().find(|l| matches!(l, Layer::BatchNorm(_))) {
                b.running_mean = vec![0.1; 6];
                b.running_var = vec![1.7; 6];
            }
            let path = dir.path().join("m.bin");
            save_checkpoint(&m, &path).unwrap();
            let back = load_checkpoint(&path, Some(m.centroids())).unwrap();
            assert_eq!(m, back);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let x = Batch::new(100, Shape::Image(1, 4, 4), (0..1600).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
        }
    }

    #[test]
    fn truncated_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_checkpoint(&model(false), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 17]).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::MalformedFile { .. })));
        std::fs::write(&path, b"PJOD").unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::MalformedFile { .. })));
    }

    #[test]
    fn wrong_magic_or_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_checkpoint(&model(false), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn centroid_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_checkpoint(&model(false), &path).unwrap();
        let other = generate_simplex(3, 4).unwrap();
        assert!(matches!(load_checkpoint(&path, Some(&other)), Err(Error::ArchitectureMismatch(_))));
    }
}
