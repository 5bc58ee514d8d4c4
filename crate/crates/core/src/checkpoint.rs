//! Single-file checkpoint container.
//!
//! Layout:
//!
//! ```text
//! b"ECVAECK1"                       8-byte magic
//! u64 little-endian                 header length H
//! H bytes of JSON                   header (see `Header`)
//! f64 little-endian values          every tensor, in header order
//! ```
//!
//! The header records, per network, its architecture, version counter and
//! tensor table (name, shape, offset in values), plus the run config (TOML
//! text and its SHA-256), global step, dual state, EMA decay and a SHA-256
//! of the payload. Writing is deterministic, so load → save reproduces the
//! file byte for byte.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ImageShape;
use crate::ebm::Ebm;
use crate::error::{Error, Result};
use crate::flow::CouplingFlow;
use crate::nets::{Network, NetworkSpec, ParameterSet};
use crate::trainer::{DualState, Generator, ModelBundle, TrainConfig};
use crate::vae::{Prior, Vae};

pub const MAGIC: &[u8; 8] = b"ECVAECK1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum Architecture {
    Network {
        spec: NetworkSpec,
    },
    Flow {
        dim: usize,
        scale_bound: f64,
        conditioners: Vec<NetworkSpec>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NetEntry {
    /// `encoder`, `decoder`, `prior`, `flow`, `ebm`, or `ema.` + one of the first four.
    name: String,
    architecture: Architecture,
    version: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: u32,
    step: u64,
    ema_decay: f64,
    data_dim: usize,
    image_shape: Option<[usize; 3]>,
    dual: DualState,
    config_sha256: String,
    config: String,
    networks: Vec<NetEntry>,
    payload_len: usize,
    payload_sha256: String,
}

/// Metadata readable without rebuilding networks.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub step: u64,
    pub config_sha256: String,
    pub networks: Vec<(String, u64, usize)>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn architecture_of(g: &Generator, family: &str) -> Architecture {
    match (g, family) {
        (Generator::Vae(v), "encoder") => Architecture::Network {
            spec: v.encoder.spec.clone(),
        },
        (Generator::Vae(v), "decoder") => Architecture::Network {
            spec: v.decoder.spec.clone(),
        },
        (
            Generator::Vae(Vae {
                prior: Prior::Flow(f),
                ..
            }),
            "prior",
        )
        | (Generator::Flow(f), "flow") => Architecture::Flow {
            dim: f.dim(),
            scale_bound: f.scale_bound(),
            conditioners: f.conditioners().to_vec(),
        },
        _ => unreachable!("family list comes from the generator"),
    }
}

/// Serialises a bundle to bytes.
pub fn to_bytes(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let mut nets: Vec<(String, Architecture, &ParameterSet)> = Vec::new();
    for (fam, p) in bundle.generator.families() {
        nets.push((fam.to_string(), architecture_of(&bundle.generator, fam), p));
    }
    if let Some(ebm) = &bundle.ebm {
        nets.push((
            "ebm".into(),
            Architecture::Network {
                spec: ebm.net.spec.clone(),
            },
            &ebm.net.params,
        ));
    }
    if let Some(ema) = &bundle.ema {
        for (fam, p) in ema.families() {
            nets.push((format!("ema.{fam}"), architecture_of(ema, fam), p));
        }
    }

    let mut payload = Vec::new();
    let mut offset = 0usize;
    let mut entries = Vec::new();
    for (name, architecture, params) in nets {
        let mut tensors = Vec::new();
        for (tname, t) in params.iter() {
            tensors.push(TensorEntry {
                name: tname.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            for v in t.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.len();
        }
        entries.push(NetEntry {
            name,
            architecture,
            version: params.version(),
            tensors,
        });
    }
    let config = bundle.config.to_toml_string();
    let header = Header {
        format: FORMAT_VERSION,
        step: bundle.step,
        ema_decay: bundle.config.run.ema_decay,
        data_dim: bundle.data_dim,
        image_shape: bundle.image_shape.map(|s| s.as_array()),
        dual: bundle.dual,
        config_sha256: sha_hex(config.as_bytes()),
        config,
        networks: entries,
        payload_len: offset,
        payload_sha256: sha_hex(&payload),
    };
    let json =
        serde_json::to_vec(&header).map_err(|e| Error::InvalidArgument(format!("header: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes atomically: a sibling temp file renamed over `path`, so an
/// interrupted save never clobbers the previous checkpoint.
pub fn save(path: &Path, bundle: &ModelBundle) -> Result<()> {
    let bytes = to_bytes(bundle)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn split(path: &Path, bytes: &[u8]) -> Result<(Header, Vec<f64>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(ckpt_err(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| ckpt_err(path, format!("header: {e}")))?;
    if header.format != FORMAT_VERSION {
        return Err(ckpt_err(
            path,
            format!("unsupported format version {}", header.format),
        ));
    }
    let raw = &body[hlen..];
    if raw.len() != header.payload_len * 8 {
        return Err(ckpt_err(
            path,
            format!(
                "payload holds {} bytes, header promises {}",
                raw.len(),
                header.payload_len * 8
            ),
        ));
    }
    if sha_hex(raw) != header.payload_sha256 {
        return Err(ckpt_err(path, "payload digest mismatch"));
    }
    if sha_hex(header.config.as_bytes()) != header.config_sha256 {
        return Err(ckpt_err(path, "config digest mismatch"));
    }
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

fn params_of(path: &Path, net: &NetEntry, values: &[f64]) -> Result<ParameterSet> {
    let mut p = ParameterSet::new();
    for t in &net.tensors {
        let n: usize = t.shape.iter().product();
        let slice = values.get(t.offset..t.offset + n).ok_or_else(|| {
            ckpt_err(
                path,
                format!("tensor {}/{} out of bounds", net.name, t.name),
            )
        })?;
        let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), slice.to_vec()).unwrap();
        p.insert(t.name.clone(), arr)
            .map_err(|e| ckpt_err(path, format!("{}: {e}", net.name)))?;
    }
    p.set_version(net.version);
    Ok(p)
}

fn build_net(path: &Path, net: &NetEntry, values: &[f64]) -> Result<Network> {
    let Architecture::Network { spec } = &net.architecture else {
        return Err(ckpt_err(
            path,
            format!("{} should be a plain network", net.name),
        ));
    };
    Network::with_params(spec.clone(), params_of(path, net, values)?)
        .map_err(|e| ckpt_err(path, format!("{}: {e}", net.name)))
}

fn build_flow(path: &Path, net: &NetEntry, values: &[f64]) -> Result<CouplingFlow> {
    let Architecture::Flow {
        dim,
        scale_bound,
        conditioners,
    } = &net.architecture
    else {
        return Err(ckpt_err(path, format!("{} should be a flow", net.name)));
    };
    CouplingFlow::from_parts(
        *dim,
        *scale_bound,
        conditioners.clone(),
        params_of(path, net, values)?,
    )
    .map_err(|e| ckpt_err(path, format!("{}: {e}", net.name)))
}

fn build_generator(
    path: &Path,
    prefix: &str,
    header: &Header,
    cfg: &TrainConfig,
    values: &[f64],
) -> Result<Option<Generator>> {
    let find = |n: &str| {
        header
            .networks
            .iter()
            .find(|e| e.name == format!("{prefix}{n}"))
    };
    if let Some(f) = find("flow") {
        return Ok(Some(Generator::Flow(build_flow(path, f, values)?)));
    }
    let (Some(enc), Some(dec)) = (find("encoder"), find("decoder")) else {
        return Ok(None);
    };
    let encoder = build_net(path, enc, values)?;
    let decoder = build_net(path, dec, values)?;
    let prior = match find("prior") {
        Some(p) => Prior::Flow(build_flow(path, p, values)?),
        None => Prior::StandardNormal {
            dim: decoder.spec.input_len(),
        },
    };
    Vae::new(encoder, decoder, prior, cfg.model.sigma_dec)
        .map(|v| Some(Generator::Vae(v)))
        .map_err(|e| ckpt_err(path, e.to_string()))
}

pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<ModelBundle> {
    let (header, values) = split(path, bytes)?;
    let config = TrainConfig::from_toml_str(&header.config)
        .map_err(|e| ckpt_err(path, format!("stored config: {e}")))?;
    let generator = build_generator(path, "", &header, &config, &values)?
        .ok_or_else(|| ckpt_err(path, "no generator networks"))?;
    let ema = build_generator(path, "ema.", &header, &config, &values)?;
    let ebm = match header.networks.iter().find(|e| e.name == "ebm") {
        Some(e) => Some(Ebm::new(build_net(path, e, &values)?)?),
        None => None,
    };
    if generator.data_dim() != header.data_dim {
        return Err(ckpt_err(
            path,
            "generator output does not match recorded data dimension",
        ));
    }
    Ok(ModelBundle {
        config,
        data_dim: header.data_dim,
        image_shape: header.image_shape.map(|[c, h, w]| ImageShape::new(c, h, w)),
        generator,
        ebm,
        ema,
        dual: header.dual,
        step: header.step,
    })
}

pub fn load(path: &Path) -> Result<ModelBundle> {
    let bytes = fs::read(path).map_err(|e| ckpt_err(path, e.to_string()))?;
    from_bytes(path, &bytes)
}

/// Header summary: step, config digest and `(network, version, #values)`.
pub fn info(path: &Path) -> Result<CheckpointInfo> {
    let bytes = fs::read(path).map_err(|e| ckpt_err(path, e.to_string()))?;
    let (h, _) = split(path, &bytes)?;
    Ok(CheckpointInfo {
        step: h.step,
        config_sha256: h.config_sha256,
        networks: h
            .networks
            .iter()
            .map(|n| {
                (
                    n.name.clone(),
                    n.version,
                    n.tensors
                        .iter()
                        .map(|t| t.shape.iter().product::<usize>())
                        .sum(),
                )
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Variant;

    fn small(variant: Variant, prior_flow: bool) -> ModelBundle {
        let mut cfg = TrainConfig::default();
        cfg.variant = variant;
        cfg.model.hidden = vec![8];
        cfg.model.energy_hidden = vec![8];
        cfg.model.latent_dim = 4;
        cfg.model.flow_layers = 2;
        cfg.model.flow_hidden = vec![6];
        if prior_flow {
            cfg.model.prior = crate::trainer::PriorChoice::Flow;
            cfg.model.prior_flow_layers = 2;
            cfg.model.prior_flow_hidden = vec![5];
        }
        let mut b = ModelBundle::new(&cfg, 2, None).unwrap();
        b.step = 17;
        b.dual.lambda = 0.375;
        b
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        for (v, pf) in [
            (Variant::EcVae, false),
            (Variant::EcVae, true),
            (Variant::PlainVae, false),
            (Variant::EcFlow, false),
            (Variant::EcVaeCalibratedPosterior, false),
        ] {
            let b = small(v, pf);
            let p = dir.path().join("a.ecv");
            save(&p, &b).unwrap();
            let back = load(&p).unwrap();
            assert_eq!(back, b, "{v:?}");
            let q = dir.path().join("b.ecv");
            save(&q, &back).unwrap();
            assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
            assert!(!dir.path().join("a.ecv.tmp").exists());
        }
    }

    #[test]
    fn info_reports_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let b = small(Variant::EcVae, false);
        let p = dir.path().join("c.ecv");
        save(&p, &b).unwrap();
        let i = info(&p).unwrap();
        assert_eq!(i.step, 17);
        let names: Vec<_> = i.networks.iter().map(|n| n.0.as_str()).collect();
        assert_eq!(
            names,
            ["encoder", "decoder", "ebm", "ema.encoder", "ema.decoder"]
        );
        assert_eq!(
            i.config_sha256,
            sha_hex(b.config.to_toml_string().as_bytes())
        );
    }

    #[test]
    fn corruption_detected() {
        let b = small(Variant::EcVae, false);
        let bytes = to_bytes(&b).unwrap();
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert!(matches!(from_bytes(p, &bad), Err(Error::Checkpoint { .. })));
        assert!(from_bytes(p, &bytes[..bytes.len() - 8]).is_err());
        assert!(from_bytes(p, b"NOTACKPT........").is_err());
        assert!(load(Path::new("/nonexistent/x.ecv")).is_err());
    }
}
