//! Binary file formats and JSON sidecars.
//!
//! Volume "OMV1": magic, little-endian u32 W, H, L, C, then f32 data
//! channel-last with x fastest. Labels "OML1": magic, u32 W, H, L, then u8
//! codes. Checkpoint "OMW1": magic, length-prefixed config JSON echo, then
//! named parameter blobs (u32 name length, name, u32 order, u32 dims,
//! little-endian f32 data).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{NetworkConfig, OmNet, ParamSet};
use crate::error::{OmError, Result};
use crate::sampler::{LabelVolume, MODALITIES};
use crate::tensor::Tensor;

const VOLUME_MAGIC: &[u8; 4] = b"OMV1";
const LABEL_MAGIC: &[u8; 4] = b"OML1";
const WEIGHTS_MAGIC: &[u8; 4] = b"OMW1";

/// Metadata written next to volume/label files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub modalities: Vec<String>,
    pub voxel_spacing: [f32; 3],
    pub provenance: String,
}

impl Default for Sidecar {
    fn default() -> Self {
        Sidecar {
            modalities: MODALITIES.iter().map(|s| s.to_string()).collect(),
            voxel_spacing: [1.0, 1.0, 1.0],
            provenance: String::new(),
        }
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_magic(r: &mut impl Read, expect: &[u8; 4], what: &str) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if &buf != expect {
        return Err(OmError::Format(format!(
            "bad magic for {what}: expected {:?}, got {:?}",
            expect, buf
        )));
    }
    Ok(())
}

pub fn write_volume(path: &Path, volume: &Tensor) -> Result<()> {
    let vd = volume.as_volume()?;
    if vd.batched {
        return Err(OmError::InvalidArgument {
            op: "write_volume",
            msg: "volume files hold a single 4D tensor".into(),
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(VOLUME_MAGIC)?;
    for &d in &[vd.spatial[0], vd.spatial[1], vd.spatial[2], vd.channels] {
        write_u32(&mut w, d as u32)?;
    }
    for &v in volume.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, VOLUME_MAGIC, "volume")?;
    let dims: Vec<usize> = (0..4)
        .map(|_| read_u32(&mut r).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let n: usize = dims.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&dims, data)
}

pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(LABEL_MAGIC)?;
    for &d in &labels.dims {
        write_u32(&mut w, d as u32)?;
    }
    w.write_all(&labels.labels)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, LABEL_MAGIC, "labels")?;
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = read_u32(&mut r)? as usize;
    }
    let mut labels = vec![0u8; dims[0] * dims[1] * dims[2]];
    r.read_exact(&mut labels)?;
    LabelVolume::new(dims, labels)
}

pub fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<()> {
    let f = File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(f), sidecar)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let f = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

/// Config echo stored inside a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub network: NetworkConfig,
    /// 0-based task indices the model serves (a cascade member has one).
    pub tasks: Vec<usize>,
}

pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, params: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(WEIGHTS_MAGIC)?;
    let config = serde_json::to_vec(header)?;
    write_u32(&mut w, config.len() as u32)?;
    w.write_all(&config)?;
    write_u32(&mut w, params.len() as u32)?;
    for entry in params.entries() {
        write_u32(&mut w, entry.name.len() as u32)?;
        w.write_all(entry.name.as_bytes())?;
        write_u32(&mut w, entry.tensor.order() as u32)?;
        for &d in entry.tensor.shape() {
            write_u32(&mut w, d as u32)?;
        }
        for &v in entry.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, WEIGHTS_MAGIC, "checkpoint")?;
    let clen = read_u32(&mut r)? as usize;
    let mut cbuf = vec![0u8; clen];
    r.read_exact(&mut cbuf)?;
    let header: CheckpointHeader = serde_json::from_slice(&cbuf)?;
    let count = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf)?;
        let name = String::from_utf8(nbuf)
            .map_err(|e| OmError::Format(format!("bad parameter name: {e}")))?;
        let order = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(order);
        for _ in 0..order {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push((name, Tensor::new(&shape, data)?));
    }
    Ok((header, params))
}

pub fn save_model(path: &Path, model: &OmNet) -> Result<()> {
    let header = CheckpointHeader {
        network: model.config.clone(),
        tasks: model.heads.iter().map(|h| h.task).collect(),
    };
    write_checkpoint(path, &header, &model.params)
}

/// Rebuild a model from a checkpoint: construct from the config echo, then
/// overwrite every parameter by name.
pub fn load_model(path: &Path) -> Result<OmNet> {
    let (header, params) = read_checkpoint(path)?;
    let mut model = OmNet::build_with_tasks(&header.network, &header.tasks)?;
    if params.len() != model.params.len() {
        return Err(OmError::Format(format!(
            "checkpoint has {} parameters, architecture expects {}",
            params.len(),
            model.params.len()
        )));
    }
    for (name, tensor) in params {
        let slot = model
            .params
            .by_name_mut(&name)
            .ok_or_else(|| OmError::Format(format!("unknown parameter {name}")))?;
        if slot.shape() != tensor.shape() {
            return Err(OmError::Format(format!(
                "parameter {name}: shape {:?} in file, {:?} expected",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor.with_grad();
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{AttentionKind, NetworkConfig};
    use crate::tensor::Graph;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("omnet-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn volume_and_labels_round_trip() {
        let dir = tmpdir();
        let t = Tensor::new(&[3, 2, 2, 4], (0..48).map(|i| i as f32 * 0.5).collect()).unwrap();
        let vp = dir.join("case.omv");
        write_volume(&vp, &t).unwrap();
        let back = read_volume(&vp).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());

        let labels = LabelVolume::new([3, 2, 2], (0..12).map(|i| (i % 5) as u8).collect()).unwrap();
        let lp = dir.join("case.oml");
        write_labels(&lp, &labels).unwrap();
        assert_eq!(read_labels(&lp).unwrap(), labels);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tmpdir();
        let p = dir.join("junk.omv");
        std::fs::write(&p, b"NOPEatall").unwrap();
        assert!(matches!(read_volume(&p), Err(OmError::Format(_))));
    }

    #[test]
    fn checkpoint_round_trip_restores_identical_outputs() {
        let dir = tmpdir();
        let cfg = NetworkConfig {
            input_patch: [16, 16, 8],
            base_channels: 4,
            attention: AttentionKind::Cga,
            ..NetworkConfig::default()
        };
        let model = OmNet::build(&cfg).unwrap();
        let p = dir.join("model.omw");
        save_model(&p, &model).unwrap();
        let restored = load_model(&p).unwrap();
        assert_eq!(restored.count_parameters(), model.count_parameters());

        let x = Tensor::filled(&[16, 16, 8, 4], 0.2);
        let run = |m: &OmNet| {
            let mut g = Graph::new();
            let bind = m.params.bind(&mut g);
            let xv = g.input(x.clone());
            let f = m.forward_features(&mut g, &bind, xv).unwrap();
            let outs = m.forward_all_tasks(&mut g, &bind, f).unwrap();
            outs.iter().map(|&o| g.value(o).data().to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(run(&model), run(&restored));
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tmpdir();
        let sc = Sidecar {
            provenance: "phantom seed 7".into(),
            ..Sidecar::default()
        };
        let p = dir.join("case.json");
        write_sidecar(&p, &sc).unwrap();
        let back = read_sidecar(&p).unwrap();
        assert_eq!(back.modalities, sc.modalities);
        assert_eq!(back.provenance, sc.provenance);
    }
}
