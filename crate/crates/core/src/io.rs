//! Tensor containers, scene manifests and point-cloud export.
//!
//! A tensor is a JSON header (`name.json`) next to a raw little-endian payload
//! (`name.bin`). All writes go through a temporary file in the target directory
//! followed by a rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{ConfMap, Grid, Mask, PointMap, PoseSE3};
use crate::pairwise::PairPrediction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub order: String,
    pub endianness: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::checked(shape, TensorData::F32(data))
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::checked(shape, TensorData::U8(data))
    }

    fn checked(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let t = Self { shape, data };
        if t.len() != t.shape.iter().product::<usize>() {
            return Err(Error::InvalidInput(format!(
                "tensor of shape {:?} cannot hold {} elements",
                t.shape,
                t.len()
            )));
        }
        Ok(t)
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn header(&self) -> TensorHeader {
        TensorHeader {
            dtype: self.dtype(),
            shape: self.shape.clone(),
            order: "row-major".into(),
            endianness: "little".into(),
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U8(v) => v.clone(),
        }
    }

    fn as_f32(&self, path: &Path) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(Error::InvalidInput(format!("{}: expected an f32 tensor", path.display()))),
        }
    }

    fn expect_shape(&self, shape: &[usize], path: &Path) -> Result<()> {
        if self.shape != shape {
            return Err(Error::InvalidInput(format!(
                "{}: expected shape {shape:?}, found {:?}",
                path.display(),
                self.shape
            )));
        }
        Ok(())
    }
}

/// Payload path belonging to a header path.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes the header to `header` and the payload next to it.
pub fn write_tensor(header: &Path, tensor: &Tensor) -> Result<()> {
    write_atomic(&payload_path(header), &tensor.payload())?;
    write_json(header, &tensor.header())
}

pub fn read_tensor(header: &Path) -> Result<Tensor> {
    let h: TensorHeader = read_json(header)?;
    if h.order != "row-major" || h.endianness != "little" {
        return Err(Error::InvalidInput(format!(
            "{}: unsupported layout {} / {}",
            header.display(),
            h.order,
            h.endianness
        )));
    }
    let payload_file = payload_path(header);
    let bytes = fs::read(&payload_file).map_err(|e| Error::io(&payload_file, e))?;
    let count: usize = h.shape.iter().product();
    if bytes.len() != count * h.dtype.size() {
        return Err(Error::InvalidInput(format!(
            "{}: payload has {} bytes, header implies {}",
            payload_file.display(),
            bytes.len(),
            count * h.dtype.size()
        )));
    }
    let data = match h.dtype {
        Dtype::F32 => TensorData::F32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        Dtype::U8 => TensorData::U8(bytes),
    };
    Ok(Tensor { shape: h.shape, data })
}

pub fn point_map_tensor(map: &PointMap) -> Tensor {
    let data = map.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
    Tensor {
        shape: vec![map.height(), map.width(), 3],
        data: TensorData::F32(data),
    }
}

pub fn scalar_map_tensor(map: &Grid<f64>) -> Tensor {
    Tensor {
        shape: vec![map.height(), map.width()],
        data: TensorData::F32(map.iter().map(|x| *x as f32).collect()),
    }
}

pub fn mask_tensor(mask: &Mask) -> Tensor {
    Tensor {
        shape: vec![mask.height(), mask.width()],
        data: TensorData::U8(mask.iter().map(|&b| u8::from(b)).collect()),
    }
}

pub fn pose_tensor(pose: &PoseSE3) -> Tensor {
    let m = pose.to_matrix();
    let data = (0..4).flat_map(|r| (0..4).map(move |c| m[(r, c)] as f32)).collect();
    Tensor {
        shape: vec![4, 4],
        data: TensorData::F32(data),
    }
}

pub fn read_point_map(header: &Path, width: usize, height: usize) -> Result<PointMap> {
    let t = read_tensor(header)?;
    t.expect_shape(&[height, width, 3], header)?;
    let v = t.as_f32(header)?;
    let pts = v
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
        .collect();
    Grid::new(width, height, pts)
}

pub fn read_scalar_map(header: &Path, width: usize, height: usize) -> Result<ConfMap> {
    let t = read_tensor(header)?;
    t.expect_shape(&[height, width], header)?;
    Grid::new(width, height, t.as_f32(header)?.iter().map(|x| *x as f64).collect())
}

pub fn read_mask(header: &Path, width: usize, height: usize) -> Result<Mask> {
    let t = read_tensor(header)?;
    t.expect_shape(&[height, width], header)?;
    match &t.data {
        TensorData::U8(v) => Grid::new(width, height, v.iter().map(|&b| b != 0).collect()),
        TensorData::F32(_) => Err(Error::InvalidInput(format!("{}: expected a u8 tensor", header.display()))),
    }
}

pub fn read_pose(header: &Path) -> Result<PoseSE3> {
    let t = read_tensor(header)?;
    t.expect_shape(&[4, 4], header)?;
    let v = t.as_f32(header)?;
    let m = Matrix4::from_fn(|r, c| v[4 * r + c] as f64);
    PoseSE3::from_matrix(&m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub width: usize,
    pub height: usize,
}

/// File paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionEntry {
    pub src: usize,
    pub tgt: usize,
    pub points_src: PathBuf,
    pub points_tgt: PathBuf,
    pub conf_src: PathBuf,
    pub conf_tgt: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtPairEntry {
    pub src: usize,
    pub tgt: usize,
    pub points_src: PathBuf,
    pub points_tgt: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthEntry {
    /// Camera-to-world 4x4 pose tensors.
    pub poses: Vec<PathBuf>,
    pub focals: Vec<f64>,
    pub scene_extent: f64,
    /// Ground-truth point maps in each pair's source frame.
    pub pair_points: Vec<GtPairEntry>,
    /// `[n, 3]` world-frame surface samples.
    pub surface_points: PathBuf,
    /// Ground-truth world-frame point maps of every view.
    pub view_points: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub num_views: usize,
    pub views: Vec<ViewEntry>,
    pub predictions: Vec<PredictionEntry>,
    #[serde(default)]
    pub ground_truth: Option<GroundTruthEntry>,
}

/// Ground truth loaded from a manifest.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub poses: Vec<PoseSE3>,
    pub focals: Vec<f64>,
    pub scene_extent: f64,
    /// Same order as the manifest's predictions.
    pub pair_points: Vec<[PointMap; 2]>,
    pub surface_points: Vec<Vector3<f64>>,
    pub view_points: Vec<PointMap>,
}

#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub num_views: usize,
    pub width: usize,
    pub height: usize,
    pub predictions: Vec<PairPrediction>,
    pub ground_truth: Option<GroundTruth>,
}

impl SceneManifest {
    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    fn size(&self) -> Result<(usize, usize)> {
        if self.views.len() != self.num_views {
            return Err(Error::InvalidInput(format!(
                "manifest lists {} views but num_views is {}",
                self.views.len(),
                self.num_views
            )));
        }
        let first = self
            .views
            .first()
            .ok_or_else(|| Error::InvalidInput("manifest has no views".into()))?;
        if self.views.iter().any(|v| v != first) {
            return Err(Error::InvalidInput("all views must share one image size".into()));
        }
        Ok((first.width, first.height))
    }

    /// Loads every referenced tensor; paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<LoadedScene> {
        let (w, h) = self.size()?;
        let predictions = self
            .predictions
            .iter()
            .map(|e| {
                PairPrediction::new(
                    e.src,
                    e.tgt,
                    read_point_map(&base.join(&e.points_src), w, h)?,
                    read_point_map(&base.join(&e.points_tgt), w, h)?,
                    read_scalar_map(&base.join(&e.conf_src), w, h)?,
                    read_scalar_map(&base.join(&e.conf_tgt), w, h)?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ground_truth = self.ground_truth.as_ref().map(|g| self.load_gt(g, base, w, h)).transpose()?;
        Ok(LoadedScene {
            num_views: self.num_views,
            width: w,
            height: h,
            predictions,
            ground_truth,
        })
    }

    fn load_gt(&self, g: &GroundTruthEntry, base: &Path, w: usize, h: usize) -> Result<GroundTruth> {
        if g.poses.len() != self.num_views || g.focals.len() != self.num_views || g.view_points.len() != self.num_views {
            return Err(Error::InvalidInput("ground truth must cover every view".into()));
        }
        let poses = g.poses.iter().map(|p| read_pose(&base.join(p))).collect::<Result<Vec<_>>>()?;
        let mut pair_points = Vec::with_capacity(self.predictions.len());
        for e in &self.predictions {
            let gt = g
                .pair_points
                .iter()
                .find(|p| p.src == e.src && p.tgt == e.tgt)
                .ok_or_else(|| Error::InvalidInput(format!("no ground-truth points for pair ({}, {})", e.src, e.tgt)))?;
            pair_points.push([
                read_point_map(&base.join(&gt.points_src), w, h)?,
                read_point_map(&base.join(&gt.points_tgt), w, h)?,
            ]);
        }
        let surface_file = base.join(&g.surface_points);
        let t = read_tensor(&surface_file)?;
        if t.shape.len() != 2 || t.shape[1] != 3 {
            return Err(Error::InvalidInput(format!("{}: expected shape [n, 3]", surface_file.display())));
        }
        let surface_points = t
            .as_f32(&surface_file)?
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
            .collect();
        let view_points = g
            .view_points
            .iter()
            .map(|p| read_point_map(&base.join(p), w, h))
            .collect::<Result<Vec<_>>>()?;
        Ok(GroundTruth {
            poses,
            focals: g.focals.clone(),
            scene_extent: g.scene_extent,
            pair_points,
            surface_points,
            view_points,
        })
    }
}

pub fn points_tensor(points: &[Vector3<f64>]) -> Tensor {
    Tensor {
        shape: vec![points.len(), 3],
        data: TensorData::F32(points.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect()),
    }
}

/// ASCII PLY with one vertex per point.
pub fn write_ply(path: &Path, points: &[Vector3<f64>]) -> Result<()> {
    let mut text = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    );
    for p in points {
        text.push_str(&format!("{} {} {}\n", p.x as f32, p.y as f32, p.z as f32));
    }
    write_atomic(path, text.as_bytes())
}
