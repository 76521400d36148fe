//! Binary container for datasets and checkpoints.
//!
//! All integers and floats are little-endian; tensors are stored as
//! `u32 rank, u32 dims.., f64 data..` in row-major order; strings are
//! length-prefixed UTF-8. Every file starts with an 8-byte magic and a
//! `u16` format version. Writes go through a temp file that is renamed into
//! place, so a crashed run never leaves a half-written artifact behind.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::Arc;

use coral_core::codec::{EncoderConfig, NormMode, NormStats};
use coral_core::data::{
    DynamicsSpec, FieldSample, GeometrySpec, Grid, IvpSpec, Trajectory,
};
use coral_core::inr::{HypernetParams, InrModel, SirenConfig, SirenParams};
use coral_core::processor::{OdeFieldParams, SkipMlpParams};
use coral_core::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"CORALDS\0";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CORALCP\0";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported container version {found} (supported: {FORMAT_VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("truncated file while reading {context}")]
    Truncated { context: &'static str },
    #[error("count mismatch in {what}: header says {expected}, payload has {found}")]
    CountMismatch { what: &'static str, expected: u64, found: u64 },
    #[error("invalid value while decoding {what}")]
    Decode { what: String },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("invalid data: {0}")]
    Data(#[from] coral_core::CoreError),
}

pub type Result<T> = std::result::Result<T, ContainerError>;

// ---------------------------------------------------------------------------
// Primitive readers/writers
// ---------------------------------------------------------------------------

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exactly(&mut self, buf: &mut [u8], context: &'static str) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|_| ContainerError::Truncated { context })
    }

    fn u8(&mut self, context: &'static str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.exactly(&mut b, context)?;
        Ok(b[0])
    }

    fn u16(&mut self, context: &'static str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.exactly(&mut b, context)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, context: &'static str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exactly(&mut b, context)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, context: &'static str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exactly(&mut b, context)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self, context: &'static str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.exactly(&mut b, context)?;
        Ok(f64::from_le_bytes(b))
    }

    fn string(&mut self, context: &'static str) -> Result<String> {
        let len = self.u32(context)? as usize;
        let mut buf = vec![0u8; len];
        self.exactly(&mut buf, context)?;
        String::from_utf8(buf).map_err(|_| ContainerError::Decode { what: context.into() })
    }

    fn tensor(&mut self, context: &'static str) -> Result<Tensor> {
        let rank = self.u32(context)? as usize;
        if rank > 4 {
            return Err(ContainerError::Decode { what: format!("{context}: tensor rank {rank}") });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32(context)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64(context)?);
        }
        Tensor::from_vec(&shape, data)
            .map_err(|_| ContainerError::Decode { what: format!("{context}: non-finite tensor") })
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let mut found = [0u8; 8];
        self.exactly(&mut found, "magic")?;
        if &found != expected {
            return Err(ContainerError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(&found).into_owned(),
            });
        }
        let version = self.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(ContainerError::UnsupportedVersion { found: version });
        }
        Ok(())
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 8]) -> Writer {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf }
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
    fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

/// Writes bytes atomically: temp file in the target directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// In-memory dataset, one variant per task family. The generator spec kept
/// alongside the payload is the exact-solution handle: evaluation code
/// rebuilds analytic ground truth from it at any grid or time.
#[derive(Clone, Debug)]
pub enum Dataset {
    Ivp { spec: IvpSpec, pairs: Vec<(FieldSample, FieldSample)> },
    Dynamics { spec: DynamicsSpec, trajectories: Vec<Trajectory> },
    Geometry { spec: GeometrySpec, samples: Vec<(Tensor, FieldSample, FieldSample)> },
}

impl Dataset {
    pub fn task_kind(&self) -> u8 {
        match self {
            Dataset::Ivp { .. } => 0,
            Dataset::Dynamics { .. } => 1,
            Dataset::Geometry { .. } => 2,
        }
    }

    pub fn task_name(&self) -> &'static str {
        match self {
            Dataset::Ivp { .. } => "ivp",
            Dataset::Dynamics { .. } => "dynamics",
            Dataset::Geometry { .. } => "geometry",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Ivp { pairs, .. } => pairs.len(),
            Dataset::Dynamics { trajectories, .. } => trajectories.len(),
            Dataset::Geometry { samples, .. } => samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn write_grid(w: &mut Writer, grid: &Grid) {
    w.tensor(grid.points());
    w.u32(grid.periodic().len() as u32);
    for &p in grid.periodic() {
        w.u8(p as u8);
    }
}

fn read_grid<R: Read>(r: &mut Reader<R>) -> Result<Arc<Grid>> {
    let points = r.tensor("grid points")?;
    let np = r.u32("grid periodicity")? as usize;
    let mut periodic = Vec::with_capacity(np);
    for _ in 0..np {
        periodic.push(r.u8("grid periodicity")? != 0);
    }
    Ok(Arc::new(Grid::new(points, periodic)?))
}

fn channel_names(kind: &str, n: usize) -> Vec<String> {
    match (kind, n) {
        ("input", 1) => vec!["a".into()],
        ("output", 1) => vec!["u".into()],
        ("input", 2) => vec!["x_def".into(), "y_def".into()],
        _ => (0..n).map(|i| format!("c{i}")).collect(),
    }
}

/// Serializes a dataset. Empty datasets are rejected at write time.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(ContainerError::Decode { what: "refusing to write empty dataset".into() });
    }
    let mut w = Writer::new(DATASET_MAGIC);
    w.u8(ds.task_kind());
    match ds {
        Dataset::Ivp { spec, pairs } => {
            w.u32(2); // spatial dim
            w.u32(pairs[0].0.n_channels() as u32 + pairs[0].1.n_channels() as u32);
            w.u32(pairs.len() as u32);
            w.u8(1); // per-sample grids
            w.string(&serde_json::to_string(spec).unwrap());
            for (a, u) in pairs {
                write_grid(&mut w, &a.grid);
                w.tensor(&a.values);
                w.tensor(&u.values);
            }
        }
        Dataset::Dynamics { spec, trajectories } => {
            w.u32(2);
            w.u32(trajectories[0].frames[0].shape()[1] as u32);
            w.u32(trajectories.len() as u32);
            w.u8(0); // one shared grid
            w.string(&serde_json::to_string(spec).unwrap());
            write_grid(&mut w, &trajectories[0].grid);
            w.u32(trajectories[0].len() as u32);
            w.f64(trajectories[0].dt);
            for &t in &trajectories[0].timestamps {
                w.f64(t);
            }
            for tr in trajectories {
                for f in &tr.frames {
                    w.tensor(f);
                }
            }
        }
        Dataset::Geometry { spec, samples } => {
            w.u32(2);
            w.u32(3); // 2 input channels + 1 output channel
            w.u32(samples.len() as u32);
            w.u8(1);
            w.string(&serde_json::to_string(spec).unwrap());
            for (deform, input, output) in samples {
                write_grid(&mut w, &input.grid);
                w.tensor(deform);
                w.tensor(&input.values);
                w.tensor(&output.values);
            }
        }
    }
    write_atomic(path, &w.buf)
}

/// Reads a dataset back; the round trip is bit-exact.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    let mut r = Reader { inner: io::BufReader::new(file) };
    r.magic(DATASET_MAGIC)?;
    let kind = r.u8("task kind")?;
    let _d = r.u32("spatial dim")?;
    let _channels = r.u32("channels")?;
    let count = r.u32("sample count")? as usize;
    let per_sample = r.u8("per-sample-grid flag")?;
    let meta = r.string("generator metadata")?;
    match kind {
        0 => {
            let spec: IvpSpec = serde_json::from_str(&meta)
                .map_err(|e| ContainerError::Decode { what: format!("ivp metadata: {e}") })?;
            let mut pairs = Vec::with_capacity(count);
            for _ in 0..count {
                let grid = read_grid(&mut r)?;
                let a = r.tensor("input values")?;
                let u = r.tensor("output values")?;
                let ac = channel_names("input", a.shape()[1]);
                let uc = channel_names("output", u.shape()[1]);
                pairs.push((
                    FieldSample::new(grid.clone(), a, ac)?,
                    FieldSample::new(grid, u, uc)?,
                ));
            }
            check_count("ivp samples", count, pairs.len())?;
            Ok(Dataset::Ivp { spec, pairs })
        }
        1 => {
            let spec: DynamicsSpec = serde_json::from_str(&meta)
                .map_err(|e| ContainerError::Decode { what: format!("dynamics metadata: {e}") })?;
            if per_sample != 0 {
                return Err(ContainerError::Decode {
                    what: "dynamics datasets use one shared grid".into(),
                });
            }
            let grid = read_grid(&mut r)?;
            let t = r.u32("frame count")? as usize;
            let dt = r.f64("dt")?;
            let mut timestamps = Vec::with_capacity(t);
            for _ in 0..t {
                timestamps.push(r.f64("timestamps")?);
            }
            let mut trajectories = Vec::with_capacity(count);
            for _ in 0..count {
                let mut frames = Vec::with_capacity(t);
                for _ in 0..t {
                    frames.push(r.tensor("frame")?);
                }
                trajectories.push(Trajectory::new(
                    grid.clone(),
                    timestamps.clone(),
                    frames,
                    dt,
                )?);
            }
            check_count("trajectories", count, trajectories.len())?;
            Ok(Dataset::Dynamics { spec, trajectories })
        }
        2 => {
            let spec: GeometrySpec = serde_json::from_str(&meta)
                .map_err(|e| ContainerError::Decode { what: format!("geometry metadata: {e}") })?;
            let mut samples = Vec::with_capacity(count);
            for _ in 0..count {
                let grid = read_grid(&mut r)?;
                let deform = r.tensor("deformation")?;
                let input = r.tensor("input values")?;
                let output = r.tensor("output values")?;
                samples.push((
                    deform,
                    FieldSample::new(grid.clone(), input, channel_names("input", 2))?,
                    FieldSample::new(grid, output, channel_names("output", 1))?,
                ));
            }
            Ok(Dataset::Geometry { spec, samples })
        }
        other => Err(ContainerError::Decode { what: format!("task kind byte {other}") }),
    }
}

fn check_count(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(ContainerError::CountMismatch {
            what,
            expected: expected as u64,
            found: found as u64,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Per-channel affine normalization of field values (fit on the train
/// split); identity when disabled.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldNorm {
    pub mean: Tensor,
    pub std: Tensor,
}

impl FieldNorm {
    pub fn identity(channels: usize) -> FieldNorm {
        FieldNorm { mean: Tensor::zeros(&[channels]), std: Tensor::filled(&[channels], 1.0) }
    }
}

/// A trained function space: the INR pair, its encoder settings, code
/// statistics, field normalization, optimizer state and epoch counter.
#[derive(Clone, Debug)]
pub struct InrCheckpoint {
    pub role: String,
    pub model: InrModel,
    pub encoder: EncoderConfig,
    pub stats: NormStats,
    pub field_norm: FieldNorm,
    pub adam: Option<(u64, Vec<Tensor>, Vec<Tensor>)>,
    pub epoch: u64,
}

fn norm_mode_byte(mode: NormMode) -> u8 {
    match mode {
        NormMode::SharedFeaturewise => 0,
        NormMode::SeparateFeaturewise => 1,
        NormMode::SeparateScalar => 2,
        NormMode::InputOnly => 3,
    }
}

fn norm_mode_from(b: u8) -> Result<NormMode> {
    Ok(match b {
        0 => NormMode::SharedFeaturewise,
        1 => NormMode::SeparateFeaturewise,
        2 => NormMode::SeparateScalar,
        3 => NormMode::InputOnly,
        other => return Err(ContainerError::Decode { what: format!("norm mode byte {other}") }),
    })
}

fn write_tensor_list(w: &mut Writer, ts: &[Tensor]) {
    w.u32(ts.len() as u32);
    for t in ts {
        w.tensor(t);
    }
}

fn read_tensor_list<R: Read>(r: &mut Reader<R>, context: &'static str) -> Result<Vec<Tensor>> {
    let n = r.u32(context)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(r.tensor(context)?);
    }
    Ok(out)
}

pub fn write_inr_checkpoint(path: &Path, ckpt: &InrCheckpoint) -> Result<()> {
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    w.u8(0); // kind: inr
    w.string(&ckpt.role);
    let cfg = &ckpt.model.siren.config;
    w.u32(cfg.d_in as u32);
    w.u32(cfg.d_out as u32);
    w.u32(cfg.width as u32);
    w.u32(cfg.depth as u32);
    w.f64(cfg.omega0);
    w.u32(ckpt.model.d_z() as u32);
    write_tensor_list(&mut w, &ckpt.model.params());
    w.tensor(&ckpt.encoder.alpha);
    w.u32(ckpt.encoder.steps as u32);
    w.u8(ckpt.encoder.learn_alpha as u8);
    w.u8(norm_mode_byte(ckpt.stats.mode));
    w.tensor(&ckpt.stats.mean);
    w.tensor(&ckpt.stats.std);
    w.tensor(&ckpt.field_norm.mean);
    w.tensor(&ckpt.field_norm.std);
    match &ckpt.adam {
        Some((steps, m, v)) => {
            w.u8(1);
            w.u64(*steps);
            write_tensor_list(&mut w, m);
            write_tensor_list(&mut w, v);
        }
        None => w.u8(0),
    }
    w.u64(ckpt.epoch);
    write_atomic(path, &w.buf)
}

pub fn read_inr_checkpoint(path: &Path) -> Result<InrCheckpoint> {
    let file = fs::File::open(path)?;
    let mut r = Reader { inner: io::BufReader::new(file) };
    r.magic(CHECKPOINT_MAGIC)?;
    let kind = r.u8("checkpoint kind")?;
    if kind != 0 {
        return Err(ContainerError::Decode {
            what: format!("expected inr checkpoint, found kind byte {kind}"),
        });
    }
    let role = r.string("role")?;
    let config = SirenConfig {
        d_in: r.u32("d_in")? as usize,
        d_out: r.u32("d_out")? as usize,
        width: r.u32("width")? as usize,
        depth: r.u32("depth")? as usize,
        omega0: r.f64("omega0")?,
    };
    let d_z = r.u32("d_z")? as usize;
    let params = read_tensor_list(&mut r, "inr params")?;
    let mut model = InrModel {
        siren: SirenParams {
            config: config.clone(),
            weights: vec![Tensor::zeros(&[1, 1]); config.depth + 1],
            biases: vec![Tensor::zeros(&[1]); config.depth + 1],
        },
        hyper: HypernetParams {
            d_z,
            v: vec![Tensor::zeros(&[1, 1]); config.depth],
            c: vec![Tensor::zeros(&[1]); config.depth],
        },
    };
    model
        .set_params(&params)
        .map_err(|_| ContainerError::Decode { what: "inr parameter list".into() })?;
    let alpha = r.tensor("alpha")?;
    let steps = r.u32("encoder steps")? as usize;
    let learn_alpha = r.u8("learn_alpha")? != 0;
    let encoder = EncoderConfig { alpha, steps, learn_alpha }
        .validated()
        .map_err(|_| ContainerError::Decode { what: "encoder config".into() })?;
    let mode = norm_mode_from(r.u8("norm mode")?)?;
    let stats = NormStats { mean: r.tensor("stats mean")?, std: r.tensor("stats std")?, mode };
    let field_norm =
        FieldNorm { mean: r.tensor("field mean")?, std: r.tensor("field std")? };
    let adam = if r.u8("adam flag")? != 0 {
        let steps = r.u64("adam steps")?;
        let m = read_tensor_list(&mut r, "adam m")?;
        let v = read_tensor_list(&mut r, "adam v")?;
        Some((steps, m, v))
    } else {
        None
    };
    let epoch = r.u64("epoch")?;
    Ok(InrCheckpoint { role, model, encoder, stats, field_norm, adam, epoch })
}

/// Latent processor checkpoint: variant byte, dims, then weights.
#[derive(Clone, Debug)]
pub enum ProcessorCheckpoint {
    Mlp { params: SkipMlpParams, epoch: u64 },
    Node { params: OdeFieldParams, substeps: usize, epoch: u64 },
}

pub fn write_processor_checkpoint(path: &Path, ckpt: &ProcessorCheckpoint) -> Result<()> {
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    w.u8(1); // kind: processor
    match ckpt {
        ProcessorCheckpoint::Mlp { params, epoch } => {
            w.u8(0); // variant: mlp
            w.u32(params.d_z as u32);
            w.u32(params.hidden as u32);
            w.u32(params.blocks.len() as u32);
            write_tensor_list(&mut w, &params.params());
            w.u64(*epoch);
        }
        ProcessorCheckpoint::Node { params, substeps, epoch } => {
            w.u8(1); // variant: node
            w.u32(params.d_z as u32);
            w.u32(params.width as u32);
            w.u32(params.depth as u32);
            w.u32(*substeps as u32);
            write_tensor_list(&mut w, &params.params());
            w.u64(*epoch);
        }
    }
    write_atomic(path, &w.buf)
}

pub fn read_processor_checkpoint(path: &Path) -> Result<ProcessorCheckpoint> {
    let file = fs::File::open(path)?;
    let mut r = Reader { inner: io::BufReader::new(file) };
    r.magic(CHECKPOINT_MAGIC)?;
    let kind = r.u8("checkpoint kind")?;
    if kind != 1 {
        return Err(ContainerError::Decode {
            what: format!("expected processor checkpoint, found kind byte {kind}"),
        });
    }
    match r.u8("processor variant")? {
        0 => {
            let d_z = r.u32("d_z")? as usize;
            let hidden = r.u32("hidden")? as usize;
            let blocks = r.u32("blocks")? as usize;
            let tensors = read_tensor_list(&mut r, "mlp params")?;
            let mut params = coral_core::processor::skip_mlp_init(d_z, hidden, blocks, 0)
                .map_err(ContainerError::Data)?;
            params
                .set_params(&tensors)
                .map_err(|_| ContainerError::Decode { what: "mlp parameter list".into() })?;
            let epoch = r.u64("epoch")?;
            Ok(ProcessorCheckpoint::Mlp { params, epoch })
        }
        1 => {
            let d_z = r.u32("d_z")? as usize;
            let width = r.u32("width")? as usize;
            let depth = r.u32("depth")? as usize;
            let substeps = r.u32("substeps")? as usize;
            let tensors = read_tensor_list(&mut r, "node params")?;
            let mut params = coral_core::processor::ode_field_init(d_z, width, depth, 0)
                .map_err(ContainerError::Data)?;
            params
                .set_params(&tensors)
                .map_err(|_| ContainerError::Decode { what: "node parameter list".into() })?;
            let epoch = r.u64("epoch")?;
            Ok(ProcessorCheckpoint::Node { params, substeps, epoch })
        }
        other => Err(ContainerError::Decode { what: format!("processor variant byte {other}") }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use coral_core::data::gen_heat2d;

    #[test]
    fn dataset_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let ds = gen_heat2d(2, 8, 4, 0.5, 0.05, 2, 1.0, 3).unwrap();
        write_dataset(
            &path,
            &Dataset::Dynamics { spec: ds.spec.clone(), trajectories: ds.trajectories.clone() },
        )
        .unwrap();
        let back = read_dataset(&path).unwrap();
        match back {
            Dataset::Dynamics { spec, trajectories } => {
                assert_eq!(spec, ds.spec);
                assert_eq!(trajectories.len(), ds.trajectories.len());
                for (a, b) in trajectories.iter().zip(ds.trajectories.iter()) {
                    assert_eq!(a.grid.points(), b.grid.points());
                    assert_eq!(a.timestamps, b.timestamps);
                    for (fa, fb) in a.frames.iter().zip(b.frames.iter()) {
                        assert_eq!(fa, fb);
                    }
                }
            }
            _ => panic!("wrong task kind"),
        }
    }

    #[test]
    fn corrupted_magic_is_typed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let ds = gen_heat2d(1, 4, 2, 0.5, 0.05, 1, 1.0, 0).unwrap();
        write_dataset(
            &path,
            &Dataset::Dynamics { spec: ds.spec.clone(), trajectories: ds.trajectories },
        )
        .unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        match read_dataset(&path) {
            Err(ContainerError::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_typed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let ds = gen_heat2d(1, 4, 2, 0.5, 0.05, 1, 1.0, 0).unwrap();
        write_dataset(
            &path,
            &Dataset::Dynamics { spec: ds.spec.clone(), trajectories: ds.trajectories },
        )
        .unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match read_dataset(&path) {
            Err(ContainerError::Truncated { .. }) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn bad_version_is_typed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let ds = gen_heat2d(1, 4, 2, 0.5, 0.05, 1, 1.0, 0).unwrap();
        write_dataset(
            &path,
            &Dataset::Dynamics { spec: ds.spec.clone(), trajectories: ds.trajectories },
        )
        .unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 0xff;
        bytes[9] = 0xff;
        fs::write(&path, &bytes).unwrap();
        match read_dataset(&path) {
            Err(ContainerError::UnsupportedVersion { found }) => assert_eq!(found, 0xffff),
            other => panic!("expected UnsupportedVersion, got {other:?}"),
        }
    }
}
