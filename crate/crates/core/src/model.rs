//! Trained-model bundle and its checkpoint container.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::networks::{Encoder, EndNet, NetworkConfig, PathNet, PriorNet};
use crate::numeric::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IDMCKPT1";

/// Which sampler a bundle belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Goal chain, learned prior, short trajectory chain.
    Idm,
    /// Single conditional chain over the whole trajectory from a standard-normal start.
    Baseline,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Idm => "idm",
            ModelKind::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "idm" => Ok(ModelKind::Idm),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Step counts and linear beta ranges of both chains.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionConfig {
    pub goal_steps: usize,
    pub goal_beta: (f64, f64),
    pub traj_steps: usize,
    pub traj_beta: (f64, f64),
    /// Chain length of the single-chain baseline.
    pub baseline_steps: usize,
    pub baseline_beta: (f64, f64),
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            goal_steps: 100,
            goal_beta: (1e-4, 0.02),
            traj_steps: 10,
            traj_beta: (1e-4, 0.05),
            baseline_steps: 100,
            baseline_beta: (1e-4, 0.05),
        }
    }
}

impl DiffusionConfig {
    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("goal_steps", self.goal_steps.to_string()),
            ("goal_beta_start", format!("{:?}", self.goal_beta.0)),
            ("goal_beta_end", format!("{:?}", self.goal_beta.1)),
            ("traj_steps", self.traj_steps.to_string()),
            ("traj_beta_start", format!("{:?}", self.traj_beta.0)),
            ("traj_beta_end", format!("{:?}", self.traj_beta.1)),
            ("baseline_steps", self.baseline_steps.to_string()),
            ("baseline_beta_start", format!("{:?}", self.baseline_beta.0)),
            ("baseline_beta_end", format!("{:?}", self.baseline_beta.1)),
        ]
        .into_iter()
        .map(|(k, v)| (format!("diffusion.{k}"), v))
        .collect()
    }

    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (key, value) in kv {
            let Some(field) = key.strip_prefix("diffusion.") else {
                continue;
            };
            let int = || -> Result<usize> {
                value.parse().map_err(|_| {
                    Error::Config(format!(
                        "{key}: expected a non-negative integer, got {value:?}"
                    ))
                })
            };
            let num = || -> Result<f64> {
                value
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: expected a number, got {value:?}")))
            };
            match field {
                "goal_steps" => self.goal_steps = int()?,
                "goal_beta_start" => self.goal_beta.0 = num()?,
                "goal_beta_end" => self.goal_beta.1 = num()?,
                "traj_steps" => self.traj_steps = int()?,
                "traj_beta_start" => self.traj_beta.0 = num()?,
                "traj_beta_end" => self.traj_beta.1 = num()?,
                "baseline_steps" => self.baseline_steps = int()?,
                "baseline_beta_start" => self.baseline_beta.0 = num()?,
                "baseline_beta_end" => self.baseline_beta.1 = num()?,
                _ => return Err(Error::Config(format!("unknown key {key}"))),
            }
        }
        self.goal_schedule()?;
        self.traj_schedule()?;
        self.baseline_schedule()?;
        Ok(())
    }

    pub fn goal_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.goal_steps, self.goal_beta.0, self.goal_beta.1)
    }

    /// The trajectory chain; zero steps gives the empty chain.
    pub fn traj_schedule(&self) -> Result<NoiseSchedule> {
        if self.traj_steps == 0 {
            return Ok(NoiseSchedule::empty());
        }
        NoiseSchedule::linear(self.traj_steps, self.traj_beta.0, self.traj_beta.1)
    }

    pub fn baseline_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(
            self.baseline_steps,
            self.baseline_beta.0,
            self.baseline_beta.1,
        )
    }
}

/// Parameters of every network of one model, their schedules, and the
/// configuration needed to rebuild them.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub kind: ModelKind,
    pub network: NetworkConfig,
    pub diffusion: DiffusionConfig,
    pub params: ParamSet,
    pub encoder: Encoder,
    /// Present for [`ModelKind::Idm`] only.
    pub endnet: Option<EndNet>,
    /// Present for [`ModelKind::Idm`] only.
    pub priornet: Option<PriorNet>,
    pub pathnet: PathNet,
    pub goal_schedule: NoiseSchedule,
    /// Trajectory chain: `S` steps for IDM, `S_base` for the baseline.
    pub traj_schedule: NoiseSchedule,
    pub init_seed: u64,
    pub epochs_completed: u64,
}

impl ModelBundle {
    /// Freshly initialized networks; `network.coord_scale` must already be set.
    pub fn new(
        kind: ModelKind,
        network: NetworkConfig,
        diffusion: DiffusionConfig,
        seed: u64,
    ) -> Result<Self> {
        network.validate()?;
        if network.coord_scale <= 0.0 {
            return Err(Error::Config(
                "network.coord_scale must be positive when building a model".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = Encoder::new(&mut params, &network, &mut rng)?;
        let (endnet, priornet, goal_schedule, traj_schedule) = match kind {
            ModelKind::Idm => {
                let goal = diffusion.goal_schedule()?;
                let endnet = EndNet::new(&mut params, &network, goal.steps(), &mut rng)?;
                let priornet = PriorNet::new(&mut params, &network, &mut rng)?;
                (
                    Some(endnet),
                    Some(priornet),
                    goal,
                    diffusion.traj_schedule()?,
                )
            }
            ModelKind::Baseline => (
                None,
                None,
                NoiseSchedule::empty(),
                diffusion.baseline_schedule()?,
            ),
        };
        let pathnet = PathNet::new(&mut params, &network, traj_schedule.steps(), &mut rng)?;
        Ok(Self {
            kind,
            network,
            diffusion,
            params,
            encoder,
            endnet,
            priornet,
            pathnet,
            goal_schedule,
            traj_schedule,
            init_seed: seed,
            epochs_completed: 0,
        })
    }

    /// Self-describing header lines stored in checkpoints.
    pub fn header(&self) -> BTreeMap<String, String> {
        let mut kv: BTreeMap<String, String> = self.network.to_kv().into_iter().collect();
        kv.extend(self.diffusion.to_kv());
        kv.insert("model.kind".into(), self.kind.name().into());
        kv.insert("model.init_seed".into(), self.init_seed.to_string());
        kv.insert(
            "model.epochs_completed".into(),
            self.epochs_completed.to_string(),
        );
        kv.insert("optimizer.step".into(), self.params.step().to_string());
        kv
    }

    /// Writes parameters, optimizer moments and header to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, &Tensor)> = Vec::with_capacity(3 * self.params.len());
        for id in self.params.ids() {
            let name = self.params.name(id);
            let (m, v) = self.params.moments(id);
            tensors.push((name.to_string(), self.params.get(id)));
            tensors.push((format!("adam.m.{name}"), m));
            tensors.push((format!("adam.v.{name}"), v));
        }
        let mut w = BufWriter::new(File::create(path)?);
        write_container(
            &mut w,
            &self.header(),
            tensors.iter().map(|(n, t)| (n.as_str(), *t)),
        )?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let (header, tensors) = read_container(&mut r)?;
        let get = |key: &str| -> Result<&String> {
            header
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("{}: header lacks {key}", path.display())))
        };
        let parse_u64 = |key: &str| -> Result<u64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("{key}: not an integer")))
        };
        let kind = ModelKind::parse(get("model.kind")?)?;
        let mut network = NetworkConfig::default();
        network.apply_kv(&header)?;
        let mut diffusion = DiffusionConfig::default();
        diffusion.apply_kv(&header)?;
        let mut bundle = Self::new(kind, network, diffusion, parse_u64("model.init_seed")?)?;
        bundle.epochs_completed = parse_u64("model.epochs_completed")?;
        let mut by_name: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let expected = 3 * bundle.params.len();
        if by_name.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{} tensors in file, architecture needs {expected}",
                by_name.len()
            )));
        }
        let ids: Vec<_> = bundle.params.ids().collect();
        for id in ids {
            let name = bundle.params.name(id).to_string();
            let mut take = |key: String| {
                by_name
                    .remove(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))
            };
            let value = take(name.clone())?;
            let m = take(format!("adam.m.{name}"))?;
            let v = take(format!("adam.v.{name}"))?;
            bundle.params.restore(id, value, m, v)?;
        }
        bundle.params.set_step(parse_u64("optimizer.step")?);
        Ok(bundle)
    }
}

/// Writes `IDMCKPT1`, a length-prefixed UTF-8 header of `key=value` lines,
/// then each tensor as name length (u32), name, rank (u32), extents (u64 each)
/// and little-endian f64 payload.
pub fn write_container<'a, W: Write>(
    w: &mut W,
    header: &BTreeMap<String, String>,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    let mut text = String::new();
    for (k, v) in header {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Checkpoint(format!(
                "header entry {k:?} cannot be encoded"
            )));
        }
        text.push_str(k);
        text.push('=');
        text.push_str(v);
        text.push('\n');
    }
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub type Container = (BTreeMap<String, String>, Vec<(String, Tensor)>);

pub fn read_container<R: Read>(r: &mut R) -> Result<Container> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let text_len = read_u64(r)? as usize;
    let mut text = vec![0u8; text_len];
    r.read_exact(&mut text)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let text =
        String::from_utf8(text).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let mut header = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed header line {line:?}")))?;
        header.insert(k.to_string(), v.to_string());
    }

    let mut tensors = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match r.read(&mut len[..1])? {
            0 => break,
            _ => r
                .read_exact(&mut len[1..])
                .map_err(|_| Error::Checkpoint("truncated tensor record".into()))?,
        }
        let name_len = u32::from_le_bytes(len) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint("truncated tensor name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("truncated payload of {name}")))?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok((header, tensors))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated record".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated record".into()))?;
    Ok(u64::from_le_bytes(b))
}
