use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{render_frame, DomainProfile, ProfileName};
use crate::error::{Error, Result};
use crate::geometry::{Box3, BoxSet, PointCloud, Pose};
use crate::rng::sha256_hex;
use crate::sample::{AgentFrame, AgentType, CollaborativeSample, Domain};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub dir: String,
    pub agents: usize,
    pub boxes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub domain: String,
    pub n_frames: usize,
    pub seed: u64,
    pub profile_hash: String,
    pub profile: DomainProfile,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentMeta {
    agent_type: AgentType,
    is_ego: bool,
    sensor_hash: String,
}

/// World-frame box as stored in `labels.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelBox {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl From<&Box3> for LabelBox {
    fn from(b: &Box3) -> Self {
        LabelBox {
            cx: b.center[0],
            cy: b.center[1],
            cz: b.center[2],
            l: b.size[0],
            w: b.size[1],
            h: b.size[2],
            yaw: b.yaw,
        }
    }
}

impl From<LabelBox> for Box3 {
    fn from(b: LabelBox) -> Self {
        Box3::new([b.cx, b.cy, b.cz], [b.l, b.w, b.h], b.yaw)
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(path: &Path, v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| Error::json(path, e))?;
    s.push(b'\n');
    Ok(s)
}

fn encode_points(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.points.len() * 16);
    for p in &cloud.points {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

fn encode_pose(pose: &Pose) -> String {
    let m = pose.to_row_major();
    let mut s = String::new();
    for (i, v) in m.iter().enumerate() {
        s.push_str(&v.to_string());
        s.push(if i % 4 == 3 { '\n' } else { ' ' });
    }
    s
}

/// Renders `n_frames` frames of `profile` into `out_dir` and writes the manifest last.
pub fn generate_dataset(profile: &DomainProfile, n_frames: usize, out_dir: &Path, seed: u64) -> Result<Manifest> {
    profile.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut frames = Vec::with_capacity(n_frames);
    for idx in 0..n_frames {
        let rendered = render_frame(profile, seed, idx as u64)?;
        let dir = format!("frame_{idx:05}");
        let frame_dir = out_dir.join(&dir);
        std::fs::create_dir_all(&frame_dir).map_err(|e| Error::io(&frame_dir, e))?;
        let sample = &rendered.sample;
        for (j, agent) in sample.agents.iter().enumerate() {
            let adir = frame_dir.join(format!("agent_{j}"));
            std::fs::create_dir_all(&adir).map_err(|e| Error::io(&adir, e))?;
            write(&adir.join("points.bin"), &encode_points(&agent.cloud))?;
            write(&adir.join("pose.txt"), encode_pose(&agent.pose).as_bytes())?;
            let sensor = profile.sensor(agent.agent_type);
            let meta = AgentMeta {
                agent_type: agent.agent_type,
                is_ego: agent.is_ego,
                sensor_hash: sha256_hex(&serde_json::to_vec(sensor).expect("sensor serialises")),
            };
            let p = adir.join("meta.json");
            write(&p, &to_json(&p, &meta)?)?;
        }
        let labels: Vec<LabelBox> = sample.annotations.iter().flatten().map(LabelBox::from).collect();
        let p = frame_dir.join("labels.json");
        write(&p, &to_json(&p, &labels)?)?;
        frames.push(FrameEntry {
            dir,
            agents: sample.agents.len(),
            boxes: labels.len(),
        });
        log::debug!("rendered frame {idx} with {} boxes", labels.len());
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        domain: profile.name.as_str().to_string(),
        n_frames,
        seed,
        profile_hash: profile.hash(),
        profile: profile.clone(),
        frames,
    };
    let p = out_dir.join(MANIFEST_FILE);
    write(&p, &to_json(&p, &manifest)?)?;
    Ok(manifest)
}

/// A dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

fn read_points(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Dataset(format!(
            "{}: length {} is not a multiple of 16 bytes",
            path.display(),
            bytes.len()
        )));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|c| std::array::from_fn(|k| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap()) as f64))
        .collect();
    let cloud = PointCloud { points };
    cloud
        .validate()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    Ok(cloud)
}

fn read_pose(path: &Path) -> Result<Pose> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    Pose::from_row_major(&values).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&root.join(MANIFEST_FILE))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Dataset(format!(
                "{}: unsupported format version {}",
                root.display(),
                manifest.format_version
            )));
        }
        if manifest.frames.len() != manifest.n_frames {
            return Err(Error::Dataset(format!(
                "{}: manifest lists {} frames but declares {}",
                root.display(),
                manifest.frames.len(),
                manifest.n_frames
            )));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    /// World-frame labels of frame `index`.
    /// Source for simulator-profile datasets, target otherwise.
    pub fn domain(&self) -> Domain {
        if self.manifest.domain == ProfileName::SyntheticSim.as_str() {
            Domain::Source
        } else {
            Domain::Target
        }
    }

    /// Whether frame `index` ships its annotation file.
    pub fn has_labels(&self, index: usize) -> bool {
        self.entry(index)
            .map(|e| self.root.join(&e.dir).join("labels.json").is_file())
            .unwrap_or(false)
    }

    pub fn labels(&self, index: usize) -> Result<BoxSet> {
        let entry = self.entry(index)?;
        let labels: Vec<LabelBox> = read_json(&self.root.join(&entry.dir).join("labels.json"))?;
        let boxes: BoxSet = labels.into_iter().map(Box3::from).collect();
        for b in &boxes {
            b.validate()?;
        }
        Ok(boxes)
    }

    fn entry(&self, index: usize) -> Result<&FrameEntry> {
        self.manifest.frames.get(index).ok_or_else(|| {
            Error::Dataset(format!("{}: no frame {index} (dataset has {})", self.root.display(), self.len()))
        })
    }

    /// Loads frame `index` tagged with `domain`. Labels are read only when `with_labels` is set.
    pub fn load(&self, index: usize, domain: Domain, with_labels: bool) -> Result<CollaborativeSample> {
        let entry = self.entry(index)?;
        let fdir = self.root.join(&entry.dir);
        let mut agents = Vec::with_capacity(entry.agents);
        for j in 0..entry.agents {
            let adir = fdir.join(format!("agent_{j}"));
            let meta: AgentMeta = read_json(&adir.join("meta.json"))?;
            agents.push(AgentFrame {
                cloud: read_points(&adir.join("points.bin"))?,
                pose: read_pose(&adir.join("pose.txt"))?,
                agent_type: meta.agent_type,
                is_ego: meta.is_ego,
            });
        }
        let sample = CollaborativeSample {
            agents,
            annotations: if with_labels { Some(self.labels(index)?) } else { None },
            domain,
        };
        sample
            .validate()
            .map_err(|e| Error::Dataset(format!("{}: {e}", fdir.display())))?;
        Ok(sample)
    }
}
