//! JSONL episode logs: one frame per line.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::geometry::PixelPoint3;
use crate::reward::LabeledFrame;
use crate::sim::{Action, Direction, Episode, EpisodeKind, Frame, Gripper, ObjectState, Point3, WorldState};

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("log i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("log line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("log line {line}: unsupported schema version {found} (expected {LOG_SCHEMA_VERSION})")]
    Version { line: usize, found: u32 },
    #[error("log line {line}: frame {t} of episode {episode} is out of order")]
    Order { line: usize, episode: u64, t: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogObject {
    pub id: u32,
    pub position: [f64; 3],
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogAction {
    pub delta: [f64; 3],
    pub gripper: crate::sim::GripperCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub schema_version: u32,
    pub episode: u64,
    pub direction: Direction,
    pub kind: EpisodeKind,
    pub t: usize,
    pub effector: [f64; 3],
    pub gripper: Gripper,
    pub objects: Vec<LogObject>,
    pub action: Option<LogAction>,
    #[serde(default)]
    pub success: bool,
    #[serde(default)]
    pub pixel_robot: Option<PixelPoint3>,
    #[serde(default)]
    pub pixel_objects: BTreeMap<u32, PixelPoint3>,
    #[serde(default)]
    pub r_sparse: Option<u8>,
    #[serde(default)]
    pub r_dense: Option<f64>,
    #[serde(default)]
    pub r: Option<f64>,
}

fn arr(p: &Point3) -> [f64; 3] {
    [p.x, p.y, p.z]
}

impl LogRecord {
    pub fn from_frame(episode: &Episode, frame: &Frame, label: Option<&LabeledFrame>) -> Self {
        let s = &frame.state;
        let mut pixel_objects = BTreeMap::new();
        if let Some(op) = label.and_then(|l| l.object_pixel) {
            // Only the task object is tracked.
            if let Some(o) = s.objects.first() {
                pixel_objects.insert(o.id, op);
            }
        }
        Self {
            schema_version: LOG_SCHEMA_VERSION,
            episode: episode.id,
            direction: episode.direction,
            kind: episode.kind,
            t: frame.t,
            effector: arr(&s.effector),
            gripper: s.gripper,
            objects: s
                .objects
                .iter()
                .map(|o| LogObject {
                    id: o.id,
                    position: arr(&o.position),
                    held: o.held,
                })
                .collect(),
            action: frame.action.map(|a| LogAction {
                delta: arr(&a.delta),
                gripper: a.gripper,
            }),
            success: frame.success,
            pixel_robot: label.map(|l| l.robot_pixel),
            pixel_objects,
            r_sparse: label.map(|l| l.r_sparse),
            r_dense: label.and_then(|l| l.r_dense),
            r: label.map(|l| l.r),
        }
    }

    pub fn frame(&self) -> Frame {
        let p = |a: [f64; 3]| Point3::new(a[0], a[1], a[2]);
        Frame {
            t: self.t,
            state: WorldState {
                effector: p(self.effector),
                gripper: self.gripper,
                objects: self
                    .objects
                    .iter()
                    .map(|o| ObjectState {
                        id: o.id,
                        position: p(o.position),
                        held: o.held,
                    })
                    .collect(),
                step_count: self.t,
            },
            action: self.action.as_ref().map(|a| Action {
                delta: p(a.delta),
                gripper: a.gripper,
            }),
            success: self.success,
        }
    }
}

/// Writes one episode, optionally with its labels (matched by position).
pub fn write_episode<W: Write>(
    out: &mut W,
    episode: &Episode,
    labels: Option<&[LabeledFrame]>,
) -> Result<(), LogError> {
    for (i, frame) in episode.frames.iter().enumerate() {
        let rec = LogRecord::from_frame(episode, frame, labels.and_then(|l| l.get(i)));
        serde_json::to_writer(&mut *out, &rec).map_err(|e| LogError::Json { line: i + 1, source: e })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<LogRecord>, LogError> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line).map_err(|e| LogError::Json { line: i + 1, source: e })?;
        if rec.schema_version != LOG_SCHEMA_VERSION {
            return Err(LogError::Version {
                line: i + 1,
                found: rec.schema_version,
            });
        }
        records.push(rec);
    }
    Ok(records)
}

/// Groups consecutive records into episodes; frames must be contiguous from 0.
pub fn read_episodes<R: BufRead>(input: R) -> Result<Vec<Episode>, LogError> {
    let mut episodes: Vec<Episode> = Vec::new();
    for (i, rec) in read_records(input)?.into_iter().enumerate() {
        let start_new = episodes.last().is_none_or(|e| e.id != rec.episode);
        if start_new {
            episodes.push(Episode {
                id: rec.episode,
                direction: rec.direction,
                kind: rec.kind,
                frames: Vec::new(),
            });
        }
        let ep = episodes.last_mut().expect("just pushed");
        if rec.t != ep.frames.len() {
            return Err(LogError::Order {
                line: i + 1,
                episode: rec.episode,
                t: rec.t,
            });
        }
        ep.frames.push(rec.frame());
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{reset, rollout, scripted_expert, BinSide, ExpertConfig, SimParams, TaskPair};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn episode() -> Episode {
        let pair = TaskPair::bin_sort(BinSide::Right);
        let p = SimParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ExpertConfig {
            noise: 0.2,
            ..Default::default()
        };
        rollout(
            &pair.forward,
            &p,
            reset(&pair.forward, &p, 2, true),
            7,
            EpisodeKind::Demo,
            |s| scripted_expert(&pair.forward, &p, &cfg, s, &mut rng).action,
        )
    }

    #[test]
    fn round_trip() {
        let ep = episode();
        let mut buf = Vec::new();
        write_episode(&mut buf, &ep, None).unwrap();
        write_episode(&mut buf, &Episode { id: 8, ..ep.clone() }, None).unwrap();
        let back = read_episodes(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(
            back[0],
            Episode {
                frames: back[0].frames.clone(),
                ..ep.clone()
            }
        );
        for (a, b) in back[0].frames.iter().zip(&ep.frames) {
            assert_eq!(a.state.effector, b.state.effector);
            assert_eq!(a.state.objects, b.state.objects);
            assert_eq!(a.action, b.action);
            assert_eq!(a.success, b.success);
        }
    }

    #[test]
    fn line_has_documented_fields() {
        let ep = episode();
        let mut buf = Vec::new();
        write_episode(&mut buf, &ep, None).unwrap();
        let first: serde_json::Value =
            serde_json::from_str(std::str::from_utf8(&buf).unwrap().lines().next().unwrap()).unwrap();
        for key in [
            "schema_version",
            "t",
            "effector",
            "gripper",
            "objects",
            "action",
            "pixel_robot",
            "pixel_objects",
            "r_sparse",
            "r_dense",
            "r",
        ] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn rejects_bad_version_and_order() {
        let ep = episode();
        let mut buf = Vec::new();
        write_episode(&mut buf, &ep, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let bumped = text.replacen("\"schema_version\":1", "\"schema_version\":9", 1);
        assert!(matches!(
            read_episodes(bumped.as_bytes()),
            Err(LogError::Version { line: 1, .. })
        ));
        let skipped: String = text
            .lines()
            .enumerate()
            .filter(|(i, _)| *i != 1)
            .map(|(_, l)| format!("{l}\n"))
            .collect();
        assert!(matches!(
            read_episodes(skipped.as_bytes()),
            Err(LogError::Order { line: 2, .. })
        ));
        assert!(matches!(
            read_episodes("{not json".as_bytes()),
            Err(LogError::Json { line: 1, .. })
        ));
    }
}
