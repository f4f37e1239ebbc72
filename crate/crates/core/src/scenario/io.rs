//! Versioned JSON scenario files with run-length-encoded masks.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BoxState, GtObject, Scenario};
use crate::error::{Error, Result};

const FORMAT_VERSION: u32 = 1;

/// Run-length encoding of a binary mask: `(start, length)` runs of set
/// pixels over row-major order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rle(pub Vec<(u32, u32)>);

impl Rle {
    pub fn encode(mask: &[bool]) -> Self {
        let mut runs = Vec::new();
        let mut i = 0;
        while i < mask.len() {
            if mask[i] {
                let start = i;
                while i < mask.len() && mask[i] {
                    i += 1;
                }
                runs.push((start as u32, (i - start) as u32));
            } else {
                i += 1;
            }
        }
        Rle(runs)
    }

    pub fn decode(&self, len: usize) -> Result<Vec<bool>> {
        let mut out = vec![false; len];
        let mut prev_end = 0usize;
        for &(start, n) in &self.0 {
            let (s, e) = (start as usize, start as usize + n as usize);
            if n == 0 || s < prev_end || e > len {
                return Err(Error::Input(format!(
                    "invalid run ({start}, {n}) for mask of {len} pixels"
                )));
            }
            out[s..e].iter_mut().for_each(|b| *b = true);
            prev_end = e;
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileObject {
    id: u32,
    class: usize,
    birth: usize,
    death: usize,
    prototype: Vec<f64>,
    trajectory: Vec<BoxState>,
    /// One entry per frame `1..=T`.
    masks: Vec<Rle>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileScenario {
    version: u32,
    #[serde(rename = "T")]
    frames: usize,
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    seed: u64,
    num_classes: usize,
    objects: Vec<FileObject>,
}

fn to_file(scn: &Scenario) -> FileScenario {
    FileScenario {
        version: FORMAT_VERSION,
        frames: scn.frames,
        height: scn.height,
        width: scn.width,
        seed: scn.seed,
        num_classes: scn.num_classes,
        objects: scn
            .objects
            .iter()
            .map(|o| FileObject {
                id: o.id,
                class: o.class_id,
                birth: o.birth,
                death: o.death,
                prototype: o.prototype.clone(),
                trajectory: o.trajectory.clone(),
                masks: o.masks.iter().map(|m| Rle::encode(m)).collect(),
            })
            .collect(),
    }
}

/// Serializes a scenario to pretty-printed JSON bytes.
pub fn scenario_to_file(scn: &Scenario) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(&to_file(scn)).expect("scenario serializes");
    bytes.push(b'\n');
    bytes
}

/// Parses and validates a scenario file.
pub fn scenario_from_file(bytes: &[u8]) -> Result<Scenario> {
    let value: serde_json::Value = serde_json::from_slice(bytes)
        .map_err(|e| Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::parse(
                "field `version`",
                format!("unsupported version {v}, expected {FORMAT_VERSION}"),
            ))
        }
        None => return Err(Error::parse("field `version`", "missing or not an integer")),
    }
    let file: FileScenario = serde_json::from_value(value)
        .map_err(|e| Error::parse("scenario", e.to_string()))?;
    if file.objects.is_empty() {
        return Err(Error::parse("field `objects`", "scenario has no objects"));
    }
    let npix = file.height * file.width;
    let mut objects = Vec::with_capacity(file.objects.len());
    for (k, o) in file.objects.into_iter().enumerate() {
        let masks = o
            .masks
            .iter()
            .enumerate()
            .map(|(t, r)| {
                r.decode(npix).map_err(|e| {
                    Error::parse(format!("objects[{k}].masks[{t}]"), e.to_string())
                })
            })
            .collect::<Result<Vec<_>>>()?;
        objects.push(GtObject {
            id: o.id,
            class_id: o.class,
            birth: o.birth,
            death: o.death,
            trajectory: o.trajectory,
            prototype: o.prototype,
            masks,
        });
    }
    let scn = Scenario {
        frames: file.frames,
        height: file.height,
        width: file.width,
        num_classes: file.num_classes,
        seed: file.seed,
        objects,
    };
    scn.validate()
        .map_err(|e| Error::parse("scenario", e.to_string()))?;
    Ok(scn)
}

/// Hex SHA-256 of the canonical (compact) serialization.
pub fn scenario_digest(scn: &Scenario) -> String {
    let bytes = serde_json::to_vec(&to_file(scn)).expect("scenario serializes");
    hex::encode(Sha256::digest(&bytes))
}
