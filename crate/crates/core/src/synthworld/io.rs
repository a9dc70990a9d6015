//! JSON Lines encoding of detection streams and ground truth, one frame per line.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Detection, DetectionSequence, GroundTruthSequence, GtFrame, GtObject, Provenance};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    scores: Vec<f64>,
    mask: String,
    appearance: Vec<f64>,
    /// Ground-truth id, or -1 for a false positive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    frame: usize,
    detections: Vec<DetRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    appearance_dim: Option<usize>,
}

fn bbox_of(a: [f64; 4]) -> BBox {
    BBox::new(a[0], a[1], a[2], a[3])
}

fn encode_detection(d: &Detection) -> DetRecord {
    DetRecord {
        bbox: d.bbox.to_array(),
        scores: d.scores.clone(),
        mask: d.mask.to_base64(),
        appearance: d.appearance.clone(),
        source: match d.source {
            Provenance::Object(id) => Some(id as i64),
            Provenance::FalsePositive => Some(-1),
            Provenance::Unknown => None,
        },
        id: None,
        class: None,
    }
}

pub fn write_detections<W: Write>(seq: &DetectionSequence, mut out: W) -> Result<()> {
    for (t, frame) in seq.frames.iter().enumerate() {
        let rec = FrameRecord {
            frame: t,
            detections: frame.iter().map(encode_detection).collect(),
            grid: None,
            num_classes: None,
            appearance_dim: None,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn parse_lines<R: BufRead>(input: R) -> Result<Vec<(usize, FrameRecord)>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.frame != out.len() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected frame {}, found {}", out.len(), rec.frame),
            });
        }
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn decode_detection(line: usize, r: DetRecord) -> Result<Detection> {
    let perr = |msg: String| Error::Parse { line, msg };
    let mask = Mask::from_base64(&r.mask).map_err(|e| perr(e.to_string()))?;
    if r.scores.len() < 2 {
        return Err(perr("scores need at least one class plus background".into()));
    }
    let source = match r.source {
        None => Provenance::Unknown,
        Some(-1) => Provenance::FalsePositive,
        Some(id) if id >= 0 => Provenance::Object(id as u32),
        Some(id) => return Err(perr(format!("invalid source {id}"))),
    };
    Ok(Detection {
        bbox: bbox_of(r.bbox),
        scores: r.scores,
        mask,
        appearance: r.appearance,
        source,
    })
}

pub fn read_detections<R: BufRead>(input: R) -> Result<DetectionSequence> {
    let mut frames = Vec::new();
    for (line, rec) in parse_lines(input)? {
        let dets = rec
            .detections
            .into_iter()
            .map(|d| decode_detection(line, d))
            .collect::<Result<Vec<_>>>()?;
        frames.push(dets);
    }
    Ok(DetectionSequence { frames })
}

pub fn save_detections_jsonl(seq: &DetectionSequence, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_detections(seq, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_detections_jsonl(path: impl AsRef<Path>) -> Result<DetectionSequence> {
    read_detections(BufReader::new(fs::File::open(path)?))
}

/// Ground truth uses the detection schema with one-hot scores plus `id` and
/// `class`; each line also carries `grid`, `num_classes` and `appearance_dim` so worlds without
/// objects round-trip.
pub fn write_gt<W: Write>(gt: &GroundTruthSequence, mut out: W) -> Result<()> {
    for t in 0..gt.frames {
        let mut detections = Vec::new();
        for obj in &gt.objects {
            if let Some(Some(f)) = obj.frames.get(t) {
                let mut scores = vec![0.0; gt.num_classes + 1];
                scores[obj.class] = 1.0;
                detections.push(DetRecord {
                    bbox: f.bbox.to_array(),
                    scores,
                    mask: f.mask.to_base64(),
                    appearance: obj.appearance.clone(),
                    source: None,
                    id: Some(obj.id),
                    class: Some(obj.class),
                });
            }
        }
        let rec = FrameRecord {
            frame: t,
            detections,
            grid: Some(gt.grid),
            num_classes: Some(gt.num_classes),
            appearance_dim: Some(gt.appearance_dim),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_gt<R: BufRead>(input: R) -> Result<GroundTruthSequence> {
    let records = parse_lines(input)?;
    let frames = records.len();
    let mut grid = None;
    let mut num_classes = None;
    let mut appearance_dim = None;
    let mut objects: Vec<GtObject> = Vec::new();
    for (t, (line, rec)) in records.into_iter().enumerate() {
        let perr = |msg: String| Error::Parse { line, msg };
        grid = grid.or(rec.grid);
        num_classes = num_classes.or(rec.num_classes);
        appearance_dim = appearance_dim.or(rec.appearance_dim);
        for d in rec.detections {
            let id = d.id.ok_or_else(|| perr("ground-truth object without id".into()))?;
            let class = d.class.ok_or_else(|| perr("ground-truth object without class".into()))?;
            let mask = Mask::from_base64(&d.mask).map_err(|e| perr(e.to_string()))?;
            grid = grid.or(Some(mask.size()));
            num_classes = num_classes.or(Some(d.scores.len().saturating_sub(1)));
            appearance_dim = appearance_dim.or(Some(d.appearance.len()));
            let pos = match objects.iter().position(|o| o.id == id) {
                Some(p) => p,
                None => {
                    objects.push(GtObject {
                        id,
                        class,
                        appearance: d.appearance.clone(),
                        frames: vec![None; frames],
                    });
                    objects.len() - 1
                }
            };
            if objects[pos].class != class {
                return Err(perr(format!("object {id} changes class")));
            }
            if objects[pos].frames[t].is_some() {
                return Err(perr(format!("object {id} appears twice in frame {t}")));
            }
            objects[pos].frames[t] = Some(GtFrame {
                bbox: bbox_of(d.bbox),
                mask,
            });
        }
    }
    objects.sort_by_key(|o| o.id);
    Ok(GroundTruthSequence {
        frames,
        grid: grid.unwrap_or(0),
        num_classes: num_classes.unwrap_or(0),
        appearance_dim: appearance_dim.unwrap_or(0),
        objects,
    })
}

pub fn save_gt_jsonl(gt: &GroundTruthSequence, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_gt(gt, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_gt_jsonl(path: impl AsRef<Path>) -> Result<GroundTruthSequence> {
    read_gt(BufReader::new(fs::File::open(path)?))
}
