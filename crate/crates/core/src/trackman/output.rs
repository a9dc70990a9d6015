//! Track output files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrackMemory;
use crate::error::Result;
use crate::geometry::{BBox, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackFrameJson {
    pub t: usize,
    pub active: bool,
    #[serde(rename = "box")]
    pub bbox: Option<[f64; 4]>,
    pub scores: Vec<f64>,
    /// Base64 cells, see [`Mask::to_base64`].
    pub mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackJson {
    pub id: u32,
    pub birth_frame: usize,
    pub frames: Vec<TrackFrameJson>,
}

impl TrackJson {
    pub fn mask_at(&self, t: usize, grid: usize) -> Result<Option<Mask>> {
        match self.frames.iter().find(|f| f.t == t).and_then(|f| f.mask.as_ref()) {
            Some(m) => {
                let mask = Mask::from_base64(m)?;
                if mask.size() != grid {
                    return Err(crate::Error::invalid(format!(
                        "track {} frame {t}: mask size {} does not match grid {grid}",
                        self.id,
                        mask.size()
                    )));
                }
                Ok(Some(mask))
            }
            None => Ok(None),
        }
    }

    pub fn box_at(&self, t: usize) -> Option<BBox> {
        let f = self.frames.iter().find(|f| f.t == t)?;
        f.bbox.map(|b| BBox::new(b[0], b[1], b[2], b[3]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracksFile {
    pub grid: usize,
    pub num_frames: usize,
    pub tracks: Vec<TrackJson>,
    /// Free-form provenance (configuration, seed) stamped by the caller.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl TracksFile {
    pub fn from_memory(memory: &TrackMemory, grid: usize) -> Self {
        let tracks = memory
            .tracks
            .iter()
            .map(|tr| TrackJson {
                id: tr.id,
                birth_frame: tr.birth_frame,
                frames: tr
                    .records
                    .iter()
                    .map(|r| TrackFrameJson {
                        t: r.t,
                        active: r.active,
                        bbox: r.bbox.map(|b| b.to_array()),
                        scores: r.scores.clone(),
                        mask: r.mask.as_ref().map(Mask::to_base64),
                    })
                    .collect(),
            })
            .collect();
        Self {
            grid,
            num_frames: memory.frame,
            tracks,
            meta: None,
        }
    }
}

pub fn write_tracks<W: Write>(file: &TracksFile, out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, file)?;
    Ok(())
}

pub fn read_tracks<R: Read>(input: R) -> Result<TracksFile> {
    Ok(serde_json::from_reader(input)?)
}

pub fn save_tracks_json(file: &TracksFile, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tracks(file, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_tracks_json(path: impl AsRef<Path>) -> Result<TracksFile> {
    read_tracks(BufReader::new(File::open(path)?))
}
