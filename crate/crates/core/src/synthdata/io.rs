//! Corpus directory export: one `DCLP` binary file per clip plus an
//! `index.jsonl` mapping clip ids to labels and file names.
//!
//! Clip file layout: `"DCLP" | version: u32 | identity, emotion, intensity: u32`
//! followed by the visual, audio and latent tensors.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, read_magic, read_tensor, read_u32, read_version, write_tensor, write_u32};
use crate::error::{Error, Result};

use super::{ClipRecord, FeatureSequence, Modality};

pub const CLIP_MAGIC: &[u8; 4] = b"DCLP";
const INDEX_FILE: &str = "index.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub clip_id: u32,
    pub video_id: u32,
    pub identity: u32,
    pub emotion: u32,
    pub intensity: u32,
    pub file: String,
}

pub fn export_corpus(corpus: &[ClipRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = checkpoint::create(&dir.join(INDEX_FILE))?;
    for clip in corpus {
        let file = format!("clip_{:05}.dclp", clip.clip_id);
        let mut w = checkpoint::create(&dir.join(&file))?;
        w.write_all(CLIP_MAGIC)?;
        write_u32(&mut w, checkpoint::FORMAT_VERSION)?;
        write_u32(&mut w, clip.identity)?;
        write_u32(&mut w, clip.emotion)?;
        write_u32(&mut w, clip.intensity)?;
        write_tensor(&mut w, &clip.visual.frames)?;
        write_tensor(&mut w, &clip.audio.frames)?;
        write_tensor(&mut w, &clip.latent_video)?;
        w.flush()?;
        let entry = IndexEntry {
            clip_id: clip.clip_id,
            video_id: clip.video_id,
            identity: clip.identity,
            emotion: clip.emotion,
            intensity: clip.intensity,
            file,
        };
        serde_json::to_writer(&mut index, &entry)?;
        index.write_all(b"\n")?;
    }
    index.flush()?;
    Ok(())
}

/// Reads a corpus directory back. Tensors come back rounded to `f32`.
pub fn import_corpus(dir: &Path) -> Result<Vec<ClipRecord>> {
    let index = BufReader::new(fs::File::open(dir.join(INDEX_FILE))?);
    let mut clips = Vec::new();
    for line in index.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: IndexEntry = serde_json::from_str(&line)?;
        let mut r = checkpoint::open(&dir.join(&entry.file))?;
        read_magic(&mut r, CLIP_MAGIC)?;
        read_version(&mut r)?;
        let labels = [read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?];
        if labels != [entry.identity, entry.emotion, entry.intensity] {
            return Err(Error::data(format!("labels in {} disagree with the index", entry.file)));
        }
        let visual = read_tensor(&mut r)?;
        let audio = read_tensor(&mut r)?;
        let latent = read_tensor(&mut r)?;
        if visual.shape() != audio.shape() || visual.rank() != 2 || latent.shape()[0] != visual.rows() {
            return Err(Error::data(format!("inconsistent tensor shapes in {}", entry.file)));
        }
        clips.push(ClipRecord {
            clip_id: entry.clip_id,
            video_id: entry.video_id,
            identity: entry.identity,
            emotion: entry.emotion,
            intensity: entry.intensity,
            visual: FeatureSequence::new(visual, Modality::Visual),
            audio: FeatureSequence::new(audio, Modality::Audio),
            latent_video: latent,
        });
    }
    Ok(clips)
}
