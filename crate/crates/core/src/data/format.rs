//! Line-delimited JSON dataset files.
//!
//! The first line is a header `{"format":"crossmodal-dataset","version":1}`;
//! every following line is one record. Feature matrices are stored as
//! base64 little-endian `f64` with an explicit shape.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{DataError, MultimodalExample, NUM_EMOTIONS};
use crate::numerics::Tensor;

pub const FORMAT_NAME: &str = "crossmodal-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Payload {
    shape: [usize; 2],
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    words: Vec<String>,
    boundaries: Vec<[f64; 2]>,
    audio: Payload,
    visual: Payload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    emotions: Option<[f64; NUM_EMOTIONS]>,
}

fn encode(t: &Tensor) -> Payload {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Payload {
        shape: [t.rows(), t.cols()],
        data: STANDARD.encode(bytes),
    }
}

fn decode(p: &Payload, id: &str, field: &str) -> Result<Tensor, DataError> {
    let err = |message: String| DataError::Record {
        id: id.to_string(),
        field: format!("{field}.data"),
        message,
    };
    let bytes = STANDARD
        .decode(&p.data)
        .map_err(|e| err(format!("invalid base64: {e}")))?;
    let expected = p.shape[0] * p.shape[1] * 8;
    if bytes.len() < expected {
        return Err(err(format!(
            "truncated payload: expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(err(format!(
            "payload has {} bytes, shape needs {expected}",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(p.shape.to_vec(), data)?)
}

fn parse_line<'de, T: Deserialize<'de>>(line: &'de str, number: usize) -> Result<T, DataError> {
    let de = &mut serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(de).map_err(|e| DataError::Format {
        line: number,
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn read_dataset_from<R: BufRead>(reader: R) -> Result<Vec<MultimodalExample>, DataError> {
    let mut examples = Vec::new();
    let mut header_seen = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let number = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            let h: Header = parse_line(&line, number)?;
            if h.format != FORMAT_NAME || h.version != FORMAT_VERSION {
                return Err(DataError::Format {
                    line: number,
                    path: "version".into(),
                    message: format!(
                        "unsupported dataset {} v{}, expected {FORMAT_NAME} v{FORMAT_VERSION}",
                        h.format, h.version
                    ),
                });
            }
            header_seen = true;
            continue;
        }
        let r: Record = parse_line(&line, number)?;
        if r.words.len() != r.boundaries.len() {
            return Err(DataError::Format {
                line: number,
                path: "boundaries".into(),
                message: format!(
                    "{} boundaries for {} words",
                    r.boundaries.len(),
                    r.words.len()
                ),
            });
        }
        examples.push(MultimodalExample {
            audio: decode(&r.audio, &r.id, "audio")?,
            visual: decode(&r.visual, &r.id, "visual")?,
            boundaries: r.boundaries.iter().map(|b| (b[0], b[1])).collect(),
            words: r.words,
            emotions: r.emotions,
            id: r.id,
        });
    }
    Ok(examples)
}

pub fn read_dataset(path: &Path) -> Result<Vec<MultimodalExample>, DataError> {
    read_dataset_from(BufReader::new(fs::File::open(path)?))
}

pub fn write_dataset_to<W: Write>(
    mut writer: W,
    examples: &[MultimodalExample],
) -> Result<(), DataError> {
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
    };
    serde_json::to_writer(&mut writer, &header).map_err(std::io::Error::from)?;
    writer.write_all(b"\n")?;
    for ex in examples {
        let r = Record {
            id: ex.id.clone(),
            words: ex.words.clone(),
            boundaries: ex.boundaries.iter().map(|&(s, e)| [s, e]).collect(),
            audio: encode(&ex.audio),
            visual: encode(&ex.visual),
            emotions: ex.emotions,
        };
        serde_json::to_writer(&mut writer, &r).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_dataset(path: &Path, examples: &[MultimodalExample]) -> Result<(), DataError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        write_dataset_to(&mut w, examples)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
