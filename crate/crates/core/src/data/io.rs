//! FEAT feature files and the tab-separated corpus manifest.
//!
//! FEAT (little-endian): `"FEAT"`, `u32` version (1), `u32` frames,
//! `u32` feat_dim, then `frames * feat_dim` f32 values, row-major.
//!
//! Manifest (`manifest.tsv`, UTF-8): one line per utterance,
//! `id <TAB> relative/path.feat <TAB> frames <TAB> transcript`.

use std::fmt::Write as _;
use std::path::Path;

use super::Utterance;
use crate::error::{Error, Result};

pub const FEAT_MAGIC: [u8; 4] = *b"FEAT";
pub const FEAT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.tsv";

pub fn write_feat(frames: usize, feat_dim: usize, features: &[f32]) -> Result<Vec<u8>> {
    if features.len() != frames * feat_dim {
        return Err(Error::shape(
            "write_feat",
            &[frames, feat_dim],
            &[features.len()],
        ));
    }
    let mut buf = Vec::with_capacity(16 + features.len() * 4);
    buf.extend_from_slice(&FEAT_MAGIC);
    buf.extend_from_slice(&FEAT_VERSION.to_le_bytes());
    for v in [frames, feat_dim] {
        let v =
            u32::try_from(v).map_err(|_| Error::Contract("FEAT dimension exceeds u32".into()))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for x in features {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    Ok(buf)
}

/// Parses a FEAT file into `(frames, feat_dim, values)`.
pub fn read_feat(bytes: &[u8], what: &str) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < 16 {
        if bytes.len() >= 4 && bytes[..4] != FEAT_MAGIC {
            return Err(Error::BadMagic {
                what: what.into(),
                expected: FEAT_MAGIC,
                found: [bytes[0], bytes[1], bytes[2], bytes[3]],
            });
        }
        return Err(Error::Truncated(format!("{what} header")));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    if bytes[..4] != FEAT_MAGIC {
        return Err(Error::BadMagic {
            what: what.into(),
            expected: FEAT_MAGIC,
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
        });
    }
    let version = word(4);
    if version != FEAT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: what.into(),
            version,
        });
    }
    let (frames, feat_dim) = (word(8) as usize, word(12) as usize);
    let body = &bytes[16..];
    let expected = frames * feat_dim * 4;
    if body.len() < expected {
        return Err(Error::Truncated(format!(
            "{what}: {} of {expected} payload bytes",
            body.len()
        )));
    }
    if body.len() > expected {
        return Err(Error::Integrity {
            id: what.into(),
            reason: format!("{} trailing bytes", body.len() - expected),
        });
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((frames, feat_dim, values))
}

fn check_text(field: &str, id: &str, s: &str) -> Result<()> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::Integrity {
            id: id.into(),
            reason: format!("{field} contains a tab or newline"),
        });
    }
    Ok(())
}

/// Writes `dir/manifest.tsv` and `dir/feats/<id>.feat`.
pub fn save_corpus(dir: impl AsRef<Path>, utterances: &[Utterance]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("feats"))?;
    let mut manifest = String::new();
    for u in utterances {
        check_text("id", &u.id, &u.id)?;
        check_text("transcript", &u.id, &u.transcript)?;
        if u.id.contains(['/', '\\']) || u.id.is_empty() {
            return Err(Error::Integrity {
                id: u.id.clone(),
                reason: "id is not usable as a file name".into(),
            });
        }
        let rel = format!("feats/{}.feat", u.id);
        std::fs::write(
            dir.join(&rel),
            write_feat(u.frames, u.feat_dim, &u.features)?,
        )?;
        writeln!(
            manifest,
            "{}\t{}\t{}\t{}",
            u.id, rel, u.frames, u.transcript
        )
        .expect("writing to a String");
    }
    std::fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

/// Reads a corpus, re-checking every manifest entry against its FEAT file.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let dir = dir.as_ref();
    let manifest = std::fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let mut out = Vec::new();
    for (n, line) in manifest.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(4, '\t').collect();
        if fields.len() != 4 {
            return Err(Error::Manifest {
                line: n + 1,
                reason: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let (id, rel, frames, transcript) = (fields[0], fields[1], fields[2], fields[3]);
        let frames: usize = frames.parse().map_err(|_| Error::Manifest {
            line: n + 1,
            reason: format!("frame count `{frames}` is not an integer"),
        })?;
        let bytes = std::fs::read(dir.join(rel))?;
        let (t, feat_dim, features) = read_feat(&bytes, rel)?;
        if t != frames {
            return Err(Error::Integrity {
                id: id.into(),
                reason: format!("manifest says {frames} frames, feature file has {t}"),
            });
        }
        out.push(Utterance {
            id: id.into(),
            features,
            frames,
            feat_dim,
            transcript: transcript.into(),
        });
    }
    Ok(out)
}
