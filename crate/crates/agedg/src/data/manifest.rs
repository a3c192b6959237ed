//! Manifest CSV and its sidecar vector file.
//!
//! A manifest is UTF-8 CSV with header `id,path,age,emotion,valence,arousal`.
//! The `path` column either names an external image file (existence checked,
//! decoding out of scope here) or reads `vecs:<row>`, an index into the
//! sidecar array file that sits next to the manifest with a `.vecs`
//! extension. The sidecar is little-endian binary: an 8-byte magic, a mode
//! word, three shape words, a count, then `count * len` f64 values. Floats
//! round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::data::{
    assign_age_group, AffectAnnotation, EmotionClass, InputShape, Sample,
};
use crate::error::{AgedgError, Result};

const MAGIC: &[u8; 8] = b"AGDGVEC1";
const MANIFEST_HEADER: [&str; 6] = ["id", "path", "age", "emotion", "valence", "arousal"];

#[derive(Debug)]
pub struct LoadedManifest {
    pub samples: Vec<Sample>,
    pub shape: InputShape,
    /// Rows rejected because the age fell outside [18, 85].
    pub skipped_out_of_range: usize,
}

impl LoadedManifest {
    /// Carves deterministic per-domain validation/test fractions off the
    /// loaded samples.
    pub fn into_split(
        self,
        val_fraction: f64,
        test_fraction: f64,
        seed: u64,
    ) -> Result<crate::data::DomainSplit> {
        crate::data::split_by_domain(self.samples, self.shape, val_fraction, test_fraction, seed)
    }
}

fn sidecar_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("vecs")
}

/// Writes `samples` as a manifest CSV plus sidecar `.vecs` file; every
/// row's path points into the sidecar.
pub fn write_manifest(samples: &[Sample], shape: InputShape, path: &Path) -> Result<()> {
    let len = shape.len();
    for s in samples {
        if s.input.len() != len {
            return Err(AgedgError::ShapeMismatch {
                context: format!("sample {}", s.id),
                detail: format!("input length {} != declared shape length {len}", s.input.len()),
            });
        }
    }

    let vec_path = sidecar_path(path);
    let f = File::create(&vec_path).map_err(|e| AgedgError::io(vec_path.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    let io_err = |e| AgedgError::io(vec_path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io_err)?;
    let (mode, d0, d1, d2) = match shape {
        InputShape::Vector { dim } => (0u32, dim as u32, 0, 0),
        InputShape::Image { c, h, w } => (1u32, c as u32, h as u32, w as u32),
    };
    for word in [mode, d0, d1, d2] {
        w.write_all(&word.to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(&(samples.len() as u64).to_le_bytes()).map_err(io_err)?;
    for s in samples {
        for &v in &s.input {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;

    let mut csv_w = csv::Writer::from_path(path)?;
    csv_w.write_record(MANIFEST_HEADER)?;
    for (i, s) in samples.iter().enumerate() {
        csv_w.write_record([
            s.id.as_str(),
            &format!("vecs:{i}"),
            &s.apparent_age.to_string(),
            s.annotation.emotion.name(),
            &s.annotation.valence.to_string(),
            &s.annotation.arousal.to_string(),
        ])?;
    }
    csv_w.flush().map_err(|e| AgedgError::io(path.display().to_string(), e))?;
    Ok(())
}

fn read_sidecar(path: &Path) -> Result<(InputShape, Vec<Vec<f64>>)> {
    let f = File::open(path).map_err(|e| AgedgError::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(f);
    let io_err = |e| AgedgError::io(path.display().to_string(), e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(AgedgError::Config(format!(
            "{} is not a sidecar vector file (bad magic)",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    let mut words = [0u32; 4];
    for slot in &mut words {
        r.read_exact(&mut word).map_err(io_err)?;
        *slot = u32::from_le_bytes(word);
    }
    let shape = match words[0] {
        0 => InputShape::Vector { dim: words[1] as usize },
        1 => InputShape::Image {
            c: words[1] as usize,
            h: words[2] as usize,
            w: words[3] as usize,
        },
        m => {
            return Err(AgedgError::Config(format!(
                "{}: unknown sidecar mode {m}",
                path.display()
            )))
        }
    };
    let mut count_bytes = [0u8; 8];
    r.read_exact(&mut count_bytes).map_err(io_err)?;
    let count = u64::from_le_bytes(count_bytes) as usize;
    let len = shape.len();

    let mut rows = Vec::with_capacity(count);
    let mut buf = vec![0u8; len * 8];
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(io_err)?;
        rows.push(
            buf.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    Ok((shape, rows))
}

/// Loads a manifest. Ages outside [18, 85] reject the row and count it in
/// `skipped_out_of_range`; any other malformed field is an error naming
/// the row and field. Row numbers in errors are 1-based data rows.
pub fn load_manifest(path: &Path) -> Result<LoadedManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let err_at = |row: usize, message: String| AgedgError::Manifest {
        path: path.display().to_string(),
        row,
        message,
    };

    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(err_at(
            0,
            format!(
                "unexpected header {:?}, want {:?}",
                headers.iter().collect::<Vec<_>>(),
                MANIFEST_HEADER
            ),
        ));
    }

    let mut sidecar: Option<(InputShape, Vec<Vec<f64>>)> = None;
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    let mut seen_ids = std::collections::HashSet::new();

    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != MANIFEST_HEADER.len() {
            return Err(err_at(row, format!("expected 6 fields, got {}", record.len())));
        }
        let field = |k: usize| record.get(k).unwrap_or("");

        let age: f64 = field(2)
            .parse()
            .map_err(|_| err_at(row, format!("age {:?} is not a number", field(2))))?;
        let emotion: EmotionClass = field(3)
            .parse()
            .map_err(|e| err_at(row, e))?;
        let valence: f64 = field(4)
            .parse()
            .map_err(|_| err_at(row, format!("valence {:?} is not a number", field(4))))?;
        let arousal: f64 = field(5)
            .parse()
            .map_err(|_| err_at(row, format!("arousal {:?} is not a number", field(5))))?;

        let domain = match assign_age_group(age) {
            Ok(g) => g,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        if !(-1.0..=1.0).contains(&valence) {
            return Err(err_at(row, format!("valence {valence} out of range [-1, 1]")));
        }
        if !(-1.0..=1.0).contains(&arousal) {
            return Err(err_at(row, format!("arousal {arousal} out of range [-1, 1]")));
        }

        let id = field(0).to_string();
        if id.is_empty() {
            return Err(err_at(row, "empty id".to_string()));
        }
        if !seen_ids.insert(id.clone()) {
            return Err(AgedgError::DuplicateId { id });
        }

        let input = match field(1).strip_prefix("vecs:") {
            Some(idx_str) => {
                let idx: usize = idx_str
                    .parse()
                    .map_err(|_| err_at(row, format!("bad sidecar index {idx_str:?}")))?;
                if sidecar.is_none() {
                    sidecar = Some(read_sidecar(&sidecar_path(path))?);
                }
                let (_, rows) = sidecar.as_ref().unwrap();
                rows.get(idx)
                    .cloned()
                    .ok_or_else(|| {
                        err_at(row, format!("sidecar index {idx} out of bounds ({} rows)", rows.len()))
                    })?
            }
            None => {
                let p = Path::new(field(1));
                if !p.exists() {
                    return Err(err_at(row, format!("input file {:?} does not exist", field(1))));
                }
                return Err(err_at(
                    row,
                    "external image decoding is not supported; reference a vecs: sidecar".to_string(),
                ));
            }
        };

        samples.push(Sample {
            id,
            input,
            apparent_age: age,
            annotation: AffectAnnotation { emotion, valence, arousal },
            domain,
        });
    }

    let shape = match &sidecar {
        Some((shape, _)) => *shape,
        None => {
            return Err(err_at(0, "manifest contains no usable rows".to_string()));
        }
    };
    for s in &samples {
        if s.input.len() != shape.len() {
            return Err(AgedgError::ShapeMismatch {
                context: format!("sample {}", s.id),
                detail: format!("input length {} != sidecar shape {}", s.input.len(), shape.len()),
            });
        }
    }

    Ok(LoadedManifest {
        samples,
        shape,
        skipped_out_of_range: skipped,
    })
}
