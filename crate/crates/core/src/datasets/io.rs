//! Dataset directories: `meta.json` plus one JSON record per path in
//! `paths.jsonl`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Dataset, GenerationConfig, ModelSpec, Role};
use crate::error::{Error, Result};
use crate::paths::{ObservationPattern, PathSample, TimeGrid};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    version: u32,
    spec: ModelSpec,
    config: GenerationConfig,
    role: Role,
    count: usize,
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        version: DATASET_FORMAT_VERSION,
        spec: ds.spec,
        config: ds.config.clone(),
        role: ds.role,
        count: ds.samples.len(),
    };
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;

    let paths_path = dir.join("paths.jsonl");
    let file = File::create(&paths_path).map_err(|e| Error::io(&paths_path, e))?;
    let mut w = BufWriter::new(file);
    for s in &ds.samples {
        let p = s.pattern();
        let mut rec = json!({
            "times": s.grid().times(),
            "dt": s.grid().dt(),
            "u": rows(s.u()),
            "v": rows(s.v()),
            "obs_indices": p.obs_indices(),
            "masks": p.masks().iter()
                .map(|m| m.iter().map(|&b| u8::from(b)).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
            "latent": s.latent(),
        });
        if let Some(noisy) = s.noisy_v() {
            rec["noisy_v"] = json!(rows(noisy));
        }
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::invalid(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(&paths_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&paths_path, e))
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let raw: Value = serde_json::from_str(&text)
        .map_err(|e| Error::parse(format!("{}:{}", meta_path.display(), e.line()), "meta", e))?;
    match raw.get("version").and_then(Value::as_u64) {
        Some(v) if v == u64::from(DATASET_FORMAT_VERSION) => {}
        Some(v) => {
            return Err(Error::UnsupportedVersion {
                found: u32::try_from(v).unwrap_or(u32::MAX),
                expected: DATASET_FORMAT_VERSION,
            })
        }
        None => {
            return Err(Error::parse(
                meta_path.display().to_string(),
                "version",
                "missing or not an integer",
            ))
        }
    }
    let meta: Meta = serde_json::from_value(raw)
        .map_err(|e| Error::parse(meta_path.display().to_string(), "meta", e))?;

    let paths_path = dir.join("paths.jsonl");
    let file = File::open(&paths_path).map_err(|e| Error::io(&paths_path, e))?;
    let mut samples = Vec::with_capacity(meta.count);
    let mut grid: Option<Arc<TimeGrid>> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&paths_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("{} line {}", paths_path.display(), i + 1);
        samples.push(parse_record(&line, &loc, &meta, &mut grid)?);
    }
    if samples.len() != meta.count {
        return Err(Error::parse(
            paths_path.display().to_string(),
            "count",
            format!(
                "meta.json declares {} paths, found {}",
                meta.count,
                samples.len()
            ),
        ));
    }
    Ok(Dataset {
        spec: meta.spec,
        config: meta.config,
        role: meta.role,
        samples,
    })
}

fn field<'a>(rec: &'a Value, name: &str, loc: &str) -> Result<&'a Value> {
    rec.get(name)
        .ok_or_else(|| Error::parse(loc, name, "missing"))
}

fn f64_vec(v: &Value, name: &str, loc: &str) -> Result<Vec<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::parse(loc, name, "expected an array"))?;
    arr.iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| Error::parse(loc, name, format!("expected a number, got {x}")))
        })
        .collect()
}

fn matrix(v: &Value, name: &str, cols: usize, loc: &str) -> Result<Array2<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::parse(loc, name, "expected an array of rows"))?;
    let mut flat = Vec::with_capacity(arr.len() * cols);
    for row in arr {
        let r = f64_vec(row, name, loc)?;
        if r.len() != cols {
            return Err(Error::parse(
                loc,
                name,
                format!("row has {} entries, expected {cols}", r.len()),
            ));
        }
        flat.extend(r);
    }
    Array2::from_shape_vec((arr.len(), cols), flat).map_err(|e| Error::parse(loc, name, e))
}

fn parse_record(
    line: &str,
    loc: &str,
    meta: &Meta,
    grid: &mut Option<Arc<TimeGrid>>,
) -> Result<PathSample> {
    let rec: Value = serde_json::from_str(line).map_err(|e| Error::parse(loc, "record", e))?;
    let dims = meta.spec.dims(meta.config.include_squared_target);
    let times = f64_vec(field(&rec, "times", loc)?, "times", loc)?;
    let dt = field(&rec, "dt", loc)?
        .as_f64()
        .ok_or_else(|| Error::parse(loc, "dt", "expected a number"))?;
    let g = match grid {
        Some(g) if g.times() == times.as_slice() && g.dt() == dt => g.clone(),
        _ => {
            let g = Arc::new(
                TimeGrid::from_times(times, dt).map_err(|e| Error::parse(loc, "times", e))?,
            );
            *grid = Some(g.clone());
            g
        }
    };
    let u = matrix(field(&rec, "u", loc)?, "u", dims.d_u, loc)?;
    let v = matrix(field(&rec, "v", loc)?, "v", dims.d_v, loc)?;
    let idx_val = field(&rec, "obs_indices", loc)?
        .as_array()
        .ok_or_else(|| Error::parse(loc, "obs_indices", "expected an array"))?;
    let obs_indices = idx_val
        .iter()
        .map(|x| {
            x.as_u64().map(|k| k as usize).ok_or_else(|| {
                Error::parse(loc, "obs_indices", format!("expected an index, got {x}"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mask_val = field(&rec, "masks", loc)?
        .as_array()
        .ok_or_else(|| Error::parse(loc, "masks", "expected an array"))?;
    let masks = mask_val
        .iter()
        .map(|row| {
            row.as_array()
                .ok_or_else(|| Error::parse(loc, "masks", "expected an array of rows"))?
                .iter()
                .map(|b| match b.as_u64() {
                    Some(0) => Ok(false),
                    Some(1) => Ok(true),
                    _ => Err(Error::parse(
                        loc,
                        "masks",
                        format!("expected 0 or 1, got {b}"),
                    )),
                })
                .collect::<Result<Vec<bool>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let pattern = ObservationPattern::new(obs_indices, masks, dims)
        .map_err(|e| Error::parse(loc, "obs_indices", e))?;
    let latent: BTreeMap<String, f64> = serde_json::from_value(field(&rec, "latent", loc)?.clone())
        .map_err(|e| Error::parse(loc, "latent", e))?;
    let mut sample =
        PathSample::new(g, u, v, pattern, latent).map_err(|e| Error::parse(loc, "u", e))?;
    if let Some(noisy) = rec.get("noisy_v") {
        let noisy = matrix(noisy, "noisy_v", dims.d_v, loc)?;
        sample = sample
            .with_noisy_outputs(noisy)
            .map_err(|e| Error::parse(loc, "noisy_v", e))?;
    }
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::generate;

    fn small() -> Dataset {
        let mut cfg = GenerationConfig::new(6, 0, 17);
        cfg.obs_noise_std = Some(0.05);
        let spec = ModelSpec::GBMUncertain {
            x0: 1.0,
            a: 0.0,
            b: 0.1,
            sigma_min: 0.1,
            sigma_max: 0.3,
        };
        generate(&spec, &cfg).unwrap().0
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let p = dir.path().join("paths.jsonl");
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, &text[..text.len() - 40]).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Parse { location, .. }) => assert!(
                location.ends_with(&format!("line {}", ds.len())),
                "{location}"
            ),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let p = dir.path().join("meta.json");
        let text = fs::read_to_string(&p)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 7");
        fs::write(&p, text).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::UnsupportedVersion {
                found: 7,
                expected: 1
            })
        ));
    }

    #[test]
    fn bad_field_is_named() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let p = dir.path().join("paths.jsonl");
        let text = fs::read_to_string(&p)
            .unwrap()
            .replacen("\"masks\":[[1", "\"masks\":[[2", 1);
        fs::write(&p, text).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Parse {
                field, location, ..
            }) => {
                assert_eq!(field, "masks");
                assert!(location.ends_with("line 1"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
