//! File formats shared by the library and the CLI: location and
//! observation CSVs, chain CSVs, binary latent snapshots, predictive
//! tables, and JSON manifests.
//!
//! Numbers are serialized with 17 significant digits so every f64
//! round-trips exactly.

use std::fmt::Write as _;
use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{lambert_project, Location, LocationSet};
use crate::inference::{Chain, Draw};
use crate::model::ParamVector;
use crate::predict::{IntervalSummary, PredictiveSamples};

/// 17-significant-digit decimal form; parses back to the identical f64.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str, path: &str, line: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Parse {
        path: path.to_string(),
        line,
        msg: format!("expected a number, got {s:?}"),
    })
}

fn read_to_string(path: &Path) -> Result<String> {
    let mut buf = String::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut buf))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(buf)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Locations with their file ids, in file order.
#[derive(Debug, Clone)]
pub struct LocationTable {
    pub ids: Vec<String>,
    pub locs: LocationSet,
}

/// Reads a location CSV. Header `id,lon,lat` means degrees, Lambert-projected
/// on load; header `id,s1,s2` means pre-projected planar coordinates.
pub fn read_locations(path: &Path, scale_c: f64) -> Result<LocationTable> {
    let text = read_to_string(path)?;
    let p = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: p.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let project = match cols.as_slice() {
        ["id", "lon", "lat"] => true,
        ["id", "s1", "s2"] => false,
        _ => {
            return Err(Error::Parse {
                path: p,
                line: 1,
                msg: format!("header must be id,lon,lat or id,s1,s2; got {header:?}"),
            })
        }
    };
    let mut ids = Vec::new();
    let mut pts = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: p,
                line: line_no,
                msg: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        ids.push(fields[0].trim().to_string());
        let a = parse_f64(fields[1], &p, line_no)?;
        let b = parse_f64(fields[2], &p, line_no)?;
        if project {
            pts.push(lambert_project(a, b)?);
        } else {
            pts.push(Location::new(a, b)?);
        }
    }
    Ok(LocationTable {
        ids,
        locs: LocationSet::new(pts, scale_c)?,
    })
}

/// Writes planar locations as `id,s1,s2`.
pub fn write_locations(path: &Path, table: &LocationTable) -> Result<()> {
    let mut out = String::from("id,s1,s2\n");
    for (id, l) in table.ids.iter().zip(table.locs.points()) {
        let _ = writeln!(out, "{id},{},{}", format_f64(l.s1), format_f64(l.s2));
    }
    write_bytes(path, out.as_bytes())
}

/// Writes an observation matrix: header = location ids, one row per time
/// step starting at t = 0.
pub fn write_matrix(path: &Path, ids: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    out.push_str(&ids.join(","));
    out.push('\n');
    for t in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|i| format_f64(m[(t, i)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

/// Reads an observation matrix; the header must list exactly the given
/// location ids in order. Ragged rows are reported with their line number.
pub fn read_matrix(path: &Path, ids: &[String]) -> Result<DMatrix<f64>> {
    let text = read_to_string(path)?;
    let p = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: p.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() != ids.len() || cols.iter().zip(ids).any(|(c, i)| c != i) {
        return Err(Error::Parse {
            path: p,
            line: 1,
            msg: "header does not match the location ids in file order".into(),
        });
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != ids.len() {
            return Err(Error::Parse {
                path: p,
                line: line_no,
                msg: format!("ragged row: expected {} fields, got {}", ids.len(), fields.len()),
            });
        }
        let mut row = Vec::with_capacity(ids.len());
        for f in fields {
            row.push(parse_f64(f, &p, line_no)?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: p,
            line: 1,
            msg: "matrix has no data rows".into(),
        });
    }
    Ok(DMatrix::from_fn(rows.len(), ids.len(), |t, i| rows[t][i]))
}

/// Writes retained parameter draws: `draw,alpha,beta,sigma2,sigma2_theta,
/// sigma2_p,eta1,eta2,eta3`, one row per retained draw.
pub fn write_chain_csv(path: &Path, chain: &Chain) -> Result<()> {
    let mut out = String::from("draw,");
    out.push_str(&ParamVector::NAMES.join(","));
    out.push('\n');
    for (k, d) in chain.draws.iter().enumerate() {
        let vals: Vec<String> = d.params.to_array().iter().map(|v| format_f64(*v)).collect();
        let _ = writeln!(out, "{k},{}", vals.join(","));
    }
    write_bytes(path, out.as_bytes())
}

/// Reads a chain CSV written by [`write_chain_csv`] (latent snapshots, if
/// any, are loaded separately).
pub fn read_chain_csv(path: &Path) -> Result<Vec<ParamVector>> {
    let text = read_to_string(path)?;
    let p = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: p.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let expect = format!("draw,{}", ParamVector::NAMES.join(","));
    if header.trim() != expect {
        return Err(Error::Parse {
            path: p,
            line: 1,
            msg: format!("unexpected chain header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Parse {
                path: p,
                line: line_no,
                msg: format!("expected 9 fields, got {}", fields.len()),
            });
        }
        let v: Result<Vec<f64>> = fields[1..]
            .iter()
            .map(|f| parse_f64(f, &p, line_no))
            .collect();
        let v = v?;
        out.push(ParamVector {
            alpha: v[0],
            beta: v[1],
            sigma2: v[2],
            sigma2_theta: v[3],
            sigma2_p: v[4],
            eta1: v[5],
            eta2: v[6],
            eta3: v[7],
        });
    }
    Ok(out)
}

const LATENT_MAGIC: &[u8; 8] = b"HMSTLAT1";

/// Writes latent snapshots as little-endian binary:
/// magic, draws, rows, cols (u64 each), then row-major f64 values per draw.
pub fn write_latent_bin(path: &Path, chain: &Chain) -> Result<()> {
    let snaps: Vec<&DMatrix<f64>> = chain
        .draws
        .iter()
        .filter_map(|d| d.latent.as_ref())
        .collect();
    if snaps.len() != chain.draws.len() {
        return Err(Error::Usage(
            "chain has draws without latent snapshots; nothing coherent to write".into(),
        ));
    }
    let (rows, cols) = if let Some(first) = snaps.first() {
        first.shape()
    } else {
        (0, 0)
    };
    let mut bytes = Vec::with_capacity(32 + snaps.len() * rows * cols * 8);
    bytes.extend_from_slice(LATENT_MAGIC);
    for v in [snaps.len() as u64, rows as u64, cols as u64] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for m in snaps {
        for t in 0..rows {
            for i in 0..cols {
                bytes.extend_from_slice(&m[(t, i)].to_le_bytes());
            }
        }
    }
    write_bytes(path, &bytes)
}

/// Reads snapshots written by [`write_latent_bin`].
pub fn read_latent_bin(path: &Path) -> Result<Vec<DMatrix<f64>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    let bad = |msg: &str| Error::Parse {
        path: p.clone(),
        line: 0,
        msg: msg.to_string(),
    };
    if bytes.len() < 32 || &bytes[..8] != LATENT_MAGIC {
        return Err(bad("not a latent snapshot file"));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().unwrap());
    let (draws, rows, cols) = (word(0) as usize, word(1) as usize, word(2) as usize);
    let need = 32 + draws * rows * cols * 8;
    if bytes.len() != need {
        return Err(bad("truncated latent snapshot file"));
    }
    let mut out = Vec::with_capacity(draws);
    let mut off = 32;
    for _ in 0..draws {
        let mut m = DMatrix::zeros(rows, cols);
        for t in 0..rows {
            for i in 0..cols {
                m[(t, i)] = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                off += 8;
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// Rebuilds chain draws from a parameter CSV plus optional snapshots.
pub fn assemble_chain_draws(
    params: Vec<ParamVector>,
    latent: Option<Vec<DMatrix<f64>>>,
) -> Result<Vec<Draw>> {
    if let Some(l) = &latent {
        if l.len() != params.len() {
            return Err(Error::Usage(format!(
                "{} parameter draws but {} latent snapshots",
                params.len(),
                l.len()
            )));
        }
    }
    Ok(params
        .into_iter()
        .enumerate()
        .map(|(i, p)| Draw {
            params: p,
            latent: latent.as_ref().map(|l| l[i].clone()),
        })
        .collect())
}

/// Long-format predictive draw table: `location,horizon,draw,value`.
pub fn write_predictive_long(
    path: &Path,
    ids: &[String],
    samples: &PredictiveSamples,
    field: &str,
) -> Result<()> {
    let blocks = match field {
        "y" => &samples.y,
        "x" => &samples.x,
        other => return Err(Error::Usage(format!("unknown field {other:?}"))),
    };
    let mut out = String::from("location,horizon,draw,value\n");
    for (h, block) in blocks.iter().enumerate() {
        for d in 0..block.nrows() {
            for i in 0..block.ncols() {
                let id = ids.get(i).map(String::as_str).unwrap_or("?");
                let _ = writeln!(
                    out,
                    "{id},{},{d},{}",
                    samples.horizons[h],
                    format_f64(block[(d, i)])
                );
            }
        }
    }
    write_bytes(path, out.as_bytes())
}

/// Interval summary CSV: `location,horizon,level,lower,upper,median,mean,length`.
pub fn write_interval_csv(path: &Path, ids: &[String], summary: &IntervalSummary) -> Result<()> {
    let mut out = String::from("location,horizon,level,lower,upper,median,mean,length\n");
    for r in &summary.rows {
        let id = ids.get(r.location).map(String::as_str).unwrap_or("?");
        let _ = writeln!(
            out,
            "{id},{},{},{},{},{},{},{}",
            r.horizon,
            format_f64(summary.level),
            format_f64(r.lower),
            format_f64(r.upper),
            format_f64(r.median),
            format_f64(r.mean),
            format_f64(r.length)
        );
    }
    write_bytes(path, out.as_bytes())
}

/// Run manifest written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

/// FNV-1a 64-bit hash, hex-encoded; used to fingerprint config files.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Usage(format!("manifest serialization failed: {e}")))?;
    write_bytes(path, json.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{AcceptanceRates, ChainManifest};
    use crate::rng::stream;
    use rand::Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("hamst-io-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn f64_round_trip_via_17_digits() {
        let mut rng = stream(31, &[60]);
        for _ in 0..1000 {
            let v = (rng.random::<f64>() - 0.5) * 10f64.powi((rng.random::<u32>() % 20) as i32 - 10);
            let s = format_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
    }

    #[test]
    fn locations_round_trip_and_projection() {
        let path = tmp("locs_planar.csv");
        std::fs::write(&path, "id,s1,s2\nA,0.1,0.2\nB,0.5,0.9\n").unwrap();
        let t = read_locations(&path, 1.0).unwrap();
        assert_eq!(t.ids, vec!["A", "B"]);
        assert_eq!(t.locs.points()[1].s1, 0.5);

        let path2 = tmp("locs_deg.csv");
        std::fs::write(&path2, "id,lon,lat\nP,0,0\nQ,90,0\n").unwrap();
        let t2 = read_locations(&path2, 1.0).unwrap();
        assert!((t2.locs.points()[0].s2 + std::f64::consts::SQRT_2).abs() < 1e-12);
        assert!((t2.locs.points()[1].s1 - std::f64::consts::SQRT_2).abs() < 1e-12);

        let out = tmp("locs_out.csv");
        write_locations(&out, &t).unwrap();
        let back = read_locations(&out, 1.0).unwrap();
        assert_eq!(back.locs.points(), t.locs.points());
    }

    #[test]
    fn matrix_round_trip_and_ragged_detection() {
        let ids = vec!["A".to_string(), "B".to_string()];
        let mut rng = stream(32, &[61]);
        let m = DMatrix::from_fn(4, 2, |_, _| rng.random::<f64>() * 5.0 - 2.5);
        let path = tmp("y.csv");
        write_matrix(&path, &ids, &m).unwrap();
        let back = read_matrix(&path, &ids).unwrap();
        assert_eq!(back, m);

        let bad = tmp("ragged.csv");
        std::fs::write(&bad, "A,B\n1,2\n3\n").unwrap();
        match read_matrix(&bad, &ids) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("ragged"));
            }
            other => panic!("expected ragged-row parse error, got {other:?}"),
        }
    }

    fn small_chain(with_latent: bool) -> Chain {
        let mut rng = stream(33, &[62]);
        let draws = (0..5)
            .map(|_| Draw {
                params: ParamVector {
                    alpha: rng.random::<f64>() - 0.5,
                    beta: rng.random::<f64>() - 0.5,
                    sigma2: rng.random::<f64>() + 0.1,
                    sigma2_theta: rng.random::<f64>() + 0.1,
                    sigma2_p: rng.random::<f64>() + 0.1,
                    eta1: rng.random::<f64>() + 0.1,
                    eta2: rng.random::<f64>() + 0.1,
                    eta3: rng.random::<f64>() + 0.1,
                },
                latent: with_latent
                    .then(|| DMatrix::from_fn(3, 2, |_, _| rng.random::<f64>() * 2.0)),
            })
            .collect();
        let acceptance = AcceptanceRates {
            beta_star: 0.4,
            alpha_star: 0.5,
            eta1_star: 0.3,
            eta2_star: 0.2,
            eta3_star: None,
        };
        Chain {
            draws,
            acceptance,
            manifest: ChainManifest {
                seed: 7,
                iterations: 10,
                burn_in: 5,
                thin: 1,
                adapt: true,
                store_latent: with_latent,
                acceptance,
                jitter_events: 0,
                numeric_rejections: 0,
                wall_time_s: 0.1,
            },
        }
    }

    #[test]
    fn chain_csv_round_trip() {
        let chain = small_chain(false);
        let path = tmp("chain.csv");
        write_chain_csv(&path, &chain).unwrap();
        let back = read_chain_csv(&path).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in back.iter().zip(&chain.draws) {
            assert_eq!(a.to_array(), b.params.to_array());
        }
    }

    #[test]
    fn latent_bin_round_trip() {
        let chain = small_chain(true);
        let path = tmp("latent.bin");
        write_latent_bin(&path, &chain).unwrap();
        let back = read_latent_bin(&path).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in back.iter().zip(&chain.draws) {
            assert_eq!(a, b.latent.as_ref().unwrap());
        }
    }

    #[test]
    fn manifest_hash_is_stable() {
        assert_eq!(fnv1a_hex(b""), "cbf29ce484222325");
        assert_ne!(fnv1a_hex(b"a"), fnv1a_hex(b"b"));
    }
}
