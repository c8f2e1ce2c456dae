//! CSV / GeoJSON ingestion and export.
//!
//! * `flows.csv`: `origin,destination,weight`
//! * `demographics.csv`: `cbg_id,population,<attr>.<group>,...[,lat,lon]`
//! * `poi.csv`: `cbg_id,<poi_type>,...`
//! * `geometry.geojson`: FeatureCollection with a `cbg_id` property per feature

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::{json, Value};

use super::{Boundary, CbgRecord, CityDataset, Edge, GroupSchema, LatLon, MobilityGraph, Ring};
use crate::error::{Error, Result};

pub const FLOWS_FILE: &str = "flows.csv";
pub const DEMOGRAPHICS_FILE: &str = "demographics.csv";
pub const POI_FILE: &str = "poi.csv";
pub const GEOMETRY_FILE: &str = "geometry.geojson";

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn label(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Loads and validates a dataset from the four documented files.
pub fn load_city_dataset(
    flows: &Path,
    demographics: &Path,
    poi: &Path,
    geometry: Option<&Path>,
) -> Result<CityDataset> {
    let geo = match geometry {
        Some(p) => Some((label(p), open(p)?)),
        None => None,
    };
    load_from_readers(
        (label(flows), open(flows)?),
        (label(demographics), open(demographics)?),
        (label(poi), open(poi)?),
        geo,
    )
}

/// Loads `flows.csv`, `demographics.csv`, `poi.csv` and, if present,
/// `geometry.geojson` from a directory.
pub fn load_dir(dir: &Path) -> Result<CityDataset> {
    let geo = dir.join(GEOMETRY_FILE);
    load_city_dataset(
        &dir.join(FLOWS_FILE),
        &dir.join(DEMOGRAPHICS_FILE),
        &dir.join(POI_FILE),
        geo.exists().then_some(geo.as_path()),
    )
}

type Named<R> = (String, R);

pub fn load_from_readers<R1: Read, R2: Read, R3: Read, R4: Read>(
    flows: Named<R1>,
    demographics: Named<R2>,
    poi: Named<R3>,
    geometry: Option<Named<R4>>,
) -> Result<CityDataset> {
    let demo = parse_demographics(&demographics.0, demographics.1)?;
    let index: HashMap<String, usize> = demo
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.clone(), i))
        .collect();

    let (poi_types, poi_rows) = parse_poi(&poi.0, poi.1, &index)?;
    let boundaries = match geometry {
        Some((name, r)) => Some(parse_geometry(&name, r, &index)?),
        None => None,
    };

    let mut cbgs = Vec::with_capacity(demo.rows.len());
    for (i, row) in demo.rows.into_iter().enumerate() {
        let boundary = boundaries.as_ref().and_then(|b| b[i].clone());
        let centroid = match (&boundary, row.latlon) {
            (Some(b), _) => b.centroid().ok_or_else(|| Error::MalformedRow {
                file: GEOMETRY_FILE.into(),
                line: 0,
                reason: format!("degenerate polygon for `{}`", row.id),
            })?,
            (None, Some(ll)) => ll,
            (None, None) => {
                return Err(Error::SchemaMismatch {
                    expected: format!("geometry or lat,lon columns for `{}`", row.id),
                    found: "neither".into(),
                })
            }
        };
        let poi_density = poi_rows[i].clone().ok_or_else(|| Error::SchemaMismatch {
            expected: format!("POI row for `{}`", row.id),
            found: "none".into(),
        })?;
        cbgs.push(CbgRecord {
            id: row.id,
            population: row.population,
            centroid,
            boundary,
            group_counts: row.counts,
            poi_density,
        });
    }

    let edges = parse_flows(&flows.0, flows.1, &index)?;
    let nodes = cbgs.iter().map(|c| c.id.clone()).collect();
    let graph = MobilityGraph::new(nodes, edges)?;
    CityDataset::new(cbgs, graph, demo.attributes, poi_types)
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

fn malformed(file: &str, line: usize, reason: impl Into<String>) -> Error {
    Error::MalformedRow {
        file: file.to_string(),
        line,
        reason: reason.into(),
    }
}

fn records<'a, R: Read + 'a>(
    file: &str,
    rdr: &'a mut csv::Reader<R>,
) -> impl Iterator<Item = Result<(usize, csv::StringRecord)>> + 'a {
    let file = file.to_string();
    rdr.records().enumerate().map(move |(k, rec)| {
        let rec = rec.map_err(|e| malformed(&file, k + 2, e.to_string()))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(k + 2);
        Ok((line, rec))
    })
}

fn parse_num(file: &str, line: usize, field: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| malformed(file, line, format!("`{s}` is not a number in `{field}`")))?;
    if !v.is_finite() {
        return Err(malformed(file, line, format!("non-finite `{field}`")));
    }
    if v < 0.0 {
        return Err(Error::NegativeValue {
            field: format!("{file}:{line} {field}"),
        });
    }
    Ok(v)
}

fn parse_count(file: &str, line: usize, field: &str, s: &str) -> Result<u64> {
    if let Some(stripped) = s.strip_prefix('-') {
        if stripped.parse::<f64>().is_ok() {
            return Err(Error::NegativeValue {
                field: format!("{file}:{line} {field}"),
            });
        }
    }
    s.parse()
        .map_err(|_| malformed(file, line, format!("`{s}` is not a count in `{field}`")))
}

fn parse_flows<R: Read>(file: &str, r: R, index: &HashMap<String, usize>) -> Result<Vec<Edge>> {
    let mut rdr = reader(r);
    let headers = rdr.headers().map_err(|e| malformed(file, 1, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["origin", "destination", "weight"] {
        return Err(Error::SchemaMismatch {
            expected: "origin,destination,weight".into(),
            found: headers.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut edges = Vec::new();
    for rec in records(file, &mut rdr) {
        let (line, rec) = rec?;
        if rec.len() != 3 {
            return Err(malformed(file, line, format!("expected 3 fields, got {}", rec.len())));
        }
        let lookup = |id: &str| index.get(id).copied().ok_or_else(|| Error::UnknownCbg(id.into()));
        let origin = lookup(&rec[0])?;
        let dest = lookup(&rec[1])?;
        let weight = parse_num(file, line, "weight", &rec[2])?;
        edges.push(Edge {
            origin,
            dest,
            weight,
        });
    }
    Ok(edges)
}

struct DemoRow {
    id: String,
    population: u64,
    counts: Vec<Vec<u64>>,
    latlon: Option<LatLon>,
}

struct Demographics {
    attributes: Vec<GroupSchema>,
    rows: Vec<DemoRow>,
}

fn parse_demographics<R: Read>(file: &str, r: R) -> Result<Demographics> {
    let mut rdr = reader(r);
    let headers = rdr
        .headers()
        .map_err(|e| malformed(file, 1, e.to_string()))?
        .clone();
    if headers.len() < 2 || &headers[0] != "cbg_id" || &headers[1] != "population" {
        return Err(Error::SchemaMismatch {
            expected: "cbg_id,population,<attr>.<group>,...".into(),
            found: headers.iter().collect::<Vec<_>>().join(","),
        });
    }
    // column -> (attribute index, group index)
    let mut attr_names: Vec<String> = Vec::new();
    let mut attr_groups: Vec<Vec<String>> = Vec::new();
    let mut slots: Vec<(usize, (usize, usize))> = Vec::new();
    let (mut lat_col, mut lon_col) = (None, None);
    for (c, h) in headers.iter().enumerate().skip(2) {
        match h {
            "lat" => lat_col = Some(c),
            "lon" => lon_col = Some(c),
            _ => {
                let (attr, group) = h.split_once('.').ok_or_else(|| Error::SchemaMismatch {
                    expected: "<attr>.<group> column".into(),
                    found: h.to_string(),
                })?;
                let a = match attr_names.iter().position(|n| n == attr) {
                    Some(a) => a,
                    None => {
                        attr_names.push(attr.to_string());
                        attr_groups.push(Vec::new());
                        attr_names.len() - 1
                    }
                };
                attr_groups[a].push(group.to_string());
                slots.push((c, (a, attr_groups[a].len() - 1)));
            }
        }
    }
    if lat_col.is_some() != lon_col.is_some() {
        return Err(Error::SchemaMismatch {
            expected: "both lat and lon columns".into(),
            found: "only one".into(),
        });
    }
    let attributes = attr_names
        .into_iter()
        .zip(attr_groups)
        .map(|(n, g)| GroupSchema::new(n, g))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for rec in records(file, &mut rdr) {
        let (line, rec) = rec?;
        if rec.len() != headers.len() {
            return Err(malformed(
                file,
                line,
                format!("expected {} fields, got {}", headers.len(), rec.len()),
            ));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(malformed(file, line, "empty cbg_id"));
        }
        if let Some(prev) = seen.insert(id.clone(), line) {
            return Err(malformed(file, line, format!("duplicate cbg_id `{id}` (first on line {prev})")));
        }
        let population = parse_count(file, line, "population", &rec[1])?;
        let mut counts: Vec<Vec<u64>> = attributes.iter().map(|a| vec![0; a.n()]).collect();
        for &(c, (a, g)) in &slots {
            counts[a][g] = parse_count(file, line, &headers[c], &rec[c])?;
        }
        let latlon = match (lat_col, lon_col) {
            (Some(la), Some(lo)) => {
                let parse = |s: &str, f: &str| {
                    s.parse::<f64>()
                        .map_err(|_| malformed(file, line, format!("`{s}` is not a {f}")))
                };
                let ll = LatLon::new(parse(&rec[la], "latitude")?, parse(&rec[lo], "longitude")?);
                Some(ll.validate()?)
            }
            _ => None,
        };
        rows.push(DemoRow {
            id,
            population,
            counts,
            latlon,
        });
    }
    Ok(Demographics { attributes, rows })
}

fn parse_poi<R: Read>(
    file: &str,
    r: R,
    index: &HashMap<String, usize>,
) -> Result<(Vec<String>, Vec<Option<Vec<f64>>>)> {
    let mut rdr = reader(r);
    let headers = rdr
        .headers()
        .map_err(|e| malformed(file, 1, e.to_string()))?
        .clone();
    if headers.len() < 2 || &headers[0] != "cbg_id" {
        return Err(Error::SchemaMismatch {
            expected: "cbg_id,<poi_type>,...".into(),
            found: headers.iter().collect::<Vec<_>>().join(","),
        });
    }
    let types: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut rows = vec![None; index.len()];
    for rec in records(file, &mut rdr) {
        let (line, rec) = rec?;
        if rec.len() != headers.len() {
            return Err(malformed(
                file,
                line,
                format!("expected {} fields, got {}", headers.len(), rec.len()),
            ));
        }
        let i = *index
            .get(&rec[0])
            .ok_or_else(|| Error::UnknownCbg(rec[0].to_string()))?;
        let vals = (1..rec.len())
            .map(|c| parse_num(file, line, &headers[c], &rec[c]))
            .collect::<Result<Vec<_>>>()?;
        rows[i] = Some(vals);
    }
    Ok((types, rows))
}

fn parse_ring(v: &Value) -> Option<Ring> {
    v.as_array()?
        .iter()
        .map(|p| {
            let p = p.as_array()?;
            Some([p.first()?.as_f64()?, p.get(1)?.as_f64()?])
        })
        .collect()
}

fn parse_polygon(v: &Value) -> Option<Vec<Ring>> {
    v.as_array()?.iter().map(parse_ring).collect()
}

fn parse_geometry<R: Read>(
    file: &str,
    r: R,
    index: &HashMap<String, usize>,
) -> Result<Vec<Option<Boundary>>> {
    let doc: Value = serde_json::from_reader(r).map_err(|e| malformed(file, e.line(), e.to_string()))?;
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(Error::SchemaMismatch {
            expected: "GeoJSON FeatureCollection".into(),
            found: doc.get("type").map(|t| t.to_string()).unwrap_or_default(),
        });
    }
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed(file, 0, "missing `features` array"))?;
    let mut out = vec![None; index.len()];
    for (k, f) in features.iter().enumerate() {
        let bad = |why: &str| malformed(file, 0, format!("feature {k}: {why}"));
        let id = match f.pointer("/properties/cbg_id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err(bad("missing `cbg_id` property")),
        };
        let i = *index
            .get(&id)
            .ok_or_else(|| Error::UnknownCbg(id.clone()))?;
        let geom = f.get("geometry").ok_or_else(|| bad("missing geometry"))?;
        let coords = geom.get("coordinates").ok_or_else(|| bad("missing coordinates"))?;
        let polygons = match geom.get("type").and_then(Value::as_str) {
            Some("Polygon") => vec![parse_polygon(coords).ok_or_else(|| bad("bad Polygon"))?],
            Some("MultiPolygon") => coords
                .as_array()
                .and_then(|ps| ps.iter().map(parse_polygon).collect::<Option<Vec<_>>>())
                .ok_or_else(|| bad("bad MultiPolygon"))?,
            other => return Err(bad(&format!("unsupported geometry {other:?}"))),
        };
        out[i] = Some(Boundary { polygons });
    }
    Ok(out)
}

fn create(path: &Path) -> Result<std::io::BufWriter<File>> {
    File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes the dataset back out in the documented file formats. Centroids are
/// emitted as `lat,lon` columns; geometry is written only when every CBG has a
/// boundary.
pub fn write_dir(dataset: &CityDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |e: std::io::Error| Error::io(p.clone(), e)
    };

    let path = dir.join(FLOWS_FILE);
    let mut w = create(&path)?;
    writeln!(w, "origin,destination,weight").map_err(io_err(&path))?;
    let g = dataset.flows();
    for e in g.edges() {
        writeln!(w, "{},{},{}", g.node_id(e.origin), g.node_id(e.dest), e.weight)
            .map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join(DEMOGRAPHICS_FILE);
    let mut w = create(&path)?;
    let mut header = vec!["cbg_id".to_string(), "population".to_string()];
    for a in dataset.attributes() {
        header.extend(a.groups.iter().map(|g| format!("{}.{}", a.name, g)));
    }
    header.push("lat".into());
    header.push("lon".into());
    writeln!(w, "{}", header.join(",")).map_err(io_err(&path))?;
    for c in dataset.cbgs() {
        let mut row = vec![c.id.clone(), c.population.to_string()];
        for counts in &c.group_counts {
            row.extend(counts.iter().map(u64::to_string));
        }
        row.push(c.centroid.lat.to_string());
        row.push(c.centroid.lon.to_string());
        writeln!(w, "{}", row.join(",")).map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join(POI_FILE);
    let mut w = create(&path)?;
    writeln!(w, "cbg_id,{}", dataset.poi_types().join(",")).map_err(io_err(&path))?;
    for c in dataset.cbgs() {
        let vals: Vec<String> = c.poi_density.iter().map(f64::to_string).collect();
        writeln!(w, "{},{}", c.id, vals.join(",")).map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    if !dataset.is_empty() && dataset.cbgs().iter().all(|c| c.boundary.is_some()) {
        let features: Vec<Value> = dataset
            .cbgs()
            .iter()
            .map(|c| {
                let b = c.boundary.as_ref().expect("checked");
                let geometry = if b.polygons.len() == 1 {
                    json!({"type": "Polygon", "coordinates": b.polygons[0]})
                } else {
                    json!({"type": "MultiPolygon", "coordinates": b.polygons})
                };
                json!({"type": "Feature", "properties": {"cbg_id": c.id}, "geometry": geometry})
            })
            .collect();
        let doc = json!({"type": "FeatureCollection", "features": features});
        let path = dir.join(GEOMETRY_FILE);
        let mut w = create(&path)?;
        serde_json::to_writer(&mut w, &doc).map_err(|e| Error::Serde(e.to_string()))?;
        w.flush().map_err(io_err(&path))?;
    }
    Ok(())
}

/// Single-file snapshot (compact JSON) passed between CLI stages.
pub fn save_snapshot(dataset: &CityDataset, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer(&mut w, dataset).map_err(|e| Error::Serde(e.to_string()))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_snapshot(path: &Path) -> Result<CityDataset> {
    let r = std::io::BufReader::new(open(path)?);
    serde_json::from_reader(r).map_err(|e| Error::Serde(e.to_string()))
}

/// Loads either a snapshot file or a directory of CSV files.
pub fn load_any(path: &Path) -> Result<CityDataset> {
    if path.is_dir() {
        load_dir(path)
    } else {
        load_snapshot(path)
    }
}
