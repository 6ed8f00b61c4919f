//! Dataset bundle: the six CSV tables a run needs, with strict
//! referential-integrity validation on load and canonical byte-stable
//! output on save.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::{format_float, parse_float};
use crate::types::{
    DemandCell, Mode, ModeAttributes, PerMode, WageDist, WageGroup, WageTable, Zone, ZoneMap,
};

/// Everything a simulation run reads: zones, wage structure, survey and
/// trip-record demand, and per-pair mode attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub zones: ZoneMap,
    pub wages: WageTable,
    pub wage_dist: WageDist,
    /// Survey demand over {taxi, transit, walk, drive}, wage-group keyed.
    pub demand4: Vec<DemandCell>,
    /// Trip-record demand over {taxi, fhv, sfhv}, no wage split.
    pub demand_tlc: Vec<DemandCell>,
    pub attrs: crate::types::AttrTable,
}

const ZONES: &str = "zones.csv";
const WAGES: &str = "wages.csv";
const WAGE_DIST: &str = "wage_dist.csv";
const DEMAND4: &str = "demand4.csv";
const DEMAND_TLC: &str = "demand_tlc.csv";
const ATTRS: &str = "attrs.csv";

/// Modes carried by the survey demand table, in column order.
pub const DEMAND4_MODES: [Mode; 4] = [Mode::Taxi, Mode::Transit, Mode::Walk, Mode::Drive];
/// Modes carried by the trip-record demand table, in column order.
pub const DEMAND_TLC_MODES: [Mode; 3] = [Mode::Taxi, Mode::Fhv, Mode::Sfhv];

fn reader(dir: &Path, name: &str) -> Result<(csv::Reader<std::fs::File>, PathBuf)> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    Ok((csv::Reader::from_path(&path)?, path))
}

fn check_header(r: &mut csv::Reader<std::fs::File>, file: &str, expected: &[&str]) -> Result<()> {
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::SchemaMismatch {
            file: file.to_owned(),
            detail: format!("expected header {expected:?}, got {:?}", headers),
        });
    }
    Ok(())
}

/// One-based line number of a data record (line 1 is the header).
fn line(row_idx: usize) -> usize {
    row_idx + 2
}

fn number(file: &str, row: usize, column: &str, s: &str) -> Result<f64> {
    parse_float(s).ok_or_else(|| Error::SchemaMismatch {
        file: file.to_owned(),
        detail: format!("row {row}: column '{column}': bad number '{s}'"),
    })
}

fn nonneg(file: &str, row: usize, column: &str, v: f64) -> Result<f64> {
    if v < 0.0 {
        return Err(Error::NegativeValue {
            file: file.to_owned(),
            row,
            detail: format!("column '{column}' is {v}"),
        });
    }
    Ok(v)
}

fn field<'a>(record: &'a csv::StringRecord, file: &str, row: usize, i: usize) -> Result<&'a str> {
    record.get(i).ok_or_else(|| Error::SchemaMismatch {
        file: file.to_owned(),
        detail: format!("row {row}: missing column {i}"),
    })
}

fn require_zone(zones: &ZoneMap, id: &str, file: &str, row: usize, role: &str) -> Result<()> {
    if !zones.contains_key(id) {
        return Err(Error::DanglingKey {
            file: file.to_owned(),
            row,
            detail: format!("{role} zone '{id}' is not in {ZONES}"),
        });
    }
    Ok(())
}

/// Load and validate a bundle directory. Any integrity violation fails
/// hard with the offending file and row.
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let zones = load_zones(dir)?;
    let wages = load_wages(dir)?;
    let wage_dist = load_wage_dist(dir, &zones, &wages)?;
    let attrs = load_attrs(dir, &zones)?;
    let demand4 = load_demand4(dir, &zones, &wages, &attrs)?;
    let demand_tlc = load_demand_tlc(dir, &zones, &wage_dist, &attrs)?;
    Ok(DatasetBundle {
        zones,
        wages,
        wage_dist,
        demand4,
        demand_tlc,
        attrs,
    })
}

fn load_zones(dir: &Path) -> Result<ZoneMap> {
    let (mut r, _) = reader(dir, ZONES)?;
    check_header(&mut r, ZONES, &["zone_id", "borough", "name"])?;
    let mut zones = ZoneMap::new();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        let row = line(i);
        let id = field(&record, ZONES, row, 0)?.to_owned();
        if id.is_empty() {
            return Err(Error::SchemaMismatch {
                file: ZONES.to_owned(),
                detail: format!("row {row}: empty zone_id"),
            });
        }
        let zone = Zone {
            id: id.clone(),
            borough: field(&record, ZONES, row, 1)?.to_owned(),
            name: field(&record, ZONES, row, 2)?.to_owned(),
        };
        if zones.insert(id.clone(), zone).is_some() {
            return Err(Error::SchemaMismatch {
                file: ZONES.to_owned(),
                detail: format!("row {row}: duplicate zone_id '{id}'"),
            });
        }
    }
    if zones.is_empty() {
        return Err(Error::SchemaMismatch {
            file: ZONES.to_owned(),
            detail: "no zones".to_owned(),
        });
    }
    Ok(zones)
}

fn load_wages(dir: &Path) -> Result<WageTable> {
    let (mut r, _) = reader(dir, WAGES)?;
    check_header(&mut r, WAGES, &["wage_group", "hourly_wage_usd"])?;
    let mut wages = WageTable::new();
    for (i, record) in r.records().enumerate() {
        let row = line(i);
        let record = record?;
        let id = field(&record, WAGES, row, 0)?.to_owned();
        let wage = number(WAGES, row, "hourly_wage_usd", field(&record, WAGES, row, 1)?)?;
        nonneg(WAGES, row, "hourly_wage_usd", wage)?;
        let group = WageGroup {
            id: id.clone(),
            hourly_wage_usd: wage,
        };
        group.validate().map_err(|e| Error::SchemaMismatch {
            file: WAGES.to_owned(),
            detail: format!("row {row}: {e}"),
        })?;
        if wages.insert(id.clone(), group).is_some() {
            return Err(Error::SchemaMismatch {
                file: WAGES.to_owned(),
                detail: format!("row {row}: duplicate wage_group '{id}'"),
            });
        }
    }
    if wages.is_empty() {
        return Err(Error::SchemaMismatch {
            file: WAGES.to_owned(),
            detail: "no wage groups".to_owned(),
        });
    }
    Ok(wages)
}

fn load_wage_dist(dir: &Path, zones: &ZoneMap, wages: &WageTable) -> Result<WageDist> {
    let (mut r, _) = reader(dir, WAGE_DIST)?;
    check_header(&mut r, WAGE_DIST, &["zone_id", "wage_group", "share"])?;
    let mut dist = WageDist::new();
    for (i, record) in r.records().enumerate() {
        let row = line(i);
        let record = record?;
        let zone = field(&record, WAGE_DIST, row, 0)?.to_owned();
        let group = field(&record, WAGE_DIST, row, 1)?.to_owned();
        require_zone(zones, &zone, WAGE_DIST, row, "listed")?;
        if !wages.contains_key(&group) {
            return Err(Error::DanglingKey {
                file: WAGE_DIST.to_owned(),
                row,
                detail: format!("wage group '{group}' is not in {WAGES}"),
            });
        }
        let share = number(WAGE_DIST, row, "share", field(&record, WAGE_DIST, row, 2)?)?;
        nonneg(WAGE_DIST, row, "share", share)?;
        if !share.is_finite() {
            return Err(Error::SchemaMismatch {
                file: WAGE_DIST.to_owned(),
                detail: format!("row {row}: share must be finite, got {share}"),
            });
        }
        if dist
            .entry(zone.clone())
            .or_default()
            .insert(group.clone(), share)
            .is_some()
        {
            return Err(Error::SchemaMismatch {
                file: WAGE_DIST.to_owned(),
                detail: format!("row {row}: duplicate pair ({zone}, {group})"),
            });
        }
    }
    for (zone, shares) in &dist {
        let total: f64 = shares.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::SchemaMismatch {
                file: WAGE_DIST.to_owned(),
                detail: format!("zone '{zone}': shares sum to {total}, expected 1"),
            });
        }
    }
    Ok(dist)
}

fn load_attrs(dir: &Path, zones: &ZoneMap) -> Result<crate::types::AttrTable> {
    let (mut r, _) = reader(dir, ATTRS)?;
    check_header(
        &mut r,
        ATTRS,
        &[
            "origin",
            "destination",
            "mode",
            "time_mean_hr",
            "time_std_hr",
            "cost_mean_usd",
            "cost_std_usd",
            "distance_miles",
        ],
    )?;
    let mut partial: BTreeMap<(String, String), BTreeMap<Mode, ModeAttributes>> = BTreeMap::new();
    for (i, record) in r.records().enumerate() {
        let row = line(i);
        let record = record?;
        let origin = field(&record, ATTRS, row, 0)?.to_owned();
        let destination = field(&record, ATTRS, row, 1)?.to_owned();
        require_zone(zones, &origin, ATTRS, row, "origin")?;
        require_zone(zones, &destination, ATTRS, row, "destination")?;
        let mode: Mode = field(&record, ATTRS, row, 2)?
            .parse()
            .map_err(|e: Error| Error::SchemaMismatch {
                file: ATTRS.to_owned(),
                detail: format!("row {row}: {e}"),
            })?;
        let mut values = [0.0; 5];
        for (slot, (idx, column)) in values.iter_mut().zip([
            (3, "time_mean_hr"),
            (4, "time_std_hr"),
            (5, "cost_mean_usd"),
            (6, "cost_std_usd"),
            (7, "distance_miles"),
        ]) {
            let v = number(ATTRS, row, column, field(&record, ATTRS, row, idx)?)?;
            *slot = nonneg(ATTRS, row, column, v)?;
        }
        let attrs = ModeAttributes {
            time_mean_hr: values[0],
            time_std_hr: values[1],
            cost_mean_usd: values[2],
            cost_std_usd: values[3],
            distance_miles: values[4],
        };
        attrs.validate().map_err(|e| Error::SchemaMismatch {
            file: ATTRS.to_owned(),
            detail: format!("row {row}: {e}"),
        })?;
        if partial
            .entry((origin.clone(), destination.clone()))
            .or_default()
            .insert(mode, attrs)
            .is_some()
        {
            return Err(Error::SchemaMismatch {
                file: ATTRS.to_owned(),
                detail: format!("row {row}: duplicate ({origin}, {destination}, {mode})"),
            });
        }
    }
    let mut table = crate::types::AttrTable::new();
    for ((origin, destination), modes) in partial {
        let missing: Vec<String> = Mode::ALL
            .iter()
            .filter(|m| !modes.contains_key(m))
            .map(|m| m.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::SchemaMismatch {
                file: ATTRS.to_owned(),
                detail: format!(
                    "pair {origin}->{destination}: missing rows for modes {missing:?}"
                ),
            });
        }
        table.insert(
            origin,
            destination,
            PerMode::from_fn(|m| modes[&m]),
        );
    }
    Ok(table)
}

fn require_attr_cover(
    attrs: &crate::types::AttrTable,
    origin: &str,
    destination: &str,
    file: &str,
    row: usize,
) -> Result<()> {
    if attrs.get(origin, destination).is_none() {
        return Err(Error::DanglingKey {
            file: file.to_owned(),
            row,
            detail: format!("no attribute rows for pair {origin}->{destination}"),
        });
    }
    Ok(())
}

fn load_demand4(
    dir: &Path,
    zones: &ZoneMap,
    wages: &WageTable,
    attrs: &crate::types::AttrTable,
) -> Result<Vec<DemandCell>> {
    let (mut r, _) = reader(dir, DEMAND4)?;
    check_header(
        &mut r,
        DEMAND4,
        &[
            "origin",
            "destination",
            "wage_group",
            "trips_taxi",
            "trips_transit",
            "trips_walk",
            "trips_drive",
        ],
    )?;
    let mut cells = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, record) in r.records().enumerate() {
        let row = line(i);
        let record = record?;
        let origin = field(&record, DEMAND4, row, 0)?.to_owned();
        let destination = field(&record, DEMAND4, row, 1)?.to_owned();
        let group = field(&record, DEMAND4, row, 2)?.to_owned();
        require_zone(zones, &origin, DEMAND4, row, "origin")?;
        require_zone(zones, &destination, DEMAND4, row, "destination")?;
        if !wages.contains_key(&group) {
            return Err(Error::DanglingKey {
                file: DEMAND4.to_owned(),
                row,
                detail: format!("wage group '{group}' is not in {WAGES}"),
            });
        }
        require_attr_cover(attrs, &origin, &destination, DEMAND4, row)?;
        if !seen.insert((origin.clone(), destination.clone(), group.clone())) {
            return Err(Error::SchemaMismatch {
                file: DEMAND4.to_owned(),
                detail: format!("row {row}: duplicate cell ({origin}, {destination}, {group})"),
            });
        }
        let mut trips = PerMode::splat(0.0);
        for (offset, (mode, column)) in DEMAND4_MODES
            .iter()
            .zip(["trips_taxi", "trips_transit", "trips_walk", "trips_drive"])
            .enumerate()
        {
            let v = number(DEMAND4, row, column, field(&record, DEMAND4, row, 3 + offset)?)?;
            if !v.is_finite() {
                return Err(Error::SchemaMismatch {
                    file: DEMAND4.to_owned(),
                    detail: format!("row {row}: column '{column}' must be finite"),
                });
            }
            trips[*mode] = nonneg(DEMAND4, row, column, v)?;
        }
        cells.push(DemandCell {
            origin,
            destination,
            wage_group: Some(group),
            trips,
        });
    }
    Ok(cells)
}

fn load_demand_tlc(
    dir: &Path,
    zones: &ZoneMap,
    wage_dist: &WageDist,
    attrs: &crate::types::AttrTable,
) -> Result<Vec<DemandCell>> {
    let (mut r, _) = reader(dir, DEMAND_TLC)?;
    check_header(
        &mut r,
        DEMAND_TLC,
        &["origin", "destination", "trips_taxi", "trips_fhv", "trips_sfhv"],
    )?;
    let mut cells = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, record) in r.records().enumerate() {
        let row = line(i);
        let record = record?;
        let origin = field(&record, DEMAND_TLC, row, 0)?.to_owned();
        let destination = field(&record, DEMAND_TLC, row, 1)?.to_owned();
        require_zone(zones, &origin, DEMAND_TLC, row, "origin")?;
        require_zone(zones, &destination, DEMAND_TLC, row, "destination")?;
        require_attr_cover(attrs, &origin, &destination, DEMAND_TLC, row)?;
        if !wage_dist.contains_key(&origin) {
            return Err(Error::DanglingKey {
                file: DEMAND_TLC.to_owned(),
                row,
                detail: format!("origin zone '{origin}' has no rows in {WAGE_DIST}"),
            });
        }
        if !seen.insert((origin.clone(), destination.clone())) {
            return Err(Error::SchemaMismatch {
                file: DEMAND_TLC.to_owned(),
                detail: format!("row {row}: duplicate pair ({origin}, {destination})"),
            });
        }
        let mut trips = PerMode::splat(0.0);
        for (offset, (mode, column)) in DEMAND_TLC_MODES
            .iter()
            .zip(["trips_taxi", "trips_fhv", "trips_sfhv"])
            .enumerate()
        {
            let v = number(
                DEMAND_TLC,
                row,
                column,
                field(&record, DEMAND_TLC, row, 2 + offset)?,
            )?;
            if !v.is_finite() {
                return Err(Error::SchemaMismatch {
                    file: DEMAND_TLC.to_owned(),
                    detail: format!("row {row}: column '{column}' must be finite"),
                });
            }
            trips[*mode] = nonneg(DEMAND_TLC, row, column, v)?;
        }
        cells.push(DemandCell {
            origin,
            destination,
            wage_group: None,
            trips,
        });
    }
    Ok(cells)
}

/// Write a bundle in canonical form: sorted rows, canonical float text,
/// Unix newlines. Saving a freshly loaded canonical bundle reproduces the
/// input bytes.
pub fn save_bundle(dir: &Path, bundle: &DatasetBundle) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let write = |name: &str, content: String| -> Result<()> {
        std::fs::write(dir.join(name), content).map_err(Error::from)
    };

    let mut zones = String::from("zone_id,borough,name\n");
    for z in bundle.zones.values() {
        zones.push_str(&format!("{},{},{}\n", z.id, z.borough, z.name));
    }
    write(ZONES, zones)?;

    let mut wages = String::from("wage_group,hourly_wage_usd\n");
    for g in bundle.wages.values() {
        wages.push_str(&format!("{},{}\n", g.id, format_float(g.hourly_wage_usd)));
    }
    write(WAGES, wages)?;

    let mut dist = String::from("zone_id,wage_group,share\n");
    for (zone, shares) in &bundle.wage_dist {
        for (group, share) in shares {
            dist.push_str(&format!("{zone},{group},{}\n", format_float(*share)));
        }
    }
    write(WAGE_DIST, dist)?;

    let mut demand4 = String::from(
        "origin,destination,wage_group,trips_taxi,trips_transit,trips_walk,trips_drive\n",
    );
    let mut rows4: Vec<&DemandCell> = bundle.demand4.iter().collect();
    rows4.sort_by_key(|c| (&c.origin, &c.destination, &c.wage_group));
    for c in rows4 {
        let group = c.wage_group.as_deref().unwrap_or("");
        let trips: Vec<String> = DEMAND4_MODES
            .iter()
            .map(|&m| format_float(c.trips[m]))
            .collect();
        demand4.push_str(&format!(
            "{},{},{group},{}\n",
            c.origin,
            c.destination,
            trips.join(",")
        ));
    }
    write(DEMAND4, demand4)?;

    let mut tlc = String::from("origin,destination,trips_taxi,trips_fhv,trips_sfhv\n");
    let mut rows_tlc: Vec<&DemandCell> = bundle.demand_tlc.iter().collect();
    rows_tlc.sort_by_key(|c| (&c.origin, &c.destination));
    for c in rows_tlc {
        let trips: Vec<String> = DEMAND_TLC_MODES
            .iter()
            .map(|&m| format_float(c.trips[m]))
            .collect();
        tlc.push_str(&format!("{},{},{}\n", c.origin, c.destination, trips.join(",")));
    }
    write(DEMAND_TLC, tlc)?;

    let mut attrs = String::from(
        "origin,destination,mode,time_mean_hr,time_std_hr,cost_mean_usd,cost_std_usd,distance_miles\n",
    );
    for ((origin, destination), row) in bundle.attrs.iter() {
        for mode in Mode::ALL {
            let a = &row[mode];
            attrs.push_str(&format!(
                "{origin},{destination},{mode},{},{},{},{},{}\n",
                format_float(a.time_mean_hr),
                format_float(a.time_std_hr),
                format_float(a.cost_mean_usd),
                format_float(a.cost_std_usd),
                format_float(a.distance_miles),
            ));
        }
    }
    write(ATTRS, attrs)?;
    Ok(())
}
