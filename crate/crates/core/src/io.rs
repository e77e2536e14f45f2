//! Cohort persistence: newline-delimited JSON (one patient per line) and a
//! compact little-endian columnar binary form. Both round-trip exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::domain::{Demographics, EventRecord, Modality, Payload, PatientRecord, Sex};
use crate::error::{CoreError, Result};

const MAGIC: &[u8; 8] = b"CHRCOHRT";
const BINARY_VERSION: u32 = 1;

pub fn write_ndjson<W: Write>(mut w: W, patients: &[PatientRecord]) -> Result<()> {
    for p in patients {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ndjson<R: BufRead>(r: R) -> Result<Vec<PatientRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| CoreError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn save_ndjson(path: impl AsRef<Path>, patients: &[PatientRecord]) -> Result<()> {
    write_ndjson(BufWriter::new(File::create(path)?), patients)
}

pub fn load_ndjson(path: impl AsRef<Path>) -> Result<Vec<PatientRecord>> {
    read_ndjson(BufReader::new(File::open(path)?))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = r.read_u32::<LE>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CoreError::Format(e.to_string()))
}

fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    w.write_u32::<LE>(v.len() as u32)?;
    for x in v {
        w.write_f64::<LE>(*x)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let n = r.read_u32::<LE>()? as usize;
    (0..n).map(|_| Ok(r.read_f64::<LE>()?)).collect()
}

fn modality_from_u8(b: u8) -> Result<Modality> {
    Modality::ALL
        .get(b as usize)
        .copied()
        .ok_or_else(|| CoreError::Format(format!("modality tag {b}")))
}

fn sex_from_u8(b: u8) -> Result<Sex> {
    match b {
        0 => Ok(Sex::Male),
        1 => Ok(Sex::Female),
        2 => Ok(Sex::Unknown),
        _ => Err(CoreError::Format(format!("sex tag {b}"))),
    }
}

/// Columnar layout: a patient table followed by one column per event field,
/// concatenated over all patients in order.
pub fn write_binary<W: Write>(mut w: W, patients: &[PatientRecord]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(BINARY_VERSION)?;
    w.write_u64::<LE>(patients.len() as u64)?;
    for p in patients {
        write_str(&mut w, &p.patient_id)?;
        w.write_u8(p.demographics.sex.index() as u8)?;
        w.write_i64::<LE>(p.demographics.birth_epoch_min)?;
        w.write_i64::<LE>(p.demographics.age_at_last_event_min)?;
        match p.death_time_min {
            Some(d) => {
                w.write_u8(1)?;
                w.write_i64::<LE>(d)?;
            }
            None => w.write_u8(0)?,
        }
        write_f64s(&mut w, &p.demographics.ethnicity_vec)?;
        w.write_u64::<LE>(p.events.len() as u64)?;
    }
    let events = || patients.iter().flat_map(|p| p.events.iter());
    for e in events() {
        w.write_i64::<LE>(e.time_min)?;
    }
    for e in events() {
        w.write_u8(e.modality.index() as u8)?;
    }
    for e in events() {
        write_str(&mut w, &e.source_code)?;
    }
    for e in events() {
        let tag = match e.payload {
            Payload::Token(_) => 0,
            Payload::Dense(_) => 1,
            Payload::Code => 2,
            Payload::Numeric(_) => 3,
            Payload::Category(_) => 4,
        };
        w.write_u8(tag)?;
    }
    for e in events() {
        match &e.payload {
            Payload::Token(t) => w.write_u32::<LE>(*t)?,
            Payload::Dense(v) => write_f64s(&mut w, v)?,
            Payload::Code => {}
            Payload::Numeric(x) => w.write_f64::<LE>(*x)?,
            Payload::Category(s) => write_str(&mut w, s)?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<Vec<PatientRecord>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Format("bad magic".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != BINARY_VERSION {
        return Err(CoreError::SchemaVersion {
            found: version,
            expected: BINARY_VERSION,
        });
    }
    let n = r.read_u64::<LE>()? as usize;
    let mut patients = Vec::with_capacity(n);
    let mut counts = Vec::with_capacity(n);
    for _ in 0..n {
        let patient_id = read_str(&mut r)?;
        let sex = sex_from_u8(r.read_u8()?)?;
        let birth_epoch_min = r.read_i64::<LE>()?;
        let age_at_last_event_min = r.read_i64::<LE>()?;
        let death_time_min = match r.read_u8()? {
            0 => None,
            1 => Some(r.read_i64::<LE>()?),
            b => return Err(CoreError::Format(format!("death flag {b}"))),
        };
        let ethnicity_vec = read_f64s(&mut r)?;
        counts.push(r.read_u64::<LE>()? as usize);
        patients.push(PatientRecord {
            patient_id,
            demographics: Demographics {
                sex,
                ethnicity_vec,
                birth_epoch_min,
                age_at_last_event_min,
            },
            events: Vec::new(),
            death_time_min,
        });
    }
    let total: usize = counts.iter().sum();
    let times = (0..total).map(|_| Ok(r.read_i64::<LE>()?)).collect::<Result<Vec<_>>>()?;
    let mods = (0..total)
        .map(|_| modality_from_u8(r.read_u8()?))
        .collect::<Result<Vec<_>>>()?;
    let codes = (0..total).map(|_| read_str(&mut r)).collect::<Result<Vec<_>>>()?;
    let tags = (0..total).map(|_| Ok(r.read_u8()?)).collect::<Result<Vec<_>>>()?;
    let mut payloads = Vec::with_capacity(total);
    for tag in &tags {
        payloads.push(match tag {
            0 => Payload::Token(r.read_u32::<LE>()?),
            1 => Payload::Dense(read_f64s(&mut r)?),
            2 => Payload::Code,
            3 => Payload::Numeric(r.read_f64::<LE>()?),
            4 => Payload::Category(read_str(&mut r)?),
            t => return Err(CoreError::Format(format!("payload tag {t}"))),
        });
    }
    let mut cols = times.into_iter().zip(mods).zip(codes).zip(payloads);
    for (p, c) in patients.iter_mut().zip(counts) {
        p.events = cols
            .by_ref()
            .take(c)
            .map(|(((time_min, modality), source_code), payload)| EventRecord {
                time_min,
                modality,
                payload,
                source_code,
            })
            .collect();
    }
    Ok(patients)
}

pub fn save_binary(path: impl AsRef<Path>, patients: &[PatientRecord]) -> Result<()> {
    write_binary(BufWriter::new(File::create(path)?), patients)
}

pub fn load_binary(path: impl AsRef<Path>) -> Result<Vec<PatientRecord>> {
    read_binary(BufReader::new(File::open(path)?))
}

/// Loads either format, dispatching on the binary magic.
pub fn load_cohort(path: impl AsRef<Path>) -> Result<Vec<PatientRecord>> {
    let mut f = File::open(path.as_ref())?;
    let mut magic = [0u8; 8];
    let is_binary = f.read_exact(&mut magic).is_ok() && &magic == MAGIC;
    if is_binary {
        load_binary(path)
    } else {
        load_ndjson(path)
    }
}
