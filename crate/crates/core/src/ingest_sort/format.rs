//! On-disk hit, raw-hit, cluster and label formats.
//!
//! All binary formats are little-endian.
//!
//! | file        | header                         | record                                                    |
//! |-------------|--------------------------------|-----------------------------------------------------------|
//! | hits        | `PXH1`, u16 width, u16 height  | u16 x, u16 y, u64 toa_ns, u32 energy_milli_kev            |
//! | raw hits    | `PXR1`, u16 width, u16 height  | u16 x, u16 y, u64 toa_ticks, u32 ftoa_ticks, u32 tot_ticks |
//! | clusters    | `PXC1`                         | u32 hit_count, u64 min_toa_ns, then hit records           |
//! | labels      | none                           | u32 cluster id per hit, same order as the hit file        |
//!
//! CSV variants carry the same columns with a header row.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::marker::PhantomData;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::cluster::Cluster;
use crate::error::{Error, Result};
use crate::hit_model::{Energy, Hit, RawHit, MATRIX_SIZE};

pub const HIT_MAGIC: &[u8; 4] = b"PXH1";
pub const RAW_MAGIC: &[u8; 4] = b"PXR1";
pub const CLUSTER_MAGIC: &[u8; 4] = b"PXC1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Binary,
    Csv,
}

impl Format {
    /// `.csv` files are CSV, everything else binary.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }
}

/// Matrix dimensions stored in a hit file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub width: u16,
    pub height: u16,
}

impl Default for Geometry {
    fn default() -> Self {
        Self { width: MATRIX_SIZE, height: MATRIX_SIZE }
    }
}

/// A fixed-size record type stored in a headered stream.
pub trait Record: Sized + Copy {
    const MAGIC: &'static [u8; 4];
    const SIZE: usize;
    type Row: Serialize + for<'de> Deserialize<'de>;

    fn decode(buf: &[u8]) -> Self;
    fn encode(&self, out: &mut Vec<u8>);
    fn coords(&self) -> (u16, u16);
    fn to_row(&self) -> Self::Row;
    fn from_row(row: Self::Row) -> Self;
}

#[derive(Serialize, Deserialize)]
pub struct HitRow {
    x: u16,
    y: u16,
    toa_ns: u64,
    energy_milli_kev: u32,
}

impl Record for Hit {
    const MAGIC: &'static [u8; 4] = HIT_MAGIC;
    const SIZE: usize = 16;
    type Row = HitRow;

    fn decode(buf: &[u8]) -> Self {
        Hit {
            x: LittleEndian::read_u16(&buf[0..2]),
            y: LittleEndian::read_u16(&buf[2..4]),
            toa: LittleEndian::read_u64(&buf[4..12]),
            energy: Energy(LittleEndian::read_u32(&buf[12..16])),
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.write_u16::<LittleEndian>(self.x).unwrap();
        out.write_u16::<LittleEndian>(self.y).unwrap();
        out.write_u64::<LittleEndian>(self.toa).unwrap();
        out.write_u32::<LittleEndian>(self.energy.0).unwrap();
    }

    fn coords(&self) -> (u16, u16) {
        (self.x, self.y)
    }

    fn to_row(&self) -> HitRow {
        HitRow { x: self.x, y: self.y, toa_ns: self.toa, energy_milli_kev: self.energy.0 }
    }

    fn from_row(r: HitRow) -> Self {
        Hit { x: r.x, y: r.y, toa: r.toa_ns, energy: Energy(r.energy_milli_kev) }
    }
}

#[derive(Serialize, Deserialize)]
pub struct RawRow {
    x: u16,
    y: u16,
    toa_ticks: u64,
    ftoa_ticks: u32,
    tot_ticks: u32,
}

impl Record for RawHit {
    const MAGIC: &'static [u8; 4] = RAW_MAGIC;
    const SIZE: usize = 20;
    type Row = RawRow;

    fn decode(buf: &[u8]) -> Self {
        RawHit {
            x: LittleEndian::read_u16(&buf[0..2]),
            y: LittleEndian::read_u16(&buf[2..4]),
            toa_ticks: LittleEndian::read_u64(&buf[4..12]),
            ftoa_ticks: LittleEndian::read_u32(&buf[12..16]),
            tot_ticks: LittleEndian::read_u32(&buf[16..20]),
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.write_u16::<LittleEndian>(self.x).unwrap();
        out.write_u16::<LittleEndian>(self.y).unwrap();
        out.write_u64::<LittleEndian>(self.toa_ticks).unwrap();
        out.write_u32::<LittleEndian>(self.ftoa_ticks).unwrap();
        out.write_u32::<LittleEndian>(self.tot_ticks).unwrap();
    }

    fn coords(&self) -> (u16, u16) {
        (self.x, self.y)
    }

    fn to_row(&self) -> RawRow {
        RawRow { x: self.x, y: self.y, toa_ticks: self.toa_ticks, ftoa_ticks: self.ftoa_ticks, tot_ticks: self.tot_ticks }
    }

    fn from_row(r: RawRow) -> Self {
        RawHit { x: r.x, y: r.y, toa_ticks: r.toa_ticks, ftoa_ticks: r.ftoa_ticks, tot_ticks: r.tot_ticks }
    }
}

/// Lazy record reader. Never materializes the whole file.
pub enum RecordReader<T: Record> {
    Binary(BinaryReader<T, BufReader<File>>),
    Csv(CsvReader<T>),
}

impl<T: Record> RecordReader<T> {
    pub fn open(path: &Path, format: Format) -> Result<Self> {
        let file = File::open(path)?;
        Ok(match format {
            Format::Binary => RecordReader::Binary(BinaryReader::new(BufReader::with_capacity(1 << 16, file))?),
            Format::Csv => RecordReader::Csv(CsvReader::new(file, Geometry::default())),
        })
    }

    pub fn geometry(&self) -> Geometry {
        match self {
            RecordReader::Binary(r) => r.geometry,
            RecordReader::Csv(r) => r.geometry,
        }
    }
}

impl<T: Record> Iterator for RecordReader<T> {
    type Item = Result<T>;

    fn next(&mut self) -> Option<Self::Item> {
        match self {
            RecordReader::Binary(r) => r.next(),
            RecordReader::Csv(r) => r.next(),
        }
    }
}

pub struct BinaryReader<T: Record, R: Read> {
    inner: R,
    geometry: Geometry,
    offset: u64,
    buf: Vec<u8>,
    done: bool,
    _marker: PhantomData<T>,
}

impl<T: Record, R: Read> BinaryReader<T, R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut header = [0u8; 8];
        match read_full(&mut inner, &mut header)? {
            0 => {
                return Err(Error::Parse { offset: 0, msg: "empty file, missing header".into() });
            }
            8 => {}
            _ => return Err(Error::TruncatedInput { offset: 0 }),
        }
        if &header[0..4] != T::MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: format!("bad magic {:?}, expected {:?}", &header[0..4], std::str::from_utf8(T::MAGIC).unwrap()),
            });
        }
        let geometry = Geometry {
            width: LittleEndian::read_u16(&header[4..6]),
            height: LittleEndian::read_u16(&header[6..8]),
        };
        if geometry.width == 0 || geometry.height == 0 {
            return Err(Error::Parse { offset: 4, msg: "zero matrix dimension".into() });
        }
        Ok(Self { inner, geometry, offset: 8, buf: vec![0; T::SIZE], done: false, _marker: PhantomData })
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }
}

impl<T: Record, R: Read> Iterator for BinaryReader<T, R> {
    type Item = Result<T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let offset = self.offset;
        match read_full(&mut self.inner, &mut self.buf) {
            Ok(0) => {
                self.done = true;
                None
            }
            Ok(n) if n < T::SIZE => {
                self.done = true;
                Some(Err(Error::TruncatedInput { offset }))
            }
            Ok(_) => {
                self.offset += T::SIZE as u64;
                let rec = T::decode(&self.buf);
                let (x, y) = rec.coords();
                if x >= self.geometry.width || y >= self.geometry.height {
                    self.done = true;
                    return Some(Err(Error::Parse {
                        offset,
                        msg: format!("pixel ({x}, {y}) outside {}x{} matrix", self.geometry.width, self.geometry.height),
                    }));
                }
                Some(Ok(rec))
            }
            Err(e) => {
                self.done = true;
                Some(Err(e.into()))
            }
        }
    }
}

pub struct CsvReader<T: Record> {
    inner: csv::DeserializeRecordsIntoIter<File, T::Row>,
    geometry: Geometry,
    line: u64,
    done: bool,
}

impl<T: Record> CsvReader<T> {
    fn new(file: File, geometry: Geometry) -> Self {
        let rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        Self { inner: rdr.into_deserialize(), geometry, line: 1, done: false }
    }
}

impl<T: Record> Iterator for CsvReader<T> {
    type Item = Result<T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let row = self.inner.next()?;
        self.line += 1;
        match row {
            Ok(row) => {
                let rec = T::from_row(row);
                let (x, y) = rec.coords();
                if x >= self.geometry.width || y >= self.geometry.height {
                    self.done = true;
                    return Some(Err(Error::Parse { offset: self.line, msg: format!("pixel ({x}, {y}) outside matrix") }));
                }
                Some(Ok(rec))
            }
            Err(e) => {
                self.done = true;
                let line = e.position().map(|p| p.line()).unwrap_or(self.line);
                Some(Err(Error::Parse { offset: line, msg: e.to_string() }))
            }
        }
    }
}

/// Opens a calibrated hit stream.
pub fn read_hits(path: &Path, format: Format) -> Result<RecordReader<Hit>> {
    RecordReader::open(path, format)
}

/// Opens a raw (uncalibrated) hit stream.
pub fn read_raw_hits(path: &Path, format: Format) -> Result<RecordReader<RawHit>> {
    RecordReader::open(path, format)
}

/// Reads a whole hit file into memory.
pub fn load_hits(path: &Path) -> Result<(Geometry, Vec<Hit>)> {
    let reader = read_hits(path, Format::from_path(path))?;
    let geometry = reader.geometry();
    let hits = reader.collect::<Result<Vec<_>>>()?;
    Ok((geometry, hits))
}

pub fn write_records<T: Record>(path: &Path, format: Format, geometry: Geometry, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(Error::Write)?;
    match format {
        Format::Binary => {
            let mut w = BufWriter::new(file);
            write_binary_records(&mut w, geometry, records).map_err(Error::Write)?;
            w.flush().map_err(Error::Write)
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(file);
            if records.is_empty() {
                write_csv_header::<T>(&mut w)?;
            }
            for r in records {
                w.serialize(r.to_row()).map_err(csv_write_err)?;
            }
            w.flush().map_err(Error::Write)
        }
    }
}

pub fn write_hits(path: &Path, format: Format, geometry: Geometry, hits: &[Hit]) -> Result<()> {
    write_records(path, format, geometry, hits)
}

pub fn write_binary_records<T: Record, W: Write>(w: &mut W, geometry: Geometry, records: &[T]) -> io::Result<()> {
    w.write_all(T::MAGIC)?;
    w.write_u16::<LittleEndian>(geometry.width)?;
    w.write_u16::<LittleEndian>(geometry.height)?;
    let mut buf = Vec::with_capacity(T::SIZE * 4096);
    for chunk in records.chunks(4096) {
        buf.clear();
        for r in chunk {
            r.encode(&mut buf);
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn write_csv_header<T: Record>(w: &mut csv::Writer<File>) -> Result<()> {
    // serde only emits headers alongside the first row; derive them from a dummy.
    let mut probe = csv::Writer::from_writer(Vec::new());
    let dummy: T = T::decode(&vec![0u8; T::SIZE]);
    probe.serialize(dummy.to_row()).map_err(csv_write_err)?;
    let bytes = probe.into_inner().map_err(|e| Error::Write(io::Error::other(e.to_string())))?;
    let header = bytes.split(|b| *b == b'\n').next().unwrap_or(&[]);
    let fields: Vec<&[u8]> = header.split(|b| *b == b',').collect();
    w.write_record(fields).map_err(csv_write_err)
}

fn csv_write_err(e: csv::Error) -> Error {
    Error::Write(io::Error::other(e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct ClusterRow {
    cluster_id: u32,
    hit_count: u32,
    min_toa_ns: u64,
    x: u16,
    y: u16,
    toa_ns: u64,
    energy_milli_kev: u32,
}

const CLUSTER_CSV_HEADER: [&str; 7] = ["cluster_id", "hit_count", "min_toa_ns", "x", "y", "toa_ns", "energy_milli_kev"];

/// Streaming cluster writer; clusters are written in the order given.
pub enum ClusterWriter {
    Binary(BufWriter<File>),
    Csv { writer: csv::Writer<File>, next_id: u32 },
}

impl ClusterWriter {
    pub fn create(path: &Path, format: Format) -> Result<Self> {
        let file = File::create(path).map_err(Error::Write)?;
        Ok(match format {
            Format::Binary => {
                let mut w = BufWriter::with_capacity(1 << 16, file);
                w.write_all(CLUSTER_MAGIC).map_err(Error::Write)?;
                ClusterWriter::Binary(w)
            }
            Format::Csv => {
                let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
                writer.write_record(CLUSTER_CSV_HEADER).map_err(csv_write_err)?;
                ClusterWriter::Csv { writer, next_id: 0 }
            }
        })
    }

    pub fn write(&mut self, cluster: &Cluster) -> Result<()> {
        match self {
            ClusterWriter::Binary(w) => {
                let mut buf = Vec::with_capacity(12 + Hit::SIZE * cluster.len());
                buf.write_u32::<LittleEndian>(cluster.len() as u32).unwrap();
                buf.write_u64::<LittleEndian>(cluster.min_toa()).unwrap();
                for h in cluster.hits() {
                    h.encode(&mut buf);
                }
                w.write_all(&buf).map_err(Error::Write)
            }
            ClusterWriter::Csv { writer, next_id } => {
                for h in cluster.hits() {
                    writer
                        .serialize(ClusterRow {
                            cluster_id: *next_id,
                            hit_count: cluster.len() as u32,
                            min_toa_ns: cluster.min_toa(),
                            x: h.x,
                            y: h.y,
                            toa_ns: h.toa,
                            energy_milli_kev: h.energy.0,
                        })
                        .map_err(csv_write_err)?;
                }
                *next_id += 1;
                Ok(())
            }
        }
    }

    pub fn finish(self) -> Result<()> {
        match self {
            ClusterWriter::Binary(mut w) => w.flush().map_err(Error::Write),
            ClusterWriter::Csv { mut writer, .. } => writer.flush().map_err(Error::Write),
        }
    }
}

pub fn write_clusters<'a>(path: &Path, format: Format, clusters: impl IntoIterator<Item = &'a Cluster>) -> Result<()> {
    let mut w = ClusterWriter::create(path, format)?;
    for c in clusters {
        w.write(c)?;
    }
    w.finish()
}

/// Reads a cluster file completely.
pub fn read_clusters(path: &Path) -> Result<Vec<Cluster>> {
    match Format::from_path(path) {
        Format::Binary => read_binary_clusters(BufReader::new(File::open(path)?)),
        Format::Csv => read_csv_clusters(File::open(path)?),
    }
}

pub fn read_binary_clusters<R: BufRead>(mut r: R) -> Result<Vec<Cluster>> {
    let mut magic = [0u8; 4];
    if read_full(&mut r, &mut magic)? != 4 {
        return Err(Error::TruncatedInput { offset: 0 });
    }
    if &magic != CLUSTER_MAGIC {
        return Err(Error::Parse { offset: 0, msg: "bad cluster file magic".into() });
    }
    let mut offset = 4u64;
    let mut clusters = Vec::new();
    let mut head = [0u8; 12];
    let mut rec = [0u8; 16];
    loop {
        match read_full(&mut r, &mut head)? {
            0 => break,
            12 => {}
            _ => return Err(Error::TruncatedInput { offset }),
        }
        let count = LittleEndian::read_u32(&head[0..4]) as usize;
        let min_toa = LittleEndian::read_u64(&head[4..12]);
        if count == 0 {
            return Err(Error::Parse { offset, msg: "cluster with zero hits".into() });
        }
        let cluster_offset = offset;
        offset += 12;
        let mut hits = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            if read_full(&mut r, &mut rec)? != 16 {
                return Err(Error::TruncatedInput { offset });
            }
            hits.push(Hit::decode(&rec));
            offset += 16;
        }
        let cluster = Cluster::from_hits(hits).expect("count > 0");
        if cluster.min_toa() != min_toa {
            return Err(Error::Parse {
                offset: cluster_offset,
                msg: format!("stored min toa {min_toa} disagrees with hits ({})", cluster.min_toa()),
            });
        }
        clusters.push(cluster);
    }
    Ok(clusters)
}

fn read_csv_clusters(file: File) -> Result<Vec<Cluster>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut clusters = Vec::new();
    let mut current: Option<(u32, Vec<Hit>)> = None;
    for (i, row) in rdr.deserialize::<ClusterRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse { offset: i as u64 + 2, msg: e.to_string() })?;
        let hit = Hit { x: row.x, y: row.y, toa: row.toa_ns, energy: Energy(row.energy_milli_kev) };
        match &mut current {
            Some((id, hits)) if *id == row.cluster_id => hits.push(hit),
            _ => {
                if let Some((_, hits)) = current.take() {
                    clusters.push(Cluster::from_hits(hits).expect("non-empty"));
                }
                current = Some((row.cluster_id, vec![hit]));
            }
        }
    }
    if let Some((_, hits)) = current {
        clusters.push(Cluster::from_hits(hits).expect("non-empty"));
    }
    Ok(clusters)
}

pub fn write_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(Error::Write)?);
    for &l in labels {
        w.write_u32::<LittleEndian>(l).map_err(Error::Write)?;
    }
    w.flush().map_err(Error::Write)
}

pub fn read_labels(path: &Path) -> Result<Vec<u32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::TruncatedInput { offset: (bytes.len() / 4 * 4) as u64 });
    }
    let mut labels = Vec::with_capacity(bytes.len() / 4);
    let mut cursor = &bytes[..];
    while !cursor.is_empty() {
        labels.push(cursor.read_u32::<LittleEndian>()?);
    }
    Ok(labels)
}

/// Reads until `buf` is full or EOF; returns the number of bytes read.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}
