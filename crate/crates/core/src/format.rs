//! Binary dump and archive formats, plus CSV writers.
//!
//! Everything is little-endian. Dumps store cached tensors as `f32`.
//! Archives store codebook entries and magnitudes at the configured
//! `key_bits` width (16 -> IEEE half, 32 -> `f32`) and indices as `u32`, so
//! the payload bit count equals [`crate::metrics::payload_bits`] exactly.
//!
//! Dump (`SPKV`, version 1):
//!
//! ```text
//! magic "SPKV" | u16 version | u16 flags (bit0: keys rotated)
//! config: u32 hidden_dim, head_dim, num_q_heads, num_kv_heads,
//!         heads_per_group, num_layers | f64 rope_base | u32 key_bits, index_bits
//! per layer:
//!   u32 layer_index | u8 unfolded | u32 head_count
//!   per head: u32 n | u32 positions[n] | f32 keys[n][d_h] | f32 values[n][d_h]
//!   u8 has_queries
//!   if set: u32 window | per query head: u32 positions[window] | f32 queries[window][d_h]
//! ```
//!
//! Archive (`SPKC`, version 1):
//!
//! ```text
//! magic "SPKC" | u16 version | u16 flags (bit0: group-averaged, bit1: printed endpoint rule)
//! config (as above) | f64 key_threshold | f64 value_threshold
//! plan: f64 global_ratio | u32 seq_len | u32 window_len | f64 context_ratio
//!       | f64 first | f64 last | f64 min_ratio | u32 m | f64 per_layer[m]
//! per layer:
//!   header:  u32 layer_index | u8 unfolded | u32 original_tokens
//!            | u32 key_entries | u32 value_entries | u32 head_count | u32 records[head_count]
//!   payload: float key_entries[.][d_h] | float value_entries[.][d_h]
//!            | per record: u32 position, u32 key_ref, float key_mag, u32 value_ref, float value_mag
//! ```
//!
//! Header size in bytes is `116 + 8 m + sum over layers (21 + 4 head_count)`
//! ([`archive_header_bytes`]); every other byte is payload.

use std::fs;
use std::path::Path;

use half::f16;
use serde::Serialize;

use crate::allocator::{BudgetPlan, EndpointRule};
use crate::codebook::{CacheKind, Codebook, CompressedLayer, TokenRecord};
use crate::error::{config_err, Error, Result};
use crate::eviction::GqaMode;
use crate::metrics::CompressionReport;
use crate::model::{DumpLayer, HeadCache, KvDump, LayerCache, ModelConfig, QueryWindow};
use crate::pipeline::{Archive, ArchiveLayer};

pub const DUMP_MAGIC: [u8; 4] = *b"SPKV";
pub const ARCHIVE_MAGIC: [u8; 4] = *b"SPKC";
pub const DUMP_VERSION: u16 = 1;
pub const ARCHIVE_VERSION: u16 = 1;

const CONFIG_BYTES: usize = 6 * 4 + 8 + 2 * 4;

/// Archive bytes before the first layer.
pub fn archive_fixed_header_bytes(num_layers: usize) -> usize {
    4 + 2 + 2 + CONFIG_BYTES + 16 + 52 + 8 * num_layers
}

/// Structural bytes at the start of one archive layer.
pub fn layer_header_bytes(heads: usize) -> usize {
    21 + 4 * heads
}

/// Bytes of an archive that are not payload.
pub fn archive_header_bytes(heads_per_layer: &[usize]) -> usize {
    archive_fixed_header_bytes(heads_per_layer.len())
        + heads_per_layer.iter().map(|&h| layer_header_bytes(h)).sum::<usize>()
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| config_err(format!("{v} does not fit in u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn pos(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, at: 0 }
    }
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).ok_or(Error::Truncated(what))?;
        let s = self.bytes.get(self.at..end).ok_or(Error::Truncated(what))?;
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn usize(&mut self, what: &'static str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }
    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f32_rows(&mut self, rows: usize, dim: usize, what: &'static str) -> Result<Vec<Vec<f64>>> {
        let n = rows.checked_mul(dim).and_then(|x| x.checked_mul(4)).ok_or(Error::Truncated(what))?;
        let raw = self.take(n, what)?;
        Ok(raw
            .chunks_exact(dim.max(1) * 4)
            .take(rows)
            .map(|row| {
                row.chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect()
            })
            .collect())
    }
    fn positions(&mut self, n: usize, what: &'static str) -> Result<Vec<u32>> {
        let raw = self.take(n.checked_mul(4).ok_or(Error::Truncated(what))?, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().expect("4 bytes");
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }
    fn version(&mut self, expected: u16) -> Result<()> {
        let found = self.u16("version")?;
        if found != expected {
            return Err(Error::UnsupportedVersion { expected, found });
        }
        Ok(())
    }
    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::CountMismatch(format!(
                "{} trailing bytes after declared content",
                self.bytes.len() - self.at
            )));
        }
        Ok(())
    }
}

fn write_config(w: &mut Writer, c: &ModelConfig) -> Result<()> {
    for v in [c.hidden_dim, c.head_dim, c.num_q_heads, c.num_kv_heads, c.heads_per_group, c.num_layers] {
        w.u32(v)?;
    }
    w.f64(c.rope_base);
    w.pos(c.key_bits);
    w.pos(c.index_bits);
    Ok(())
}

fn read_config(r: &mut Reader) -> Result<ModelConfig> {
    let c = ModelConfig {
        hidden_dim: r.usize("config")?,
        head_dim: r.usize("config")?,
        num_q_heads: r.usize("config")?,
        num_kv_heads: r.usize("config")?,
        heads_per_group: r.usize("config")?,
        num_layers: r.usize("config")?,
        rope_base: r.f64("config")?,
        key_bits: r.u32("config")?,
        index_bits: r.u32("config")?,
    };
    c.validate()?;
    Ok(c)
}

pub fn encode_dump(dump: &KvDump) -> Result<Vec<u8>> {
    dump.validate()?;
    let mut w = Writer::new();
    w.buf.extend_from_slice(&DUMP_MAGIC);
    w.u16(DUMP_VERSION);
    w.u16(u16::from(dump.keys_rotated));
    write_config(&mut w, &dump.config)?;
    for layer in &dump.layers {
        let cache = &layer.cache;
        w.u32(cache.layer_index)?;
        w.u8(u8::from(cache.unfolded));
        w.u32(cache.heads.len())?;
        for head in &cache.heads {
            w.u32(head.len())?;
            head.positions.iter().for_each(|&p| w.pos(p));
            head.keys.iter().for_each(|k| w.f32s(k));
            head.values.iter().for_each(|v| w.f32s(v));
        }
        match &layer.windows {
            None => w.u8(0),
            Some(windows) => {
                w.u8(1);
                let len = windows.first().map_or(0, QueryWindow::len);
                if windows.iter().any(|q| q.len() != len) {
                    return Err(Error::CountMismatch("query windows differ in length".into()));
                }
                w.u32(len)?;
                for q in windows {
                    q.positions.iter().for_each(|&p| w.pos(p));
                    q.queries.iter().for_each(|v| w.f32s(v));
                }
            }
        }
    }
    Ok(w.buf)
}

pub fn decode_dump(bytes: &[u8]) -> Result<KvDump> {
    let mut r = Reader::new(bytes);
    r.magic(DUMP_MAGIC)?;
    r.version(DUMP_VERSION)?;
    let flags = r.u16("flags")?;
    let config = read_config(&mut r)?;
    let d = config.head_dim;
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        let layer_index = r.usize("layer header")?;
        let unfolded = r.u8("layer header")? != 0;
        let head_count = r.usize("layer header")?;
        let expected = if unfolded { config.num_q_heads } else { config.num_kv_heads };
        if head_count != expected {
            return Err(Error::CountMismatch(format!(
                "layer {layer_index} declares {head_count} heads, config implies {expected}"
            )));
        }
        let mut heads = Vec::with_capacity(head_count);
        for _ in 0..head_count {
            let n = r.usize("head header")?;
            let positions = r.positions(n, "positions")?;
            let keys = r.f32_rows(n, d, "keys")?;
            let values = r.f32_rows(n, d, "values")?;
            heads.push(HeadCache { positions, keys, values });
        }
        let windows = match r.u8("query flag")? {
            0 => None,
            1 => {
                let len = r.usize("query window")?;
                let mut ws = Vec::with_capacity(config.num_q_heads);
                for _ in 0..config.num_q_heads {
                    let positions = r.positions(len, "query positions")?;
                    let queries = r.f32_rows(len, d, "queries")?;
                    ws.push(QueryWindow { positions, queries });
                }
                Some(ws)
            }
            other => return Err(Error::CountMismatch(format!("query flag {other} is not 0 or 1"))),
        };
        layers.push(DumpLayer {
            cache: LayerCache { layer_index, heads, unfolded },
            windows,
        });
    }
    r.finish()?;
    let dump = KvDump { config, keys_rotated: flags & 1 != 0, layers };
    dump.validate()?;
    Ok(dump)
}

pub fn write_dump(dump: &KvDump, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dump(dump)?)?;
    Ok(())
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<KvDump> {
    decode_dump(&fs::read(path)?)
}

/// Float width used inside archives.
#[derive(Clone, Copy)]
enum Float {
    Half,
    Single,
}

impl Float {
    fn for_config(c: &ModelConfig) -> Result<Self> {
        if c.index_bits != 32 {
            return Err(config_err(format!(
                "archives store u32 indices; index_bits {} unsupported",
                c.index_bits
            )));
        }
        match c.key_bits {
            16 => Ok(Float::Half),
            32 => Ok(Float::Single),
            b => Err(config_err(format!("archives store 16- or 32-bit floats; key_bits {b} unsupported"))),
        }
    }

    fn write(self, w: &mut Writer, v: f64) {
        match self {
            Float::Half => w.buf.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
            Float::Single => w.buf.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }

    fn read(self, r: &mut Reader, what: &'static str) -> Result<f64> {
        Ok(match self {
            Float::Half => f16::from_le_bytes(r.take(2, what)?.try_into().expect("2 bytes")).to_f64(),
            Float::Single => f64::from(f32::from_le_bytes(r.take(4, what)?.try_into().expect("4 bytes"))),
        })
    }

    fn round(self, v: f64) -> f64 {
        match self {
            Float::Half => f16::from_f64(v).to_f64(),
            Float::Single => f64::from(v as f32),
        }
    }

    /// Rounded direction that survives renormalise-and-round unchanged,
    /// with its norm.
    fn direction(self, unit: &[f64]) -> (Vec<f64>, f64) {
        let mut cur: Vec<f64> = unit.iter().map(|&x| self.round(x)).collect();
        for _ in 0..16 {
            let n = norm(&cur);
            let next: Vec<f64> = cur.iter().map(|&x| self.round(x / n)).collect();
            if next == cur {
                break;
            }
            cur = next;
        }
        let n = norm(&cur);
        (cur, n)
    }

    fn magnitude(self, v: f64) -> Result<f64> {
        let stored = self.round(v);
        if stored > 0.0 && stored.is_finite() {
            Ok(stored)
        } else {
            Err(config_err(format!("magnitude {v} not representable at archive width")))
        }
    }
}

pub fn encode_archive(archive: &Archive) -> Result<Vec<u8>> {
    let c = &archive.config;
    c.validate()?;
    let float = Float::for_config(c)?;
    let mut w = Writer::new();
    w.buf.extend_from_slice(&ARCHIVE_MAGIC);
    w.u16(ARCHIVE_VERSION);
    let mut flags = 0u16;
    if archive.mode == GqaMode::GroupAveraged {
        flags |= 1;
    }
    if archive.plan.rule == EndpointRule::Printed {
        flags |= 2;
    }
    w.u16(flags);
    write_config(&mut w, c)?;
    w.f64(archive.key_threshold);
    w.f64(archive.value_threshold);

    let p = &archive.plan;
    w.f64(p.global_ratio);
    w.u32(p.seq_len)?;
    w.u32(p.window_len)?;
    w.f64(p.context_ratio);
    w.f64(p.endpoints.0);
    w.f64(p.endpoints.1);
    w.f64(p.min_ratio);
    w.u32(p.per_layer.len())?;
    p.per_layer.iter().for_each(|&x| w.f64(x));

    for layer in &archive.layers {
        let cl = &layer.compressed;
        cl.validate()?;
        w.u32(cl.layer_index)?;
        w.u8(u8::from(cl.unfolded));
        w.u32(layer.original_tokens)?;
        w.u32(cl.keys.len())?;
        w.u32(cl.values.len())?;
        w.u32(cl.heads.len())?;
        for h in &cl.heads {
            w.u32(h.len())?;
        }
        let mut norms = [Vec::new(), Vec::new()];
        for (book, norms) in [&cl.keys, &cl.values].into_iter().zip(&mut norms) {
            for e in &book.entries {
                if e.len() != c.head_dim {
                    return Err(config_err("codebook entry length differs from head_dim"));
                }
                let (dir, n) = float.direction(e);
                dir.iter().for_each(|&x| float.write(&mut w, x));
                norms.push(n);
            }
        }
        for rec in cl.heads.iter().flatten() {
            w.pos(rec.position);
            w.pos(rec.key_ref);
            float.write(&mut w, float.magnitude(rec.key_magnitude / norms[0][rec.key_ref as usize])?);
            w.pos(rec.value_ref);
            float.write(&mut w, float.magnitude(rec.value_magnitude / norms[1][rec.value_ref as usize])?);
        }
    }
    Ok(w.buf)
}

pub fn decode_archive(bytes: &[u8]) -> Result<Archive> {
    let mut r = Reader::new(bytes);
    r.magic(ARCHIVE_MAGIC)?;
    r.version(ARCHIVE_VERSION)?;
    let flags = r.u16("flags")?;
    let config = read_config(&mut r)?;
    let float = Float::for_config(&config)?;
    let key_threshold = r.f64("thresholds")?;
    let value_threshold = r.f64("thresholds")?;

    let global_ratio = r.f64("plan")?;
    let seq_len = r.usize("plan")?;
    let window_len = r.usize("plan")?;
    let context_ratio = r.f64("plan")?;
    let endpoints = (r.f64("plan")?, r.f64("plan")?);
    let min_ratio = r.f64("plan")?;
    let m = r.usize("plan")?;
    if m != config.num_layers {
        return Err(Error::CountMismatch(format!(
            "plan covers {m} layers, config declares {}",
            config.num_layers
        )));
    }
    let per_layer = (0..m).map(|_| r.f64("plan")).collect::<Result<Vec<_>>>()?;
    let plan = BudgetPlan {
        global_ratio,
        seq_len,
        window_len,
        context_ratio,
        endpoints,
        per_layer,
        min_ratio,
        midpoint: crate::allocator::midpoint(min_ratio),
        rule: if flags & 2 != 0 { EndpointRule::Printed } else { EndpointRule::Conserving },
    };

    let d = config.head_dim;
    let mut layers = Vec::with_capacity(m);
    for _ in 0..m {
        let layer_index = r.usize("layer header")?;
        let unfolded = r.u8("layer header")? != 0;
        let original_tokens = r.usize("layer header")?;
        let n_keys = r.usize("layer header")?;
        let n_values = r.usize("layer header")?;
        let n_heads = r.usize("layer header")?;
        let expected = if unfolded { config.num_q_heads } else { config.num_kv_heads };
        if n_heads != expected {
            return Err(Error::CountMismatch(format!(
                "layer {layer_index} declares {n_heads} heads, config implies {expected}"
            )));
        }
        let counts = (0..n_heads).map(|_| r.usize("layer header")).collect::<Result<Vec<_>>>()?;
        let mut read_book = |n: usize, kind, threshold, what| -> Result<Codebook> {
            let entries = (0..n)
                .map(|_| (0..d).map(|_| float.read(&mut r, what)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            Ok(Codebook { kind, entries, threshold })
        };
        let keys = read_book(n_keys, CacheKind::Key, key_threshold, "key codebook")?;
        let values = read_book(n_values, CacheKind::Value, value_threshold, "value codebook")?;
        let mut heads = Vec::with_capacity(n_heads);
        for &n in &counts {
            let mut recs = Vec::with_capacity(n);
            for _ in 0..n {
                recs.push(TokenRecord {
                    position: r.u32("token records")?,
                    key_ref: r.u32("token records")?,
                    key_magnitude: float.read(&mut r, "token records")?,
                    value_ref: r.u32("token records")?,
                    value_magnitude: float.read(&mut r, "token records")?,
                });
            }
            heads.push(recs);
        }
        let mut compressed = CompressedLayer { layer_index, unfolded, keys, values, heads };
        compressed.validate()?;
        let key_norms = unit_entries(&mut compressed.keys)?;
        let value_norms = unit_entries(&mut compressed.values)?;
        for rec in compressed.heads.iter_mut().flatten() {
            rec.key_magnitude *= key_norms[rec.key_ref as usize];
            rec.value_magnitude *= value_norms[rec.value_ref as usize];
        }
        layers.push(ArchiveLayer { original_tokens, compressed });
    }
    r.finish()?;
    Ok(Archive {
        config,
        plan,
        key_threshold,
        value_threshold,
        mode: if flags & 1 != 0 { GqaMode::GroupAveraged } else { GqaMode::PerHeadUnfolded },
        layers,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales stored directions to unit length and returns their norms.
fn unit_entries(book: &mut Codebook) -> Result<Vec<f64>> {
    book.entries
        .iter_mut()
        .map(|e| {
            let n = norm(e);
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::CorruptArchive("codebook entry has zero norm".into()));
            }
            e.iter_mut().for_each(|x| *x /= n);
            Ok(n)
        })
        .collect()
}

pub fn write_archive(archive: &Archive, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_archive(archive)?)?;
    Ok(())
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Archive> {
    decode_archive(&fs::read(path)?)
}

#[derive(Serialize)]
struct ReportRow {
    layer: usize,
    r1: f64,
    r2: f64,
    r3: f64,
    r_layer: f64,
    r3_conjectured: f64,
    r_layer_conjectured: f64,
    key_entries: usize,
    value_entries: usize,
    retained_tokens: usize,
    original_bits: u64,
    compressed_bits: u64,
    header_bits: u64,
}

/// One row per layer.
pub fn write_report_csv(report: &CompressionReport, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, l) in report.per_layer.iter().enumerate() {
        let bits = report.per_layer_bits[i];
        w.serialize(ReportRow {
            layer: l.layer,
            r1: l.r1,
            r2: l.r2,
            r3: l.r3,
            r_layer: l.r_layer,
            r3_conjectured: l.r3_conjectured,
            r_layer_conjectured: l.r_layer_conjectured,
            key_entries: report.key_codebook_sizes[i],
            value_entries: report.value_codebook_sizes[i],
            retained_tokens: report.retained_tokens[i],
            original_bits: bits.original,
            compressed_bits: bits.payload,
            header_bits: bits.header,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Serialises any row type to a CSV file.
pub fn write_csv<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}
