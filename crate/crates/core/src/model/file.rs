//! Binary model file.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "LCDT"                       magic
//! u32 version
//! u32 n, n bytes               JSON NetworkSpec
//! per weighted layer, kernel record then bias record:
//!   u8  dtype (0 = f32, 1 = u8)
//!   u32 rank, u32 dims[rank]
//!   f32 min, f32 max           only for dtype 1
//!   payload                    prod(dims) * sizeof(dtype)
//!   u32 crc32(payload)
//! u32 m                        calibration entries (0 when absent)
//! m * (f32 min, f32 max)
//! u32 crc32(calibration bytes)
//! ```

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::model::{LayerParams, Model, NetworkSpec};
use crate::quant::{CalibrationRecord, QuantParams, QuantizedTensor};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LCDT";
pub const FORMAT_VERSION: u32 = 1;

const TAG_F32: u8 = 0;
const TAG_U8: u8 = 1;

pub fn save(model: &Model) -> Vec<u8> {
    let mut buf = Vec::with_capacity(encoded_len(model) as usize);
    save_to(model, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

/// Size in bytes of the encoded model, without materializing it.
pub fn encoded_len(model: &Model) -> u64 {
    let mut counter = CountingSink(0);
    save_to(model, &mut counter).expect("counting sink cannot fail");
    counter.0
}

struct CountingSink(u64);

impl Write for CountingSink {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0 += buf.len() as u64;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

pub fn save_to<W: Write>(model: &Model, w: &mut W) -> io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let header = model.spec().to_json();
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    for p in model.layers() {
        match p {
            LayerParams::None => {}
            LayerParams::Float { kernel, bias } => {
                write_f32_record(w, kernel.dims(), kernel.data())?;
                write_f32_record(w, &[bias.len()], bias)?;
            }
            LayerParams::Quantized { kernel, bias } => {
                write_u8_record(w, kernel)?;
                write_f32_record(w, &[bias.len()], bias)?;
            }
        }
    }
    let cal = model.calibration().map(|c| c.layers.as_slice()).unwrap_or(&[]);
    let mut bytes = Vec::with_capacity(cal.len() * 8);
    for p in cal {
        bytes.extend_from_slice(&p.min.to_le_bytes());
        bytes.extend_from_slice(&p.max.to_le_bytes());
    }
    w.write_all(&(cal.len() as u32).to_le_bytes())?;
    w.write_all(&bytes)?;
    w.write_all(&crc32fast::hash(&bytes).to_le_bytes())
}

fn write_dims<W: Write>(w: &mut W, tag: u8, dims: &[usize]) -> io::Result<()> {
    w.write_all(&[tag])?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    Ok(())
}

fn write_f32_record<W: Write>(w: &mut W, dims: &[usize], data: &[f32]) -> io::Result<()> {
    write_dims(w, TAG_F32, dims)?;
    let mut payload = Vec::with_capacity(data.len() * 4);
    for v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    w.write_all(&crc32fast::hash(&payload).to_le_bytes())
}

fn write_u8_record<W: Write>(w: &mut W, t: &QuantizedTensor) -> io::Result<()> {
    write_dims(w, TAG_U8, t.dims())?;
    w.write_all(&t.params().min.to_le_bytes())?;
    w.write_all(&t.params().max.to_le_bytes())?;
    w.write_all(t.data())?;
    w.write_all(&crc32fast::hash(t.data()).to_le_bytes())
}

pub fn load_from<R: Read>(r: &mut R) -> Result<Model> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    load(&bytes)
}

pub fn load(bytes: &[u8]) -> Result<Model> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = cur.u32("header length")? as usize;
    let header = cur.take(header_len, "network header")?;
    let header = std::str::from_utf8(header).map_err(|e| Error::parse("model header", e))?;
    let spec = NetworkSpec::from_json(header)?;

    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut record = 0;
    for l in &spec.layers {
        if !l.has_weights() {
            layers.push(LayerParams::None);
            continue;
        }
        let kernel = cur.record(record)?;
        let bias = match cur.record(record + 1)? {
            Record::F32 { data, .. } => data,
            Record::U8 { .. } => return Err(Error::Data(format!("record {}: bias must be f32", record + 1))),
        };
        record += 2;
        layers.push(match kernel {
            Record::F32 { dims, data } => LayerParams::Float {
                kernel: Tensor::new(dims, data)?,
                bias,
            },
            Record::U8 { dims, params, data } => LayerParams::Quantized {
                kernel: QuantizedTensor::new(dims, data, params)?,
                bias,
            },
        });
    }

    let n_cal = cur.u32("calibration count")? as usize;
    let cal_bytes = cur.take(n_cal.checked_mul(8).ok_or_else(|| Error::Truncated("calibration".into()))?, "calibration")?;
    let stored = cur.u32("calibration crc")?;
    let computed = crc32fast::hash(cal_bytes);
    if stored != computed {
        return Err(Error::CrcMismatch {
            record,
            stored,
            computed,
        });
    }
    let calibration = (n_cal > 0)
        .then(|| -> Result<CalibrationRecord> {
            let layers = cal_bytes
                .chunks_exact(8)
                .map(|c| {
                    QuantParams::new(
                        f32::from_le_bytes(c[0..4].try_into().expect("4 bytes")),
                        f32::from_le_bytes(c[4..8].try_into().expect("4 bytes")),
                    )
                })
                .collect::<Result<_>>()?;
            Ok(CalibrationRecord { layers })
        })
        .transpose()?;
    if cur.pos != bytes.len() {
        return Err(Error::Data(format!("{} trailing bytes after model", bytes.len() - cur.pos)));
    }
    Model::new(spec, layers, calibration)
}

enum Record {
    F32 { dims: Vec<usize>, data: Vec<f32> },
    U8 { dims: Vec<usize>, params: QuantParams, data: Vec<u8> },
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn record(&mut self, idx: usize) -> Result<Record> {
        let what = format!("record {idx}");
        let tag = self.take(1, &what)?[0];
        let rank = self.u32(&what)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Data(format!("{what}: implausible rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| self.u32(&what).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Data(format!("{what}: dims overflow")))?;
        match tag {
            TAG_F32 => {
                let payload = self.take(count.checked_mul(4).ok_or_else(|| Error::Data("size overflow".into()))?, &what)?;
                self.check_crc(idx, payload)?;
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Ok(Record::F32 { dims, data })
            }
            TAG_U8 => {
                let min = self.f32(&what)?;
                let max = self.f32(&what)?;
                let payload = self.take(count, &what)?;
                self.check_crc(idx, payload)?;
                Ok(Record::U8 {
                    dims,
                    params: QuantParams::new(min, max)?,
                    data: payload.to_vec(),
                })
            }
            other => Err(Error::Data(format!("{what}: unknown dtype tag {other}"))),
        }
    }

    fn check_crc(&mut self, record: usize, payload: &[u8]) -> Result<()> {
        let stored = self.u32(&format!("record {record} crc"))?;
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::CrcMismatch {
                record,
                stored,
                computed,
            });
        }
        Ok(())
    }
}
