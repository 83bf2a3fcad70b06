//! EDF and EDF+ reading and writing.
//!
//! Layout: a 256-byte fixed header, then 256 bytes of per-signal headers
//! (each field stored for all signals before the next field), then data
//! records holding, per signal, `samples_per_record` 16-bit little-endian
//! two's-complement values. EDF+ annotation signals (label
//! `EDF Annotations`) reuse those 2-byte slots as raw bytes holding TALs:
//! `+onset\x15duration\x14text\x14...\x00`.
//!
//! Parsing validates every size against the input length before allocating,
//! so arbitrary bytes produce either an [`EdfFile`] or an [`EdfError`].

use thiserror::Error;

pub const ANNOTATION_LABEL: &str = "EDF Annotations";
const FIXED_HEADER: usize = 256;
const SIGNAL_HEADER: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EdfError {
    #[error("truncated input at byte {offset}: need {needed} bytes, have {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("invalid {field} at byte {offset}: {value:?}")]
    BadField {
        offset: usize,
        field: &'static str,
        value: String,
    },
    #[error("record count mismatch: header says {declared}, data holds {actual} (record size {record_size} bytes)")]
    RecordCount {
        declared: i64,
        actual: usize,
        record_size: usize,
    },
    #[error("malformed annotation at byte {offset}: {detail}")]
    Annotation { offset: usize, detail: String },
    #[error("{0}")]
    Invalid(String),
}

/// One per-signal header block.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalHeader {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefiltering: String,
    pub samples_per_record: usize,
    pub reserved: String,
}

impl SignalHeader {
    pub fn is_annotation(&self) -> bool {
        self.label.trim() == ANNOTATION_LABEL
    }

    /// Physical units per digital step.
    pub fn gain(&self) -> f64 {
        (self.physical_max - self.physical_min) / f64::from(self.digital_max - self.digital_min)
    }

    pub fn offset(&self) -> f64 {
        self.physical_min - self.gain() * f64::from(self.digital_min)
    }

    pub fn to_physical(&self, digital: i16) -> f64 {
        f64::from(digital) * self.gain() + self.offset()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdfHeader {
    pub version: String,
    pub patient: String,
    pub recording: String,
    pub start_date: String,
    pub start_time: String,
    /// `EDF+C` / `EDF+D` for EDF+, blank for plain EDF.
    pub reserved: String,
    pub n_records: usize,
    pub record_duration: f64,
    pub signals: Vec<SignalHeader>,
}

impl EdfHeader {
    pub fn header_bytes(&self) -> usize {
        FIXED_HEADER + SIGNAL_HEADER * self.signals.len()
    }

    /// Bytes per data record.
    pub fn record_size(&self) -> usize {
        self.signals.iter().map(|s| 2 * s.samples_per_record).sum()
    }
}

/// An annotation decoded from a TAL.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub onset: f64,
    pub duration: f64,
    pub text: String,
}

/// A parsed file: the header plus every signal's raw 16-bit samples.
///
/// Annotation signals keep their bytes as samples too, which makes
/// [`EdfFile::to_bytes`] reproduce the data section exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfFile {
    pub header: EdfHeader,
    /// `digital[signal]` holds `n_records * samples_per_record` values.
    pub digital: Vec<Vec<i16>>,
    pub annotations: Vec<Annotation>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EdfError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(EdfError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.bytes.len().saturating_sub(self.pos),
            }),
        }
    }

    fn text(&mut self, n: usize) -> Result<String, EdfError> {
        let raw = self.take(n)?;
        Ok(raw
            .iter()
            .map(|&b| if b.is_ascii() { b as char } else { '?' })
            .collect::<String>()
            .trim_end()
            .to_string())
    }

    fn number<T: std::str::FromStr>(&mut self, n: usize, field: &'static str) -> Result<T, EdfError> {
        let offset = self.pos;
        let raw = self.take(n)?;
        let text = std::str::from_utf8(raw).map_err(|_| EdfError::BadField {
            offset,
            field,
            value: String::from_utf8_lossy(raw).into_owned(),
        })?;
        text.trim().parse().map_err(|_| EdfError::BadField {
            offset,
            field,
            value: text.to_string(),
        })
    }

    fn finite(&mut self, n: usize, field: &'static str) -> Result<f64, EdfError> {
        let offset = self.pos;
        let v: f64 = self.number(n, field)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EdfError::BadField {
                offset,
                field,
                value: v.to_string(),
            })
        }
    }
}

impl EdfFile {
    pub fn parse(bytes: &[u8]) -> Result<Self, EdfError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let version = cur.text(8)?;
        let patient = cur.text(80)?;
        let recording = cur.text(80)?;
        let start_date = cur.text(8)?;
        let start_time = cur.text(8)?;
        let header_pos = cur.pos;
        let header_bytes: usize = cur.number(8, "header byte count")?;
        let reserved = cur.text(44)?;
        let records_pos = cur.pos;
        let declared_records: i64 = cur.number(8, "record count")?;
        let duration_pos = cur.pos;
        let record_duration = cur.finite(8, "record duration")?;
        if record_duration <= 0.0 {
            return Err(EdfError::BadField {
                offset: duration_pos,
                field: "record duration",
                value: record_duration.to_string(),
            });
        }
        let ns_pos = cur.pos;
        let ns: usize = cur.number(4, "signal count")?;
        let max_signals = (bytes.len() - FIXED_HEADER.min(bytes.len())) / SIGNAL_HEADER;
        if ns == 0 || ns > max_signals {
            return Err(if ns == 0 {
                EdfError::BadField {
                    offset: ns_pos,
                    field: "signal count",
                    value: "0".into(),
                }
            } else {
                EdfError::Truncated {
                    offset: FIXED_HEADER,
                    needed: ns * SIGNAL_HEADER,
                    available: bytes.len() - FIXED_HEADER,
                }
            });
        }
        if header_bytes != FIXED_HEADER + SIGNAL_HEADER * ns {
            return Err(EdfError::BadField {
                offset: header_pos,
                field: "header byte count",
                value: header_bytes.to_string(),
            });
        }

        let mut fields: Vec<Vec<String>> = Vec::new();
        for width in [16, 80, 8] {
            let mut col = Vec::with_capacity(ns);
            for _ in 0..ns {
                col.push(cur.text(width)?);
            }
            fields.push(col);
        }
        let mut phys_min = Vec::with_capacity(ns);
        for _ in 0..ns {
            phys_min.push(cur.finite(8, "physical minimum")?);
        }
        let mut phys_max = Vec::with_capacity(ns);
        for _ in 0..ns {
            phys_max.push(cur.finite(8, "physical maximum")?);
        }
        let mut dig_min = Vec::with_capacity(ns);
        for _ in 0..ns {
            dig_min.push((cur.pos, cur.number::<i32>(8, "digital minimum")?));
        }
        let mut dig_max = Vec::with_capacity(ns);
        for _ in 0..ns {
            dig_max.push((cur.pos, cur.number::<i32>(8, "digital maximum")?));
        }
        let mut prefilter = Vec::with_capacity(ns);
        for _ in 0..ns {
            prefilter.push(cur.text(80)?);
        }
        let mut spr = Vec::with_capacity(ns);
        for _ in 0..ns {
            let pos = cur.pos;
            let n: usize = cur.number(8, "samples per record")?;
            if n == 0 {
                return Err(EdfError::BadField {
                    offset: pos,
                    field: "samples per record",
                    value: "0".into(),
                });
            }
            spr.push(n);
        }
        let mut sig_reserved = Vec::with_capacity(ns);
        for _ in 0..ns {
            sig_reserved.push(cur.text(32)?);
        }

        let mut signals = Vec::with_capacity(ns);
        let [labels, transducers, dims]: [Vec<String>; 3] =
            fields.try_into().expect("three text columns");
        for i in 0..ns {
            let (pos, dmin) = dig_min[i];
            let (_, dmax) = dig_max[i];
            if dmax <= dmin || dmin < i32::from(i16::MIN) || dmax > i32::from(i16::MAX) {
                return Err(EdfError::BadField {
                    offset: pos,
                    field: "digital range",
                    value: format!("{dmin}..{dmax}"),
                });
            }
            if phys_max[i] == phys_min[i] {
                return Err(EdfError::Invalid(format!(
                    "signal {i}: physical minimum equals maximum"
                )));
            }
            signals.push(SignalHeader {
                label: labels[i].clone(),
                transducer: transducers[i].clone(),
                physical_dimension: dims[i].clone(),
                physical_min: phys_min[i],
                physical_max: phys_max[i],
                digital_min: dmin,
                digital_max: dmax,
                prefiltering: prefilter[i].clone(),
                samples_per_record: spr[i],
                reserved: sig_reserved[i].clone(),
            });
        }

        let header = EdfHeader {
            version,
            patient,
            recording,
            start_date,
            start_time,
            reserved,
            n_records: 0,
            record_duration,
            signals,
        };
        let record_size = header
            .signals
            .iter()
            .try_fold(0usize, |acc, s| s.samples_per_record.checked_mul(2)?.checked_add(acc))
            .ok_or_else(|| EdfError::Invalid("record size overflows".into()))?;
        let data = &bytes[cur.pos..];
        if data.len() % record_size != 0 {
            return Err(EdfError::RecordCount {
                declared: declared_records,
                actual: data.len() / record_size,
                record_size,
            });
        }
        let actual = data.len() / record_size;
        match declared_records {
            -1 => {}
            n if n >= 0 && n as usize == actual => {}
            n if n >= 0 && (n as usize) > actual => {
                return Err(EdfError::Truncated {
                    offset: cur.pos + actual * record_size,
                    needed: (n as usize - actual) * record_size,
                    available: 0,
                })
            }
            n => {
                return Err(if n < -1 {
                    EdfError::BadField {
                        offset: records_pos,
                        field: "record count",
                        value: n.to_string(),
                    }
                } else {
                    EdfError::RecordCount {
                        declared: n,
                        actual,
                        record_size,
                    }
                })
            }
        }

        let mut header = header;
        header.n_records = actual;
        let mut digital: Vec<Vec<i16>> = header
            .signals
            .iter()
            .map(|s| Vec::with_capacity(s.samples_per_record * actual))
            .collect();
        for record in data.chunks_exact(record_size) {
            let mut off = 0;
            for (s, out) in header.signals.iter().zip(digital.iter_mut()) {
                let n = s.samples_per_record;
                out.extend(
                    record[off..off + 2 * n]
                        .chunks_exact(2)
                        .map(|b| i16::from_le_bytes([b[0], b[1]])),
                );
                off += 2 * n;
            }
        }

        let data_start = header.header_bytes();
        let mut annotations = Vec::new();
        for (si, s) in header.signals.iter().enumerate() {
            if !s.is_annotation() {
                continue;
            }
            let sig_off: usize = header.signals[..si]
                .iter()
                .map(|x| 2 * x.samples_per_record)
                .sum();
            for r in 0..actual {
                let start = data_start + r * record_size + sig_off;
                let raw = &bytes[start..start + 2 * s.samples_per_record];
                annotations.extend(decode_tals(raw, start)?);
            }
        }
        Ok(Self {
            header,
            digital,
            annotations,
        })
    }

    /// Serialises the file. Annotation signals are written from their stored samples.
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(h.header_bytes() + h.n_records * h.record_size());
        put(&mut out, &h.version, 8);
        put(&mut out, &h.patient, 80);
        put(&mut out, &h.recording, 80);
        put(&mut out, &h.start_date, 8);
        put(&mut out, &h.start_time, 8);
        put(&mut out, &h.header_bytes().to_string(), 8);
        put(&mut out, &h.reserved, 44);
        put(&mut out, &h.n_records.to_string(), 8);
        put(&mut out, &format_number(h.record_duration), 8);
        put(&mut out, &h.signals.len().to_string(), 4);
        let sig = &h.signals;
        sig.iter().for_each(|s| put(&mut out, &s.label, 16));
        sig.iter().for_each(|s| put(&mut out, &s.transducer, 80));
        sig.iter().for_each(|s| put(&mut out, &s.physical_dimension, 8));
        sig.iter().for_each(|s| put(&mut out, &format_number(s.physical_min), 8));
        sig.iter().for_each(|s| put(&mut out, &format_number(s.physical_max), 8));
        sig.iter().for_each(|s| put(&mut out, &s.digital_min.to_string(), 8));
        sig.iter().for_each(|s| put(&mut out, &s.digital_max.to_string(), 8));
        sig.iter().for_each(|s| put(&mut out, &s.prefiltering, 80));
        sig.iter().for_each(|s| put(&mut out, &s.samples_per_record.to_string(), 8));
        sig.iter().for_each(|s| put(&mut out, &s.reserved, 32));
        for r in 0..h.n_records {
            for (s, samples) in sig.iter().zip(&self.digital) {
                let n = s.samples_per_record;
                for v in &samples[r * n..(r + 1) * n] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }
}

fn put(out: &mut Vec<u8>, text: &str, width: usize) {
    let bytes: Vec<u8> = text
        .bytes()
        .map(|b| if (0x20..0x7f).contains(&b) { b } else { b'?' })
        .take(width)
        .collect();
    out.extend_from_slice(&bytes);
    out.extend(std::iter::repeat(b' ').take(width - bytes.len()));
}

/// Shortest decimal rendering that fits an 8-character header field.
pub fn format_number(v: f64) -> String {
    let plain = format!("{v}");
    if plain.len() <= 8 {
        return plain;
    }
    for prec in (0..8).rev() {
        let s = format!("{v:.prec$}");
        if s.len() <= 8 {
            return s;
        }
    }
    format!("{v:.0}")
}

/// Decodes every TAL in one record's annotation bytes.
///
/// `base` is the absolute byte offset of `raw`, used in error messages.
pub fn decode_tals(raw: &[u8], base: usize) -> Result<Vec<Annotation>, EdfError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < raw.len() {
        if raw[pos] == 0 {
            pos += 1;
            continue;
        }
        let end = raw[pos..]
            .iter()
            .position(|&b| b == 0)
            .map(|e| pos + e)
            .ok_or_else(|| EdfError::Annotation {
                offset: base + pos,
                detail: "TAL not terminated by 0x00".into(),
            })?;
        let tal = &raw[pos..end];
        let err = |detail: &str| EdfError::Annotation {
            offset: base + pos,
            detail: detail.to_string(),
        };
        let mut parts = tal.split(|&b| b == 0x14);
        let stamp = parts.next().ok_or_else(|| err("empty TAL"))?;
        let mut stamp_parts = stamp.split(|&b| b == 0x15);
        let onset_raw = stamp_parts.next().unwrap_or_default();
        let duration_raw = stamp_parts.next();
        if stamp_parts.next().is_some() {
            return Err(err("more than one duration separator"));
        }
        let onset = parse_signed(onset_raw).ok_or_else(|| err("bad onset"))?;
        let duration = match duration_raw {
            Some(d) => parse_unsigned(d).ok_or_else(|| err("bad duration"))?,
            None => 0.0,
        };
        // Texts follow the stamp; the trailing 0x14 leaves one empty slice.
        for text in parts {
            if text.is_empty() {
                continue;
            }
            out.push(Annotation {
                onset,
                duration,
                text: String::from_utf8_lossy(text).into_owned(),
            });
        }
        pos = end + 1;
    }
    Ok(out)
}

fn parse_signed(raw: &[u8]) -> Option<f64> {
    let (&sign, rest) = raw.split_first()?;
    if sign != b'+' && sign != b'-' {
        return None;
    }
    let v = parse_unsigned(rest)?;
    Some(if sign == b'-' { -v } else { v })
}

fn parse_unsigned(raw: &[u8]) -> Option<f64> {
    if raw.is_empty() || !raw.iter().all(|b| b.is_ascii_digit() || *b == b'.') {
        return None;
    }
    std::str::from_utf8(raw).ok()?.parse().ok()
}

/// Encodes annotations as TALs, the first being the record's timekeeping stamp.
pub fn encode_tals(record_start: f64, annotations: &[Annotation]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(format!("+{}", format_onset(record_start)).as_bytes());
    out.extend_from_slice(&[0x14, 0x14, 0x00]);
    for a in annotations {
        let sign = if a.onset < 0.0 { '-' } else { '+' };
        out.extend_from_slice(format!("{sign}{}", format_onset(a.onset.abs())).as_bytes());
        if a.duration > 0.0 {
            out.push(0x15);
            out.extend_from_slice(format_onset(a.duration).as_bytes());
        }
        out.push(0x14);
        out.extend_from_slice(a.text.as_bytes());
        out.extend_from_slice(&[0x14, 0x00]);
    }
    out
}

fn format_onset(v: f64) -> String {
    format!("{v}")
}

/// Assembles a file from physical-unit signals plus annotations.
///
/// Every data signal shares `samples_per_record`. Annotations are placed in
/// the record containing their onset; the annotation signal is sized to fit
/// the fullest record.
pub struct EdfBuilder {
    pub record_duration: f64,
    pub samples_per_record: usize,
    pub patient: String,
    pub recording: String,
    signals: Vec<(SignalHeader, Vec<i16>)>,
    annotations: Vec<Annotation>,
}

impl EdfBuilder {
    pub fn new(record_duration: f64, samples_per_record: usize) -> Self {
        Self {
            record_duration,
            samples_per_record,
            patient: "X X X X".into(),
            recording: "Startdate X X X X".into(),
            signals: Vec::new(),
            annotations: Vec::new(),
        }
    }

    /// Adds a signal from digital values with the given scaling.
    pub fn digital_signal(
        mut self,
        label: &str,
        physical: (f64, f64),
        digital: (i32, i32),
        samples: Vec<i16>,
    ) -> Self {
        self.signals.push((
            SignalHeader {
                label: label.into(),
                transducer: String::new(),
                physical_dimension: "uV".into(),
                physical_min: physical.0,
                physical_max: physical.1,
                digital_min: digital.0,
                digital_max: digital.1,
                prefiltering: String::new(),
                samples_per_record: self.samples_per_record,
                reserved: String::new(),
            },
            samples,
        ));
        self
    }

    /// Adds a signal from physical values, quantised over `physical` with the full 16-bit range.
    pub fn physical_signal(self, label: &str, physical: (f64, f64), values: &[f64]) -> Self {
        let (pmin, pmax) = physical;
        let (dmin, dmax) = (i32::from(i16::MIN), i32::from(i16::MAX));
        let scale = f64::from(dmax - dmin) / (pmax - pmin);
        let digital = values
            .iter()
            .map(|&v| {
                let d = ((v - pmin) * scale + f64::from(dmin)).round();
                d.clamp(f64::from(dmin), f64::from(dmax)) as i16
            })
            .collect();
        self.digital_signal(label, physical, (dmin, dmax), digital)
    }

    pub fn annotation(mut self, onset: f64, duration: f64, text: &str) -> Self {
        self.annotations.push(Annotation {
            onset,
            duration,
            text: text.into(),
        });
        self
    }

    pub fn build(self) -> Result<EdfFile, EdfError> {
        let spr = self.samples_per_record;
        if spr == 0 || self.record_duration <= 0.0 {
            return Err(EdfError::Invalid("record size must be positive".into()));
        }
        let n_samples = self.signals.first().map_or(0, |(_, s)| s.len());
        if self.signals.iter().any(|(_, s)| s.len() != n_samples) {
            return Err(EdfError::Invalid("signals differ in length".into()));
        }
        if n_samples == 0 && !self.signals.is_empty() {
            return Err(EdfError::Invalid("signals are empty".into()));
        }
        if n_samples % spr != 0 {
            return Err(EdfError::Invalid(format!(
                "{n_samples} samples is not a whole number of {spr}-sample records"
            )));
        }
        let n_records = (n_samples / spr).max(1);
        let mut per_record: Vec<Vec<Annotation>> = vec![Vec::new(); n_records];
        for a in self.annotations {
            let r = ((a.onset / self.record_duration).floor().max(0.0) as usize).min(n_records - 1);
            per_record[r].push(a);
        }
        let encoded: Vec<Vec<u8>> = per_record
            .iter()
            .enumerate()
            .map(|(r, anns)| encode_tals(r as f64 * self.record_duration, anns))
            .collect();
        let ann_slots = encoded.iter().map(|e| e.len().div_ceil(2)).max().unwrap_or(1);

        let mut headers = Vec::new();
        let mut digital = Vec::new();
        for (h, s) in self.signals {
            headers.push(h);
            digital.push(s);
        }
        headers.push(SignalHeader {
            label: ANNOTATION_LABEL.into(),
            transducer: String::new(),
            physical_dimension: String::new(),
            physical_min: -1.0,
            physical_max: 1.0,
            digital_min: -32768,
            digital_max: 32767,
            prefiltering: String::new(),
            samples_per_record: ann_slots,
            reserved: String::new(),
        });
        let mut ann_samples = Vec::with_capacity(ann_slots * n_records);
        let mut annotations = Vec::new();
        for (e, anns) in encoded.iter().zip(per_record) {
            let mut bytes = e.clone();
            bytes.resize(ann_slots * 2, 0);
            ann_samples.extend(bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])));
            annotations.extend(anns);
        }
        digital.push(ann_samples);
        Ok(EdfFile {
            header: EdfHeader {
                version: "0".into(),
                patient: self.patient,
                recording: self.recording,
                start_date: "01.01.09".into(),
                start_time: "00.00.00".into(),
                reserved: "EDF+C".into(),
                n_records,
                record_duration: self.record_duration,
                signals: headers,
            },
            digital,
            annotations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_signal_file() -> Vec<u8> {
        let file = EdfFile {
            header: EdfHeader {
                version: "0".into(),
                patient: "p".into(),
                recording: "r".into(),
                start_date: "01.01.09".into(),
                start_time: "00.00.00".into(),
                reserved: String::new(),
                n_records: 1,
                record_duration: 1.0,
                signals: vec![SignalHeader {
                    label: "Cz..".into(),
                    transducer: String::new(),
                    physical_dimension: "uV".into(),
                    physical_min: 0.0,
                    physical_max: 1.0,
                    digital_min: 0,
                    digital_max: 200,
                    prefiltering: String::new(),
                    samples_per_record: 2,
                    reserved: String::new(),
                }],
            },
            digital: vec![vec![0, 100]],
            annotations: vec![],
        };
        file.to_bytes()
    }

    #[test]
    fn hand_computed_scaling() {
        let bytes = one_signal_file();
        assert_eq!(bytes.len(), 256 + 256 + 4);
        assert_eq!(&bytes[252..256], b"1   ");
        let f = EdfFile::parse(&bytes).unwrap();
        let s = &f.header.signals[0];
        let phys: Vec<f64> = f.digital[0].iter().map(|&d| s.to_physical(d)).collect();
        assert_eq!(phys, vec![0.0, 0.5]);
    }

    #[test]
    fn signal_count_read_from_fixed_offset() {
        let mut bytes = one_signal_file();
        bytes[252..256].copy_from_slice(b"x   ");
        assert!(matches!(
            EdfFile::parse(&bytes),
            Err(EdfError::BadField { offset: 252, field: "signal count", .. })
        ));
    }

    #[test]
    fn truncated_data_reports_offset() {
        let bytes = one_signal_file();
        let err = EdfFile::parse(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, EdfError::RecordCount { .. }), "{err:?}");
        let err = EdfFile::parse(&bytes[..100]).unwrap_err();
        assert!(matches!(err, EdfError::Truncated { offset: 88, .. }), "{err:?}");
    }

    #[test]
    fn tal_decoding() {
        let raw = b"+0\x14\x14\x00+4.2\x154.1\x14T1\x14\x00+8.3\x14T0\x14extra\x14\x00\x00\x00";
        let anns = decode_tals(raw, 0).unwrap();
        assert_eq!(
            anns,
            vec![
                Annotation { onset: 4.2, duration: 4.1, text: "T1".into() },
                Annotation { onset: 8.3, duration: 0.0, text: "T0".into() },
                Annotation { onset: 8.3, duration: 0.0, text: "extra".into() },
            ]
        );
        assert!(decode_tals(b"4.2\x14T1\x14\x00", 10).is_err());
        assert!(decode_tals(b"+4.2\x14T1\x14", 0).is_err());
    }

    #[test]
    fn builder_roundtrip_is_bit_exact() {
        let values: Vec<f64> = (0..320).map(|i| (i as f64 * 0.1).sin() * 100.0).collect();
        let file = EdfBuilder::new(1.0, 160)
            .physical_signal("C3..", (-200.0, 200.0), &values)
            .physical_signal("C4..", (-200.0, 200.0), &values)
            .annotation(0.0, 4.2, "T0")
            .annotation(1.5, 4.1, "T2")
            .build()
            .unwrap();
        let bytes = file.to_bytes();
        let parsed = EdfFile::parse(&bytes).unwrap();
        assert_eq!(parsed, file);
        assert_eq!(parsed.to_bytes(), bytes);
    }

    #[test]
    fn format_number_fits() {
        assert_eq!(format_number(0.5), "0.5");
        assert_eq!(format_number(-8092.0), "-8092");
        assert!(format_number(1.0 / 3.0).len() <= 8);
        assert!(format_number(-123456.789).len() <= 8);
    }
}
