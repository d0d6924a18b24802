//! Artifact container format.
//!
//! Every on-disk artifact (checkpoint, gradient snapshot, unlearn delta,
//! dataset) shares one container: a text header, then raw little-endian
//! binary payload sections.
//!
//! ```text
//! #ulab <kind> <version>        magic line
//! <key> <value>                 header lines, keys may repeat
//! section <name> <f64|u32> <count>
//! #end
//! <binary sections, in declaration order>
//! ```
//!
//! Floats in headers use Rust's shortest round-trip decimal formatting;
//! payload floats are stored as their IEEE-754 bit patterns, so a save/load
//! round trip is bit-exact on any platform.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &str = "#ulab";
const END: &str = "#end";

#[derive(Debug, Clone)]
pub enum Section {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl Section {
    fn type_name(&self) -> &'static str {
        match self {
            Section::F64(_) => "f64",
            Section::U32(_) => "u32",
        }
    }

    fn count(&self) -> usize {
        match self {
            Section::F64(v) => v.len(),
            Section::U32(v) => v.len(),
        }
    }
}

pub struct ContainerWriter {
    kind: String,
    version: u32,
    entries: Vec<(String, String)>,
    sections: Vec<(String, Section)>,
}

impl ContainerWriter {
    pub fn new(kind: &str, version: u32) -> Self {
        ContainerWriter {
            kind: kind.to_string(),
            version,
            entries: Vec::new(),
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, key: &str, value: impl std::fmt::Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    /// Header float with shortest round-trip decimal formatting.
    pub fn push_f64(&mut self, key: &str, value: f64) {
        self.entries.push((key.to_string(), format!("{value:?}")));
    }

    pub fn push_hex(&mut self, key: &str, value: u64) {
        self.entries
            .push((key.to_string(), format!("{value:016x}")));
    }

    pub fn section_f64(&mut self, name: &str, data: Vec<f64>) {
        self.sections.push((name.to_string(), Section::F64(data)));
    }

    pub fn section_u32(&mut self, name: &str, data: Vec<u32>) {
        self.sections.push((name.to_string(), Section::U32(data)));
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut header = String::new();
        writeln!(header, "{MAGIC} {} {}", self.kind, self.version).unwrap();
        for (k, v) in &self.entries {
            writeln!(header, "{k} {v}").unwrap();
        }
        for (name, section) in &self.sections {
            writeln!(
                header,
                "section {name} {} {}",
                section.type_name(),
                section.count()
            )
            .unwrap();
        }
        writeln!(header, "{END}").unwrap();

        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(header.as_bytes())?;
        for (_, section) in &self.sections {
            match section {
                Section::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_bits().to_le_bytes())?;
                    }
                }
                Section::U32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub struct ContainerReader {
    pub kind: String,
    pub version: u32,
    entries: Vec<(String, String)>,
    sections: Vec<(String, Section)>,
}

impl ContainerReader {
    pub fn read_from(path: &Path, expected_kind: &str, supported_version: u32) -> Result<Self> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);

        let mut header_bytes = Vec::new();
        let mut line = Vec::new();
        loop {
            line.clear();
            let mut byte = [0u8; 1];
            loop {
                match r.read(&mut byte)? {
                    0 => {
                        return Err(Error::CorruptArtifact(format!(
                            "{}: header ended before `{END}`",
                            path.display()
                        )))
                    }
                    _ => {
                        if byte[0] == b'\n' {
                            break;
                        }
                        line.push(byte[0]);
                    }
                }
            }
            let text = String::from_utf8(line.clone()).map_err(|_| {
                Error::CorruptArtifact(format!("{}: non-UTF8 header", path.display()))
            })?;
            if text == END {
                break;
            }
            header_bytes.push(text);
        }

        let magic_line = header_bytes
            .first()
            .ok_or_else(|| Error::CorruptArtifact(format!("{}: empty header", path.display())))?;
        let mut parts = magic_line.split(' ');
        if parts.next() != Some(MAGIC) {
            return Err(Error::CorruptArtifact(format!(
                "{}: bad magic `{magic_line}`",
                path.display()
            )));
        }
        let kind = parts
            .next()
            .ok_or_else(|| Error::CorruptArtifact(format!("{}: missing kind", path.display())))?
            .to_string();
        let version: u32 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| {
            Error::CorruptArtifact(format!("{}: missing version", path.display()))
        })?;
        if kind != expected_kind {
            return Err(Error::CorruptArtifact(format!(
                "{}: expected a {expected_kind} artifact, found {kind}",
                path.display()
            )));
        }
        if version != supported_version {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: supported_version,
            });
        }

        let mut entries = Vec::new();
        let mut declarations: Vec<(String, String, usize)> = Vec::new();
        for text in header_bytes.iter().skip(1) {
            let (key, value) = text.split_once(' ').ok_or_else(|| {
                Error::CorruptArtifact(format!(
                    "{}: malformed header line `{text}`",
                    path.display()
                ))
            })?;
            if key == "section" {
                let fields: Vec<&str> = value.split(' ').collect();
                if fields.len() != 3 {
                    return Err(Error::CorruptArtifact(format!(
                        "{}: malformed section declaration `{text}`",
                        path.display()
                    )));
                }
                let count: usize = fields[2].parse().map_err(|_| {
                    Error::CorruptArtifact(format!("{}: bad section count", path.display()))
                })?;
                declarations.push((fields[0].to_string(), fields[1].to_string(), count));
            } else {
                entries.push((key.to_string(), value.to_string()));
            }
        }

        let mut sections = Vec::new();
        for (name, ty, count) in declarations {
            let width = match ty.as_str() {
                "f64" => 8,
                "u32" => 4,
                _ => {
                    return Err(Error::CorruptArtifact(format!(
                        "{}: unknown section type `{ty}`",
                        path.display()
                    )))
                }
            };
            let mut buf = vec![0u8; count * width];
            r.read_exact(&mut buf).map_err(|_| {
                Error::CorruptArtifact(format!(
                    "{}: truncated payload for section `{name}`",
                    path.display()
                ))
            })?;
            let section = match ty.as_str() {
                "f64" => Section::F64(
                    buf.chunks_exact(8)
                        .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                        .collect(),
                ),
                _ => Section::U32(
                    buf.chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            sections.push((name, section));
        }

        Ok(ContainerReader {
            kind,
            version,
            entries,
            sections,
        })
    }

    pub fn values(&self, key: &str) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .collect()
    }

    pub fn value(&self, key: &str) -> Result<&str> {
        let found = self.values(key);
        match found.as_slice() {
            [one] => Ok(one),
            _ => Err(Error::CorruptArtifact(format!(
                "expected exactly one `{key}` header entry, found {}",
                found.len()
            ))),
        }
    }

    pub fn f64_value(&self, key: &str) -> Result<f64> {
        self.value(key)?
            .parse()
            .map_err(|_| Error::CorruptArtifact(format!("bad float for `{key}`")))
    }

    pub fn usize_value(&self, key: &str) -> Result<usize> {
        self.value(key)?
            .parse()
            .map_err(|_| Error::CorruptArtifact(format!("bad integer for `{key}`")))
    }

    pub fn hex_value(&self, key: &str) -> Result<u64> {
        u64::from_str_radix(self.value(key)?, 16)
            .map_err(|_| Error::CorruptArtifact(format!("bad hex for `{key}`")))
    }

    pub fn section_f64(&self, name: &str) -> Result<&[f64]> {
        match self.section(name)? {
            Section::F64(v) => Ok(v),
            _ => Err(Error::CorruptArtifact(format!(
                "section `{name}` is not f64"
            ))),
        }
    }

    pub fn section_u32(&self, name: &str) -> Result<&[u32]> {
        match self.section(name)? {
            Section::U32(v) => Ok(v),
            _ => Err(Error::CorruptArtifact(format!(
                "section `{name}` is not u32"
            ))),
        }
    }

    fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::CorruptArtifact(format!("missing section `{name}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = std::env::temp_dir().join("ulab-io-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.bin");

        let floats = vec![0.07, -1.5e-300, 3.0f64.sqrt(), 0.1 + 0.2];
        let mut w = ContainerWriter::new("checkpoint", 1);
        w.push_f64("tau", 0.07);
        w.push_hex("config_hash", 0xdeadbeef);
        w.push("layer", "vision.fc1 64 32");
        w.section_f64("params", floats.clone());
        w.section_u32("labels", vec![0, 7, 42]);
        w.write_to(&path).unwrap();

        let r = ContainerReader::read_from(&path, "checkpoint", 1).unwrap();
        assert_eq!(r.f64_value("tau").unwrap().to_bits(), 0.07f64.to_bits());
        assert_eq!(r.hex_value("config_hash").unwrap(), 0xdeadbeef);
        assert_eq!(r.values("layer"), vec!["vision.fc1 64 32"]);
        let got = r.section_f64("params").unwrap();
        assert_eq!(got.len(), floats.len());
        for (a, b) in got.iter().zip(floats.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(r.section_u32("labels").unwrap(), &[0, 7, 42]);
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let dir = std::env::temp_dir().join("ulab-io-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("truncated.bin");

        let mut w = ContainerWriter::new("checkpoint", 1);
        w.section_f64("params", vec![1.0; 16]);
        w.write_to(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            ContainerReader::read_from(&path, "checkpoint", 1),
            Err(Error::CorruptArtifact(_))
        ));
    }

    #[test]
    fn wrong_kind_and_version_rejected() {
        let dir = std::env::temp_dir().join("ulab-io-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("kind.bin");
        let w = ContainerWriter::new("dataset", 1);
        w.write_to(&path).unwrap();
        assert!(matches!(
            ContainerReader::read_from(&path, "checkpoint", 1),
            Err(Error::CorruptArtifact(_))
        ));
        assert!(matches!(
            ContainerReader::read_from(&path, "dataset", 2),
            Err(Error::UnsupportedVersion { .. })
        ));
    }
}
