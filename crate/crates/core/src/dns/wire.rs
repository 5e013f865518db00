//! Minimal RFC 1035 response parser. Extracts the query name and the
//! answer-section A records; everything else is skipped. Built to survive
//! arbitrary byte input: every access is bounds-checked and name
//! decompression is loop-protected.

use std::net::Ipv4Addr;

use super::{DnsObservation, Label, ParseError};

const HEADER_LEN: usize = 12;
const TYPE_A: u16 = 1;
const CLASS_IN: u16 = 1;
const MAX_NAME_LEN: usize = 255;
const MAX_POINTER_JUMPS: usize = 64;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take_u8(&mut self) -> Result<u8, ParseError> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or_else(|| truncated("byte", self.pos))?;
        self.pos += 1;
        Ok(b)
    }

    fn take_u16(&mut self) -> Result<u16, ParseError> {
        let hi = self.take_u8()?;
        let lo = self.take_u8()?;
        Ok(u16::from_be_bytes([hi, lo]))
    }

    fn take_u32(&mut self) -> Result<u32, ParseError> {
        let a = self.take_u16()?;
        let b = self.take_u16()?;
        Ok(((a as u32) << 16) | b as u32)
    }

    fn take_slice(&mut self, len: usize) -> Result<&'a [u8], ParseError> {
        let end = self
            .pos
            .checked_add(len)
            .ok_or_else(|| truncated("slice", self.pos))?;
        let slice = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| truncated("slice", self.pos))?;
        self.pos = end;
        Ok(slice)
    }

    /// Reads a possibly-compressed domain name starting at the current
    /// position, leaving the cursor just past the name's in-line bytes.
    fn take_name(&mut self) -> Result<String, ParseError> {
        let mut name = String::new();
        let mut jumps = 0usize;
        let mut read_pos = self.pos;
        // After the first pointer the cursor no longer advances with us.
        let mut end_pos: Option<usize> = None;

        loop {
            let len = *self
                .buf
                .get(read_pos)
                .ok_or_else(|| truncated("name", read_pos))?;
            match len & 0xC0 {
                0x00 => {
                    read_pos += 1;
                    if len == 0 {
                        break;
                    }
                    let label = self
                        .buf
                        .get(read_pos..read_pos + len as usize)
                        .ok_or_else(|| truncated("label", read_pos))?;
                    read_pos += len as usize;
                    if !name.is_empty() {
                        name.push('.');
                    }
                    for &b in label {
                        // Keep printable ASCII verbatim; escape the rest so the
                        // name stays a valid one-line string.
                        if b.is_ascii_graphic() && b != b'.' && b != b'\\' {
                            name.push(b as char);
                        } else {
                            name.push_str(&format!("\\{:03}", b));
                        }
                    }
                    if name.len() > MAX_NAME_LEN * 4 {
                        return Err(ParseError::MalformedRecord("domain name too long".into()));
                    }
                }
                0xC0 => {
                    let second = *self
                        .buf
                        .get(read_pos + 1)
                        .ok_or_else(|| truncated("pointer", read_pos))?;
                    let target = (((len & 0x3F) as usize) << 8) | second as usize;
                    if end_pos.is_none() {
                        end_pos = Some(read_pos + 2);
                    }
                    jumps += 1;
                    if jumps > MAX_POINTER_JUMPS {
                        return Err(ParseError::MalformedRecord(
                            "name compression pointer loop".into(),
                        ));
                    }
                    read_pos = target;
                }
                _ => {
                    return Err(ParseError::MalformedRecord(format!(
                        "unsupported label type 0x{:02x}",
                        len & 0xC0
                    )));
                }
            }
        }

        self.pos = end_pos.unwrap_or(read_pos);
        Ok(name)
    }
}

fn truncated(what: &str, at: usize) -> ParseError {
    ParseError::MalformedRecord(format!(
        "truncated message while reading {what} at offset {at}"
    ))
}

/// Parses a DNS response message. The observation's domain is the first
/// question's name (the name the client asked for); CNAME indirection in
/// the answer section is irrelevant because terminal A records also appear
/// there. The TTL is the minimum across answer-section A records.
pub fn parse_wire_response(bytes: &[u8]) -> Result<DnsObservation, ParseError> {
    if bytes.len() < HEADER_LEN {
        return Err(ParseError::MalformedRecord(format!(
            "message shorter than header: {} bytes",
            bytes.len()
        )));
    }
    let mut cur = Cursor::new(bytes);
    let _id = cur.take_u16()?;
    let _flags = cur.take_u16()?;
    let qdcount = cur.take_u16()?;
    let ancount = cur.take_u16()?;
    let _nscount = cur.take_u16()?;
    let _arcount = cur.take_u16()?;

    let mut query_name: Option<String> = None;
    for _ in 0..qdcount {
        let name = cur.take_name()?;
        let _qtype = cur.take_u16()?;
        let _qclass = cur.take_u16()?;
        if query_name.is_none() {
            query_name = Some(name);
        }
    }

    let mut a_records: Vec<Ipv4Addr> = Vec::new();
    let mut min_ttl: Option<u32> = None;
    let mut first_answer_name: Option<String> = None;
    for _ in 0..ancount {
        let name = cur.take_name()?;
        let rtype = cur.take_u16()?;
        let rclass = cur.take_u16()?;
        let ttl = cur.take_u32()?;
        let rdlength = cur.take_u16()?;
        let rdata = cur.take_slice(rdlength as usize)?;
        if first_answer_name.is_none() {
            first_answer_name = Some(name);
        }
        if rtype == TYPE_A && rclass == CLASS_IN {
            if rdata.len() != 4 {
                return Err(ParseError::MalformedRecord(format!(
                    "A record with rdlength {rdlength}"
                )));
            }
            a_records.push(Ipv4Addr::new(rdata[0], rdata[1], rdata[2], rdata[3]));
            min_ttl = Some(min_ttl.map_or(ttl, |t| t.min(ttl)));
        }
    }

    if a_records.is_empty() {
        return Err(ParseError::NoARecords);
    }
    let domain = match query_name.filter(|n| !n.is_empty()) {
        Some(n) => n,
        None => first_answer_name
            .filter(|n| !n.is_empty())
            .ok_or_else(|| ParseError::MalformedRecord("no usable domain name".into()))?,
    };
    DnsObservation::new(domain, min_ttl.unwrap_or(0), a_records, Label::Unknown)
}
