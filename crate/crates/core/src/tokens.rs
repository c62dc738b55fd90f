//! Byte-level toy vocabulary with the four narration tag tokens.

pub const TAG_W_OPEN: u32 = 256;
pub const TAG_W_CLOSE: u32 = 257;
pub const TAG_I_OPEN: u32 = 258;
pub const TAG_I_CLOSE: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

const SPECIALS: [(&str, u32); 4] = [
    ("<W>", TAG_W_OPEN),
    ("</W>", TAG_W_CLOSE),
    ("<I>", TAG_I_OPEN),
    ("</I>", TAG_I_CLOSE),
];

/// Tokenises text into bytes, mapping `<W>`, `</W>`, `<I>`, `</I>` to single ids.
pub fn encode(text: &str) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len());
    let mut rest = text;
    'outer: while !rest.is_empty() {
        for (tag, id) in SPECIALS {
            if let Some(tail) = rest.strip_prefix(tag) {
                out.push(id);
                rest = tail;
                continue 'outer;
            }
        }
        let ch = rest.chars().next().expect("non-empty");
        let mut buf = [0u8; 4];
        out.extend(ch.encode_utf8(&mut buf).bytes().map(u32::from));
        rest = &rest[ch.len_utf8()..];
    }
    out
}

pub fn decode(tokens: &[u32]) -> String {
    let mut bytes = Vec::new();
    for &t in tokens {
        match SPECIALS.iter().find(|(_, id)| *id == t) {
            Some((tag, _)) => bytes.extend_from_slice(tag.as_bytes()),
            None => bytes.push(t as u8),
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}
