//! Binary model container. Layout is documented in `docs/bvq-format.md`.

use super::{BvqError, BvqLayout, BvqModel, Codebook};

pub const FORMAT_MAGIC: [u8; 4] = *b"BVQ1";
pub const FORMAT_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 2 + 8 * 4;

fn pack_bits(values: impl Iterator<Item = u32>, width: u32, out: &mut Vec<u8>) {
    if width == 0 {
        return;
    }
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for v in values {
        acc |= (v as u64) << filled;
        filled += width;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
}

fn unpack_bits(bytes: &[u8], width: u32, count: usize) -> Vec<u32> {
    if width == 0 {
        return vec![0; count];
    }
    let mask = (1u64 << width) - 1;
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut pos = 0;
    while out.len() < count {
        while filled < width {
            acc |= (bytes[pos] as u64) << filled;
            pos += 1;
            filled += 8;
        }
        out.push((acc & mask) as u32);
        acc >>= width;
        filled -= width;
    }
    out
}

fn packed_len(count: usize, width: u32) -> usize {
    (count * width as usize).div_ceil(8)
}

pub fn encode_model(model: &BvqModel) -> Result<Vec<u8>, BvqError> {
    model.validate()?;
    let l = &model.layout;
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| BvqError::Format(format!("{what} {v} does not fit in u32")))
    };
    let mut out = Vec::new();
    out.extend_from_slice(&FORMAT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for (v, what) in [
        (l.rows, "rows"),
        (l.cols, "cols"),
        (l.block_rows, "block_rows"),
        (l.block_cols, "block_cols"),
        (l.vector_len, "vector_len"),
        (l.codebook_entries, "codebook_entries"),
        (model.codebooks.len(), "codebook count"),
        (l.block_count(), "block count"),
    ] {
        out.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    for &c in &model.cluster_map {
        out.extend_from_slice(&c.to_le_bytes());
    }
    pack_bits(
        model.codebooks.iter().flat_map(|cb| cb.entries.iter().map(|&q| (q as u8 & 0x0f) as u32)),
        4,
        &mut out,
    );
    pack_bits(model.indices.iter().map(|&i| i as u32), l.index_bits(), &mut out);
    for cb in &model.codebooks {
        out.extend_from_slice(&cb.scale.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<BvqModel, BvqError> {
    let bad = |m: String| BvqError::Format(m);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != FORMAT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let word = |i: usize| {
        let o = 8 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
    };
    let layout = BvqLayout {
        rows: word(0),
        cols: word(1),
        block_rows: word(2),
        block_cols: word(3),
        vector_len: word(4),
        codebook_entries: word(5),
    };
    layout.validate()?;
    let (k, blocks) = (word(6), word(7));
    if blocks != layout.block_count() {
        return Err(bad(format!("header block count {blocks} disagrees with shape")));
    }
    let entries_per_book = layout
        .codebook_entries
        .checked_mul(layout.vector_len)
        .ok_or_else(|| bad("codebook too large".into()))?;
    let nsub = layout.subvector_count();
    let map_len = blocks * 4;
    let book_len = packed_len(k * entries_per_book, 4);
    let idx_len = packed_len(nsub, layout.index_bits());
    let expected = HEADER_LEN + map_len + book_len + idx_len + k * 4;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
    }

    let mut pos = HEADER_LEN;
    let cluster_map: Vec<u32> = bytes[pos..pos + map_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    pos += map_len;
    let nibbles = unpack_bits(&bytes[pos..pos + book_len], 4, k * entries_per_book);
    pos += book_len;
    let indices: Vec<u16> = unpack_bits(&bytes[pos..pos + idx_len], layout.index_bits(), nsub)
        .into_iter()
        .map(|i| i as u16)
        .collect();
    pos += idx_len;
    let codebooks = (0..k)
        .map(|b| {
            let o = pos + 4 * b;
            Codebook {
                entries: nibbles[b * entries_per_book..(b + 1) * entries_per_book]
                    .iter()
                    .map(|&n| ((n as u8) << 4) as i8 >> 4)
                    .collect(),
                scale: f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()),
            }
        })
        .collect();
    let model = BvqModel {
        layout,
        cluster_map,
        codebooks,
        indices,
    };
    model.validate()?;
    Ok(model)
}
