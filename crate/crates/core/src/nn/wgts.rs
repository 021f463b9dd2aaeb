//! WGTS v1 weights files: a UTF-8 JSON index (ordered list of
//! `{name, dims, byte_offset}`), the two bytes `\n\0`, then every tensor's
//! little-endian `f32` payload back to back. Offsets count from the first
//! payload byte.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::NnError;

const SEPARATOR: &[u8; 2] = b"\n\0";

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    dims: Vec<usize>,
    byte_offset: usize,
}

pub fn encode_wgts<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let mut index = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        index.push(IndexEntry {
            name: name.to_string(),
            dims: t.dims().to_vec(),
            byte_offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = serde_json::to_vec(&index).expect("index serializes");
    out.extend_from_slice(SEPARATOR);
    out.extend(payload);
    out
}

pub fn decode_wgts(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, NnError> {
    let split = bytes
        .windows(2)
        .position(|w| w == SEPARATOR)
        .ok_or_else(|| NnError::Format("missing index separator".into()))?;
    let index: Vec<IndexEntry> =
        serde_json::from_slice(&bytes[..split]).map_err(|e| NnError::Format(format!("index: {e}")))?;
    let payload = &bytes[split + SEPARATOR.len()..];
    index
        .into_iter()
        .map(|e| {
            let count: usize = e.dims.iter().product();
            let end = e.byte_offset + 4 * count;
            let raw = payload
                .get(e.byte_offset..end)
                .ok_or_else(|| NnError::Format(format!("tensor {} runs past the payload", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Ok((e.name, Tensor::from_vec(&e.dims, data)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![-0.5f32]).unwrap();
        let bytes = encode_wgts([("a", &a), ("b", &b)]);
        let split = bytes.windows(2).position(|w| w == b"\n\0").unwrap();
        let index: serde_json::Value = serde_json::from_slice(&bytes[..split]).unwrap();
        assert_eq!(index[1]["name"], "b");
        assert_eq!(index[1]["byte_offset"], 16);
        assert_eq!(bytes.len(), split + 2 + 20);
        let back = decode_wgts(&bytes).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("b".to_string(), b)]);
        assert!(decode_wgts(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_wgts(b"[]").is_err());
    }
}
