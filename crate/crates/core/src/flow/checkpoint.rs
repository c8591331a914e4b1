//! Versioned JSON checkpoints. Parameters are stored as base64 of
//! little-endian `f64` bytes so they round-trip bit-exactly.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::conditional::{ConditionalFlow, FlowConfig};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowHeader {
    pub format_version: u32,
    pub d_x: usize,
    pub d_a: usize,
    pub d_y: usize,
    pub num_bins: usize,
    pub tail_bound: f64,
    pub hidden: Vec<usize>,
    pub layer_sizes: Vec<Vec<usize>>,
    pub conditioning_order: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowCheckpoint {
    pub header: FlowHeader,
    pub params: String,
}

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Checkpoint(format!("bad base64 body: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("body length not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl FlowCheckpoint {
    pub fn from_flow(flow: &ConditionalFlow) -> FlowCheckpoint {
        let c = &flow.config;
        FlowCheckpoint {
            header: FlowHeader {
                format_version: FORMAT_VERSION,
                d_x: c.d_x,
                d_a: c.d_a,
                d_y: c.d_y,
                num_bins: c.num_bins,
                tail_bound: c.tail_bound,
                hidden: c.hidden.clone(),
                layer_sizes: c.layer_sizes(),
                conditioning_order: (0..c.d_y).collect(),
            },
            params: encode_f64s(&flow.params),
        }
    }

    pub fn into_flow(self) -> Result<ConditionalFlow> {
        let h = self.header;
        if h.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                h.format_version
            )));
        }
        if h.conditioning_order != (0..h.d_y).collect::<Vec<_>>() {
            return Err(Error::Checkpoint("only natural conditioning order is supported".into()));
        }
        let config = FlowConfig {
            d_x: h.d_x,
            d_a: h.d_a,
            d_y: h.d_y,
            num_bins: h.num_bins,
            tail_bound: h.tail_bound,
            hidden: h.hidden,
        };
        if config.layer_sizes() != h.layer_sizes {
            return Err(Error::Checkpoint("layer_sizes inconsistent with header".into()));
        }
        ConditionalFlow::from_params(config, decode_f64s(&self.params)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut flow = ConditionalFlow::identity(FlowConfig::new(2, 1, 2), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in flow.params.iter_mut() {
            *p += rng.random::<f64>() * 1e-3 + f64::EPSILON;
        }
        let json = serde_json::to_string(&FlowCheckpoint::from_flow(&flow)).unwrap();
        let back: FlowCheckpoint = serde_json::from_str(&json).unwrap();
        let restored = back.into_flow().unwrap();
        assert_eq!(restored.config, flow.config);
        assert!(restored
            .params
            .iter()
            .zip(&flow.params)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_wrong_version_and_truncated_body() {
        let flow = ConditionalFlow::identity(FlowConfig::new(1, 1, 1), 1).unwrap();
        let mut ck = FlowCheckpoint::from_flow(&flow);
        ck.header.format_version = 99;
        assert!(ck.into_flow().is_err());
        let mut ck = FlowCheckpoint::from_flow(&flow);
        ck.params = encode_f64s(&flow.params[1..]);
        assert!(matches!(ck.into_flow(), Err(Error::Dimension { .. })));
    }
}
