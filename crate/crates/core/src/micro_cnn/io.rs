//! Weight files: one JSON header line echoing the config and every layer
//! shape, then all parameters as little-endian `f64` in declaration order
//! (each layer's weights, then its biases).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{layout_for, CnnError, Network, NetworkConfig};

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeaderLayer {
    name: String,
    weight_shape: Vec<usize>,
    bias_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: NetworkConfig,
    layers: Vec<HeaderLayer>,
    parameter_count: usize,
}

pub fn write_network(network: &Network, mut out: impl Write) -> Result<(), CnnError> {
    let header = Header {
        format_version: WEIGHTS_FORMAT_VERSION,
        config: network.config.clone(),
        layers: network
            .layers
            .iter()
            .map(|l| HeaderLayer { name: l.name.clone(), weight_shape: l.weight_shape.clone(), bias_shape: vec![l.bias_len] })
            .collect(),
        parameter_count: network.params.len(),
    };
    let line = serde_json::to_string(&header).map_err(|e| CnnError::Format(e.to_string()))?;
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    let mut body = Vec::with_capacity(network.params.len() * 8);
    for v in &network.params {
        body.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&body)?;
    Ok(())
}

pub fn read_network(mut input: impl Read) -> Result<Network, CnnError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| CnnError::Format("missing header line".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| CnnError::Format(format!("bad header: {e}")))?;
    if header.format_version != WEIGHTS_FORMAT_VERSION {
        return Err(CnnError::Format(format!("unsupported format_version {}", header.format_version)));
    }
    let layout = layout_for(&header.config)?;
    if layout.len() != header.layers.len() {
        return Err(CnnError::Format(format!(
            "config defines {} layers, header lists {}",
            layout.len(),
            header.layers.len()
        )));
    }
    for (l, h) in layout.iter().zip(&header.layers) {
        if l.name != h.name || l.weight_shape != h.weight_shape || h.bias_shape != [l.bias_len] {
            return Err(CnnError::Format(format!(
                "layer {}: header shapes {:?}/{:?} do not match config shapes {:?}/[{}]",
                h.name, h.weight_shape, h.bias_shape, l.weight_shape, l.bias_len
            )));
        }
    }
    let mut net = Network::zeros(&header.config)?;
    if header.parameter_count != net.params.len() {
        return Err(CnnError::Format(format!(
            "header counts {} parameters, layers hold {}",
            header.parameter_count,
            net.params.len()
        )));
    }
    let body = &bytes[nl + 1..];
    if body.len() != net.params.len() * 8 {
        return Err(CnnError::Format(format!(
            "expected {} bytes of parameters, found {}",
            net.params.len() * 8,
            body.len()
        )));
    }
    for (v, chunk) in net.params.iter_mut().zip(body.chunks_exact(8)) {
        *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    Ok(net)
}

pub fn save_network(network: &Network, path: &Path) -> Result<(), CnnError> {
    let mut buf = Vec::new();
    write_network(network, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network, CnnError> {
    read_network(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::super::{build_network, Mode};
    use super::*;

    fn bytes(net: &Network) -> Vec<u8> {
        let mut b = Vec::new();
        write_network(net, &mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = build_network(&NetworkConfig::desk(), 3).unwrap();
        let back = read_network(bytes(&net).as_slice()).unwrap();
        assert_eq!(back, net);
        let x = vec![vec![0.3; 64 * 64]];
        assert_eq!(back.forward(&x, Mode::Infer).unwrap(), net.forward(&x, Mode::Infer).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let b = bytes(&build_network(&NetworkConfig::tiny(), 3).unwrap());
        let err = read_network(&b[..b.len() - 5]).unwrap_err();
        assert!(err.to_string().contains("bytes of parameters"), "{err}");
        assert!(read_network(&b[..10]).is_err());
    }

    #[test]
    fn shape_tampering_names_the_layer() {
        let b = bytes(&build_network(&NetworkConfig::tiny(), 3).unwrap());
        let nl = b.iter().position(|&c| c == b'\n').unwrap();
        let header = String::from_utf8(b[..nl].to_vec()).unwrap();
        let tampered = header.replacen("\"weight_shape\":[6,4,3,3]", "\"weight_shape\":[6,4,1,1]", 1);
        assert_ne!(tampered, header);
        let mut out = tampered.into_bytes();
        out.extend_from_slice(&b[nl..]);
        let err = read_network(out.as_slice()).unwrap_err();
        assert!(err.to_string().contains("layer layer2"), "{err}");
    }
}
