//! Model serialization.
//!
//! Layout: an 8-byte magic, one line of JSON describing the config and
//! every parameter in order, then raw little-endian f64 values. Storing
//! f64 regardless of the model's working precision makes checkpoints
//! interchangeable between precisions without a separate format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{wire, Model, ModelConfig, NetError, Param, ParamKind};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MFCKPT1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    precision: Precision,
    config: ModelConfig,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    kind: ParamKind,
    trainable: bool,
    shape: [usize; 4],
}

fn describe(name: &str, kind: ParamKind, shape: [usize; 4]) -> String {
    format!("{name} kind={kind:?} shape={shape:?}")
}

impl<T: Scalar> Model<T> {
    pub fn save<W: Write>(&self, w: W) -> Result<(), NetError> {
        let mut w = BufWriter::new(w);
        w.write_all(CHECKPOINT_MAGIC)?;
        let header = Header {
            precision: T::PRECISION,
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    let s = p.tensor.shape();
                    ParamHeader {
                        name: p.name.clone(),
                        kind: p.kind,
                        trainable: p.trainable,
                        shape: [s.n, s.c, s.h, s.w],
                    }
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for p in &self.params {
            for &v in p.tensor.data() {
                w.write_f64::<LittleEndian>(v.into_f64())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint. The parameter list must match what [`wire`]
    /// produces for the stored config; the trainable flags are restored
    /// from the header.
    pub fn load<R: Read>(r: R) -> Result<Model<T>, NetError> {
        let mut r = BufReader::new(r);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| {
            if e.kind() == ErrorKind::UnexpectedEof { NetError::BadMagic } else { e.into() }
        })?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NetError::BadMagic);
        }
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(&line)?;
        header.config.validate()?;

        let (specs, layers) = wire(&header.config);
        if specs.len() != header.params.len() {
            return Err(NetError::ParamMismatch {
                index: specs.len().min(header.params.len()),
                expected: format!("{} parameters", specs.len()),
                got: format!("{} parameters", header.params.len()),
            });
        }
        let mut params = Vec::with_capacity(specs.len());
        for (index, (spec, ph)) in specs.iter().zip(&header.params).enumerate() {
            let s = spec.shape;
            let expected = describe(&spec.name, spec.kind, [s.n, s.c, s.h, s.w]);
            let got = describe(&ph.name, ph.kind, ph.shape);
            if expected != got {
                return Err(NetError::ParamMismatch { index, expected, got });
            }
            let mut data = Vec::with_capacity(s.len());
            for _ in 0..s.len() {
                let v = r.read_f64::<LittleEndian>().map_err(|e| {
                    if e.kind() == ErrorKind::UnexpectedEof {
                        NetError::TruncatedData { name: spec.name.clone() }
                    } else {
                        e.into()
                    }
                })?;
                data.push(T::of_f64(v));
            }
            params.push(Param {
                name: ph.name.clone(),
                tensor: Tensor::from_vec(s, data).expect("length matches shape"),
                kind: ph.kind,
                trainable: ph.trainable,
            });
        }
        Ok(Model { config: header.config, params, layers })
    }

    pub fn save_to_path(&self, path: &Path) -> Result<(), NetError> {
        self.save(File::create(path)?)
    }

    pub fn load_from_path(path: &Path) -> Result<Model<T>, NetError> {
        Self::load(File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn config() -> ModelConfig {
        ModelConfig {
            base_channels: 8,
            s_downsample_factor: 8,
            d_channels: 8,
            d_layers: 8,
            input_size: (32, 32),
            channel_norm: true,
            ..Default::default()
        }
    }

    fn saved<T: Scalar>(m: &Model<T>) -> Vec<u8> {
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_preserves_params_config_and_flags() {
        let mut m = Model::<f64>::build(config(), 7).unwrap();
        m.params_mut()[2].trainable = false;
        let loaded = Model::<f64>::load(saved(&m).as_slice()).unwrap();
        assert_eq!(loaded.config(), m.config());
        assert_eq!(loaded.params(), m.params());

        let img = Tensor::from_fn(Shape::new(1, 3, 32, 32), |_, c, y, x| {
            ((c + y + x) % 11) as f64 / 10.0
        });
        assert_eq!(loaded.forward(&img).unwrap(), m.forward(&img).unwrap());
    }

    #[test]
    fn save_is_byte_deterministic() {
        let m = Model::<f32>::build(config(), 3).unwrap();
        assert_eq!(saved(&m), saved(&m));
    }

    #[test]
    fn rejects_bad_magic() {
        let m = Model::<f64>::build(config(), 0).unwrap();
        let mut bytes = saved(&m);
        bytes[0] ^= 0xff;
        assert!(matches!(Model::<f64>::load(bytes.as_slice()), Err(NetError::BadMagic)));
        assert!(matches!(Model::<f64>::load(&b"MF"[..]), Err(NetError::BadMagic)));
    }

    #[test]
    fn truncation_names_the_interrupted_parameter() {
        let m = Model::<f64>::build(config(), 0).unwrap();
        let bytes = saved(&m);
        let cut = &bytes[..bytes.len() - 4];
        match Model::<f64>::load(cut) {
            Err(NetError::TruncatedData { name }) => {
                assert_eq!(name, m.params().last().unwrap().name)
            }
            other => panic!("expected TruncatedData, got {other:?}"),
        }
    }

    #[test]
    fn header_tampering_is_detected() {
        let m = Model::<f64>::build(config(), 0).unwrap();
        let bytes = saved(&m);
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let pos = text.find("enc0.weight").unwrap();
        let mut tampered = bytes.clone();
        tampered[pos] = b'x';
        match Model::<f64>::load(tampered.as_slice()) {
            Err(NetError::ParamMismatch { index: 0, expected, got }) => {
                assert!(expected.contains("enc0.weight"));
                assert!(got.contains("xnc0.weight"));
            }
            other => panic!("expected ParamMismatch, got {other:?}"),
        }
    }

    #[test]
    fn checkpoints_cross_between_precisions() {
        let m32 = Model::<f32>::build(config(), 5).unwrap();
        // f32 values are exactly representable in the stored f64 stream.
        let m64 = Model::<f64>::load(saved(&m32).as_slice()).unwrap();
        for (a, b) in m32.params().iter().zip(m64.params()) {
            assert_eq!(a.name, b.name);
            let same = a
                .tensor
                .data()
                .iter()
                .zip(b.tensor.data())
                .all(|(&x, &y)| f64::from(x) == y);
            assert!(same, "{} changed across precisions", a.name);
        }
        // Coming back down rounds to the identical f32 model.
        let m32_again = Model::<f32>::load(saved(&m64).as_slice()).unwrap();
        assert_eq!(m32_again.params(), m32.params());
    }
}
