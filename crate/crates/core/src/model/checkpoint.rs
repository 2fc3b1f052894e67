//! Flat little-endian checkpoint.
//!
//! ```text
//! magic       8 bytes  "EMSDMODL"
//! version     u32      1
//! num_layers  u32
//! num_heads   u32
//! hidden      u32
//! vocab_size  u32
//! max_pos     u32
//! init_seed   u64
//! weights     f32 * N  every tensor in declaration order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, ModelError, Weights};

const MAGIC: &[u8; 8] = b"EMSDMODL";
const VERSION: u32 = 1;

impl Model {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let c = &self.config;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for v in [c.num_layers, c.num_heads, c.hidden, c.vocab_size, c.max_positions] {
            let v = u32::try_from(v).map_err(|_| ModelError::Checkpoint(format!("{v} exceeds u32")))?;
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&c.init_seed.to_le_bytes())?;
        let mut buf = Vec::new();
        for t in self.weights.tensors() {
            buf.clear();
            buf.extend(t.iter().flat_map(|x| x.to_le_bytes()));
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let mut u32s = [0u32; 6];
        for v in u32s.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b);
        }
        if u32s[0] != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {}", u32s[0])));
        }
        let mut seed = [0u8; 8];
        r.read_exact(&mut seed)?;
        let config = ModelConfig {
            num_layers: u32s[1] as usize,
            num_heads: u32s[2] as usize,
            hidden: u32s[3] as usize,
            vocab_size: u32s[4] as usize,
            max_positions: u32s[5] as usize,
            init_seed: u64::from_le_bytes(seed),
        };
        config.validate()?;
        let mut weights = Weights::zeroed(&config);
        for (tensor, _) in weights.tensors_mut(&config) {
            let mut bytes = vec![0u8; tensor.len() * 4];
            r.read_exact(&mut bytes)?;
            for (w, chunk) in tensor.iter_mut().zip(bytes.chunks_exact(4)) {
                *w = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(ModelError::Checkpoint("trailing bytes after weights".into()));
        }
        Ok(Self { config, weights })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let file = std::fs::File::create(path)
            .map_err(|e| ModelError::Checkpoint(format!("cannot create {}: {e}", path.display())))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let file = std::fs::File::open(path)
            .map_err(|e| ModelError::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_weights() {
        let m = Model::init(ModelConfig { init_seed: 12, num_layers: 1, ..Default::default() }).unwrap();
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Model::read_from(&bytes[..]).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.checksum(), m.checksum());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = Model::init(ModelConfig { num_layers: 1, ..Default::default() }).unwrap();
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Model::read_from(&bad[..]), Err(ModelError::Checkpoint(_))));
        assert!(Model::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Model::read_from(&long[..]).is_err());
    }
}
