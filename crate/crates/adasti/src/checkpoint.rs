//! Single-file versioned checkpoints: magic + version + config fingerprint
//! header, the canonical config text, optimizer and RNG state, and all
//! parameters as raw f64 bit patterns so round-trips are bitwise exact.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::{AdastiError, Result};
use crate::model::AdastiModel;
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"ADSTCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub n_nodes: usize,
    pub epoch: usize,
    pub best_val_mae: f64,
    pub rng: RngState,
    pub params: ParamStore,
    pub opt_m: ParamStore,
    pub opt_v: ParamStore,
    pub opt_step: u64,
}

impl Checkpoint {
    pub fn model(&self) -> AdastiModel {
        AdastiModel {
            cfg: self.config.model_config(self.n_nodes),
            params: self.params.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        write_string(&mut w, &self.config.fingerprint())?;
        write_string(&mut w, &self.config.canonical())?;
        w.write_u64::<LittleEndian>(self.n_nodes as u64)?;
        w.write_u64::<LittleEndian>(self.epoch as u64)?;
        w.write_u64::<LittleEndian>(self.best_val_mae.to_bits())?;
        w.write_all(&self.rng.seed)?;
        w.write_u64::<LittleEndian>(self.rng.stream)?;
        w.write_u128::<LittleEndian>(self.rng.word_pos)?;
        write_store(&mut w, &self.params)?;
        write_store(&mut w, &self.opt_m)?;
        write_store(&mut w, &self.opt_v)?;
        w.write_u64::<LittleEndian>(self.opt_step)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(AdastiError::Checkpoint(format!(
                "not a checkpoint file: bad magic {magic:02x?}"
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(AdastiError::Checkpoint(format!(
                "unsupported checkpoint version {version} (this build reads version {VERSION})"
            )));
        }
        let fingerprint = read_string(&mut r)?;
        let config_text = read_string(&mut r)?;
        let config = ExperimentConfig::parse(&config_text)
            .map_err(|e| AdastiError::Checkpoint(format!("embedded config invalid: {e}")))?;
        if config.fingerprint() != fingerprint {
            return Err(AdastiError::Checkpoint(
                "config fingerprint mismatch: checkpoint is corrupt or tampered".into(),
            ));
        }
        let n_nodes = r.read_u64::<LittleEndian>()? as usize;
        let epoch = r.read_u64::<LittleEndian>()? as usize;
        let best_val_mae = f64::from_bits(r.read_u64::<LittleEndian>()?);
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let stream = r.read_u64::<LittleEndian>()?;
        let word_pos = r.read_u128::<LittleEndian>()?;
        let params = read_store(&mut r)?;
        let opt_m = read_store(&mut r)?;
        let opt_v = read_store(&mut r)?;
        let opt_step = r.read_u64::<LittleEndian>()?;
        Ok(Checkpoint {
            config,
            n_nodes,
            epoch,
            best_val_mae,
            rng: RngState { seed, stream, word_pos },
            params,
            opt_m,
            opt_v,
            opt_step,
        })
    }
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf)
        .map_err(|_| AdastiError::Checkpoint("invalid utf-8 in checkpoint string".into()))
}

fn write_store<W: Write>(w: &mut W, store: &ParamStore) -> Result<()> {
    w.write_u64::<LittleEndian>(store.len() as u64)?;
    for (name, value) in store.iter() {
        write_string(w, name)?;
        w.write_u32::<LittleEndian>(value.ndim() as u32)?;
        for &d in value.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in value.iter() {
            w.write_u64::<LittleEndian>(v.to_bits())?;
        }
    }
    Ok(())
}

fn read_store<R: Read>(r: &mut R) -> Result<ParamStore> {
    let count = r.read_u64::<LittleEndian>()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = read_string(r)?;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_bits(r.read_u64::<LittleEndian>()?));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| AdastiError::Checkpoint(format!("bad tensor shape for '{name}': {e}")))?;
        store.insert(name, arr);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn sample_checkpoint() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert(
            "w",
            ArrayD::from_shape_fn(IxDyn(&[2, 3]), |ix| (ix[0] * 3 + ix[1]) as f64 * 0.1 - 0.2),
        );
        params.insert("b", ArrayD::from_elem(IxDyn(&[3]), -0.0));
        let mut opt_m = ParamStore::new();
        opt_m.insert("w", ArrayD::zeros(IxDyn(&[2, 3])));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(3);
        Checkpoint {
            config: ExperimentConfig::default(),
            n_nodes: 8,
            epoch: 17,
            best_val_mae: 0.123456789,
            rng: RngState::capture(&rng),
            params,
            opt_m,
            opt_v: ParamStore::new(),
            opt_step: 99,
        }
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.n_nodes, 8);
        assert_eq!(back.epoch, 17);
        assert_eq!(back.best_val_mae.to_bits(), ck.best_val_mae.to_bits());
        assert_eq!(back.rng, ck.rng);
        assert_eq!(back.opt_step, 99);
        for (name, value) in ck.params.iter() {
            let loaded = back.params.get(name);
            assert_eq!(loaded.shape(), value.shape());
            for (a, b) in loaded.iter().zip(value.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rng_state_round_trip_continues_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        rng.set_stream(2);
        let _: u64 = rand::Rng::gen(&mut rng);
        let state = RngState::capture(&rng);
        let mut restored = state.restore();
        let a: u64 = rand::Rng::gen(&mut rng);
        let b: u64 = rand::Rng::gen(&mut restored);
        assert_eq!(a, b);
    }

    #[test]
    fn version_mismatch_is_rejected_with_explicit_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        sample_checkpoint().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 2; // bump the version field
        std::fs::write(&path, &bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxxxxxx").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn fingerprint_tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        sample_checkpoint().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // flip a byte inside the embedded config text region
        let idx = 8 + 4 + 4 + 16 + 4 + 10;
        bytes[idx] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
