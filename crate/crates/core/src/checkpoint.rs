//! Checkpoint files: a text manifest of `key=value` lines terminated by
//! `end`, followed by little-endian 32-bit float arrays (parameters, then
//! first moments, then second moments, each in manifest order).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::diff::ParamStore;
use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::train::{AdamState, TrainConfig};

pub const MAGIC: &str = "UNVEIL-CHECKPOINT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub field_cfg: FieldConfig,
    pub train_cfg: TrainConfig,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    /// Completed iterations.
    pub iteration: usize,
    /// Seed of the per-iteration generator streams; together with
    /// `iteration` it fixes the generator state of the next iteration.
    pub seed: u64,
}

const GROUPS: [&str; 3] = ["param", "adam_m", "adam_v"];

impl Checkpoint {
    fn groups(&self) -> [&ParamStore<f32>; 3] {
        [&self.params, &self.adam.m, &self.adam.v]
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let mut manifest = String::new();
        manifest.push_str(MAGIC);
        manifest.push('\n');
        let cfg_json =
            |v: serde_json::Result<String>| v.map_err(|e| Error::Manifest(e.to_string()));
        let lines = [
            ("version", VERSION.to_string()),
            ("iteration", self.iteration.to_string()),
            ("seed", self.seed.to_string()),
            ("adam_step", self.adam.step.to_string()),
            (
                "field_config",
                cfg_json(serde_json::to_string(&self.field_cfg))?,
            ),
            (
                "train_config",
                cfg_json(serde_json::to_string(&self.train_cfg))?,
            ),
        ];
        for (k, v) in lines {
            manifest.push_str(&format!("{k}={v}\n"));
        }
        for (group, store) in GROUPS.iter().zip(self.groups()) {
            for (name, vals) in store.iter() {
                manifest.push_str(&format!("{group}.{name}={}\n", vals.len()));
            }
        }
        manifest.push_str("end\n");
        out.write_all(manifest.as_bytes())?;
        let mut payload = Vec::with_capacity(4 * 3 * self.params.num_scalars());
        for store in self.groups() {
            for (_, vals) in store.iter() {
                for v in vals {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.write_all(&payload)?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut line = String::new();
        let next_line = |reader: &mut BufReader<R>, line: &mut String| -> Result<bool> {
            line.clear();
            // non-UTF-8 bytes in the header mean this is not our format
            match reader.read_line(line) {
                Ok(0) => Ok(false),
                Ok(_) => {
                    let trimmed = line.trim_end_matches(['\n', '\r']).len();
                    line.truncate(trimmed);
                    Ok(true)
                }
                Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
                    Err(Error::VersionMismatch {
                        found: "non-text header".into(),
                    })
                }
                Err(e) => Err(e.into()),
            }
        };

        if !next_line(&mut reader, &mut line)? || line != MAGIC {
            return Err(Error::VersionMismatch {
                found: line.clone(),
            });
        }
        let mut scalars: Vec<(String, String)> = Vec::new();
        let mut arrays: Vec<(usize, String, usize)> = Vec::new();
        let mut terminated = false;
        while next_line(&mut reader, &mut line)? {
            if line == "end" {
                terminated = true;
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Manifest(format!("expected key=value, got {line:?}")))?;
            if let Some(g) = GROUPS.iter().position(|g| k.starts_with(&format!("{g}."))) {
                let name = k[GROUPS[g].len() + 1..].to_string();
                let len = v
                    .parse()
                    .map_err(|_| Error::CheckpointShape(format!("bad length {v:?} for {k}")))?;
                arrays.push((g, name, len));
            } else {
                scalars.push((k.to_string(), v.to_string()));
            }
        }
        if !terminated {
            return Err(Error::Truncated("manifest has no end marker".into()));
        }
        let get = |key: &str| -> Result<&str> {
            scalars
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Manifest(format!("missing key {key}")))
        };
        let version = get("version").map_err(|_| Error::VersionMismatch {
            found: "no version".into(),
        })?;
        if version != VERSION.to_string() {
            return Err(Error::VersionMismatch {
                found: version.to_string(),
            });
        }
        let num = |key: &str| -> Result<u64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Manifest(format!("{key} is not an integer")))
        };
        let iteration = num("iteration")? as usize;
        let seed = num("seed")?;
        let adam_step = num("adam_step")?;
        let field_cfg: FieldConfig = serde_json::from_str(get("field_config")?)
            .map_err(|e| Error::Manifest(e.to_string()))?;
        let train_cfg: TrainConfig = serde_json::from_str(get("train_config")?)
            .map_err(|e| Error::Manifest(e.to_string()))?;

        // the manifest must describe exactly the layout the config implies
        let shapes = field_cfg.param_shapes();
        for (g, group) in GROUPS.iter().enumerate() {
            let listed: Vec<(&str, usize)> = arrays
                .iter()
                .filter(|(gi, _, _)| *gi == g)
                .map(|(_, n, l)| (n.as_str(), *l))
                .collect();
            let expected: Vec<(&str, usize)> =
                shapes.iter().map(|(n, l)| (n.as_str(), *l)).collect();
            if listed != expected {
                let detail = listed
                    .iter()
                    .zip(&expected)
                    .find(|(a, b)| a != b)
                    .map(|(a, b)| {
                        format!(
                            "{group}.{} has {} values, expected {}.{} = {}",
                            a.0, a.1, group, b.0, b.1
                        )
                    })
                    .unwrap_or_else(|| {
                        format!(
                            "{group}: {} arrays, expected {}",
                            listed.len(),
                            expected.len()
                        )
                    });
                return Err(Error::CheckpointShape(detail));
            }
        }

        let total: usize = arrays.iter().map(|(_, _, l)| *l).sum();
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload)?;
        if payload.len() < 4 * total {
            return Err(Error::Truncated(format!(
                "expected {} payload bytes, found {}",
                4 * total,
                payload.len()
            )));
        }
        if payload.len() > 4 * total {
            return Err(Error::CheckpointShape(format!(
                "{} trailing payload bytes",
                payload.len() - 4 * total
            )));
        }
        let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
        let mut words = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        for (g, name, len) in &arrays {
            let vals: Vec<f32> = words.by_ref().take(*len).collect();
            stores[*g].insert(name.clone(), vals)?;
        }
        let [params, m, v] = stores;
        Ok(Checkpoint {
            field_cfg,
            train_cfg,
            params,
            adam: AdamState {
                m,
                v,
                step: adam_step,
            },
            iteration,
            seed,
        })
    }
}

/// Writes atomically: the file is written beside `path` and renamed.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let f = std::fs::File::create(&tmp)?;
        let mut w = std::io::BufWriter::new(f);
        ckpt.write_to(&mut w)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    Checkpoint::read_from(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Trainer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_checkpoint(seed: u64) -> Checkpoint {
        let fc = FieldConfig {
            pos_enc_levels: 3,
            dir_enc_levels: 2,
            trunk_layers: 3,
            trunk_width: 12,
            conv_kernel: 5,
            n_samples: 7,
            learnable_kernel: seed.is_multiple_of(2),
        };
        let tc = TrainConfig {
            lr0: 1.0 / 3.0,
            seed,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(fc, tc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for store in [&mut t.adam.m, &mut t.adam.v] {
            for (_, vals) in store.iter_mut() {
                vals.iter_mut()
                    .for_each(|v| *v = rng.random::<f32>() * 1e-3);
            }
        }
        t.adam.step = 17;
        t.iteration = 1234;
        t.checkpoint()
    }

    fn bytes(ck: &Checkpoint) -> Vec<u8> {
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for seed in 0..4 {
            let ck = random_checkpoint(seed);
            let back = Checkpoint::read_from(&bytes(&ck)[..]).unwrap();
            assert_eq!(back, ck);
            assert_eq!(bytes(&back), bytes(&ck));
        }
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = random_checkpoint(5);
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
        assert!(matches!(
            load_checkpoint(&dir.path().join("nope")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn corrupt_magic_is_version_mismatch() {
        let mut b = bytes(&random_checkpoint(1));
        b[0] = b'X';
        assert!(matches!(
            Checkpoint::read_from(&b[..]),
            Err(Error::VersionMismatch { .. })
        ));
        let text = String::from_utf8_lossy(&bytes(&random_checkpoint(1)))
            .replace("version=1", "version=9");
        let r = Checkpoint::read_from(text.as_bytes());
        assert!(matches!(r, Err(Error::VersionMismatch { .. })), "{r:?}");
    }

    #[test]
    fn truncated_payload_is_reported() {
        let b = bytes(&random_checkpoint(2));
        let r = Checkpoint::read_from(&b[..b.len() - 5]);
        assert!(matches!(r, Err(Error::Truncated(_))), "{r:?}");
        let header_end = b.windows(4).position(|w| w == b"end\n").unwrap();
        let r = Checkpoint::read_from(&b[..header_end]);
        assert!(matches!(r, Err(Error::Truncated(_))), "{r:?}");
    }

    #[test]
    fn edited_shape_is_shape_error() {
        let ck = random_checkpoint(3);
        let mut b = bytes(&ck);
        let len = ck.params.expect("sigma.bias").len();
        let needle = format!("param.sigma.bias={len}\n");
        let pos = b
            .windows(needle.len())
            .position(|w| w == needle.as_bytes())
            .unwrap();
        let edited = format!("param.sigma.bias={}\n", len + 1);
        b.splice(pos..pos + needle.len(), edited.bytes());
        let r = Checkpoint::read_from(&b[..]);
        assert!(matches!(r, Err(Error::CheckpointShape(_))), "{r:?}");
    }
}
