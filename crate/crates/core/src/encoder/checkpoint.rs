//! Checkpoint format: one JSON document holding the config, the vocabulary,
//! and every weight tensor quantized to little-endian f32 under base64.
//! Maps are ordered, so save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::encoder::params::ModelParams;
use crate::encoder::{EncoderConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    shape: Vec<usize>,
    dtype: String,
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    config: EncoderConfig,
    vocabulary: BTreeMap<String, usize>,
    params: BTreeMap<String, TensorRecord>,
}

fn encode_tensor(t: &Tensor) -> TensorRecord {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    TensorRecord {
        shape: t.shape().to_vec(),
        dtype: "f32le".into(),
        data: BASE64.encode(bytes),
    }
}

fn decode_tensor(name: &str, rec: &TensorRecord) -> Result<Tensor> {
    if rec.dtype != "f32le" {
        return Err(Error::Checkpoint(format!(
            "tensor {name} has dtype {:?}, expected \"f32le\"",
            rec.dtype
        )));
    }
    let bytes = BASE64
        .decode(&rec.data)
        .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
    let expected: usize = rec.shape.iter().product();
    if bytes.len() != expected * 4 {
        return Err(Error::Checkpoint(format!(
            "tensor {name} has {} bytes for shape {:?}",
            bytes.len(),
            rec.shape
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(rec.shape.clone(), data)
}

pub fn save_checkpoint(
    params: &ModelParams,
    config: &EncoderConfig,
    vocab: &Vocabulary,
    path: &Path,
) -> Result<()> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        config: config.clone(),
        vocabulary: vocab.to_map(),
        params: params
            .named()
            .into_iter()
            .map(|(name, t)| (name, encode_tensor(t)))
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, EncoderConfig, Vocabulary)> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format_version {} is not supported (expected {CHECKPOINT_VERSION})",
            file.format_version
        )));
    }
    file.config.validate()?;
    let vocab = Vocabulary::from_map(file.vocabulary)?;
    if vocab.len() != file.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} tokens, config expects {}",
            vocab.len(),
            file.config.vocab_size
        )));
    }
    let mut tensors: BTreeMap<String, Tensor> = file
        .params
        .iter()
        .map(|(name, rec)| Ok((name.clone(), decode_tensor(name, rec)?)))
        .collect::<Result<_>>()?;
    let params = ModelParams::from_named(&file.config, |name| tensors.remove(name))?;
    if !tensors.is_empty() {
        let extra: Vec<&String> = tensors.keys().collect();
        return Err(Error::Checkpoint(format!("unknown tensors {extra:?}")));
    }
    Ok((params, file.config, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::forward::represent;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelParams, EncoderConfig, Vocabulary) {
        let labels: Vec<String> = (0..4).map(|i| format!("act{i}")).collect();
        let vocab = Vocabulary::build(&labels).unwrap();
        let mut config = EncoderConfig::desk(4, vocab.len(), 3, 2, 4, 21);
        config.num_layers = 1;
        config.hidden_dim = 8;
        config.num_heads = 2;
        config.mlp_dim = 16;
        let params = ModelParams::init(&config).unwrap();
        (params, config, vocab)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (params, config, vocab) = setup();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        save_checkpoint(&params, &config, &vocab, &a).unwrap();
        let (loaded, config2, vocab2) = load_checkpoint(&a).unwrap();
        save_checkpoint(&loaded, &config2, &vocab2, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn representations_survive_quantization() {
        let (params, config, vocab) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frames: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..4).map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect();
        let before = represent(&params, &config, vocab.mask_id(), &frames).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&params, &config, &vocab, &path).unwrap();
        let (loaded, config2, vocab2) = load_checkpoint(&path).unwrap();
        let after = represent(&loaded, &config2, vocab2.mask_id(), &frames).unwrap();
        for (x, y) in before.iter().zip(&after) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-2);
            assert!(rel < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let (params, config, vocab) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&params, &config, &vocab, &path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 2");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn corrupted_tensor_payload_is_rejected() {
        let (params, config, vocab) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&params, &config, &vocab, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // Drop four base64 characters (one f32) from the first payload.
        let at = text.find("\"data\": \"").unwrap() + "\"data\": \"".len();
        let mut tampered = text.clone();
        tampered.replace_range(at..at + 4, "");
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn unknown_tensor_name_is_rejected() {
        let (params, config, vocab) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&params, &config, &vocab, &path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"cls_token\"", "\"cls_tokens\"");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
