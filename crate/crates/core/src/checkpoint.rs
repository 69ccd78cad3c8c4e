//! On-disk checkpoints.
//!
//! A checkpoint is a directory:
//!
//! - `manifest.txt`: UTF-8 `key=value` lines (format version, iteration,
//!   random-stream positions, the full config under `config.*`, array shapes
//!   under `array.*`), closed by a `manifest_crc32` line covering every
//!   preceding byte.
//! - one `<name>.bin` per parameter and Adam moment: a little-endian `u64`
//!   element count, the `f32` values, and a CRC32 of both.
//! - `vocab.txt` and `history.csv`, whose CRC32s are listed in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::TrainConfig;
use crate::corpus::{BatchStreamState, Vocabulary};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::training::{MetricRecord, TrainState};

pub const FORMAT: &str = "textkd-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.txt";

pub fn encode_array(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * values.len());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_array(bytes: &[u8], path: &Path) -> Result<Vec<f32>> {
    let bad = || Error::ChecksumFailure { path: path.to_owned() };
    if bytes.len() < 12 {
        return Err(bad());
    }
    let (body, footer) = bytes.split_at(bytes.len() - 4);
    let n = u64::from_le_bytes(body[..8].try_into().expect("8 bytes"));
    if body.len() as u64 != 8 + 4 * n {
        return Err(bad());
    }
    if crc32fast::hash(body) != u32::from_le_bytes(footer.try_into().expect("4 bytes")) {
        return Err(bad());
    }
    Ok(body[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

fn history_csv(history: &[MetricRecord]) -> String {
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("iteration,l_ae,l_d,l_g,jsd1\n");
    for r in history {
        s += &format!("{},{},{},{},{}\n", r.iteration, f(r.l_ae), f(r.l_d), f(r.l_g), f(r.jsd1));
    }
    s
}

fn parse_history(text: &str, path: &Path) -> Result<Vec<MetricRecord>> {
    let bad = |line: usize| Error::IncompatibleCheckpoint(format!("{} line {line}: malformed record", path.display()));
    let opt = |s: &str, line| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(line))
        }
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(i + 1));
        }
        out.push(MetricRecord {
            iteration: f[0].parse().map_err(|_| bad(i + 1))?,
            l_ae: opt(f[1], i + 1)?,
            l_d: opt(f[2], i + 1)?,
            l_g: opt(f[3], i + 1)?,
            jsd1: opt(f[4], i + 1)?,
        });
    }
    Ok(out)
}

/// `(file stem, tensor)` for every array in the state, in a fixed order.
fn arrays(state: &TrainState) -> Vec<(String, &Tensor<f32>)> {
    fn group<'a>(out: &mut Vec<(String, &'a Tensor<f32>)>, params: &'a ParamSet<f32>, opt: &'a Adam<f32>) {
        for (i, (name, t)) in params.iter().enumerate() {
            out.push((name.to_owned(), t));
            out.push((format!("adam.m.{name}"), &opt.m[i]));
            out.push((format!("adam.v.{name}"), &opt.v[i]));
        }
    }
    let mut out = Vec::new();
    if let (Some(ae), Some(opt)) = (&state.autoencoder, &state.ae_opt) {
        group(&mut out, &ae.params, opt);
    }
    group(&mut out, &state.generator.params, &state.gen_opt);
    group(&mut out, &state.critic.params, &state.critic_opt);
    out
}

fn arrays_mut(state: &mut TrainState) -> Vec<(String, &mut Tensor<f32>)> {
    let mut out = Vec::new();
    fn group<'a>(out: &mut Vec<(String, &'a mut Tensor<f32>)>, params: &'a mut ParamSet<f32>, opt: &'a mut Adam<f32>) {
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        let triples = params.tensors_mut().zip(opt.m.iter_mut()).zip(opt.v.iter_mut());
        for (name, ((p, m), v)) in names.into_iter().zip(triples) {
            out.push((format!("adam.m.{name}"), m));
            out.push((format!("adam.v.{name}"), v));
            out.push((name, p));
        }
    }
    if let (Some(ae), Some(opt)) = (&mut state.autoencoder, &mut state.ae_opt) {
        group(&mut out, &mut ae.params, opt);
    }
    group(&mut out, &mut state.generator.params, &mut state.gen_opt);
    group(&mut out, &mut state.critic.params, &mut state.critic_opt);
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn manifest_text(state: &TrainState, vocab: &str, history: &str) -> String {
    let mut m = String::new();
    let mut kv = |k: &str, v: String| m += &format!("{k}={v}\n");
    kv("format", FORMAT.into());
    kv("format_version", FORMAT_VERSION.to_string());
    kv("iteration", state.iteration.to_string());
    kv("noise_word_pos", state.noise_word_pos.to_string());
    kv("data_epoch", state.data_stream.epoch.to_string());
    kv("data_epoch_start_word_pos", state.data_stream.epoch_start_word_pos.to_string());
    kv("data_cursor", state.data_stream.cursor.to_string());
    kv("nonfinite_streak", state.nonfinite_streak.to_string());
    if let Some(opt) = &state.ae_opt {
        kv("adam_step.autoencoder", opt.step.to_string());
    }
    kv("adam_step.generator", state.gen_opt.step.to_string());
    kv("adam_step.critic", state.critic_opt.step.to_string());
    for (k, v) in state.config.entries() {
        kv(&format!("config.{k}"), v);
    }
    kv("vocab_crc32", format!("{:08x}", crc32fast::hash(vocab.as_bytes())));
    kv("history_crc32", format!("{:08x}", crc32fast::hash(history.as_bytes())));
    for (name, t) in arrays(state) {
        kv(&format!("array.{name}"), format!("{},{}", t.rows(), t.cols()));
    }
    let crc = crc32fast::hash(m.as_bytes());
    m += &format!("manifest_crc32={crc:08x}\n");
    m
}

/// Writes `state` to the directory `path`, replacing an existing checkpoint
/// there. The directory is assembled beside `path` and renamed into place.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    if path.exists() && !path.join(MANIFEST).exists() {
        return Err(Error::InvalidArgument(format!(
            "{} exists and is not a checkpoint",
            path.display()
        )));
    }
    let mut staging = path.as_os_str().to_owned();
    staging.push(".partial");
    let staging = PathBuf::from(staging);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;

    let vocab = state.vocab.to_file_string();
    let history = history_csv(&state.history);
    for (name, t) in arrays(state) {
        write(&staging.join(format!("{name}.bin")), &encode_array(t.data()))?;
    }
    write(&staging.join("vocab.txt"), vocab.as_bytes())?;
    write(&staging.join("history.csv"), history.as_bytes())?;
    write(&staging.join(MANIFEST), manifest_text(state, &vocab, &history).as_bytes())?;

    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    fs::rename(&staging, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(MANIFEST);
    let bytes = read(&path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::ChecksumFailure { path: path.clone() })?;
    let body_end = text
        .trim_end_matches('\n')
        .rfind('\n')
        .map_or(0, |i| i + 1);
    let (body, last) = text.split_at(body_end);
    let stored = last
        .trim_end()
        .strip_prefix("manifest_crc32=")
        .and_then(|h| u32::from_str_radix(h, 16).ok())
        .ok_or_else(|| Error::ChecksumFailure { path: path.clone() })?;
    if crc32fast::hash(body.as_bytes()) != stored {
        return Err(Error::ChecksumFailure { path });
    }
    Ok(body
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect())
}

fn field<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T> {
    m.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing or malformed manifest key `{key}`")))
}

fn checked_text(dir: &Path, file: &str, expected: &str) -> Result<String> {
    let path = dir.join(file);
    let bytes = read(&path)?;
    if format!("{:08x}", crc32fast::hash(&bytes)) != expected {
        return Err(Error::ChecksumFailure { path });
    }
    String::from_utf8(bytes).map_err(|_| Error::ChecksumFailure { path })
}

/// Reads a checkpoint directory written by [`save`].
pub fn load(path: &Path) -> Result<TrainState> {
    let m = read_manifest(path)?;
    if m.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} is not a {FORMAT} manifest",
            path.display()
        )));
    }
    let version: u32 = field(&m, "format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }

    let config_text: String = m
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| format!("{k}={v}\n")))
        .collect();
    let config = TrainConfig::parse(&config_text).map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
    let vocab_text = checked_text(path, "vocab.txt", m.get("vocab_crc32").map_or("", String::as_str))?;
    let vocab = Vocabulary::parse(&vocab_text).map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
    let history_path = path.join("history.csv");
    let history_text = checked_text(path, "history.csv", m.get("history_crc32").map_or("", String::as_str))?;

    let mut state = TrainState::init(config, vocab)?;
    state.iteration = field(&m, "iteration")?;
    state.noise_word_pos = field(&m, "noise_word_pos")?;
    state.data_stream = BatchStreamState {
        epoch: field(&m, "data_epoch")?,
        epoch_start_word_pos: field(&m, "data_epoch_start_word_pos")?,
        cursor: field(&m, "data_cursor")?,
    };
    state.nonfinite_streak = field(&m, "nonfinite_streak")?;
    if let Some(opt) = &mut state.ae_opt {
        opt.step = field(&m, "adam_step.autoencoder")?;
    }
    state.gen_opt.step = field(&m, "adam_step.generator")?;
    state.critic_opt.step = field(&m, "adam_step.critic")?;
    state.history = parse_history(&history_text, &history_path)?;

    let listed = m.keys().filter(|k| k.starts_with("array.")).count();
    let slots = arrays_mut(&mut state);
    if listed != slots.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "manifest lists {listed} arrays, the configured model has {}",
            slots.len()
        )));
    }
    for (name, slot) in slots {
        let shape = format!("{},{}", slot.rows(), slot.cols());
        let key = format!("array.{name}");
        if m.get(&key) != Some(&shape) {
            return Err(Error::IncompatibleCheckpoint(format!(
                "array {name}: manifest shape {:?}, model expects {shape}",
                m.get(&key)
            )));
        }
        let file = path.join(format!("{name}.bin"));
        let values = decode_array(&read(&file)?, &file)?;
        if values.len() != slot.len() {
            return Err(Error::ChecksumFailure { path: file });
        }
        slot.data_mut().copy_from_slice(&values);
    }
    Ok(state)
}

/// Reads only the manifest's `iteration` field.
pub fn iteration_of(path: &Path) -> Result<u64> {
    field(&read_manifest(path)?, "iteration")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;
    use crate::corpus::build_vocab;

    fn small(mode: Mode) -> TrainState {
        let mut cfg = TrainConfig {
            mode,
            seq_len: 4,
            batch_size: 2,
            hidden: 3,
            noise_dim: 2,
            channels: 2,
            res_blocks: 1,
            ..TrainConfig::default()
        };
        cfg.seed = 17;
        let mut s = TrainState::init(cfg, build_vocab(["ab ba"], 10).unwrap()).unwrap();
        s.iteration = 3;
        s.noise_word_pos = 1234;
        s.gen_opt.step = 3;
        s.gen_opt.m[0].data_mut()[0] = 0.25;
        s.history.push(MetricRecord {
            iteration: 0,
            l_ae: None,
            l_d: None,
            l_g: None,
            jsd1: Some(0.5),
        });
        s.history.push(MetricRecord {
            iteration: 3,
            l_ae: Some(1.5),
            l_d: Some(-0.1),
            l_g: Some(0.2),
            jsd1: None,
        });
        s
    }

    #[test]
    fn array_round_trip_and_truncation() {
        let v = vec![1.0f32, -2.5, f32::MIN_POSITIVE];
        let bytes = encode_array(&v);
        assert_eq!(decode_array(&bytes, Path::new("x")).unwrap(), v);
        for cut in [0, 5, bytes.len() - 1] {
            assert!(matches!(decode_array(&bytes[..cut], Path::new("x")), Err(Error::ChecksumFailure { .. })));
        }
        let mut flipped = bytes.clone();
        flipped[9] ^= 1;
        assert!(matches!(decode_array(&flipped, Path::new("x")), Err(Error::ChecksumFailure { .. })));
    }

    #[test]
    fn state_round_trips_in_both_modes() {
        let dir = tempfile::tempdir().unwrap();
        for mode in Mode::ALL {
            let s = small(mode);
            let p = dir.path().join(mode.as_str());
            save(&s, &p).unwrap();
            assert_eq!(load(&p).unwrap(), s);
            assert_eq!(iteration_of(&p).unwrap(), 3);
        }
        assert!(!dir.path().join("iwgan").join("enc.w_x.bin").exists());
    }

    #[test]
    fn second_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        save(&small(Mode::TextKd), &a).unwrap();
        save(&load(&a).unwrap(), &b).unwrap();
        let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for n in names {
            assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
        }
    }

    #[test]
    fn truncated_array_and_manifest_fail_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c");
        save(&small(Mode::TextKd), &p).unwrap();
        let f = p.join("gen.proj_w.bin");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&p), Err(Error::ChecksumFailure { .. })));

        save(&small(Mode::TextKd), &p).unwrap();
        let mf = p.join(MANIFEST);
        let text = fs::read_to_string(&mf).unwrap();
        fs::write(&mf, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load(&p), Err(Error::ChecksumFailure { .. })));
    }

    #[test]
    fn version_mismatch_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v");
        save(&small(Mode::Iwgan), &p).unwrap();
        let mf = p.join(MANIFEST);
        let text = fs::read_to_string(&mf).unwrap().replace("format_version=1", "format_version=2");
        let body: String = text.lines().filter(|l| !l.starts_with("manifest_crc32")).map(|l| format!("{l}\n")).collect();
        let resealed = format!("{body}manifest_crc32={:08x}\n", crc32fast::hash(body.as_bytes()));
        fs::write(&mf, resealed).unwrap();
        assert!(matches!(load(&p), Err(Error::IncompatibleCheckpoint(_))));
    }

    #[test]
    fn refuses_to_overwrite_foreign_directory() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("precious.txt"), "x").unwrap();
        assert!(save(&small(Mode::Iwgan), dir.path()).is_err());
        assert!(dir.path().join("precious.txt").exists());
    }
}
