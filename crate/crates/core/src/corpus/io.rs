//! Corpus directory layout:
//!
//! ```text
//! <dir>/header.txt                  config, content prototypes, speaker profiles
//! <dir>/utterances/utt_00000.txt    one file per utterance
//! ```
//!
//! Reals are written with 17 significant digits so that reading a corpus
//! back reproduces every value exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Corpus, CorpusConfig, FrameSequence, SpeakerProfile};
use crate::autodiff::Tensor2D;
use crate::error::{Error, Result};

pub const HEADER_FILE: &str = "header.txt";
pub const UTTERANCE_DIR: &str = "utterances";
const HEADER_MAGIC: &str = "# vqanon corpus v1";

pub(crate) fn push_reals(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{v:.16e}").expect("write to String");
    }
}

pub(crate) fn parse_reals(line: &str, path: &Path, line_no: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::format(path, format!("line {line_no}: `{tok}` is not a number")))
        })
        .collect()
}

pub fn utterance_file_name(id: usize) -> String {
    format!("utt_{id:05}.txt")
}

impl Corpus {
    pub fn header_text(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(HEADER_MAGIC);
        out.push_str("\n[config]\n");
        out.push_str(
            &toml::to_string(&self.config)
                .map_err(|e| Error::Config(format!("cannot encode corpus config: {e}")))?,
        );
        out.push_str("[content_prototypes]\n");
        for row in self.content_prototypes.row_iter() {
            push_reals(&mut out, row);
            out.push('\n');
        }
        out.push_str("[speakers]\n");
        out.push_str("# id f0_mean f0_std offset[F] scale[F]\n");
        for s in &self.speakers {
            write!(out, "{} ", s.id).expect("write to String");
            push_reals(&mut out, &[s.f0_mean, s.f0_std]);
            out.push(' ');
            push_reals(&mut out, &s.offset);
            out.push(' ');
            push_reals(&mut out, &s.scale);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let utt_dir = dir.join(UTTERANCE_DIR);
        fs::create_dir_all(&utt_dir).map_err(|e| Error::io(&utt_dir, e))?;
        let header = dir.join(HEADER_FILE);
        fs::write(&header, self.header_text()?).map_err(|e| Error::io(&header, e))?;
        for u in &self.utterances {
            let path = utt_dir.join(utterance_file_name(u.utterance_id));
            fs::write(&path, utterance_text(u)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header_path = dir.join(HEADER_FILE);
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let (config, content_prototypes, speakers) = parse_header(&text, &header_path)?;

        let total = config.num_speakers * config.utterances_per_speaker;
        let mut utterances = Vec::with_capacity(total);
        for id in 0..total {
            let path = dir.join(UTTERANCE_DIR).join(utterance_file_name(id));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let u = parse_utterance(&text, &path, config.frame_dim)?;
            if u.utterance_id != id || u.speaker >= speakers.len() {
                return Err(Error::format(&path, "utterance id or speaker out of place"));
            }
            if let Some(&bad) = u
                .content_labels
                .iter()
                .find(|&&l| l >= config.num_content_classes)
            {
                return Err(Error::format(&path, format!("content label {bad} out of range")));
            }
            utterances.push(u);
        }
        Ok(Corpus {
            config,
            content_prototypes,
            speakers,
            utterances,
        })
    }
}

fn utterance_text(u: &FrameSequence) -> String {
    let mut out = String::with_capacity(u.len() * u.frames.cols() * 24 + 64);
    writeln!(out, "utterance_id {}", u.utterance_id).expect("write to String");
    writeln!(out, "speaker {}", u.speaker).expect("write to String");
    writeln!(out, "frames {}", u.len()).expect("write to String");
    for (row, label) in u.frames.row_iter().zip(&u.content_labels) {
        write!(out, "{label} ").expect("write to String");
        push_reals(&mut out, row);
        out.push('\n');
    }
    out
}

fn parse_header(text: &str, path: &Path) -> Result<(CorpusConfig, Tensor2D, Vec<SpeakerProfile>)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == HEADER_MAGIC => {}
        _ => return Err(Error::format(path, "missing corpus header line")),
    }
    let mut section = "";
    let mut config_text = String::new();
    let mut protos: Vec<Vec<f64>> = Vec::new();
    let mut speaker_lines: Vec<(usize, &str)> = Vec::new();
    for (n, line) in lines {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match trimmed {
            "[config]" | "[content_prototypes]" | "[speakers]" => {
                section = trimmed;
                continue;
            }
            _ => {}
        }
        match section {
            "[config]" => {
                config_text.push_str(line);
                config_text.push('\n');
            }
            "[content_prototypes]" if !trimmed.starts_with('#') => {
                protos.push(parse_reals(trimmed, path, n + 1)?)
            }
            "[speakers]" if !trimmed.starts_with('#') => speaker_lines.push((n + 1, trimmed)),
            "[content_prototypes]" | "[speakers]" => {}
            _ => {
                return Err(Error::format(
                    path,
                    format!("line {}: outside any section", n + 1),
                ))
            }
        }
    }
    let config: CorpusConfig =
        toml::from_str(&config_text).map_err(|e| Error::format(path, format!("config section: {e}")))?;
    config.validate()?;
    let f = config.frame_dim;
    if protos.len() != config.num_content_classes || protos.iter().any(|p| p.len() != f) {
        return Err(Error::format(
            path,
            "content prototype block does not match config",
        ));
    }
    let content_prototypes = Tensor2D::from_rows(&protos)?;

    let mut speakers = Vec::with_capacity(speaker_lines.len());
    for (n, line) in speaker_lines {
        let (id, rest) = line
            .split_once(' ')
            .ok_or_else(|| Error::format(path, format!("line {n}: truncated speaker")))?;
        let id: usize = id
            .parse()
            .map_err(|_| Error::format(path, format!("line {n}: bad speaker id")))?;
        let vals = parse_reals(rest, path, n)?;
        if vals.len() != 2 + 2 * f {
            return Err(Error::format(
                path,
                format!("line {n}: expected {} reals", 2 + 2 * f),
            ));
        }
        speakers.push(SpeakerProfile {
            id,
            f0_mean: vals[0],
            f0_std: vals[1],
            offset: vals[2..2 + f].to_vec(),
            scale: vals[2 + f..].to_vec(),
        });
    }
    if speakers.len() != config.num_speakers || speakers.iter().enumerate().any(|(i, s)| s.id != i) {
        return Err(Error::format(path, "speaker block does not match config"));
    }
    Ok((config, content_prototypes, speakers))
}

fn parse_utterance(text: &str, path: &Path, dim: usize) -> Result<FrameSequence> {
    let mut lines = text.lines().enumerate();
    let mut field = |name: &str| -> Result<usize> {
        let (n, line) = lines
            .next()
            .ok_or_else(|| Error::format(path, format!("missing `{name}` line")))?;
        line.strip_prefix(name)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::format(path, format!("line {}: expected `{name} <int>`", n + 1)))
    };
    let utterance_id = field("utterance_id")?;
    let speaker = field("speaker")?;
    let count = field("frames")?;
    let mut labels = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (label, rest) = line
            .split_once(' ')
            .ok_or_else(|| Error::format(path, format!("line {}: truncated frame", n + 1)))?;
        labels.push(
            label
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad label", n + 1)))?,
        );
        let vals = parse_reals(rest, path, n + 1)?;
        if vals.len() != dim {
            return Err(Error::format(
                path,
                format!("line {}: expected {dim} values", n + 1),
            ));
        }
        data.extend(vals);
    }
    if labels.len() != count {
        return Err(Error::format(
            path,
            format!("declared {count} frames, found {}", labels.len()),
        ));
    }
    Ok(FrameSequence {
        utterance_id,
        speaker,
        frames: Tensor2D::new(count, dim, data)?,
        content_labels: labels,
    })
}

/// Path of an utterance file relative to a corpus-shaped directory.
pub fn utterance_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(UTTERANCE_DIR).join(utterance_file_name(id))
}
