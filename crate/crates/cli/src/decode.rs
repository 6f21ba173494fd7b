use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use jamt::decode::{output_line, Cascade, CascadeOutput, DecodeConfig, GreedyRecognizer, MtFeed, MtMember};
use jamt::metrics::{corpus_bleu, corpus_wer};
use jamt::model::{AsrModel, JointModel, LanguageModel, MtModel};
use jamt::synth::{read_triplets, write_triplets, Triplet};
use jamt::train::{load_checkpoint, prune_corpus, PruneItem};
use jamt::{Error, Result};

use crate::manifest::{self, Manifest};
use crate::{Metric, TokenizerArgs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DecodeMode {
    /// External ASR, external MT reading the ASR tokens.
    ExtExt,
    /// External ASR hypotheses, forced through the joint model's ASR to feed
    /// its MT.
    ExtJoint,
    /// Joint model's ASR, external MT reading its tokens.
    JointExt,
    /// Joint model end to end.
    JointJoint,
    /// Weighted ensemble of joint models.
    Ens,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long, value_enum)]
    pub mode: DecodeMode,
    #[command(flatten)]
    pub tok: TokenizerArgs,
    /// External ASR checkpoint.
    #[arg(long)]
    pub asr: Option<PathBuf>,
    /// External MT checkpoint.
    #[arg(long)]
    pub mt: Option<PathBuf>,
    /// Joint checkpoint; repeat for `--mode ens`.
    #[arg(long)]
    pub joint: Vec<PathBuf>,
    /// Comma-separated ensemble weights, one per `--joint`.
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f64>,
    /// Language model fused into the ASR search.
    #[arg(long)]
    pub lm: Option<PathBuf>,
    /// `key=value` decoding config: beam_size, n_best, length_ratio,
    /// insertion_penalty, eos_factor, lm_weight, threads.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// ASR hypotheses passed to the coupled translation search.
    #[arg(long)]
    pub nbest: Option<usize>,
    #[arg(long)]
    pub lm_weight: Option<f64>,
    #[arg(long)]
    pub length_ratio: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub insertion_penalty: Option<f64>,
    #[arg(long)]
    pub eos_factor: Option<f64>,
    /// Utterances decoded in parallel; output does not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Corpus directory to decode.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

/// Decoding settings after applying defaults, the config file and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeSettings {
    pub search: DecodeConfig,
    pub threads: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings {
            search: DecodeConfig::default(),
            threads: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
}

impl DecodeSettings {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.search;
        match key.trim() {
            "beam_size" => s.beam_size = parse(key, v)?,
            "n_best" => s.n_best = parse(key, v)?,
            "length_ratio" => s.length_ratio = parse(key, v)?,
            "insertion_penalty" => s.insertion_penalty = parse(key, v)?,
            "eos_factor" => s.eos_factor = parse(key, v)?,
            "lm_weight" => s.lm_weight = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown decoding key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let s = &self.search;
        format!(
            "beam_size={}\nn_best={}\nlength_ratio={}\ninsertion_penalty={}\neos_factor={}\nlm_weight={}\nthreads={}\n",
            s.beam_size, s.n_best, s.length_ratio, s.insertion_penalty, s.eos_factor, s.lm_weight, self.threads
        )
    }

    fn from_args(a: &DecodeArgs) -> Result<Self> {
        let mut d = DecodeSettings::default();
        if let Some(p) = &a.config {
            d.apply_text(&fs::read_to_string(p)?)?;
        }
        let s = &mut d.search;
        s.beam_size = a.beam.unwrap_or(s.beam_size);
        s.n_best = a.nbest.unwrap_or(s.n_best);
        s.lm_weight = a.lm_weight.unwrap_or(s.lm_weight);
        s.length_ratio = a.length_ratio.unwrap_or(s.length_ratio);
        s.insertion_penalty = a.insertion_penalty.unwrap_or(s.insertion_penalty);
        s.eos_factor = a.eos_factor.unwrap_or(s.eos_factor);
        d.threads = a.threads.unwrap_or(d.threads);
        if d.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        d.search.validate()?;
        Ok(d)
    }
}

fn joint_mt(j: &JointModel) -> MtMember<'_> {
    MtMember {
        model: &j.mt,
        feed: MtFeed::Context(&j.asr),
        weight: 1.0,
    }
}

/// Checkpoints loaded for one decode mode.
struct Models {
    asr: Option<AsrModel>,
    mt: Option<MtModel>,
    joints: Vec<JointModel>,
    lm: Option<LanguageModel>,
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str, mode: DecodeMode) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("--mode {} needs --{flag}", mode_name(mode))))
}

fn mode_name(mode: DecodeMode) -> String {
    mode.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default()
}

impl Models {
    fn load(a: &DecodeArgs) -> Result<Self> {
        use DecodeMode::*;
        let asr = match a.mode {
            ExtExt | ExtJoint => Some(AsrModel::from_tensors(&load_checkpoint(need(&a.asr, "asr", a.mode)?)?)?),
            _ => None,
        };
        let mt = match a.mode {
            ExtExt | JointExt => Some(MtModel::from_tensors(&load_checkpoint(need(&a.mt, "mt", a.mode)?)?)?),
            _ => None,
        };
        let joints_ok = match a.mode {
            ExtExt => a.joint.is_empty(),
            ExtJoint | JointExt | JointJoint => a.joint.len() == 1,
            Ens => !a.joint.is_empty(),
        };
        if !joints_ok {
            return Err(Error::Config(format!(
                "--mode {} got {} --joint checkpoints",
                mode_name(a.mode),
                a.joint.len()
            )));
        }
        let joints = a
            .joint
            .iter()
            .map(|p| JointModel::from_tensors(&load_checkpoint(p)?))
            .collect::<Result<Vec<_>>>()?;
        let lm = match &a.lm {
            Some(p) => Some(LanguageModel::from_tensors(&load_checkpoint(p)?)?),
            None => None,
        };
        Ok(Models { asr, mt, joints, lm })
    }

    fn cascade(&self, mode: DecodeMode, weights: &[f64], cfg: &DecodeConfig) -> Result<Cascade<'_>> {
        let asr_cfg = cfg.clone();
        let mt_cfg = DecodeConfig {
            n_best: 1,
            lm_weight: 0.0,
            ..cfg.clone()
        };
        let ext_asr = || self.asr.as_ref().expect("loaded for this mode");
        let ext_mt = || self.mt.as_ref().expect("loaded for this mode");
        let tokens = |model| MtMember {
            model,
            feed: MtFeed::Tokens,
            weight: 1.0,
        };
        let mut cascade = match mode {
            DecodeMode::ExtExt => Cascade::simple(ext_asr(), tokens(ext_mt()), asr_cfg, mt_cfg),
            DecodeMode::ExtJoint => Cascade::simple(ext_asr(), joint_mt(&self.joints[0]), asr_cfg, mt_cfg),
            DecodeMode::JointExt => Cascade::simple(&self.joints[0].asr, tokens(ext_mt()), asr_cfg, mt_cfg),
            DecodeMode::JointJoint => Cascade::simple(&self.joints[0].asr, joint_mt(&self.joints[0]), asr_cfg, mt_cfg),
            DecodeMode::Ens => {
                let w = if weights.is_empty() {
                    vec![1.0; self.joints.len()]
                } else if weights.len() == self.joints.len() {
                    weights.to_vec()
                } else {
                    return Err(Error::Config(format!(
                        "{} weights for {} joint models",
                        weights.len(),
                        self.joints.len()
                    )));
                };
                Cascade {
                    asr: self.joints.iter().zip(&w).map(|(j, &w)| (&j.asr, w)).collect(),
                    mt: self
                        .joints
                        .iter()
                        .zip(&w)
                        .map(|(j, &w)| MtMember { weight: w, ..joint_mt(j) })
                        .collect(),
                    lm: None,
                    asr_cfg,
                    mt_cfg,
                }
            }
        };
        if mode != DecodeMode::Ens && !weights.is_empty() {
            return Err(Error::Config("--weights only applies to --mode ens".into()));
        }
        cascade.lm = self.lm.as_ref();
        cascade.validate()?;
        Ok(cascade)
    }
}

/// Decodes every utterance; results come back in corpus order whatever
/// the thread count.
fn decode_all(cascade: &Cascade, data: &[Triplet], threads: usize) -> Result<Vec<CascadeOutput>> {
    if threads <= 1 {
        return data.iter().map(|t| cascade.decode(&t.features)).collect();
    }
    let mut slots: Vec<Option<Result<CascadeOutput>>> = (0..data.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let workers: Vec<_> = (0..threads)
            .map(|k| {
                s.spawn(move || {
                    (k..data.len())
                        .step_by(threads)
                        .map(|i| (i, cascade.decode(&data[i].features)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for w in workers {
            for (i, r) in w.join().expect("decode worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every utterance decoded")).collect()
}

pub fn decode(a: &DecodeArgs) -> Result<()> {
    let settings = DecodeSettings::from_args(a)?;
    let mut m = Manifest::new("decode");
    m.set("mode", mode_name(a.mode));
    m.set("seed", "none");
    m.config(&settings.to_text());
    if !a.weights.is_empty() {
        m.set("config.weights", a.weights.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
    }
    a.tok.record(&mut m)?;
    for p in a.asr.iter().chain(&a.mt).chain(&a.joint).chain(&a.lm) {
        m.input(p)?;
    }
    m.input(&a.data)?;

    let vocab = a.tok.load()?;
    let models = Models::load(a)?;
    let cascade = models.cascade(a.mode, &a.weights, &settings.search)?;
    let data = read_triplets(&a.data)?;
    let decoded = decode_all(&cascade, &data, settings.threads)?;

    let mut out = std::io::BufWriter::new(fs::File::create(&a.output)?);
    for (t, d) in data.iter().zip(&decoded) {
        let asr_text = vocab.source.decode(d.asr_best().words());
        let translation = vocab.target.decode(d.translation().words());
        writeln!(
            out,
            "{}",
            output_line(&t.id, &asr_text, &translation, d.source().log_prob, d.translation().log_prob)
        )?;
    }
    out.flush()?;
    m.write(&manifest::path_for(&a.output, false))
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    /// ASR (or joint) checkpoint used as the recognizer.
    #[arg(long)]
    pub asr: PathBuf,
    /// Source tokenizer.
    #[arg(long)]
    pub src_bpe: PathBuf,
    /// Compare against punctuation-stripped transcripts.
    #[arg(long)]
    pub norm: bool,
    /// Corpus directory to prune.
    #[arg(long)]
    pub data: PathBuf,
    /// Utterances with sentence WER strictly above this are dropped.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Directory for the kept corpus and `dropped.txt`.
    #[arg(short, long)]
    pub output: PathBuf,
}

pub fn prune(a: &PruneArgs) -> Result<()> {
    let mut m = Manifest::new("prune");
    m.set("seed", "none");
    m.set("config.threshold", a.threshold);
    m.set("config.norm", a.norm);
    m.input(&a.asr)?;
    m.input(&a.src_bpe)?;
    m.input(&a.data)?;

    let asr = AsrModel::from_tensors(&load_checkpoint(&a.asr)?)?;
    let tokenizer = jamt::text::BpeModel::load(&a.src_bpe)?;
    let style = if a.norm {
        jamt::pipeline::SourceStyle::Norm
    } else {
        jamt::pipeline::SourceStyle::Punc
    };
    let data = read_triplets(&a.data)?;
    let transcripts: Vec<String> = data.iter().map(|t| style.apply(&t.source)).collect();
    let items: Vec<PruneItem> = data
        .iter()
        .zip(&transcripts)
        .map(|(t, s)| PruneItem {
            id: &t.id,
            features: &t.features,
            transcript: s,
        })
        .collect();
    let report = prune_corpus(
        &GreedyRecognizer {
            asr: &asr,
            tokenizer: &tokenizer,
        },
        &items,
        a.threshold,
    )?;
    let kept: Vec<Triplet> = report.kept.iter().map(|&i| data[i].clone()).collect();
    write_triplets(&a.output, &kept)?;
    let dropped: String = report.dropped.iter().map(|(id, w)| format!("{id}\t{w:.4}\n")).collect();
    fs::write(a.output.join("dropped.txt"), dropped)?;
    eprintln!("kept {} of {} utterances", kept.len(), data.len());

    m.set("result.kept", kept.len());
    m.set("result.dropped", report.dropped.len());
    m.write(&manifest::path_for(&a.output, true))
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// Reference file, one sentence per line.
    pub reference: PathBuf,
    /// Hypothesis file, line-aligned with the references.
    pub hypothesis: PathBuf,
}

/// The score line printed by `jamt score`.
pub fn score_line(metric: Metric, refs: &[String], hyps: &[String]) -> Result<String> {
    Ok(match metric {
        Metric::Wer => format!("WER {:.4}", corpus_wer(refs, hyps)?),
        Metric::Bleu => format!("BLEU {:.2}", corpus_bleu(refs, hyps)?),
    })
}

pub fn score(a: &ScoreArgs) -> Result<()> {
    let lines = |p: &Path| -> Result<Vec<String>> { Ok(fs::read_to_string(p)?.lines().map(str::to_string).collect()) };
    println!("{}", score_line(a.metric, &lines(&a.reference)?, &lines(&a.hypothesis)?)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_settings_reject_unknown_keys() {
        let mut d = DecodeSettings::default();
        d.apply_text("beam_size=4\n# comment\nthreads=2\n").unwrap();
        assert_eq!(d.search.beam_size, 4);
        assert_eq!(d.threads, 2);
        assert!(matches!(d.apply_text("beam=4"), Err(Error::Config(_))));
        assert!(matches!(d.apply_text("n_best=two"), Err(Error::Config(_))));
    }

    #[test]
    fn settings_text_round_trips() {
        let mut d = DecodeSettings::default();
        d.apply_text("n_best=3\ninsertion_penalty=-0.5\nlm_weight=0.25").unwrap();
        let mut e = DecodeSettings::default();
        e.apply_text(&d.to_text()).unwrap();
        assert_eq!(d, e);
    }

    #[test]
    fn score_lines_are_formatted() {
        let r = vec!["a b c d".to_string()];
        let h = vec!["a x c".to_string()];
        assert_eq!(score_line(Metric::Wer, &r, &h).unwrap(), "WER 0.5000");
        assert_eq!(score_line(Metric::Bleu, &r, &r).unwrap(), "BLEU 100.00");
    }
}
