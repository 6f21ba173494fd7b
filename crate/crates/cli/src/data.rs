use std::fs;
use std::path::PathBuf;

use clap::Args;
use jamt::pipeline::SourceStyle;
use jamt::synth::{write_text_pairs, write_triplets, CorpusSizes, SyntheticSpec, SyntheticTask};
use jamt::text::BpeModel;
use jamt::Result;

use crate::manifest::{self, Manifest};

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory; receives asr/, mt/, st/, text/ and test/.
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Source words in the lexicon.
    #[arg(long, default_value_t = 40)]
    pub vocab: usize,
    #[arg(long, default_value_t = 4)]
    pub frames_per_token: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    /// Standard deviation of the Gaussian feature noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Extra frames per token, drawn from 0..=jitter.
    #[arg(long, default_value_t = 0)]
    pub jitter: usize,
    /// Translate questions in source order like statements.
    #[arg(long)]
    pub no_question_reversal: bool,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 6)]
    pub max_len: usize,
    #[arg(long, default_value_t = 2000)]
    pub asr: usize,
    #[arg(long, default_value_t = 2000)]
    pub mt: usize,
    #[arg(long, default_value_t = 200)]
    pub st: usize,
    #[arg(long, default_value_t = 2000)]
    pub text: usize,
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    /// Fraction of ST transcripts replaced by another sentence's.
    #[arg(long, default_value_t = 0.0)]
    pub corruption: f64,
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        vocab_size: a.vocab,
        frames_per_token: a.frames_per_token,
        feature_dim: a.feature_dim,
        noise: a.noise,
        jitter: a.jitter,
        punctuation_rule: !a.no_question_reversal,
        min_len: a.min_len,
        max_len: a.max_len,
        seed: a.seed,
    };
    let sizes = CorpusSizes {
        asr: a.asr,
        mt: a.mt,
        st: a.st,
        text: a.text,
        test: a.test,
        corruption: a.corruption,
    };
    let corpora = SyntheticTask::new(spec.clone())?.corpora(&sizes)?;
    write_triplets(&a.out.join("asr"), &corpora.asr)?;
    write_text_pairs(&a.out.join("mt"), &corpora.mt)?;
    write_triplets(&a.out.join("st"), &corpora.st)?;
    write_text_pairs(&a.out.join("text"), &corpora.text)?;
    write_triplets(&a.out.join("test"), &corpora.test)?;
    let corrupted: String = corpora.corrupted.iter().map(|&i| format!("{}\n", corpora.st[i].id)).collect();
    fs::write(a.out.join("corrupted.txt"), corrupted)?;

    let mut m = Manifest::new("gen-data");
    m.set("seed", a.seed);
    m.set("config.vocab", spec.vocab_size);
    m.set("config.frames_per_token", spec.frames_per_token);
    m.set("config.feature_dim", spec.feature_dim);
    m.set("config.noise", spec.noise);
    m.set("config.jitter", spec.jitter);
    m.set("config.question_reversal", spec.punctuation_rule);
    m.set("config.min_len", spec.min_len);
    m.set("config.max_len", spec.max_len);
    for (k, v) in [("asr", a.asr), ("mt", a.mt), ("st", a.st), ("text", a.text), ("test", a.test)] {
        m.set(&format!("config.{k}"), v);
    }
    m.set("config.corruption", a.corruption);
    m.write(&manifest::path_for(&a.out, true))
}

#[derive(Args, Debug)]
pub struct TokTrainArgs {
    /// Text files, one sentence per line.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub merges: usize,
    /// Strip punctuation before training (normalized source tokenizer).
    #[arg(long)]
    pub norm: bool,
    #[arg(short, long)]
    pub output: PathBuf,
}

pub fn tok_train(a: &TokTrainArgs) -> Result<()> {
    let style = if a.norm { SourceStyle::Norm } else { SourceStyle::Punc };
    let mut lines = Vec::new();
    let mut m = Manifest::new("tok-train");
    for p in &a.inputs {
        lines.extend(fs::read_to_string(p)?.lines().map(|l| style.apply(l)));
        m.input(p)?;
    }
    let bpe = BpeModel::train(&lines, a.merges)?;
    bpe.save(&a.output)?;
    m.set("seed", "none");
    m.set("config.merges", a.merges);
    m.set("config.norm", a.norm);
    m.set("vocab_size", bpe.vocab_size());
    m.write(&manifest::path_for(&a.output, false))
}
