//! `jamt`: data generation, tokenizer and model training, checkpoint
//! averaging, cascade decoding, corpus pruning and scoring.
//!
//! Exit status: 0 on success, 1 for configuration and usage errors, 2 for
//! I/O and file-format errors, 3 when training diverges.

mod data;
mod decode;
mod fit;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use jamt::Error;

#[derive(Parser, Debug)]
#[command(name = "jamt", version, about = "Joint ASR and MT speech translation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic speech translation corpora.
    GenData(data::GenDataArgs),
    /// Train a BPE tokenizer on text files.
    TokTrain(data::TokTrainArgs),
    /// Train an ASR, MT, joint or language model.
    Train(fit::TrainArgs),
    /// Average checkpoints elementwise.
    AvgCkpt(fit::AvgArgs),
    /// Decode a corpus with a cascade of models.
    Decode(decode::DecodeArgs),
    /// Drop utterances whose transcripts disagree with an ASR model.
    Prune(decode::PruneArgs),
    /// Score hypotheses against references.
    Score(decode::ScoreArgs),
}

/// Source and target tokenizers shared by the model commands.
#[derive(Args, Debug)]
pub struct TokenizerArgs {
    /// Source (transcript) tokenizer.
    #[arg(long)]
    pub src_bpe: PathBuf,
    /// Target (translation) tokenizer.
    #[arg(long)]
    pub tgt_bpe: PathBuf,
    /// Strip punctuation from transcripts (normalized source style).
    #[arg(long)]
    pub norm: bool,
}

impl TokenizerArgs {
    pub fn load(&self) -> jamt::Result<jamt::pipeline::Vocabularies> {
        Ok(jamt::pipeline::Vocabularies {
            source: jamt::text::BpeModel::load(&self.src_bpe)?,
            target: jamt::text::BpeModel::load(&self.tgt_bpe)?,
            style: self.style(),
        })
    }

    pub fn style(&self) -> jamt::pipeline::SourceStyle {
        if self.norm {
            jamt::pipeline::SourceStyle::Norm
        } else {
            jamt::pipeline::SourceStyle::Punc
        }
    }

    pub fn record(&self, m: &mut manifest::Manifest) -> jamt::Result<()> {
        m.set("style", format!("{:?}", self.style()));
        m.input(&self.src_bpe)?;
        m.input(&self.tgt_bpe)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Wer,
    Bleu,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format { .. } => 2,
        Error::Divergence(_) | Error::NonFinite { .. } => 3,
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape { .. } | Error::TooLong { .. } => 1,
    }
}

fn run(cli: Cli) -> jamt::Result<()> {
    match cli.command {
        Command::GenData(a) => data::gen_data(&a),
        Command::TokTrain(a) => data::tok_train(&a),
        Command::Train(a) => fit::train(&a),
        Command::AvgCkpt(a) => fit::avg_ckpt(&a),
        Command::Decode(a) => decode::decode(&a),
        Command::Prune(a) => decode::prune(&a),
        Command::Score(a) => decode::score(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("jamt: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 2);
        assert_eq!(exit_code(&Error::Divergence("x".into())), 3);
        assert_eq!(exit_code(&Error::NonFinite { op: "exp" }), 3);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
