use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use deskbert::data::{ShardReader, SyntheticCorpus};
use deskbert::run::{self, DataManifest, PrepareSpec, VOCAB_FILE};

/// Where the sentences come from.
#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSource {
    /// UTF-8 text, one or more sentences per line.
    Text(PathBuf),
    Synthetic(SyntheticCorpus),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareArgs {
    pub source: CorpusSource,
    /// Vocabulary cap for text corpora.
    pub vocab: usize,
    pub spec: PrepareSpec,
    pub out: PathBuf,
}

/// Build shards, the held-out set and the manifest, then check the manifest
/// against the shard headers.
pub fn prepare(args: &PrepareArgs) -> Result<DataManifest> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let manifest = match &args.source {
        CorpusSource::Text(path) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let text = String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", path.display()))?;
            let (vocab, sentences) = run::encode_text(&text, args.vocab);
            let mut listing = vocab.tokens().join("\n");
            listing.push('\n');
            fs::write(args.out.join(VOCAB_FILE), listing)?;
            run::prepare(&sentences, vocab.len(), &path.display().to_string(), &args.spec, &args.out)?
        }
        CorpusSource::Synthetic(c) => {
            let sentences = c.generate(args.spec.seed);
            run::prepare(&sentences, c.vocab, "synthetic", &args.spec, &args.out)?
        }
    };
    verify(&args.out, &manifest)?;
    Ok(manifest)
}

/// Recount every shard from its header.
pub fn verify(dir: &Path, m: &DataManifest) -> Result<()> {
    let mut total = 0u64;
    for s in &m.shards {
        let n = ShardReader::open(&dir.join(&s.file))?.len() as u64;
        if n != s.count {
            bail!("{}: header says {n} examples, manifest says {}", s.file, s.count);
        }
        total += n;
    }
    if total != m.examples {
        bail!("shards hold {total} examples, manifest says {}", m.examples);
    }
    let held = ShardReader::open(&dir.join(&m.eval.file))?.len() as u64;
    if held != m.eval.count {
        bail!("held-out set has {held} examples, manifest says {}", m.eval.count);
    }
    Ok(())
}
