//! Line-delimited SELFIES corpora and the bundled synthetic generator.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use limo_chem::selfies::encode;
use limo_chem::synth::{random_molecule, SynthParams};
use limo_chem::{Alphabet, SelfiesString};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LimoError, Result};

/// Reads one string per line, padding each to length `n`. Blank lines are skipped.
pub fn read_corpus(path: &Path, n: usize, alphabet: &Alphabet) -> Result<Vec<SelfiesString>> {
    let file = File::open(path)
        .map_err(|e| LimoError::InvalidInput(format!("corpus {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let s = SelfiesString::parse(line, n, alphabet).map_err(|e| {
            LimoError::InvalidInput(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, strings: &[SelfiesString], alphabet: &Alphabet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in strings {
        writeln!(w, "{}", s.to_text(alphabet))?;
    }
    w.flush()?;
    Ok(())
}

/// `count` encodable random drug-like molecules as length-`n` strings.
pub fn synthetic_corpus(
    count: usize,
    seed: u64,
    n: usize,
    alphabet: &Alphabet,
) -> Vec<SelfiesString> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = SynthParams::druglike();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let g = random_molecule(&mut rng, &params);
        // Molecules whose derivation exceeds n are redrawn.
        if let Ok(s) = encode(&g, n, alphabet) {
            out.push(s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_file_round_trip() {
        let a = Alphabet::standard();
        let corpus = synthetic_corpus(50, 3, 72, &a);
        assert_eq!(corpus, synthetic_corpus(50, 3, 72, &a));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        write_corpus(&path, &corpus, &a).unwrap();
        assert_eq!(read_corpus(&path, 72, &a).unwrap(), corpus);
    }

    #[test]
    fn bad_lines_are_reported_with_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "[C][C]\n\n[C][Xx]\n").unwrap();
        let err = read_corpus(&path, 72, &Alphabet::standard())
            .unwrap_err()
            .to_string();
        assert!(err.contains(":3:"), "{err}");
    }
}
