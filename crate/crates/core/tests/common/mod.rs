//! Synthetic data shared by the integration tests: a two-class planted-motif
//! classification task and unlabeled windows drawn from the same process.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use findna::seqcore::{LabeledDataset, NucleotideSequence};

pub const MOTIF: &str = "GACGTCAT";

fn random_bases(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len)
        .map(|_| ['A', 'C', 'G', 'T'][rng.gen_range(0..4)])
        .collect()
}

/// One synthetic sequence: class 1 carries the motif at a random position,
/// class 0 is rejection-sampled to be motif-free.
pub fn motif_sequence(rng: &mut ChaCha8Rng, len: usize, with_motif: bool, id: &str) -> NucleotideSequence {
    loop {
        let mut bases = random_bases(rng, len);
        if with_motif {
            let pos = rng.gen_range(0..=len - MOTIF.len());
            bases.replace_range(pos..pos + MOTIF.len(), MOTIF);
        } else if bases.contains(MOTIF) {
            continue; // resample the rare accidental hit
        }
        return NucleotideSequence::new(id, bases).expect("ACGT only");
    }
}

/// Balanced two-class dataset; even indices are class 0 (no motif).
pub fn motif_dataset(n: usize, len: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| {
            let label = i % 2;
            let seq = motif_sequence(&mut rng, len, label == 1, &format!("seq{i}"));
            (seq, label)
        })
        .collect();
    LabeledDataset {
        records,
        num_classes: 2,
    }
}

/// Unlabeled windows from the same generative process (half with the motif).
pub fn motif_windows(n: usize, len: usize, seed: u64) -> Vec<NucleotideSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| motif_sequence(&mut rng, len, i % 2 == 1, &format!("win{i}")))
        .collect()
}

/// Plain random ACGT windows (no planted structure).
pub fn random_windows(n: usize, len: usize, seed: u64) -> Vec<NucleotideSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| NucleotideSequence::new(format!("rw{i}"), random_bases(&mut rng, len)).unwrap())
        .collect()
}

/// Write sequences as a FASTA file.
pub fn write_fasta_file(path: &std::path::Path, seqs: &[NucleotideSequence]) {
    let file = std::fs::File::create(path).expect("writable test dir");
    findna::seqcore::write_fasta(std::io::BufWriter::new(file), seqs).expect("fasta write");
}

/// Write a labeled dataset as the `sequence,label` CSV the CLI reads.
pub fn write_dataset_csv(path: &std::path::Path, data: &LabeledDataset) {
    use std::io::Write;
    let mut f = std::fs::File::create(path).expect("writable test dir");
    writeln!(f, "sequence,label").unwrap();
    for (seq, label) in &data.records {
        writeln!(f, "{},{label}", seq.bases()).unwrap();
    }
}
