//! Nucleotide alphabet handling, one-hot encoding, corpus ingestion and
//! fixed-length window sampling.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Clean nucleotide symbols in column order of the one-hot encoding.
pub const ALPHABET: [u8; 5] = [b'A', b'C', b'G', b'T', b'N'];

/// One-hot width: A, C, G, T, N.
pub const ONE_HOT_WIDTH: usize = 5;

/// Glyph produced when decoding an all-zero (masked) row.
pub const MASK_GLYPH: char = '\u{b7}'; // '·'

#[derive(Debug, Error)]
pub enum SeqError {
    #[error("invalid base '{base}' at position {pos}")]
    InvalidBase { pos: usize, base: char },
    #[error("empty sequence{}", id.as_ref().map(|i| format!(" '{i}'")).unwrap_or_default())]
    EmptySequence { id: Option<String> },
    #[error("{path}:{line}: {msg}")]
    FastaParse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path} row {row}: {msg}")]
    CsvParse {
        path: String,
        row: usize,
        msg: String,
    },
    #[error("row {row} is not a one-hot or mask indicator")]
    BadIndicatorRow { row: usize },
    #[error("no source sequence is at least {window} bases long")]
    NoWindowSource { window: usize },
    #[error("window length must be >= 1")]
    ZeroWindow,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn base_index(b: u8) -> Option<usize> {
    match b {
        b'A' => Some(0),
        b'C' => Some(1),
        b'G' => Some(2),
        b'T' => Some(3),
        b'N' => Some(4),
        _ => None,
    }
}

/// IUPAC ambiguity codes other than N; coercible to N on request.
fn is_ambiguity_code(b: u8) -> bool {
    matches!(
        b,
        b'R' | b'Y' | b'S' | b'W' | b'K' | b'M' | b'B' | b'D' | b'H' | b'V'
    )
}

/// A validated DNA sequence over {A,C,G,T,N} with an identifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NucleotideSequence {
    id: String,
    bases: String,
}

impl NucleotideSequence {
    pub fn new(id: impl Into<String>, bases: impl Into<String>) -> Result<Self, SeqError> {
        let id = id.into();
        let bases = bases.into();
        if bases.is_empty() {
            return Err(SeqError::EmptySequence { id: Some(id) });
        }
        for (pos, b) in bases.bytes().enumerate() {
            if base_index(b).is_none() {
                return Err(SeqError::InvalidBase {
                    pos,
                    base: b as char,
                });
            }
        }
        Ok(Self { id, bases })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn bases(&self) -> &str {
        &self.bases
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        false // length >= 1 by construction
    }
}

/// Row-major L x 5 real matrix. Rows are clean one-hot indicators, all-zero
/// mask rows, or (after noise augmentation) arbitrary real rows.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotMatrix {
    len: usize,
    data: Vec<f64>,
}

impl OneHotMatrix {
    pub fn from_rows(data: Vec<f64>) -> Self {
        assert!(
            data.len() % ONE_HOT_WIDTH == 0,
            "row data must be a multiple of {ONE_HOT_WIDTH}"
        );
        Self {
            len: data.len() / ONE_HOT_WIDTH,
            data,
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            data: vec![0.0; len * ONE_HOT_WIDTH],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * ONE_HOT_WIDTH..(j + 1) * ONE_HOT_WIDTH]
    }

    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * ONE_HOT_WIDTH..(j + 1) * ONE_HOT_WIDTH]
    }

    /// True when every row is a clean one-hot indicator or an all-zero mask row.
    pub fn is_clean(&self) -> bool {
        (0..self.len).all(|j| classify_row(self.row(j)).is_some())
    }
}

/// Some(Some(col)) for a one-hot row, Some(None) for a mask row, None otherwise.
fn classify_row(row: &[f64]) -> Option<Option<usize>> {
    let mut hot = None;
    for (d, &x) in row.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        if x == 1.0 && hot.is_none() {
            hot = Some(d);
        } else {
            return None;
        }
    }
    Some(hot)
}

/// One-hot encode a sequence: row j is the indicator of base j, N in column 4.
pub fn encode_one_hot(seq: &NucleotideSequence) -> OneHotMatrix {
    let mut m = OneHotMatrix::zeros(seq.len());
    for (j, b) in seq.bases().bytes().enumerate() {
        let d = base_index(b).expect("NucleotideSequence is validated");
        m.row_mut(j)[d] = 1.0;
    }
    m
}

/// Inverse of [`encode_one_hot`] on clean rows; all-zero rows decode to '·'.
pub fn decode_one_hot(m: &OneHotMatrix) -> Result<String, SeqError> {
    let mut out = String::with_capacity(m.len());
    for j in 0..m.len() {
        match classify_row(m.row(j)) {
            Some(Some(d)) => out.push(ALPHABET[d] as char),
            Some(None) => out.push(MASK_GLYPH),
            None => return Err(SeqError::BadIndicatorRow { row: j }),
        }
    }
    Ok(out)
}

/// Options controlling FASTA ingestion.
#[derive(Debug, Clone, Copy, Default)]
pub struct FastaOptions {
    /// Map IUPAC ambiguity codes (R, Y, ...) to N instead of rejecting them.
    pub coerce_ambiguous_to_n: bool,
}

pub fn parse_fasta(path: impl AsRef<Path>) -> Result<Vec<NucleotideSequence>, SeqError> {
    parse_fasta_with(path, FastaOptions::default())
}

pub fn parse_fasta_with(
    path: impl AsRef<Path>,
    opts: FastaOptions,
) -> Result<Vec<NucleotideSequence>, SeqError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let file = File::open(path).map_err(|source| SeqError::Io {
        path: path_str.clone(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut records = Vec::new();
    let mut current: Option<(String, String, usize)> = None; // id, bases, header line

    let flush = |records: &mut Vec<NucleotideSequence>,
                 current: Option<(String, String, usize)>,
                 path_str: &str|
     -> Result<(), SeqError> {
        if let Some((id, bases, header_line)) = current {
            if bases.is_empty() {
                return Err(SeqError::FastaParse {
                    path: path_str.to_string(),
                    line: header_line,
                    msg: format!("record '{id}' has no sequence data"),
                });
            }
            records.push(NucleotideSequence { id, bases });
        }
        Ok(())
    };

    for (lineno0, line) in reader.lines().enumerate() {
        let lineno = lineno0 + 1;
        let line = line.map_err(|source| SeqError::Io {
            path: path_str.clone(),
            source,
        })?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            flush(&mut records, current.take(), &path_str)?;
            let id = header.split_whitespace().next().unwrap_or("").to_string();
            if id.is_empty() {
                return Err(SeqError::FastaParse {
                    path: path_str.clone(),
                    line: lineno,
                    msg: "header has no identifier".into(),
                });
            }
            current = Some((id, String::new(), lineno));
        } else {
            let Some((_, bases, _)) = current.as_mut() else {
                return Err(SeqError::FastaParse {
                    path: path_str.clone(),
                    line: lineno,
                    msg: "sequence data before any '>' header".into(),
                });
            };
            for ch in line.bytes() {
                let up = ch.to_ascii_uppercase();
                if base_index(up).is_some() {
                    bases.push(up as char);
                } else if opts.coerce_ambiguous_to_n && is_ambiguity_code(up) {
                    bases.push('N');
                } else {
                    return Err(SeqError::FastaParse {
                        path: path_str.clone(),
                        line: lineno,
                        msg: format!("illegal character '{}'", ch as char),
                    });
                }
            }
        }
    }
    flush(&mut records, current.take(), &path_str)?;
    if records.is_empty() {
        return Err(SeqError::FastaParse {
            path: path_str,
            line: 0,
            msg: "no records".into(),
        });
    }
    Ok(records)
}

/// Serialize records in the same grammar `parse_fasta` accepts (60-column wrap).
pub fn write_fasta<W: Write>(mut w: W, records: &[NucleotideSequence]) -> std::io::Result<()> {
    for rec in records {
        writeln!(w, ">{}", rec.id())?;
        for chunk in rec.bases().as_bytes().chunks(60) {
            w.write_all(chunk)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Sequences with integer class labels for downstream tasks.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub records: Vec<(NucleotideSequence, usize)>,
    pub num_classes: usize,
}

/// Load a two-column `sequence,label` CSV into a validated dataset.
pub fn load_labeled_csv(
    path: impl AsRef<Path>,
    num_classes: usize,
) -> Result<LabeledDataset, SeqError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    assert!(num_classes >= 2, "num_classes must be >= 2");

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| SeqError::CsvParse {
            path: path_str.clone(),
            row: 0,
            msg: e.to_string(),
        })?;

    {
        let headers = reader.headers().map_err(|e| SeqError::CsvParse {
            path: path_str.clone(),
            row: 0,
            msg: e.to_string(),
        })?;
        let cols: Vec<&str> = headers.iter().collect();
        if cols != ["sequence", "label"] {
            return Err(SeqError::CsvParse {
                path: path_str,
                row: 0,
                msg: format!("expected header 'sequence,label', found {cols:?}"),
            });
        }
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let rownum = i + 1;
        let row = row.map_err(|e| SeqError::CsvParse {
            path: path_str.clone(),
            row: rownum,
            msg: e.to_string(),
        })?;
        if row.len() != 2 {
            return Err(SeqError::CsvParse {
                path: path_str.clone(),
                row: rownum,
                msg: format!("expected 2 fields, found {}", row.len()),
            });
        }
        let seq = NucleotideSequence::new(format!("row{rownum}"), row[0].to_ascii_uppercase())
            .map_err(|e| SeqError::CsvParse {
                path: path_str.clone(),
                row: rownum,
                msg: e.to_string(),
            })?;
        let label: usize = row[1].trim().parse().map_err(|_| SeqError::CsvParse {
            path: path_str.clone(),
            row: rownum,
            msg: format!("label '{}' is not a nonnegative integer", &row[1]),
        })?;
        if label >= num_classes {
            return Err(SeqError::CsvParse {
                path: path_str.clone(),
                row: rownum,
                msg: format!("label {label} out of range for {num_classes} classes"),
            });
        }
        records.push((seq, label));
    }
    if records.is_empty() {
        return Err(SeqError::CsvParse {
            path: path_str,
            row: 0,
            msg: "no records".into(),
        });
    }
    Ok(LabeledDataset {
        records,
        num_classes,
    })
}

/// Uniformly sample `count` windows of exact length `window`, with replacement,
/// weighted by available start positions across the source sequences.
pub fn sample_windows(
    genome: &[NucleotideSequence],
    window: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<NucleotideSequence>, SeqError> {
    if window == 0 {
        return Err(SeqError::ZeroWindow);
    }
    // (source index, number of valid start positions), cumulative
    let mut cum = Vec::with_capacity(genome.len());
    let mut total: u64 = 0;
    for (i, seq) in genome.iter().enumerate() {
        if seq.len() >= window {
            total += (seq.len() - window + 1) as u64;
            cum.push((i, total));
        }
    }
    if total == 0 {
        return Err(SeqError::NoWindowSource { window });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let pick = rng.gen_range(0..total);
        let slot = cum.partition_point(|&(_, c)| c <= pick);
        let (src_idx, upper) = cum[slot];
        let src = &genome[src_idx];
        let starts = (src.len() - window + 1) as u64;
        let start = (pick - (upper - starts)) as usize;
        let bases = &src.bases()[start..start + window];
        out.push(NucleotideSequence {
            id: format!("{}:{}-{}#{}", src.id(), start, start + window, k),
            bases: bases.to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(bases: &str) -> NucleotideSequence {
        NucleotideSequence::new("t", bases).unwrap()
    }

    #[test]
    fn encode_single_bases() {
        assert_eq!(encode_one_hot(&seq("A")).data(), &[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(encode_one_hot(&seq("N")).data(), &[0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn encode_alphabet_is_identity() {
        let m = encode_one_hot(&seq("ACGTN"));
        for j in 0..5 {
            for d in 0..5 {
                assert_eq!(m.row(j)[d], if j == d { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn decode_identity_and_mask() {
        let m = encode_one_hot(&seq("ACGTN"));
        assert_eq!(decode_one_hot(&m).unwrap(), "ACGTN");
        let z = OneHotMatrix::zeros(1);
        assert_eq!(decode_one_hot(&z).unwrap(), MASK_GLYPH.to_string());
    }

    #[test]
    fn decode_rejects_non_indicator_rows() {
        let m = OneHotMatrix::from_rows(vec![0.5, 0.5, 0.0, 0.0, 0.0]);
        assert!(matches!(
            decode_one_hot(&m),
            Err(SeqError::BadIndicatorRow { row: 0 })
        ));
    }

    #[test]
    fn invalid_base_reports_position() {
        let err = NucleotideSequence::new("x", "ACXG").unwrap_err();
        match err {
            SeqError::InvalidBase { pos, base } => {
                assert_eq!(pos, 2);
                assert_eq!(base, 'X');
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn fasta_multiline_concatenation() {
        let f = write_tmp(">x\nAC\nGT\n");
        let recs = parse_fasta(f.path()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].id(), "x");
        assert_eq!(recs[0].bases(), "ACGT");
    }

    #[test]
    fn fasta_two_records_and_lowercase() {
        let f = write_tmp(">a\naa\n>b\nCc\n");
        let recs = parse_fasta(f.path()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].bases(), "AA");
        assert_eq!(recs[1].bases(), "CC");
    }

    #[test]
    fn fasta_illegal_character_reports_line() {
        let f = write_tmp(">x\nAXGT\n");
        match parse_fasta(f.path()) {
            Err(SeqError::FastaParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn fasta_ambiguity_codes_rejected_unless_coerced() {
        let f = write_tmp(">x\nARGT\n");
        assert!(parse_fasta(f.path()).is_err());
        let recs = parse_fasta_with(
            f.path(),
            FastaOptions {
                coerce_ambiguous_to_n: true,
            },
        )
        .unwrap();
        assert_eq!(recs[0].bases(), "ANGT");
    }

    #[test]
    fn fasta_empty_record_is_error() {
        let f = write_tmp(">x\n>y\nAC\n");
        assert!(parse_fasta(f.path()).is_err());
    }

    #[test]
    fn labeled_csv_roundtrip_and_range_check() {
        let f = write_tmp("sequence,label\nACGT,0\n");
        let ds = load_labeled_csv(f.path(), 2).unwrap();
        assert_eq!(ds.records.len(), 1);
        assert_eq!(ds.records[0].1, 0);

        let f = write_tmp("sequence,label\nACGT,2\n");
        assert!(load_labeled_csv(f.path(), 2).is_err());

        let f = write_tmp("sequence,label\n");
        match load_labeled_csv(f.path(), 2) {
            Err(SeqError::CsvParse { msg, .. }) => assert!(msg.contains("no records")),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn windows_deterministic_exact_length() {
        let genome = vec![seq("ACGTACGTACGT"), seq("TTTTTT")];
        let a = sample_windows(&genome, 6, 20, 7).unwrap();
        let b = sample_windows(&genome, 6, 20, 7).unwrap();
        assert_eq!(a.len(), 20);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.bases(), y.bases());
            assert_eq!(x.bases().len(), 6);
        }
    }

    #[test]
    fn window_equal_to_source_is_unique_choice() {
        let genome = vec![seq("ACGT")];
        let ws = sample_windows(&genome, 4, 5, 1).unwrap();
        assert!(ws.iter().all(|w| w.bases() == "ACGT"));
    }

    #[test]
    fn windows_need_a_long_enough_source() {
        let genome = vec![seq("ACG")];
        assert!(matches!(
            sample_windows(&genome, 4, 1, 0),
            Err(SeqError::NoWindowSource { window: 4 })
        ));
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(bases in "[ACGTN]{1,200}") {
            let s = seq(&bases);
            let m = encode_one_hot(&s);
            prop_assert_eq!(decode_one_hot(&m).unwrap(), bases);
            for j in 0..m.len() {
                let sum: f64 = m.row(j).iter().sum();
                prop_assert_eq!(sum, 1.0);
            }
        }

        #[test]
        fn fasta_parse_serialize_parse_is_identity(
            recs in prop::collection::vec(("[a-z][a-z0-9]{0,8}", "[ACGTN]{1,150}"), 1..6)
        ) {
            let records: Vec<NucleotideSequence> = recs
                .iter()
                .enumerate()
                .map(|(i, (id, b))| NucleotideSequence::new(format!("{id}{i}"), b.clone()).unwrap())
                .collect();
            let mut buf = Vec::new();
            write_fasta(&mut buf, &records).unwrap();
            let mut f = tempfile::NamedTempFile::new().unwrap();
            f.write_all(&buf).unwrap();
            f.flush().unwrap();
            let reparsed = parse_fasta(f.path()).unwrap();
            prop_assert_eq!(records, reparsed);
        }

        #[test]
        fn sampled_windows_have_exact_length(window in 1usize..20, seed in 0u64..50) {
            let genome = vec![seq("ACGTACGTACGTACGTACGTNNNACGT")];
            let ws = sample_windows(&genome, window, 10, seed).unwrap();
            prop_assert!(ws.iter().all(|w| w.len() == window));
        }
    }
}
