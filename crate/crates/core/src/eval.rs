//! Exact-match scoring, the 4x4 instruction matrix, and the error taxonomy.
//!
//! Wrong predictions are classified into four mutually exclusive categories by
//! fixed precedence: entity fragmentation (partial or corrupted entity),
//! data asymmetry (the query entity is echoed), relationship sparsity (output
//! unrelated to both entities), and a residual "other" so the partition is
//! total.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{DataRecord, DatasetSplit, Direction};
use crate::infer::{decode, extract_answer, DecodeConfig};
use crate::model::Denoiser;
use crate::vocab::{detokenize, split_surface_words, split_text, Vocabulary};
use crate::{Error, Result};

/// Case-insensitive exact match over normalized strings.
pub fn exact_match(prediction: &str, gold: &str) -> bool {
    extract_answer(prediction).eq_ignore_ascii_case(&extract_answer(gold))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    Fragmentation,
    Asymmetry,
    Sparsity,
    Other,
}

impl ErrorType {
    pub const ALL: [ErrorType; 4] = [
        ErrorType::Fragmentation,
        ErrorType::Asymmetry,
        ErrorType::Sparsity,
        ErrorType::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ErrorType::Fragmentation => "fragmentation",
            ErrorType::Asymmetry => "asymmetry",
            ErrorType::Sparsity => "sparsity",
            ErrorType::Other => "other",
        }
    }
}

/// Classify a wrong prediction. Precedence:
///
/// 1. fragmentation - the prediction's tokens are a nonempty proper
///    sub-multiset of the gold entity's tokens, or the prediction matches the
///    gold word-for-word except for exactly one corrupted (out-of-vocabulary)
///    word;
/// 2. asymmetry - the prediction contains the query entity's surface;
/// 3. sparsity - the prediction shares no word with either entity;
/// 4. other - the residual.
pub fn classify_error(
    prediction: &str,
    gold_entity: &str,
    query_entity: &str,
    vocab: &Vocabulary,
) -> ErrorType {
    let pred = extract_answer(prediction);
    let gold = extract_answer(gold_entity);
    let query = extract_answer(query_entity);

    // 1a: proper token sub-multiset of the gold entity.
    if let (Some(pred_toks), Some(gold_toks)) = (vocab_tokens(&pred, vocab), vocab_tokens(&gold, vocab)) {
        if !pred_toks.is_empty() && is_proper_submultiset(&pred_toks, &gold_toks) {
            return ErrorType::Fragmentation;
        }
    }
    // 1b: equal length with exactly one corrupted word. Corruption means the
    // word is not in the vocabulary even ignoring case; mere case variants of
    // known words are not corruptions.
    let pred_words = split_surface_words(&pred);
    let gold_words = split_surface_words(&gold);
    if pred_words.len() == gold_words.len() {
        let diffs: Vec<usize> = (0..pred_words.len())
            .filter(|&i| !pred_words[i].eq_ignore_ascii_case(&gold_words[i]))
            .collect();
        if diffs.len() == 1 && word_is_corrupted(&pred_words[diffs[0]], vocab) {
            return ErrorType::Fragmentation;
        }
    }
    // 2: echo of the query entity.
    if !query.is_empty() && pred.to_ascii_lowercase().contains(&query.to_ascii_lowercase()) {
        return ErrorType::Asymmetry;
    }
    // 3: no lexical overlap with either entity.
    let query_words = split_surface_words(&query);
    let overlaps = pred_words.iter().any(|w| {
        gold_words.iter().chain(query_words.iter()).any(|g| g.eq_ignore_ascii_case(w))
    });
    if !overlaps {
        return ErrorType::Sparsity;
    }
    ErrorType::Other
}

/// Tokenize against the vocabulary; None if any token is unknown.
fn vocab_tokens(text: &str, vocab: &Vocabulary) -> Option<Vec<String>> {
    let toks = split_text(text);
    if toks.iter().all(|t| vocab.id(&t.text).is_some()) {
        Some(toks.into_iter().map(|t| t.text).collect())
    } else {
        None
    }
}

/// A word whose token pieces are absent from the vocabulary even under a
/// case-insensitive comparison.
fn word_is_corrupted(word: &str, vocab: &Vocabulary) -> bool {
    split_text(word).iter().any(|t| {
        vocab.id(&t.text).is_none() && !vocab.contains_ignore_case(&t.text)
    })
}

fn is_proper_submultiset(small: &[String], big: &[String]) -> bool {
    if small.len() >= big.len() {
        return false;
    }
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for t in big {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    for t in small {
        let c = counts.entry(t.as_str()).or_insert(0);
        *c -= 1;
        if *c < 0 {
            return false;
        }
    }
    true
}

/// One evaluated QA case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRecord {
    pub fact_id: u64,
    pub train_template: Direction,
    pub query_template: Direction,
    pub prediction: String,
    pub gold: String,
    pub correct: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_type: Option<ErrorType>,
}

/// Exact-match accuracy per (training template, query template) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub train_templates: Vec<Direction>,
    pub query_templates: Vec<Direction>,
    /// Percent accuracies keyed "train/query".
    pub cells: BTreeMap<String, f64>,
    pub n_per_cell: usize,
}

impl EvalMatrix {
    pub fn cell(&self, train: Direction, query: Direction) -> Option<f64> {
        self.cells
            .get(&format!("{}/{}", train.label(), query.label()))
            .copied()
    }
}

/// Error-rate breakdown over one set of cases, in percent of all cases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub total_cases: usize,
    pub total_error_rate: f64,
    pub fragmentation: f64,
    pub asymmetry: f64,
    pub sparsity: f64,
    pub other: f64,
}

impl ErrorBreakdown {
    pub fn from_cases<'a>(cases: impl IntoIterator<Item = &'a CaseRecord>) -> ErrorBreakdown {
        let mut total = 0usize;
        let mut counts: BTreeMap<ErrorType, usize> = BTreeMap::new();
        let mut wrong = 0usize;
        for case in cases {
            total += 1;
            if !case.correct {
                wrong += 1;
                let ty = case.error_type.unwrap_or(ErrorType::Other);
                *counts.entry(ty).or_insert(0) += 1;
            }
        }
        let pct = |n: usize| {
            if total == 0 {
                0.0
            } else {
                100.0 * n as f64 / total as f64
            }
        };
        ErrorBreakdown {
            total_cases: total,
            total_error_rate: pct(wrong),
            fragmentation: pct(counts.get(&ErrorType::Fragmentation).copied().unwrap_or(0)),
            asymmetry: pct(counts.get(&ErrorType::Asymmetry).copied().unwrap_or(0)),
            sparsity: pct(counts.get(&ErrorType::Sparsity).copied().unwrap_or(0)),
            other: pct(counts.get(&ErrorType::Other).copied().unwrap_or(0)),
        }
    }

    /// Categories partition the errors: their percentages sum to the total.
    pub fn is_consistent(&self) -> bool {
        (self.fragmentation + self.asymmetry + self.sparsity + self.other
            - self.total_error_rate)
            .abs()
            <= 0.01
    }
}

/// The gold answer and prompt-side query entity of a QA evaluation record.
pub fn record_gold_and_query(record: &DataRecord, vocab: &Vocabulary) -> Result<(String, String)> {
    let seq = crate::corpus::encode_record(record, vocab)?;
    let gold = extract_answer(&detokenize(&seq.ids[record.prompt_len..], vocab)?);
    let query_span = record
        .entity_spans
        .iter()
        .find(|s| s.end < record.prompt_len)
        .ok_or_else(|| Error::Corpus(format!("no prompt entity in {:?}", record.text)))?;
    let query = detokenize(&seq.ids[query_span.start..=query_span.end], vocab)?;
    Ok((gold, query))
}

/// Decode and score every record of a QA evaluation split with one model.
pub fn evaluate_cases(
    model: &Denoiser,
    train_template: Direction,
    qa_eval: &DatasetSplit,
    vocab: &Vocabulary,
    decode_cfg: &DecodeConfig,
) -> Result<Vec<CaseRecord>> {
    let mut cases = Vec::with_capacity(qa_eval.records.len());
    for record in &qa_eval.records {
        let seq = crate::corpus::encode_record(record, vocab)?;
        let (gold, query) = record_gold_and_query(record, vocab)?;
        let decoded = decode(model, &seq.ids[..record.prompt_len], decode_cfg, vocab)?;
        let prediction = extract_answer(&decoded.text);
        let correct = exact_match(&prediction, &gold);
        let error_type =
            (!correct).then(|| classify_error(&prediction, &gold, &query, vocab));
        cases.push(CaseRecord {
            fact_id: record.triple_ref,
            train_template,
            query_template: record.direction,
            prediction,
            gold,
            correct,
            error_type,
        });
    }
    Ok(cases)
}

/// Evaluate one checkpoint per training template over the full instruction
/// matrix. Returns the 16-cell matrix and every per-case record.
pub fn run_matrix(
    models: &BTreeMap<Direction, Denoiser>,
    qa_eval: &DatasetSplit,
    vocab: &Vocabulary,
    decode_cfg: &DecodeConfig,
) -> Result<(EvalMatrix, Vec<CaseRecord>)> {
    for dir in Direction::ALL {
        if !models.contains_key(&dir) {
            return Err(Error::MissingCheckpoint(dir.label().to_string()));
        }
    }
    let mut all_cases = Vec::new();
    for dir in Direction::ALL {
        let cases = evaluate_cases(&models[&dir], dir, qa_eval, vocab, decode_cfg)?;
        all_cases.extend(cases);
    }
    let matrix = matrix_from_cases(&all_cases)?;
    Ok((matrix, all_cases))
}

/// Aggregate per-case records into the accuracy matrix. Also usable as an
/// independent recount of a matrix produced elsewhere.
pub fn matrix_from_cases(cases: &[CaseRecord]) -> Result<EvalMatrix> {
    let mut hit: BTreeMap<(Direction, Direction), usize> = BTreeMap::new();
    let mut n: BTreeMap<(Direction, Direction), usize> = BTreeMap::new();
    for case in cases {
        let key = (case.train_template, case.query_template);
        *n.entry(key).or_insert(0) += 1;
        if case.correct {
            *hit.entry(key).or_insert(0) += 1;
        }
    }
    let mut cells = BTreeMap::new();
    let mut n_per_cell = 0;
    for train in Direction::ALL {
        for query in Direction::ALL {
            let count = n.get(&(train, query)).copied().unwrap_or(0);
            if count == 0 {
                continue;
            }
            n_per_cell = count;
            let correct = hit.get(&(train, query)).copied().unwrap_or(0);
            cells.insert(
                format!("{}/{}", train.label(), query.label()),
                100.0 * correct as f64 / count as f64,
            );
        }
    }
    Ok(EvalMatrix {
        train_templates: Direction::ALL.to_vec(),
        query_templates: Direction::ALL.to_vec(),
        cells,
        n_per_cell,
    })
}

// ---------------------------------------------------------------------------
// Full-scale reference annotations
// ---------------------------------------------------------------------------

/// Published results from the original study at 8B scale, recorded purely as
/// annotations for orientation. Desk-scale runs are not expected to match
/// them; the qualitative pattern (strong diagonal, collapsed reverse column)
/// is the point of comparison. Row/column order: forward, paraphrase,
/// rev-paraphrase, reverse.
pub const FULL_SCALE_BASELINE_MATRIX: [[f64; 4]; 4] = [
    [92.00, 24.45, 24.92, 46.73],
    [6.15, 83.28, 13.28, 0.26],
    [10.44, 14.14, 82.68, 19.76],
    [47.85, 0.99, 12.03, 94.84],
];

pub const FULL_SCALE_MITIGATED_MATRIX: [[f64; 4]; 4] = [
    [97.75, 28.08, 26.31, 49.83],
    [12.56, 87.24, 15.47, 1.85],
    [12.89, 17.38, 89.56, 22.47],
    [50.89, 1.65, 18.18, 97.88],
];

/// Pilot-study error annotations at full scale: total error rate and the
/// share attributed to entity fragmentation.
pub const FULL_SCALE_PILOT_TOTAL_ERROR: f64 = 53.27;
pub const FULL_SCALE_PILOT_FRAGMENTATION: f64 = 26.97;

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Matrix CSV: header row of query templates, one row per training template,
/// cells as percent with two decimals.
pub fn matrix_csv(matrix: &EvalMatrix) -> String {
    let mut out = String::from("train_template");
    for q in &matrix.query_templates {
        out.push(',');
        out.push_str(q.label());
    }
    out.push('\n');
    for t in &matrix.train_templates {
        let mut row = t.label().to_string();
        let mut any = false;
        for q in &matrix.query_templates {
            row.push(',');
            if let Some(v) = matrix.cell(*t, *q) {
                row.push_str(&format!("{v:.2}"));
                any = true;
            }
        }
        if any {
            out.push_str(&row);
            out.push('\n');
        }
    }
    out
}

pub fn breakdown_csv(breakdowns: &[(String, ErrorBreakdown)]) -> String {
    let mut out = String::from(
        "label,total_cases,total_error_rate,fragmentation,asymmetry,sparsity,other\n",
    );
    for (label, b) in breakdowns {
        out.push_str(&format!(
            "{label},{},{:.2},{:.2},{:.2},{:.2},{:.2}\n",
            b.total_cases, b.total_error_rate, b.fragmentation, b.asymmetry, b.sparsity, b.other
        ));
    }
    out
}

/// Minimal deterministic SVG bar chart of one breakdown.
pub fn breakdown_svg(label: &str, b: &ErrorBreakdown) -> String {
    let bars = [
        ("total", b.total_error_rate),
        ("fragmentation", b.fragmentation),
        ("asymmetry", b.asymmetry),
        ("sparsity", b.sparsity),
        ("other", b.other),
    ];
    let mut out = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"420\" height=\"240\" viewBox=\"0 0 420 240\">\n",
    );
    out.push_str(&format!(
        "<text x=\"10\" y=\"20\" font-family=\"monospace\" font-size=\"14\">{label}</text>\n"
    ));
    for (i, (name, value)) in bars.iter().enumerate() {
        let x = 20 + i * 80;
        let h = (value.max(0.0).min(100.0) * 1.6).round() as i64;
        let y = 200 - h;
        out.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"60\" height=\"{h}\" fill=\"#557799\"/>\n"
        ));
        out.push_str(&format!(
            "<text x=\"{x}\" y=\"216\" font-family=\"monospace\" font-size=\"10\">{name}</text>\n"
        ));
        out.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\">{value:.2}</text>\n",
            (y - 4).max(30)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Reference annotation CSV bundled with every report.
pub fn reference_annotations_csv() -> String {
    let mut out =
        String::from("series,train_template,forward,paraphrase,rev-paraphrase,reverse\n");
    let dirs = Direction::ALL;
    for (name, table) in [
        ("full_scale_baseline", &FULL_SCALE_BASELINE_MATRIX),
        ("full_scale_mitigated", &FULL_SCALE_MITIGATED_MATRIX),
    ] {
        for (i, row) in table.iter().enumerate() {
            out.push_str(&format!(
                "{name},{},{:.2},{:.2},{:.2},{:.2}\n",
                dirs[i].label(),
                row[0],
                row[1],
                row[2],
                row[3]
            ));
        }
    }
    out.push_str(&format!(
        "full_scale_pilot_errors,total={:.2} fragmentation={:.2},,,,\n",
        FULL_SCALE_PILOT_TOTAL_ERROR, FULL_SCALE_PILOT_FRAGMENTATION
    ));
    out
}

/// Write the matrix CSV, breakdown CSV, reference annotations, per-case
/// JSONL, and (optionally) one SVG per breakdown. Byte-deterministic for
/// fixed inputs.
pub fn report(
    matrix: &EvalMatrix,
    breakdowns: &[(String, ErrorBreakdown)],
    cases: &[CaseRecord],
    out_dir: &Path,
    with_charts: bool,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let write = |name: &str, bytes: &[u8]| -> Result<std::path::PathBuf> {
        let path = out_dir.join(name);
        std::fs::write(&path, bytes)?;
        Ok(path)
    };
    written.push(write("matrix.csv", matrix_csv(matrix).as_bytes())?);
    written.push(write("breakdowns.csv", breakdown_csv(breakdowns).as_bytes())?);
    written.push(write(
        "reference_annotations.csv",
        reference_annotations_csv().as_bytes(),
    )?);
    let cases_path = out_dir.join("cases.jsonl");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&cases_path)?);
    for case in cases {
        serde_json::to_writer(&mut out, case)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    written.push(cases_path);
    if with_charts {
        for (label, b) in breakdowns {
            let safe: String = label
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
                .collect();
            written.push(write(
                &format!("breakdown_{safe}.svg"),
                breakdown_svg(label, b).as_bytes(),
            )?);
        }
    }
    Ok(written)
}

pub fn read_cases_jsonl(path: &Path) -> Result<Vec<CaseRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_vocab() -> Vocabulary {
        // Vocabulary over the case-study surfaces: gold and query entities are
        // in-vocabulary, corrupted words are not.
        Vocabulary::from_texts([
            "Charles Schermerhorn",
            "Manny De La Garza",
            "Alana De La Garza",
            "Johnny Depp",
            "Lily-Rose Depp",
            "Betty Sue Palmer",
            "Silas Venn",
            "Mara Venn",
        ])
    }

    #[test]
    fn exact_match_applies_normalization() {
        assert!(exact_match("Silas Venn", "Silas Venn"));
        assert!(!exact_match("Silas", "Silas Venn"));
        assert!(exact_match("silas venn", "Silas Venn"));
        assert!(exact_match("  Silas Venn .", "Silas Venn"));
    }

    #[test]
    fn exact_match_agrees_with_naive_comparator_after_normalization() {
        // Against a naive reference comparator on normalized pairs.
        let pool = ["Silas Venn", "silas venn", " Silas  Venn .", "Mara", "Mara Venn?"];
        for a in pool {
            for b in pool {
                let naive =
                    extract_answer(a).to_ascii_lowercase() == extract_answer(b).to_ascii_lowercase();
                assert_eq!(exact_match(a, b), naive, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn case_study_fixtures_classify_as_expected() {
        let vocab = fixture_vocab();
        // Corrupted multi-token entity.
        assert_eq!(
            classify_error(
                "Charles Bhermerhorn",
                "Charles Schermerhorn",
                "Mara Venn",
                &vocab
            ),
            ErrorType::Fragmentation
        );
        // Query entity echoed verbatim.
        assert_eq!(
            classify_error(
                "Manny De La Garza",
                "Alana De La Garza",
                "Manny De La Garza",
                &vocab
            ),
            ErrorType::Asymmetry
        );
        // Unrelated entity.
        assert_eq!(
            classify_error("Betty Sue Palmer", "Lily-Rose Depp", "Johnny Depp", &vocab),
            ErrorType::Sparsity
        );
    }

    #[test]
    fn classifier_covers_constructed_fixtures() {
        let vocab = fixture_vocab();
        let cases: &[(&str, &str, &str, ErrorType)] = &[
            // Proper token subsets of the gold entity.
            ("Charles", "Charles Schermerhorn", "Mara Venn", ErrorType::Fragmentation),
            ("Schermerhorn", "Charles Schermerhorn", "Mara Venn", ErrorType::Fragmentation),
            ("Scherm", "Charles Schermerhorn", "Mara Venn", ErrorType::Fragmentation),
            ("De La", "Alana De La Garza", "Johnny Depp", ErrorType::Fragmentation),
            ("Depp", "Lily-Rose Depp", "Johnny Depp", ErrorType::Fragmentation),
            // Single corrupted word at equal length.
            ("Mara Vexn", "Mara Venn", "Silas Venn", ErrorType::Fragmentation),
            ("Alana De La Garzq", "Alana De La Garza", "Manny De La Garza", ErrorType::Fragmentation),
            // Echoes of the query entity.
            ("Johnny Depp", "Lily-Rose Depp", "Johnny Depp", ErrorType::Asymmetry),
            ("Silas Venn", "Mara Venn", "Silas Venn", ErrorType::Asymmetry),
            ("the Johnny Depp one", "Lily-Rose Depp", "Johnny Depp", ErrorType::Asymmetry),
            ("manny de la garza", "Alana De La Garza", "Manny De La Garza", ErrorType::Asymmetry),
            // No lexical overlap with either entity.
            ("Betty Sue Palmer", "Mara Venn", "Silas Venn", ErrorType::Sparsity),
            ("Charles", "Mara Venn", "Silas Venn", ErrorType::Sparsity),
            ("", "Mara Venn", "Silas Venn", ErrorType::Sparsity),
            ("Quillenbach", "Lily-Rose Depp", "Johnny Depp", ErrorType::Sparsity),
            // Residual cases: overlap without subset/echo structure.
            ("Venn Mara", "Mara Venn", "Silas Venn", ErrorType::Other),
            ("Mara Venn Palmer", "Mara Venn", "Silas Venn", ErrorType::Other),
            ("Depp Palmer", "Lily-Rose Depp", "Johnny Depp", ErrorType::Other),
            ("Garza Depp", "Alana De La Garza", "Johnny Depp", ErrorType::Other),
            ("Lily-Rose Depp Sue", "Lily-Rose Depp", "Johnny Depp", ErrorType::Other),
        ];
        for (pred, gold, query, want) in cases {
            assert_eq!(
                classify_error(pred, gold, query, &vocab),
                *want,
                "pred {pred:?} gold {gold:?} query {query:?}"
            );
        }
    }

    #[test]
    fn breakdown_partition_sums_to_total() {
        let vocab = fixture_vocab();
        let mut cases = Vec::new();
        let preds = [
            ("Charles", "Charles Schermerhorn", "Mara Venn"),
            ("Johnny Depp", "Lily-Rose Depp", "Johnny Depp"),
            ("Betty Sue Palmer", "Mara Venn", "Silas Venn"),
            ("Venn Mara", "Mara Venn", "Silas Venn"),
        ];
        for (i, (pred, gold, query)) in preds.iter().enumerate() {
            cases.push(CaseRecord {
                fact_id: i as u64,
                train_template: Direction::Forward,
                query_template: Direction::Reverse,
                prediction: pred.to_string(),
                gold: gold.to_string(),
                correct: false,
                error_type: Some(classify_error(pred, gold, query, &vocab)),
            });
        }
        // And some correct ones.
        for i in 4..10 {
            cases.push(CaseRecord {
                fact_id: i as u64,
                train_template: Direction::Forward,
                query_template: Direction::Forward,
                prediction: "Mara Venn".into(),
                gold: "Mara Venn".into(),
                correct: true,
                error_type: None,
            });
        }
        let b = ErrorBreakdown::from_cases(&cases);
        assert!(b.is_consistent());
        assert_eq!(b.total_cases, 10);
        assert!((b.total_error_rate - 40.0).abs() < 1e-9);
    }

    #[test]
    fn matrix_recount_matches() {
        let mut cases = Vec::new();
        for train in Direction::ALL {
            for query in Direction::ALL {
                for i in 0..10u64 {
                    cases.push(CaseRecord {
                        fact_id: i,
                        train_template: train,
                        query_template: query,
                        prediction: String::new(),
                        gold: String::new(),
                        correct: (i as usize) < 5 + (query as usize),
                        error_type: None,
                    });
                }
            }
        }
        let m = matrix_from_cases(&cases).unwrap();
        assert_eq!(m.n_per_cell, 10);
        assert_eq!(m.cell(Direction::Forward, Direction::Forward), Some(50.0));
        assert_eq!(m.cell(Direction::Forward, Direction::Reverse), Some(80.0));
    }

    #[test]
    fn matrix_csv_golden() {
        let mut cells = BTreeMap::new();
        cells.insert("forward/forward".to_string(), 91.25);
        cells.insert("forward/reverse".to_string(), 3.0);
        let m = EvalMatrix {
            train_templates: Direction::ALL.to_vec(),
            query_templates: Direction::ALL.to_vec(),
            cells,
            n_per_cell: 80,
        };
        let got = matrix_csv(&m);
        let want = "train_template,forward,paraphrase,rev-paraphrase,reverse\n\
                    forward,91.25,,,3.00\n";
        assert_eq!(got, want);
    }

    #[test]
    fn empty_matrix_renders_header_only() {
        let m = EvalMatrix {
            train_templates: Direction::ALL.to_vec(),
            query_templates: Direction::ALL.to_vec(),
            cells: BTreeMap::new(),
            n_per_cell: 0,
        };
        assert_eq!(
            matrix_csv(&m),
            "train_template,forward,paraphrase,rev-paraphrase,reverse\n"
        );
    }

    #[test]
    fn report_is_byte_deterministic() {
        let m = EvalMatrix {
            train_templates: Direction::ALL.to_vec(),
            query_templates: Direction::ALL.to_vec(),
            cells: [("forward/forward".to_string(), 100.0)].into_iter().collect(),
            n_per_cell: 1,
        };
        let b = vec![(
            "baseline_reverse".to_string(),
            ErrorBreakdown {
                total_cases: 4,
                total_error_rate: 75.0,
                fragmentation: 25.0,
                asymmetry: 25.0,
                sparsity: 25.0,
                other: 0.0,
            },
        )];
        let cases = vec![CaseRecord {
            fact_id: 0,
            train_template: Direction::Forward,
            query_template: Direction::Forward,
            prediction: "x".into(),
            gold: "x".into(),
            correct: true,
            error_type: None,
        }];
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        report(&m, &b, &cases, d1.path(), true).unwrap();
        report(&m, &b, &cases, d2.path(), true).unwrap();
        for name in [
            "matrix.csv",
            "breakdowns.csv",
            "reference_annotations.csv",
            "cases.jsonl",
            "breakdown_baseline_reverse.svg",
        ] {
            assert_eq!(
                std::fs::read(d1.path().join(name)).unwrap(),
                std::fs::read(d2.path().join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn full_scale_annotations_are_recorded() {
        // Spot anchors of the annotation table.
        assert_eq!(FULL_SCALE_BASELINE_MATRIX[0][0], 92.00);
        assert_eq!(FULL_SCALE_BASELINE_MATRIX[0][2], 24.92);
        assert_eq!(FULL_SCALE_MITIGATED_MATRIX[0][0], 97.75);
        let csv = reference_annotations_csv();
        assert!(csv.contains("92.00"));
        assert!(csv.contains("53.27"));
        assert!(csv.contains("26.97"));
    }
}
