//! Word error rate, per-language aggregation and report tables.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Edit counts of one alignment or of a whole language.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Fraction in [0, inf); zero references give zero.
    pub fn rate(&self) -> f64 {
        if self.ref_words == 0 {
            0.0
        } else {
            self.errors() as f64 / self.ref_words as f64
        }
    }

    pub fn add(&mut self, o: &EditCounts) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
        self.ref_words += o.ref_words;
    }
}

/// Levenshtein alignment with unit costs. Among minimal alignments the
/// backtrace prefers a substitution (or match), then a deletion, then an
/// insertion.
pub fn wer<S: AsRef<str>>(reference: &[S], hyp: &[S]) -> Result<EditCounts> {
    if reference.is_empty() {
        return Err(Error::invalid("empty reference"));
    }
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hyp[j - 1].as_ref();
            let diag = d[(i - 1) * w + j - 1] + usize::from(!same);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }
    let mut c = EditCounts {
        ref_words: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hyp[j - 1].as_ref();
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                c.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    Ok(c)
}

/// Scoring units: whitespace-separated words, or characters for
/// logographic languages.
pub fn scoring_units(text: &str, logographic: bool) -> Vec<String> {
    if logographic {
        text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect()
    } else {
        text.split_whitespace().map(String::from).collect()
    }
}

/// Unweighted mean over languages.
pub fn aggregate(per_language: &[f64]) -> Result<f64> {
    if per_language.is_empty() {
        return Err(Error::invalid("no languages to aggregate"));
    }
    Ok(per_language.iter().sum::<f64>() / per_language.len() as f64)
}

/// Percent reduction from `baseline` to `new`.
pub fn relative_improvement(baseline: f64, new: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::invalid(format!("baseline WER {baseline} must be positive")));
    }
    Ok(100.0 * (baseline - new) / baseline)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageRow {
    pub language: String,
    pub counts: EditCounts,
    /// Percent.
    pub wer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WerReport {
    pub model_id: String,
    pub param_count: Option<u64>,
    pub languages: Vec<LanguageRow>,
}

impl WerReport {
    /// Report from already-computed percentages, as printed in a table.
    pub fn from_wers(model_id: &str, param_count: Option<u64>, rows: &[(&str, f64)]) -> Self {
        Self {
            model_id: model_id.into(),
            param_count,
            languages: rows
                .iter()
                .map(|&(l, w)| LanguageRow {
                    language: l.into(),
                    counts: EditCounts::default(),
                    wer: w,
                })
                .collect(),
        }
    }

    pub fn avg_wer(&self) -> Result<f64> {
        aggregate(&self.languages.iter().map(|r| r.wer).collect::<Vec<_>>())
    }

    /// Companion file: `language, S, I, D, ref_words, wer` plus an average
    /// row.
    pub fn to_tsv(&self) -> Result<String> {
        let mut s = String::from("language\tS\tI\tD\tref_words\twer\n");
        for r in &self.languages {
            let c = &r.counts;
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{:.4}",
                r.language, c.substitutions, c.insertions, c.deletions, c.ref_words, r.wer
            );
        }
        let _ = writeln!(s, "avg\t\t\t\t\t{:.4}", self.avg_wer()?);
        Ok(s)
    }
}

/// One utterance to score.
#[derive(Clone, Debug)]
pub struct ScoredPair<'a> {
    pub language: &'a str,
    pub reference: &'a str,
    pub hypothesis: &'a str,
    pub logographic: bool,
}

/// Score utterances in parallel, then fold per language in first-seen
/// order.
pub fn score_corpus(model_id: &str, param_count: Option<u64>, pairs: &[ScoredPair<'_>]) -> Result<WerReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("nothing to score"));
    }
    let counts: Vec<EditCounts> = pairs
        .par_iter()
        .map(|p| {
            wer(
                &scoring_units(p.reference, p.logographic),
                &scoring_units(p.hypothesis, p.logographic),
            )
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<&str> = Vec::new();
    let mut totals: HashMap<&str, EditCounts> = HashMap::new();
    for (p, c) in pairs.iter().zip(&counts) {
        totals
            .entry(p.language)
            .or_insert_with(|| {
                order.push(p.language);
                EditCounts::default()
            })
            .add(c);
    }
    Ok(WerReport {
        model_id: model_id.into(),
        param_count,
        languages: order
            .into_iter()
            .map(|l| LanguageRow {
                language: l.into(),
                counts: totals[l],
                wer: 100.0 * totals[l].rate(),
            })
            .collect(),
    })
}

fn format_size(n: u64) -> String {
    if n >= 1_000_000_000 {
        format!("{:.1}B", n as f64 / 1e9)
    } else if n >= 1_000_000 {
        format!("{}M", (n as f64 / 1e6).round())
    } else if n >= 1_000 {
        format!("{}K", (n as f64 / 1e3).round())
    } else {
        n.to_string()
    }
}

/// Side-by-side table: one row per language, then the average and the
/// model size.
pub fn render_table(reports: &[WerReport]) -> Result<String> {
    let first = reports.first().ok_or_else(|| Error::invalid("no reports to render"))?;
    let langs: Vec<&str> = first.languages.iter().map(|r| r.language.as_str()).collect();
    for r in reports {
        let these: Vec<&str> = r.languages.iter().map(|l| l.language.as_str()).collect();
        if these != langs {
            return Err(Error::invalid(format!("report {} has a different language set", r.model_id)));
        }
    }
    let label_w = langs.iter().map(|l| l.chars().count()).max().unwrap_or(0).max("Avg. WER".len());
    let col_w = reports.iter().map(|r| r.model_id.chars().count()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = write!(s, "{:<label_w$}", "Language");
    for r in reports {
        let _ = write!(s, " | {:>col_w$}", r.model_id);
    }
    s.push('\n');
    let _ = writeln!(s, "{}", "-".repeat(label_w + reports.len() * (col_w + 3)));
    for (i, l) in langs.iter().enumerate() {
        let _ = write!(s, "{l:<label_w$}");
        for r in reports {
            let _ = write!(s, " | {:>col_w$.2}", r.languages[i].wer);
        }
        s.push('\n');
    }
    let _ = write!(s, "{:<label_w$}", "Avg. WER");
    for r in reports {
        let _ = write!(s, " | {:>col_w$.2}", r.avg_wer()?);
    }
    s.push('\n');
    let _ = write!(s, "{:<label_w$}", "Size");
    for r in reports {
        let size = r.param_count.map(format_size).unwrap_or_else(|| "-".into());
        let _ = write!(s, " | {size:>col_w$}");
    }
    s.push('\n');
    Ok(s)
}

/// Parse a WER grid: header `language<TAB>model...`, then one row per
/// language. An optional `size` row gives parameter counts.
pub fn parse_wer_grid(text: &str) -> Result<Vec<WerReport>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::format("WER grid", "empty input"))?;
    let models: Vec<&str> = header.split('\t').skip(1).collect();
    if models.is_empty() {
        return Err(Error::format("WER grid", "header names no models"));
    }
    let mut reports: Vec<WerReport> = models
        .iter()
        .map(|m| WerReport::from_wers(m, None, &[]))
        .collect();
    for line in lines {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != models.len() + 1 {
            return Err(Error::format("WER grid", format!("row {line:?} has the wrong width")));
        }
        for (r, v) in reports.iter_mut().zip(&f[1..]) {
            if f[0] == "size" {
                r.param_count = Some(
                    v.parse()
                        .map_err(|_| Error::format("WER grid", format!("bad size {v:?}")))?,
                );
                continue;
            }
            let wer: f64 = v
                .parse()
                .map_err(|_| Error::format("WER grid", format!("bad WER {v:?}")))?;
            r.languages.push(LanguageRow {
                language: f[0].into(),
                counts: EditCounts::default(),
                wer,
            });
        }
    }
    Ok(reports)
}
