//! Model evaluation: teacher-forced next-token metrics under varying amounts
//! of known history, both perplexity conventions, and a structural validator
//! that scans token streams year by year and reports the first grammar
//! failure.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encode::{LifeSequence, Token, TokenCategory, Vocabulary, EOL_ID, EOY_ID, PAD_ID};
use crate::model::{build_forward, ForwardOpts, ModelParams, Projections};
use crate::{Error, Result};

/// First structural inconsistency found in a token stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    RepeatedEoy,
    EoyNotFollowedByMonth,
    DurationNotFollowedByMonthOrEoy,
    TokenOrderViolation,
    MissingDuration,
}

/// Verdict of the year-by-year scan. `first_failure_year` is 1-based and
/// counted from the scan start; absent exactly when the stream stays valid
/// to its end. `valid_token_len` is the length of the leading prefix made of
/// fully closed, valid years; everything from the failing year on is
/// excluded, matching the rule that tokens after the first failure are
/// disregarded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrammarVerdict {
    pub first_failure_year: Option<u32>,
    pub failure_kind: Option<FailureKind>,
    /// Fully closed years before the failure (or in the whole stream).
    pub valid_years: u32,
    /// Tokens up to and including the last valid year's closer.
    pub valid_token_len: usize,
}

impl GrammarVerdict {
    pub fn is_valid(&self) -> bool {
        self.first_failure_year.is_none()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ValidateOptions {
    /// Also require attribute tokens inside an event to follow the canonical
    /// emission order, each category at most once.
    pub strict_intra_event: bool,
}

/// Canonical intra-event position of a content category; `None` for tokens
/// that may not appear inside an event at all.
fn event_rank(cat: TokenCategory) -> Option<u8> {
    Some(match cat {
        TokenCategory::Type => 0,
        TokenCategory::Income => 1,
        TokenCategory::Title => 2,
        TokenCategory::Province => 3,
        TokenCategory::Sector => 4,
        TokenCategory::FirmSize => 5,
        TokenCategory::PartFull => 6,
        TokenCategory::IntensityWork => 7,
        TokenCategory::IntensitySick => 8,
        TokenCategory::IntensityMaternity => 9,
        _ => return None,
    })
}

enum ScanState {
    /// Expecting the next year's first month; the field notes whether the
    /// previous token closed a year (EOY) or the scan just started.
    YearStart { after_eoy: bool },
    /// Inside an event: month seen, duration still missing.
    InEvent { last_rank: Option<u8> },
    /// Duration seen; expecting another month or the year's closer.
    AfterDuration,
    /// EOL consumed; nothing may follow.
    Ended,
}

/// Scans a token stream year by year and reports the first structural
/// failure. The stream may start with the five background tokens (skipped)
/// or directly at a year boundary, as generated continuations do. A stream
/// that simply ends mid-year is not a failure; the unfinished year is
/// treated as censored by the horizon.
pub fn validate_sequence(tokens: &[Token]) -> GrammarVerdict {
    validate_with(tokens, &ValidateOptions::default())
}

pub fn validate_with(tokens: &[Token], opts: &ValidateOptions) -> GrammarVerdict {
    let n_pad = tokens.iter().rev().take_while(|t| **t == Token::Pad).count();
    let mut toks = &tokens[..tokens.len() - n_pad];
    // A leading background token announces a full encoding; its header is
    // area, sex, birth month, birth year, BOL. Continuations start at a year
    // boundary and carry no header.
    if toks.first().map(|t| t.category()) == Some(TokenCategory::Background) {
        let shape = toks.len() >= 5
            && toks[1].category() == TokenCategory::Background
            && matches!(toks[2], Token::Month(_))
            && toks[3].category() == TokenCategory::Background
            && toks[4] == Token::Bol;
        if !shape {
            return GrammarVerdict {
                first_failure_year: Some(1),
                failure_kind: Some(FailureKind::TokenOrderViolation),
                valid_years: 0,
                valid_token_len: 0,
            };
        }
        toks = &toks[5..];
    }

    let mut state = ScanState::YearStart { after_eoy: false };
    let mut valid_years = 0u32;
    let mut valid_token_len = 0usize;
    let mut consumed = 0usize;

    let fail = |kind: FailureKind, years: u32, len: usize| GrammarVerdict {
        first_failure_year: Some(years + 1),
        failure_kind: Some(kind),
        valid_years: years,
        valid_token_len: len,
    };

    for tok in toks {
        let cat = tok.category();
        state = match state {
            ScanState::YearStart { after_eoy } => match tok {
                Token::Month(_) => ScanState::InEvent { last_rank: None },
                Token::Eoy if after_eoy => return fail(FailureKind::RepeatedEoy, valid_years, valid_token_len),
                _ if after_eoy => return fail(FailureKind::EoyNotFollowedByMonth, valid_years, valid_token_len),
                _ => return fail(FailureKind::TokenOrderViolation, valid_years, valid_token_len),
            },
            ScanState::InEvent { last_rank } => match tok {
                Token::Duration(_) => ScanState::AfterDuration,
                Token::Month(_) | Token::Eoy | Token::Eol => {
                    return fail(FailureKind::MissingDuration, valid_years, valid_token_len)
                }
                _ => match event_rank(cat) {
                    Some(rank) => {
                        if opts.strict_intra_event && last_rank.is_some_and(|prev| rank <= prev) {
                            return fail(FailureKind::TokenOrderViolation, valid_years, valid_token_len);
                        }
                        ScanState::InEvent { last_rank: Some(rank) }
                    }
                    None => return fail(FailureKind::TokenOrderViolation, valid_years, valid_token_len),
                },
            },
            ScanState::AfterDuration => match tok {
                Token::Month(_) => ScanState::InEvent { last_rank: None },
                Token::Eoy => {
                    valid_years += 1;
                    valid_token_len = consumed + 1;
                    ScanState::YearStart { after_eoy: true }
                }
                Token::Eol => {
                    valid_years += 1;
                    valid_token_len = consumed + 1;
                    ScanState::Ended
                }
                _ => return fail(FailureKind::DurationNotFollowedByMonthOrEoy, valid_years, valid_token_len),
            },
            ScanState::Ended => return fail(FailureKind::TokenOrderViolation, valid_years, valid_token_len),
        };
        consumed += 1;
    }
    GrammarVerdict { first_failure_year: None, failure_kind: None, valid_years, valid_token_len }
}

/// Validates an id stream by looking tokens up in the vocabulary.
pub fn validate_ids(ids: &[u32], vocab: &Vocabulary) -> Result<GrammarVerdict> {
    let toks: Vec<Token> = ids.iter().map(|&id| vocab.token(id).cloned()).collect::<Result<_>>()?;
    Ok(validate_sequence(&toks))
}

/// First-failure-year histogram over a cohort plus the fraction surviving
/// the horizon. Failures beyond the horizon count as survivors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureDensity {
    pub horizon: usize,
    /// counts[y-1] = sequences whose first failure fell in year y.
    pub counts: Vec<usize>,
    pub n_sequences: usize,
    pub n_failed_within: usize,
    pub survival: f64,
}

pub fn failure_year_density(verdicts: &[GrammarVerdict], horizon: usize) -> Result<FailureDensity> {
    if horizon == 0 {
        return Err(Error::Config("horizon must be positive".into()));
    }
    if verdicts.is_empty() {
        return Err(Error::Estimation("no verdicts to aggregate".into()));
    }
    let mut counts = vec![0usize; horizon];
    let mut failed = 0usize;
    for v in verdicts {
        if let Some(y) = v.first_failure_year {
            if (y as usize) <= horizon {
                counts[y as usize - 1] += 1;
                failed += 1;
            }
        }
    }
    Ok(FailureDensity {
        horizon,
        counts,
        n_sequences: verdicts.len(),
        n_failed_within: failed,
        survival: 1.0 - failed as f64 / verdicts.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct ClassCount {
    tp: usize,
    fp: usize,
    fn_: usize,
}

/// Streaming confusion counts and cross-entropy for top-1 next-token
/// prediction. Classes enter the macro average only with at least one true
/// occurrence; padding never counts as a target.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    counts: BTreeMap<u32, ClassCount>,
    n_correct: usize,
    n_total: usize,
    // Kept as raw terms so the mean can be summed in a fixed order, making
    // the report exactly independent of corpus order.
    ce_terms: Vec<f64>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one prediction with its cross-entropy term.
    pub fn add(&mut self, truth: u32, predicted: u32, cross_entropy: f64) {
        if truth == PAD_ID {
            return;
        }
        self.n_total += 1;
        self.ce_terms.push(cross_entropy);
        if truth == predicted {
            self.n_correct += 1;
            self.counts.entry(truth).or_default().tp += 1;
        } else {
            self.counts.entry(truth).or_default().fn_ += 1;
            self.counts.entry(predicted).or_default().fp += 1;
        }
    }

    /// Argmax (lowest id wins ties) and log-softmax from raw logits.
    pub fn add_logits(&mut self, logits: &[f64], truth: u32) {
        let mut best = 0usize;
        let mut max = f64::NEG_INFINITY;
        for (i, &v) in logits.iter().enumerate() {
            if v > max {
                max = v;
                best = i;
            }
        }
        let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        self.add(truth, best as u32, lse - logits[truth as usize]);
    }

    pub fn n_predictions(&self) -> usize {
        self.n_total
    }

    pub fn finish(&self, known_years: usize) -> Result<MetricReport> {
        if self.n_total == 0 {
            return Err(Error::Estimation("no predictions accumulated".into()));
        }
        let mut p_sum = 0.0;
        let mut r_sum = 0.0;
        let mut f_sum = 0.0;
        let mut n_classes = 0usize;
        for c in self.counts.values() {
            if c.tp + c.fn_ == 0 {
                continue; // predicted-only class: no true occurrence
            }
            n_classes += 1;
            let p = if c.tp + c.fp > 0 { c.tp as f64 / (c.tp + c.fp) as f64 } else { 0.0 };
            let r = c.tp as f64 / (c.tp + c.fn_) as f64;
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            p_sum += p;
            r_sum += r;
            f_sum += f;
        }
        let mut terms = self.ce_terms.clone();
        terms.sort_by(f64::total_cmp);
        let mce = terms.iter().sum::<f64>() / self.n_total as f64;
        Ok(MetricReport {
            known_years,
            accuracy: self.n_correct as f64 / self.n_total as f64,
            precision: p_sum / n_classes as f64,
            recall: r_sum / n_classes as f64,
            f1: f_sum / n_classes as f64,
            mean_cross_entropy: mce,
            paper_perplexity: mce.sqrt(),
            standard_perplexity: mce.exp(),
            n_predictions: self.n_total,
            n_classes,
            n_skipped_sequences: 0,
        })
    }
}

/// Macro-averaged top-1 metrics and both perplexity conventions at one
/// conditioning level. `paper_perplexity` is the square root of the mean
/// cross-entropy, the convention the reference results report;
/// `standard_perplexity` is its exponential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub known_years: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_cross_entropy: f64,
    pub paper_perplexity: f64,
    pub standard_perplexity: f64,
    pub n_predictions: usize,
    pub n_classes: usize,
    /// Sequences too short to predict anything past the conditioning years.
    pub n_skipped_sequences: usize,
}

/// Index of the last conditioning token when the first `known_years` whole
/// years are given: the BOL for zero years, otherwise the k-th year closer.
/// `None` when the sequence has no predictable position left.
fn conditioning_boundary(ids: &[u32], known_years: usize) -> Option<usize> {
    let mut boundary = 4usize; // area, sex, birth month, birth year, BOL
    if known_years > 0 {
        let mut seen = 0usize;
        let mut found = None;
        for (i, &id) in ids.iter().enumerate() {
            if id == EOY_ID || id == EOL_ID {
                seen += 1;
                if seen == known_years {
                    found = Some(i);
                    break;
                }
            }
        }
        boundary = found?;
    }
    (boundary + 1 < ids.len()).then_some(boundary)
}

/// Teacher-forced evaluation: condition on the first `known_years` whole
/// years of each sequence and score top-1 predictions for every remaining
/// position. One forward pass per sequence serves all requested levels.
pub fn metrics_by_known_years(
    params: &ModelParams,
    proj: &Projections,
    corpus: &[LifeSequence],
    levels: &[usize],
) -> Result<Vec<MetricReport>> {
    if corpus.is_empty() {
        return Err(Error::Estimation("empty evaluation set".into()));
    }
    if levels.is_empty() {
        return Err(Error::Estimation("no conditioning levels requested".into()));
    }
    let mut accs: Vec<MetricAccumulator> = levels.iter().map(|_| MetricAccumulator::new()).collect();
    let mut skipped = vec![0usize; levels.len()];
    for seq in corpus {
        let built = build_forward(params, proj, &seq.ids, &seq.year_index, &seq.age, ForwardOpts::default())?;
        let logits = built.graph.value(built.logits);
        for (li, &k) in levels.iter().enumerate() {
            match conditioning_boundary(&seq.ids, k) {
                Some(b) => {
                    for p in (b + 1)..seq.ids.len() {
                        accs[li].add_logits(logits.row(p - 1), seq.ids[p]);
                    }
                }
                None => skipped[li] += 1,
            }
        }
    }
    let mut out = Vec::with_capacity(levels.len());
    for ((acc, &k), skip) in accs.iter().zip(levels).zip(skipped) {
        let mut report = acc.finish(k)?;
        report.n_skipped_sequences = skip;
        out.push(report);
    }
    Ok(out)
}

pub fn next_token_metrics(
    params: &ModelParams,
    proj: &Projections,
    corpus: &[LifeSequence],
    known_years: usize,
) -> Result<MetricReport> {
    Ok(metrics_by_known_years(params, proj, corpus, &[known_years])?.remove(0))
}
