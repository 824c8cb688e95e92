//! Conditional generation: whole-year cutoffs anchored at life events,
//! temperature sampling over masked logits, deterministic time-stream
//! advancement on year closers, lenient parsing of generated streams, and
//! per-person Monte Carlo outcome means.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::encode::{
    decode_events, DecodedEvent, IncomeQuantizer, IntensityLevel, LifeSequence, Token, TokenCategory,
    Vocabulary, BOL_ID, EOL_ID, EOY_ID, PAD_ID, YEAR_INDEX_BASE,
};
use crate::eval::{validate_sequence, GrammarVerdict};
use crate::model::{DecodeState, ModelParams, Projections};
use crate::rng::substream_indexed;
use crate::synth::LabourStatus;
use crate::{Error, Result};

/// Maternity is taken to start at the first year whose records carry at
/// least this much maternity-leave intensity.
pub const MATERNITY_THRESHOLD: IntensityLevel = IntensityLevel::S2;

/// Life event a cutoff is anchored to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorEvent {
    FirstUnemployment,
    FirstMaternity,
    Retirement,
}

/// Truncation rule: cut at the whole-year boundary before
/// `anchor_year + offset_years`, so the prefix always ends right after an
/// EOY (or after the BOL for the degenerate first-year cutoff).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub anchor_event: AnchorEvent,
    pub offset_years: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Categorical,
    Greedy,
}

fn default_max_new_tokens() -> usize {
    600
}
fn default_max_years() -> usize {
    20
}
fn default_temperature() -> f64 {
    // The source material never states a sampling temperature.
    1.0
}
fn default_sampling() -> Sampling {
    Sampling::Categorical
}
fn default_batch() -> usize {
    8
}
fn default_sims() -> usize {
    8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default = "default_max_years")]
    pub max_years: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_sampling")]
    pub sampling: Sampling,
    /// Grouping hint for parallel work; seeds are per simulation, so results
    /// do not depend on it.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Simulations per person for Monte Carlo outcome means.
    #[serde(default = "default_sims")]
    pub n_simulations: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_new_tokens: default_max_new_tokens(),
            max_years: default_max_years(),
            temperature: default_temperature(),
            sampling: default_sampling(),
            batch_size: default_batch(),
            n_simulations: default_sims(),
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sampling == Sampling::Categorical && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be positive and finite for categorical sampling",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 || self.max_years == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_new_tokens, max_years, and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Conditioning context plus the time-stream values the first generated
/// token must carry. [`truncate_at_cutoff`] fills these from the calendar;
/// on a generated EOY both advance by one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prefix {
    pub seq: LifeSequence,
    pub next_year_index: i32,
    pub next_age: i32,
}

/// Calendar year of the anchor event in a decoded history, if present.
pub fn find_anchor_year(seq: &LifeSequence, vocab: &Vocabulary, anchor: AnchorEvent) -> Result<Option<i32>> {
    let hist = decode_events(seq, vocab)?;
    for y in &hist.years {
        let hit = y.events.iter().any(|e| match anchor {
            AnchorEvent::FirstUnemployment => e.status.is_benefit(),
            AnchorEvent::Retirement => e.status == LabourStatus::Pensioner,
            AnchorEvent::FirstMaternity => e.maternity_intensity.is_some_and(|l| l >= MATERNITY_THRESHOLD),
        });
        if hit {
            return Ok(Some(y.calendar_year));
        }
    }
    Ok(None)
}

/// Cuts an observed sequence at the whole-year boundary before
/// `anchor_year + offset_years`. The prefix keeps everything up to and
/// including the EOY that closes the preceding year; cutting at the very
/// first observed year leaves only background and BOL.
pub fn truncate_at_cutoff(seq: &LifeSequence, vocab: &Vocabulary, spec: &CutoffSpec) -> Result<Prefix> {
    let hist = decode_events(seq, vocab)?;
    let anchor_year = find_anchor_year(seq, vocab, spec.anchor_event)?
        .ok_or_else(|| Error::Generation(format!("{:?} never occurs for person {}", spec.anchor_event, seq.person_id)))?;
    let target = anchor_year + spec.offset_years;
    let first = hist.years.first().expect("decoded history has years").calendar_year;
    let last = hist.years.last().expect("decoded history has years").calendar_year;
    if target < first {
        return Err(Error::Generation(format!(
            "cutoff year {target} precedes first observed year {first} for person {}",
            seq.person_id
        )));
    }
    if target > last {
        return Err(Error::Generation(format!(
            "cutoff year {target} beyond last observed year {last} for person {}",
            seq.person_id
        )));
    }
    let next_year_index = target - YEAR_INDEX_BASE;
    let next_age = target - hist.birth_year;
    let end = if target == first {
        4 // area, sex, birth month, birth year, BOL
    } else {
        let closing_index = next_year_index - 1;
        seq.ids
            .iter()
            .enumerate()
            .position(|(i, &id)| id == EOY_ID && seq.year_index[i] == closing_index)
            .ok_or_else(|| {
                Error::Generation(format!("no EOY closes year index {closing_index} for person {}", seq.person_id))
            })?
    };
    Ok(Prefix {
        seq: LifeSequence {
            person_id: seq.person_id,
            ids: seq.ids[..=end].to_vec(),
            year_index: seq.year_index[..=end].to_vec(),
            age: seq.age[..=end].to_vec(),
        },
        next_year_index,
        next_age,
    })
}

/// One in-flight continuation; [`SequenceModel::start`] returns a fresh one
/// per sequence.
pub trait ModelStepper {
    /// Consumes one token with its time-stream values and returns the
    /// logits for the next position.
    fn step(&mut self, id: u32, year_index: i32, age: i32) -> Result<Vec<f64>>;
}

/// Anything that can score next tokens a step at a time.
pub trait SequenceModel {
    fn vocab_size(&self) -> usize;
    fn start(&self) -> Result<Box<dyn ModelStepper + '_>>;
}

/// The trained network, decoded incrementally.
pub struct TransformerModel<'a> {
    params: &'a ModelParams,
    proj: &'a Projections,
}

impl<'a> TransformerModel<'a> {
    pub fn new(params: &'a ModelParams, proj: &'a Projections) -> Self {
        TransformerModel { params, proj }
    }
}

impl SequenceModel for TransformerModel<'_> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn start(&self) -> Result<Box<dyn ModelStepper + '_>> {
        Ok(Box::new(DecodeState::new(self.params, self.proj)))
    }
}

impl ModelStepper for DecodeState<'_> {
    fn step(&mut self, id: u32, year_index: i32, age: i32) -> Result<Vec<f64>> {
        DecodeState::step(self, id, year_index, age)
    }
}

/// Stub that deterministically replays one observed sequence: the logits
/// put all mass on the observed next token, so sampled continuations equal
/// the truth exactly. Past the observed end it emits EOL. Used to check the
/// experiment harness end to end with zero model error.
pub struct TruthReplay {
    full: LifeSequence,
    vocab_size: usize,
}

impl TruthReplay {
    pub fn new(full: LifeSequence, vocab_size: usize) -> Self {
        TruthReplay { full, vocab_size }
    }
}

struct ReplayStepper<'a> {
    full: &'a LifeSequence,
    vocab_size: usize,
    pos: usize,
}

impl ModelStepper for ReplayStepper<'_> {
    fn step(&mut self, _id: u32, _year_index: i32, _age: i32) -> Result<Vec<f64>> {
        self.pos += 1;
        let next = if self.pos < self.full.ids.len() { self.full.ids[self.pos] } else { EOL_ID };
        // A 2e6 margin underflows the softmax of every other id to exactly 0.
        let mut logits = vec![-1e6; self.vocab_size];
        logits[next as usize] = 1e6;
        Ok(logits)
    }
}

impl SequenceModel for TruthReplay {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn start(&self) -> Result<Box<dyn ModelStepper + '_>> {
        Ok(Box::new(ReplayStepper { full: &self.full, vocab_size: self.vocab_size, pos: 0 }))
    }
}

/// Samples a next token: padding and BOL are masked out, greedy takes the
/// argmax (lowest id on ties), categorical draws from the temperature
/// softmax.
pub fn sample_token(logits: &[f64], sampling: Sampling, temperature: f64, rng: &mut ChaCha12Rng) -> Result<u32> {
    let masked = |i: usize| i == PAD_ID as usize || i == BOL_ID as usize;
    let mut max = f64::NEG_INFINITY;
    let mut argmax = None;
    for (i, &v) in logits.iter().enumerate() {
        if !masked(i) && v > max {
            max = v;
            argmax = Some(i);
        }
    }
    let best = argmax.ok_or_else(|| Error::Generation("every candidate token is masked".into()))?;
    if !max.is_finite() {
        return Err(Error::Generation("every candidate token is masked".into()));
    }
    match sampling {
        Sampling::Greedy => Ok(best as u32),
        Sampling::Categorical => {
            let weights: Vec<f64> =
                logits.iter().enumerate().map(|(i, &v)| if masked(i) { 0.0 } else { ((v - max) / temperature).exp() }).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                u -= w;
                if u <= 0.0 && *w > 0.0 {
                    return Ok(i as u32);
                }
            }
            Ok(best as u32) // numerically exhausted: fall back to the mode
        }
    }
}

/// A finished continuation: the full sequence with its conditioning prefix,
/// plus how it stopped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Generated {
    pub seq: LifeSequence,
    pub prefix_len: usize,
    /// Year closers (EOY or EOL) emitted during generation.
    pub n_new_years: usize,
    pub ended_with_eol: bool,
}

/// Autoregressive continuation of a prefix. Every generated token carries
/// the current (year_index, age); both advance by one right after an EOY is
/// emitted. Stops on EOL, `max_new_tokens`, or after `max_years` generated
/// year closers. Grammar is not enforced; structure is judged afterwards.
pub fn generate(
    prefix: &Prefix,
    model: &dyn SequenceModel,
    cfg: &GenerationConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Generated> {
    cfg.validate()?;
    if prefix.seq.is_empty() {
        return Err(Error::Generation("empty prefix".into()));
    }
    let mut stepper = model.start()?;
    let mut logits = Vec::new();
    for i in 0..prefix.seq.ids.len() {
        logits = stepper.step(prefix.seq.ids[i], prefix.seq.year_index[i], prefix.seq.age[i])?;
    }

    let mut out = prefix.seq.clone();
    let prefix_len = out.ids.len();
    let (mut year, mut age) = (prefix.next_year_index, prefix.next_age);
    let mut n_new_years = 0usize;
    let mut ended_with_eol = false;
    for _ in 0..cfg.max_new_tokens {
        let id = sample_token(&logits, cfg.sampling, cfg.temperature, rng)?;
        out.ids.push(id);
        out.year_index.push(year);
        out.age.push(age);
        if id == EOL_ID {
            n_new_years += 1;
            ended_with_eol = true;
            break;
        }
        if id == EOY_ID {
            n_new_years += 1;
            if n_new_years == cfg.max_years {
                break;
            }
            year += 1;
            age += 1;
        }
        logits = stepper.step(id, year, age)?;
    }
    Ok(Generated { seq: out, prefix_len, n_new_years, ended_with_eol })
}

/// One parsed year of a (possibly generated) stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedYear {
    pub calendar_year: i32,
    pub year_index: i32,
    pub age: i32,
    /// Typed events only; placeholder blocks carry no information.
    pub events: Vec<DecodedEvent>,
}

/// Lenient parse of a full stream: background decoded when present, years
/// taken only from the structurally valid leading region reported by the
/// validator, placeholder and untyped event blocks skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct LenientHistory {
    pub birth_year: Option<i32>,
    pub birth_month: Option<u32>,
    pub years: Vec<ParsedYear>,
    pub verdict: GrammarVerdict,
}

pub fn parse_years_lenient(seq: &LifeSequence, vocab: &Vocabulary) -> Result<LenientHistory> {
    let toks: Vec<Token> = seq.ids.iter().map(|&id| vocab.token(id).cloned()).collect::<Result<_>>()?;
    let verdict = validate_sequence(&toks);
    let mut hist = LenientHistory { birth_year: None, birth_month: None, years: Vec::new(), verdict };

    let mut start = 0usize;
    if toks.first().map(|t| t.category()) == Some(TokenCategory::Background) {
        let shape = toks.len() >= 5
            && toks[1].category() == TokenCategory::Background
            && matches!(toks[2], Token::Month(_))
            && toks[3].category() == TokenCategory::Background
            && toks[4] == Token::Bol;
        if !shape {
            // The verdict already reports the malformed header.
            return Ok(hist);
        }
        if let Token::Month(m) = toks[2] {
            hist.birth_month = Some(m);
        }
        if let Token::BirthYear(y) = toks[3] {
            hist.birth_year = Some(y);
        }
        start = 5;
    }

    let region = &toks[start..start + verdict.valid_token_len];
    let mut i = 0usize;
    let mut year_start = 0usize;
    while i < region.len() {
        if !matches!(region[i], Token::Eoy | Token::Eol) {
            i += 1;
            continue;
        }
        let close_abs = start + i;
        let mut year = ParsedYear {
            calendar_year: YEAR_INDEX_BASE + seq.year_index[close_abs],
            year_index: seq.year_index[close_abs],
            age: seq.age[close_abs],
            events: Vec::new(),
        };
        let mut j = year_start;
        while j < i {
            debug_assert!(matches!(region[j], Token::Month(_)));
            let start_month = match region[j] {
                Token::Month(m) => m,
                _ => 1,
            };
            j += 1;
            let mut status = None;
            let mut ev = DecodedEvent {
                start_month,
                status: LabourStatus::Other,
                income_bin: None,
                title: None,
                province: None,
                sector: None,
                firm_size: None,
                part_full: None,
                work_intensity: None,
                sick_intensity: None,
                maternity_intensity: None,
                duration_months: 0,
            };
            while j < i {
                match &region[j] {
                    Token::Duration(d) => {
                        ev.duration_months = *d;
                        j += 1;
                        break;
                    }
                    Token::Type(c) => status = LabourStatus::from_code(*c),
                    Token::Income(b) => ev.income_bin = Some(*b),
                    Token::Title(t) => ev.title = Some(*t),
                    Token::Province(p) => ev.province = Some(*p),
                    Token::Sector(s) => ev.sector = Some(s.clone()),
                    Token::FirmSize(f) => ev.firm_size = Some(*f),
                    Token::FullTime => ev.part_full = Some(crate::synth::PartFull::Full),
                    Token::PartTime => ev.part_full = Some(crate::synth::PartFull::Part),
                    Token::WorkInt(l) => ev.work_intensity = Some(*l),
                    Token::SickInt(l) => ev.sick_intensity = Some(*l),
                    Token::MatInt(l) => ev.maternity_intensity = Some(*l),
                    _ => {}
                }
                j += 1;
            }
            if let Some(s) = status {
                ev.status = s;
                year.events.push(ev);
            }
        }
        hist.years.push(year);
        i += 1;
        year_start = i;
    }
    Ok(hist)
}

/// Scalar outcome of one simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "value")]
pub enum SimOutcome {
    /// Outcome observed and measured.
    Value(f64),
    /// Stream stayed valid but the outcome never occurred in the horizon.
    Censored,
    /// Structure broke before the outcome could be measured.
    Invalid,
}

/// Extracts one scalar per simulated sequence. Implementations must apply
/// the same rule to observed sequences so simulated and empirical values
/// are directly comparable.
pub trait OutcomeExtractor {
    fn extract(&self, full: &LifeSequence, vocab: &Vocabulary) -> SimOutcome;
}

/// Total months of the first benefit spell starting in or after
/// `from_year_index`, split spells at year boundaries summed: a spell that
/// ends in December chains into a benefit event starting in January of the
/// next year.
pub struct FirstBenefitMonths {
    pub from_year_index: i32,
}

impl OutcomeExtractor for FirstBenefitMonths {
    fn extract(&self, full: &LifeSequence, vocab: &Vocabulary) -> SimOutcome {
        let hist = match parse_years_lenient(full, vocab) {
            Ok(h) => h,
            Err(_) => return SimOutcome::Invalid,
        };
        let mut total = 0u32;
        let mut open_end: Option<(i32, u32)> = None; // (year, last month covered)
        for y in &hist.years {
            if y.year_index < self.from_year_index {
                continue;
            }
            for e in &y.events {
                let is_benefit = e.status.is_benefit();
                match open_end {
                    None if is_benefit => {
                        total = e.duration_months;
                        open_end = Some((y.calendar_year, e.start_month + e.duration_months - 1));
                    }
                    Some((year, end_month)) if is_benefit => {
                        let chains = y.calendar_year == year + 1 && end_month >= 12 && e.start_month == 1;
                        if chains {
                            total += e.duration_months;
                            open_end = Some((y.calendar_year, e.duration_months));
                        }
                    }
                    _ => {}
                }
            }
            if let Some((year, end_month)) = open_end {
                // The spell is closed once a later year cannot chain anymore.
                if y.calendar_year > year || end_month < 12 {
                    return SimOutcome::Value(total as f64);
                }
            }
        }
        match open_end {
            Some(_) => SimOutcome::Value(total as f64),
            None if hist.verdict.is_valid() => SimOutcome::Censored,
            None => SimOutcome::Invalid,
        }
    }
}

/// Age in months at the first retirement event in or after
/// `from_year_index`: `12 * (year - birth_year) + (start_month - birth_month)`.
pub struct RetirementAgeMonths {
    pub from_year_index: i32,
}

impl OutcomeExtractor for RetirementAgeMonths {
    fn extract(&self, full: &LifeSequence, vocab: &Vocabulary) -> SimOutcome {
        let hist = match parse_years_lenient(full, vocab) {
            Ok(h) => h,
            Err(_) => return SimOutcome::Invalid,
        };
        let (Some(by), Some(bm)) = (hist.birth_year, hist.birth_month) else {
            return SimOutcome::Invalid;
        };
        for y in &hist.years {
            if y.year_index < self.from_year_index {
                continue;
            }
            if let Some(e) = y.events.iter().find(|e| e.status == LabourStatus::Pensioner) {
                let months = 12 * (y.calendar_year - by) as i64 + (e.start_month as i64 - bm as i64);
                return SimOutcome::Value(months as f64);
            }
        }
        if hist.verdict.is_valid() {
            SimOutcome::Censored
        } else {
            SimOutcome::Invalid
        }
    }
}

/// Real (deflated) earnings in one calendar year: dequantized bin midpoint
/// times duration, summed over the year's typed events. A structurally
/// valid year without income-bearing events earns zero; a year never
/// reached is censored.
pub struct YearlyIncome<'a> {
    pub year_index: i32,
    pub quantizer: &'a IncomeQuantizer,
}

impl OutcomeExtractor for YearlyIncome<'_> {
    fn extract(&self, full: &LifeSequence, vocab: &Vocabulary) -> SimOutcome {
        let hist = match parse_years_lenient(full, vocab) {
            Ok(h) => h,
            Err(_) => return SimOutcome::Invalid,
        };
        for y in &hist.years {
            if y.year_index == self.year_index {
                let total: f64 = y
                    .events
                    .iter()
                    .filter_map(|e| e.income_bin.map(|b| self.quantizer.dequantize(b) * e.duration_months as f64))
                    .sum();
                return SimOutcome::Value(total);
            }
        }
        if hist.verdict.is_valid() {
            SimOutcome::Censored
        } else {
            SimOutcome::Invalid
        }
    }
}

/// Monte Carlo aggregate over one person's simulations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloResult {
    /// Mean over measured simulations; absent when none produced a value.
    pub mean: Option<f64>,
    pub values: Vec<f64>,
    pub n_censored: usize,
    pub n_invalid: usize,
    pub n_model_errors: usize,
}

/// One simulation, flattened for JSONL output.
#[derive(Debug, Clone, Serialize)]
pub struct SimulationRecord {
    pub person_id: u64,
    pub sim_index: usize,
    pub prefix_len: usize,
    pub tokens: Vec<String>,
    pub year_index: Vec<i32>,
    pub age: Vec<i32>,
    pub outcome: SimOutcome,
}

/// RNG for simulation `k` of one person. The chain (seed, person id,
/// simulation index) makes every draw independent of batching and of which
/// other persons or simulations run.
pub fn simulation_rng(seed: u64, person_id: u64, k: u64) -> ChaCha12Rng {
    let person_root: u64 = substream_indexed(seed, "person-sims", person_id).gen();
    substream_indexed(person_root, "simulation", k)
}

/// Runs K independent simulations from one prefix and averages the
/// extracted outcomes. Seeds derive from (seed, person id, simulation
/// index), so results do not depend on batching or person order. Censored,
/// structurally invalid, and model-errored simulations are excluded from
/// the mean and counted separately.
pub fn monte_carlo_outcomes(
    prefix: &Prefix,
    model: &dyn SequenceModel,
    cfg: &GenerationConfig,
    extractor: &dyn OutcomeExtractor,
    vocab: &Vocabulary,
) -> Result<MonteCarloResult> {
    monte_carlo_traced(prefix, model, cfg, extractor, vocab, None)
}

pub fn monte_carlo_traced(
    prefix: &Prefix,
    model: &dyn SequenceModel,
    cfg: &GenerationConfig,
    extractor: &dyn OutcomeExtractor,
    vocab: &Vocabulary,
    mut trace: Option<&mut dyn FnMut(SimulationRecord)>,
) -> Result<MonteCarloResult> {
    cfg.validate()?;
    if cfg.n_simulations == 0 {
        return Err(Error::Generation("n_simulations must be positive".into()));
    }
    let mut out =
        MonteCarloResult { mean: None, values: Vec::new(), n_censored: 0, n_invalid: 0, n_model_errors: 0 };
    for k in 0..cfg.n_simulations {
        let mut rng = simulation_rng(cfg.seed, prefix.seq.person_id, k as u64);
        match generate(prefix, model, cfg, &mut rng) {
            Err(_) => out.n_model_errors += 1,
            Ok(g) => {
                let outcome = extractor.extract(&g.seq, vocab);
                match outcome {
                    SimOutcome::Value(v) => out.values.push(v),
                    SimOutcome::Censored => out.n_censored += 1,
                    SimOutcome::Invalid => out.n_invalid += 1,
                }
                if let Some(f) = trace.as_deref_mut() {
                    f(SimulationRecord {
                        person_id: g.seq.person_id,
                        sim_index: k,
                        prefix_len: g.prefix_len,
                        tokens: g.seq.ids.iter().map(|&id| vocab.token(id).map(|t| t.to_string()).unwrap_or_default()).collect(),
                        year_index: g.seq.year_index.clone(),
                        age: g.seq.age.clone(),
                        outcome,
                    });
                }
            }
        }
    }
    if !out.values.is_empty() {
        out.mean = Some(out.values.iter().sum::<f64>() / out.values.len() as f64);
    }
    Ok(out)
}
