//! Calendar-structured token sequences: one block of background tokens, then
//! every calendar year from first to last observed, each year a list of event
//! blocks closed by EOY (or EOL when the history reaches the corpus end).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::quantize::IncomeQuantizer;
use super::vocab::{IntensityLevel, Token, TokenCategory, Vocabulary, PAD_ID};
use crate::synth::{validate_record, LabourStatus, PartFull, PersonProfile, Sex, TabularRecord};
use crate::{Error, Result};

/// Base year: year_index 1 is the first observable calendar year.
pub const YEAR_INDEX_BASE: i32 = 1989;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EncodeOptions {
    /// Hard cap on sequence length; longer histories lose earliest years.
    pub max_len: usize,
    /// Histories reaching this calendar year are complete and end with EOL.
    pub corpus_end_year: i32,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions { max_len: 1560, corpus_end_year: 2015 }
    }
}

/// A person's sequence in typed-token form, before vocabulary lookup. The
/// three vectors always have equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedPerson {
    pub person_id: u64,
    pub tokens: Vec<Token>,
    pub year_index: Vec<i32>,
    pub age: Vec<i32>,
}

impl TokenizedPerson {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn push(&mut self, t: Token, year_index: i32, age: i32) {
        self.tokens.push(t);
        self.year_index.push(year_index);
        self.age.push(age);
    }

    /// Maps typed tokens to vocabulary ids; unseen tokens become UNK.
    pub fn to_sequence(&self, vocab: &Vocabulary) -> LifeSequence {
        LifeSequence {
            person_id: self.person_id,
            ids: self.tokens.iter().map(|t| vocab.id_or_unk(t)).collect(),
            year_index: self.year_index.clone(),
            age: self.age.clone(),
        }
    }
}

/// Id-level sequence with its aligned time streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifeSequence {
    pub person_id: u64,
    pub ids: Vec<u32>,
    pub year_index: Vec<i32>,
    pub age: Vec<i32>,
}

impl LifeSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Turns one person's validated records into the token stream. Records must
/// be sorted by (year, start month); every year between the first and last
/// observed appears, silent ones as `MONTH_1 DUR_12`.
pub fn tokenize_person(
    profile: &PersonProfile,
    records: &[TabularRecord],
    quantizer: &IncomeQuantizer,
    opts: &EncodeOptions,
) -> Result<TokenizedPerson> {
    if records.is_empty() {
        return Err(Error::Encoding(format!("person {}: no records to encode", profile.person_id)));
    }
    for w in records.windows(2) {
        let key = |r: &TabularRecord| (r.calendar_year, r.start_month);
        if key(&w[0]) > key(&w[1]) {
            return Err(Error::Encoding(format!("person {}: records not sorted by (year, month)", profile.person_id)));
        }
    }
    for r in records {
        validate_record(r)?;
        if r.person_id != profile.person_id {
            return Err(Error::Encoding(format!(
                "record of person {} mixed into person {}",
                r.person_id, profile.person_id
            )));
        }
    }

    let mut out = TokenizedPerson {
        person_id: profile.person_id,
        tokens: Vec::new(),
        year_index: Vec::new(),
        age: Vec::new(),
    };
    out.push(Token::Area(profile.birth_area), 0, 0);
    out.push(match profile.sex { Sex::F => Token::SexF, Sex::M => Token::SexM }, 0, 0);
    out.push(Token::Month(profile.birth_month), 0, 0);
    out.push(Token::BirthYear(profile.birth_year), 0, 0);
    out.push(Token::Bol, 0, 0);

    let first = records[0].calendar_year;
    let last = records[records.len() - 1].calendar_year;
    let mut cursor = 0usize;
    for year in first..=last {
        let yi = year - YEAR_INDEX_BASE;
        let age = year - profile.birth_year;
        let begin = cursor;
        while cursor < records.len() && records[cursor].calendar_year == year {
            cursor += 1;
        }
        if begin == cursor {
            out.push(Token::Month(1), yi, age);
            out.push(Token::Duration(12), yi, age);
        } else {
            for r in &records[begin..cursor] {
                push_event(&mut out, r, quantizer, yi, age)?;
            }
        }
        let closing = if year == last && year == opts.corpus_end_year { Token::Eol } else { Token::Eoy };
        out.push(closing, yi, age);
    }

    truncate_whole_years(&mut out, opts.max_len)?;
    Ok(out)
}

fn push_event(out: &mut TokenizedPerson, r: &TabularRecord, quantizer: &IncomeQuantizer, yi: i32, age: i32) -> Result<()> {
    out.push(Token::Month(r.start_month), yi, age);
    out.push(Token::Type(r.labour_status.code()), yi, age);
    out.push(Token::Income(quantizer.quantize_record(r)?), yi, age);
    if let Some(t) = r.work_title {
        out.push(Token::Title(t), yi, age);
    }
    if let Some(p) = r.work_province {
        out.push(Token::Province(p), yi, age);
    }
    if let Some(s) = &r.sector {
        out.push(Token::Sector(s.clone()), yi, age);
    }
    if let Some(f) = r.firm_size {
        out.push(Token::FirmSize(f), yi, age);
    }
    if let Some(pf) = r.part_full {
        out.push(match pf { PartFull::Full => Token::FullTime, PartFull::Part => Token::PartTime }, yi, age);
    }
    if let Some(x) = r.work_intensity {
        out.push(Token::WorkInt(IntensityLevel::from_ratio(x)), yi, age);
    }
    if let Some(x) = r.sick_intensity {
        out.push(Token::SickInt(IntensityLevel::from_ratio(x)), yi, age);
    }
    if let Some(x) = r.maternity_intensity {
        out.push(Token::MatInt(IntensityLevel::from_ratio(x)), yi, age);
    }
    out.push(Token::Duration(r.duration_months), yi, age);
    Ok(())
}

/// Inclusive index ranges of each year block, closing EOY/EOL included.
/// Token 0..=4 are background + BOL and belong to no year.
fn year_block_ranges(tokens: &[Token]) -> Result<Vec<(usize, usize)>> {
    let mut blocks = Vec::new();
    let mut start = 5usize;
    for (i, t) in tokens.iter().enumerate().skip(5) {
        if matches!(t, Token::Eoy | Token::Eol) {
            blocks.push((start, i));
            start = i + 1;
        }
    }
    if start != tokens.len() {
        return Err(Error::Encoding("trailing tokens after the last year close".into()));
    }
    Ok(blocks)
}

/// Drops earliest whole years (closing token included) until the sequence
/// fits `max_len`. Background and BOL always survive.
pub fn truncate_whole_years(seq: &mut TokenizedPerson, max_len: usize) -> Result<()> {
    if seq.len() <= max_len {
        return Ok(());
    }
    let blocks = year_block_ranges(&seq.tokens)?;
    let mut drop_end = 0usize; // exclusive token index of the dropped prefix (after index 4)
    let mut remaining = seq.len();
    for (s, e) in &blocks {
        if remaining <= max_len {
            break;
        }
        remaining -= e - s + 1;
        drop_end = e + 1;
    }
    if remaining > max_len {
        return Err(Error::Encoding(format!(
            "person {}: background alone exceeds max_len {max_len}",
            seq.person_id
        )));
    }
    seq.tokens.drain(5..drop_end);
    seq.year_index.drain(5..drop_end);
    seq.age.drain(5..drop_end);
    Ok(())
}

/// Event-block boundaries inside one year block: each event spans from its
/// MONTH token through its DUR token, inclusive.
fn event_ranges(tokens: &[Token], year_start: usize, year_end: usize) -> Result<Vec<(usize, usize)>> {
    let mut events = Vec::new();
    let mut i = year_start;
    while i < year_end {
        if !matches!(tokens[i], Token::Month(_)) {
            return Err(Error::Encoding(format!("expected a month token at position {i}")));
        }
        let start = i;
        while i < year_end && !matches!(tokens[i], Token::Duration(_)) {
            i += 1;
        }
        if i == year_end {
            return Err(Error::Encoding(format!("event starting at {start} has no duration token")));
        }
        events.push((start, i));
        i += 1;
    }
    Ok(events)
}

/// Shuffles event blocks that share a start month, then drops non-structural
/// tokens independently with `dropout_rate`. Structural tokens (background,
/// BOL, MONTH, DUR, EOY, EOL) always survive. Deterministic in `seed`.
pub fn augment(seq: &TokenizedPerson, same_month_shuffle: bool, dropout_rate: f64, seed: u64) -> Result<TokenizedPerson> {
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::Encoding(format!("dropout rate {dropout_rate} outside [0,1)")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..5.min(seq.len())).collect();

    let blocks = year_block_ranges(&seq.tokens)?;
    for (ys, ye) in blocks {
        let mut events = event_ranges(&seq.tokens, ys, ye)?;
        if same_month_shuffle {
            // permute runs of consecutive events sharing a start month
            let month_of = |ev: &(usize, usize)| match seq.tokens[ev.0] {
                Token::Month(m) => m,
                _ => unreachable!("event ranges start at month tokens"),
            };
            let mut i = 0;
            while i < events.len() {
                let mut j = i + 1;
                while j < events.len() && month_of(&events[j]) == month_of(&events[i]) {
                    j += 1;
                }
                if j - i > 1 {
                    events[i..j].shuffle(&mut rng);
                }
                i = j;
            }
        }
        for (es, ee) in events {
            order.extend(es..=ee);
        }
        order.push(ye); // closing EOY/EOL
    }

    let keep = |t: &Token| {
        matches!(
            t.category(),
            TokenCategory::Special | TokenCategory::Month | TokenCategory::Duration
        )
    };
    let mut out = TokenizedPerson {
        person_id: seq.person_id,
        tokens: Vec::with_capacity(seq.len()),
        year_index: Vec::with_capacity(seq.len()),
        age: Vec::with_capacity(seq.len()),
    };
    for idx in order {
        let t = &seq.tokens[idx];
        if !keep(t) && dropout_rate > 0.0 && rng.gen::<f64>() < dropout_rate {
            continue;
        }
        out.push(t.clone(), seq.year_index[idx], seq.age[idx]);
    }
    Ok(out)
}

/// Appends PAD ids up to `len`; padding carries the last valid time values.
pub fn pad_to(seq: &mut LifeSequence, len: usize) {
    let (yi, age) = match seq.ids.len() {
        0 => (0, 0),
        n => (seq.year_index[n - 1], seq.age[n - 1]),
    };
    while seq.ids.len() < len {
        seq.ids.push(PAD_ID);
        seq.year_index.push(yi);
        seq.age.push(age);
    }
}

/// Inverse of the id mapping. Out-of-range ids are an error.
pub fn decode_tokens(ids: &[u32], vocab: &Vocabulary) -> Result<Vec<String>> {
    ids.iter().map(|&id| vocab.token(id).map(|t| t.to_string())).collect()
}

/// One reconstructed event, attribute tokens already interpreted.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedEvent {
    pub start_month: u32,
    pub status: LabourStatus,
    pub income_bin: Option<u8>,
    pub title: Option<u8>,
    pub province: Option<u16>,
    pub sector: Option<String>,
    pub firm_size: Option<u8>,
    pub part_full: Option<PartFull>,
    pub work_intensity: Option<IntensityLevel>,
    pub sick_intensity: Option<IntensityLevel>,
    pub maternity_intensity: Option<IntensityLevel>,
    pub duration_months: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedYear {
    pub calendar_year: i32,
    pub year_index: i32,
    pub age: i32,
    /// True when the year held only the silent placeholder.
    pub silent: bool,
    pub events: Vec<DecodedEvent>,
}

/// A parsed sequence: background attributes plus one entry per year.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedHistory {
    pub birth_area: u8,
    pub sex: Sex,
    pub birth_month: u32,
    pub birth_year: i32,
    pub years: Vec<DecodedYear>,
    /// True when the sequence closed with EOL.
    pub complete: bool,
}

/// Strict parser for well-formed sequences; any deviation is an error. Used
/// for round trips and outcome extraction on encoder output.
pub fn decode_events(seq: &LifeSequence, vocab: &Vocabulary) -> Result<DecodedHistory> {
    let toks: Vec<&Token> = seq.ids.iter().map(|&id| vocab.token(id)).collect::<Result<_>>()?;
    let n_pad = toks.iter().rev().take_while(|t| ***t == Token::Pad).count();
    let toks = &toks[..toks.len() - n_pad];
    if toks.len() < 5 {
        return Err(Error::Encoding("sequence shorter than background + BOL".into()));
    }
    let birth_area = match toks[0] {
        Token::Area(a) => *a,
        t => return Err(Error::Encoding(format!("expected area first, found {t}"))),
    };
    let sex = match toks[1] {
        Token::SexF => Sex::F,
        Token::SexM => Sex::M,
        t => return Err(Error::Encoding(format!("expected sex second, found {t}"))),
    };
    let birth_month = match toks[2] {
        Token::Month(m) => *m,
        t => return Err(Error::Encoding(format!("expected birth month third, found {t}"))),
    };
    let birth_year = match toks[3] {
        Token::BirthYear(y) => *y,
        t => return Err(Error::Encoding(format!("expected birth year fourth, found {t}"))),
    };
    if *toks[4] != Token::Bol {
        return Err(Error::Encoding(format!("expected BOL fifth, found {}", toks[4])));
    }

    let mut years = Vec::new();
    let mut complete = false;
    let mut i = 5usize;
    while i < toks.len() {
        let year_start = i;
        while i < toks.len() && !matches!(toks[i], Token::Eoy | Token::Eol) {
            i += 1;
        }
        if i == toks.len() {
            return Err(Error::Encoding("year not closed by EOY or EOL".into()));
        }
        let close = i;
        if *toks[close] == Token::Eol {
            complete = true;
            if close + 1 != toks.len() {
                return Err(Error::Encoding("tokens after EOL".into()));
            }
        }
        let year_index = seq.year_index[close];
        let age = seq.age[close];
        let mut events = Vec::new();
        let mut silent = false;

        let mut j = year_start;
        while j < close {
            let start_month = match toks[j] {
                Token::Month(m) => *m,
                t => return Err(Error::Encoding(format!("expected month at {j}, found {t}"))),
            };
            j += 1;
            if let Token::Duration(d) = toks[j] {
                // silent placeholder: month directly followed by duration
                if year_start + 2 != close {
                    return Err(Error::Encoding(format!("bare placeholder inside a non-empty year at {j}")));
                }
                silent = true;
                let _ = d;
                j += 1;
                continue;
            }
            let status = match toks[j] {
                Token::Type(c) => LabourStatus::from_code(*c)
                    .ok_or_else(|| Error::Encoding(format!("unknown status code {c}")))?,
                t => return Err(Error::Encoding(format!("expected type after month at {j}, found {t}"))),
            };
            j += 1;
            let mut ev = DecodedEvent {
                start_month,
                status,
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
            loop {
                if j >= close {
                    return Err(Error::Encoding("event not closed by a duration token".into()));
                }
                match toks[j] {
                    Token::Income(b) => ev.income_bin = Some(*b),
                    Token::Title(t) => ev.title = Some(*t),
                    Token::Province(p) => ev.province = Some(*p),
                    Token::Sector(s) => ev.sector = Some(s.clone()),
                    Token::FirmSize(f) => ev.firm_size = Some(*f),
                    Token::FullTime => ev.part_full = Some(PartFull::Full),
                    Token::PartTime => ev.part_full = Some(PartFull::Part),
                    Token::WorkInt(l) => ev.work_intensity = Some(*l),
                    Token::SickInt(l) => ev.sick_intensity = Some(*l),
                    Token::MatInt(l) => ev.maternity_intensity = Some(*l),
                    Token::Duration(d) => {
                        ev.duration_months = *d;
                        j += 1;
                        break;
                    }
                    t => return Err(Error::Encoding(format!("unexpected token {t} inside an event"))),
                }
                j += 1;
            }
            events.push(ev);
        }
        years.push(DecodedYear {
            calendar_year: YEAR_INDEX_BASE + year_index,
            year_index,
            age,
            silent,
            events,
        });
        i = close + 1;
    }
    Ok(DecodedHistory { birth_area, sex, birth_month, birth_year, years, complete })
}

pub fn write_corpus_jsonl(path: &Path, seqs: &[LifeSequence]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in seqs {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<LifeSequence>> {
    let f = fs::File::open(path).map_err(|e| Error::Data(format!("cannot open corpus {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (ln, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: LifeSequence = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("corpus line {}: {e}", ln + 1)))?;
        if seq.ids.len() != seq.year_index.len() || seq.ids.len() != seq.age.len() {
            return Err(Error::Data(format!("corpus line {}: stream lengths differ", ln + 1)));
        }
        out.push(seq);
    }
    Ok(out)
}
