//! Percentile quantization of real monthly income.
//!
//! Yearly record income is first divided by the record's duration in months,
//! then deflated to base-year terms, and finally mapped to one of 100 bins by
//! boundaries frozen from the training split.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::synth::{PersonWithRecords, TabularRecord};
use crate::{Error, Result};

pub const N_BINS: usize = 100;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncomeQuantizer {
    /// `boundaries[k]` is the k-th percentile boundary, k = 0..=99.
    boundaries: Vec<f64>,
    /// Price index per calendar year; nominal / deflator = real.
    deflator: BTreeMap<i32, f64>,
}

impl IncomeQuantizer {
    /// Freezes boundaries from raw real-monthly training values:
    /// `b_k = sorted[(k * n) / 100]`.
    pub fn fit(mut values: Vec<f64>, deflator: BTreeMap<i32, f64>) -> Result<IncomeQuantizer> {
        if values.is_empty() {
            return Err(Error::Encoding("cannot fit income quantizer on zero values".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Encoding("non-finite income value in training data".into()));
        }
        if deflator.values().any(|d| !d.is_finite() || *d <= 0.0) {
            return Err(Error::Encoding("deflator values must be positive and finite".into()));
        }
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let n = values.len();
        let boundaries = (0..N_BINS).map(|k| values[k * n / N_BINS]).collect();
        Ok(IncomeQuantizer { boundaries, deflator })
    }

    /// Fits from the income-bearing records of a training population.
    pub fn fit_from_records<'a, I>(persons: I, deflator: BTreeMap<i32, f64>) -> Result<IncomeQuantizer>
    where
        I: IntoIterator<Item = &'a PersonWithRecords>,
    {
        let mut values = Vec::new();
        for p in persons {
            for r in &p.records {
                let d = *deflator
                    .get(&r.calendar_year)
                    .ok_or_else(|| Error::Encoding(format!("no deflator for year {}", r.calendar_year)))?;
                values.push(real_monthly(r.yearly_income, r.duration_months, r.calendar_year, d)?);
            }
        }
        Self::fit(values, deflator)
    }

    /// Bin for a raw record: count of boundaries strictly below the real
    /// monthly value, clamped to 0..=99. A value equal to the median
    /// boundary therefore lands in the upper half.
    pub fn quantize(&self, yearly_income: f64, duration_months: u32, year: i32) -> Result<u8> {
        let d = self.deflator_for(year)?;
        let x = real_monthly(yearly_income, duration_months, year, d)?;
        Ok(self.bin_of_real(x))
    }

    pub fn quantize_record(&self, r: &TabularRecord) -> Result<u8> {
        self.quantize(r.yearly_income, r.duration_months, r.calendar_year)
    }

    /// Bin for an already-deflated monthly value.
    pub fn bin_of_real(&self, x: f64) -> u8 {
        let below = self.boundaries.partition_point(|b| *b < x);
        below.min(N_BINS - 1) as u8
    }

    /// Representative real monthly value for a bin: the midpoint of its
    /// boundary interval, or the top boundary itself for the last bin.
    pub fn dequantize(&self, bin: u8) -> f64 {
        let k = (bin as usize).min(N_BINS - 1);
        if k + 1 < N_BINS {
            0.5 * (self.boundaries[k] + self.boundaries[k + 1])
        } else {
            self.boundaries[k]
        }
    }

    pub fn deflator_for(&self, year: i32) -> Result<f64> {
        self.deflator
            .get(&year)
            .copied()
            .ok_or_else(|| Error::Encoding(format!("no deflator for year {year}")))
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<IncomeQuantizer> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot open quantizer {}: {e}", path.display())))?;
        let q: IncomeQuantizer = serde_json::from_str(&text)?;
        if q.boundaries.len() != N_BINS {
            return Err(Error::Encoding(format!("quantizer has {} boundaries, expected {N_BINS}", q.boundaries.len())));
        }
        Ok(q)
    }
}

/// Nominal yearly income to real monthly: divide by months worked, then by
/// the year's deflator.
pub fn real_monthly(yearly_income: f64, duration_months: u32, year: i32, deflator: f64) -> Result<f64> {
    if duration_months == 0 || duration_months > 12 {
        return Err(Error::Encoding(format!("record in {year} has duration {duration_months}, outside 1..=12")));
    }
    if !yearly_income.is_finite() || yearly_income < 0.0 {
        return Err(Error::Encoding(format!("record in {year} has invalid income {yearly_income}")));
    }
    Ok(yearly_income / duration_months as f64 / deflator)
}
