//! Activation histograms, the tolerance-relaxed KL threshold sweep and
//! MinMax weight scales.

mod params;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use params::{level_count, Granularity, QuantParams};

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Signedness};
use crate::nnexec::{site_source_slot, Dataset, ExecOptions, Program};
use crate::par;
use crate::tensor::Tensor;

pub const NUM_BINS: usize = 2048;

/// Substituted for empty quantized bins under a non-empty reference bin.
pub const KL_EPSILON: f64 = 1e-9;

/// 2048-bin histogram of absolute nonzero activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<u64>,
    pub max_value: f64,
    pub bin_width: f64,
    pub total: u64,
}

impl Histogram {
    /// Bins `|v|` for every nonzero `v`. A value equal to the maximum lands in
    /// the last bin.
    pub fn from_values(values: &[f32]) -> Self {
        let max = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let mut h = Self::empty(max as f64);
        h.add(values);
        h
    }

    /// Empty histogram over `[0, max_value]`.
    pub fn empty(max_value: f64) -> Self {
        Self { bins: vec![0; NUM_BINS], max_value, bin_width: max_value / NUM_BINS as f64, total: 0 }
    }

    /// From explicit counts; `max_value` fixes the bin width.
    pub fn from_bins(bins: Vec<u64>, max_value: f64) -> Result<Self> {
        if bins.len() != NUM_BINS {
            return Err(Error::validation(format!("histogram needs {NUM_BINS} bins, got {}", bins.len())));
        }
        if !(max_value.is_finite() && max_value >= 0.0) {
            return Err(Error::validation(format!("histogram max {max_value} invalid")));
        }
        let total = bins.iter().sum();
        Ok(Self { bins, max_value, bin_width: max_value / NUM_BINS as f64, total })
    }

    /// Adds more values under the fixed range; values above it go to the last bin.
    pub fn add(&mut self, values: &[f32]) {
        if self.bin_width <= 0.0 {
            return;
        }
        for &v in values {
            if v == 0.0 || !v.is_finite() {
                continue;
            }
            let i = ((v.abs() as f64 / self.bin_width) as usize).min(NUM_BINS - 1);
            self.bins[i] += 1;
            self.total += 1;
        }
    }

    pub fn merge(&mut self, other: &Histogram) {
        self.bins.iter_mut().zip(&other.bins).for_each(|(a, b)| *a += b);
        self.total += other.total;
    }
}

/// The KL value of every candidate threshold plus the chosen indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlCurve {
    /// `kl[i]` belongs to candidate `j = start + i`.
    #[serde(skip)]
    pub kl: Vec<f64>,
    pub start: usize,
    pub id_min: usize,
    pub kl_min: f64,
    pub id_opt: usize,
    #[serde(rename = "T")]
    pub tolerance: f64,
}

impl KlCurve {
    pub fn at(&self, j: usize) -> f64 {
        self.kl[j - self.start]
    }

    pub fn candidates(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.kl.iter().enumerate().map(|(i, &v)| (i + self.start, v))
    }
}

/// Reference and quantized distributions for candidate threshold `j`, both
/// 2048 long and zero from `j` on.
///
/// The reference keeps the first `j` bins and folds all mass above into bin
/// `j - 1`. The quantized one merges the unclipped first `j` bins into `levels`
/// coarse bins of width `j / levels`, splitting fine bins that straddle a
/// boundary by overlap, then spreads each coarse mass back over the fine bins
/// it covers that are non-empty in the reference, again by overlap.
pub fn merge_and_expand(h: &Histogram, j: usize, levels: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    check_candidate(h, j, levels)?;
    let total = h.total as f64;
    let mut p: Vec<f64> = h.bins.iter().map(|&b| b as f64).collect();
    let outliers: f64 = p[j..].iter().sum();
    p[j..].iter_mut().for_each(|v| *v = 0.0);
    let mut q = vec![0.0f64; NUM_BINS];
    for m in 0..levels {
        let (lo, hi) = coarse_span(m, j, levels);
        let (mut mass, mut support) = (0.0f64, 0.0f64);
        for i in lo.floor() as usize..(hi.ceil() as usize).min(j) {
            let o = overlap(i, lo, hi);
            mass += p[i] * o;
            if p[i] > 0.0 || (i == j - 1 && outliers > 0.0) {
                support += o;
            }
        }
        if support == 0.0 || mass == 0.0 {
            continue;
        }
        for i in lo.floor() as usize..(hi.ceil() as usize).min(j) {
            if p[i] > 0.0 || (i == j - 1 && outliers > 0.0) {
                q[i] += mass * overlap(i, lo, hi) / support;
            }
        }
    }
    p[j - 1] += outliers;
    p.iter_mut().for_each(|v| *v /= total);
    q.iter_mut().for_each(|v| *v /= total);
    for i in 0..j {
        if p[i] > 0.0 && q[i] == 0.0 {
            q[i] = KL_EPSILON;
        }
    }
    let zq: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= zq);
    Ok((p, q))
}

/// Fine-bin interval `[lo, hi)` covered by coarse bin `m`.
#[inline]
fn coarse_span(m: usize, j: usize, levels: usize) -> (f64, f64) {
    ((m * j) as f64 / levels as f64, ((m + 1) * j) as f64 / levels as f64)
}

#[inline]
fn overlap(i: usize, lo: f64, hi: f64) -> f64 {
    ((i + 1) as f64).min(hi) - (i as f64).max(lo)
}

fn check_candidate(h: &Histogram, j: usize, levels: usize) -> Result<()> {
    if levels == 0 || j < levels || j > NUM_BINS {
        return Err(Error::validation(format!("candidate {j} outside [{levels}, {NUM_BINS}]")));
    }
    if h.bins.len() != NUM_BINS {
        return Err(Error::validation("histogram must have 2048 bins"));
    }
    if h.total == 0 {
        return Err(Error::validation("histogram is empty"));
    }
    Ok(())
}

/// `sum P ln(P / Q)` over bins with `P > 0`; empty `Q` bins count as
/// [`KL_EPSILON`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::validation(format!("distribution lengths {} and {} differ", p.len(), q.len())));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / if qi > 0.0 { qi } else { KL_EPSILON }).ln())
        .sum())
}

/// Per-histogram tables shared by every candidate of one sweep.
struct SweepTables {
    counts: Vec<f64>,
    /// `count * ln(count)`, zero for empty bins.
    c_ln_c: Vec<f64>,
    /// Exact prefix sums of counts and of non-empty bins.
    cum: Vec<f64>,
    cum_nz: Vec<f64>,
    ln_total: f64,
}

/// One coarse bin of a candidate: fine bins `[a, b)` lie wholly inside it,
/// `(mass, support)` as in [`merge_and_expand`].
#[derive(Clone, Copy, Default)]
struct Coarse {
    a: usize,
    b: usize,
    hi: f64,
    mass: f64,
    support: f64,
}

impl Coarse {
    /// Quantized count spread over a fine bin with overlap `o`.
    fn share(&self, o: f64) -> f64 {
        if self.mass == 0.0 || self.support == 0.0 {
            0.0
        } else {
            self.mass * o / self.support
        }
    }
}

impl SweepTables {
    fn new(h: &Histogram) -> Self {
        let counts: Vec<f64> = h.bins.iter().map(|&b| b as f64).collect();
        let c_ln_c = counts.iter().map(|&c| if c > 0.0 { c * c.ln() } else { 0.0 }).collect();
        let (mut cum, mut cum_nz) = (vec![0.0; NUM_BINS + 1], vec![0.0; NUM_BINS + 1]);
        for i in 0..NUM_BINS {
            cum[i + 1] = cum[i] + counts[i];
            cum_nz[i + 1] = cum_nz[i] + if counts[i] > 0.0 { 1.0 } else { 0.0 };
        }
        Self { counts, c_ln_c, cum, cum_nz, ln_total: (h.total as f64).ln() }
    }

    /// Same value as `kl_divergence(merge_and_expand(h, j, levels))`. Fine
    /// bins wholly inside one coarse bin share one logarithm; only bins that
    /// straddle a coarse boundary, and the clipping bin, need their own.
    fn kl(&self, j: usize, levels: usize, total: f64, coarse: &mut [Coarse]) -> f64 {
        let c = &self.counts;
        let last = j - 1;
        let outliers = self.cum[NUM_BINS] - self.cum[j];
        let nonzero = |i: usize| c[i] > 0.0 || (i == last && outliers > 0.0);
        for (m, cb) in coarse.iter_mut().enumerate() {
            let (lo, hi) = coarse_span(m, j, levels);
            let (a, b) = (lo.ceil() as usize, (hi.floor() as usize).min(j));
            let mut mass = self.cum[b] - self.cum[a];
            let mut support = self.cum_nz[b] - self.cum_nz[a];
            if last >= a && last < b && c[last] == 0.0 && outliers > 0.0 {
                support += 1.0;
            }
            if (a as f64) > lo {
                let i = a - 1;
                let o = a as f64 - lo;
                mass += c[i] * o;
                if nonzero(i) {
                    support += o;
                }
            }
            if hi > b as f64 && b < j {
                let o = hi - b as f64;
                mass += c[b] * o;
                if nonzero(b) {
                    support += o;
                }
            }
            *cb = Coarse { a, b, hi, mass, support };
        }
        // Normalizer of Q after the epsilon substitution, in count units.
        let mut zq: f64 = coarse.iter().filter(|cb| cb.support != 0.0).map(|cb| cb.mass).sum::<f64>() / total;
        let q_last = coarse[levels - 1].share(1.0) / total;
        if nonzero(last) && q_last == 0.0 {
            zq += KL_EPSILON;
        }
        let ln_norm = self.ln_total + zq.ln();
        let mut kl = 0.0f64;
        for (m, cb) in coarse.iter().enumerate() {
            // Interior bins, the clipping bin excluded.
            let b = cb.b.min(last);
            if b > cb.a && cb.mass != 0.0 && cb.support != 0.0 {
                let sum_c = self.cum[b] - self.cum[cb.a];
                if sum_c > 0.0 {
                    let sum_clnc: f64 = self.c_ln_c[cb.a..b].iter().sum();
                    let ln_q = (cb.mass / cb.support).ln() - ln_norm;
                    kl += (sum_clnc - sum_c * self.ln_total) / total - sum_c / total * ln_q;
                }
            }
            // The bin holding this coarse bin's upper boundary.
            if cb.hi > cb.b as f64 && cb.b < last && c[cb.b] > 0.0 {
                let i = cb.b;
                let o = cb.hi - i as f64;
                let q = (cb.share(o) + coarse[m + 1].share(1.0 - o)) / total;
                let p = c[i] / total;
                kl += p * (p.ln() - (q.ln() - zq.ln()));
            }
        }
        if nonzero(last) {
            let p = (c[last] + outliers) / total;
            let ln_q = if q_last == 0.0 { KL_EPSILON.ln() } else { q_last.ln() } - zq.ln();
            kl += p * (p.ln() - ln_q);
        }
        kl
    }
}

/// Sweeps every candidate `j` in `[levels, 2048]` and returns the scale of the
/// largest candidate whose KL stays within `tolerance` times the minimum.
pub fn sweep_scale(h: &Histogram, tolerance: f64, levels: usize) -> Result<(f64, KlCurve)> {
    if !(tolerance >= 1.0) {
        return Err(Error::validation(format!("tolerance {tolerance} must be >= 1")));
    }
    if h.total == 0 || h.max_value <= 0.0 {
        return Err(Error::DegenerateSite { site: "<histogram>".into() });
    }
    check_candidate(h, levels, levels)?;
    let tables = SweepTables::new(h);
    let total = h.total as f64;
    let mut coarse = vec![Coarse::default(); levels];
    let kl: Vec<f64> = (levels..=NUM_BINS).map(|j| tables.kl(j, levels, total, &mut coarse)).collect();
    let curve = select(kl, levels, tolerance);
    let scale = (curve.id_opt as f64 + 0.5) * h.bin_width / levels as f64;
    Ok((scale, curve))
}

/// Smallest argmin, then the largest candidate within the tolerance band.
pub(crate) fn select(kl: Vec<f64>, start: usize, tolerance: f64) -> KlCurve {
    let (mut id_min, mut kl_min) = (start, kl[0]);
    for (i, &v) in kl.iter().enumerate() {
        if v < kl_min {
            kl_min = v;
            id_min = start + i;
        }
    }
    let bound = tolerance * kl_min;
    let id_opt = kl.iter().rposition(|&v| v <= bound).map_or(id_min, |i| start + i);
    KlCurve { kl, start, id_min, kl_min, id_opt, tolerance }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    #[serde(rename = "T")]
    pub tolerance: f64,
    pub batches: usize,
    pub batch_size: usize,
    pub bits: u8,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self { tolerance: 1.3, batches: 8, batch_size: 32, bits: 8 }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance >= 1.0 && self.tolerance.is_finite()) {
            return Err(Error::validation(format!("tolerance {} must be >= 1", self.tolerance)));
        }
        if self.batches == 0 || self.batch_size == 0 {
            return Err(Error::validation("calibration needs at least one non-empty batch"));
        }
        if !(2..=8).contains(&self.bits) {
            return Err(Error::validation(format!("activation bitwidth {} outside [2, 8]", self.bits)));
        }
        Ok(())
    }
}

/// Calibration result for one activation site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteProfile {
    #[serde(flatten)]
    pub params: QuantParams,
    #[serde(flatten)]
    pub curve: KlCurve,
    pub max_value: f64,
}

/// Site id to calibrated activation parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CalibrationProfile {
    pub sites: BTreeMap<String, SiteProfile>,
}

impl CalibrationProfile {
    pub fn params(&self, site: &str) -> Option<&QuantParams> {
        self.sites.get(site).map(|s| &s.params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        for (id, s) in &p.sites {
            s.params.validate().map_err(|e| Error::validation(format!("site `{id}`: {e}")))?;
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Writes `kl_<site>.csv` with `j,kl` rows per site; returns the paths.
    pub fn write_kl_csv(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for (id, s) in &self.sites {
            let mut csv = String::from("j,kl\n");
            for (j, v) in s.curve.candidates() {
                writeln!(csv, "{j},{v:e}").expect("write to String");
            }
            let path = dir.join(format!("kl_{}.csv", id.replace([':', '/', '\\'], "_")));
            fs::write(&path, csv)?;
            out.push(path);
        }
        Ok(out)
    }
}

/// Sample indices of calibration batch `b`; batches wrap around the set.
fn batch_indices(set: &Dataset, b: usize, batch_size: usize) -> Vec<usize> {
    (b * batch_size..(b + 1) * batch_size).map(|i| i % set.len()).collect()
}

/// Histograms of the values entering `sites`, pooled over `batches` batches of
/// the calibration set. The range is the global per-site maximum.
pub fn collect_histograms(
    g: &ModelGraph,
    set: &Dataset,
    batches: usize,
    batch_size: usize,
    sites: &[String],
) -> Result<BTreeMap<String, Histogram>> {
    if set.is_empty() || batches == 0 || batch_size == 0 {
        return Err(Error::validation("calibration needs at least one non-empty batch"));
    }
    if set.sample_shape() != g.input_shape.as_slice() {
        return Err(Error::validation("calibration data shape does not match graph input"));
    }
    let opts = ExecOptions::inference();
    let prog = Program::new(g, &opts)?;
    let slots: Vec<usize> = sites.iter().map(|s| site_source_slot(g, &prog, s)).collect::<Result<_>>()?;
    let run = |b: usize| -> Result<Vec<Vec<f32>>> {
        let (x, xd, _) = set.batch(&batch_indices(set, b, batch_size));
        let tape = prog.forward(x, xd, &opts)?;
        Ok(slots.iter().map(|&s| tape.slot(s).0.to_vec()).collect())
    };
    // Pass 1: global maxima. Pass 2: counts under the fixed range.
    let maxima = par::map_range(batches, |b| -> Result<Vec<f32>> {
        Ok(run(b)?.iter().map(|v| v.iter().fold(0.0f32, |m, x| m.max(x.abs()))).collect())
    });
    let mut max = vec![0.0f32; sites.len()];
    for m in maxima {
        max.iter_mut().zip(m?).for_each(|(a, b)| *a = a.max(b));
    }
    for (s, &m) in sites.iter().zip(&max) {
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::DegenerateSite { site: s.clone() });
        }
    }
    let partial = par::map_range(batches, |b| -> Result<Vec<Histogram>> {
        Ok(run(b)?
            .iter()
            .zip(&max)
            .map(|(v, &m)| {
                let mut h = Histogram::empty(m as f64);
                h.add(v);
                h
            })
            .collect())
    });
    let mut hists: Vec<Histogram> = max.iter().map(|&m| Histogram::empty(m as f64)).collect();
    for p in partial {
        hists.iter_mut().zip(p?).for_each(|(a, b)| a.merge(&b));
    }
    Ok(sites.iter().cloned().zip(hists).collect())
}

/// Calibrates every site the placement plan marks for quantization.
pub fn calibrate(g: &ModelGraph, set: &Dataset, cfg: &CalibConfig) -> Result<CalibrationProfile> {
    cfg.validate()?;
    if g.quant_sites.is_empty() {
        return Err(Error::validation("graph has no placement plan"));
    }
    let planned: Vec<(String, Signedness)> =
        g.quant_sites.iter().filter(|s| s.quantize).map(|s| (s.site_id(), s.signedness)).collect();
    let ids: Vec<String> = planned.iter().map(|(s, _)| s.clone()).collect();
    let hists = collect_histograms(g, set, cfg.batches, cfg.batch_size, &ids)?;
    profile_from_histograms(&hists, &planned, cfg.tolerance, cfg.bits)
}

/// Runs the sweep for every `(site, signedness)` on its histogram.
pub fn profile_from_histograms(
    hists: &BTreeMap<String, Histogram>,
    sites: &[(String, Signedness)],
    tolerance: f64,
    bits: u8,
) -> Result<CalibrationProfile> {
    let swept = par::map(sites, |(id, sign)| -> Result<(String, SiteProfile)> {
        let h = hists.get(id).ok_or_else(|| Error::validation(format!("no histogram for site `{id}`")))?;
        let levels = level_count(bits, *sign);
        let (scale, curve) = sweep_scale(h, tolerance, levels).map_err(|e| match e {
            Error::DegenerateSite { .. } => Error::DegenerateSite { site: id.clone() },
            other => other,
        })?;
        let params = QuantParams::layer_wise(scale as f32, bits, *sign);
        params.validate().map_err(|_| Error::DegenerateSite { site: id.clone() })?;
        Ok((id.clone(), SiteProfile { params, curve, max_value: h.max_value }))
    });
    let mut sites_out = BTreeMap::new();
    for r in swept {
        let (id, p) = r?;
        sites_out.insert(id, p);
    }
    Ok(CalibrationProfile { sites: sites_out })
}

/// `max|w| / (2^(b-1) - 1)` over the tensor or per output channel (dim 0).
/// All-zero channels get the smallest positive normal scale.
pub fn minmax_scale(w: &Tensor, bitwidth: u8, granularity: Granularity) -> Result<QuantParams> {
    let data = w.as_f32()?;
    if data.is_empty() {
        return Err(Error::validation("cannot scale an empty tensor"));
    }
    let qmax = ((1u32 << (bitwidth.clamp(2, 16) - 1)) - 1) as f32;
    let scale = |xs: &[f32]| {
        let m = xs.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        if m > 0.0 {
            (m / qmax).max(f32::MIN_POSITIVE)
        } else {
            f32::MIN_POSITIVE
        }
    };
    let p = match granularity {
        Granularity::LayerWise => QuantParams::layer_wise(scale(data), bitwidth, Signedness::Signed),
        Granularity::ChannelWise => {
            let oc = w.shape()[0];
            QuantParams::channel_wise(data.chunks(data.len() / oc).map(scale).collect(), bitwidth)
        }
    };
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_hist(seed: u64) -> Histogram {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let bins = (0..NUM_BINS)
            .map(|i| {
                let base = 5000.0 * (-(i as f64) / 300.0).exp();
                (base * rng.random::<f64>()) as u64 + u64::from(i == NUM_BINS - 1)
            })
            .collect();
        Histogram::from_bins(bins, 6.0).unwrap()
    }

    #[test]
    fn constant_activations_hit_top_bin() {
        let h = Histogram::from_values(&[2.5; 10]);
        assert_eq!(h.bins[NUM_BINS - 1], 10);
        assert_eq!(h.total, 10);
    }

    #[test]
    fn zeros_excluded() {
        let h = Histogram::from_values(&[0.0, 0.5, 1.0]);
        assert_eq!((h.total, h.max_value), (2, 1.0));
    }

    #[test]
    fn identity_merge_when_j_is_levels() {
        let mut bins = vec![0u64; NUM_BINS];
        (0..128).for_each(|i| bins[i] = (i as u64 * 7) % 13 + 1);
        let h = Histogram::from_bins(bins, 1.0).unwrap();
        let (p, q) = merge_and_expand(&h, 128, 128).unwrap();
        for i in 0..NUM_BINS {
            assert!((p[i] - q[i]).abs() < 1e-15, "bin {i}");
        }
    }

    #[test]
    fn uniform_stays_uniform() {
        let mut bins = vec![0u64; NUM_BINS];
        (0..512).for_each(|i| bins[i] = 4);
        let h = Histogram::from_bins(bins, 1.0).unwrap();
        let (p, q) = merge_and_expand(&h, 512, 128).unwrap();
        for i in 0..512 {
            assert!((q[i] - 1.0 / 512.0).abs() < 1e-15);
            assert!((p[i] - q[i]).abs() < 1e-15);
        }
        assert!(merge_and_expand(&h, 100, 128).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn fast_kl_matches_direct() {
        for seed in 0..3 {
            let h = random_hist(seed);
            let (_, curve) = sweep_scale(&h, 1.0, 128).unwrap();
            for j in [128, 129, 200, 333, 1000, 2047, 2048] {
                let (p, q) = merge_and_expand(&h, j, 128).unwrap();
                let direct = kl_divergence(&p, &q).unwrap();
                let fast = curve.at(j);
                assert!((direct - fast).abs() <= 1e-12 * direct.abs().max(1e-3), "j={j}: {direct} vs {fast}");
            }
        }
    }

    #[test]
    fn tolerance_rule() {
        let h = random_hist(9);
        let (s1, c1) = sweep_scale(&h, 1.0, 128).unwrap();
        let (s13, c13) = sweep_scale(&h, 1.3, 128).unwrap();
        assert_eq!(c1.id_opt, c1.id_min);
        assert!(c13.id_opt >= c1.id_opt && s13 >= s1);
        assert!(c13.at(c13.id_opt) <= 1.3 * c13.kl_min);
        assert!(sweep_scale(&h, 0.5, 128).is_err());
    }

    #[test]
    fn minmax_examples() {
        let w = Tensor::from_f32(vec![2, 2], vec![127.0, -3.0, 1.27, 0.5]).unwrap();
        let lw = minmax_scale(&w, 8, Granularity::LayerWise).unwrap();
        assert!((lw.scales[0] - 1.0).abs() < 1e-7);
        let cw = minmax_scale(&w, 8, Granularity::ChannelWise).unwrap();
        assert!((cw.scales[0] - 1.0).abs() < 1e-7 && (cw.scales[1] - 0.01).abs() < 1e-8);
        let z = Tensor::from_f32(vec![2, 1], vec![0.0, 12.7]).unwrap();
        let zc = minmax_scale(&z, 8, Granularity::ChannelWise).unwrap();
        assert_eq!(zc.scales[0], f32::MIN_POSITIVE);
        assert!((zc.scales[1] - 0.1).abs() < 1e-7);
    }
}
