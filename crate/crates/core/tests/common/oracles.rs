//! Brute-force reference implementations. They follow the library's recorded
//! conventions (rounding, epsilon, clipping, tie rules) but share none of its
//! code.

use std::collections::{BTreeMap, HashMap};

use quantkit::graph::{LayerKind, ModelGraph};

pub const BINS: usize = 2048;
pub const EPS_KL: f64 = 1e-9;

/// Deviation summary over a batch of oracle comparisons.
#[derive(Debug, Clone, Default)]
pub struct OracleReport {
    pub cases: usize,
    pub max_abs: f64,
    pub max_rel: f64,
    pub failures: usize,
    pub first_failure: Option<String>,
}

impl OracleReport {
    /// Records one comparison; `rel` uses `max(|expected|, |got|, floor)`.
    pub fn compare(&mut self, case: impl FnOnce() -> String, expected: f64, got: f64, floor: f64) -> (f64, f64) {
        let abs = (expected - got).abs();
        let rel = abs / expected.abs().max(got.abs()).max(floor);
        self.max_abs = self.max_abs.max(abs);
        self.max_rel = self.max_rel.max(rel);
        self.cases += 1;
        if !abs.is_finite() {
            self.fail(case());
        }
        (abs, rel)
    }

    pub fn fail(&mut self, case: String) {
        self.failures += 1;
        if self.first_failure.is_none() {
            self.first_failure = Some(case);
        }
    }

    pub fn ok(&self) -> bool {
        self.failures == 0
    }
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} cases, max abs {:.2e}, max rel {:.2e}, {} failures",
            self.cases, self.max_abs, self.max_rel, self.failures
        )?;
        if let Some(first) = &self.first_failure {
            write!(f, ", first {first}")?;
        }
        Ok(())
    }
}

/// Direct nested-loop convolution, NCHW input and OIHW weights.
#[allow(clippy::too_many_arguments)]
pub fn oracle_conv(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    wt: &[f64],
    [o, cg, kh, kw]: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, [usize; 4]) {
    assert_eq!(c / groups, cg);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let per_group_out = o / groups;
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for oc in 0..o {
            let gidx = oc / per_group_out;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for ic in 0..cg {
                        let cin = gidx * cg + ic;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((s * c + cin) * h + iy as usize) * w + ix as usize];
                                let wv = wt[((oc * cg + ic) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((s * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

type Value = (Vec<f64>, [usize; 4]);

/// Plain f64 evaluation of a graph with BN in inference mode. `params`
/// overrides graph parameters by name. Returns the output node's values.
pub fn oracle_forward(g: &ModelGraph, params: &BTreeMap<String, Vec<f64>>, x: &[f64], n: usize) -> Value {
    let (mut vals, last) = oracle_forward_all(g, params, x, n);
    vals.remove(&last).unwrap()
}

/// Every node's value plus the id of the last node evaluated.
pub fn oracle_forward_all(
    g: &ModelGraph,
    params: &BTreeMap<String, Vec<f64>>,
    x: &[f64],
    n: usize,
) -> (HashMap<String, Value>, String) {
    oracle_forward_hooked(g, params, x, n, &|_, v| v.to_vec())
}

/// Site hook: `(consumer:index, value) -> value seen by the consumer`.
pub type SiteHook<'a> = &'a dyn Fn(&str, &[f64]) -> Vec<f64>;

/// As [`oracle_forward_all`], with every node input passed through `hook`.
pub fn oracle_forward_hooked(
    g: &ModelGraph,
    params: &BTreeMap<String, Vec<f64>>,
    x: &[f64],
    n: usize,
    hook: SiteHook,
) -> (HashMap<String, Value>, String) {
    let p = |name: &str| -> Vec<f64> {
        params.get(name).cloned().unwrap_or_else(|| g.param_f32(name).unwrap().iter().map(|&v| v as f64).collect())
    };
    let [c0, h0, w0] = [g.input_shape[0], g.input_shape[1], g.input_shape[2]];
    let mut vals: HashMap<String, Value> = HashMap::new();
    vals.insert("input".into(), (x.to_vec(), [n, c0, h0, w0]));
    let mut remaining: Vec<_> = g.nodes.iter().collect();
    let mut last = String::new();
    while !remaining.is_empty() {
        let idx =
            remaining.iter().position(|nd| nd.inputs.iter().all(|i| vals.contains_key(i))).expect("graph is acyclic");
        let nd = remaining.remove(idx);
        let seen: Vec<Value> = nd
            .inputs
            .iter()
            .enumerate()
            .map(|(k, i)| (hook(&format!("{}:{k}", nd.id), &vals[i].0), vals[i].1))
            .collect();
        let (a, ad) = seen[0].clone();
        let out = match &nd.kind {
            LayerKind::Conv2D(at) => {
                let wt = g.param(&nd.params[0]).unwrap().shape().to_vec();
                let b = nd.params.get(1).map(|b| p(b));
                oracle_conv(
                    &a,
                    ad,
                    &p(&nd.params[0]),
                    [wt[0], wt[1], wt[2], wt[3]],
                    b.as_deref(),
                    at.stride,
                    at.padding,
                    at.groups,
                )
            }
            LayerKind::BatchNorm { eps } => {
                let (gm, bt, mu, var) = (p(&nd.params[0]), p(&nd.params[1]), p(&nd.params[2]), p(&nd.params[3]));
                let plane = ad[2] * ad[3];
                let out = a
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let ch = (i / plane) % ad[1];
                        gm[ch] * (v - mu[ch]) / (var[ch] + *eps as f64).sqrt() + bt[ch]
                    })
                    .collect();
                (out, ad)
            }
            LayerKind::ReLU => (a.iter().map(|&v| v.max(0.0)).collect(), ad),
            LayerKind::Add => {
                let (b, _) = &seen[1];
                (a.iter().zip(b).map(|(x, y)| x + y).collect(), ad)
            }
            LayerKind::AvgPool { kernel } | LayerKind::MaxPool { kernel } => {
                let k = *kernel;
                let is_max = matches!(nd.kind, LayerKind::MaxPool { .. });
                let (oh, ow) = (ad[2] / k, ad[3] / k);
                let mut out = Vec::with_capacity(ad[0] * ad[1] * oh * ow);
                for s in 0..ad[0] * ad[1] {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let cells = (0..k)
                                .flat_map(|dy| (0..k).map(move |dx| (dy, dx)))
                                .map(|(dy, dx)| a[(s * ad[2] + y * k + dy) * ad[3] + xx * k + dx]);
                            out.push(if is_max {
                                cells.fold(f64::NEG_INFINITY, f64::max)
                            } else {
                                cells.sum::<f64>() / (k * k) as f64
                            });
                        }
                    }
                }
                (out, [ad[0], ad[1], oh, ow])
            }
            LayerKind::FullyConnected { out_features } => {
                let fin = ad[1] * ad[2] * ad[3];
                let (wv, bv) = (p(&nd.params[0]), nd.params.get(1).map(|b| p(b)));
                let mut out = vec![0.0; ad[0] * out_features];
                for s in 0..ad[0] {
                    for o in 0..*out_features {
                        let mut acc = bv.as_ref().map_or(0.0, |b| b[o]);
                        for i in 0..fin {
                            acc += wv[o * fin + i] * a[s * fin + i];
                        }
                        out[s * out_features + o] = acc;
                    }
                }
                (out, [ad[0], *out_features, 1, 1])
            }
            LayerKind::Softmax => {
                let k = ad[1] * ad[2] * ad[3];
                let mut out = a.clone();
                for row in out.chunks_mut(k) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    row.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
                }
                (out, ad)
            }
        };
        last = nd.id.clone();
        vals.insert(nd.id.clone(), out);
    }
    (vals, last)
}

/// Smallest `|v|` over every ReLU input; finite differences are only
/// trusted when this stays well above the perturbation size.
pub fn min_relu_margin(g: &ModelGraph, x: &[f64], n: usize) -> f64 {
    let (vals, _) = oracle_forward_all(g, &BTreeMap::new(), x, n);
    g.nodes
        .iter()
        .filter(|nd| matches!(nd.kind, LayerKind::ReLU))
        .flat_map(|nd| vals[&nd.inputs[0]].0.iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

/// Mean softmax cross-entropy in f64.
pub fn oracle_ce(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let mut loss = 0.0;
    for (row, &l) in logits.chunks(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[l];
    }
    loss / labels.len() as f64
}

/// Central difference `(f(x + h) - f(x - h)) / 2h`.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central-difference estimate of d loss / d `param[index]`, with the loss
/// evaluated by the f64 oracle forward pass.
pub fn oracle_finite_diff(g: &ModelGraph, param: &str, index: usize, x: &[f64], labels: &[usize], step: f64) -> f64 {
    let base: Vec<f64> = g.param_f32(param).unwrap().iter().map(|&v| v as f64).collect();
    let loss_at = |v: f64| {
        let mut p = base.clone();
        p[index] = v;
        let mut over = BTreeMap::new();
        over.insert(param.to_string(), p);
        let (out, d) = oracle_forward(g, &over, x, labels.len());
        oracle_ce(&out, d[1] * d[2] * d[3], labels)
    };
    central_diff(loss_at, base[index], step)
}

/// The reference distribution, clipped at `j`, and the expanded quantized
/// distribution for one candidate, written step by step.
pub fn oracle_distributions(bins: &[u64], j: usize, levels: usize) -> (Vec<f64>, Vec<f64>) {
    let total: f64 = bins.iter().map(|&b| b as f64).sum();
    // Reference: first j bins, everything above goes into bin j-1.
    let mut reference = vec![0.0; BINS];
    for i in 0..BINS {
        if i < j {
            reference[i] = bins[i] as f64;
        } else {
            reference[j - 1] += bins[i] as f64;
        }
    }
    // Quantized: merge the unclipped first j bins into `levels` coarse bins.
    let mut quantized = vec![0.0; BINS];
    for m in 0..levels {
        let start = (m * j) as f64 / levels as f64;
        let end = ((m + 1) * j) as f64 / levels as f64;
        let first = start.floor() as usize;
        let stop = (end.ceil() as usize).min(j);
        let frac = |i: usize| ((i + 1) as f64).min(end) - (i as f64).max(start);
        let mut mass = 0.0;
        let mut width = 0.0;
        for i in first..stop {
            mass += bins[i] as f64 * frac(i);
            if reference[i] != 0.0 {
                width += frac(i);
            }
        }
        if mass == 0.0 || width == 0.0 {
            continue;
        }
        for i in first..stop {
            if reference[i] != 0.0 {
                quantized[i] += mass * frac(i) / width;
            }
        }
    }
    for v in reference.iter_mut() {
        *v /= total;
    }
    for v in quantized.iter_mut() {
        *v /= total;
    }
    for i in 0..BINS {
        if reference[i] != 0.0 && quantized[i] == 0.0 {
            quantized[i] = EPS_KL;
        }
    }
    let z: f64 = quantized.iter().sum();
    for v in quantized.iter_mut() {
        *v /= z;
    }
    (reference, quantized)
}

pub fn oracle_kl(p: &[f64], q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for i in 0..p.len() {
        if p[i] != 0.0 {
            let qi = if q[i] == 0.0 { EPS_KL } else { q[i] };
            kl += p[i] * (p[i] / qi).ln();
        }
    }
    kl
}

/// KL for every candidate `j` in `[levels, 2048]`, indexed by `j - levels`.
pub fn oracle_kl_curve(bins: &[u64], levels: usize) -> Vec<f64> {
    (levels..=BINS)
        .map(|j| {
            let (p, q) = oracle_distributions(bins, j, levels);
            oracle_kl(&p, &q)
        })
        .collect()
}

/// `(ID_min, ID_opt, scale)` from a KL curve.
pub fn oracle_select(curve: &[f64], levels: usize, tolerance: f64, max_value: f64) -> (usize, usize, f64) {
    let mut id_min = levels;
    let mut kl_min = f64::INFINITY;
    for (k, &v) in curve.iter().enumerate() {
        if v < kl_min {
            kl_min = v;
            id_min = levels + k;
        }
    }
    let mut id_opt = id_min;
    for (k, &v) in curve.iter().enumerate() {
        if v <= tolerance * kl_min {
            id_opt = levels + k;
        }
    }
    let width = max_value / BINS as f64;
    (id_min, id_opt, (id_opt as f64 + 0.5) * width / levels as f64)
}

pub fn oracle_kl_sweep(bins: &[u64], max_value: f64, tolerance: f64, levels: usize) -> (usize, usize, f64) {
    oracle_select(&oracle_kl_curve(bins, levels), levels, tolerance, max_value)
}

/// Histogram of `|v|` for nonzero finite values over `[0, max]`.
pub fn oracle_histogram(values: &[f32], max: f64) -> Vec<u64> {
    let mut bins = vec![0u64; BINS];
    let width = max / BINS as f64;
    for &v in values {
        if v != 0.0 && v.is_finite() {
            let mut i = (v.abs() as f64 / width).floor() as usize;
            if i >= BINS {
                i = BINS - 1;
            }
            bins[i] += 1;
        }
    }
    bins
}

/// `(name, flat index)` of every weight the global magnitude rule zeroes:
/// sort by `(|w|, position in the name-ordered concatenation)` and take the
/// first `floor(s * N)`.
pub fn oracle_prune_set(g: &ModelGraph, s: f64) -> Vec<(String, usize)> {
    let mut names: Vec<String> = g.nodes.iter().filter(|n| n.kind.is_linear()).map(|n| n.params[0].clone()).collect();
    names.sort();
    let mut all = Vec::new();
    for name in &names {
        for (i, &w) in g.param_f32(name).unwrap().iter().enumerate() {
            all.push((w.abs(), all.len(), name.clone(), i));
        }
    }
    let n = (s * all.len() as f64).floor() as usize;
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(n).map(|(_, _, name, i)| (name, i)).collect()
}

/// Top-1 hits by a literal argmax scan; ties go to the lower class index.
pub fn oracle_top1_hits(logits: &[f32], k: usize, labels: &[usize]) -> usize {
    let mut hits = 0;
    for (row, &l) in logits.chunks(k).zip(labels) {
        let mut best = 0;
        for c in 1..k {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == l {
            hits += 1;
        }
    }
    hits
}

/// Symmetric quantizer in f64: half-away-from-zero rounding, clamped codes.
#[derive(Debug, Clone)]
pub struct OracleQuantizer {
    /// One scale, or one per leading-axis channel.
    pub scales: Vec<f64>,
    pub qmin: f64,
    pub qmax: f64,
}

impl OracleQuantizer {
    fn scale(&self, i: usize, len: usize) -> f64 {
        if self.scales.len() == 1 {
            self.scales[0]
        } else {
            self.scales[i / (len / self.scales.len())]
        }
    }

    /// `(fake-quantized value, inside the clamp range)` for element `i`.
    /// The inclusive bounds `q * scale` are taken in f32, the precision
    /// scales are stored in, so a MinMax maximum sits exactly on its bound.
    pub fn apply(&self, v: f64, i: usize, len: usize) -> (f64, bool) {
        let s = self.scale(i, len);
        let q = (v / s).round();
        let bound = |q: f64| (q as f32 * s as f32) as f64;
        let inside = v >= bound(self.qmin) && v <= bound(self.qmax);
        (q.clamp(self.qmin, self.qmax) * s, inside)
    }
}

/// Loss of the straight-through surrogate network. Every quantizer `q` is
/// replaced by `v -> v + (q(v0) - v0)` where `v0` was inside the range and by
/// the constant `q(v0)` elsewhere; `v0` is the value under `base`. The
/// surrogate equals the fake-quantized network at `base`, and its derivative
/// is the straight-through gradient. `weights` is keyed by parameter name,
/// `acts` by site id.
pub fn ste_surrogate_loss(
    g: &ModelGraph,
    weights: &BTreeMap<String, OracleQuantizer>,
    acts: &BTreeMap<String, OracleQuantizer>,
    base: &BTreeMap<String, Vec<f64>>,
    params: &BTreeMap<String, Vec<f64>>,
    x: &[f64],
    labels: &[usize],
) -> f64 {
    let n = labels.len();
    let surrogate = |q: &OracleQuantizer, v0: &[f64], v: &[f64]| -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(i, &vi)| {
                let (f0, inside) = q.apply(v0[i], i, v0.len());
                if inside {
                    vi + (f0 - v0[i])
                } else {
                    f0
                }
            })
            .collect()
    };
    let effective = |ps: &BTreeMap<String, Vec<f64>>| -> BTreeMap<String, Vec<f64>> {
        let mut out = ps.clone();
        for (name, q) in weights {
            out.insert(name.clone(), surrogate(q, &base[name], &ps[name]));
        }
        out
    };
    // Site values at the base point.
    let recorded = std::cell::RefCell::new(HashMap::<String, Vec<f64>>::new());
    let record = |site: &str, v: &[f64]| -> Vec<f64> {
        match acts.get(site) {
            Some(q) => {
                recorded.borrow_mut().insert(site.to_string(), v.to_vec());
                surrogate(q, v, v)
            }
            None => v.to_vec(),
        }
    };
    oracle_forward_hooked(g, &effective(base), x, n, &record);
    let recorded = recorded.into_inner();
    let replay = |site: &str, v: &[f64]| -> Vec<f64> {
        match acts.get(site) {
            Some(q) => surrogate(q, &recorded[site], v),
            None => v.to_vec(),
        }
    };
    let (mut vals, last) = oracle_forward_hooked(g, &effective(params), x, n, &replay);
    let (out, d) = vals.remove(&last).unwrap();
    oracle_ce(&out, d[1] * d[2] * d[3], labels)
}

/// Central difference of [`ste_surrogate_loss`] in `param[index]` around the
/// graph's current parameters.
pub fn ste_finite_diff(
    g: &ModelGraph,
    weights: &BTreeMap<String, OracleQuantizer>,
    acts: &BTreeMap<String, OracleQuantizer>,
    param: &str,
    index: usize,
    x: &[f64],
    labels: &[usize],
    step: f64,
) -> f64 {
    let base: BTreeMap<String, Vec<f64>> = g
        .params
        .iter()
        .filter_map(|(k, t)| t.as_f32().ok().map(|v| (k.clone(), v.iter().map(|&a| a as f64).collect())))
        .collect();
    let loss_at = |v: f64| {
        let mut p = base.clone();
        p.get_mut(param).unwrap()[index] = v;
        ste_surrogate_loss(g, weights, acts, &base, &p, x, labels)
    };
    central_diff(loss_at, base[param][index], step)
}
