//! Concrete-score models over Hamming-1 neighbors.
//!
//! `s(x, t)_y` approximates `p_t(y) / p_t(x)`. Two models are provided:
//!
//! * [`ScoreParams`]: a tabular log-parameterization indexed by
//!   `(time bucket, position, current token, proposed token)`. The gradient of
//!   `log s` with respect to the table is one-hot.
//! * [`TeacherScore`]: exact ratios of the forward marginals of a data
//!   distribution parameterized by its logits. Because the score is the exact
//!   ratio of the distribution it generates, its log-gradients coincide with
//!   the log-gradients of the true ratios. It is defined for every pair of
//!   states, not only Hamming-1 neighbors.
//!
//! All times are forward (noising) times in `[0, T]`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};

use crate::ctmc::{GeneratorKind, NoiseSchedule, SequenceSpec, TokenGenerator, TransitionKernel};
use crate::error::{Error, Result};
use crate::oracle::{self, IndexCodec, SimplexDist};

/// Score values `s(x, t)_y` for every Hamming-1 neighbor `y` of an anchor `x`.
///
/// Stored densely as `n x m`; the slot `(i, x_i)` holds `1` and excluded
/// transitions hold `0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    anchor: Vec<usize>,
    time: f64,
    m: usize,
    values: Vec<f64>,
}

impl NeighborTable {
    pub fn filled(anchor: &[usize], time: f64, m: usize, value: f64) -> Self {
        let mut values = vec![value; anchor.len() * m];
        for (i, &a) in anchor.iter().enumerate() {
            values[i * m + a] = 1.0;
        }
        Self {
            anchor: anchor.to_vec(),
            time,
            m,
            values,
        }
    }

    #[inline]
    pub fn value(&self, pos: usize, token: usize) -> f64 {
        self.values[pos * self.m + token]
    }

    pub fn set(&mut self, pos: usize, token: usize, value: f64) {
        self.values[pos * self.m + token] = value;
    }

    pub fn anchor(&self) -> &[usize] {
        &self.anchor
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn n(&self) -> usize {
        self.anchor.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Iterates `(position, token, value)` over the proper neighbors.
    pub fn neighbors(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let m = self.m;
        self.anchor.iter().enumerate().flat_map(move |(i, &a)| {
            (0..m)
                .filter(move |&b| b != a)
                .map(move |b| (i, b, self.values[i * m + b]))
        })
    }
}

/// A single nonzero coordinate list; tabular log-gradients are one-hot.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient {
    pub entries: Vec<(usize, f64)>,
}

/// Finds the position and new token where `y` differs from `x`.
pub fn neighbor_position(x: &[usize], y: &[usize]) -> Result<(usize, usize)> {
    if x.len() != y.len() {
        return Err(Error::Adjacency);
    }
    let mut diff = x.iter().zip(y).enumerate().filter(|(_, (a, b))| a != b);
    match (diff.next(), diff.next()) {
        (Some((i, (_, &b))), None) => Ok((i, b)),
        _ => Err(Error::Adjacency),
    }
}

/// Parameterized concrete score.
pub trait ScoreModel: Send + Sync {
    fn spec(&self) -> &SequenceSpec;

    fn num_params(&self) -> usize;

    fn params(&self) -> &[f64];

    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    /// `log s(x, t)_y` where `y` is `x` with `x[pos]` replaced by `token`.
    /// Excluded transitions return `-inf`.
    fn log_score(&self, x: &[usize], t: f64, pos: usize, token: usize) -> Result<f64>;

    /// Accumulates `scale * grad_theta log s(x, t)_y` into `grad`.
    fn add_grad_log_score(
        &self,
        x: &[usize],
        t: f64,
        pos: usize,
        token: usize,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()>;

    fn eval_score(&self, x: &[usize], t: f64) -> Result<NeighborTable> {
        let m = self.spec().m();
        let mut table = NeighborTable::filled(x, t, m, 0.0);
        for (i, &a) in x.iter().enumerate() {
            for b in (0..m).filter(|&b| b != a) {
                table.set(i, b, self.log_score(x, t, i, b)?.exp());
            }
        }
        Ok(table)
    }

    /// Whether [`ScoreModel::full_log_ratio`] is available for arbitrary pairs.
    fn supports_full_space(&self) -> bool {
        false
    }

    /// `log s(x, t)_y` for an arbitrary `y != x`.
    fn full_log_ratio(&self, x: &[usize], y: &[usize], t: f64) -> Result<f64> {
        let (pos, token) = neighbor_position(x, y)?;
        self.log_score(x, t, pos, token)
    }

    fn add_grad_full_log_ratio(
        &self,
        x: &[usize],
        y: &[usize],
        t: f64,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let (pos, token) = neighbor_position(x, y)?;
        self.add_grad_log_score(x, t, pos, token, scale, grad)
    }
}

/// Tabular log-score `table[bucket, position, current, proposed]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreParams {
    spec: SequenceSpec,
    kind: GeneratorKind,
    horizon: f64,
    n_buckets: usize,
    shared_positions: bool,
    table: Vec<f64>,
}

impl ScoreParams {
    /// Zero-initialized table (all ratios 1) with excluded entries pinned to `-inf`.
    pub fn new(
        spec: SequenceSpec,
        kind: GeneratorKind,
        horizon: f64,
        n_buckets: usize,
        shared_positions: bool,
    ) -> Result<Self> {
        if n_buckets == 0 {
            return Err(Error::config("n_buckets must be >= 1"));
        }
        if !(horizon > 0.0) {
            return Err(Error::config("horizon must be positive"));
        }
        if kind == GeneratorKind::Absorbing && spec.vocab().mask_index().is_none() {
            return Err(Error::config("absorbing score table requires a mask index"));
        }
        let n_pos = if shared_positions { 1 } else { spec.len() };
        let m = spec.m();
        let mut out = Self {
            spec,
            kind,
            horizon,
            n_buckets,
            shared_positions,
            table: vec![0.0; n_buckets * n_pos * m * m],
        };
        out.pin_excluded();
        Ok(out)
    }

    pub fn for_generator(
        spec: SequenceSpec,
        g: &TokenGenerator,
        horizon: f64,
        n_buckets: usize,
    ) -> Result<Self> {
        Self::new(spec, g.kind(), horizon, n_buckets, false)
    }

    pub fn kind(&self) -> GeneratorKind {
        self.kind
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_buckets(&self) -> usize {
        self.n_buckets
    }

    pub fn shared_positions(&self) -> bool {
        self.shared_positions
    }

    fn n_pos(&self) -> usize {
        if self.shared_positions {
            1
        } else {
            self.spec.len()
        }
    }

    /// Whether the transition `current -> proposed` carries a free parameter.
    pub fn is_free(&self, current: usize, proposed: usize) -> bool {
        if current == proposed {
            return false;
        }
        match self.kind {
            GeneratorKind::Uniform => true,
            GeneratorKind::Absorbing => {
                let mask = self.spec.vocab().mask_index().expect("validated");
                current == mask && proposed != mask
            }
        }
    }

    fn pin_excluded(&mut self) {
        let m = self.spec.m();
        for b in 0..self.n_buckets {
            for i in 0..self.n_pos() {
                for a in 0..m {
                    for c in 0..m {
                        let idx = self.raw_index(b, i, a, c);
                        if a == c {
                            self.table[idx] = 0.0;
                        } else if !self.is_free(a, c) {
                            self.table[idx] = f64::NEG_INFINITY;
                        }
                    }
                }
            }
        }
    }

    #[inline]
    fn raw_index(&self, bucket: usize, pos: usize, current: usize, proposed: usize) -> usize {
        let m = self.spec.m();
        ((bucket * self.n_pos() + pos) * m + current) * m + proposed
    }

    /// Flat parameter index of `(bucket, position, current, proposed)`.
    pub fn index(&self, bucket: usize, pos: usize, current: usize, proposed: usize) -> usize {
        let pos = if self.shared_positions { 0 } else { pos };
        self.raw_index(bucket, pos, current, proposed)
    }

    pub fn bucket(&self, t: f64) -> Result<usize> {
        let tol = 1e-12 * self.horizon.max(1.0);
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(Error::domain(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )));
        }
        let b = ((t / self.horizon) * self.n_buckets as f64).floor();
        Ok((b.max(0.0) as usize).min(self.n_buckets - 1))
    }

    pub fn entry(&self, bucket: usize, pos: usize, current: usize, proposed: usize) -> f64 {
        self.table[self.index(bucket, pos, current, proposed)]
    }

    pub fn set_entry(
        &mut self,
        bucket: usize,
        pos: usize,
        current: usize,
        proposed: usize,
        log_value: f64,
    ) -> Result<()> {
        if !self.is_free(current, proposed) {
            return Err(Error::domain("entry is pinned for this generator kind"));
        }
        if !log_value.is_finite() {
            return Err(Error::domain("log score must be finite"));
        }
        let idx = self.index(bucket, pos, current, proposed);
        self.table[idx] = log_value;
        Ok(())
    }

    /// One-hot gradient of `log s(x, t)_y` with respect to the table.
    pub fn grad_log_score(&self, x: &[usize], t: f64, y: &[usize]) -> Result<SparseGradient> {
        let (pos, token) = neighbor_position(x, y)?;
        if !self.is_free(x[pos], token) {
            return Ok(SparseGradient {
                entries: Vec::new(),
            });
        }
        let b = self.bucket(t)?;
        Ok(SparseGradient {
            entries: vec![(self.index(b, pos, x[pos], token), 1.0)],
        })
    }

    /// Mask of parameters that are trainable.
    pub fn free_mask(&self) -> Vec<bool> {
        let m = self.spec.m();
        let mut mask = vec![false; self.table.len()];
        for b in 0..self.n_buckets {
            for i in 0..self.n_pos() {
                for a in 0..m {
                    for c in 0..m {
                        mask[self.raw_index(b, i, a, c)] = self.is_free(a, c);
                    }
                }
            }
        }
        mask
    }

    /// Writes the checkpoint text format.
    ///
    /// ```text
    /// # sepo score checkpoint v1
    /// n = 8
    /// m = 4
    /// mask = none
    /// kind = uniform
    /// buckets = 16
    /// shared = false
    /// horizon = 1
    /// schedule = 3f1c9a0b77d2e410
    /// values = 2048
    /// <one value per line>
    /// ```
    ///
    /// Values use the shortest decimal representation that parses back to the
    /// same bits, so save/load is bit-exact.
    pub fn to_checkpoint_string(&self, sched: &NoiseSchedule) -> String {
        let mut s = String::from("# sepo score checkpoint v1\n");
        let mask = self
            .spec
            .vocab()
            .mask_index()
            .map_or("none".to_string(), |v| v.to_string());
        let kind = match self.kind {
            GeneratorKind::Uniform => "uniform",
            GeneratorKind::Absorbing => "absorbing",
        };
        let _ = writeln!(s, "n = {}", self.spec.len());
        let _ = writeln!(s, "m = {}", self.spec.m());
        let _ = writeln!(s, "mask = {mask}");
        let _ = writeln!(s, "kind = {kind}");
        let _ = writeln!(s, "buckets = {}", self.n_buckets);
        let _ = writeln!(s, "shared = {}", self.shared_positions);
        let _ = writeln!(s, "horizon = {}", self.horizon);
        let _ = writeln!(s, "schedule = {}", sched.fingerprint());
        let _ = writeln!(s, "values = {}", self.table.len());
        for v in &self.table {
            let _ = writeln!(s, "{v}");
        }
        s
    }

    /// Parses a checkpoint; returns the parameters and the schedule fingerprint.
    pub fn from_checkpoint_str(text: &str) -> Result<(Self, String)> {
        let mut header: HashMap<&str, &str> = HashMap::new();
        let mut lines = text.lines().filter(|l| !l.trim_start().starts_with('#'));
        for line in lines.by_ref() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header line {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            header.insert(k, v);
            if k == "values" {
                break;
            }
        }
        let get = |k: &str| {
            header
                .get(k)
                .copied()
                .ok_or_else(|| Error::Parse(format!("missing {k}")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Parse(format!("bad {k}")))
        };
        let n = parse_usize("n")?;
        let m = parse_usize("m")?;
        let mask = match get("mask")? {
            "none" => None,
            v => Some(v.parse().map_err(|_| Error::Parse("bad mask".into()))?),
        };
        let kind = match get("kind")? {
            "uniform" => GeneratorKind::Uniform,
            "absorbing" => GeneratorKind::Absorbing,
            other => return Err(Error::Parse(format!("unknown kind {other}"))),
        };
        let buckets = parse_usize("buckets")?;
        let shared: bool = get("shared")?
            .parse()
            .map_err(|_| Error::Parse("bad shared".into()))?;
        let horizon: f64 = get("horizon")?
            .parse()
            .map_err(|_| Error::Parse("bad horizon".into()))?;
        let schedule = get("schedule")?.to_string();
        let count = parse_usize("values")?;
        let spec = SequenceSpec::new(n, crate::ctmc::Vocab::new(m, mask)?)?;
        let mut out = Self::new(spec, kind, horizon, buckets, shared)?;
        let values: Vec<f64> = lines
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad value {l:?}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != count || count != out.table.len() {
            return Err(Error::Parse(format!(
                "expected {} values, header says {count}, found {}",
                out.table.len(),
                values.len()
            )));
        }
        out.table = values;
        Ok((out, schedule))
    }

    pub fn save(&self, path: &Path, sched: &NoiseSchedule) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string(sched))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }
}

impl ScoreModel for ScoreParams {
    fn spec(&self) -> &SequenceSpec {
        &self.spec
    }

    fn num_params(&self) -> usize {
        self.table.len()
    }

    fn params(&self) -> &[f64] {
        &self.table
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.table.len() {
            return Err(Error::domain(format!(
                "expected {} parameters, got {}",
                self.table.len(),
                params.len()
            )));
        }
        self.table.copy_from_slice(params);
        self.pin_excluded();
        if self.table.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::domain("score parameters must not be NaN or +inf"));
        }
        Ok(())
    }

    #[inline]
    fn log_score(&self, x: &[usize], t: f64, pos: usize, token: usize) -> Result<f64> {
        let b = self.bucket(t)?;
        Ok(self.table[self.index(b, pos, x[pos], token)])
    }

    fn add_grad_log_score(
        &self,
        x: &[usize],
        t: f64,
        pos: usize,
        token: usize,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        if self.is_free(x[pos], token) {
            let b = self.bucket(t)?;
            grad[self.index(b, pos, x[pos], token)] += scale;
        }
        Ok(())
    }

    fn eval_score(&self, x: &[usize], t: f64) -> Result<NeighborTable> {
        let b = self.bucket(t)?;
        let m = self.spec.m();
        let mut table = NeighborTable::filled(x, t, m, 0.0);
        for (i, &a) in x.iter().enumerate() {
            let base = self.index(b, i, a, 0);
            for c in (0..m).filter(|&c| c != a) {
                table.set(i, c, self.table[base + c].exp());
            }
        }
        Ok(table)
    }
}

/// Exact ratios of the forward marginals of `softmax(logits)`.
///
/// Parameters are the logits of the data distribution (`-inf` for states with
/// zero mass). Marginals are computed in closed form and memoized per time.
#[derive(Debug)]
pub struct TeacherScore {
    spec: SequenceSpec,
    gen: TokenGenerator,
    sched: NoiseSchedule,
    codec: IndexCodec,
    logits: Vec<f64>,
    probs: Vec<f64>,
    cache: Mutex<HashMap<u64, Arc<Vec<f64>>>>,
}

impl Clone for TeacherScore {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec,
            gen: self.gen.clone(),
            sched: self.sched,
            codec: self.codec,
            logits: self.logits.clone(),
            probs: self.probs.clone(),
            cache: Mutex::new(HashMap::new()),
        }
    }
}

const TEACHER_CACHE_LIMIT: usize = 4096;

impl TeacherScore {
    pub fn new(p0: &SimplexDist, gen: &TokenGenerator, sched: &NoiseSchedule) -> Result<Self> {
        let logits: Vec<f64> = p0.probs().iter().map(|p| p.ln()).collect();
        let mut out = Self {
            spec: *p0.spec(),
            gen: gen.clone(),
            sched: *sched,
            codec: IndexCodec::new(*p0.spec(), p0.probs().len())?,
            logits: Vec::new(),
            probs: Vec::new(),
            cache: Mutex::new(HashMap::new()),
        };
        out.set_params(&logits)?;
        Ok(out)
    }

    /// Data distribution `softmax(logits)`.
    pub fn data_distribution(&self) -> SimplexDist {
        SimplexDist::new(self.spec, self.probs.clone()).expect("softmax is a valid distribution")
    }

    pub fn codec(&self) -> &IndexCodec {
        &self.codec
    }

    /// Exact forward marginal `p_t`.
    pub fn marginal(&self, t: f64) -> Result<Arc<Vec<f64>>> {
        self.sched.check_time(t)?;
        let t = t.clamp(0.0, self.sched.horizon());
        let key = t.to_bits();
        if let Some(p) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(p));
        }
        let kernel = TransitionKernel::from_noise(&self.gen, self.sched.cumulative(t));
        let p = Arc::new(oracle::apply_product_kernel(
            &self.codec,
            &kernel,
            &self.probs,
        ));
        let mut cache = self.cache.lock().expect("cache lock");
        if cache.len() >= TEACHER_CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, Arc::clone(&p));
        Ok(p)
    }

    fn ratio_at(&self, p: &[f64], x: &[usize], y: &[usize]) -> Result<f64> {
        let px = p[self.codec.encode(x)];
        if px <= 0.0 {
            return Err(Error::domain(
                "teacher score undefined at a zero-probability state",
            ));
        }
        Ok(p[self.codec.encode(y)] / px)
    }

    /// Adds `scale * grad_logits log p_t(y)` into `grad`.
    fn add_grad_log_marginal(
        &self,
        y: &[usize],
        t: f64,
        p_t: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) {
        let kernel = TransitionKernel::from_noise(&self.gen, self.sched.cumulative(t));
        let py = p_t[self.codec.encode(y)];
        let mut src = vec![0usize; y.len()];
        for (k, g) in grad.iter_mut().enumerate() {
            let pk = self.probs[k];
            if pk == 0.0 {
                continue;
            }
            self.codec.decode_into(k, &mut src);
            let kyk: f64 = y
                .iter()
                .zip(&src)
                .map(|(&a, &b)| kernel.prob(a, b))
                .product();
            *g += scale * pk * (kyk / py - 1.0);
        }
    }
}

impl ScoreModel for TeacherScore {
    fn spec(&self) -> &SequenceSpec {
        &self.spec
    }

    fn num_params(&self) -> usize {
        self.logits.len()
    }

    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.codec.num_states() {
            return Err(Error::domain(
                "teacher parameters must have one logit per state",
            ));
        }
        let max = params.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() || params.iter().any(|v| v.is_nan()) {
            return Err(Error::domain(
                "teacher logits must contain a finite maximum and no NaN",
            ));
        }
        let w: Vec<f64> = params.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = w.iter().sum();
        self.probs = w.into_iter().map(|v| v / z).collect();
        self.logits = params.to_vec();
        self.cache.lock().expect("cache lock").clear();
        Ok(())
    }

    fn log_score(&self, x: &[usize], t: f64, pos: usize, token: usize) -> Result<f64> {
        let mut y = x.to_vec();
        y[pos] = token;
        self.full_log_ratio(x, &y, t)
    }

    fn add_grad_log_score(
        &self,
        x: &[usize],
        t: f64,
        pos: usize,
        token: usize,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let mut y = x.to_vec();
        y[pos] = token;
        self.add_grad_full_log_ratio(x, &y, t, scale, grad)
    }

    fn eval_score(&self, x: &[usize], t: f64) -> Result<NeighborTable> {
        let p = self.marginal(t)?;
        let m = self.spec.m();
        let mut table = NeighborTable::filled(x, t, m, 0.0);
        let mut y = x.to_vec();
        for (i, &a) in x.iter().enumerate() {
            for c in (0..m).filter(|&c| c != a) {
                y[i] = c;
                table.set(i, c, self.ratio_at(&p, x, &y)?);
            }
            y[i] = a;
        }
        Ok(table)
    }

    fn supports_full_space(&self) -> bool {
        true
    }

    fn full_log_ratio(&self, x: &[usize], y: &[usize], t: f64) -> Result<f64> {
        let p = self.marginal(t)?;
        Ok(self.ratio_at(&p, x, y)?.ln())
    }

    fn add_grad_full_log_ratio(
        &self,
        x: &[usize],
        y: &[usize],
        t: f64,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let p = self.marginal(t)?;
        if p[self.codec.encode(x)] <= 0.0 || p[self.codec.encode(y)] <= 0.0 {
            return Err(Error::domain(
                "teacher log-ratio gradient undefined at zero mass",
            ));
        }
        self.add_grad_log_marginal(y, t, &p, scale, grad);
        self.add_grad_log_marginal(x, t, &p, -scale, grad);
        Ok(())
    }
}

/// Exact-ratio score provider for the forward marginals of `p0`.
pub fn teacher_score(
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    p0: &SimplexDist,
) -> Result<TeacherScore> {
    TeacherScore::new(p0, g, sched)
}
