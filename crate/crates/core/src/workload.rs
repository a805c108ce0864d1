//! Request traces: Poisson arrivals, prompt length distributions and
//! prefix-group reuse.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid trace spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub arrival_s: f64,
    pub prompt_tokens: u64,
    pub prefix_group: u64,
    pub reused_prefix_tokens: u64,
    pub output_tokens: u64,
}

impl Request {
    pub fn is_valid(&self) -> bool {
        self.reused_prefix_tokens <= self.prompt_tokens && self.arrival_s >= 0.0 && self.prompt_tokens > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthDist {
    Fixed { tokens: u64 },
    Uniform { min: u64, max: u64 },
    /// Log-normal in tokens, clamped to [min, max].
    Lognormal { median: f64, sigma: f64, min: u64, max: u64 },
    /// Bins of [lo, hi) with relative weights; uniform inside a bin.
    Histogram { bins: Vec<(u64, u64, f64)> },
    /// Long-document QA mix spanning roughly 3K to 200K tokens.
    Leval,
    /// Long-dependency mix with most prompts above 100K tokens.
    Loogle,
}

impl LengthDist {
    fn resolve(&self) -> LengthDist {
        match self {
            LengthDist::Leval => LengthDist::Lognormal {
                median: 20_000.0,
                sigma: 1.0,
                min: 3_000,
                max: 200_000,
            },
            LengthDist::Loogle => LengthDist::Lognormal {
                median: 120_000.0,
                sigma: 0.25,
                min: 100_000,
                max: 200_000,
            },
            d => d.clone(),
        }
    }

    fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidSpec(m.into()));
        match self.resolve() {
            LengthDist::Fixed { tokens } if tokens == 0 => bad("fixed length must be >= 1"),
            LengthDist::Uniform { min, max } if min == 0 || min > max => bad("uniform needs 1 <= min <= max"),
            LengthDist::Lognormal { median, sigma, min, max }
                if !(median > 0.0) || !(sigma >= 0.0) || min == 0 || min > max =>
            {
                bad("lognormal needs median > 0, sigma >= 0, 1 <= min <= max")
            }
            LengthDist::Histogram { bins }
                if bins.is_empty()
                    || bins.iter().any(|b| b.0 == 0 || b.0 >= b.1 || !(b.2 >= 0.0))
                    || bins.iter().map(|b| b.2).sum::<f64>() <= 0.0 =>
            {
                bad("histogram bins need 1 <= lo < hi and non-negative weights")
            }
            _ => Ok(()),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        match self.resolve() {
            LengthDist::Fixed { tokens } => tokens,
            LengthDist::Uniform { min, max } => rng.random_range(min..=max),
            LengthDist::Lognormal { median, sigma, min, max } => {
                let d = LogNormal::new(median.ln(), sigma).expect("validated");
                (d.sample(rng).round() as u64).clamp(min, max)
            }
            LengthDist::Histogram { bins } => {
                let total: f64 = bins.iter().map(|b| b.2).sum();
                let mut x = rng.random::<f64>() * total;
                let mut pick = bins[bins.len() - 1];
                for b in &bins {
                    if x < b.2 {
                        pick = *b;
                        break;
                    }
                    x -= b.2;
                }
                rng.random_range(pick.0..pick.1)
            }
            LengthDist::Leval | LengthDist::Loogle => unreachable!("resolved above"),
        }
    }
}

/// Fraction of each prompt shared with its prefix group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReuseDist {
    Fixed { fraction: f64 },
    Uniform { min: f64, max: f64 },
}

impl ReuseDist {
    fn validate(&self) -> Result<(), WorkloadError> {
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        match *self {
            ReuseDist::Fixed { fraction } if ok(fraction) => Ok(()),
            ReuseDist::Uniform { min, max } if ok(min) && ok(max) && min <= max => Ok(()),
            _ => Err(WorkloadError::InvalidSpec("reuse fractions must lie in [0, 1]".into())),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            ReuseDist::Fixed { fraction } => fraction,
            ReuseDist::Uniform { min, max } if min == max => min,
            ReuseDist::Uniform { min, max } => rng.random_range(min..=max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSpec {
    pub rate_rps: f64,
    pub duration_s: f64,
    /// Generate exactly this many requests instead of filling `duration_s`.
    pub num_requests: Option<u64>,
    pub length_dist: LengthDist,
    pub reuse_dist: ReuseDist,
    pub output_tokens: u64,
    pub num_groups: u64,
    pub seed: u64,
}

impl Default for TraceSpec {
    fn default() -> Self {
        Self {
            rate_rps: 0.1,
            duration_s: 60.0,
            num_requests: None,
            length_dist: LengthDist::Fixed { tokens: 32_768 },
            reuse_dist: ReuseDist::Fixed { fraction: 0.75 },
            output_tokens: 128,
            num_groups: 4,
            seed: 0,
        }
    }
}

pub fn gen_trace(spec: &TraceSpec) -> Result<Vec<Request>, WorkloadError> {
    if !(spec.rate_rps > 0.0) || !spec.rate_rps.is_finite() {
        return Err(WorkloadError::InvalidSpec("rate_rps must be > 0".into()));
    }
    if spec.num_requests.is_none() && !(spec.duration_s >= 0.0) {
        return Err(WorkloadError::InvalidSpec("duration_s must be >= 0".into()));
    }
    if spec.num_groups == 0 {
        return Err(WorkloadError::InvalidSpec("num_groups must be >= 1".into()));
    }
    spec.length_dist.validate()?;
    spec.reuse_dist.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gap = Exp::new(spec.rate_rps).expect("rate checked");
    let mut out = Vec::new();
    let mut t = 0.0;
    for i in 0u64.. {
        t += gap.sample(&mut rng);
        match spec.num_requests {
            Some(n) if i >= n => break,
            None if t > spec.duration_s => break,
            _ => {}
        }
        let prompt = spec.length_dist.sample(&mut rng);
        let frac = spec.reuse_dist.sample(&mut rng);
        out.push(Request {
            arrival_s: t,
            prompt_tokens: prompt,
            prefix_group: i % spec.num_groups,
            reused_prefix_tokens: ((prompt as f64 * frac).floor() as u64).min(prompt),
            output_tokens: spec.output_tokens,
        });
    }
    Ok(out)
}

pub fn to_jsonl(trace: &[Request]) -> String {
    let mut s = String::new();
    for r in trace {
        s.push_str(&serde_json::to_string(r).expect("request serializes"));
        s.push('\n');
    }
    s
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Request>, WorkloadError> {
    parse_lines(text.lines().map(|l| Ok(l.to_string())))
}

fn parse_lines(lines: impl Iterator<Item = std::io::Result<String>>) -> Result<Vec<Request>, WorkloadError> {
    let mut out: Vec<Request> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let r: Request = serde_json::from_str(&line).map_err(|e| WorkloadError::Parse {
            line: n,
            msg: e.to_string(),
        })?;
        if !r.is_valid() {
            return Err(WorkloadError::Parse {
                line: n,
                msg: "reused_prefix_tokens exceeds prompt_tokens or bad arrival".into(),
            });
        }
        if out.last().is_some_and(|p| p.arrival_s > r.arrival_s) {
            return Err(WorkloadError::Parse {
                line: n,
                msg: "arrival_s decreases".into(),
            });
        }
        out.push(r);
    }
    Ok(out)
}

pub fn save_trace(trace: &[Request], path: &Path) -> Result<(), WorkloadError> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_jsonl(trace).as_bytes())?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<Vec<Request>, WorkloadError> {
    let f = fs::File::open(path)?;
    parse_lines(BufReader::new(f).lines())
}
