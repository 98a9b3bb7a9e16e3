//! Shared plumbing: deterministic RNG streams, fixed-width float formatting,
//! compensated summation, log-factorials, and atomic CSV emission.
//!
//! Everything here is chosen for reproducibility: the same seed and inputs
//! must produce bit-identical output on any worker count and any platform
//! with IEEE-754 doubles.

use std::cell::RefCell;
use std::fs;
use std::io::{BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

// ── RNG streams ──────────────────────────────────────────────────────────────

/// SplitMix64 round; used only to derive independent stream seeds.
fn splitmix64(state: &mut u64) {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    *state = z ^ (z >> 31);
}

/// Seed for sub-stream `stream` of master seed `seed`.
///
/// Replication j, probe stream j, etc. all derive their generator as a pure
/// function of `(seed, stream)`, so parallel execution order cannot matter.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut s = seed ^ 0xD1B5_4A32_D192_ED03u64.wrapping_mul(stream.wrapping_add(1));
    splitmix64(&mut s);
    splitmix64(&mut s);
    s
}

/// ChaCha20 generator for sub-stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(stream_seed(seed, stream))
}

/// Stream ids for named internal probe streams (validation, Lipschitz probes,
/// decoupling checks).  Fixed constants, documented here so output is stable
/// across releases.
pub mod streams {
    pub const VALIDATE: u64 = 101;
    pub const LIPSCHITZ: u64 = 102;
    pub const DECOUPLING: u64 = 103;
    pub const EXCHANGEABILITY: u64 = 104;
}

/// Uniform in [[0,1) from the top 53 bits of a `u64`; the only float-sampling
/// primitive used anywhere.
pub fn u64_to_unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / 9007199254740992.0) // 2^-53
}

/// Next uniform in [0,1) from a generator.
pub fn next_unit(rng: &mut ChaCha20Rng) -> f64 {
    use rand::RngCore;
    u64_to_unit(rng.next_u64())
}

/// Inverse-CDF draw over `pmf` in index order: smallest index whose CDF
/// exceeds `u`.  Falls back to the last positive entry on accumulated
/// round-off.
pub fn sample_pmf(pmf: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_pos = 0;
    for (i, &p) in pmf.iter().enumerate() {
        if p > 0.0 {
            last_pos = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_pos
}

// ── Numerics ─────────────────────────────────────────────────────────────────

/// Kahan–Babuška compensated accumulator.
#[derive(Clone, Copy, Default)]
pub struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

thread_local! {
    static LN_FACT: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// ln(n!) with a growing thread-local table.
pub fn ln_factorial(n: usize) -> f64 {
    LN_FACT.with(|cell| {
        let mut tab = cell.borrow_mut();
        if tab.is_empty() {
            tab.push(0.0); // 0!
        }
        while tab.len() <= n {
            let k = tab.len();
            let prev = tab[k - 1];
            tab.push(prev + (k as f64).ln());
        }
        tab[n]
    })
}

/// Binomial pmf over j = 0..=n, computed in log space.
pub fn binomial_pmf(n: u32, p: f64) -> Vec<f64> {
    let n_us = n as usize;
    if p <= 0.0 {
        let mut v = vec![0.0; n_us + 1];
        v[0] = 1.0;
        return v;
    }
    if p >= 1.0 {
        let mut v = vec![0.0; n_us + 1];
        v[n_us] = 1.0;
        return v;
    }
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let lnf = ln_factorial(n_us);
    (0..=n_us)
        .map(|j| {
            let l = lnf - ln_factorial(j) - ln_factorial(n_us - j)
                + j as f64 * lp
                + (n_us - j) as f64 * lq;
            l.exp()
        })
        .collect()
}

/// Multinomial pmf of a count vector under `pmf`, in log space.  Returns 0
/// whenever some count is positive where `pmf` is zero.
pub fn multinomial_pmf(counts: &[u32], pmf: &[f64]) -> f64 {
    let n: u32 = counts.iter().sum();
    let mut l = ln_factorial(n as usize);
    for (&c, &p) in counts.iter().zip(pmf) {
        if c == 0 {
            continue;
        }
        if p <= 0.0 {
            return 0.0;
        }
        l += c as f64 * p.ln() - ln_factorial(c as usize);
    }
    l.exp()
}

/// C(a, b) in u128, saturating.  Used for cap checks before any allocation.
pub fn binomial_u128(a: u64, b: u64) -> u128 {
    if b > a {
        return 0;
    }
    let b = b.min(a - b);
    let mut num: u128 = 1;
    for i in 0..b {
        num = match num.checked_mul((a - i) as u128) {
            Some(v) => v,
            None => return u128::MAX,
        };
        num /= (i + 1) as u128;
    }
    num
}

// ── Formatting ───────────────────────────────────────────────────────────────

/// Fixed 17-significant-digit scientific formatting for every float that
/// reaches a CSV file or stdout.  Round-trips exactly through `f64::parse`.
pub fn fmt_f64(v: f64) -> String {
    let v = if v == 0.0 { 0.0 } else { v }; // normalise -0.0
    format!("{v:.16e}")
}

// ── Atomic CSV emission ──────────────────────────────────────────────────────

/// Streaming CSV writer with write-to-temp-then-rename semantics.
///
/// The final path only ever holds complete content; without `force` an
/// existing file is refused before anything is written.
pub struct CsvWriter {
    tmp: PathBuf,
    dest: PathBuf,
    out: BufWriter<fs::File>,
    done: bool,
}

impl CsvWriter {
    pub fn create(dest: &Path, force: bool) -> Result<Self> {
        if dest.exists() && !force {
            return Err(Error::Invalid(format!(
                "refusing to overwrite {} (pass --force to allow)",
                dest.display()
            )));
        }
        if let Some(dir) = dest.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut tmp = dest.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        let file = fs::File::create(&tmp)?;
        Ok(CsvWriter {
            tmp,
            dest: dest.to_path_buf(),
            out: BufWriter::new(file),
            done: false,
        })
    }

    /// `# ...` comment line (parameter echo).
    pub fn comment(&mut self, text: &str) -> Result<()> {
        debug_assert!(!text.contains('\n'));
        writeln!(self.out, "# {text}")?;
        Ok(())
    }

    pub fn row(&mut self, fields: &[&str]) -> Result<()> {
        for f in fields {
            if f.contains(',') || f.contains('\n') || f.contains('"') {
                return Err(Error::Invalid(format!("csv field {f:?} needs quoting; field tokens must stay plain")));
            }
        }
        writeln!(self.out, "{}", fields.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        fs::rename(&self.tmp, &self.dest)?;
        self.done = true;
        Ok(())
    }
}

impl Drop for CsvWriter {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_file(&self.tmp);
        }
    }
}

/// Read a CSV written by [`CsvWriter`]: skips `#` comments, returns rows of
/// fields.  The first non-comment row is the header.
pub fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}
