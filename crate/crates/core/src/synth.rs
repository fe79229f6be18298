//! Deterministic synthetic order books with a planted imbalance signal.
//!
//! A latent regime `s ∈ {-1, +1}` persists with a small flip probability.
//! Level-1 quantities encode it as imbalance `s·u`, `u ∈ [0.2, 0.8]`, and
//! the next mid move is `+s` ticks with probability β and `-s` otherwise, so
//! the sign of the current level-1 imbalance predicts the next move with
//! accuracy β. Quantities carry multiplicative log-normal jitter.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ingest::{Level, RawSnapshot};
use crate::labeling::GRID_MS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Snapshots emitted.
    pub n: usize,
    pub depth: usize,
    pub tick: f64,
    pub base_price: f64,
    /// Probability that the next move agrees with the imbalance sign.
    pub signal_strength: f64,
    /// Std-dev of the log-normal quantity jitter.
    pub noise_sigma: f64,
    /// Per side, probability that one random level empties and deeper
    /// levels shift up.
    pub flicker_rate: f64,
    /// Probability that a grid tick is not emitted.
    pub gap_rate: f64,
    /// Per level, probability that it is written as null.
    pub missing_level_rate: f64,
    /// Per-step probability that the latent regime flips.
    pub regime_flip: f64,
    /// Maximum excursion from the base price, in ticks.
    pub band_ticks: i64,
    pub start_ts: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n: 10_000,
            depth: 10,
            tick: 0.1,
            base_price: 100_000.0,
            signal_strength: 0.8,
            noise_sigma: 0.0,
            flicker_rate: 0.0,
            gap_rate: 0.0,
            missing_level_rate: 0.0,
            regime_flip: 0.02,
            band_ticks: 500,
            start_ts: 1_738_195_200_000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("signal_strength", self.signal_strength),
            ("flicker_rate", self.flicker_rate),
            ("gap_rate", self.gap_rate),
            ("missing_level_rate", self.missing_level_rate),
            ("regime_flip", self.regime_flip),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.gap_rate >= 1.0 {
            return Err(Error::config("gap_rate must be below 1"));
        }
        if self.n == 0 || self.depth == 0 {
            return Err(Error::config("n and depth must be positive"));
        }
        if !(self.tick > 0.0 && self.noise_sigma >= 0.0 && self.band_ticks > 0) {
            return Err(Error::config("tick and band must be positive, noise non-negative"));
        }
        let band_floor = self.base_price - (self.band_ticks + self.depth as i64 + 2) as f64 * self.tick;
        if band_floor <= 0.0 || self.start_ts <= 0 {
            return Err(Error::config("base price too small for the price band"));
        }
        Ok(())
    }
}

/// Bayes accuracy of the planted sign rule.
pub fn oracle_accuracy(cfg: &SynthConfig) -> f64 {
    cfg.signal_strength
}

/// Generator state; yields snapshots in time order.
pub struct SynthStream {
    cfg: SynthConfig,
    rng: ChaCha8Rng,
    jitter: Normal<f64>,
    emitted: usize,
    step: i64,
    offset_ticks: i64,
    regime: i64,
    planted_matches: u64,
}

impl SynthStream {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let regime = if rng.random_bool(0.5) { 1 } else { -1 };
        Ok(SynthStream {
            jitter: Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma"),
            cfg,
            rng,
            emitted: 0,
            step: 0,
            offset_ticks: 0,
            regime,
            planted_matches: 0,
        })
    }

    /// Fraction of emitted steps whose next move matched the regime sign.
    pub fn planted_match_rate(&self) -> f64 {
        self.planted_matches as f64 / self.step.max(1) as f64
    }

    fn noisy(&mut self, q: f64) -> f64 {
        if self.cfg.noise_sigma == 0.0 {
            q
        } else {
            q * self.jitter.sample(&mut self.rng).exp()
        }
    }

    fn book(&mut self) -> RawSnapshot {
        let k = self.cfg.depth;
        let tick = self.cfg.tick;
        let base_ticks = (self.cfg.base_price / tick).round() as i64;
        let best_bid = base_ticks + self.offset_ticks;
        let u = self.rng.random_range(0.2..=0.8);
        let imbalance = self.regime as f64 * u;
        let total = self.rng.random_range(2.0..6.0);
        let mut bids = Vec::with_capacity(k);
        let mut asks = Vec::with_capacity(k);
        for i in 0..k {
            let (qb, qa) = if i == 0 {
                (total * (1.0 + imbalance) / 2.0, total * (1.0 - imbalance) / 2.0)
            } else {
                (self.rng.random_range(0.5..5.0), self.rng.random_range(0.5..5.0))
            };
            let (qb, qa) = (self.noisy(qb), self.noisy(qa));
            bids.push(Level {
                price: (best_bid - i as i64) as f64 * tick,
                qty: qb,
            });
            asks.push(Level {
                price: (best_bid + 1 + i as i64) as f64 * tick,
                qty: qa,
            });
        }
        for side in [&mut bids, &mut asks] {
            if self.cfg.flicker_rate > 0.0 && self.rng.random_bool(self.cfg.flicker_rate) {
                let gone = self.rng.random_range(0..k);
                side.remove(gone);
                side.push(Level::MISSING);
            }
            if self.cfg.missing_level_rate > 0.0 {
                for level in side.iter_mut() {
                    if self.rng.random_bool(self.cfg.missing_level_rate) {
                        *level = Level::MISSING;
                    }
                }
            }
        }
        RawSnapshot {
            ts: self.cfg.start_ts + self.step * GRID_MS,
            bids,
            asks,
        }
    }

    fn advance(&mut self) {
        let agree = self.rng.random_bool(self.cfg.signal_strength);
        let mv = if agree { self.regime } else { -self.regime };
        self.planted_matches += u64::from(agree);
        self.offset_ticks += mv;
        self.step += 1;
        let band = self.cfg.band_ticks;
        self.regime = if self.offset_ticks >= band {
            -1
        } else if self.offset_ticks <= -band {
            1
        } else if self.rng.random_bool(self.cfg.regime_flip) {
            -self.regime
        } else {
            self.regime
        };
    }
}

impl Iterator for SynthStream {
    type Item = RawSnapshot;

    fn next(&mut self) -> Option<RawSnapshot> {
        while self.emitted < self.cfg.n {
            // draw the book every step so gaps do not shift later draws
            let snap = self.book();
            let skip = self.cfg.gap_rate > 0.0 && self.rng.random_bool(self.cfg.gap_rate);
            self.advance();
            if !skip {
                self.emitted += 1;
                return Some(snap);
            }
        }
        None
    }
}

/// Write `cfg.n` snapshots as canonical NDJSON records.
pub fn generate<W: Write>(cfg: &SynthConfig, mut out: W) -> Result<SynthSummary> {
    let mut stream = SynthStream::new(*cfg)?;
    let mut emitted = 0;
    for snap in stream.by_ref() {
        out.write_all(snap.to_ndjson().as_bytes())?;
        out.write_all(b"\n")?;
        emitted += 1;
    }
    out.flush()?;
    Ok(SynthSummary {
        emitted,
        steps: stream.step as usize,
        planted_match_rate: stream.planted_match_rate(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSummary {
    pub emitted: usize,
    pub steps: usize,
    pub planted_match_rate: f64,
}
