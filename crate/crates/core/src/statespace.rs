//! Finite state space of a single node and distributions over it.
//!
//! A node state `(B, g, e)` is binned on a product grid and flattened to an
//! index `i = (battery_bin * gain_bins + gain_bin) * harvest_bins + harvest_bin`.
//! A [`MeanFieldDistribution`] is the fraction of nodes in each index.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{battery_step, ChannelModel, Environment, HarvestModel, NodeState};
use crate::error::{Error, Result};

/// Tolerance accepted on `sum(probs) == 1` and on kernel row sums.
pub const SIMPLEX_TOL: f64 = 1e-10;

/// Bin counts per axis; the edges are derived from the environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub battery_bins: usize,
    pub gain_bins: usize,
    pub harvest_bins: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            battery_bins: 10,
            gain_bins: 8,
            harvest_bins: 8,
        }
    }
}

/// One axis of the grid: sorted edges and a representative value per bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    edges: Vec<f64>,
    centers: Vec<f64>,
}

impl Axis {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        let centers = edges
            .windows(2)
            .map(|w| {
                if w[1].is_finite() {
                    0.5 * (w[0] + w[1])
                } else {
                    w[0]
                }
            })
            .collect();
        Self::with_centers(edges, centers)
    }

    pub fn with_centers(edges: Vec<f64>, centers: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::invalid("an axis needs at least two edges"));
        }
        if edges.windows(2).any(|w| !(w[1] > w[0])) || edges[0].is_nan() {
            return Err(Error::invalid("axis edges must be strictly increasing"));
        }
        if centers.len() != edges.len() - 1 {
            return Err(Error::invalid("one center per bin required"));
        }
        Ok(Self { edges, centers })
    }

    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::invalid("uniform axis needs bins >= 1 and hi > lo"));
        }
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
        edges[bins] = hi;
        Self::new(edges)
    }

    pub fn bins(&self) -> usize {
        self.centers.len()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn lower(&self, bin: usize) -> f64 {
        self.edges[bin]
    }

    pub fn upper(&self, bin: usize) -> f64 {
        self.edges[bin + 1]
    }

    /// Right-open bins, last bin right-closed. Returns `(bin, clamped)`.
    pub fn locate(&self, x: f64) -> (usize, bool) {
        let last = self.bins() - 1;
        if x.is_nan() || x < self.edges[0] {
            return (0, true);
        }
        let top = self.edges[last + 1];
        if x > top {
            return (last, true);
        }
        if x == top {
            return (last, false);
        }
        let bin = self.edges.partition_point(|&e| e <= x) - 1;
        (bin.min(last), false)
    }
}

/// Product grid over (battery, gain, harvest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    pub battery: Axis,
    pub gain: Axis,
    pub harvest: Axis,
}

/// Grid index of a state and whether any coordinate had to be clamped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Located {
    pub index: usize,
    pub clamped: bool,
}

impl StateGrid {
    pub fn new(battery: Axis, gain: Axis, harvest: Axis) -> Self {
        Self {
            battery,
            gain,
            harvest,
        }
    }

    /// Battery bins uniform on `[0, B_max]`; gain bins equiprobable under the
    /// channel law (one bin per level for discrete channels); harvest bins
    /// uniform on `[0, max(m, 0) + 4 sqrt(v)]`.
    pub fn for_environment(env: &Environment, spec: GridSpec) -> Result<Self> {
        let battery = Axis::uniform(0.0, env.system.battery_capacity, spec.battery_bins)?;
        let gain = gain_axis(&env.channel, spec.gain_bins)?;
        let harvest = harvest_axis(&env.harvest, spec.harvest_bins)?;
        Ok(Self::new(battery, gain, harvest))
    }

    pub fn len(&self) -> usize {
        self.battery.bins() * self.gain.bins() * self.harvest.bins()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index_of(&self, battery_bin: usize, gain_bin: usize, harvest_bin: usize) -> usize {
        (battery_bin * self.gain.bins() + gain_bin) * self.harvest.bins() + harvest_bin
    }

    /// Inverse of [`StateGrid::index_of`].
    pub fn split(&self, index: usize) -> (usize, usize, usize) {
        let h = index % self.harvest.bins();
        let rest = index / self.harvest.bins();
        (rest / self.gain.bins(), rest % self.gain.bins(), h)
    }

    pub fn locate(&self, s: &NodeState) -> Located {
        let (b, cb) = self.battery.locate(s.battery);
        let (g, cg) = self.gain.locate(s.gain);
        let (h, ch) = self.harvest.locate(s.harvest);
        Located {
            index: self.index_of(b, g, h),
            clamped: cb || cg || ch,
        }
    }

    pub fn discretize(&self, s: &NodeState) -> usize {
        self.locate(s).index
    }

    /// Representative continuous state of a grid index.
    pub fn center(&self, index: usize) -> NodeState {
        let (b, g, h) = self.split(index);
        NodeState::new(
            self.battery.centers()[b],
            self.gain.centers()[g],
            self.harvest.centers()[h],
        )
    }

    /// Representative gain of every state, in index order.
    pub fn state_gains(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.center(i).gain).collect()
    }
}

fn gain_axis(channel: &ChannelModel, bins: usize) -> Result<Axis> {
    match channel {
        ChannelModel::Rayleigh { mean } => {
            if bins == 0 {
                return Err(Error::invalid("gain bins must be positive"));
            }
            let mut edges: Vec<f64> = (0..bins)
                .map(|k| -mean * (1.0 - k as f64 / bins as f64).ln())
                .collect();
            edges.push(f64::INFINITY);
            let centers = edges
                .windows(2)
                .map(|w| exponential_conditional_mean(*mean, w[0], w[1]))
                .collect();
            Axis::with_centers(edges, centers)
        }
        ChannelModel::Discrete { levels, .. } => {
            let mut edges = vec![0.0f64.min(levels[0])];
            edges.extend(levels.windows(2).map(|w| 0.5 * (w[0] + w[1])));
            edges.push(levels[levels.len() - 1] + 1.0);
            Axis::with_centers(edges, levels.clone())
        }
    }
}

/// `E[g | a <= g < b]` for an exponential law with the given mean.
fn exponential_conditional_mean(mean: f64, a: f64, b: f64) -> f64 {
    if !b.is_finite() {
        return a + mean;
    }
    let (fa, fb) = ((-a / mean).exp(), (-b / mean).exp());
    mean + (a * fa - b * fb) / (fa - fb)
}

fn harvest_axis(model: &HarvestModel, bins: usize) -> Result<Axis> {
    let hi = model.mean.max(0.0) + 4.0 * model.std_dev();
    Axis::uniform(0.0, hi, bins)
}

/// Probability of each gain bin and each harvest bin under the environment's laws.
#[derive(Debug, Clone, PartialEq)]
pub struct ExogenousLaw {
    pub gain: Vec<f64>,
    pub harvest: Vec<f64>,
}

impl ExogenousLaw {
    pub fn new(env: &Environment, grid: &StateGrid) -> Self {
        let gain = match &env.channel {
            ChannelModel::Rayleigh { mean } => {
                let cdf = |x: f64| {
                    if x.is_finite() {
                        1.0 - (-x / mean).exp()
                    } else {
                        1.0
                    }
                };
                grid.gain
                    .edges()
                    .windows(2)
                    .map(|w| cdf(w[1]) - cdf(w[0]))
                    .collect()
            }
            ChannelModel::Discrete { levels, weights } => {
                let mut p = vec![0.0; grid.gain.bins()];
                let total: f64 = weights
                    .as_ref()
                    .map(|w| w.iter().sum())
                    .unwrap_or(levels.len() as f64);
                for (i, level) in levels.iter().enumerate() {
                    let w = weights.as_ref().map(|w| w[i]).unwrap_or(1.0);
                    p[grid.gain.locate(*level).0] += w / total;
                }
                p
            }
        };
        let edges = grid.harvest.edges();
        let last = grid.harvest.bins() - 1;
        let harvest = (0..=last)
            .map(|h| {
                let lo = if h == 0 {
                    0.0
                } else {
                    env.harvest.cdf(edges[h])
                };
                let hi = if h == last {
                    1.0
                } else {
                    env.harvest.cdf(edges[h + 1])
                };
                (hi - lo).max(0.0)
            })
            .collect();
        Self { gain, harvest }
    }
}

/// Probability vector over the `d` grid states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeanFieldDistribution {
    probs: Vec<f64>,
}

impl MeanFieldDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_simplex(&probs)?;
        Ok(Self { probs })
    }

    pub fn uniform(d: usize) -> Self {
        assert!(d > 0, "empty state space");
        Self {
            probs: vec![1.0 / d as f64; d],
        }
    }

    pub fn point_mass(d: usize, state: usize) -> Self {
        let mut probs = vec![0.0; d];
        probs[state] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn l2_distance(&self, other: &Self) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Draws a state index.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let mut u = rng.gen::<f64>();
        for (i, p) in self.probs.iter().enumerate() {
            if u < *p {
                return i;
            }
            u -= p;
        }
        // Rounding residue: fall back to the last state with mass.
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

fn check_simplex(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::NotSimplex("empty vector".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::NotSimplex(format!(
            "entry {p} is negative or not finite"
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::NotSimplex(format!("entries sum to {total}")));
    }
    Ok(())
}

/// Fraction of nodes in each state.
pub fn empirical_distribution(states: &[usize], d: usize) -> Result<MeanFieldDistribution> {
    if states.is_empty() {
        return Err(Error::invalid("no node states given"));
    }
    let mut probs = vec![0.0; d];
    for &s in states {
        if s >= d {
            return Err(Error::invalid(format!(
                "state index {s} out of range for d = {d}"
            )));
        }
        probs[s] += 1.0;
    }
    let k = states.len() as f64;
    probs.iter_mut().for_each(|p| *p /= k);
    Ok(MeanFieldDistribution { probs })
}

/// `(m / (m + 1)) * belief + (1 / (m + 1)) * latest`.
pub fn fp_average(
    belief: &MeanFieldDistribution,
    latest: &MeanFieldDistribution,
    m: usize,
) -> Result<MeanFieldDistribution> {
    if m == 0 {
        return Err(Error::invalid("fictitious-play averaging starts at m = 1"));
    }
    if belief.len() != latest.len() {
        return Err(Error::Shape(format!(
            "{} vs {} states",
            belief.len(),
            latest.len()
        )));
    }
    let w_old = m as f64 / (m as f64 + 1.0);
    let w_new = 1.0 / (m as f64 + 1.0);
    let probs = belief
        .probs
        .iter()
        .zip(&latest.probs)
        .map(|(a, b)| w_old * a + w_new * b)
        .collect();
    Ok(MeanFieldDistribution { probs })
}

/// Dense `d x d` row-stochastic matrix; `P[i][j]` is the probability that a
/// node in state `i` moves to state `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    d: usize,
    entries: Vec<f64>,
}

impl TransitionKernel {
    pub fn new(d: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != d * d {
            return Err(Error::Shape(format!(
                "{} entries for d = {d}",
                entries.len()
            )));
        }
        for (i, row) in entries.chunks(d).enumerate() {
            if row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::NotSimplex(format!("row {i} has a negative entry")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::NotSimplex(format!("row {i} sums to {total}")));
            }
        }
        Ok(Self { d, entries })
    }

    pub fn identity(d: usize) -> Self {
        let mut entries = vec![0.0; d * d];
        (0..d).for_each(|i| entries[i * d + i] = 1.0);
        Self { d, entries }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.len();
        Self::new(d, rows.into_iter().flatten().collect())
    }

    /// Kernel induced on `grid` when every node in state `i` spends `powers[i]`.
    ///
    /// The battery moves deterministically from the bin center by one battery
    /// step; the next gain and harvest bins are drawn independently from `law`.
    pub fn from_policy(
        grid: &StateGrid,
        powers: &[f64],
        law: &ExogenousLaw,
        capacity: f64,
    ) -> Result<Self> {
        let d = grid.len();
        if powers.len() != d {
            return Err(Error::Shape(format!(
                "{} powers for {d} states",
                powers.len()
            )));
        }
        let (ng, nh) = (grid.gain.bins(), grid.harvest.bins());
        let mut entries = vec![0.0; d * d];
        for (i, &p) in powers.iter().enumerate() {
            let s = grid.center(i);
            let next = battery_step(s.battery, s.harvest, p.min(s.battery), capacity);
            let (nb, _) = grid.battery.locate(next);
            let row = &mut entries[i * d..(i + 1) * d];
            for g in 0..ng {
                for h in 0..nh {
                    row[grid.index_of(nb, g, h)] += law.gain[g] * law.harvest[h];
                }
            }
        }
        Self::new(d, entries)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.d..(i + 1) * self.d]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.d + j]
    }
}

/// `pi'_j = sum_i pi_i P_ij`.
pub fn evolve_distribution(
    pi: &MeanFieldDistribution,
    kernel: &TransitionKernel,
) -> Result<MeanFieldDistribution> {
    let d = kernel.dim();
    if pi.len() != d {
        return Err(Error::Shape(format!(
            "distribution over {} states, kernel over {d}",
            pi.len()
        )));
    }
    let mut next = vec![0.0; d];
    for (i, &w) in pi.probs.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (acc, p) in next.iter_mut().zip(kernel.row(i)) {
            *acc += w * p;
        }
    }
    Ok(MeanFieldDistribution { probs: next })
}

/// Stationary distribution by repeated evolution from `start`.
///
/// Stops once successive iterates differ by less than `tol` in the sup norm.
pub fn power_iteration(
    kernel: &TransitionKernel,
    start: &MeanFieldDistribution,
    tol: f64,
    max_iters: usize,
) -> Result<(MeanFieldDistribution, usize)> {
    let mut pi = start.clone();
    for it in 1..=max_iters {
        let next = evolve_distribution(&pi, kernel)?;
        let delta = next
            .probs
            .iter()
            .zip(&pi.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        pi = next;
        if delta < tol {
            return Ok((pi, it));
        }
    }
    Ok((pi, max_iters))
}

/// Counts observed `i -> j` moves to estimate a kernel empirically.
#[derive(Debug, Clone)]
pub struct TransitionCounter {
    d: usize,
    counts: Vec<u64>,
}

impl TransitionCounter {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            counts: vec![0; d * d],
        }
    }

    pub fn record(&mut self, from: usize, to: usize) {
        self.counts[from * self.d + to] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Row-normalized counts; unvisited states get a self-loop.
    pub fn kernel(&self) -> TransitionKernel {
        let d = self.d;
        let mut entries = vec![0.0; d * d];
        for i in 0..d {
            let row = &self.counts[i * d..(i + 1) * d];
            let n: u64 = row.iter().sum();
            if n == 0 {
                entries[i * d + i] = 1.0;
            } else {
                for (e, c) in entries[i * d..(i + 1) * d].iter_mut().zip(row) {
                    *e = *c as f64 / n as f64;
                }
            }
        }
        TransitionKernel { d, entries }
    }
}

/// `sum_i (pi2_i - pi1_i) (R_i(pi2) - R_i(pi1))` with `R_i` the mean-field reward
/// seen by a node in state `i`.
pub fn monotonicity_gap(
    pi1: &MeanFieldDistribution,
    pi2: &MeanFieldDistribution,
    state_powers: &[f64],
    state_gains: &[f64],
    num_nodes: usize,
) -> Result<f64> {
    if pi1.len() != pi2.len()
        || pi1.len() != state_powers.len()
        || state_powers.len() != state_gains.len()
    {
        return Err(Error::Shape(
            "distributions, powers and gains must share d".into(),
        ));
    }
    let r1 = crate::mfg::mf_reward(pi1, state_powers, state_gains, num_nodes)?;
    let r2 = crate::mfg::mf_reward(pi2, state_powers, state_gains, num_nodes)?;
    // The reward takes no own-state argument, so every state sees the same R.
    Ok(pi1
        .probs
        .iter()
        .zip(&pi2.probs)
        .map(|(a, b)| (b - a) * (r2 - r1))
        .sum())
}

/// Tally of the sign of `sum_i (p1_i - p2_i)(f_i(p1) - f_i(p2))`, where `f_i` is
/// the partial derivative of the mean-field reward in `p_i`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConcavityProbe {
    pub trials: usize,
    pub negative: usize,
    pub zero: usize,
    pub positive: usize,
}

impl ConcavityProbe {
    pub fn consistent(&self) -> bool {
        self.positive == 0 || self.negative == 0
    }
}

/// Samples random pairs of per-state power assignments in `[0, p_max]` and
/// records the sign of the diagonal-concavity inner product at `pi`.
pub fn diagonal_concavity_probe<R: Rng + ?Sized>(
    pi: &MeanFieldDistribution,
    state_gains: &[f64],
    num_nodes: usize,
    p_max: f64,
    trials: usize,
    rng: &mut R,
) -> ConcavityProbe {
    let d = pi.len();
    let k = num_nodes as f64;
    let grad = |p: &[f64]| -> Vec<f64> {
        let snr: f64 = (0..d)
            .map(|i| k * pi.probs[i] * p[i] * state_gains[i])
            .sum();
        (0..d)
            .map(|i| k * pi.probs[i] * state_gains[i] / (1.0 + snr))
            .collect()
    };
    let mut probe = ConcavityProbe::default();
    for _ in 0..trials {
        let p1: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * p_max).collect();
        let p2: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * p_max).collect();
        let (f1, f2) = (grad(&p1), grad(&p2));
        let inner: f64 = (0..d).map(|i| (p1[i] - p2[i]) * (f1[i] - f2[i])).sum();
        probe.trials += 1;
        if inner < -1e-15 {
            probe.negative += 1;
        } else if inner > 1e-15 {
            probe.positive += 1;
        } else {
            probe.zero += 1;
        }
    }
    if !probe.consistent() {
        log::warn!("diagonal concavity probe found mixed signs: {probe:?}");
    }
    probe
}

/// Writes one CSV row per labelled distribution: `label,p_0,...,p_{d-1}`.
pub fn write_distributions_csv<W: Write>(
    out: W,
    rows: &[(String, &MeanFieldDistribution)],
) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    if let Some((_, first)) = rows.first() {
        let mut header = vec!["label".to_string()];
        header.extend((0..first.len()).map(|i| format!("p{i}")));
        writer.write_record(&header)?;
    }
    for (label, pi) in rows {
        let mut record = vec![label.clone()];
        record.extend(pi.probs().iter().map(|p| p.to_string()));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{seeded_rng, SystemConfig};

    fn random_simplex<R: Rng>(d: usize, rng: &mut R) -> MeanFieldDistribution {
        let raw: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        MeanFieldDistribution::new(raw.into_iter().map(|x| x / total).collect()).unwrap()
    }

    fn random_kernel<R: Rng>(d: usize, rng: &mut R) -> TransitionKernel {
        let rows = (0..d).map(|_| random_simplex(d, rng).probs).collect();
        TransitionKernel::from_rows(rows).unwrap()
    }

    #[test]
    fn bin_edges_are_right_open() {
        let axis = Axis::uniform(0.0, 20.0, 10).unwrap();
        assert_eq!(axis.locate(2.0), (1, false));
        assert_eq!(axis.locate(1.999), (0, false));
        assert_eq!(axis.locate(20.0), (9, false));
        assert_eq!(axis.locate(0.0), (0, false));
        assert_eq!(axis.locate(-1.0), (0, true));
        assert_eq!(axis.locate(25.0), (9, true));
    }

    #[test]
    fn single_cell_grid_maps_everything_to_zero() {
        let grid = StateGrid::new(
            Axis::uniform(0.0, 1.0, 1).unwrap(),
            Axis::uniform(0.0, 1.0, 1).unwrap(),
            Axis::uniform(0.0, 1.0, 1).unwrap(),
        );
        let mut rng = seeded_rng(1, 0);
        for _ in 0..50 {
            let s = NodeState::new(rng.gen(), rng.gen(), rng.gen());
            assert_eq!(grid.discretize(&s), 0);
        }
    }

    #[test]
    fn uniform_occupancy_on_matching_grid() {
        let axis = || Axis::uniform(0.0, 1.0, 2).unwrap();
        let grid = StateGrid::new(axis(), axis(), axis());
        let mut rng = seeded_rng(2, 0);
        let n = 100_000;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            let s = NodeState::new(rng.gen(), rng.gen(), rng.gen());
            counts[grid.discretize(&s)] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.125).abs() < 0.02);
        }
    }

    #[test]
    fn index_round_trip() {
        let env = Environment::new(
            SystemConfig::reference(5),
            HarvestModel::new(5.0, 3.5),
            ChannelModel::default(),
        )
        .unwrap();
        let grid = StateGrid::for_environment(&env, GridSpec::default()).unwrap();
        assert_eq!(grid.len(), 640);
        for i in 0..grid.len() {
            let c = grid.center(i);
            assert_eq!(grid.discretize(&c), i);
        }
    }

    #[test]
    fn exogenous_law_sums_to_one() {
        let env = Environment::new(
            SystemConfig::reference(5),
            HarvestModel::new(4.0, 3.5),
            ChannelModel::default(),
        )
        .unwrap();
        let grid = StateGrid::for_environment(&env, GridSpec::default()).unwrap();
        let law = ExogenousLaw::new(&env, &grid);
        assert!((law.gain.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((law.harvest.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(law.gain.iter().all(|p| (p - 0.125).abs() < 1e-12));
    }

    #[test]
    fn exponential_bin_centers_average_to_mean() {
        let axis = gain_axis(&ChannelModel::Rayleigh { mean: 1.0 }, 8).unwrap();
        let avg = axis.centers().iter().sum::<f64>() / 8.0;
        assert!((avg - 1.0).abs() < 1e-12, "{avg}");
    }

    #[test]
    fn empirical_counts() {
        let pi = empirical_distribution(&[0, 0, 0], 3).unwrap();
        assert_eq!(pi.probs(), &[1.0, 0.0, 0.0]);
        let pi = empirical_distribution(&[0, 0, 1, 3], 4).unwrap();
        assert_eq!(pi.probs(), &[0.5, 0.25, 0.0, 0.25]);
        assert!(empirical_distribution(&[4], 4).is_err());
    }

    #[test]
    fn evolve_identity_and_absorbing() {
        let mut rng = seeded_rng(3, 0);
        let pi = random_simplex(5, &mut rng);
        assert_eq!(
            evolve_distribution(&pi, &TransitionKernel::identity(5)).unwrap(),
            pi
        );
        let rows = (0..5).map(|_| vec![0.0, 0.0, 1.0, 0.0, 0.0]).collect();
        let k = TransitionKernel::from_rows(rows).unwrap();
        assert_eq!(
            evolve_distribution(&pi, &k).unwrap().probs(),
            MeanFieldDistribution::point_mass(5, 2).probs()
        );
    }

    #[test]
    fn non_stochastic_kernel_rejected() {
        assert!(TransitionKernel::from_rows(vec![vec![0.5, 0.4], vec![0.0, 1.0]]).is_err());
        assert!(TransitionKernel::from_rows(vec![vec![1.5, -0.5], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn fp_average_cases() {
        let a = MeanFieldDistribution::new(vec![1.0, 0.0]).unwrap();
        let b = MeanFieldDistribution::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(fp_average(&a, &b, 1).unwrap().probs(), &[0.5, 0.5]);
        assert_eq!(fp_average(&a, &a, 7).unwrap(), a);
        let half = MeanFieldDistribution::new(vec![0.5, 0.5]).unwrap();
        let r = fp_average(&half, &a, 3).unwrap();
        assert!((r.probs()[0] - 0.625).abs() < 1e-15 && (r.probs()[1] - 0.375).abs() < 1e-15);
        assert!(fp_average(&a, &b, 0).is_err());
    }

    #[test]
    fn fp_average_constant_stream_is_fixed() {
        let mut rng = seeded_rng(4, 0);
        let pi = random_simplex(6, &mut rng);
        let mut bar = pi.clone();
        for m in 1..200 {
            bar = fp_average(&bar, &pi, m).unwrap();
            assert!(bar.l2_distance(&pi) < 1e-14);
        }
    }

    #[test]
    fn policy_kernel_is_stochastic() {
        let env = Environment::new(
            SystemConfig::reference(5),
            HarvestModel::new(5.0, 3.5),
            ChannelModel::default(),
        )
        .unwrap();
        let grid = StateGrid::for_environment(
            &env,
            GridSpec {
                battery_bins: 4,
                gain_bins: 3,
                harvest_bins: 2,
            },
        )
        .unwrap();
        let law = ExogenousLaw::new(&env, &grid);
        let powers: Vec<f64> = (0..grid.len())
            .map(|i| grid.center(i).battery.min(15.0))
            .collect();
        let k = TransitionKernel::from_policy(&grid, &powers, &law, 20.0).unwrap();
        assert_eq!(k.dim(), 24);
        // Spending the whole battery lands in the bin of the harvest center.
        let c = grid.center(5);
        let (b, _) = grid.battery.locate(c.harvest);
        let mass: f64 = (0..3)
            .flat_map(|g| (0..2).map(move |h| (g, h)))
            .map(|(g, h)| k.get(5, grid.index_of(b, g, h)))
            .sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn monotonicity_gap_vanishes() {
        let mut rng = seeded_rng(5, 0);
        let pi = random_simplex(9, &mut rng);
        let powers: Vec<f64> = (0..9).map(|_| rng.gen::<f64>() * 15.0).collect();
        let gains: Vec<f64> = (0..9).map(|_| rng.gen::<f64>() * 3.0).collect();
        assert_eq!(monotonicity_gap(&pi, &pi, &powers, &gains, 5).unwrap(), 0.0);
    }

    #[test]
    fn concavity_probe_is_single_signed() {
        let mut rng = seeded_rng(6, 0);
        let pi = random_simplex(12, &mut rng);
        let gains: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() * 2.0).collect();
        let probe = diagonal_concavity_probe(&pi, &gains, 5, 15.0, 500, &mut rng);
        assert_eq!(probe.trials, 500);
        assert!(probe.consistent());
        assert_eq!(probe.positive, 0);
    }

    #[test]
    fn transition_counter_kernel() {
        let mut c = TransitionCounter::new(3);
        c.record(0, 1);
        c.record(0, 1);
        c.record(0, 2);
        c.record(1, 0);
        let k = c.kernel();
        assert!((k.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(k.get(1, 0), 1.0);
        assert_eq!(k.get(2, 2), 1.0);
        assert_eq!(c.total(), 4);
    }

    #[test]
    fn power_iteration_converges_on_random_kernel() {
        let mut rng = seeded_rng(7, 0);
        let k = random_kernel(6, &mut rng);
        let (pi, _) =
            power_iteration(&k, &MeanFieldDistribution::uniform(6), 1e-15, 10_000).unwrap();
        let next = evolve_distribution(&pi, &k).unwrap();
        assert!(next.l2_distance(&pi) < 1e-12);
    }

    #[test]
    fn csv_export_has_one_row_per_distribution() {
        let a = MeanFieldDistribution::uniform(3);
        let mut buf = Vec::new();
        write_distributions_csv(&mut buf, &[("bar".into(), &a), ("now".into(), &a)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("label,p0,p1,p2"));
    }
}
