//! Sequence datasets: Lorenz simulation, piano-roll ingestion, a synthetic
//! binary generator, JSON persistence and padded minibatching.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::generative::LorenzTheta;
use crate::rng::{standard_normals, substream, substream2};

const FORMAT: &str = "seqvi-dataset";
const VERSION: u32 = 1;

/// Lowest MIDI pitch on an 88-key piano; maps to channel 0.
pub const PIANO_LOW: i64 = 21;
pub const PIANO_HIGH: i64 = 108;
pub const PIANO_KEYS: usize = 88;

/// Observation sequences of a common width, with optional ground truth.
/// Every step of every stored sequence is valid; masks appear when
/// sequences of different lengths are batched.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    /// Each `[T_i, d_x]`.
    pub sequences: Vec<Tensor>,
    /// Each `[T_i, n_z]` when known.
    pub true_states: Option<Vec<Tensor>>,
    pub true_theta: Option<LorenzTheta>,
    /// Generator settings echoed into saved files.
    pub config: Option<serde_json::Value>,
}

impl SequenceDataset {
    pub fn new(sequences: Vec<Tensor>) -> Result<Self> {
        let ds = Self {
            sequences,
            true_states: None,
            true_theta: None,
            config: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.sequences.first() else {
            return Ok(());
        };
        let width = seq_width(first)?;
        for (i, s) in self.sequences.iter().enumerate() {
            if seq_width(s)? != width {
                return Err(Error::Data(format!(
                    "sequence {i} has width {}, expected {width}",
                    s.shape()[1]
                )));
            }
            if s.shape()[0] == 0 {
                return Err(Error::Data(format!("sequence {i} is empty")));
            }
        }
        if let Some(states) = &self.true_states {
            if states.len() != self.sequences.len() {
                return Err(Error::Data("true states do not match sequence count".into()));
            }
            for (i, (z, x)) in states.iter().zip(&self.sequences).enumerate() {
                if z.ndim() != 2 || z.shape()[0] != x.shape()[0] {
                    return Err(Error::Data(format!(
                        "true states of sequence {i} have shape {:?}",
                        z.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn obs_dim(&self) -> Option<usize> {
        self.sequences.first().map(|s| s.shape()[1])
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.shape()[0]).collect()
    }

    pub fn total_steps(&self) -> usize {
        self.lengths().iter().sum()
    }

    /// Sub-dataset with the given sequence indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let pick = |v: &Vec<Tensor>| -> Result<Vec<Tensor>> {
            indices
                .iter()
                .map(|&i| {
                    v.get(i)
                        .cloned()
                        .ok_or_else(|| Error::Data(format!("index {i} out of range")))
                })
                .collect()
        };
        Ok(Self {
            sequences: pick(&self.sequences)?,
            true_states: self.true_states.as_ref().map(pick).transpose()?,
            true_theta: self.true_theta,
            config: self.config.clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = DatasetFile {
            format: FORMAT.into(),
            version: VERSION,
            obs_dim: self.obs_dim().unwrap_or(0),
            x: self.sequences.iter().map(to_rows).collect(),
            z: self
                .true_states
                .as_ref()
                .map(|zs| zs.iter().map(to_rows).collect()),
            theta: self.true_theta,
            config: self.config.clone(),
        };
        let mut bytes = serde_json::to_vec(&file)?;
        bytes.push(b'\n');
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let file: DatasetFile = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported dataset format {} v{}",
                path.display(),
                file.format,
                file.version
            )));
        }
        let sequences = file
            .x
            .iter()
            .map(|s| from_rows(s, file.obs_dim))
            .collect::<Result<Vec<_>>>()?;
        let true_states = match &file.z {
            Some(zs) => Some(
                zs.iter()
                    .map(|s| from_rows(s, s.first().map_or(0, Vec::len)))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let ds = Self {
            sequences,
            true_states,
            true_theta: file.theta,
            config: file.config,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn seq_width(s: &Tensor) -> Result<usize> {
    if s.ndim() != 2 {
        return Err(Error::Data(format!(
            "sequence must be [T, d], got {:?}",
            s.shape()
        )));
    }
    Ok(s.shape()[1])
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let width = t.shape()[1];
    if width == 0 {
        return vec![Vec::new(); t.shape()[0]];
    }
    t.data().chunks(width).map(<[f64]>::to_vec).collect()
}

fn from_rows(rows: &[Vec<f64>], width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * width);
    for (t, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(Error::Data(format!(
                "step {t} has width {}, expected {width}",
                r.len()
            )));
        }
        data.extend_from_slice(r);
    }
    Tensor::matrix(rows.len(), width, data)
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    obs_dim: usize,
    x: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    z: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    theta: Option<LorenzTheta>,
    #[serde(default)]
    config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LorenzConfig {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub ts: f64,
    pub len: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Variance of both the process and the observation noise.
    pub noise_var: f64,
    pub z0: [f64; 3],
    pub seed: u64,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        let theta = LorenzTheta::default();
        Self {
            sigma: theta.sigma,
            rho: theta.rho,
            beta: theta.beta,
            ts: 0.01,
            len: 100,
            train: 50,
            val: 10,
            test: 10,
            noise_var: 0.1,
            z0: [1.0, 1.0, 1.0],
            seed: 0,
        }
    }
}

impl LorenzConfig {
    pub fn theta(&self) -> LorenzTheta {
        LorenzTheta {
            sigma: self.sigma,
            rho: self.rho,
            beta: self.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.sigma, self.rho, self.beta, self.ts, self.noise_var]
            .iter()
            .chain(&self.z0)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("lorenz config has non-finite values".into()));
        }
        if self.ts <= 0.0 {
            return Err(Error::Config("ts must be positive".into()));
        }
        if self.len == 0 {
            return Err(Error::Config("sequence length must be at least 1".into()));
        }
        if self.noise_var < 0.0 {
            return Err(Error::Config("noise variance must be non-negative".into()));
        }
        if self.train + self.val + self.test == 0 {
            return Err(Error::Config("no sequences requested".into()));
        }
        Ok(())
    }
}

/// One simulated trajectory; `process_noise[t]` is the `q_t` added at step `t`.
#[derive(Clone, Debug)]
pub struct LorenzTrajectory {
    pub z: Vec<[f64; 3]>,
    pub x: Vec<[f64; 3]>,
    pub process_noise: Vec<[f64; 3]>,
}

/// Euler-discretized Lorenz path: `z_t = z_{t−1} + ts·f(z_{t−1}) + q_t`
/// from `z_0 = z0`, observed as `x_t = z_t + r_t`.
pub fn simulate_lorenz(
    theta: &LorenzTheta,
    ts: f64,
    len: usize,
    noise_var: f64,
    z0: [f64; 3],
    rng: &mut impl Rng,
) -> LorenzTrajectory {
    let sd = noise_var.sqrt();
    let mut traj = LorenzTrajectory {
        z: Vec::with_capacity(len),
        x: Vec::with_capacity(len),
        process_noise: Vec::with_capacity(len),
    };
    let mut prev = z0;
    for _ in 0..len {
        let n = standard_normals(rng, 6);
        let f = theta.drift(prev);
        let q = [sd * n[0], sd * n[1], sd * n[2]];
        let z: [f64; 3] = std::array::from_fn(|j| prev[j] + ts * f[j] + q[j]);
        let x: [f64; 3] = std::array::from_fn(|j| z[j] + sd * n[3 + j]);
        traj.z.push(z);
        traj.x.push(x);
        traj.process_noise.push(q);
        prev = z;
    }
    traj
}

fn flat3(rows: &[[f64; 3]]) -> Tensor {
    Tensor::matrix(rows.len(), 3, rows.iter().flatten().copied().collect())
        .expect("rows of width 3")
}

const MAX_ATTEMPTS: u64 = 100;

pub struct LorenzSplits {
    pub train: SequenceDataset,
    pub val: SequenceDataset,
    pub test: SequenceDataset,
}

/// Simulate all sequences and split them. Sequence `j` uses its own
/// substream; a diverged path is redrawn from the next attempt's stream.
/// Split membership is a seeded permutation of the sequence indices.
pub fn gen_lorenz(cfg: &LorenzConfig) -> Result<LorenzSplits> {
    cfg.validate()?;
    let theta = cfg.theta();
    let total = cfg.train + cfg.val + cfg.test;
    let mut xs = Vec::with_capacity(total);
    let mut zs = Vec::with_capacity(total);
    for j in 0..total {
        let mut accepted = None;
        for attempt in 0..MAX_ATTEMPTS {
            let mut rng = substream2(cfg.seed, "data", j as u64, attempt);
            let traj = simulate_lorenz(&theta, cfg.ts, cfg.len, cfg.noise_var, cfg.z0, &mut rng);
            let ok = traj.z.iter().chain(&traj.x).flatten().all(|v| v.is_finite());
            if ok {
                accepted = Some(traj);
                break;
            }
        }
        let traj = accepted.ok_or_else(|| {
            Error::Data(format!(
                "sequence {j} diverged in {MAX_ATTEMPTS} attempts"
            ))
        })?;
        xs.push(flat3(&traj.x));
        zs.push(flat3(&traj.z));
    }

    let order = split_order(cfg.seed, total);
    let config = serde_json::to_value(cfg)?;
    let build = |idx: &[usize]| SequenceDataset {
        sequences: idx.iter().map(|&i| xs[i].clone()).collect(),
        true_states: Some(idx.iter().map(|&i| zs[i].clone()).collect()),
        true_theta: Some(theta),
        config: Some(config.clone()),
    };
    let (a, rest) = order.split_at(cfg.train);
    let (b, c) = rest.split_at(cfg.val);
    Ok(LorenzSplits {
        train: build(a),
        val: build(b),
        test: build(c),
    })
}

fn split_order(seed: u64, total: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut substream(seed, "split", 0));
    order
}

/// Read a JSON-lines piano roll: one sequence per line, each a list of
/// steps, each step a list of active MIDI pitches.
pub fn load_pianoroll(path: impl AsRef<Path>) -> Result<SequenceDataset> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut sequences = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let steps: Vec<Vec<i64>> = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        sequences.push(
            encode_roll(&steps)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?,
        );
    }
    SequenceDataset::new(sequences)
}

/// Active-pitch lists to a `[T, 88]` binary tensor.
pub fn encode_roll(steps: &[Vec<i64>]) -> Result<Tensor> {
    if steps.is_empty() {
        return Err(Error::Data("sequence has no steps".into()));
    }
    let mut data = vec![0.0; steps.len() * PIANO_KEYS];
    for (t, notes) in steps.iter().enumerate() {
        for &p in notes {
            if !(PIANO_LOW..=PIANO_HIGH).contains(&p) {
                return Err(Error::Data(format!(
                    "pitch {p} at step {t} outside {PIANO_LOW}..={PIANO_HIGH}"
                )));
            }
            data[t * PIANO_KEYS + (p - PIANO_LOW) as usize] = 1.0;
        }
    }
    Tensor::matrix(steps.len(), PIANO_KEYS, data)
}

/// Inverse of [`encode_roll`]; pitches come out ascending.
pub fn decode_roll(roll: &Tensor) -> Result<Vec<Vec<i64>>> {
    if roll.ndim() != 2 || roll.shape()[1] != PIANO_KEYS {
        return Err(Error::Data(format!(
            "piano roll must be [T, {PIANO_KEYS}], got {:?}",
            roll.shape()
        )));
    }
    Ok(roll
        .data()
        .chunks(PIANO_KEYS)
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, _)| i as i64 + PIANO_LOW)
                .collect()
        })
        .collect())
}

pub fn save_pianoroll(ds: &SequenceDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for s in &ds.sequences {
        let line = serde_json::to_string(&decode_roll(s)?)?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Probability that the hidden regime flips between consecutive steps.
pub const SYNTH_SWITCH_PROB: f64 = 0.1;

/// Channel `j` fires with probability rising linearly from 0.1 to 0.9
/// across channels in regime 0 and falling from 0.9 to 0.1 in regime 1.
pub fn synth_channel_prob(regime: usize, channel: usize, width: usize) -> f64 {
    let frac = if width > 1 {
        channel as f64 / (width - 1) as f64
    } else {
        0.0
    };
    let up = 0.1 + 0.8 * frac;
    if regime == 0 {
        up
    } else {
        1.0 - up
    }
}

/// Binary sequences from a two-regime hidden Markov chain; the regime
/// starts uniformly and flips with [`SYNTH_SWITCH_PROB`].
pub fn gen_synthetic_binary(obs_dim: usize, len: usize, count: usize, seed: u64) -> Result<SequenceDataset> {
    if obs_dim == 0 || len == 0 || count == 0 {
        return Err(Error::Config("synthetic data needs positive sizes".into()));
    }
    let mut sequences = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = substream(seed, "data", i as u64);
        let mut regime = rng.random_range(0..2usize);
        let mut data = Vec::with_capacity(len * obs_dim);
        for t in 0..len {
            if t > 0 && rng.random::<f64>() < SYNTH_SWITCH_PROB {
                regime = 1 - regime;
            }
            for j in 0..obs_dim {
                let p = synth_channel_prob(regime, j, obs_dim);
                data.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
            }
        }
        sequences.push(Tensor::matrix(len, obs_dim, data)?);
    }
    let mut ds = SequenceDataset::new(sequences)?;
    ds.config = Some(serde_json::json!({
        "generator": "two-regime-binary",
        "obs_dim": obs_dim,
        "len": len,
        "count": count,
        "seed": seed,
        "switch_prob": SYNTH_SWITCH_PROB,
    }));
    Ok(ds)
}

/// Sequences padded to a common length, laid out step-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Dataset index of each row.
    pub indices: Vec<usize>,
    /// Per step, `[B, d_x]`; padded entries are zero.
    pub xs: Vec<Tensor>,
    /// Per step, `[B]` of 0/1.
    pub masks: Vec<Tensor>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn from_dataset(ds: &SequenceDataset, indices: &[usize]) -> Result<Self> {
        let seqs = indices
            .iter()
            .map(|&i| {
                ds.sequences
                    .get(i)
                    .ok_or_else(|| Error::Data(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_sequences(&seqs, indices.to_vec())
    }

    pub fn from_sequences(seqs: &[&Tensor], indices: Vec<usize>) -> Result<Self> {
        let Some(first) = seqs.first() else {
            return Err(Error::Data("empty batch".into()));
        };
        let width = seq_width(first)?;
        let lengths: Vec<usize> = seqs.iter().map(|s| s.shape()[0]).collect();
        let t_max = *lengths.iter().max().unwrap_or(&0);
        let b = seqs.len();
        let mut xs = Vec::with_capacity(t_max);
        let mut masks = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let mut x = vec![0.0; b * width];
            let mut m = vec![0.0; b];
            for (row, s) in seqs.iter().enumerate() {
                if seq_width(s)? != width {
                    return Err(Error::Data("mixed widths in batch".into()));
                }
                if t < lengths[row] {
                    x[row * width..(row + 1) * width].copy_from_slice(s.row(t));
                    m[row] = 1.0;
                }
            }
            xs.push(Tensor::matrix(b, width, x)?);
            masks.push(Tensor::vector(m));
        }
        Ok(Self {
            indices,
            xs,
            masks,
            lengths,
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    /// Padded length.
    pub fn steps(&self) -> usize {
        self.xs.len()
    }

    pub fn valid_steps(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Observations and masks as graph constants, each tiled `repeats` times
    /// along the rows.
    pub fn bind<'g>(&self, graph: &'g Graph, repeats: usize) -> Result<(Vec<Var<'g>>, Vec<Var<'g>>)> {
        let tile = |t: &Tensor| -> Result<Var<'g>> {
            let v = graph.constant(t.clone());
            if repeats == 1 {
                Ok(v)
            } else {
                v.repeat_rows(repeats)
            }
        };
        let xs = self.xs.iter().map(tile).collect::<Result<Vec<_>>>()?;
        let masks = self.masks.iter().map(tile).collect::<Result<Vec<_>>>()?;
        Ok((xs, masks))
    }
}

/// Partition into batches of at most `size` sequences. With a shuffle seed
/// the sequence order is a seeded permutation; otherwise it is the dataset
/// order.
pub fn minibatches(ds: &SequenceDataset, size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
    if size == 0 {
        return Err(Error::Config("minibatch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut substream(seed, "shuffle", 0));
    }
    order
        .chunks(size)
        .map(|idx| Batch::from_dataset(ds, idx))
        .collect()
}

/// Shuffle seed for one epoch, derived from the run seed.
pub fn epoch_shuffle_seed(seed: u64, epoch: u64) -> u64 {
    substream2(seed, "shuffle", epoch, 0).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> LorenzConfig {
        LorenzConfig {
            len: 20,
            train: 4,
            val: 2,
            test: 2,
            seed: 3,
            ..LorenzConfig::default()
        }
    }

    #[test]
    fn lorenz_defaults() {
        let c = LorenzConfig::default();
        assert_eq!((c.train, c.val, c.test, c.len), (50, 10, 10, 100));
        assert_eq!((c.sigma, c.rho, c.beta), (28.0, 10.0, 8.0 / 3.0));
        assert_eq!((c.ts, c.noise_var, c.z0), (0.01, 0.1, [1.0; 3]));
    }

    #[test]
    fn noiseless_lorenz_is_the_euler_path() {
        let cfg = LorenzConfig {
            noise_var: 0.0,
            ..small_cfg()
        };
        let splits = gen_lorenz(&cfg).unwrap();
        let theta = cfg.theta();
        for (x, z) in splits
            .train
            .sequences
            .iter()
            .zip(splits.train.true_states.as_ref().unwrap())
        {
            assert_eq!(x, z);
            let mut prev = cfg.z0;
            for t in 0..cfg.len {
                let f = theta.drift(prev);
                let next: [f64; 3] = std::array::from_fn(|j| prev[j] + cfg.ts * f[j]);
                assert_eq!(z.row(t), &next);
                prev = next;
            }
        }
    }

    #[test]
    fn lorenz_generation_is_deterministic_and_split_disjoint() {
        let a = gen_lorenz(&small_cfg()).unwrap();
        let b = gen_lorenz(&small_cfg()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (4, 2, 2));
        let all: Vec<&Tensor> = a
            .train
            .sequences
            .iter()
            .chain(&a.val.sequences)
            .chain(&a.test.sequences)
            .collect();
        for i in 0..all.len() {
            for j in (i + 1)..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
        assert_eq!(split_order(3, 8), split_order(3, 8));
    }

    #[test]
    fn recursion_residual_matches_recorded_noise() {
        let theta = LorenzTheta::default();
        let mut rng = substream(1, "data", 0);
        let z0 = [1.0, 1.0, 1.0];
        let traj = simulate_lorenz(&theta, 0.01, 50, 0.1, z0, &mut rng);
        let mut prev = z0;
        for (z, q) in traj.z.iter().zip(&traj.process_noise) {
            let f = theta.drift(prev);
            for j in 0..3 {
                let resid = z[j] - prev[j] - 0.01 * f[j];
                assert!((resid - q[j]).abs() <= 1e-12 * z[j].abs().max(1.0));
            }
            prev = *z;
        }
    }

    #[test]
    fn observation_noise_variance_is_calibrated() {
        let theta = LorenzTheta::default();
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0.0;
        let mut seq = 0;
        while n < 1e5 {
            let mut rng = substream(2, "noise", seq);
            let traj = simulate_lorenz(&theta, 0.01, 100, 0.1, [1.0; 3], &mut rng);
            for (x, z) in traj.x.iter().zip(&traj.z) {
                for j in 0..3 {
                    let r = x[j] - z[j];
                    sum += r;
                    sq += r * r;
                    n += 1.0;
                }
            }
            seq += 1;
        }
        let var = sq / n - (sum / n).powi(2);
        assert!((var - 0.1).abs() < 0.005, "{var}");
    }

    #[test]
    fn invalid_lorenz_config_is_rejected() {
        let cfg = LorenzConfig {
            len: 0,
            ..LorenzConfig::default()
        };
        assert!(matches!(gen_lorenz(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn datasets_round_trip_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.json");
        let splits = gen_lorenz(&small_cfg()).unwrap();
        splits.train.save(&path).unwrap();
        let back = SequenceDataset::load(&path).unwrap();
        assert_eq!(back, splits.train);
    }

    #[test]
    fn piano_roll_mapping() {
        let roll = encode_roll(&[vec![21, 108], vec![]]).unwrap();
        assert_eq!(roll.shape(), &[2, 88]);
        let first = roll.row(0);
        assert_eq!((first[0], first[87]), (1.0, 1.0));
        assert_eq!(first.iter().sum::<f64>(), 2.0);
        assert!(roll.row(1).iter().all(|v| *v == 0.0));
        assert!(encode_roll(&[vec![20]]).is_err());
        assert!(encode_roll(&[vec![109]]).is_err());
        assert!(encode_roll(&[]).is_err());
    }

    #[test]
    fn piano_roll_file_round_trip() {
        let mut rng = substream(4, "roll", 0);
        let steps: Vec<Vec<Vec<i64>>> = (0..3)
            .map(|_| {
                (0..10)
                    .map(|_| {
                        let mut notes: Vec<i64> = (PIANO_LOW..=PIANO_HIGH)
                            .filter(|_| rng.random::<f64>() < 0.05)
                            .collect();
                        notes.sort();
                        notes
                    })
                    .collect()
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roll.jsonl");
        let body: String = steps
            .iter()
            .map(|s| serde_json::to_string(s).unwrap() + "\n")
            .collect();
        fs::write(&path, body).unwrap();
        let ds = load_pianoroll(&path).unwrap();
        assert_eq!(ds.obs_dim(), Some(88));
        for (s, orig) in ds.sequences.iter().zip(&steps) {
            assert_eq!(&decode_roll(s).unwrap(), orig);
        }
        let again = dir.path().join("again.jsonl");
        save_pianoroll(&ds, &again).unwrap();
        assert_eq!(load_pianoroll(&again).unwrap(), ds);

        fs::write(&path, "[[21], [\"x\"]]\n").unwrap();
        assert!(load_pianoroll(&path).is_err());
    }

    #[test]
    fn synthetic_binary_properties() {
        let ds = gen_synthetic_binary(16, 30, 64, 5).unwrap();
        assert_eq!(ds, gen_synthetic_binary(16, 30, 64, 5).unwrap());
        assert_eq!(ds.len(), 64);
        let mut sums = vec![0.0; 16];
        for s in &ds.sequences {
            for t in 0..30 {
                for (j, v) in s.row(t).iter().enumerate() {
                    assert!(*v == 0.0 || *v == 1.0);
                    sums[j] += v;
                }
            }
        }
        for s in sums {
            let mean = s / (64.0 * 30.0);
            assert!(mean > 0.05 && mean < 0.95, "{mean}");
        }
        assert!(gen_synthetic_binary(0, 30, 64, 5).is_err());
    }

    #[test]
    fn batches_partition_and_pad() {
        let seqs = vec![
            Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap(),
            Tensor::matrix(3, 1, vec![3.0, 4.0, 5.0]).unwrap(),
            Tensor::matrix(1, 1, vec![6.0]).unwrap(),
        ];
        let ds = SequenceDataset::new(seqs).unwrap();
        let whole = minibatches(&ds, 3, None).unwrap();
        assert_eq!(whole.len(), 1);
        let b = &whole[0];
        assert_eq!(b.indices, vec![0, 1, 2]);
        assert_eq!(b.steps(), 3);
        assert_eq!(b.xs[0].data(), &[1.0, 3.0, 6.0]);
        assert_eq!(b.xs[2].data(), &[0.0, 5.0, 0.0]);
        assert_eq!(b.masks[1].data(), &[1.0, 1.0, 0.0]);
        assert_eq!(b.valid_steps(), 6);

        for n in 1..=4 {
            let batches = minibatches(&ds, n, Some(11)).unwrap();
            let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
            assert_eq!(batches.iter().map(Batch::size).sum::<usize>(), 3);
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2]);
        }
        assert!(minibatches(&ds, 0, None).is_err());
    }
}
