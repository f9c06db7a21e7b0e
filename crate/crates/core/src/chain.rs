//! Exact mutual information along lumped Markov chains.
//!
//! Each passive party is a branch `X → T_1 → … → T_n`. All branch terminals
//! feed one lumping transition into `S_1`, followed by `S_1 → … → S_m → Y`.
//! Branch inputs are mutually independent. Every transition is a
//! row-stochastic table indexed `[from][to]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::info::{exact_mi, JointTable};

/// Largest number of joint terminal/lumping states [`chain_mi_sequence`] enumerates.
pub const MAX_STATES: usize = 1_000_000;

const ROW_TOL: f64 = 1e-12;

/// Row-stochastic transition table.
pub type Transition = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    /// Distribution of the branch input `X^i`.
    pub input: Vec<f64>,
    /// `X → T_1`, `T_1 → T_2`, …, `T_{n-1} → T_n`.
    pub stages: Vec<Transition>,
}

impl Branch {
    pub fn terminal_size(&self) -> usize {
        self.stages
            .last()
            .map_or(self.input.len(), |t| t.first().map_or(0, Vec::len))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovChainSpec {
    pub branches: Vec<Branch>,
    /// Rows indexed by the joint terminal state in mixed radix, branch 0 most
    /// significant; columns are `S_1` symbols.
    pub lumping: Transition,
    /// `S_1 → S_2`, …, `S_{m-1} → S_m`.
    pub top: Vec<Transition>,
    /// `S_m → Y`.
    pub output: Transition,
}

/// Exact `I(·;Y)` for every stage, ordered input → output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMi {
    /// Per branch: `I(X;Y), I(T_1;Y), …, I(T_n;Y)`.
    pub branches: Vec<Vec<f64>>,
    /// `I(S_1;Y), …, I(S_m;Y)`.
    pub top: Vec<f64>,
}

/// A violated inequality found by [`ChainMi::violations`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub what: String,
    pub excess: f64,
}

impl ChainMi {
    /// Checks branch monotonicity, terminal-to-lumping dominance and top
    /// monotonicity, each with absolute tolerance `tol`.
    pub fn violations(&self, tol: f64) -> Vec<Violation> {
        let mut out = Vec::new();
        let s1 = self.top.first().copied().unwrap_or(f64::INFINITY);
        for (b, seq) in self.branches.iter().enumerate() {
            for (j, w) in seq.windows(2).enumerate() {
                if w[0] > w[1] + tol {
                    out.push(Violation {
                        what: format!("branch {b}: stage {j} exceeds stage {}", j + 1),
                        excess: w[0] - w[1],
                    });
                }
            }
            if let Some(&last) = seq.last() {
                if last > s1 + tol {
                    out.push(Violation {
                        what: format!("branch {b}: terminal exceeds lumping point"),
                        excess: last - s1,
                    });
                }
            }
        }
        for (j, w) in self.top.windows(2).enumerate() {
            if w[0] > w[1] + tol {
                out.push(Violation {
                    what: format!("top: S_{} exceeds S_{}", j + 1, j + 2),
                    excess: w[0] - w[1],
                });
            }
        }
        out
    }
}

fn check_stochastic(name: &str, t: &Transition, rows: usize) -> Result<usize> {
    if t.len() != rows {
        return Err(Error::data(format!(
            "{name}: {} rows, expected {rows}",
            t.len()
        )));
    }
    let cols = t.first().map_or(0, Vec::len);
    if cols == 0 {
        return Err(Error::data(format!("{name}: empty output alphabet")));
    }
    for (r, row) in t.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::data(format!("{name}: ragged row {r}")));
        }
        if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::data(format!("{name}: negative entry in row {r}")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_TOL {
            return Err(Error::data(format!("{name}: row {r} sums to {s}")));
        }
    }
    Ok(cols)
}

impl MarkovChainSpec {
    /// Reads a chain from a JSON document mirroring this struct.
    pub fn load_json(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let chain: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: byte_offset(&text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        chain.validate()?;
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape().map(|_| ())
    }

    /// Returns the joint terminal state count and the `S_1` alphabet size.
    fn shape(&self) -> Result<(usize, usize)> {
        if self.branches.is_empty() {
            return Err(Error::data("chain has no branches"));
        }
        let mut joint = 1usize;
        for (b, br) in self.branches.iter().enumerate() {
            let s: f64 = br.input.iter().sum();
            if br.input.is_empty()
                || br.input.iter().any(|&p| !(p >= 0.0))
                || (s - 1.0).abs() > ROW_TOL
            {
                return Err(Error::data(format!("branch {b}: input is not a distribution")));
            }
            let mut size = br.input.len();
            for (j, t) in br.stages.iter().enumerate() {
                size = check_stochastic(&format!("branch {b} stage {j}"), t, size)?;
            }
            joint = joint.checked_mul(size).ok_or_else(|| {
                Error::Capacity("terminal product alphabet overflows".into())
            })?;
            if joint > MAX_STATES {
                return Err(Error::Capacity(format!(
                    "terminal product alphabet exceeds {MAX_STATES} states"
                )));
            }
        }
        let s1 = check_stochastic("lumping", &self.lumping, joint)?;
        if joint.saturating_mul(s1) > MAX_STATES {
            return Err(Error::Capacity(format!(
                "{joint} terminal states x {s1} lumping states exceeds {MAX_STATES}"
            )));
        }
        let mut size = s1;
        for (j, t) in self.top.iter().enumerate() {
            size = check_stochastic(&format!("top stage {j}"), t, size)?;
        }
        check_stochastic("output", &self.output, size)?;
        Ok((joint, s1))
    }

    pub fn depth_bottom(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.stages.len()).collect()
    }

    pub fn depth_top(&self) -> usize {
        self.top.len() + 1
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (before + column.saturating_sub(1)) as u64
}

fn vec_times(p: &[f64], t: &Transition) -> Vec<f64> {
    let cols = t[0].len();
    let mut out = vec![0.0; cols];
    for (pi, row) in p.iter().zip(t) {
        if *pi == 0.0 {
            continue;
        }
        for (o, r) in out.iter_mut().zip(row) {
            *o += pi * r;
        }
    }
    out
}

/// `a · b` for transition tables.
fn compose(a: &Transition, b: &Transition) -> Transition {
    a.iter().map(|row| vec_times(row, b)).collect()
}

fn identity(n: usize) -> Transition {
    (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect()
}

/// Exact MI of `V` with `Y` given `p(V)` and `p(Y | V)`.
fn mi_from_channel(pv: &[f64], y_given_v: &Transition) -> Result<f64> {
    let ny = y_given_v[0].len();
    let probs: Vec<f64> = pv
        .iter()
        .zip(y_given_v)
        .flat_map(|(&p, row)| row.iter().map(move |&q| p * q))
        .collect();
    let total: f64 = probs.iter().sum();
    let j = JointTable::new(pv.len(), ny, probs.iter().map(|p| p / total).collect())?;
    Ok(exact_mi(&j))
}

/// Computes `I(X^i;Y)`, `I(T_j^i;Y)` and `I(S_j;Y)` for every stage by exact
/// marginalization over the chain's joint distribution.
pub fn chain_mi_sequence(chain: &MarkovChainSpec) -> Result<ChainMi> {
    let (joint, _) = chain.shape()?;

    // p(Y | S_j), built backward from the output.
    let mut y_given_s = vec![chain.output.clone()];
    for t in chain.top.iter().rev() {
        let next = compose(t, &y_given_s[0]);
        y_given_s.insert(0, next);
    }
    let y_given_terminals = compose(&chain.lumping, &y_given_s[0]);
    let ny = chain.output[0].len();

    // Per-branch marginals at every stage; terminal marginals are independent.
    let stage_marginals: Vec<Vec<Vec<f64>>> = chain
        .branches
        .iter()
        .map(|b| {
            let mut ps = vec![b.input.clone()];
            for t in &b.stages {
                let next = vec_times(ps.last().expect("nonempty"), t);
                ps.push(next);
            }
            ps
        })
        .collect();
    let sizes: Vec<usize> = stage_marginals
        .iter()
        .map(|ps| ps.last().expect("nonempty").len())
        .collect();
    let terminals: Vec<&Vec<f64>> = stage_marginals
        .iter()
        .map(|ps| ps.last().expect("nonempty"))
        .collect();

    let mut p_terminals = vec![0.0; joint];
    let mut digits = vec![0usize; sizes.len()];
    for (state, slot) in p_terminals.iter_mut().enumerate() {
        decode(state, &sizes, &mut digits);
        *slot = digits
            .iter()
            .enumerate()
            .map(|(b, &d)| terminals[b][d])
            .product();
    }

    let mut branches = Vec::with_capacity(chain.branches.len());
    for (b, branch) in chain.branches.iter().enumerate() {
        // p(Y | T_n^b) by summing out the other terminals.
        let mut joint_ty = vec![vec![0.0; ny]; sizes[b]];
        for (state, &p) in p_terminals.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            decode(state, &sizes, &mut digits);
            for (acc, &q) in joint_ty[digits[b]].iter_mut().zip(&y_given_terminals[state]) {
                *acc += p * q;
            }
        }
        let y_given_tn: Transition = joint_ty
            .iter()
            .zip(terminals[b])
            .map(|(row, &pt)| {
                if pt > 0.0 {
                    row.iter().map(|v| v / pt).collect()
                } else {
                    vec![1.0 / ny as f64; ny]
                }
            })
            .collect();

        // Walk stages backward composing transitions into p(Y | stage).
        let n = branch.stages.len();
        let mut seq = vec![0.0; n + 1];
        let mut to_terminal = identity(sizes[b]);
        for j in (0..=n).rev() {
            let y_given_v = compose(&to_terminal, &y_given_tn);
            seq[j] = mi_from_channel(&stage_marginals[b][j], &y_given_v)?;
            if j > 0 {
                to_terminal = compose(&branch.stages[j - 1], &to_terminal);
            }
        }
        branches.push(seq);
    }

    let mut top = Vec::with_capacity(chain.depth_top());
    let mut ps = vec_times(&p_terminals, &chain.lumping);
    for (j, y_given) in y_given_s.iter().enumerate() {
        top.push(mi_from_channel(&ps, y_given)?);
        if j < chain.top.len() {
            ps = vec_times(&ps, &chain.top[j]);
        }
    }
    Ok(ChainMi { branches, top })
}

/// Mixed-radix decode with the first digit most significant.
fn decode(mut state: usize, sizes: &[usize], digits: &mut [usize]) {
    for (d, &s) in digits.iter_mut().zip(sizes).rev() {
        *d = state % s;
        state /= s;
    }
}

fn random_distribution<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    // Cubing skews rows toward sparse, informative channels.
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3) + 1e-3).collect();
    let s: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|v| v / s).collect();
    // Fold the rounding residue into the largest entry so rows sum to 1.
    let resid = 1.0 - p.iter().sum::<f64>();
    let imax = crate::matrix::argmax(&p);
    p[imax] += resid;
    p
}

fn random_transition<R: Rng>(rng: &mut R, from: usize, to: usize) -> Transition {
    (0..from).map(|_| random_distribution(rng, to)).collect()
}

/// Seeded random chain: `k` branches of depth `n`, a top of depth `m`, and
/// alphabets drawn from `2..=max_alphabet`.
pub fn random_chain(seed: u64, k: usize, n: usize, m: usize, max_alphabet: usize) -> MarkovChainSpec {
    assert!(k >= 1 && m >= 1 && max_alphabet >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = |rng: &mut ChaCha8Rng| rng.random_range(2..=max_alphabet);
    let mut branches = Vec::with_capacity(k);
    let mut joint = 1;
    for _ in 0..k {
        let mut prev = size(&mut rng);
        let input = random_distribution(&mut rng, prev);
        let mut stages = Vec::with_capacity(n);
        for _ in 0..n {
            let next = size(&mut rng);
            stages.push(random_transition(&mut rng, prev, next));
            prev = next;
        }
        joint *= prev;
        branches.push(Branch { input, stages });
    }
    let mut prev = size(&mut rng);
    let lumping = random_transition(&mut rng, joint, prev);
    let mut top = Vec::with_capacity(m - 1);
    for _ in 1..m {
        let next = size(&mut rng);
        top.push(random_transition(&mut rng, prev, next));
        prev = next;
    }
    let ny = size(&mut rng);
    let output = random_transition(&mut rng, prev, ny);
    MarkovChainSpec {
        branches,
        lumping,
        top,
        output,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident(n: usize) -> Transition {
        identity(n)
    }

    #[test]
    fn lossless_single_branch() {
        let chain = MarkovChainSpec {
            branches: vec![Branch {
                input: vec![0.2, 0.3, 0.5],
                stages: vec![ident(3), ident(3)],
            }],
            lumping: ident(3),
            top: vec![ident(3)],
            output: ident(3),
        };
        let h = crate::info::exact_entropy(&[0.2, 0.3, 0.5]).unwrap();
        let mi = chain_mi_sequence(&chain).unwrap();
        for v in mi.branches[0].iter().chain(&mi.top) {
            assert!((v - h).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_output_gives_zero() {
        let mut chain = random_chain(3, 2, 2, 2, 3);
        let rows = chain.output.len();
        chain.output = vec![vec![1.0, 0.0]; rows];
        let mi = chain_mi_sequence(&chain).unwrap();
        for v in mi.branches.iter().flatten().chain(&mi.top) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let mut chain = random_chain(1, 1, 1, 1, 3);
        chain.output[0][0] += 0.1;
        assert!(matches!(chain_mi_sequence(&chain), Err(Error::Data(_))));
    }

    #[test]
    fn capacity_limit() {
        let wide = Branch {
            input: vec![1.0 / 1001.0; 1001],
            stages: vec![],
        };
        let chain = MarkovChainSpec {
            branches: vec![wide.clone(), wide],
            lumping: vec![vec![1.0]; 1001 * 1001],
            top: vec![],
            output: vec![vec![1.0]],
        };
        assert!(matches!(chain_mi_sequence(&chain), Err(Error::Capacity(_))));
    }

    #[test]
    fn decode_mixed_radix() {
        let mut d = [0; 3];
        decode(1 * 12 + 2 * 4 + 3, &[2, 3, 4], &mut d);
        assert_eq!(d, [1, 2, 3]);
    }
}
