//! Exact information quantities over small discrete joints, and numerical
//! certification of the two bottleneck theorems.
//!
//! All quantities are in nats. Variables are addressed by index; a "spec" is a
//! slice of variable indices treated as one compound variable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

pub const MAX_STATES: usize = 64;
const MAX_TABLE: usize = 1 << 20;
const SUM_TOL: f64 = 1e-12;
const NEG_TOL: f64 = 1e-15;
const MI_TOL: f64 = 1e-12;
/// Tolerance on non-strict inequalities.
pub const WEAK_TOL: f64 = 1e-10;
/// Margin required by strict inequalities.
pub const STRICT_MARGIN: f64 = 1e-9;

/// Dense pmf over named discrete variables, stored row-major in declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    names: Vec<String>,
    cards: Vec<usize>,
    pmf: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(names: Vec<String>, cards: Vec<usize>, pmf: Vec<f64>) -> Result<Self> {
        if names.len() != cards.len() || names.is_empty() {
            return Err(Error::invalid("one cardinality per variable is required"));
        }
        if let Some(&c) = cards.iter().find(|&&c| c == 0 || c > MAX_STATES) {
            return Err(Error::invalid(format!("alphabet size {c} outside 1..={MAX_STATES}")));
        }
        let size = cards
            .iter()
            .try_fold(1usize, |a, &c| a.checked_mul(c).filter(|&n| n <= MAX_TABLE))
            .ok_or_else(|| Error::invalid("joint table too large to enumerate"))?;
        if pmf.len() != size {
            return Err(Error::Shape {
                op: "joint",
                lhs: vec![size],
                rhs: vec![pmf.len()],
            });
        }
        if let Some(p) = pmf.iter().find(|&&p| !p.is_finite() || p < -NEG_TOL) {
            return Err(Error::invalid(format!("invalid probability {p}")));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid(format!("pmf sums to {total}, not 1")));
        }
        Ok(Self {
            names,
            cards,
            pmf: pmf.into_iter().map(|p| p.max(0.0)).collect(),
        })
    }

    /// Joint over `(y, x, z)` factored as `p(y)·p(x|y)·p(z|x)`; rows of each
    /// conditional are indexed by the conditioning state.
    pub fn markov(p_y: &[f64], p_x_given_y: &[Vec<f64>], p_z_given_x: &[Vec<f64>]) -> Result<Self> {
        let (ky, kx) = (p_y.len(), p_z_given_x.len());
        let kz = p_z_given_x.first().map_or(0, Vec::len);
        if p_x_given_y.len() != ky || p_x_given_y.iter().any(|r| r.len() != kx) || p_z_given_x.iter().any(|r| r.len() != kz)
        {
            return Err(Error::invalid("conditional tables have inconsistent shapes"));
        }
        let mut pmf = Vec::with_capacity(ky * kx * kz);
        for (y, &py) in p_y.iter().enumerate() {
            for x in 0..kx {
                for z in 0..kz {
                    pmf.push(py * p_x_given_y[y][x] * p_z_given_x[x][z]);
                }
            }
        }
        Self::new(vec!["y".into(), "x".into(), "z".into()], vec![ky, kx, kz], pmf)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn var(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("no variable named {name:?}")))
    }

    fn check_spec(&self, vars: &[usize]) -> Result<()> {
        let mut seen = vec![false; self.cards.len()];
        for &v in vars {
            if v >= self.cards.len() || seen[v] {
                return Err(Error::invalid(format!("bad variable index {v} in {vars:?}")));
            }
            seen[v] = true;
        }
        Ok(())
    }

    /// Marginal pmf of `vars`, row-major in the order given.
    pub fn marginal(&self, vars: &[usize]) -> Result<Vec<f64>> {
        self.check_spec(vars)?;
        let size: usize = vars.iter().map(|&v| self.cards[v]).product();
        let mut strides = vec![0usize; self.cards.len()];
        let mut s = 1;
        for &v in vars.iter().rev() {
            strides[v] = s;
            s *= self.cards[v];
        }
        let mut out = vec![0.0; size];
        let mut state = vec![0usize; self.cards.len()];
        for &p in &self.pmf {
            let idx: usize = state.iter().zip(&strides).map(|(a, b)| a * b).sum();
            out[idx] += p;
            for d in (0..state.len()).rev() {
                state[d] += 1;
                if state[d] < self.cards[d] {
                    break;
                }
                state[d] = 0;
            }
        }
        Ok(out)
    }

    /// `H(vars)`; the empty spec has zero entropy.
    pub fn entropy(&self, vars: &[usize]) -> Result<f64> {
        Ok(entropy(&self.marginal(vars)?))
    }

    /// `H(a | b) = H(a, b) − H(b)`.
    pub fn conditional_entropy(&self, a: &[usize], b: &[usize]) -> Result<f64> {
        let ab = union(a, b);
        Ok(self.entropy(&ab)? - self.entropy(b)?)
    }

    /// `I(a; b | c)`, exactly zero when `c` is empty and the pair is independent up to rounding.
    pub fn mutual_information(&self, a: &[usize], b: &[usize], c: &[usize]) -> Result<f64> {
        let i = if c.is_empty() {
            self.entropy(a)? + self.entropy(b)? - self.entropy(&union(a, b))?
        } else {
            self.conditional_entropy(a, c)? - self.conditional_entropy(a, &union(b, c))?
        };
        if i < -MI_TOL {
            return Err(Error::invalid(format!("mutual information {i} is negative beyond tolerance")));
        }
        Ok(i.max(0.0))
    }
}

fn union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = a.to_vec();
    out.extend(b.iter().filter(|v| !a.contains(v)));
    out
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IbValue {
    pub i_xz: f64,
    pub i_yz: f64,
    pub lambda: f64,
    pub l_ib: f64,
}

/// `L_IB(Z) = I(X; Z) − λ·I(Y; Z)`.
pub fn ib_objective(joint: &DiscreteJoint, x: &[usize], y: &[usize], z: &[usize], lambda: f64) -> Result<IbValue> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("lambda {lambda} must be positive")));
    }
    let i_xz = joint.mutual_information(x, z, &[])?;
    let i_yz = joint.mutual_information(y, z, &[])?;
    Ok(IbValue {
        i_xz,
        i_yz,
        lambda,
        l_ib: i_xz - lambda * i_yz,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub theorem: String,
    pub trials: usize,
    pub lambda: f64,
    /// Trials that met every precondition yet broke the inequality.
    pub violations: usize,
    /// Trials where a precondition did not hold and the inequality also failed.
    pub precondition_failures: usize,
    /// Trials whose construction did not pass its own precondition check.
    pub construction_errors: usize,
    /// Smallest observed `lhs − rhs` among precondition-respecting trials.
    pub min_slack: f64,
    pub seed: u64,
}

enum Outcome {
    Holds(f64),
    Violation(f64),
    PreconditionFailure,
    ConstructionError,
    PreconditionBrokenButHolds,
}

fn summarize(theorem: &str, trials: usize, lambda: f64, seed: u64, outcomes: Vec<Outcome>) -> TheoremReport {
    let mut r = TheoremReport {
        theorem: theorem.into(),
        trials,
        lambda,
        violations: 0,
        precondition_failures: 0,
        construction_errors: 0,
        min_slack: f64::INFINITY,
        seed,
    };
    for o in outcomes {
        match o {
            Outcome::Holds(s) => r.min_slack = r.min_slack.min(s),
            Outcome::Violation(s) => {
                r.violations += 1;
                r.min_slack = r.min_slack.min(s);
            }
            Outcome::PreconditionFailure => r.precondition_failures += 1,
            Outcome::ConstructionError => r.construction_errors += 1,
            Outcome::PreconditionBrokenButHolds => {}
        }
    }
    r
}

fn random_pmf(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let sparse = rng.gen_bool(0.2);
    let mut w: Vec<f64> = (0..k)
        .map(|_| {
            if sparse && rng.gen_bool(0.4) {
                0.0
            } else {
                Exp1.sample(rng)
            }
        })
        .collect();
    if w.iter().all(|&x| x == 0.0) {
        w[rng.gen_range(0..k)] = 1.0;
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

fn random_conditional(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| random_pmf(rng, k)).collect()
}

fn normalize(mut pmf: Vec<f64>) -> Vec<f64> {
    let s: f64 = pmf.iter().sum();
    pmf.iter_mut().for_each(|p| *p /= s);
    pmf
}

/// Variable layout shared by the compression constructions:
/// `X = (A, B)`, `Y = A`, `Z = (Z_ret, Z_trim)`.
pub struct CompressionWorld {
    pub joint: DiscreteJoint,
    pub x: Vec<usize>,
    pub y: Vec<usize>,
    pub z_ret: Vec<usize>,
    pub z_trim: Vec<usize>,
}

impl CompressionWorld {
    pub fn z(&self) -> Vec<usize> {
        union(&self.z_ret, &self.z_trim)
    }
}

/// Builds `p(a) p(b) p(z_ret | a) p(z_trim | b, z_ret)` when `respect` holds,
/// which makes `Z_trim` conditionally independent of `Y` given `Z_ret`. The
/// adversarial variant lets `Z_trim` read `A` instead.
fn compression_world(rng: &mut ChaCha8Rng, respect: bool) -> Result<CompressionWorld> {
    let ka = rng.gen_range(2..=4);
    let kb = rng.gen_range(1..=4);
    let kr = rng.gen_range(1..=4);
    let kt = rng.gen_range(2..=4);
    let pa = random_pmf(rng, ka);
    let pb = random_pmf(rng, kb);
    let pr = random_conditional(rng, ka, kr);
    let pt = random_conditional(rng, if respect { kb * kr } else { ka * kr }, kt);
    let mut pmf = Vec::with_capacity(ka * kb * kr * kt);
    for a in 0..ka {
        for b in 0..kb {
            for r in 0..kr {
                let row = if respect { b * kr + r } else { a * kr + r };
                for t in 0..kt {
                    pmf.push(pa[a] * pb[b] * pr[a][r] * pt[row][t]);
                }
            }
        }
    }
    let joint = DiscreteJoint::new(
        ["a", "b", "z_ret", "z_trim"].map(String::from).to_vec(),
        vec![ka, kb, kr, kt],
        normalize(pmf),
    )?;
    Ok(CompressionWorld {
        joint,
        x: vec![0, 1],
        y: vec![0],
        z_ret: vec![2],
        z_trim: vec![3],
    })
}

/// `X` uniform on two bits, `Y` the first bit, `Z_ret` the first bit and
/// `Z_trim` the second, so `Z` reproduces `X`.
pub fn two_bit_witness() -> CompressionWorld {
    let mut pmf = vec![0.0; 16];
    for a in 0..2 {
        for b in 0..2 {
            pmf[((a * 2 + b) * 2 + a) * 2 + b] = 0.25;
        }
    }
    CompressionWorld {
        joint: DiscreteJoint::new(
            ["a", "b", "z_ret", "z_trim"].map(String::from).to_vec(),
            vec![2; 4],
            pmf,
        )
        .expect("valid witness"),
        x: vec![0, 1],
        y: vec![0],
        z_ret: vec![2],
        z_trim: vec![3],
    }
}

/// `L_IB(Z) − L_IB(Z_ret)` together with `I(Y; Z_trim | Z_ret)`.
pub fn compression_gap(w: &CompressionWorld, lambda: f64) -> Result<(f64, f64)> {
    let full = ib_objective(&w.joint, &w.x, &w.y, &w.z(), lambda)?;
    let kept = ib_objective(&w.joint, &w.x, &w.y, &w.z_ret, lambda)?;
    let leak = w.joint.mutual_information(&w.y, &w.z_trim, &w.z_ret)?;
    Ok((full.l_ib - kept.l_ib, leak))
}

fn theorem1_trial(seed: u64, i: usize, lambda: f64, respect: bool) -> Outcome {
    let mut rng = seeds::rng(seed, if respect { "ib-t1" } else { "ib-t1-adv" }, i as u64);
    let Ok(w) = compression_world(&mut rng, respect) else {
        return Outcome::ConstructionError;
    };
    let Ok((gap, leak)) = compression_gap(&w, lambda) else {
        return Outcome::ConstructionError;
    };
    let holds = gap >= -WEAK_TOL;
    match (respect, leak <= WEAK_TOL, holds) {
        (true, false, _) => Outcome::ConstructionError,
        (_, true, true) => Outcome::Holds(gap),
        (_, true, false) => Outcome::Violation(gap),
        (false, false, true) => Outcome::PreconditionBrokenButHolds,
        (false, false, false) => Outcome::PreconditionFailure,
    }
}

/// Compression cannot lower the objective below the retained part's:
/// `L_IB(Z) ≥ L_IB(Z_ret)` whenever `I(Y; Z_trim | Z_ret) = 0`.
pub fn verify_theorem1(trials: usize, lambda: f64, seed: u64) -> Result<TheoremReport> {
    run_trials("theorem1", trials, lambda, seed, |i| theorem1_trial(seed, i, lambda, true))
}

/// Same check with `Z_trim` allowed to read `Y` directly. Failures land in
/// `precondition_failures`.
pub fn probe_theorem1(trials: usize, lambda: f64, seed: u64) -> Result<TheoremReport> {
    run_trials("theorem1-probe", trials, lambda, seed, |i| theorem1_trial(seed, i, lambda, false))
}

fn run_trials<F>(name: &str, trials: usize, lambda: f64, seed: u64, f: F) -> Result<TheoremReport>
where
    F: Fn(usize) -> Outcome + Sync + Send,
{
    if trials == 0 {
        return Err(Error::invalid("at least one trial is required"));
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("lambda {lambda} must be positive")));
    }
    let outcomes: Vec<Outcome> = (0..trials).into_par_iter().map(f).collect();
    Ok(summarize(name, trials, lambda, seed, outcomes))
}

/// Variable layout for the enhancement construction: `X`, `Y = f(X)`, `Z ~ p(z | x)`
/// and `Z′ = g(Z, Y)`.
pub struct EnhancementWorld {
    pub joint: DiscreteJoint,
    pub x: Vec<usize>,
    pub y: Vec<usize>,
    pub z: Vec<usize>,
    pub z_prime: Vec<usize>,
}

/// `g` is a random table; `injective` makes `Z′` encode `(Z, Y)` exactly.
fn enhancement_world(rng: &mut ChaCha8Rng, injective: bool) -> Result<EnhancementWorld> {
    let kx = rng.gen_range(2..=6);
    let ky = rng.gen_range(2..=kx.min(3));
    let kz = rng.gen_range(1..=4);
    let f: Vec<usize> = (0..kx).map(|x| if x < ky { x } else { rng.gen_range(0..ky) }).collect();
    let px = random_pmf(rng, kx);
    let pz = random_conditional(rng, kx, kz);
    let kp = if injective { kz * ky } else { rng.gen_range(2..=6) };
    let g: Vec<usize> = (0..kz * ky)
        .map(|i| if injective { i } else { rng.gen_range(0..kp) })
        .collect();
    let mut pmf = vec![0.0; kx * ky * kz * kp];
    for x in 0..kx {
        for z in 0..kz {
            let y = f[x];
            let zp = g[z * ky + y];
            pmf[((x * ky + y) * kz + z) * kp + zp] += px[x] * pz[x][z];
        }
    }
    let joint = DiscreteJoint::new(
        ["x", "y", "z", "z_prime"].map(String::from).to_vec(),
        vec![kx, ky, kz, kp],
        normalize(pmf),
    )?;
    Ok(EnhancementWorld {
        joint,
        x: vec![0],
        y: vec![1],
        z: vec![2],
        z_prime: vec![3],
    })
}

/// `L_IB(Z) − L_IB(Z′)` and `H(Y | Z) − H(Y | Z′)`.
pub fn enhancement_gap(w: &EnhancementWorld, lambda: f64) -> Result<(f64, f64)> {
    let before = ib_objective(&w.joint, &w.x, &w.y, &w.z, lambda)?;
    let after = ib_objective(&w.joint, &w.x, &w.y, &w.z_prime, lambda)?;
    let gain = w.joint.conditional_entropy(&w.y, &w.z)? - w.joint.conditional_entropy(&w.y, &w.z_prime)?;
    Ok((before.l_ib - after.l_ib, gain))
}

const RESAMPLE_LIMIT: usize = 64;

fn theorem2_trial(seed: u64, i: usize, lambda: f64, injective_every: Option<usize>) -> Outcome {
    let mut rng = seeds::rng(seed, "ib-t2", i as u64);
    let injective = injective_every.is_some_and(|k| i.is_multiple_of(k));
    for _ in 0..RESAMPLE_LIMIT {
        let Ok(w) = enhancement_world(&mut rng, injective) else {
            return Outcome::ConstructionError;
        };
        let Ok(determined) = w.joint.conditional_entropy(&w.z_prime, &union(&w.z, &w.y)) else {
            return Outcome::ConstructionError;
        };
        if determined > WEAK_TOL {
            return Outcome::ConstructionError;
        }
        let Ok((gap, gain)) = enhancement_gap(&w, lambda) else {
            return Outcome::ConstructionError;
        };
        if gain < STRICT_MARGIN {
            continue;
        }
        let holds = gap > STRICT_MARGIN - WEAK_TOL;
        return match (lambda > 1.0, holds) {
            (true, true) => Outcome::Holds(gap),
            (true, false) => Outcome::Violation(gap),
            (false, true) => Outcome::PreconditionBrokenButHolds,
            (false, false) => Outcome::PreconditionFailure,
        };
    }
    Outcome::ConstructionError
}

/// Enhancement strictly lowers the objective: `L_IB(Z) > L_IB(Z′)` for
/// `Z′ = g(Z, Y)` with `H(Y | Z′) < H(Y | Z)` and `λ > 1`.
pub fn verify_theorem2(trials: usize, lambda: f64, seed: u64) -> Result<TheoremReport> {
    if !(lambda > 1.0) {
        return Err(Error::invalid(format!("lambda {lambda} must exceed 1; use probe_theorem2")));
    }
    run_trials("theorem2", trials, lambda, seed, |i| theorem2_trial(seed, i, lambda, None))
}

/// Runs the enhancement check at any `λ > 0`, mixing in injective `g` so the
/// equality case is exercised. With `λ ≤ 1` failures land in `precondition_failures`.
pub fn probe_theorem2(trials: usize, lambda: f64, seed: u64) -> Result<TheoremReport> {
    run_trials("theorem2-probe", trials, lambda, seed, |i| theorem2_trial(seed, i, lambda, Some(2)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub trials: usize,
    /// Largest `|I(X;Z) − I(X;Z_ret) − I(X;Z_trim|Z_ret)|`.
    pub chain_rule_max_error: f64,
    /// Largest `I(Y;Z) − I(X;Z)`; non-positive up to rounding.
    pub data_processing_max_excess: f64,
    pub seed: u64,
}

/// Chain-rule and data-processing checks on random joints where `Z` depends on `X` only.
pub fn verify_identities(trials: usize, seed: u64) -> Result<IdentityReport> {
    if trials == 0 {
        return Err(Error::invalid("at least one trial is required"));
    }
    let rows: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds::rng(seed, "ib-identities", i as u64);
            let kx = rng.gen_range(2..=6);
            let ky = rng.gen_range(1..=kx.min(3));
            let (kr, kt) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let f: Vec<usize> = (0..kx).map(|x| if x < ky { x } else { rng.gen_range(0..ky) }).collect();
            let px = random_pmf(&mut rng, kx);
            let pz = random_conditional(&mut rng, kx, kr * kt);
            let mut pmf = vec![0.0; kx * ky * kr * kt];
            for x in 0..kx {
                for z in 0..kr * kt {
                    pmf[(x * ky + f[x]) * kr * kt + z] += px[x] * pz[x][z];
                }
            }
            let j = DiscreteJoint::new(
                ["x", "y", "z_ret", "z_trim"].map(String::from).to_vec(),
                vec![kx, ky, kr, kt],
                normalize(pmf),
            )?;
            let ixz = j.mutual_information(&[0], &[2, 3], &[])?;
            let chain = j.mutual_information(&[0], &[2], &[])? + j.mutual_information(&[0], &[3], &[2])?;
            let iyz = j.mutual_information(&[1], &[2, 3], &[])?;
            Ok(((ixz - chain).abs(), iyz - ixz))
        })
        .collect::<Result<_>>()?;
    Ok(IdentityReport {
        trials,
        chain_rule_max_error: rows.iter().map(|r| r.0).fold(0.0, f64::max),
        data_processing_max_excess: rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max),
        seed,
    })
}
