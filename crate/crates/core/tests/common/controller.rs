//! Exit-controller checks shared by the property tests and the acceptance
//! run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtd_core::exit_controller::{reassign, ExitDistribution};

pub const EXAMPLE_P: [f64; 4] = [0.4, 0.4, 0.1, 0.1];
pub const SCORES: [f64; 4] = [0.0, 1.0, 2.0, 3.0];

/// Independent evaluation of `softmax(p + alpha * diff * r)`.
pub fn oracle(p: &[f64], r: &[f64], alpha: f64, diff: f64) -> Vec<f64> {
    let z: Vec<f64> = p.iter().zip(r).map(|(a, b)| (a + alpha * diff * b).exp()).collect();
    let s: f64 = z.iter().sum();
    z.into_iter().map(|x| x / s).collect()
}

/// The controller's output for the reference state: accuracy 0.7 then 0.9.
pub fn worked_example() -> Vec<f64> {
    let mut c = ExitDistribution::with_state(&EXAMPLE_P, &SCORES, 0.1, Some(0.7)).expect("valid state");
    c.update(0.9).expect("valid accuracy").expect("second window updates");
    c.probabilities().to_vec()
}

fn random_state(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, f64) {
    let n = rng.gen_range(2..=8);
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-3..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let p = raw.iter().map(|x| x / s).collect();
    // strictly increasing scores starting anywhere
    let mut r = Vec::with_capacity(n);
    let mut acc = rng.gen_range(-2.0..2.0);
    for _ in 0..n {
        r.push(acc);
        acc += rng.gen_range(0.1..2.0);
    }
    (p, r, rng.gen_range(0.01..1.0))
}

/// Runs `trials` random controller states through one update and checks
/// normalization, the direction of the probability-ratio shift against
/// the zero-change update, and clamping of large differences.
pub fn property_suite(trials: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let (p, r, alpha) = random_state(&mut rng);
        let acc_prev = rng.gen_range(0.0..=1.0);
        let acc_curr = match trial % 10 {
            0 => acc_prev,
            _ => rng.gen_range(0.0..=1.0),
        };
        let diff = acc_curr - acc_prev;
        let mut c = ExitDistribution::with_state(&p, &r, alpha, Some(acc_prev)).map_err(|e| e.to_string())?;
        c.update(acc_curr).map_err(|e| e.to_string())?;
        let out = c.probabilities();
        let sum: f64 = out.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("trial {trial}: sum {sum}"));
        }
        let base = reassign(&p, &r, alpha, 0.0);
        for i in 0..out.len() {
            for j in i + 1..out.len() {
                let shift = (out[j] / out[i]).ln() - (base[j] / base[i]).ln();
                let expected = alpha * diff * (r[j] - r[i]);
                let toward_higher = shift > 0.0;
                if toward_higher != (diff > 0.0) || (shift - expected).abs() > 1e-9 {
                    return Err(format!("trial {trial}: exits {i}<{j} shift {shift} with diff {diff}"));
                }
            }
        }
        let big = rng.gen_range(1.0..50.0) * if trial % 2 == 0 { 1.0 } else { -1.0 };
        if reassign(&p, &r, alpha, big) != reassign(&p, &r, alpha, big.signum()) {
            return Err(format!("trial {trial}: diff {big} not clamped"));
        }
    }
    Ok(trials)
}
