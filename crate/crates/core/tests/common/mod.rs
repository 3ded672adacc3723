//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ehmac::nn::{Activation, Architecture, Mlp};
use ehmac::offline::OfflineInstance;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute force over powers on the grid `{0, h, ..., P_max}` with `h = P_max / steps`.
///
/// Feasibility is checked by replaying the battery recursion directly, so the
/// oracle shares no code with the solver. Returns the best objective and the
/// rounding bound `h * sum(g)`: flooring an optimal schedule onto the grid keeps
/// it feasible (batteries only grow) and costs at most that much.
pub fn grid_oracle(inst: &OfflineInstance, steps: usize) -> (f64, f64) {
    let n = inst.harvest.len();
    let k = inst.initial_battery.len();
    let h = inst.max_transmit / steps as f64;
    let levels: Vec<f64> = (0..=steps).map(|i| i as f64 * h).collect();

    // Feasible sequences of each node on its own.
    let per_node: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|node| {
            let mut out = Vec::new();
            let total = (steps + 1).pow(n as u32);
            for code in 0..total {
                let mut c = code;
                let mut seq = Vec::with_capacity(n);
                let mut b = inst.initial_battery[node];
                let mut ok = true;
                for t in 0..n {
                    let p = levels[c % (steps + 1)];
                    c /= steps + 1;
                    if p > b + 1e-12 {
                        ok = false;
                        break;
                    }
                    b = (b + inst.harvest[t][node] - p).clamp(0.0, inst.battery_capacity);
                    seq.push(p);
                }
                if ok {
                    out.push(seq);
                }
            }
            out
        })
        .collect();

    let mut best = f64::NEG_INFINITY;
    let mut idx = vec![0usize; k];
    loop {
        let value: f64 = (0..n)
            .map(|t| {
                let snr: f64 = (0..k)
                    .map(|node| per_node[node][idx[node]][t] * inst.gains[t][node])
                    .sum();
                (1.0 + snr).ln()
            })
            .sum();
        best = best.max(value);
        let mut carry = 0;
        while carry < k {
            idx[carry] += 1;
            if idx[carry] < per_node[carry].len() {
                break;
            }
            idx[carry] = 0;
            carry += 1;
        }
        if carry == k {
            break;
        }
    }
    let bound = h * inst.gains.iter().flatten().sum::<f64>();
    (best, bound)
}

/// Small random instance with `K <= 2`, `N <= 3`.
pub fn small_instance<R: Rng>(rng: &mut R) -> OfflineInstance {
    let k = rng.gen_range(1..=2);
    let n = rng.gen_range(1..=3);
    let b_max = rng.gen_range(1.0..3.0);
    let p_max = b_max * rng.gen_range(0.5..=1.0);
    OfflineInstance {
        harvest: (0..n)
            .map(|_| (0..k).map(|_| rng.gen_range(0.0..b_max)).collect())
            .collect(),
        gains: (0..n)
            .map(|_| (0..k).map(|_| rng.gen_range(0.05..3.0)).collect())
            .collect(),
        initial_battery: (0..k).map(|_| rng.gen_range(0.0..b_max)).collect(),
        battery_capacity: b_max,
        max_transmit: p_max,
    }
}

/// Random net and a `(input, target)` pair whose pre-activations all stay
/// clear of the ReLU kink by more than the probe step.
pub fn random_case(seed: u64) -> (Mlp, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.gen_range(1..=3);
    let mut sizes = vec![rng.gen_range(1..=4)];
    for _ in 0..depth {
        sizes.push(rng.gen_range(1..=5));
    }
    sizes.push(rng.gen_range(1..=3));
    let hidden = match rng.gen_range(0..3) {
        0 => Activation::Relu,
        1 => Activation::leaky(),
        _ => Activation::Linear,
    };
    let mut net = Mlp::new(
        Architecture::new(sizes, hidden, Activation::Linear).unwrap(),
        seed,
    )
    .unwrap();
    for b in net.biases.iter_mut() {
        b.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    }
    loop {
        let x: Vec<f64> = (0..net.input_width())
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        if net.kink_margin(&x).unwrap() > 1e-3 {
            let y = (0..net.output_width())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            return (net, x, y);
        }
    }
}
