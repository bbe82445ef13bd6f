use icagan::gan::{self, TrainConfig};
use icagan::occupancy::TestSpec;
use icagan::preprocess;
use icagan::seed;
use rand_distr::{Distribution, StandardNormal};

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let mut rng = seed::rng(15, 603);
    let mut raw = Vec::with_capacity(12000);
    let mut prev = 0.0f64;
    for _ in 0..12000 {
        let e: f64 = StandardNormal.sample(&mut rng);
        prev = 0.9 * prev + e;
        raw.push(prev);
    }
    let whitener = preprocess::fit_whitener(&raw, 4).unwrap();
    let residuals = preprocess::whiten(&whitener, &raw).unwrap();
    let split = residuals.len() * 2 / 3;
    let (train_res, val_res) = residuals.split_at(split);
    let config = TrainConfig {
        window: 40,
        components: 20,
        hidden: vec![16, 16],
        batch: 32,
        disc_iters: 5,
        iters,
        seed: 3,
        eval_every: 25,
        early_stop: false,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let outcome = gan::train(train_res, Some(val_res), &config).unwrap();
    println!("train wall: {:.1}s for {} iters", t0.elapsed().as_secs_f64(), iters);
    let gaps = &outcome.report.disc_gap;
    let chunk = gaps.len() / 10;
    for q in 0..10 {
        let s = &gaps[q * chunk..(q + 1) * chunk];
        let m = s.iter().map(|v| v.abs()).sum::<f64>() / s.len() as f64;
        println!("decile {}: mean|gap| {:.4}", q, m);
    }
    for (it, rate) in &outcome.report.val_pass_rate {
        if it % 100 == 0 || *it == iters {
            println!("iter {}: val pass rate {:.3}", it, rate);
        }
    }
    let spec = TestSpec::k1(20, 400, 0.05).unwrap();
    let rate =
        gan::validation_pass_rate(&outcome.generator, train_res, val_res, &config, &spec).unwrap();
    println!("final pass rate: {:.3}", rate);
}
