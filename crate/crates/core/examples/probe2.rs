use icagan::gan::{self, TrainConfig};
use icagan::seed;
use rand_distr::{Distribution, StandardNormal};

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let mut rng = seed::rng(1, 700);
    let residuals: Vec<f64> = (0..20000).map(|_| {
        let e: f64 = StandardNormal.sample(&mut rng);
        e * 0.1
    }).collect();
    let config = TrainConfig {
        window: 80,
        components: 50,
        hidden: vec![32, 32],
        batch: 100,
        disc_iters: 10,
        iters,
        seed: 3,
        early_stop: false,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let outcome = gan::train(&residuals, None, &config).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("desk-scale: {:.2}s for {} iters = {:.1}ms/iter", dt, iters, 1000.0*dt/iters as f64);
    println!("last gap {:.3}", outcome.report.disc_gap.last().unwrap());
}
