fn main() {
    let mc = latentflow::model::ModelConfig::desk();
    let cfg = latentflow::train::TrainConfig {
        steps: 20,
        ..latentflow::train::TrainConfig::desk()
    };
    let t0 = std::time::Instant::now();
    let r = latentflow::train::train(&mc, &cfg, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("20 steps in {dt:.2}s -> {:.0}ms/step, 3000 steps ~ {:.1} min", dt / 20.0 * 1000.0, dt / 20.0 * 3000.0 / 60.0);
    println!("last loss {:.4}", r.log.last().unwrap().total_loss);
}
