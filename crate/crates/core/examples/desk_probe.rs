//! Full desk-budget training probe: trains, evaluates all tasks, sweeps
//! guidance, and prints the acceptance-relevant numbers.

use latentflow::model::ModelConfig;
use latentflow::tasks::TaskId;
use latentflow::train::{evaluate, cfg_sweep, train, EvalConfig, TrainConfig};

fn main() {
    let mc = ModelConfig::desk();
    let cfg = TrainConfig::desk();
    let dir = std::path::PathBuf::from("/tmp/desk_probe");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let t0 = std::time::Instant::now();
    let result = train(&mc, &cfg, Some(&dir)).unwrap();
    println!("trained {} steps in {:.1} min", cfg.steps, t0.elapsed().as_secs_f64() / 60.0);
    for chunk in result.log.chunks(300) {
        let r = chunk.last().unwrap();
        println!(
            "step {:4}  total {:9.4}  fm {:7.4}  clip {:9.4}  seq {:7.4}",
            r.step, r.total_loss, r.fm_loss, r.dur_clip_loss, r.dur_seq_loss
        );
    }
    let ec = EvalConfig::default();
    let untrained = latentflow::model::ParamSet::init(&mc, cfg.seed).unwrap();
    for task in TaskId::ALL {
        let rep = evaluate(&result.params, task, &ec).unwrap();
        println!("== {} ==", task.name());
        for (n, v) in &rep.metrics {
            println!("   {n}: {v:.5}");
        }
        if task == TaskId::TaCopy {
            let base = evaluate(&untrained, task, &ec).unwrap();
            println!("   untrained mse_gt: {:.5}", base.metric("mse_gt_durations").unwrap());
        }
    }
    for task in [TaskId::NtaEvents, TaskId::TaDenoise] {
        let rows = cfg_sweep(&result.params, task, &[1.0, 2.0, 3.0, 5.0, 7.0], &[], &ec).unwrap();
        for r in rows {
            println!("sweep {} w={} steps={} {}={:.5}", r.task.name(), r.guidance, r.steps, r.metric, r.value);
        }
    }
    println!("probe done in {:.1} min total", t0.elapsed().as_secs_f64() / 60.0);
}
