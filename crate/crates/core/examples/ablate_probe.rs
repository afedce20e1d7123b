//! Full ablation probe: trains every arm at the desk budget and prints the
//! per-arm metrics plus the trend comparisons the eval harness reports.

use latentflow::model::{FusionMode, ModelConfig};
use latentflow::train::{ablation_arms, ablation_run, EvalConfig, TrainConfig};

fn main() {
    let mc = ModelConfig::desk();
    let base = TrainConfig::desk();
    let arms = ablation_arms(&base, &FusionMode::ALL, &[true, false]);
    let ec = EvalConfig::default();
    let t0 = std::time::Instant::now();
    let rows = ablation_run(&mc, &arms, &ec, None).unwrap();
    println!("trained {} arms in {:.1} min", rows.len(), t0.elapsed().as_secs_f64() / 60.0);
    for r in &rows {
        println!(
            "{:28} copy_mse {:9.5}  snr_gain {:8.4}  f1 {:7.5}",
            r.label, r.copy_mse, r.denoise_snr_gain_db, r.events_f1
        );
    }
    let get = |label: &str| rows.iter().find(|r| r.label == label).unwrap();
    let dual = get("dual_balanced");
    let ca = get("cross_attn_only_balanced");
    let io = get("input_only_balanced");
    let double = get("double_balanced");
    let unb = get("dual_unbalanced");
    println!("ca_ratio   {:8.3} (need >= 2)", ca.copy_mse / dual.copy_mse);
    println!("io_ratio   {:8.3} (need >= 2)", io.copy_mse / dual.copy_mse);
    println!("dual_f1    {:8.5} vs double_f1 {:8.5} (need dual >= double)", dual.events_f1, double.events_f1);
    println!("unbal_f1   {:8.5} vs dual_f1   {:8.5} (need unbal <= dual)", unb.events_f1, dual.events_f1);
}
