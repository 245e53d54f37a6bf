use simota_kit::assign::AssignerConfig;
use simota_kit::grid::FpnSpec;
use simota_kit::losses::LossConfig;
use simota_kit::synthfit::{make_scene, roadmap_report, FitConfig};

fn main() {
    let spec = FpnSpec::with_defaults((64, 64)).unwrap();
    let loss_cfg = LossConfig { reg_weight: 0.15, ..LossConfig::default() };
    let scenes: Vec<_> = (0..10).map(|s| make_scene(s, 5, 64, 3)).collect();
    let base = FitConfig { steps: 500, step_size: 15.0, reassign_every: 10, init_noise: 0.1, seed: 0, ..FitConfig::default() };
    let rows = roadmap_report(&scenes, &spec, &base, &AssignerConfig::default(), &loss_cfg, 3, 0.05).unwrap();
    for r in &rows {
        println!("{:>14}: final {:.4} ap50 {:.3} stt {:.1} reached {}  per-seed stt {:?}",
            r.assigner, r.mean_final_loss, r.mean_ap50, r.mean_steps_to_threshold,
            r.seeds_reaching_threshold, r.per_seed_steps_to_threshold);
    }
    // Criterion 10 pairing
    let single = rows.iter().find(|r| r.assigner == "single_center").unwrap();
    let multi = rows.iter().find(|r| r.assigner == "multi3x3").unwrap();
    let wins = single.per_seed_steps_to_threshold.iter()
        .zip(&multi.per_seed_steps_to_threshold)
        .filter(|(s, m)| m <= s)
        .count();
    println!("multi3x3 <= single_center on {wins}/10 paired seeds");
}
