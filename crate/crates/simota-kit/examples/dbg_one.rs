use simota_kit::assign::AssignerConfig;
use simota_kit::grid::FpnSpec;
use simota_kit::losses::LossConfig;
use simota_kit::synthfit::{fit, make_scene, AssignerKind, FitConfig};

fn main() {
    let spec = FpnSpec::with_defaults((64, 64)).unwrap();
    let loss_cfg = LossConfig { reg_weight: 0.15, ..LossConfig::default() };
    for seed in 0..10u64 {
        let scene = make_scene(seed, 1, 64, 3);
        let cfg = FitConfig { steps: 500, step_size: 15.0, assigner: AssignerKind::Simota, reassign_every: 10, init_noise: 0.1, seed };
        let trace = fit(&scene, &spec, &cfg, &AssignerConfig::default(), &loss_cfg, 3).unwrap();
        let last = trace.steps.last().unwrap();
        println!("seed {seed}: total {:.5} (cls {:.5} obj {:.5} reg {:.5}) fg {} ap50 {:.3}",
            last.total, last.cls, last.obj, last.reg, last.num_fg, trace.eval.ap50);
    }
}
