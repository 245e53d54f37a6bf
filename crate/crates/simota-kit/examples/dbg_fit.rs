use simota_kit::assign::AssignerConfig;
use simota_kit::grid::FpnSpec;
use simota_kit::losses::LossConfig;
use simota_kit::synthfit::{fit, make_scene, steps_to_threshold, AssignerKind, FitConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let step_size: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(15.0);
    let reg_w: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.15);
    let kind = args.get(3).map(|s| AssignerKind::parse(s).unwrap()).unwrap_or(AssignerKind::Simota);
    let spec = FpnSpec::with_defaults((64, 64)).unwrap();
    let loss_cfg = LossConfig { reg_weight: reg_w, ..LossConfig::default() };
    let t0 = std::time::Instant::now();
    let mut ok9 = 0;
    for seed in 0..10u64 {
        let scene = make_scene(seed, 5, 64, 3);
        let cfg = FitConfig { steps: 500, step_size, assigner: kind, reassign_every: 10, init_noise: 0.1, seed };
        match fit(&scene, &spec, &cfg, &AssignerConfig::default(), &loss_cfg, 3) {
            Ok(trace) => {
                let last = trace.steps.last().unwrap();
                let stt = steps_to_threshold(&trace, 0.05);
                let pass = last.total < 0.05 && trace.eval.ap50 == 1.0;
                if pass { ok9 += 1; }
                println!("seed {seed}: total {:.4} (cls {:.4} obj {:.4} reg {:.4}) fg {} ap50 {:.3} stt {} dets {} {}",
                    last.total, last.cls, last.obj, last.reg, last.num_fg, trace.eval.ap50, stt,
                    trace.detections.len(), if pass {"PASS"} else {"FAIL"});
            }
            Err(e) => println!("seed {seed}: ERROR {e}"),
        }
    }
    println!("step {step_size} reg_w {reg_w} {}: {}/10 pass, wall {:?}", kind.name(), ok9, t0.elapsed());
}
