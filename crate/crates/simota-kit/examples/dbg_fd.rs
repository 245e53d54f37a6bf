use simota_kit::grid::{encode, AnchorPoint, RawPrediction};
use simota_kit::losses::{iou_loss, RegLossKind};
use simota_kit::geometry::BBox;
use simota_kit::rng::SplitMix64;

fn main() {
    let anchor = AnchorPoint { level: 0, gx: 3, gy: 3, stride: 8 };
    let mut rng = SplitMix64::new(3);
    for kind in [RegLossKind::Iou, RegLossKind::Giou] {
        for trial in 0..500 {
            let gt = BBox::new(
                rng.uniform(20.0, 44.0),
                rng.uniform(20.0, 44.0),
                rng.uniform(8.0, 24.0),
                rng.uniform(8.0, 24.0),
            );
            let pred_box = BBox::new(
                gt.cx + rng.uniform(-0.3, 0.3) * gt.w,
                gt.cy + rng.uniform(-0.3, 0.3) * gt.h,
                gt.w * rng.uniform(0.7, 1.4),
                gt.h * rng.uniform(0.7, 1.4),
            );
            let t = encode(&pred_box, &anchor);
            let eval = |x: &[f64]| {
                let p = RawPrediction::new([x[0], x[1], x[2], x[3]], 0.0, vec![]);
                let r = iou_loss(&p, &anchor, &gt, kind).unwrap();
                (r.loss, r.grad_t.to_vec())
            };
            let (_, analytic) = eval(&t);
            let h = 1e-5;
            let mut probe = t.to_vec();
            for i in 0..4 {
                probe[i] = t[i] + h;
                let fp = eval(&probe).0;
                probe[i] = t[i] - h;
                let fm = eval(&probe).0;
                probe[i] = t[i];
                let fd = (fp - fm) / (2.0 * h);
                let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(1e-8);
                if rel > 1e-4 {
                    println!("{kind:?} trial {trial} coord {i}: analytic {:.9e} fd {:.9e} rel {rel:.3e}", analytic[i], fd);
                    let (px1, py1, px2, py2) = pred_box.corners();
                    let (gx1, gy1, gx2, gy2) = gt.corners();
                    println!("  pred corners ({px1:.6},{py1:.6},{px2:.6},{py2:.6})");
                    println!("  gt corners   ({gx1:.6},{gy1:.6},{gx2:.6},{gy2:.6})");
                }
            }
        }
    }
}
