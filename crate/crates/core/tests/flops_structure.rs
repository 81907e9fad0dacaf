use mswin::autodiff::{Graph, Mode};
use mswin::decoder::DecoderKind;
use mswin::flops::{aux_flops, flops_estimate};
use mswin::model::{ModelConfig, SegModel};
use mswin::tensor::Tensor;

fn tape_flops(cfg: &ModelConfig, h: usize, w: usize, aux: bool) -> u64 {
    let (model, ps) = SegModel::new::<f32>(cfg, 0).unwrap();
    let g = Graph::with_params(&ps, Mode::Eval);
    model.forward(&g, g.input(Tensor::zeros(vec![h, w, 3])), aux).unwrap();
    g.total_flops()
}

#[test]
fn analytic_estimate_equals_tape_count() {
    for kind in DecoderKind::ALL {
        let cfg = ModelConfig::toy(kind, 4);
        for (h, w) in [(64, 64), (96, 64), (32, 160)] {
            assert_eq!(tape_flops(&cfg, h, w, false), flops_estimate(&cfg, h, w).unwrap().total, "{kind} {h}x{w}");
        }
        assert_eq!(tape_flops(&cfg, 64, 64, true), flops_estimate(&cfg, 64, 64).unwrap().total + aux_flops(&cfg, 64, 64));
    }
}

#[test]
fn full_size_ordering_and_ratio() {
    let g = |k| flops_estimate(&ModelConfig::full_size(k), 512, 512).unwrap().total as f64;
    let (t, p, s, c) = (g(DecoderKind::Tfpn), g(DecoderKind::MswinP), g(DecoderKind::MswinS), g(DecoderKind::MswinC));
    assert!(s > p && p > c && c > t, "{s} {p} {c} {t}");
    let ratio = p / t;
    let target = 230.0 / 87.0;
    assert!((ratio / target - 1.0).abs() <= 0.2, "ratio {ratio}");
}

#[test]
fn backbone_and_encoder_do_not_depend_on_the_decoder() {
    let parts: Vec<_> = DecoderKind::ALL.iter().map(|&k| flops_estimate(&ModelConfig::full_size(k), 512, 512).unwrap()).collect();
    for p in &parts[1..] {
        assert_eq!(p.part("backbone"), parts[0].part("backbone"));
        assert_eq!(p.part("encoder"), parts[0].part("encoder"));
    }
    assert_eq!(parts[0].part("decoder"), Some(0));
}

#[test]
fn flops_grow_with_resolution() {
    let cfg = ModelConfig::full_size(DecoderKind::MswinP);
    let small = flops_estimate(&cfg, 256, 256).unwrap().total;
    let big = flops_estimate(&cfg, 512, 512).unwrap().total;
    assert!(big > 3 * small && big < 5 * small);
}
