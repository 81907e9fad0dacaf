use std::collections::BTreeSet;

use mswin::autodiff::{Graph, Mode};
use mswin::backbone::BackboneConfig;
use mswin::decoder::DecoderKind;
use mswin::model::{ModelConfig, SegModel};
use mswin::tensor::Tensor;
use mswin::Error;

fn image(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_f64(vec![h, w, 3], &(0..h * w * 3).map(|i| ((i * 37) % 101) as f64 / 101.0).collect::<Vec<_>>()).unwrap()
}

#[test]
fn stage_and_pyramid_shapes_follow_the_stride_law() {
    let cfg = ModelConfig::toy(DecoderKind::MswinP, 4);
    let (model, ps) = SegModel::new::<f32>(&cfg, 1).unwrap();
    let c = cfg.backbone.embed;
    for (h, w) in [(32, 32), (64, 64), (96, 64), (64, 96), (32, 128), (160, 96)] {
        let g = Graph::with_params(&ps, Mode::Eval);
        let out = model.forward(&g, g.input(image(h, w)), true).unwrap();
        for (s, x) in out.stages.iter().enumerate() {
            let stride = 4 << s;
            assert_eq!(x.shape(), vec![h / stride, w / stride, c << s], "stage {s} at {h}x{w}");
        }
        assert_eq!(out.y0.shape(), vec![h / 4, w / 4, cfg.d_enc]);
        assert_eq!(out.z.shape(), out.y0.shape());
        assert_eq!(out.logits.shape(), vec![h, w, 4]);
        assert_eq!(out.aux_logits.unwrap().shape(), vec![h, w, 4]);
    }
}

#[test]
fn lateral_shapes_at_64x64_and_96x64() {
    let cfg = ModelConfig::toy(DecoderKind::Tfpn, 4);
    let (model, ps) = SegModel::new::<f32>(&cfg, 2).unwrap();
    for (h, w) in [(64, 64), (96, 64)] {
        let g = Graph::with_params(&ps, Mode::Eval);
        let stages = model.backbone.forward(&g, g.input(image(h, w))).unwrap();
        let ls = model.encoder.top_down(&g, &stages).unwrap();
        // L1 is the coarsest (stride 32), L4 the finest (stride 4)
        for (k, l) in ls.iter().enumerate() {
            let stride = 32 >> k;
            assert_eq!(l.shape(), vec![h / stride, w / stride, cfg.d_enc], "L{} at {h}x{w}", k + 1);
        }
        for s in 0..4 {
            let lat = model.encoder.lateral_project(&g, s, stages[s]).unwrap();
            assert_eq!(lat.shape()[..2], stages[s].shape()[..2]);
            assert_eq!(lat.shape()[2], cfg.d_enc);
        }
    }
}

#[test]
fn batched_input_keeps_the_batch_axis() {
    let cfg = ModelConfig::toy(DecoderKind::MswinC, 3);
    let (model, ps) = SegModel::new::<f32>(&cfg, 3).unwrap();
    let one = image(64, 32);
    let mut data = one.data().to_vec();
    data.extend_from_slice(one.data());
    let g = Graph::with_params(&ps, Mode::Eval);
    let out = model.forward(&g, g.input(Tensor::new(vec![2, 64, 32, 3], data).unwrap()), false).unwrap();
    assert_eq!(out.logits.shape(), vec![2, 64, 32, 3]);
    let l = out.logits.value();
    let half = l.numel() / 2;
    assert_eq!(l.data()[..half], l.data()[half..]);
}

#[test]
fn indivisible_or_wrong_channel_input_is_rejected() {
    let cfg = ModelConfig::toy(DecoderKind::MswinS, 4);
    let (model, ps) = SegModel::new::<f32>(&cfg, 4).unwrap();
    let g = Graph::with_params(&ps, Mode::Eval);
    assert!(matches!(model.forward(&g, g.input(image(48, 64)), false), Err(Error::Config(_))));
    assert!(matches!(model.forward(&g, g.input(Tensor::zeros(vec![64, 64, 4])), false), Err(Error::Dimension(_))));
}

/// Every op name recorded on the tape by a full training pass.
fn recorded_ops(kind: DecoderKind) -> BTreeSet<&'static str> {
    let cfg = ModelConfig::toy(kind, 4);
    let (model, ps) = SegModel::new::<f32>(&cfg, 5).unwrap();
    let g = Graph::with_params(&ps, Mode::Train);
    let out = model.forward(&g, g.input(image(64, 64)), true).unwrap();
    let loss = model.loss(&out, &vec![1u8; 64 * 64]).unwrap();
    g.backward(loss).unwrap();
    g.nodes().into_iter().map(|n| n.op).collect()
}

#[test]
fn forward_passes_contain_no_convolution() {
    let allowed: BTreeSet<&str> = [
        "input", "leaf", "param", "linear", "add", "mul", "scale", "sum", "reshape", "softmax", "layer_norm", "batch_norm", "relu",
        "gelu", "bilinear_resize", "concat", "window_attention", "cross_entropy", "window_partition", "window_reverse", "cyclic_shift",
        "pad", "crop", "patch_flatten", "patch_merge", "relative_bias",
    ]
    .into_iter()
    .collect();
    for kind in DecoderKind::ALL {
        let ops = recorded_ops(kind);
        assert!(ops.iter().all(|op| !op.contains("conv")), "{kind}: {ops:?}");
        let unknown: Vec<_> = ops.difference(&allowed).collect();
        assert!(unknown.is_empty(), "{kind}: unexpected ops {unknown:?}");
        assert!(ops.contains("window_attention") && ops.contains("linear"));
    }
}

#[test]
fn presets_have_the_documented_widths() {
    let s = BackboneConfig::swin_s();
    assert_eq!((s.embed, s.depths, s.heads, s.window), (96, [2, 2, 18, 2], [3, 6, 12, 24], 7));
    assert_eq!((0..4).map(|i| s.stage_channels(i)).collect::<Vec<_>>(), vec![96, 192, 384, 768]);
    assert_eq!(s.max_stride(), 32);
}
