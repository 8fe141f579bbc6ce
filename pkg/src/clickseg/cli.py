"""Command line entry points: training, evaluation, quantization, serving.

Every subcommand is deterministic under --seed and exits nonzero on
failure (argparse usage errors exit 2; runtime errors raise).
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as D
from . import evaluate as E
from . import modelfile as MF
from . import quantize as Q
from . import saliency as S
from . import tensor as T
from . import train as TR
from .model import TOY_CONFIG, Click, ClickSegNet, ModelConfig, PromptSet
from .tensor import Tensor, make_rng

# a tiny architecture for smoke runs; full toy runs use TOY_CONFIG
MICRO_CONFIG = ModelConfig(input_size=16, channel_schedule=(4, 8, 8, 16),
                           token_dim=16, head_count=2)


def _load_net(path: str) -> ClickSegNet:
    net, _ = MF.load_model(path)
    net.eval()
    return net


def _scene_spec(canvas: int) -> D.SceneSpec:
    return D.SceneSpec(canvas=canvas)


def cmd_train_toy(args) -> int:
    config = MICRO_CONFIG if args.micro else TOY_CONFIG
    spec = _scene_spec(config.input_size)
    print(f"generating {args.scenes} synthetic scenes (seed {args.seed})...")
    dataset = [s for s, _ in D.generate_dataset(args.seed, args.scenes, spec)]
    print(f"training {config.input_size}px model for {args.steps} steps...")
    model, metrics = TR.train_loop(config, dataset, steps=args.steps, seed=args.seed,
                                   merge_masks=not args.no_merge, log_every=args.log_every)
    for m in metrics:
        print(f"  step {m['step']:5d}  loss {m['loss']:.4f}")
    n = MF.save_model(args.out, model)
    print(f"saved {args.out} ({n / 1e6:.2f} MB)")
    return 0


def cmd_eval(args) -> int:
    net = _load_net(args.model)
    dataset = D.load_dataset(args.dataset)
    summary, records = E.miou_eval(net, dataset, args.clicks, make_rng(args.seed))
    if args.report:
        E.save_eval_report(args.report, summary, records, seed=args.seed)
        print(f"wrote {args.report}.json and {args.report}.jsonl")
    print(json.dumps(summary, indent=2))
    return 0


def cmd_saliency_eval(args) -> int:
    net = _load_net(args.model)
    dataset = D.load_dataset(args.dataset)
    summary, records = E.saliency_eval(net, dataset, points_used=args.points)
    if args.report:
        E.save_eval_report(args.report, summary, records)
        print(f"wrote {args.report}.json and {args.report}.jsonl")
    print(json.dumps(summary, indent=2))
    return 0


def _parse_click(text: str) -> Click:
    parts = text.split(",")
    if len(parts) not in (2, 3):
        raise argparse.ArgumentTypeError(f"click must be x,y[,fg|bg]; got {text!r}")
    x, y = int(parts[0]), int(parts[1])
    polarity = parts[2] if len(parts) == 3 else "fg"
    return Click(x=x, y=y, polarity=polarity)


def cmd_segment(args) -> int:
    from PIL import Image

    net = _load_net(args.model)
    size = net.config.input_size
    with open(args.image, "rb") as f:
        from .service import decode_image
        image = decode_image(f.read(), size)
    clicks = list(args.click or [])
    if not clicks:
        heatmap = (S.load_heatmap(args.heatmap) if args.heatmap
                   else S.baseline_saliency(image))
        if heatmap.shape != (size, size):
            heatmap = np.clip(D.resize_bilinear(heatmap, (size, size)), 0.0, 1.0)
        points = S.synthesize_clicks(heatmap)
        clicks = [Click(x=x, y=y, polarity="fg") for x, y in points]
        print(f"auto clicks: {[(c.x, c.y) for c in clicks]}")
    out = net.predict(image, PromptSet(clicks=tuple(clicks)))
    mask = out.mask_logits[out.best_index] > 0.0
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(args.out)
    print(f"scores: {[round(float(s), 4) for s in out.iou_scores]} "
          f"best={out.best_index} area={int(mask.sum())}px -> {args.out}")
    return 0


def cmd_quantize(args) -> int:
    net, bundle = MF.load_model(args.input)
    if bundle.config.get("quantized"):
        print("input model is already quantized", file=sys.stderr)
        return 1
    in_size = os.path.getsize(args.input)
    Q.fold_all_batchnorms(net)
    out_size = MF.save_bundle(args.out, Q.quantize_model(net))
    print(f"{args.input}: {in_size / 1e6:.2f} MB -> {args.out}: {out_size / 1e6:.2f} MB")
    if args.dataset:
        dataset = D.load_dataset(args.dataset)
        base, _ = E.miou_eval(_load_net(args.input), dataset, args.clicks, make_rng(args.seed))
        quant, _ = E.miou_eval(_load_net(args.out), dataset, args.clicks, make_rng(args.seed))
        drop = base["overall"] - quant["overall"]
        print(f"mIOU {base['overall']:.4f} -> {quant['overall']:.4f} (drop {drop:+.4f})")
    return 0


def _gradcheck_cases(rng):
    """A compact op sweep; each case is (name, fn, input arrays)."""
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    m1 = rng.standard_normal((3, 5))
    m2 = rng.standard_normal((5, 2))
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.5
    bias = rng.standard_normal(4)
    wt = rng.standard_normal((3, 2, 2, 2)) * 0.5
    g = rng.standard_normal(3) * 0.1 + 1.0
    be = rng.standard_normal(3) * 0.1
    tok = rng.standard_normal((4, 8)) * 0.5
    wq, wk, wv, wo = (rng.standard_normal((8, 8)) * 0.3 for _ in range(4))
    logits = rng.standard_normal((5, 5)) * 2
    targets = (rng.random((5, 5)) > 0.5).astype(np.float64)
    return [
        ("mul", lambda p, q: T.tsum(T.mul(p, q)), [a, b]),
        ("matmul", lambda p, q: T.tsum(T.matmul(p, q)), [m1, m2]),
        ("relu", lambda p: T.tsum(T.relu(p)), [a]),
        ("gelu", lambda p: T.tsum(T.gelu(p)), [a]),
        ("sigmoid", lambda p: T.tsum(T.sigmoid(p)), [a]),
        ("softmax", lambda p: T.tsum(T.mul(T.softmax(p, axis=1), Tensor(b))), [a]),
        ("conv2d", lambda p, q, r: T.tsum(T.conv2d(p, q, r, stride=2, padding=1)),
         [x, w, bias]),
        ("conv_transpose2d", lambda p, q: T.tsum(T.conv_transpose2d(p, q, stride=2)),
         [x[:, :, :3, :3], wt]),
        ("batchnorm2d",
         lambda p, q, r: T.tsum(T.batchnorm2d(p, q, r, np.zeros(3), np.ones(3),
                                              training=True)), [x, g, be]),
        ("attention", lambda t, q, k, v, o: T.tsum(T.attention(t, q, k, v, o, 2)),
         [tok, wq, wk, wv, wo]),
        ("focal", lambda p: T.sigmoid_focal_loss(p, targets), [logits]),
    ]


def cmd_gradcheck(args) -> int:
    worst_name, worst = "", 0.0
    for seed in range(args.seeds):
        rng = make_rng(1000 + seed)
        for name, fn, arrays in _gradcheck_cases(rng):
            T.reset_tape()
            inputs = [Tensor(arr, dtype=np.float64, requires_grad=True) for arr in arrays]
            err = T.grad_check(fn, inputs, rng=rng)
            if err > worst:
                worst_name, worst = f"{name}[seed{seed}]", err
    print(f"max rel-err {worst:.3e} ({worst_name}) over {args.seeds} seeds")
    if worst >= args.tol:
        print(f"FAIL: above tolerance {args.tol}", file=sys.stderr)
        return 1
    return 0


def cmd_gen_data(args) -> int:
    spec = _scene_spec(args.canvas)
    samples = [s for s, _ in D.generate_dataset(args.seed, args.count, spec)]
    D.save_dataset(args.out, samples)
    total_masks = sum(len(s.masks) for s in samples)
    print(f"wrote {len(samples)} scenes ({total_masks} masks) to {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    net = _load_net(args.model)
    cap = int(os.environ.get("CLICKSEG_SESSION_CAP", "64"))
    port = args.port or int(os.environ.get("CLICKSEG_PORT", "8321"))
    studio = args.studio if args.studio and os.path.isdir(args.studio) else None
    app = create_app(net, session_cap=cap, studio_dir=studio)
    uvicorn.run(app, host=args.host, port=port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clickseg",
                                     description="interactive segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-toy", help="train a small model on synthetic scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--scenes", type=int, default=500)
    p.add_argument("--out", required=True)
    p.add_argument("--micro", action="store_true", help="16px smoke-test architecture")
    p.add_argument("--no-merge", action="store_true",
                   help="train on raw masks without whole-object merging")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("eval", help="click-simulation mIOU over a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--clicks", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="output path prefix (.json/.jsonl)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("saliency-eval", help="seed clicks from saliency, score vs best gt")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--points", type=int, default=3, choices=(1, 3))
    p.add_argument("--report")
    p.set_defaults(fn=cmd_saliency_eval)

    p = sub.add_parser("segment", help="segment one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--click", action="append", type=_parse_click,
                   help="x,y[,fg|bg]; repeatable; omit for saliency auto-clicks")
    p.add_argument("--heatmap", help="saliency heatmap file (png or raw)")
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("quantize", help="fold batchnorms and store weights as int8")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", help="optionally report the mIOU drop on this dataset")
    p.add_argument("--clicks", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("gradcheck", help="finite-difference sweep over the op set")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write a synthetic scene dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--out", required=True)
    p.add_argument("--canvas", type=int, default=64)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("serve", help="run the HTTP segmentation service")
    p.add_argument("--model", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--studio", help="static directory to mount at /studio")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
