"""Command-line entry point.

Subcommands: train, eval, crossval, analyze, flops, synth, serve,
simulate-terminals, gradcheck. Config precedence everywhere: explicit
flags > --config file > --scale preset. Every run prints its fully
resolved configuration before doing work. Exit codes: 0 success, 1
runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

log = logging.getLogger("coalseg")


def _parse_ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scale", choices=("tiny", "small", "base"),
                   help="named model preset")
    p.add_argument("--config", help="JSON file with a full model config")
    p.add_argument("--channels", type=int, help="stage-1 width (overrides preset/config)")
    p.add_argument("--depths", type=_parse_ints, help="blocks per stage, e.g. 1,1,1,1")
    p.add_argument("--mlp-ratio", type=float, help="MLP expansion ratio")
    p.add_argument("--input-size", type=_parse_ints, help="analysis input H,W")
    p.add_argument("--kernels", type=_parse_ints,
                   help="attention branch kernel sizes, e.g. 3,5,7")
    p.add_argument("--dilation-rates", type=_parse_ints,
                   help="attention branch dilation rates, e.g. 1,2,3")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-interval", type=int, default=10)
    p.add_argument("--augment-crop", type=int,
                   help="enable augmentation with this crop size (multiple of 32)")


def resolve_model_config(args):
    """flags > config file > preset > defaults."""
    from .dcsa import DCSAConfig
    from .model import ModelConfig, config_from_dict, preset

    if args.config:
        with open(args.config) as f:
            cfg = config_from_dict(json.load(f))
    elif args.scale:
        cfg = preset(args.scale)
    else:
        cfg = ModelConfig()
    updates = {}
    if args.channels is not None:
        updates["base_channels"] = args.channels
    if args.depths is not None:
        updates["depths"] = args.depths
    if getattr(args, "mlp_ratio", None) is not None:
        updates["mlp_ratio"] = args.mlp_ratio
    if getattr(args, "input_size", None) is not None:
        updates["input_size"] = tuple(args.input_size)
    if updates:
        updates.setdefault("base_channels", cfg.base_channels)
        updates.setdefault("depths", cfg.depths)
        cfg = ModelConfig(
            base_channels=updates["base_channels"],
            depths=updates["depths"],
            num_classes=cfg.num_classes,
            mlp_ratio=updates.get("mlp_ratio", cfg.mlp_ratio),
            input_size=updates.get("input_size", cfg.input_size),
        )
    if args.kernels is not None or args.dilation_rates is not None:
        kernels = args.kernels if args.kernels is not None else tuple(k for k, _ in cfg.dcsa.branches)
        rates = (args.dilation_rates if args.dilation_rates is not None
                 else tuple(r for _, r in cfg.dcsa.branches))
        if len(kernels) != len(rates):
            raise ValueError(f"--kernels gives {len(kernels)} branches, "
                             f"--dilation-rates gives {len(rates)}")
        branches = tuple(zip(kernels, rates))
        from .dcsa import equivalent_kernel_size

        span = max(equivalent_kernel_size(k, r) for k, r in branches)
        dcsa = DCSAConfig(channels=cfg.dcsa.channels, local_kernel=cfg.dcsa.local_kernel,
                          branches=branches, use_bias=cfg.dcsa.use_bias,
                          accounting_kernel=span)
        cfg = ModelConfig(base_channels=cfg.base_channels, depths=cfg.depths,
                          num_classes=cfg.num_classes, mlp_ratio=cfg.mlp_ratio,
                          dcsa=dcsa, input_size=cfg.input_size)
    return cfg


def _print_resolved(cfg, extra: dict = None) -> None:
    from .model import config_to_dict

    resolved = {"model": config_to_dict(cfg)}
    if extra:
        resolved.update(extra)
    print(f"resolved config: {json.dumps(resolved, sort_keys=True)}")


def _train_config(args):
    from .data import AugmentConfig
    from .train import TrainConfig

    aug = None
    if args.augment_crop:
        if args.augment_crop % 32 != 0:
            raise ValueError(f"--augment-crop must be a multiple of 32, got {args.augment_crop}")
        aug = AugmentConfig(crop=args.augment_crop)
    return TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                       seed=args.seed, eval_interval=args.eval_interval, augment=aug)


# -- subcommands -------------------------------------------------------------


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import load_dataset
    from .model import build_model
    from .report import plot_confusion, plot_history, write_csv, write_json
    from .train import evaluate, train

    cfg = resolve_model_config(args)
    tcfg = _train_config(args)
    _print_resolved(cfg, {"train": {"epochs": tcfg.epochs, "batch_size": tcfg.batch_size,
                                    "lr": tcfg.lr, "seed": tcfg.seed}})
    errors = []
    data = load_dataset(args.data, errors=errors)
    for fname, msg in errors:
        print(f"skipped {fname}: {msg}", file=sys.stderr)
    if not data:
        raise ValueError(f"no usable samples under {args.data}")
    print(f"training on {len(data)} samples")
    model = build_model(cfg, seed=tcfg.seed)
    model, history = train(model, data, tcfg)
    metrics = evaluate(model, data)

    os.makedirs(args.out, exist_ok=True)
    digest = save_checkpoint(model, os.path.join(args.out, "model.ckpt"))
    write_csv(os.path.join(args.out, "history.csv"),
              [vars(e) for e in history.epochs])
    write_json(os.path.join(args.out, "metrics.json"),
               {"digest": digest, **metrics.as_record()})
    plot_history(history, os.path.join(args.out, "history.png"))
    plot_confusion(metrics.confusion, os.path.join(args.out, "confusion.png"))
    print(f"final: loss {history.epochs[-1].loss:.4f}  PA {metrics.pa:.4f}  "
          f"mIoU {metrics.miou:.4f}")
    print(f"checkpoint {digest} and report written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .metrics import format_confusion
    from .report import plot_confusion, write_json
    from .train import evaluate

    model = load_checkpoint(args.checkpoint)
    _print_resolved(model.cfg)
    errors = []
    data = load_dataset(args.data, errors=errors)
    for fname, msg in errors:
        print(f"skipped {fname}: {msg}", file=sys.stderr)
    if not data:
        raise ValueError(f"no usable samples under {args.data}")
    metrics = evaluate(model, data)
    print(format_confusion(metrics.confusion))
    print(f"PA {metrics.pa:.4f}  mIoU {metrics.miou:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_json(os.path.join(args.out, "metrics.json"), metrics.as_record())
        plot_confusion(metrics.confusion, os.path.join(args.out, "confusion.png"))
        print(f"report written to {args.out}")
    return 0


def cmd_crossval(args) -> int:
    from .data import load_dataset
    from .report import plot_confusion, write_csv, write_json
    from .train import cross_validate

    cfg = resolve_model_config(args)
    tcfg = _train_config(args)
    _print_resolved(cfg, {"train": {"epochs": tcfg.epochs, "seed": tcfg.seed}})
    data = load_dataset(args.data)
    result = cross_validate(data, cfg, tcfg)
    for fold in result.folds:
        print(f"fold {fold.fold}: PA {fold.metrics.pa:.4f}  mIoU {fold.metrics.miou:.4f}")
    print(f"mean: PA {result.mean_pa:.4f}  mIoU {result.mean_miou:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_json(os.path.join(args.out, "crossval.json"), result.as_record())
        write_csv(os.path.join(args.out, "folds.csv"),
                  [{"fold": f.fold, "pa": f.metrics.pa, "miou": f.metrics.miou}
                   for f in result.folds])
        total = sum(np.asarray(f.metrics.confusion) for f in result.folds)
        plot_confusion(total, os.path.join(args.out, "confusion.png"))
        print(f"report written to {args.out}")
    return 0


def cmd_analyze(args) -> int:
    from .dcsa import decomposition_table, equivalent_kernel_size, param_reduction_rho
    from .model import (
        REFERENCE_GFLOPS,
        REFERENCE_PARAMS,
        build_model,
        count_flops,
        params_breakdown,
        params_report,
    )
    from .report import plot_decomposition, plot_params_breakdown, write_csv, write_json

    cfg = resolve_model_config(args)
    _print_resolved(cfg)
    model = build_model(cfg, seed=0)
    dcsa = cfg.dcsa

    print("\nkernel decomposition:")
    rows = decomposition_table(dcsa)
    for row in rows:
        print(f"  {row['part']:<8} {row['kernel']}x{row['kernel']}  r={row['dilation']}  "
              f"equivalent {row['equivalent_kernel']}x{row['equivalent_kernel']}  "
              f"params {row['params']:,}")
    kernels = [k for k, _ in dcsa.branches]
    spans = [equivalent_kernel_size(k, r) for k, r in dcsa.branches]
    largest = max(spans)
    rho_span = float(param_reduction_rho(kernels, largest, largest))
    rho_pub = float(param_reduction_rho(kernels, largest + 2, largest + 2))
    print(f"\nparameter reduction vs one {largest}x{largest} kernel: {rho_span * 100:.4f}%")
    print(f"parameter reduction vs one {largest + 2}x{largest + 2} kernel: "
          f"{rho_pub * 100:.4f}% (the published 81.18% figure uses this accounting)")

    name = args.scale or "custom"
    print(f"\n{params_report(name, model)}")
    flops = count_flops(model)
    line = f"FLOPs at {cfg.input_size[0]}x{cfg.input_size[1]}: {flops / 1e9:.3f} G"
    ref = REFERENCE_GFLOPS.get(name)
    if ref:
        line += f" (published reference {ref} G; multiply-accumulates counted as 2 ops)"
    print(line)

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_csv(os.path.join(args.out, "decomposition.csv"), rows)
        write_json(os.path.join(args.out, "analyze.json"), {
            "rho_vs_largest_span": rho_span,
            "rho_vs_published_accounting": rho_pub,
            "params": params_breakdown(model),
            "flops": flops,
        })
        plot_decomposition(dcsa, os.path.join(args.out, "decomposition.png"))
        plot_params_breakdown(params_breakdown(model),
                              os.path.join(args.out, "params.png"),
                              reference=REFERENCE_PARAMS.get(name))
        print(f"report written to {args.out}")
    return 0


def cmd_flops(args) -> int:
    from .model import REFERENCE_GFLOPS, build_model, count_flops, flops_breakdown

    cfg = resolve_model_config(args)
    _print_resolved(cfg)
    model = build_model(cfg, seed=0)
    breakdown = flops_breakdown(model)
    for key in sorted(k for k in breakdown if k != "total"):
        print(f"  {key:<16} {breakdown[key] / 1e9:>10.3f} G")
    total = breakdown["total"]
    print(f"  {'total':<16} {total / 1e9:>10.3f} G at {cfg.input_size[0]}x{cfg.input_size[1]} "
          f"(multiply-accumulates counted as 2 ops)")
    ref = REFERENCE_GFLOPS.get(args.scale or "")
    if ref:
        print(f"  published reference for {args.scale}: {ref} G "
              f"(ratio {total / 1e9 / ref:.2f}x)")
    return 0


def cmd_synth(args) -> int:
    from .data import save_dataset, synth_generate

    print(f"resolved config: {json.dumps({'n': args.n, 'seed': args.seed, 'size': args.size})}")
    records = synth_generate(args.n, seed=args.seed, size=args.size)
    save_dataset(records, args.out)
    print(f"wrote {len(records)} scenes of {args.size}x{args.size} to {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import Service, create_app

    cfg = resolve_model_config(args)
    _print_resolved(cfg, {"port": args.port, "data_root": args.data_root})
    service = Service(args.data_root, model_cfg=cfg, seed=args.seed)
    app = create_app(service)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_simulate_terminals(args) -> int:
    import base64

    import httpx

    files = sorted(
        f for f in os.listdir(args.images) if f.lower().endswith((".png", ".jpg", ".jpeg"))
    )
    if not files:
        raise ValueError(f"no images under {args.images}")
    if args.count:
        files = files[:args.count]
    print(f"resolved config: {json.dumps({'url': args.url, 'terminals': args.terminals, 'images': len(files)})}")
    ok = 0
    with httpx.Client(base_url=args.url, timeout=120.0) as client:
        for i, fname in enumerate(files):
            terminal = f"terminal-{i % args.terminals:02d}"
            with open(os.path.join(args.images, fname), "rb") as f:
                image_b64 = base64.b64encode(f.read()).decode("ascii")
            r = client.post(f"/v1/terminals/{terminal}/images", json={"image": image_b64})
            r.raise_for_status()
            ok += 1
            print(f"{fname} -> {terminal}: prediction {r.json()['prediction_id']}")
            if args.interval:
                import time

                time.sleep(args.interval)
    print(f"sent {ok}/{len(files)} images")
    return 0


def cmd_gradcheck(args) -> int:
    from .model import ModelConfig, build_model, forward
    from .tensor import (
        ConvSpec,
        Tensor,
        bilinear_upsample,
        conv2d,
        finite_difference_check,
        gelu,
        layer_norm,
        mul,
        softmax_cross_entropy,
    )

    rng = np.random.default_rng(args.seed)
    worst_name, worst_err = "", 0.0

    def check(name, err):
        nonlocal worst_name, worst_err
        print(f"  {name:<26} max rel err {err:.3e}")
        if err > worst_err:
            worst_name, worst_err = name, err

    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    check("conv2d/input", finite_difference_check(
        lambda t: conv2d(t, w, None, ConvSpec(3, 3)).sum(),
        rng.normal(size=(2, 3, 6, 6))))
    x4 = Tensor(rng.normal(size=(1, 4, 10, 10)))
    check("dilated depthwise/weight", finite_difference_check(
        lambda t: conv2d(x4, t, None, ConvSpec(3, 3, dilation=3, groups=4)).sum(),
        rng.normal(size=(4, 1, 3, 3))))
    gamma, beta = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    xn = rng.normal(size=(2, 4, 3, 3))
    check("layer_norm/input", finite_difference_check(
        lambda t: mul(layer_norm(t, gamma, beta), Tensor(xn)).sum(), xn))
    check("gelu/input", finite_difference_check(
        lambda t: mul(gelu(t), t).sum(), rng.normal(size=(2, 3, 4, 4))))
    check("bilinear_upsample/input", finite_difference_check(
        lambda t: mul(bilinear_upsample(t, 2), bilinear_upsample(t, 2)).sum(),
        rng.normal(size=(1, 2, 4, 5))))
    targets = rng.integers(0, 4, size=(2, 5, 5))
    check("cross_entropy/logits", finite_difference_check(
        lambda t: softmax_cross_entropy(t, targets), rng.normal(size=(2, 4, 5, 5))))

    cfg = ModelConfig(base_channels=4, depths=(1, 1, 1, 1), input_size=(32, 32))
    m = build_model(cfg, seed=args.seed)
    labels = rng.integers(0, cfg.num_classes, size=(1, 32, 32))
    check("full model/input", finite_difference_check(
        lambda t: softmax_cross_entropy(forward(m, t), labels),
        rng.normal(size=(1, 3, 32, 32)) * 0.3, max_coords=20))

    print(f"worst: {worst_name} at {worst_err:.3e}")
    if not np.isfinite(worst_err) or worst_err >= 1e-6:
        print("FAIL: gradient error at or above 1e-6")
        return 1
    print("PASS: all gradients below 1e-6")
    return 0


# -- wiring ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coalseg",
        description="maceral segmentation: training, analysis, and closed-loop serving",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("train", help="train on a dataset directory")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--data", required=True, help="dataset root (images/ + masks/)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("crossval", help="five-fold cross-validation")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_crossval)

    p = sub.add_parser("analyze", help="kernel decomposition, params, and FLOPs report")
    _add_model_flags(p)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("flops", help="analytic FLOPs breakdown")
    _add_model_flags(p)
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("serve", help="run the closed-loop HTTP service")
    _add_model_flags(p)
    p.add_argument("--data-root", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("simulate-terminals", help="replay an image directory against a service")
    p.add_argument("--url", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--terminals", type=int, default=3)
    p.add_argument("--interval", type=float, default=0.0)
    p.add_argument("--count", type=int)
    p.set_defaults(fn=cmd_simulate_terminals)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    for noisy in ("httpx", "httpcore", "matplotlib"):
        logging.getLogger(noisy).setLevel(logging.WARNING)
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "fn", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.fn(args)
    except KeyboardInterrupt:
        return 130
    except Exception as e:  # runtime failures exit 1 with a category line
        print(f"error ({type(e).__name__}): {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
