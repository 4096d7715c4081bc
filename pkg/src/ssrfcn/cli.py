"""Command-line entry points.

Every subcommand accepts ``--config FILE``: a flat ``key = value`` text file
whose keys are flag names (``batch-size`` or ``batch_size``).  Flags given on
the command line win over the file.  Exit codes: 0 ok, 1 runtime error,
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluation as E
from . import heatmap as H
from . import model as M
from . import training as TR
from .errors import SsrFcnError, UsageError

log = logging.getLogger("ssrfcn")

METRICS = ("apcer", "bpcer", "acer", "eer", "tdr", "hter")
PROTOCOLS = {"loo": E.LEAVE_ONE_SPOOF_OUT, "known": E.KNOWN_SPLIT, "cross": E.CROSS_DATASET}


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _config_defaults(parser: argparse.ArgumentParser, values: dict[str, str]) -> dict:
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, text in values.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
            value = _parse_bool(text)
        elif action.type is not None:
            try:
                value = action.type(text)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
        else:
            value = text
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r}: {value!r} not in {sorted(action.choices)}")
        defaults[key] = value
    return defaults


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _str_tuple(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _require(args, *names):
    for name in names:
        if getattr(args, name) in (None, "", []):
            raise UsageError(f"{args.command}: --{name.replace('_', '-')} is required")


def _resolved(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k == "func":
            continue
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _write_config_sidecar(args, path) -> None:
    text = json.dumps(_resolved(args), indent=2, sort_keys=True) + "\n"
    M.atomic_write_bytes(f"{path}.config.json", text.encode())


def _image_side(args):
    return None if args.image_size == 0 else args.image_size


def _train_config(args, stage: int, epochs: int, seed: int) -> TR.TrainConfig:
    extra = {}
    if stage == 2:
        extra = dict(
            region_strategy=args.strategy,
            min_region=args.min_region,
            max_region=args.max_region,
            tau=args.tau,
            regions_per_spoof_image=args.regions_per_image,
            freeze_masks=args.freeze_masks,
            full_image_mix=args.full_image_mix,
        )
    return TR.TrainConfig(
        stage=stage,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=epochs,
        seed=seed,
        flip_probability=args.flip_prob,
        strict_determinism=args.strict_determinism,
        **extra,
    )


def _model_config(args) -> M.FcnConfig:
    kw = {"channels": args.channels}
    if args.strides is not None:
        kw["strides"] = args.strides
    return M.FcnConfig(**kw)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    _require(args, "out")
    cfg = D.SynthConfig(
        num_live=args.num_live,
        num_spoof=args.num_spoof,
        image_side=args.image_size,
        artifact_kind=args.kind,
        box_side_range=(args.box_min, args.box_max),
        seed=args.seed,
        spoof_types=args.spoof_types,
        frames_per_video=args.frames_per_video,
        grid_amplitude=args.amplitude,
        noise_sigma=args.noise,
    )
    records, _ = D.synth_generate(cfg, args.out)
    _write_config_sidecar(args, Path(args.out) / "synth")
    print(f"wrote {len(records)} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    _require(args, "manifest", "out")
    data = _load_training_set(args)
    model = M.init_model(args.seed, _model_config(args))
    _, reports = TR.stage1_train(model, data, _train_config(args, 1, args.epochs, args.seed))
    return _finish_training(args, model, reports)


def cmd_finetune(args) -> int:
    _require(args, "manifest", "weights", "out")
    data = _load_training_set(args)
    model = M.load_model(args.weights)
    _, reports = TR.stage2_finetune(model, data, _train_config(args, 2, args.epochs, args.seed))
    return _finish_training(args, model, reports)


def _load_training_set(args) -> D.ImageSet:
    records = D.subsample_frames(D.load_manifest(args.manifest), args.frame_stride)
    return D.load_images(records, _image_side(args))


def _finish_training(args, model, reports) -> int:
    M.save_model(model, args.out)
    log_path = args.log or f"{args.out}.log.jsonl"
    TR.write_reports(reports, log_path)
    _write_config_sidecar(args, args.out)
    last = reports[-1]
    print(f"saved {args.out}: epoch {last.epoch} loss {last.loss:.4f} accuracy {last.accuracy:.4f}")
    return 0


def _score_records(model, records, side) -> np.ndarray:
    return TR.predict(model, D.load_images(records, side).images)


def _protocol_trainer(args):
    side = _image_side(args)
    if args.weights:
        model = M.load_model(args.weights, load_optimizer=False)
        return lambda train, seed: (lambda recs: _score_records(model, recs, side))

    def trainer(train, seed):
        data = D.load_images(D.subsample_frames(train, args.frame_stride), side)
        model = M.init_model(seed, _model_config(args))
        TR.stage1_train(model, data, _train_config(args, 1, args.epochs, seed))
        if args.finetune_epochs > 0:
            TR.stage2_finetune(model, data, _train_config(args, 2, args.finetune_epochs, seed))
        return lambda recs: _score_records(model, recs, side)

    return trainer


def cmd_eval(args) -> int:
    _require(args, "manifest")
    kind = PROTOCOLS[args.protocol]
    datasets = [D.load_manifest(args.manifest)]
    if kind == E.CROSS_DATASET:
        _require(args, "test_manifest")
        datasets.append(D.load_manifest(args.test_manifest))
    spec = E.ProtocolSpec(kind=kind, seed=args.seed, held_out=args.held_out, fdr_target=args.fdr)
    report = E.run_protocol(spec, _protocol_trainer(args), datasets)
    if args.weights:
        report.flags.append(f"scored with fixed weights {args.weights}; training partitions unused")
    if args.metric == "all":
        metrics = ("hter",) if kind == E.CROSS_DATASET else ("apcer", "bpcer", "acer", "eer", "tdr")
    else:
        metrics = (args.metric,)
    table = report.to_table(metrics)
    if "tdr" in metrics:
        table += f"TDR evaluated at {100 * args.fdr:g}% FDR\n"
    sys.stdout.write(table)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        M.atomic_write_bytes(out / "report.txt", table.encode())
        M.atomic_write_bytes(out / "report.json", report.to_json().encode())
        _write_config_sidecar(args, out / "eval")
    return 0


def _load_for_scoring(args):
    model = M.load_model(args.weights, load_optimizer=False)
    image = D.load_and_preprocess(Path(args.image), _image_side(args))
    return model, image


def cmd_infer(args) -> int:
    _require(args, "weights", "image")
    model, image = _load_for_scoring(args)
    score = float(M.spoofness(model, image))
    decision = "spoof" if M.is_spoof(score) else "live"
    if args.json:
        print(json.dumps({"image": str(args.image), "spoofness": score, "decision": decision}))
    else:
        print(f"{score:.6f} {decision}")
    return 0


def cmd_visualize(args) -> int:
    _require(args, "weights", "image", "out")
    model, image = _load_for_scoring(args)
    smap = M.score_map(model, image)
    score = float(M.spoofness(model, image))
    H.save_overlay(H.overlay(D.deprocess(image), smap.values), args.out, score)
    print(f"wrote {args.out} (spoofness {score:.6f})")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=256, help="expected square side; 0 accepts any size")
    p.add_argument(
        "--strict-determinism",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="single-threaded BLAS for bit-reproducible runs",
    )
    p.add_argument("-q", "--quiet", action="store_true")


def _add_training(p, epochs=20):
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--flip-prob", type=float, default=0.5)
    p.add_argument("--channels", type=_int_tuple, default=M.FcnConfig().channels)
    p.add_argument("--strides", type=_int_tuple, default=None)
    p.add_argument("--frame-stride", type=int, default=1, help="use every k-th frame of each video")


def _add_regions(p):
    p.add_argument("--strategy", default="self_supervised",
                   choices=["self_supervised", "global", "fixed_eye", "fixed_nose", "fixed_mouth", "random"])
    p.add_argument("--min-region", type=int, default=64)
    p.add_argument("--max-region", type=int, default=256)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--regions-per-image", type=int, default=1)
    p.add_argument("--freeze-masks", action="store_true")
    p.add_argument("--full-image-mix", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssrfcn", description="Live/spoof face classification with a fully convolutional score-map network."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic live/spoof dataset")
    _add_common(p)
    p.add_argument("--out")
    p.add_argument("--kind", default=D.GLOBAL_TEXTURE, choices=[D.GLOBAL_TEXTURE, D.PARTIAL_PATCH])
    p.add_argument("--num-live", type=int, default=32)
    p.add_argument("--num-spoof", type=int, default=32, help="videos per spoof type")
    p.add_argument("--spoof-types", type=_str_tuple, default=("print",))
    p.add_argument("--frames-per-video", type=int, default=1)
    p.add_argument("--box-min", type=int, default=64)
    p.add_argument("--box-max", type=int, default=128)
    p.add_argument("--amplitude", type=float, default=24.0)
    p.add_argument("--noise", type=float, default=4.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="Stage I: train on whole faces")
    _add_common(p)
    _add_training(p)
    p.add_argument("--out", default="model.ssrfcn")
    p.add_argument("--log", help="JSON-lines epoch log (default: OUT.log.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="Stage II: fine-tune on spoof regions")
    _add_common(p)
    _add_training(p)
    _add_regions(p)
    p.add_argument("--weights", help="Stage I weight file")
    p.add_argument("--out", default="model_stage2.ssrfcn")
    p.add_argument("--log")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    _add_common(p)
    _add_training(p)
    _add_regions(p)
    p.add_argument("--protocol", default="loo", choices=sorted(PROTOCOLS))
    p.add_argument("--test-manifest", help="testing manifest for the cross protocol")
    p.add_argument("--weights", help="score every cell with these weights instead of training")
    p.add_argument("--finetune-epochs", type=int, default=0)
    p.add_argument("--held-out", help="evaluate only this spoof type")
    p.add_argument("--metric", default="all", choices=("all",) + METRICS)
    p.add_argument("--fdr", type=float, default=E.DEFAULT_FDR)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="score one face image")
    _add_common(p)
    p.add_argument("--weights")
    p.add_argument("--image")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("visualize", help="render a spoof heatmap overlay")
    _add_common(p)
    p.add_argument("--weights")
    p.add_argument("--image")
    p.add_argument("--out", default="heatmap.png")
    p.set_defaults(func=cmd_visualize)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**_config_defaults(sub, read_config_file(args.config)))
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"ssrfcn: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"ssrfcn: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.info("resolved config: %s", json.dumps(_resolved(args), sort_keys=True))
    try:
        with TR.determinism_guard(args.strict_determinism):
            return args.func(args)
    except UsageError as exc:
        print(f"ssrfcn: error: {exc}", file=sys.stderr)
        return 2
    except (SsrFcnError, OSError, ValueError) as exc:
        print(f"ssrfcn: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
