from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from .dataset import DatasetError
from .encoders import BackendUnavailable


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_segment(args) -> int:
    from .pipeline import run_pipeline
    overrides = _overrides(args.set)
    overrides.update(dataset=args.dataset, out=args.out, decoder=args.decoder, backend=args.backend,
                     workers=args.workers)
    cfg = load_config(args.config, overrides)
    result = run_pipeline(cfg)
    print(f"processed {len(result.processed)}, skipped {len(result.skipped)}, failed {len(result.failures)}"
          f" -> {result.run_dir}")
    for image_id, err in sorted(result.failures.items()):
        print(f"  FAILED {image_id}: {err}", file=sys.stderr)
    return 0 if result.ok else 1


def cmd_eval(args) -> int:
    from .pipeline import evaluate_run
    for report in evaluate_run(args.run, args.method, args.sweep):
        s = report.summary()
        print(json.dumps({k: s[k] for k in ("method", "threshold", "mean_iou", "segment_recall", "tgq")}))
    return 0


def cmd_overlay(args) -> int:
    from .pipeline import emit_overlays
    paths = emit_overlays(args.run)
    print(f"wrote {len(paths)} overlays to {paths[0].parent}")
    return 0


def cmd_make_fixture(args) -> int:
    from .fixtures import make_synthetic_fixture
    paths = make_synthetic_fixture(args.out, args.seed)
    for k, v in paths.items():
        print(f"{k}: {v}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zeroguide", description="Zero-guidance segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="segment, label and merge every image of a dataset")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--dataset", help="dataset root (classes.txt, images/, gt/)")
    p.add_argument("--out", help="run directory")
    p.add_argument("--decoder", choices=["retrieval", "generative"])
    p.add_argument("--backend", help="live | replay:<file>")
    p.add_argument("--workers", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score a run with label reassignment")
    p.add_argument("--run", required=True)
    p.add_argument("--method", choices=["tt", "st"], required=True)
    p.add_argument("--sweep", choices=["clip", "sbert"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("overlay", help="render labelled overlays for a run")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("make-fixture", help="write the synthetic replay dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .pipeline import RunError
    try:
        return args.func(args)
    except (ConfigError, DatasetError, BackendUnavailable, RunError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
