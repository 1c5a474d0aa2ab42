"""Command-line entry point.

    cellcount <subcommand> --config FILE [dotted.key=value ...]

Subcommands: synth, prep, train-counter, train-localizer, eval, ablate, viz.
Every invocation writes into a fresh run directory
``<output_root>/<timestamp>-<subcommand>-<config hash>`` (or ``--run-dir``)
holding the resolved config. Exit codes: 0 success, 1 runtime failure,
2 usage error, 3 config error. Failures print one line ``ErrorClass: message``
to stderr. ``CELLCOUNT_DEVICE`` selects the torch device.
"""

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from cellcount import config as cfgmod
from cellcount.errors import CellCountError, ConfigError

log = logging.getLogger("cellcount")

SUBCOMMANDS = {
    "synth": "generate a synthetic dot-annotated dataset",
    "prep": "resize or tile a dataset to 256x256 inputs",
    "train-counter": "train the counting network",
    "train-localizer": "train the localizer against a frozen counter",
    "eval": "score checkpoints on a split (MAE/MSE)",
    "ablate": "paired-seed runs with and without GMP",
    "viz": "export image / coarse / fine / dots panels",
}


def _parser():
    p = argparse.ArgumentParser(prog="cellcount",
                                description="Cell counting pipeline with decoupled count and localization stages.",
                                epilog="exit codes: 0 ok, 1 runtime failure, 2 usage error, 3 config error")
    sub = p.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")
    for name, help_text in SUBCOMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", "-c", help="YAML config file")
        sp.add_argument("--run-dir", help="write outputs here instead of a timestamped dir")
        sp.add_argument("-q", "--quiet", action="store_true")
        sp.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                        help="dotted-key overrides applied after the config file")
    return p


def _run_dir(args, cfg):
    if args.run_dir:
        d = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        d = Path(cfg["output_root"]) / f"{stamp}-{args.subcommand}-{cfgmod.config_hash(cfg)[:8]}"
    d.mkdir(parents=True, exist_ok=True)
    (d / "resolved_config.yaml").write_text(cfgmod.dump(cfg))
    return d


def _existing(cfg, dotted, required=True):
    section, key = dotted.split(".")
    value = cfg[section][key]
    if value is None:
        if required:
            raise ConfigError(f"{dotted} is required for this subcommand")
        return None
    if not Path(value).exists():
        raise ConfigError(f"{dotted}: path {value} does not exist")
    return Path(value)


def _layout(cfg):
    from cellcount.data import DatasetLayout
    return DatasetLayout(cfg["data"]["images_dir"], cfg["data"]["annotations_dir"])


def _samples(cfg):
    from cellcount.data import load_dataset
    root = _existing(cfg, "data.root")
    return load_dataset(root, _layout(cfg), cfg["data"]["split_seed"])


def cmd_synth(cfg, run_dir):
    from cellcount.data import generate_synthetic, write_dataset
    sc = cfgmod.synth_config(cfg)
    out = Path(cfg["synth"]["out_dir"] or run_dir / "dataset")
    samples = generate_synthetic(sc)
    manifest = write_dataset(samples, out, {"synth_config": sc.to_dict(),
                                            "resolved_config": cfgmod.dump(cfg)})
    print(f"wrote {len(samples)} samples to {out} (dataset_hash {manifest['dataset_hash'][:12]})")


def cmd_prep(cfg, run_dir):
    from cellcount.data import PREPROCESSORS, write_dataset
    mode = cfg["data"]["preprocess"]
    if mode not in PREPROCESSORS:
        raise ConfigError(f"data.preprocess must be one of {sorted(PREPROCESSORS)}, got {mode!r}")
    samples = _samples(cfg)
    tiles = [t for s in samples for t in PREPROCESSORS[mode](s)]
    out = Path(cfg["data"]["out_dir"] or run_dir / "prepped")
    write_dataset(tiles, out, {"preprocess": mode, "source_root": str(cfg["data"]["root"]),
                               "resolved_config": cfgmod.dump(cfg)})
    print(f"wrote {len(tiles)} tiles from {len(samples)} images to {out}")


def cmd_train_counter(cfg, run_dir):
    from cellcount.training import train_counter
    samples = _samples(cfg)
    rc = dataclasses.replace(cfgmod.run_config(cfg, "counter"), checkpoint_dir=str(run_dir))
    res = train_counter(rc, samples, resolved=cfgmod.dump(cfg))
    print(f"checkpoint: {res.checkpoint}")


def cmd_train_localizer(cfg, run_dir):
    from cellcount.training import train_localizer
    ckpt = _existing(cfg, "train.counter_ckpt")
    samples = _samples(cfg)
    rc = dataclasses.replace(cfgmod.run_config(cfg, "localizer"), checkpoint_dir=str(run_dir))
    res = train_localizer(rc, samples, ckpt, resolved=cfgmod.dump(cfg))
    print(f"checkpoint: {res.checkpoint}")


def cmd_eval(cfg, run_dir):
    from cellcount.evaluation import evaluate_checkpoints
    counter = _existing(cfg, "eval.counter_ckpt")
    localizer = _existing(cfg, "eval.localizer_ckpt", required=False)
    samples = _samples(cfg)
    report = evaluate_checkpoints(counter, samples, localizer, cfg["eval"]["split"])
    path = report.write(run_dir)
    print(f"MAE {report.mae:.4f}  MSE {report.mse:.4f}  ({len(report.rows)} images) -> {path}")


def cmd_ablate(cfg, run_dir):
    import dataclasses

    from cellcount.evaluation import run_ablation
    samples = _samples(cfg)
    rc = cfgmod.run_config(cfg, "counter")
    heads = cfg["ablate"]["heads"]
    # a list of head counts repeats the paired protocol once per K
    sweep = [(None, rc, run_dir)] if heads is None else [
        (k, dataclasses.replace(rc, counter=dataclasses.replace(rc.counter, gmp_heads=int(k))),
         run_dir / f"K{int(k)}") for k in heads]
    for k, cfg_k, out in sweep:
        res = run_ablation(cfg_k, samples, seeds=tuple(cfg["ablate"]["seeds"]), out_dir=out,
                           split=cfg["eval"]["split"], resolved=cfgmod.dump(cfg))
        if k is not None:
            print(f"K={k}")
        for row in res.table:
            print(f"{row['label']:>12}  MAE {row['MAE']:.4f}  MSE {row['MSE']:.4f}")
        print(f"summary: {out / 'ablation_summary.csv'}")


def cmd_viz(cfg, run_dir):
    import torch
    from PIL import Image

    from cellcount.evaluation import export_visuals
    from cellcount.localizer import condition_inputs, extract_peaks
    from cellcount.training import load_counter, load_localizer, to_tensor

    counter, _ = load_counter(_existing(cfg, "viz.counter_ckpt"))
    lpath = _existing(cfg, "viz.localizer_ckpt", required=False)
    localizer = load_localizer(lpath)[0] if lpath else None
    samples = _samples(cfg)
    want = cfg["viz"]["sample_id"]
    if want is not None:
        chosen = [s for s in samples if s.source_id == want]
        if not chosen:
            raise ConfigError(f"viz.sample_id {want!r} not found in data.root")
    else:
        chosen = [s for s in samples if s.split == cfg["viz"]["split"]][:cfg["viz"]["limit"]]
    sigma = cfg["data"]["sigma"]
    for s in chosen:
        with torch.no_grad():
            x = to_tensor([s.image])
            z = counter(x)
            count = counter.count(z).item()
            if localizer is not None:
                fine = localizer.density(condition_inputs(x, z))[0, 0].double().numpy()
            else:
                fine = np.zeros(s.shape)
        dots = extract_peaks(fine, sigma=sigma)
        export_visuals(run_dir / f"{s.source_id}.png", s.image, z[0, 0].numpy(), fine, dots,
                       count)
        Image.fromarray(fine.astype(np.float32), mode="F").save(run_dir / f"{s.source_id}_fine.tif")
        (run_dir / f"{s.source_id}_dots.json").write_text(
            json.dumps([{"x": float(a), "y": float(b)} for a, b in dots.points]))
    print(f"wrote {len(chosen)} panels to {run_dir}")


COMMANDS = {
    "synth": cmd_synth,
    "prep": cmd_prep,
    "train-counter": cmd_train_counter,
    "train-localizer": cmd_train_localizer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "viz": cmd_viz,
}


def _fail(code, exc):
    msg = " ".join(str(exc).split())
    print(f"{type(exc).__name__}: {msg}", file=sys.stderr)
    return code


def run(argv=None):
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.resolve(args.config, args.overrides)
        run_dir = _run_dir(args, cfg)
        COMMANDS[args.subcommand](cfg, run_dir)
    except ConfigError as e:
        return _fail(3, e)
    except CellCountError as e:
        return _fail(1, e)
    except Exception as e:  # noqa: BLE001 -- any crash maps to exit 1 with its class
        log.debug("unhandled error", exc_info=True)
        return _fail(1, e)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
