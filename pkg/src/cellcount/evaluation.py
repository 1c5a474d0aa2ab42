"""Count metrics, test-set evaluation, the GMP ablation protocol and visual
exports."""

import csv
import dataclasses
import hashlib
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cellcount.errors import InputError, ProtocolError


def _pair(preds, gts):
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    g = np.asarray(gts, dtype=np.float64).reshape(-1)
    if len(p) != len(g):
        raise InputError(f"length mismatch: {len(p)} predictions vs {len(g)} labels")
    if len(p) == 0:
        raise InputError("need at least one prediction")
    return p, g


def mae(preds, gts):
    p, g = _pair(preds, gts)
    return float(np.mean(np.abs(p - g)))


def mse(preds, gts):
    # mean squared error without the root
    p, g = _pair(preds, gts)
    return float(np.mean((p - g) ** 2))


@dataclass
class EvalRow:
    id: str
    y: float
    y_hat: float
    abs_err: float
    fine_sum: float | None = None
    tiles: int = 1


@dataclass
class EvalReport:
    rows: list
    mae: float
    mse: float
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows, meta=None):
        return cls(rows, mae([r.y_hat for r in rows], [r.y for r in rows]),
                   mse([r.y_hat for r in rows], [r.y for r in rows]), meta or {})

    def to_dict(self):
        return {"mae": self.mae, "mse": self.mse, "meta": self.meta,
                "rows": [dataclasses.asdict(r) for r in self.rows]}

    def write(self, out_dir, stem="report"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        with (out_dir / f"{stem}.csv").open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "y", "y_hat", "abs_err", "fine_sum", "tiles"])
            for r in self.rows:
                w.writerow([r.id, r.y, r.y_hat, r.abs_err,
                            "" if r.fine_sum is None else r.fine_sum, r.tiles])
        return out_dir / f"{stem}.json"


def evaluate(predict, samples, meta=None):
    """Score ``predict`` on ``samples``, re-assembling tiles per original image.

    ``predict(list_of_samples)`` returns per-sample count estimates, or a pair
    (counts, fine_map_sums). Tile estimates are summed per parent image before
    the metrics are taken.
    """
    if not samples:
        raise InputError("evaluation split is empty")
    out = predict(samples)
    counts, fine = out if isinstance(out, tuple) else (out, None)
    groups = OrderedDict()
    for i, s in enumerate(samples):
        g = groups.setdefault(s.group_id, {"y": 0, "y_hat": 0.0, "fine": 0.0, "n": 0})
        g["y"] += s.count
        g["y_hat"] += float(counts[i])
        g["fine"] += float(fine[i]) if fine is not None else 0.0
        g["n"] += 1
    rows = [EvalRow(gid, float(g["y"]), g["y_hat"], abs(g["y_hat"] - g["y"]),
                    g["fine"] if fine is not None else None, g["n"])
            for gid, g in groups.items()]
    return EvalReport.from_rows(rows, meta)


def model_predictor(counter, localizer=None, batch_size=8):
    """Predictor over trained models: counts are ||z||_1, fine sums logged aside."""
    import torch

    from cellcount.localizer import condition_inputs
    from cellcount.training import to_tensor

    @torch.no_grad()
    def predict(samples):
        counter.eval()
        if localizer is not None:
            localizer.eval()
        dev = next(counter.parameters()).device
        counts, fine = [], []
        for i in range(0, len(samples), batch_size):
            x = to_tensor([s.image for s in samples[i:i + batch_size]]).to(dev)
            z = counter(x)
            counts.extend(counter.count(z).cpu().tolist())
            if localizer is not None:
                fine.extend(localizer.density(condition_inputs(x, z)).flatten(1).sum(1).tolist())
        return (counts, fine) if localizer is not None else counts

    return predict


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def evaluate_checkpoints(counter_ckpt, samples, localizer_ckpt=None, split="test"):
    from cellcount.training import load_counter, load_localizer

    counter, _ = load_counter(counter_ckpt)
    localizer = load_localizer(localizer_ckpt)[0] if localizer_ckpt else None
    subset = [s for s in samples if s.split == split]
    meta = {"split": split, "counter_ckpt_sha256": file_hash(counter_ckpt)}
    if localizer_ckpt:
        meta["localizer_ckpt_sha256"] = file_hash(localizer_ckpt)
    return evaluate(model_predictor(counter, localizer), subset, meta)


def constant_baseline_mae(test_counts, constant):
    """MAE of always predicting ``constant``: the mean absolute deviation about it."""
    y = np.asarray(test_counts, dtype=np.float64)
    return float(np.abs(y - constant).mean())


# -- ablation -----------------------------------------------------------------

ABLATION_ROWS = ("w/o GMP", "Full model", "improvement")


def check_pairing(cfg_off, cfg_on):
    """The two arms may differ only in ``counter.gmp_enabled`` (and output dir)."""
    a, b = cfg_off.to_dict(), cfg_on.to_dict()
    a.pop("checkpoint_dir"), b.pop("checkpoint_dir")
    ca, cb = a.pop("counter"), b.pop("counter")
    if ca.pop("gmp_enabled") is not False or cb.pop("gmp_enabled") is not True:
        raise ProtocolError("ablation arms must be gmp_enabled=False and gmp_enabled=True")
    diff = sorted(k for k in a if a[k] != b[k]) + sorted(f"counter.{k}" for k in ca if ca[k] != cb[k])
    if diff:
        raise ProtocolError(f"ablation arms differ in fields other than GMP: {diff}")


def improvement(without, full):
    """Relative error reduction in percent; 0 when the baseline error is 0."""
    return 0.0 if without == 0 else 100.0 * (without - full) / without


@dataclass
class AblationResult:
    seeds: list
    reports: dict  # arm -> list of EvalReport (one per seed)
    data_order_hashes: dict  # arm -> list of str
    table: list  # rows of dicts with label, MAE, MSE

    def write_csv(self, path, dataset="synthetic"):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["", f"{dataset} MAE", f"{dataset} MSE"])
            for row in self.table:
                fmt = "{:.1f}%" if row["label"] == "improvement" else "{:.4f}"
                w.writerow([row["label"], fmt.format(row["MAE"]), fmt.format(row["MSE"])])
        return path

    def write_per_seed(self, path):
        path = Path(path)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["arm", "seed", "MAE", "MSE"])
            for arm, reps in self.reports.items():
                for seed, r in zip(self.seeds, reps):
                    w.writerow([arm, seed, r.mae, r.mse])
                w.writerow([arm, "mean", np.mean([r.mae for r in reps]),
                            np.mean([r.mse for r in reps])])
        return path


def run_ablation(base_cfg, samples, seeds=(0, 1, 2), out_dir="ablation", split="test",
                 resolved=None):
    """Train the counter with and without GMP under identical seeds and data
    order, evaluate both, and summarize seed-averaged errors as
    (w/o GMP, Full model, improvement)."""
    from cellcount.training import train_counter

    out_dir = Path(out_dir)
    reports = {"w/o GMP": [], "Full model": []}
    orders = {"w/o GMP": [], "Full model": []}
    test = [s for s in samples if s.split == split]
    for seed in seeds:
        arms = {}
        for label, on in (("w/o GMP", False), ("Full model", True)):
            arms[label] = dataclasses.replace(
                base_cfg, seed=seed,
                counter=dataclasses.replace(base_cfg.counter, gmp_enabled=on),
                checkpoint_dir=str(out_dir / f"seed{seed}" / ("gmp" if on else "no_gmp")),
            )
        check_pairing(arms["w/o GMP"], arms["Full model"])
        for label, cfg in arms.items():
            res = train_counter(cfg, samples, resolved=resolved)
            rep = evaluate(model_predictor(res.model), test,
                           {"arm": label, "seed": seed, "split": split})
            rep.write(Path(cfg.checkpoint_dir), "eval")
            reports[label].append(rep)
            orders[label].append(res.manifest["data_order_hash"])
    if orders["w/o GMP"] != orders["Full model"]:
        raise ProtocolError("paired runs saw different data orders")
    m = {k: (float(np.mean([r.mae for r in v])), float(np.mean([r.mse for r in v])))
         for k, v in reports.items()}
    table = [
        {"label": "w/o GMP", "MAE": m["w/o GMP"][0], "MSE": m["w/o GMP"][1]},
        {"label": "Full model", "MAE": m["Full model"][0], "MSE": m["Full model"][1]},
        {"label": "improvement", "MAE": improvement(m["w/o GMP"][0], m["Full model"][0]),
         "MSE": improvement(m["w/o GMP"][1], m["Full model"][1])},
    ]
    result = AblationResult(list(seeds), reports, orders, table)
    result.write_csv(out_dir / "ablation_summary.csv")
    result.write_per_seed(out_dir / "ablation_per_seed.csv")
    return result


# -- visuals ------------------------------------------------------------------

def _hot(v):
    """Black-red-yellow-white ramp for values in [0, 1]."""
    r = np.clip(3 * v, 0, 1)
    g = np.clip(3 * v - 1, 0, 1)
    b = np.clip(3 * v - 2, 0, 1)
    return np.stack([r, g, b], axis=-1)


def _norm(m):
    peak = float(np.max(m)) if m.size else 0.0
    return m / peak if peak > 0 else np.zeros_like(m)


def count_label(count):
    return f"{count:.1f}"


def export_visuals(path, image, coarse, fine, dots, count=None):
    """Write a four-panel PNG: input | coarse map | fine map | input with dots.

    Maps are scaled by their own maxima. The estimated count (||z||_1 unless
    given) is drawn on the coarse panel and stored in the PNG text chunk
    ``count``.
    """
    from PIL import Image, ImageDraw
    from PIL.PngImagePlugin import PngInfo

    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    img = img[:, :, :3]
    H, W = img.shape[:2]
    coarse = np.asarray(coarse, dtype=np.float64)
    fine = np.asarray(fine, dtype=np.float64)
    if fine.shape != (H, W):
        raise InputError(f"fine map {fine.shape} does not match image {(H, W)}")
    if H % coarse.shape[0] or W % coarse.shape[1]:
        raise InputError(f"coarse map {coarse.shape} does not divide image {(H, W)}")
    if count is None:
        count = float(np.abs(coarse).sum())
    up = np.kron(coarse, np.ones((H // coarse.shape[0], W // coarse.shape[1])))
    panels = [img, _hot(_norm(up)), _hot(_norm(fine)), img]
    canvas = (np.concatenate(panels, axis=1) * 255).round().astype(np.uint8)
    pil = Image.fromarray(canvas)
    draw = ImageDraw.Draw(pil)
    pts = dots.points if hasattr(dots, "points") else np.asarray(dots, np.float64).reshape(-1, 2)
    for x, y in pts:
        cx = 3 * W + x
        draw.ellipse([cx - 2, y - 2, cx + 2, y + 2], outline=(0, 255, 0))
    text = count_label(count)
    draw.text((W + 3, 3), text, fill=(255, 255, 255))
    info = PngInfo()
    info.add_text("count", text)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pil.save(path, pnginfo=info)
    return path
