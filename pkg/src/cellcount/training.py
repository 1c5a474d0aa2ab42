"""Two-stage optimization: the counter on the count loss, then the localizer
on density MSE with the counter frozen.

Each run writes into ``RunConfig.checkpoint_dir``:

    <stage>.pt       best checkpoint (lowest validation error)
    manifest.json    resolved config, hashes, per-epoch metrics
    metrics.csv      one row per epoch
    timing.json      wall-clock (kept out of the manifest so reruns match)
"""

import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

import cellcount
from cellcount.counter import Counter, CounterConfig
from cellcount.data.augment import OPS, augment
from cellcount.data.density import rasterize_density
from cellcount.data.io import atomic_write_text, dataset_hash
from cellcount.errors import ConfigError, DependencyError, TrainingError
from cellcount.evaluation import mae, mse
from cellcount.localizer import (Localizer, LocalizerConfig, condition_inputs,
                                 localizer_loss)
from cellcount.schedule import cosine_restarts

log = logging.getLogger(__name__)


def device():
    return torch.device(os.environ.get("CELLCOUNT_DEVICE", "cpu"))


def lr_schedule(step, cfg, steps_per_epoch=1):
    return cosine_restarts(step, cfg.lr_max, cfg.lr_min, cfg.t0(steps_per_epoch),
                           cfg.restart_mult)


def code_version():
    h = hashlib.sha256()
    pkg = Path(cellcount.__file__).parent
    for p in sorted(pkg.rglob("*.py")) + sorted(pkg.rglob("*.pyx")):
        h.update(p.relative_to(pkg).as_posix().encode())
        h.update(p.read_bytes())
    return f"{cellcount.__version__}+{h.hexdigest()[:12]}"


def state_hash(module):
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def to_tensor(images):
    """Stack H x W x C float arrays into an (N, C, H, W) float32 tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, model, kind, meta):
    path = Path(path)
    buf = io.BytesIO()
    torch.save({"kind": kind, "model_config": model.cfg.to_dict(),
                "state_dict": model.state_dict(), "meta": meta}, buf)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def _read_checkpoint(path, kind):
    path = Path(path) if path else None
    if path is None or not path.is_file():
        raise DependencyError(f"{kind} checkpoint {path} not found")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("kind") != kind:
        raise DependencyError(f"{path} holds a {ckpt.get('kind')!r} checkpoint, not {kind!r}")
    return ckpt


def load_counter(path):
    ckpt = _read_checkpoint(path, "counter")
    c = dict(ckpt["model_config"])
    c["widths"] = tuple(c["widths"])
    model = Counter(CounterConfig(**{**c, "pretrained": False}))
    model.load_state_dict(ckpt["state_dict"])
    return model.eval(), ckpt["meta"]


def load_localizer(path):
    ckpt = _read_checkpoint(path, "localizer")
    model = Localizer(LocalizerConfig(**ckpt["model_config"]))
    model.load_state_dict(ckpt["state_dict"])
    return model.eval(), ckpt["meta"]


# -- run bookkeeping ----------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Path
    manifest: dict
    model: torch.nn.Module


class RunLog:
    def __init__(self, cfg, samples, resolved=None, extra=None):
        self.dir = Path(cfg.checkpoint_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        # output location is excluded so reruns into fresh dirs compare equal
        run_config = {k: v for k, v in cfg.to_dict().items() if k != "checkpoint_dir"}
        self.manifest = {
            "stage": cfg.stage,
            "resolved_config": resolved if resolved is not None else run_config,
            "run_config": run_config,
            "dataset_hash": dataset_hash(samples),
            "code_version": code_version(),
            "epochs": [],
            **(extra or {}),
        }
        self.csv = self.dir / "metrics.csv"
        self.csv.unlink(missing_ok=True)
        self.started = time.perf_counter()
        self.epoch_times = []

    def epoch(self, row):
        self.manifest["epochs"].append(row)
        self.epoch_times.append(time.perf_counter() - self.started)
        new = not self.csv.exists()
        with self.csv.open("a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(row))
            if new:
                w.writeheader()
            w.writerow(row)
        self.flush()

    def flush(self):
        atomic_write_text(self.dir / "manifest.json",
                          json.dumps(self.manifest, indent=2, sort_keys=True))
        atomic_write_text(self.dir / "timing.json",
                          json.dumps({"elapsed_s": self.epoch_times}, indent=2))


def _split(samples, name):
    return [s for s in samples if s.split == name]


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _ops(rng, k, enabled):
    if not enabled:
        return ["identity"] * k
    return [OPS[i] for i in rng.integers(0, len(OPS), k)]


def _check_finite(loss, lr, ids):
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()} at lr={lr:.3g}; batch ids: {ids}")


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


@torch.no_grad()
@torch.no_grad()
def recalibrate_batchnorm(model, batches):
    """Recompute BatchNorm running statistics under the current weights.

    The momentum averages lag behind the weights, and a rectified map summed
    over many pixels magnifies small shifts; averaging the batch statistics of
    one clean pass over the training set removes the train/eval mismatch.
    """
    norms = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not norms:
        return False
    was_training = model.training
    momenta = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None  # cumulative average over the pass
    model.train()
    for x in batches:
        model(x)
    for m, momentum in zip(norms, momenta):
        m.momentum = momentum
    model.train(was_training)
    return True


def _chunks(samples, batch_size, dev):
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        yield chunk, to_tensor([s.image for s in chunk]).to(dev)


def _image_batches(samples, batch_size, dev):
    return (x for _, x in _chunks(samples, batch_size, dev))


def predict_counts(model, samples, batch_size=8):
    model.eval()
    dev = next(model.parameters()).device
    out = []
    for i in range(0, len(samples), batch_size):
        x = to_tensor([s.image for s in samples[i:i + batch_size]]).to(dev)
        out.extend(model.count(model(x)).cpu().tolist())
    return out


def _seed_all(seed):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


# -- stage 1 ------------------------------------------------------------------

def train_counter(cfg, samples, resolved=None, model=None):
    """Fit the counter on the training split; keep the best-validation weights."""
    cfg = cfg.validate()
    if cfg.stage != "counter":
        raise ConfigError(f"train_counter needs stage 'counter', got {cfg.stage!r}")
    train = _split(samples, "train")
    val = _split(samples, "val")
    if not train:
        raise ConfigError("no training samples")
    rng = _seed_all(cfg.seed)
    dev = device()
    model = (model or Counter(cfg.counter)).to(dev)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_max)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    run = RunLog(cfg, samples, resolved, {"pretrained_loaded": model.pretrained_loaded})
    order = hashlib.sha256()
    ckpt_path = run.dir / "counter.pt"
    best = math.inf
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        losses = []
        for idx in _batches(len(train), cfg.batch_size, rng):
            ops = _ops(rng, len(idx), cfg.augmentation)
            batch = [augment(train[i], None, op)[0] for i, op in zip(idx, ops)]
            ids = [train[i].source_id for i in idx]
            order.update(json.dumps([ids, ops]).encode())
            y = [s.count for s in batch]
            if y != [train[i].count for i in idx]:
                raise TrainingError("augmentation changed a count label")
            lr = lr_schedule(step, cfg, steps_per_epoch)
            _set_lr(opt, lr)
            x = to_tensor([s.image for s in batch]).to(dev)
            loss = model.loss(model(x), y)
            _check_finite(loss, lr, ids)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
            losses.append(loss.item())
            step += 1
        recalibrate_batchnorm(model, _image_batches(train, cfg.batch_size, dev))
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": lr, "steps": step}
        if val:
            preds = predict_counts(model, val)
            gts = [s.count for s in val]
            row["val_mae"] = mae(preds, gts)
            row["val_mse"] = mse(preds, gts)
            score = row["val_mae"]
        else:
            # no validation split: select on the eval-mode fit of the training set
            row["train_mae"] = mae(predict_counts(model, train), [s.count for s in train])
            score = row["train_mae"]
        if score <= best:
            best = score
            run.manifest["best"] = {"epoch": epoch, "score": score}
            best_state = copy.deepcopy(model.state_dict())
            save_checkpoint(ckpt_path, model, "counter",
                            {"epoch": epoch, "seed": cfg.seed, "val_mae": row.get("val_mae"),
                             "dataset_hash": run.manifest["dataset_hash"],
                             "code_version": run.manifest["code_version"],
                             "config": cfg.to_dict()})
        run.manifest["data_order_hash"] = order.hexdigest()
        run.epoch(row)
        log.info("counter epoch %d: %s", epoch, row)
    if cfg.epochs == 0:
        save_checkpoint(ckpt_path, model, "counter", {"epoch": None, "seed": cfg.seed,
                                                      "config": cfg.to_dict()})
        run.manifest["data_order_hash"] = order.hexdigest()
        run.flush()
    else:
        model.load_state_dict(best_state)
    return TrainResult(ckpt_path, run.manifest, model)


# -- stage 2 ------------------------------------------------------------------

def _coarse(counter, x, y, teacher_forcing):
    z = counter(x)
    if teacher_forcing:
        c = counter.count(z).clamp(min=1e-6)
        z = z * (torch.as_tensor(y, dtype=z.dtype, device=z.device) / c).view(-1, 1, 1, 1)
    return z


def train_localizer(cfg, samples, counter_ckpt=None, resolved=None):
    """Fit the localizer on (image, coarse map) -> density with the counter frozen."""
    cfg = cfg.validate()
    if cfg.stage != "localizer":
        raise ConfigError(f"train_localizer needs stage 'localizer', got {cfg.stage!r}")
    counter, counter_meta = load_counter(counter_ckpt or cfg.counter_ckpt)
    train = _split(samples, "train")
    val = _split(samples, "val")
    if not train:
        raise ConfigError("no training samples")
    rng = _seed_all(cfg.seed)
    dev = device()
    counter = counter.to(dev)
    if not cfg.finetune_counter:
        counter.requires_grad_(False)
    counter_before = state_hash(counter)
    model = Localizer(cfg.localizer).to(dev)
    params = list(model.parameters())
    if cfg.finetune_counter:
        params += list(counter.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr_max)
    scale = cfg.localizer.density_scale
    gt_maps = {s.source_id: rasterize_density(s.dots, s.shape, cfg.sigma) for s in samples}
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    run = RunLog(cfg, samples, resolved, {"counter_state_hash": counter_before,
                                          "counter_meta_epoch": counter_meta.get("epoch")})
    order = hashlib.sha256()
    ckpt_path = run.dir / "localizer.pt"
    best = math.inf
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        counter.train(cfg.finetune_counter)
        losses = []
        for idx in _batches(len(train), cfg.batch_size, rng):
            ops = _ops(rng, len(idx), cfg.augmentation)
            pairs = [augment(train[i], gt_maps[train[i].source_id], op) for i, op in zip(idx, ops)]
            ids = [train[i].source_id for i in idx]
            order.update(json.dumps([ids, ops]).encode())
            lr = lr_schedule(step, cfg, steps_per_epoch)
            _set_lr(opt, lr)
            x = to_tensor([s.image for s, _ in pairs]).to(dev)
            gt = torch.from_numpy(np.stack([d.values for _, d in pairs])[:, None]).float().to(dev)
            y = [s.count for s, _ in pairs]
            with torch.set_grad_enabled(cfg.finetune_counter):
                z = _coarse(counter, x, y, cfg.teacher_forcing)
            loss = localizer_loss(model(condition_inputs(x, z)), gt * scale)
            if cfg.finetune_counter:
                loss = loss + counter.loss(z, y)
            _check_finite(loss, lr, ids)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
            opt.step()
            losses.append(loss.item())
            step += 1
        if cfg.finetune_counter:
            recalibrate_batchnorm(counter, _image_batches(train, cfg.batch_size, dev))
        counter.eval()
        recalibrate_batchnorm(model, (condition_inputs(x, _coarse(counter, x, [s.count for s in chunk],
                                                                    cfg.teacher_forcing))
                                      for chunk, x in _chunks(train, cfg.batch_size, dev)))
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": lr, "steps": step}
        if val:
            row.update(_localizer_val(counter, model, val, gt_maps, cfg.teacher_forcing))
            score = row["val_density_mse"]
        else:
            score = row["train_loss"]
        if score <= best:
            best = score
            run.manifest["best"] = {"epoch": epoch, "score": score}
            best_state = copy.deepcopy(model.state_dict())
            save_checkpoint(ckpt_path, model, "localizer",
                            {"epoch": epoch, "seed": cfg.seed,
                             "val_density_mse": row.get("val_density_mse"),
                             "dataset_hash": run.manifest["dataset_hash"],
                             "code_version": run.manifest["code_version"],
                             "counter_state_hash": counter_before,
                             "config": cfg.to_dict()})
        run.manifest["data_order_hash"] = order.hexdigest()
        run.epoch(row)
        log.info("localizer epoch %d: %s", epoch, row)
    if cfg.epochs == 0:
        save_checkpoint(ckpt_path, model, "localizer", {"epoch": None, "seed": cfg.seed,
                                                        "config": cfg.to_dict()})
        run.flush()
    else:
        model.load_state_dict(best_state)
    counter_after = state_hash(counter)
    run.manifest["counter_state_hash_after"] = counter_after
    run.flush()
    if not cfg.finetune_counter and counter_after != counter_before:
        raise TrainingError("counter parameters changed during localizer training")
    return TrainResult(ckpt_path, run.manifest, model)


@torch.no_grad()
def _localizer_val(counter, model, val, gt_maps, teacher_forcing):
    counter.eval()
    model.eval()
    dev = next(model.parameters()).device
    errs, fine, gts = [], [], []
    for i in range(0, len(val), 8):
        chunk = val[i:i + 8]
        x = to_tensor([s.image for s in chunk]).to(dev)
        y = [s.count for s in chunk]
        dens = model.density(condition_inputs(x, _coarse(counter, x, y, teacher_forcing)))
        gt = torch.from_numpy(np.stack([gt_maps[s.source_id].values for s in chunk])[:, None])
        errs.extend(((dens.cpu().double() - gt) ** 2).flatten(1).mean(1).tolist())
        fine.extend(dens.flatten(1).sum(1).cpu().tolist())
        gts.extend(y)
    return {"val_density_mse": float(np.mean(errs)), "val_fine_mae": mae(fine, gts)}
