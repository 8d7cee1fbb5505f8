"""Experiment drivers behind the CLI: data, training, attack sweeps, receptive fields.

Output layout under ``experiment.out``::

    resolved.cfg            every key, defaults included
    data/{train,val}/       manifest.tsv + PPM images + PGM labels
    models/<tag>.ckpt       checkpoints; <tag>.curve.csv per-epoch loss / mIoU
    ledger.csv              one row per attack cell (append-only)
    timings.csv             wall time per run id (kept out of the ledger so
                            ledger rows are byte-identical across reruns)
    reruns.csv              run ids seen again, and whether the row matched
    attacks/<run_id>/       per-image JSON records (+ PPMs if save_images)
    rf/<tag>.pgm, rf/radius.csv

Randomness fans out from the master seed by purpose and index, e.g. the
target for image i is ``RngState(seed).child("target", mode, i)``; adding an
axis to a sweep never changes the draws of existing cells.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .attacks import AttackSpec, attack_run
from .attention import AttentionConfig
from .config import ConfigError, ExperimentConfig
from .data import (DatasetSpec, dataset_exists, generate_dataset, make_patch_mask, read_dataset,
                   write_dataset, write_ppm)
from .metrics import PooledIoU
from .model import SegModelConfig, load_checkpoint, model_init, save_checkpoint
from .receptive import rf_average, rf_effective_radius, write_heatmap, write_radius_csv
from .rng import RngState
from .targets import make_target
from .train import TrainConfig, clean_miou, train

log = logging.getLogger(__name__)


class MissingInput(ConfigError):
    """A required dataset or checkpoint is absent."""


# ---------------------------------------------------------------- variants

@dataclass(frozen=True)
class Variant:
    tag: str
    model: SegModelConfig


def adversarial_steps(setting: str) -> int:
    if setting == "off":
        return 0
    return int(setting[3:]) if len(setting) > 3 else 10


def variants(cfg: ExperimentConfig) -> list[Variant]:
    """Models named by the sweep axes (mixers x modes x thresholds x dropouts)."""
    m, a = cfg["model"], cfg["attention"]
    d = cfg["data"]
    geom = dict(img_h=d["img_h"], img_w=d["img_w"], patch=m["patch"], embed_dim=m["embed_dim"],
                layers=m["layers"], heads=m["heads"], classes=d["classes"],
                window=m["window"], shift=m["shift"], pool=m["pool"])
    suffix = "" if cfg["train"]["adversarial"] == "off" else "+adv" + str(
        adversarial_steps(cfg["train"]["adversarial"]))
    out, seen = [], set()
    for mixer in m["mixers"]:
        modes = ("baseline",) if mixer == "pool" else a["modes"]
        for mode in modes:
            ts = a["thresholds"] if mode in ("mas", "ram") else (a["thresholds"][0],)
            ps = a["dropouts"] if mode in ("rad", "ram") else (a["dropouts"][0],)
            for t, p in itertools.product(ts, ps):
                att = AttentionConfig(mode=mode, threshold=t, dropout=p,
                                      temperature=a["temperature"], rad_at_eval=a["rad_at_eval"])
                try:
                    mc = SegModelConfig(mixer=mixer, attention=att, **geom)
                except ValueError as exc:
                    raise ConfigError(str(exc)) from exc
                tag = mc.tag + suffix
                if tag not in seen:
                    seen.add(tag)
                    out.append(Variant(tag, mc))
    return out


def dataset_spec(cfg: ExperimentConfig, count: int) -> DatasetSpec:
    d = cfg["data"]
    return DatasetSpec(count, d["img_h"], d["img_w"], d["classes"], d["min_shapes"],
                       d["max_shapes"], d["noise"], tint=d["tint"])


def data_dir(cfg: ExperimentConfig, split: str) -> Path:
    return cfg.out / "data" / split


def checkpoint_path(cfg: ExperimentConfig, tag: str) -> Path:
    return cfg.out / "models" / f"{tag}.ckpt"


def _load_split(cfg: ExperimentConfig, split: str):
    path = data_dir(cfg, split)
    if not dataset_exists(path):
        raise MissingInput(f"dataset {path} not found; run gen-data first")
    return read_dataset(path)


# ---------------------------------------------------------------- gen-data

def gen_data(cfg: ExperimentConfig) -> dict[str, Path]:
    d = cfg["data"]
    if d["train_count"] == 0 or d["val_count"] == 0:
        raise ConfigError("empty dataset")
    root = RngState(cfg.seed).child("data")
    out = {}
    for split, count in (("train", d["train_count"]), ("val", d["val_count"])):
        try:
            samples = generate_dataset(dataset_spec(cfg, count), root.child(split))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        out[split] = write_dataset(data_dir(cfg, split), samples)
        log.info("wrote %d %s samples to %s", count, split, out[split].parent)
    return out


# ---------------------------------------------------------------- train

def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg["train"]
    adv = t["adversarial"]
    return TrainConfig(lr=t["lr"], epochs=t["epochs"], batch_size=t["batch_size"], seed=cfg.seed,
                       adversarial="off" if adv == "off" else "pgd",
                       adv_steps=adversarial_steps(adv), adv_gamma=t["adv_gamma"],
                       adv_patch=t["adv_patch"], adv_location=t["adv_location"])


def _train_one(cfg: ExperimentConfig, v: Variant, train_set, val_set) -> dict:
    tc = train_config(cfg)
    val_rng = RngState(cfg.seed).child("clean-eval")
    rows = []

    def on_epoch(epoch, m, hist):
        rows.append((epoch, hist.loss[-1], hist.train_miou[-1], clean_miou(m, val_set, val_rng)))

    m0 = model_init(v.model, RngState(cfg.seed).child("model"))
    m, hist = train(m0, train_set, tc, on_epoch=on_epoch)
    ckpt = checkpoint_path(cfg, v.tag)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    val = rows[-1][3] if rows else clean_miou(m, val_set, val_rng)
    save_checkpoint(ckpt, m, {"tag": v.tag, "seed": cfg.seed, "config_hash": cfg.config_hash(),
                              "adv_steps_run": hist.adv_steps_run, "val_miou": repr(val)})
    with open(ckpt.with_suffix(".curve.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_miou", "val_miou"])
        for e, loss, tm, vm in rows:
            w.writerow([e, repr(float(loss)), repr(float(tm)), repr(float(vm))])
    return {"tag": v.tag, "val_miou": val, "adv_steps_run": hist.adv_steps_run,
            "checkpoint": str(ckpt)}


def _train_job(args):
    cfg, v = args
    return _train_one(cfg, v, _load_split(cfg, "train"), _load_split(cfg, "val"))


def train_models(cfg: ExperimentConfig, jobs: int = 1) -> list[dict]:
    vs = variants(cfg)
    train_set, val_set = _load_split(cfg, "train"), _load_split(cfg, "val")
    if jobs > 1 and len(vs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_job, [(cfg, v) for v in vs]))
    else:
        results = [_train_one(cfg, v, train_set, val_set) for v in vs]
    for r in results:
        log.info("trained %s: val mIoU %.4f, adversarial inner steps %d",
                 r["tag"], r["val_miou"], r["adv_steps_run"])
    return results


def load_models(cfg: ExperimentConfig) -> dict:
    out = {}
    for v in variants(cfg):
        path = checkpoint_path(cfg, v.tag)
        if not path.is_file():
            raise MissingInput(f"checkpoint {path} not found; run train first")
        out[v.tag] = load_checkpoint(path)[0]
    return out


# ---------------------------------------------------------------- ledger

LEDGER_FIELDS = ("run_id", "config_hash", "seed", "model_tag", "method", "target", "size",
                 "location", "steps", "images", "miou_target", "miou_gt", "pacc_masked")


@dataclass(frozen=True)
class Cell:
    model_tag: str
    method: str
    target: str
    size: int
    location: str

    def key(self) -> str:
        return f"{self.model_tag}|{self.method}|{self.target}|{self.size}|{self.location}"


def run_id(config_hash: str, cell: Cell) -> str:
    return hashlib.sha256(f"{config_hash}|{cell.key()}".encode("utf-8")).hexdigest()[:16]


def _fmt_float(v: float) -> str:
    return repr(float(v))


def ledger_row(cfg: ExperimentConfig, cell: Cell, metrics: dict) -> dict:
    h = cfg.config_hash()
    return {
        "run_id": run_id(h, cell), "config_hash": h, "seed": str(cfg.seed),
        "model_tag": cell.model_tag, "method": cell.method, "target": cell.target,
        "size": str(cell.size), "location": cell.location,
        "steps": str(cfg["attack"]["steps"]), "images": str(metrics["images"]),
        "miou_target": _fmt_float(metrics["miou_target"]),
        "miou_gt": _fmt_float(metrics["miou_gt"]),
        "pacc_masked": _fmt_float(metrics["pacc_masked"]),
    }


def read_ledger(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        if tuple(reader.fieldnames) != LEDGER_FIELDS:
            raise ConfigError(f"{path}: unexpected ledger header")
        return list(reader)


class LedgerAppender:
    """Single writer for ledger rows; reruns of a known run id are flagged."""

    def __init__(self, root: Path):
        self.path = root / "ledger.csv"
        self.timings = root / "timings.csv"
        self.reruns = root / "reruns.csv"
        self.known = {r["run_id"]: r for r in read_ledger(self.path)}

    def _append(self, path: Path, header, values) -> None:
        new = not path.is_file() or path.stat().st_size == 0
        with open(path, "a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(header)
            w.writerow(values)

    def add(self, row: dict, seconds: float) -> str:
        """Returns "new", "identical" or "differs"."""
        rid = row["run_id"]
        row = {k: row[k] for k in LEDGER_FIELDS}
        if rid in self.known:
            status = "identical" if self.known[rid] == row else "differs"
            self._append(self.reruns, ("run_id", "status"), (rid, status))
            if status == "differs":
                log.warning("rerun %s does not reproduce the ledgered row", rid)
            else:
                log.info("rerun %s reproduces the ledgered row; not appended", rid)
            return status
        self._append(self.path, LEDGER_FIELDS, [row[k] for k in LEDGER_FIELDS])
        self._append(self.timings, ("run_id", "seconds"), (rid, f"{seconds:.3f}"))
        self.known[rid] = row
        return "new"


# ---------------------------------------------------------------- attack

def attack_spec(cfg: ExperimentConfig, method: str) -> AttackSpec:
    a = cfg["attack"]
    return AttackSpec(method=method, steps=a["steps"], gamma=a["gamma"], alpha=a["alpha"],
                      eot_samples=a["eot_samples"], eot_shift=a["eot_shift"],
                      eot_noise=a["eot_noise"])


def cells(cfg: ExperimentConfig) -> list[Cell]:
    a = cfg["attack"]
    return [Cell(v.tag, method, target, size, loc)
            for v in variants(cfg)
            for method, target, size, loc in itertools.product(
                a["methods"], a["targets"], a["sizes"], a["locations"])]


def attack_image(cfg: ExperimentConfig, model, cell: Cell, i: int, image, gt) -> dict:
    """One (cell, image) unit.  Every random draw is keyed to the image index."""
    root = RngState(cfg.seed)
    h, w = gt.shape
    mask = make_patch_mask(h, w, cell.size, cell.location, root.child("mask", cell.size, i))
    target = make_target(cell.target, gt, model.cfg.classes, root.child("target", cell.target, i),
                         stripes=cfg["attack"]["stripes"])
    spec = attack_spec(cfg, cell.method)
    res = attack_run(model, image, gt, target, mask, spec, root.child("attack", i))
    record = res.record(spec, {"image": i, "cell": cell.key(),
                               "mask": [mask.top, mask.left, mask.height, mask.width]})
    return {"record": record, "adversarial": res.adversarial, "seconds": res.seconds,
            "prediction": res.prediction, "gt": gt, "target": target.labels}


@lru_cache(maxsize=None)
def _worker_model(path: str):
    return load_checkpoint(path)[0]


def _attack_job(args):
    cfg, cell, i, image, gt = args
    model = _worker_model(str(checkpoint_path(cfg, cell.model_tag)))
    return attack_image(cfg, model, cell, i, image, gt)


def run_attacks(cfg: ExperimentConfig, jobs: int = 1) -> list[dict]:
    """Attack every cell on the first ``attack.images`` validation images."""
    a = cfg["attack"]
    all_cells = cells(cfg)  # validates method names etc. before any compute
    for c in all_cells:
        attack_spec(cfg, c.method)
    models = load_models(cfg)
    val = _load_split(cfg, "val")
    if len(val) < a["images"]:
        raise ConfigError(f"attack.images={a['images']} but only {len(val)} validation images")
    val = val[:a["images"]]
    h, w = val[0][1].shape
    if any(s > min(h, w) for s in a["sizes"]):
        raise ConfigError("patch size larger than the image")
    ledger = LedgerAppender(cfg.out)
    units = [(cfg, c, i, img, gt) for c in all_cells for i, (img, gt) in enumerate(val)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_attack_job, units, chunksize=max(1, len(units) // (4 * jobs))))
    else:
        results = [attack_image(cfg, models[c.model_tag], c, i, img, gt) for cfg, c, i, img, gt in units]

    rows = []
    n = len(val)
    for k, c in enumerate(all_cells):
        chunk = results[k * n:(k + 1) * n]
        # mIoU from confusion matrices pooled over the eval set; per-image
        # values stay in the JSON records
        classes = models[c.model_tag].cfg.classes
        vs_target, vs_gt = PooledIoU(classes), PooledIoU(classes)
        for r in chunk:
            vs_target.add(r["prediction"], r["target"])
            vs_gt.add(r["prediction"], r["gt"])
        metrics = {
            "images": n,
            "miou_target": vs_target.value(),
            "miou_gt": vs_gt.value(),
            "pacc_masked": float(np.mean([r["record"]["metrics"]["pacc_masked"] for r in chunk])),
        }
        row = ledger_row(cfg, c, metrics)
        adir = cfg.out / "attacks" / row["run_id"]
        adir.mkdir(parents=True, exist_ok=True)
        for r in chunk:
            i = r["record"]["image"]
            (adir / f"img{i:04d}.json").write_text(
                json.dumps(r["record"], sort_keys=True) + "\n", encoding="utf-8")
            if a["save_images"]:
                write_ppm(adir / f"img{i:04d}.ppm", r["adversarial"])
        row["status"] = ledger.add(row, sum(r["seconds"] for r in chunk))
        rows.append(row)
        log.info("%s: target mIoU %.4f  masked pAcc %.4f  [%s]", c.key(),
                 metrics["miou_target"], metrics["pacc_masked"], row["status"])
    return rows


# ---------------------------------------------------------------- receptive field

def run_rf(cfg: ExperimentConfig) -> list[tuple[str, float, float]]:
    r = cfg["rf"]
    models = load_models(cfg)
    val = _load_split(cfg, "val")[:r["images"]]
    out = cfg.out / "rf"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    rng = RngState(cfg.seed).child("rf") if r["stochastic"] else None
    for tag, m in models.items():
        rf = rf_average(m, [img for img, _ in val], stochastic=r["stochastic"], rng=rng)
        write_heatmap(out / f"{tag}.pgm", rf)
        rows.append((tag, r["q"], rf_effective_radius(rf, r["q"])))
        log.info("%s: effective radius %.2f px at q=%g", tag, rows[-1][2], r["q"])
    write_radius_csv(out / "radius.csv", rows)
    return rows
