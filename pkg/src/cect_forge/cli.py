"""``cect-forge`` command line: generate, register, train, eval, metrics.

Every command takes ``--config FILE`` (INI) with sections ``[phantom]``,
``[model]``, ``[loss]``, ``[train]`` and ``[eval]`` whose keys are the
fields of the matching config dataclasses. Precedence is flags > file >
defaults, and each command writes the fully resolved configuration next to
its outputs as ``resolved_config.ini``.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import io
import json
import logging
import math
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .loss import LossConfig
from .metrics import dice, nmi, psnr, threshold_segment
from .model import ModelConfig, load_weights, save_weights
from .phantom import (PhantomConfig, PhantomPair, Volume, generate_volume, load_volume, save_volume, displace,
                      split_dataset)
from .registration import RigidTransform2D, register_rigid, resample
from .trainer import EvalConfig, TrainConfig, TrainingDiverged, derive_seed, evaluate, evaluate_predictions, train

log = logging.getLogger("cect_forge")

SECTIONS = ("phantom", "model", "loss", "train", "eval")
MANIFEST = "manifest.json"
RESOLVED = "resolved_config.ini"
_IMAGES = ("ct", "cect", "chamber_mask", "heart_mask")


class UsageError(Exception):
    pass


def worker_count() -> int:
    """Workers for embarrassingly parallel steps; ``CECT_FORGE_THREADS`` caps it."""
    n = os.cpu_count() or 1
    cap = os.environ.get("CECT_FORGE_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"CECT_FORGE_THREADS must be an integer, got {cap!r}") from None
    return n


# configuration ------------------------------------------------------------

_TRAIN_SKIP = {"loss", "model"}
_MODEL_SKIP = {"seed"}  # derived from the train seed


def _section_fields(section: str) -> dict[str, dataclasses.Field]:
    cls = {"phantom": PhantomConfig, "model": ModelConfig, "loss": LossConfig, "train": TrainConfig,
           "eval": EvalConfig}[section]
    skip = _TRAIN_SKIP if section == "train" else _MODEL_SKIP if section == "model" else set()
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}


def _parse_value(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        v = text.lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        inner = like[0] if like else 0.0
        return tuple(_parse_value(t, inner) for t in text.split(",") if t.strip())
    return text


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


@dataclasses.dataclass(frozen=True)
class RunConfig:
    phantom: PhantomConfig = PhantomConfig()
    model: ModelConfig = ModelConfig.scaled(4, 64)
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig.desk()
    eval: EvalConfig = EvalConfig()

    def train_config(self) -> TrainConfig:
        model = dataclasses.replace(self.model, seed=derive_seed(self.train.seed, "model"))
        return dataclasses.replace(self.train, loss=self.loss, model=model)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section in SECTIONS:
            obj = getattr(self, section)
            cp[section] = {k: _format_value(getattr(obj, k)) for k in _section_fields(section)}
        buf = io.StringIO()
        buf.write("# resolved configuration (flags > file > defaults)\n")
        cp.write(buf)
        return buf.getvalue()


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the INI file, then ``overrides`` keyed ``(section, key)``."""
    values: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        cp = configparser.ConfigParser()
        cp.read_string(p.read_text())
        for section in cp.sections():
            if section not in SECTIONS:
                raise UsageError(f"{p}: unknown section [{section}]; expected one of {', '.join(SECTIONS)}")
            known = _section_fields(section)
            for key, val in cp[section].items():
                if key not in known:
                    raise UsageError(f"{p}: unknown key {key!r} in [{section}]")
                values[section][key] = val
    for (section, key), val in (overrides or {}).items():
        if val is not None:
            values[section][key] = str(val)

    base = RunConfig()
    built = {}
    for section in SECTIONS:
        default = getattr(base, section)
        kw = {}
        for key, text in values[section].items():
            try:
                kw[key] = _parse_value(text, getattr(default, key))
            except ValueError as e:
                raise UsageError(f"[{section}] {key}: {e}") from None
        try:
            built[section] = dataclasses.replace(default, **kw)
        except (ValueError, TypeError) as e:
            raise UsageError(f"[{section}]: {e}") from None
    if "v_th" not in values["loss"]:
        built["loss"] = dataclasses.replace(built["loss"], v_th=LossConfig.from_hu_threshold(built["eval"].v_th_hu).v_th)
    if "input_size" not in values["model"]:
        built["model"] = dataclasses.replace(built["model"], input_size=built["phantom"].image_size)
    return RunConfig(**built)


# output bookkeeping ----------------------------------------------------------

class Outputs:
    """Tracks files a command creates so a failure can remove them again."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.files: list[Path] = []
        self.dirs: list[Path] = []

    def mkdir(self, path: Path) -> Path:
        path = Path(path)
        missing = []
        p = path
        while not p.exists():
            missing.append(p)
            p = p.parent
        path.mkdir(parents=True, exist_ok=True)
        self.dirs.extend(reversed(missing))
        return path

    def path(self, name) -> Path:
        p = self.root / name
        self.mkdir(p.parent)
        self.files.append(p)
        return p

    def write_text(self, name, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        return p

    def rollback(self) -> None:
        for f in self.files:
            if f.is_file():
                f.unlink()
        for d in reversed(self.dirs):
            if d.is_dir():
                shutil.rmtree(d, ignore_errors=True)


# data directory ---------------------------------------------------------------

def _load_manifest(data_dir) -> dict:
    p = Path(data_dir) / MANIFEST
    if not p.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {data_dir}")
    return json.loads(p.read_text())


def _load_case(data_dir, case: dict) -> list[PhantomPair]:
    vols = {k: load_volume(Path(data_dir) / case[k]) for k in _IMAGES}
    spacing = vols["ct"].spacing
    shape = vols["ct"].data.shape
    for k, v in vols.items():
        if v.data.shape != shape:
            raise ValueError(f"case {case['id']}: {k} has shape {v.data.shape}, ct has {shape}")
    return [PhantomPair(vols["ct"].data[z].astype(np.float64), vols["cect"].data[z].astype(np.float64),
                        vols["chamber_mask"].data[z].astype(np.uint8), vols["heart_mask"].data[z].astype(np.uint8),
                        spacing, None, case.get("seed"))
            for z in range(shape[0])]


def _split_cases(manifest: dict, name: str) -> list[dict]:
    ids = set(manifest["split"][name])
    return [c for c in manifest["cases"] if c["id"] in ids]


# commands ------------------------------------------------------------------

def _random_displacement(seed: int) -> RigidTransform2D:
    rng = np.random.default_rng(seed)
    return RigidTransform2D(float(rng.uniform(-6, 6)), float(rng.uniform(-6, 6)), float(rng.uniform(-12, 12)))


def cmd_generate(args, out: Outputs) -> dict:
    if args.count is None or args.count <= 0:
        raise UsageError("--count must be positive")
    if args.depth <= 0:
        raise UsageError("--depth must be positive")
    run = load_run_config(args.config, {("train", "seed"): args.seed})
    cfg, seed = run.phantom, run.train.seed

    def make(i):
        s = derive_seed(seed, "phantom", i)
        vol = generate_volume(cfg, s, args.depth)
        t = _random_displacement(derive_seed(seed, "displace", i)) if args.displace else None
        if t is not None:
            vol = [displace(p, t, cfg.hu_air) for p in vol]
        return s, vol, t

    with ThreadPoolExecutor(worker_count()) as pool:
        made = list(pool.map(make, range(args.count)))

    cases = []
    for i, (s, vol, t) in enumerate(made):
        cid = f"case_{i:04d}"
        spacing = vol[0].spacing
        entry = {"id": cid, "seed": s, "slices": len(vol)}
        for k in _IMAGES:
            name = f"{cid}_{k}.huv"
            save_volume(Volume(np.stack([getattr(p, k) for p in vol]), spacing), out.path(name))
            entry[k] = name
        entry["chamber_area_px"] = [int(p.chamber_area_px) for p in vol]
        entry["displacement"] = t.to_dict() if t is not None else None
        cases.append(entry)
    split = split_dataset(args.count, derive_seed(seed, "split")) if args.count >= 3 else None
    ids = [c["id"] for c in cases]
    manifest = {
        "seed": seed,
        "count": args.count,
        "depth": args.depth,
        "displaced": bool(args.displace),
        "phantom": cfg.to_dict(),
        "split": ({k: [ids[j] for j in v] for k, v in split.items()} if split is not None
                  else {"train": ids, "val": ids, "test": ids}),
        "cases": cases,
    }
    out.write_text(MANIFEST, json.dumps(manifest, indent=1))
    out.write_text(RESOLVED, run.to_ini())
    return {"cases": args.count, "out": str(out.root)}


def cmd_register(args, out: Outputs) -> dict:
    moving = load_volume(args.moving)
    fixed = load_volume(args.fixed)
    if moving.data.shape != fixed.data.shape:
        raise ValueError(f"moving {moving.data.shape} and fixed {fixed.data.shape} differ in shape")
    run = load_run_config(args.config)
    fill = run.phantom.hu_air

    def reg(z):
        return register_rigid(moving.data[z].astype(np.float64), fixed.data[z].astype(np.float64))

    with ThreadPoolExecutor(worker_count()) as pool:
        results = list(pool.map(reg, range(moving.data.shape[0])))
    moved = np.stack([resample(moving.data[z].astype(np.float64), r.transform, "bilinear", fill)
                      for z, r in enumerate(results)])
    save_volume(Volume(moved, moving.spacing), out.path(Path(args.out).name))
    rows = [{"slice": z, **r.transform.to_dict(), "mi": r.mi, "mi_initial": r.mi_initial, "converged": r.converged}
            for z, r in enumerate(results)]
    return {"slices": rows}


def cmd_train(args, out: Outputs) -> dict:
    run = load_run_config(args.config, {
        ("train", "epochs"): args.epochs, ("train", "learning_rate"): args.lr,
        ("train", "batch_size"): args.batch_size, ("train", "seed"): args.seed,
        ("train", "checkpoint_every"): args.checkpoint_every,
    })
    manifest = _load_manifest(args.data)
    tc = run.train_config()
    train_set = [p for c in _split_cases(manifest, "train") for p in _load_case(args.data, c)]
    val_set = [p for c in _split_cases(manifest, "val") for p in _load_case(args.data, c)]
    if train_set and train_set[0].ct.shape[0] != tc.model.input_size:
        raise UsageError(f"data is {train_set[0].ct.shape[0]} px but [model] input_size is {tc.model.input_size}")
    out.write_text(RESOLVED, run.to_ini())
    ckpt_dir = None
    if tc.checkpoint_every:
        ckpt_dir = out.mkdir(out.root / "checkpoints")
    if args.resume is not None and not Path(args.resume).is_file():
        raise OSError(f"checkpoint not found: {args.resume}")
    params, history = train(train_set, val_set, tc, checkpoint_dir=ckpt_dir, resume=args.resume,
                            on_epoch=lambda r: log.info("epoch %d train %.6f val %.6f dice %.3f", r["epoch"],
                                                        r["train_loss"], r["val_loss"], r["val_dice"]))
    if ckpt_dir is not None:
        out.files.extend(sorted(ckpt_dir.iterdir()))
    save_weights(params, out.path("weights.cwt"))
    out.write_text("history.csv", history.to_csv())
    last = history.records[-1]
    return {"epochs": len(history), "final_train_loss": last["train_loss"], "final_val_dice": last["val_dice"]}


def cmd_eval(args, out: Outputs) -> dict:
    run = load_run_config(args.config)
    manifest = _load_manifest(args.data)
    cases = {c["id"]: _load_case(args.data, c) for c in _split_cases(manifest, args.split)}
    if not cases:
        raise ValueError(f"split {args.split!r} is empty")
    if args.truth_as_prediction:
        preds = {k: [p.cect for p in v] for k, v in cases.items()}
        report = evaluate_predictions(preds, cases, run.eval)
    else:
        if args.weights is None:
            raise UsageError("--weights is required unless --truth-as-prediction is given")
        params = load_weights(args.weights, input_size=next(iter(cases.values()))[0].ct.shape[0])
        report, preds = evaluate(params, cases, run.eval)
    out.write_text("report.json", report.to_json())
    out.write_text("bland_altman.csv", report.bland_altman_csv())
    for cid, slices in preds.items():
        spacing = cases[cid][0].spacing
        save_volume(Volume(np.stack(slices), spacing), out.path(f"pred/{cid}_cect.huv"))
        segs = [threshold_segment(s, run.eval.v_th_hu, p.heart_mask) for s, p in zip(slices, cases[cid])]
        save_volume(Volume(np.stack(segs).astype(np.float32), spacing), out.path(f"pred/{cid}_chambers.huv"))
    out.write_text(RESOLVED, run.to_ini())
    d = report.to_dict()
    return {k: d[k] for k in ("nmi", "psnr_db", "dice", "dv_percent", "pearson_rho")}


def cmd_metrics(args, out: Outputs | None) -> dict:
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()] if args.metrics else None
    if wanted is None:
        wanted = ["nmi", "psnr"] + (["dice"] if args.mask else [])
    unknown = set(wanted) - {"nmi", "psnr", "dice"}
    if unknown:
        raise UsageError(f"unknown metric(s): {', '.join(sorted(unknown))}")
    if "dice" in wanted and not args.mask:
        raise UsageError("dice needs --mask (the heart mask inside which both images are thresholded)")
    run = load_run_config(args.config)
    a, b = load_volume(args.a).data.astype(np.float64), load_volume(args.b).data.astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {args.a} is {a.shape}, {args.b} is {b.shape}")
    mask = load_volume(args.mask).data if args.mask else None
    if mask is not None and mask.shape != a.shape:
        raise ValueError(f"mask shape {mask.shape} does not match images {a.shape}")
    res = {}
    if "nmi" in wanted:
        res["nmi"] = nmi(a, b, mask, run.eval.bins)
    if "psnr" in wanted:
        res["psnr"] = psnr(a, b, mask, run.eval.psnr_peak)
    if "dice" in wanted:
        v = run.eval.v_th_hu
        res["dice"] = dice(threshold_segment(a, v, mask), threshold_segment(b, v, mask))
    return res


# entry point -------------------------------------------------------------------

def _dumps(d: dict) -> str:
    def enc(v):
        if isinstance(v, float) and (math.isinf(v) or math.isnan(v)):
            return None if math.isnan(v) else ("+inf" if v > 0 else "-inf")
        if isinstance(v, dict):
            return {k: enc(x) for k, x in v.items()}
        if isinstance(v, list):
            return [enc(x) for x in v]
        return v
    return json.dumps(enc(d))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cect-forge", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write phantom pairs and a manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--depth", type=int, default=1, help="slices per phantom volume")
    g.add_argument("--displace", action="store_true", help="move each CECT by a random rigid transform")
    g.add_argument("--config")

    r = sub.add_parser("register", help="rigidly register a moving volume onto a fixed one, slice by slice")
    r.add_argument("--moving", required=True)
    r.add_argument("--fixed", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config")

    t = sub.add_parser("train", help="train on the train/val split of a data directory")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="checkpoint sidecar (ckpt_epochNNNN.json) to continue from")

    e = sub.add_parser("eval", help="score a trained model on a split")
    e.add_argument("--weights")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--truth-as-prediction", action="store_true", help="score the true CECT against itself")
    e.add_argument("--config")

    m = sub.add_parser("metrics", help="NMI / PSNR / Dice of one volume pair, printed as JSON")
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    m.add_argument("--mask")
    m.add_argument("--metrics", help="comma list of nmi,psnr,dice")
    m.add_argument("--config")
    return ap


def _out_root(args) -> Path | None:
    if args.command == "metrics":
        return None
    if args.command == "register":
        return Path(args.out).parent
    return Path(args.out)


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handlers = {"generate": cmd_generate, "register": cmd_register, "train": cmd_train, "eval": cmd_eval,
                "metrics": cmd_metrics}
    root = _out_root(args)
    out = None
    try:
        worker_count()
        if root is not None:
            out = Outputs(root)
            out.mkdir(root)
        result = handlers[args.command](args, out)
    except UsageError as e:
        if out is not None:
            out.rollback()
        ap.error(str(e))  # exits 2
    except (OSError, ValueError, TrainingDiverged) as e:
        if out is not None:
            out.rollback()
        print(f"cect-forge {args.command}: error: {e}", file=sys.stderr)
        return 1
    except BaseException:
        if out is not None:
            out.rollback()
        raise
    print(_dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
