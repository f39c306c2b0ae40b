"""Implementations behind the CLI subcommands.

Each command is a plain function returning a JSON-able summary so it can be
driven from tests or notebooks as well as from :mod:`avdiffusion.cli`.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import plotting
from .config import LOSS_FIELDS, ConfigError, RunConfig
from .denoiser import (DenoiserConfig, DenoiserParams, OptimizerState, TrainingDiverged, denoiser_fn,
                       init_params, train)
from .diffusion import binarize, ddpm_sample
from .formats import (CheckpointError, MaskFormatError, digest, load_checkpoint, read_mask_png,
                      save_checkpoint, write_gray_png, write_mask_png)
from .schedule import NoiseSchedule, linear_schedule
from .structmetrics import empty_sample_rate, pixel_metrics, struct_report
from .synthvessel import AVMask, generate_dataset

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ckpt"
CHECKPOINT_KIND = "avdiffusion-denoiser"

_CHANNEL_SCHEMA = {
    "type": "object",
    "required": ["component_count", "branch_point_count", "trifurcation_count", "loop_count", "foreground_fraction"],
    "properties": {
        "component_count": {"type": "integer", "minimum": 0},
        "branch_point_count": {"type": "integer", "minimum": 0},
        "trifurcation_count": {"type": "integer", "minimum": 0},
        "loop_count": {"type": "integer", "minimum": 0},
        "foreground_fraction": {"type": "number", "minimum": 0, "maximum": 1},
    },
}

_RATE = {"type": ["number", "null"], "minimum": 0, "maximum": 1}

METRICS_SCHEMA = {
    "type": "object",
    "required": ["mask_dir", "files", "skipped", "aggregate"],
    "properties": {
        "mask_dir": {"type": "string"},
        "files": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["file", "report"],
                "properties": {
                    "file": {"type": "string"},
                    "report": {
                        "type": "object",
                        "required": ["artery", "vein", "crossing_pixel_count", "foreground_fraction", "empty_flag"],
                        "properties": {
                            "artery": _CHANNEL_SCHEMA,
                            "vein": _CHANNEL_SCHEMA,
                            "crossing_pixel_count": {"type": "integer", "minimum": 0},
                            "foreground_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                            "empty_flag": {"type": "boolean"},
                        },
                    },
                    "pixel": {"type": "object"},
                },
            },
        },
        "skipped": {
            "type": "array",
            "items": {"type": "object", "required": ["file", "reason"]},
        },
        "aggregate": {
            "type": "object",
            "required": ["count", "empty_sample_rate", "mean"],
            "properties": {
                "count": {"type": "integer", "minimum": 0},
                "empty_sample_rate": _RATE,
                "mean": {"type": "object"},
            },
        },
    },
}


# ---------------------------------------------------------------- helpers


def _out_dir(path) -> Path:
    if path is None:
        raise ConfigError("an output directory is required (--out-dir)")
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def dataset_digest(masks) -> str:
    h = hashlib.sha256()
    for m in masks:
        a = m.to_array()
        h.update(np.asarray(a.shape, "<i8").tobytes())
        h.update(a.tobytes())
    return h.hexdigest()


def load_mask_dir(path) -> tuple[list[AVMask], list[str]]:
    """Read every PNG mask in a directory (sorted by name); any bad file is an error."""
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"mask directory not found: {d}")
    files = sorted(d.glob("*.png"))
    masks = []
    for f in files:
        try:
            masks.append(read_mask_png(f))
        except MaskFormatError as e:
            raise MaskFormatError(f"{f}: {e}") from None
    return masks, [f.name for f in files]


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- synth-data


def cmd_synth_data(cfg: RunConfig, n: int, out_dir) -> dict:
    out = _out_dir(out_dir)
    tree = cfg.tree_config()
    masks = generate_dataset(n, tree, rng=cfg.seed)
    entries = []
    for i, m in enumerate(masks):
        name = f"mask_{i:05d}.png"
        write_mask_png(out / name, m)
        entries.append({"file": name, "seed": m.seed, "foreground_fraction": m.foreground_fraction})
    run = cfg.to_dict()
    run.pop("out_dir")
    synth = {"n": n, "run_config": run, "vessel_tree": tree.to_dict()}
    manifest = {
        "count": n,
        "config": synth,
        "config_digest": digest(synth),
        "dataset_digest": dataset_digest(masks),
        "files": entries,
    }
    _write_json(out / "manifest.json", manifest)
    if masks:
        # kept out of the mask directory so the data dir stays convention-clean
        (out / "figures").mkdir(exist_ok=True)
        plotting.plot_mask_grid(masks[:32], out / "figures" / "preview.png", title="synthetic training masks")
    return manifest


# ---------------------------------------------------------------- checkpoints


def save_model(path, cfg: RunConfig, params: DenoiserParams, opt: OptimizerState, epoch: int,
               history, data_digest: str | None = None) -> None:
    tensors = {f"param/{k}": v for k, v in params.tensors.items()}
    tensors.update({f"adam_m/{k}": v for k, v in opt.m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in opt.v.items()})
    # paths are left out so identical runs into different directories give identical files;
    # the dataset digest identifies the training data instead
    run = {k: v for k, v in cfg.to_dict().items() if k not in ("data_dir", "out_dir")}
    meta = {
        "kind": CHECKPOINT_KIND,
        "run_config": run,
        "denoiser": params.config.to_dict(),
        "schedule": {"kind": "linear", "num_steps": cfg.num_steps, "beta_start": cfg.beta_start,
                     "beta_end": cfg.beta_end},
        "epoch": epoch,
        "loss_history": [float(h) for h in history],
        "optimizer": {**opt.hyper(), "step": opt.step},
        "dataset_digest": data_digest,
    }
    save_checkpoint(path, tensors, meta)


def load_model(path):
    """Returns (params, schedule, run config, optimizer state, metadata)."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path}: not a denoiser checkpoint")
    dcfg = DenoiserConfig(**meta["denoiser"])
    params = DenoiserParams(dcfg, {k[6:]: v for k, v in tensors.items() if k.startswith("param/")})
    expected = set(init_params(0, dcfg).tensors)
    if set(params.tensors) != expected:
        raise CheckpointError(f"{path}: parameter set does not match the stored denoiser config")
    sch = meta["schedule"]
    schedule = linear_schedule(sch["num_steps"], sch["beta_start"], sch["beta_end"])
    opt_meta = dict(meta["optimizer"])
    step = opt_meta.pop("step")
    opt = OptimizerState(**opt_meta, step=step,
                         m={k[7:]: v for k, v in tensors.items() if k.startswith("adam_m/")},
                         v={k[7:]: v for k, v in tensors.items() if k.startswith("adam_v/")})
    return params, schedule, RunConfig.from_dict(meta["run_config"]), opt, meta


# ---------------------------------------------------------------- train


def _training_data(cfg: RunConfig) -> list[AVMask]:
    if cfg.data_dir is not None:
        masks, _ = load_mask_dir(cfg.data_dir)
        if not masks:
            raise ConfigError(f"no PNG masks in {cfg.data_dir}")
        return masks
    return generate_dataset(cfg.n_train, cfg.tree_config(), rng=cfg.seed)


def cmd_train(cfg: RunConfig, resume=None, data: list[AVMask] | None = None) -> dict:
    """Train and write checkpoint + loss CSV + loss figure into ``cfg.out_dir``.

    The checkpoint is rewritten after every epoch so a numerical failure
    leaves the last good one in place.
    """
    out = _out_dir(cfg.out_dir)
    if data is None:
        if cfg.data_dir is None:
            raise ConfigError("train needs --data-dir")
        data = _training_data(cfg)
    ddig = dataset_digest(data)
    params = opt = None
    start, history = 0, []
    if resume is not None:
        params, _, prev_cfg, opt, meta = load_model(resume)
        if params.config != cfg.denoiser_config():
            raise ConfigError("resume checkpoint was trained with a different denoiser config")
        start, history = meta["epoch"], meta["loss_history"]
    ckpt = out / CHECKPOINT_NAME

    def write_history(hist):
        _write_csv(out / "loss_history.csv", ["epoch", "mean_loss"], [[i + 1, _fmt(h)] for i, h in enumerate(hist)])

    def on_epoch(epoch, res):
        save_model(ckpt, cfg, res.params, res.opt_state, epoch + 1, res.history, ddig)
        write_history(res.history)

    res = train(data, cfg.denoiser_config(), cfg.loss_config(), cfg.schedule(), seed=cfg.seed,
                epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, grad_clip=cfg.grad_clip,
                params=params, opt_state=opt, start_epoch=start, history=history, on_epoch_end=on_epoch)
    if cfg.epochs == 0:
        save_model(ckpt, cfg, res.params, res.opt_state, start, res.history, ddig)
        write_history(res.history)
    if res.history:
        plotting.plot_loss_history({cfg.loss: res.history}, out / "loss_history.png")
    return {"checkpoint": str(ckpt), "epochs": len(res.history), "final_loss": res.history[-1] if res.history else None,
            "dataset_digest": ddig, "params": res.params, "history": res.history}


# ---------------------------------------------------------------- sample


def sample_masks(params: DenoiserParams, schedule: NoiseSchedule, n: int, seed: int, resolution: int,
                 batch_size: int = 64) -> np.ndarray:
    """Raw samples in [-1, 1], shape (n, 2, H, W). One generator feeds all batches."""
    rng = np.random.default_rng(seed)
    fn = denoiser_fn(params)
    out = []
    for lo in range(0, n, batch_size):
        b = min(batch_size, n - lo)
        out.append(ddpm_sample(fn, schedule, rng, (b, 2, resolution, resolution)))
    if not out:
        return np.zeros((0, 2, resolution, resolution), np.float32)
    return np.concatenate(out)


def cmd_sample(checkpoint, n: int, seed: int, out_dir, threshold: float | None = None,
               batch_size: int = 64, resolution: int | None = None) -> dict:
    params, schedule, cfg, _, _ = load_model(checkpoint)
    if n == 0:
        return {"count": 0, "files": []}
    out = _out_dir(out_dir)
    res = resolution or cfg.resolution
    thr = cfg.threshold if threshold is None else threshold
    raw = sample_masks(params, schedule, n, seed, res, batch_size)
    masks = binarize(raw, thr)
    (out / "raw").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    files = []
    for i, (r, m) in enumerate(zip(raw, masks)):
        write_gray_png(out / "raw" / f"sample_{i:05d}_artery.png", r[0])
        write_gray_png(out / "raw" / f"sample_{i:05d}_vein.png", r[1])
        write_mask_png(out / "masks" / f"sample_{i:05d}.png", m)
        files.append(f"masks/sample_{i:05d}.png")
    plotting.plot_mask_grid(masks[:64], out / "samples_grid.png", title=f"{n} samples, T={schedule.num_steps}")
    return {"count": n, "files": files, "masks": masks, "raw": raw}


# ---------------------------------------------------------------- metrics


def _mean_report(rows: list[dict]) -> dict:
    if not rows:
        return {}
    keys = ["component_count", "branch_point_count", "trifurcation_count", "loop_count", "foreground_fraction"]
    out = {}
    for ch in ("artery", "vein"):
        for k in keys:
            out[f"{ch}.{k}"] = float(np.mean([r[ch][k] for r in rows]))
    out["crossing_pixel_count"] = float(np.mean([r["crossing_pixel_count"] for r in rows]))
    out["foreground_fraction"] = float(np.mean([r["foreground_fraction"] for r in rows]))
    return out


def metrics_report(masks, names, window_radius: int = 1, empty_threshold: float = 0.005) -> dict:
    rows = [struct_report(m, window_radius, empty_threshold).to_dict() for m in masks]
    return {
        "files": [{"file": f, "report": r} for f, r in zip(names, rows)],
        "aggregate": {
            "count": len(rows),
            "empty_sample_rate": empty_sample_rate(masks, empty_threshold) if masks else None,
            "mean": _mean_report(rows),
        },
    }


def cmd_metrics(mask_dir, out_dir=None, gt_dir=None, window_radius: int = 1, empty_threshold: float = 0.005) -> dict:
    """Structural report per PNG plus aggregate; bad files are skipped and listed."""
    d = Path(mask_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"mask directory not found: {d}")
    masks, names, skipped = [], [], []
    for f in sorted(d.glob("*.png")):
        try:
            masks.append(read_mask_png(f))
            names.append(f.name)
        except (MaskFormatError, OSError) as e:
            log.warning("skipping %s: %s", f.name, e)
            skipped.append({"file": f.name, "reason": str(e)})
    report = {"mask_dir": str(d), **metrics_report(masks, names, window_radius, empty_threshold), "skipped": skipped}
    if gt_dir is not None:
        _add_pixel_metrics(report, masks, names, Path(gt_dir))
    out = Path(out_dir) if out_dir is not None else d
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", report)
    header = ["file", "foreground_fraction", "empty_flag", "crossing_pixel_count"] + [
        f"{ch}_{k}" for ch in ("artery", "vein")
        for k in ("component_count", "branch_point_count", "trifurcation_count", "loop_count")]
    rows = []
    for entry in report["files"]:
        r = entry["report"]
        rows.append([entry["file"], _fmt(r["foreground_fraction"]), int(r["empty_flag"]), r["crossing_pixel_count"]]
                    + [r[ch][k] for ch in ("artery", "vein")
                       for k in ("component_count", "branch_point_count", "trifurcation_count", "loop_count")])
    _write_csv(out / "metrics.csv", header, rows)
    if rows:
        plotting.plot_metrics_summary([e["report"] for e in report["files"]], out / "metrics.png")
    return report


def _add_pixel_metrics(report, masks, names, gt_dir: Path):
    per = []
    for entry, m, name in zip(report["files"], masks, names):
        gt_path = gt_dir / name
        if not gt_path.exists():
            continue
        gt = read_mask_png(gt_path)
        pm = {ch: pixel_metrics(getattr(m, ch), getattr(gt, ch)).to_dict() for ch in ("artery", "vein")}
        entry["pixel"] = pm
        per.append(pm)
    agg = {}
    for ch in ("artery", "vein"):
        for k in ("accuracy", "sensitivity", "specificity"):
            vals = [p[ch][k] for p in per if p[ch][k] is not None]
            agg[f"{ch}.{k}"] = float(np.mean(vals)) if vals else None
    report["aggregate"]["pixel_mean"] = agg


# ---------------------------------------------------------------- compare-loss


def cmd_compare_loss(cfg: RunConfig, n_samples: int, out_dir=None) -> dict:
    """Train the simple and vessel-weighted arms on one dataset and compare samples."""
    out = _out_dir(out_dir if out_dir is not None else cfg.out_dir)
    data = _training_data(cfg)
    ddig = dataset_digest(data)
    train_frac = float(np.mean([m.foreground_fraction for m in data]))
    arms, histories, samples = {}, {}, {}
    for arm in ("simple", "vessel"):
        acfg = cfg.with_(loss=arm, out_dir=str(out / arm))
        log.info("training arm %s", arm)
        res = cmd_train(acfg, data=data)
        raw = sample_masks(res["params"], acfg.schedule(), n_samples, cfg.seed, cfg.resolution)
        masks = binarize(raw, cfg.threshold) if n_samples else []
        sdir = out / arm / "samples"
        sdir.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(masks):
            write_mask_png(sdir / f"sample_{i:05d}.png", m)
        rep = metrics_report(masks, [f"sample_{i:05d}.png" for i in range(len(masks))],
                             cfg.window_radius, cfg.empty_threshold)
        steps = cfg.epochs * math.ceil(len(data) / cfg.batch_size)
        arms[arm] = {
            "loss": arm,
            "c": acfg.c if arm == "vessel" else None,
            "config_digest": acfg.digest(),
            "shared_config_digest": acfg.digest(exclude=LOSS_FIELDS),
            "dataset_digest": ddig,
            "training_steps": steps,
            "final_loss": res["final_loss"],
            "empty_sample_rate": rep["aggregate"]["empty_sample_rate"],
            "mean_foreground_fraction": float(np.mean([m.foreground_fraction for m in masks])) if masks else None,
            "structure_mean": rep["aggregate"]["mean"],
        }
        histories[arm] = res["history"]
        samples[arm] = masks
    s, v = arms["simple"], arms["vessel"]
    summary = {
        "arms": arms,
        "dataset_digest": ddig,
        "n_train": len(data),
        "n_samples": n_samples,
        "training_mean_foreground_fraction": train_frac,
        "empty_threshold": cfg.empty_threshold,
        "checks": {
            "vessel_fewer_empty_samples": (s["empty_sample_rate"] is not None and v["empty_sample_rate"] is not None
                                           and v["empty_sample_rate"] < s["empty_sample_rate"]),
            "vessel_fraction_within_2x_of_training": (v["mean_foreground_fraction"] is not None
                                                      and train_frac / 2 <= v["mean_foreground_fraction"] <= 2 * train_frac),
        },
    }
    _write_json(out / "comparison.json", summary)
    _write_csv(out / "comparison.csv",
               ["arm", "empty_sample_rate", "mean_foreground_fraction", "final_loss", "training_steps"],
               [[a, _fmt(r["empty_sample_rate"]) if r["empty_sample_rate"] is not None else "",
                 _fmt(r["mean_foreground_fraction"]) if r["mean_foreground_fraction"] is not None else "",
                 _fmt(r["final_loss"]) if r["final_loss"] is not None else "", r["training_steps"]]
                for a, r in arms.items()])
    if n_samples:
        plotting.plot_comparison(summary, out / "comparison.png")
        for arm, masks in samples.items():
            plotting.plot_mask_grid(masks[:64], out / f"samples_{arm}.png", title=f"{arm} loss")
    if any(histories.values()):
        plotting.plot_loss_history(histories, out / "loss_curves.png", title="simple vs vessel-weighted loss")
    return summary


__all__ = [
    "cmd_synth_data", "cmd_train", "cmd_sample", "cmd_metrics", "cmd_compare_loss",
    "load_model", "save_model", "sample_masks", "dataset_digest", "load_mask_dir", "metrics_report",
    "METRICS_SCHEMA", "TrainingDiverged",
]
