"""Command-line entry point: data, train, sample, eval, ablate.

Every command loads one JSON config, echoes the fully resolved document
(stdout and <out>/config_echo.json), and writes its outputs under the out
directory. All randomness descends from the config seed, so re-running a
command from its echoed config reproduces the outputs byte for byte.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import report
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .datapipe import DataError, generate_real_dataset, load_dataset, run_pipeline, save_dataset
from .embedders import EmbedderBundle, default_embedders
from .flow import FlowError
from .metrics import evaluate_video
from .model import SugarModel
from .rng import Rng
from .sampler import GUIDANCE_OPERATING_POINTS, GuidanceConfig, SampleRequest, sample
from .sprites import PromptError, random_subject, render_prompt, render_subject, sample_prompt
from .tensor import NumericError, ShapeError, read_tensors, write_tensors
from .training import prepare_examples, run_strategy

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

METRIC_COLUMNS = {
    "identity_score": "dino_score",
    "text_alignment": "clip_score",
    "dynamic_degree": "dynamic_degree",
    "subject_consistency": "subject_consistency",
    "background_consistency": "background_consistency",
}


def _bundle_for(cfg: RunConfig) -> EmbedderBundle:
    m = cfg.model
    return default_embedders(n_fine=m.n_fine, d_fine=m.d_fine, n_text=m.n_text, d_text=m.d_text)


def _echo(cfg: RunConfig) -> None:
    text = cfg.echo_json()
    print(text)
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "config_echo.json"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -----------------------------------------------------------------------------
# data
# -----------------------------------------------------------------------------


def cmd_data(cfg: RunConfig) -> int:
    bundle = _bundle_for(cfg)
    data_dir = cfg.data_dir or os.path.join(cfg.out, "data")
    synth, rep = run_pipeline(cfg.pipeline.build(), seed=cfg.seed, embedders=bundle)
    real = generate_real_dataset(cfg.pipeline.n_real, seed=cfg.seed, frames=cfg.pipeline.frames)
    save_dataset(os.path.join(data_dir, "synthetic"), synth)
    save_dataset(os.path.join(data_dir, "real"), real)
    _write_json(os.path.join(data_dir, "report.json"), rep.to_dict())
    report.save_pipeline_figure(rep.counts, os.path.join(data_dir, "report.png"))
    print(f"data: {rep.counts} -> {data_dir}")
    return EXIT_OK


# -----------------------------------------------------------------------------
# train
# -----------------------------------------------------------------------------


def _load_examples(cfg: RunConfig, bundle: EmbedderBundle):
    data_dir = cfg.data_dir or os.path.join(cfg.out, "data")

    def maybe(name: str):
        path = os.path.join(data_dir, name)
        if not os.path.exists(os.path.join(path, "manifest.jsonl")):
            return []
        return prepare_examples(load_dataset(path), bundle, cfg.model.patch_size)

    return maybe("real"), maybe("synthetic")


def cmd_train(cfg: RunConfig) -> int:
    bundle = _bundle_for(cfg)
    real_ex, synth_ex = _load_examples(cfg, bundle)
    model = SugarModel(cfg.model, rng=Rng(cfg.seed).child("model-init"))
    sched = cfg.schedule.build()
    train_dir = os.path.join(cfg.out, "train")
    os.makedirs(train_dir, exist_ok=True)
    result = run_strategy(
        model, cfg.strategy, real_ex, synth_ex, sched, seed=cfg.seed, dropout=cfg.dropout,
        checkpoint_dir=train_dir, log_path=os.path.join(train_dir, "log.jsonl"),
    )
    report.save_loss_curve(result.log, os.path.join(train_dir, "loss.png"))
    final = result.log[-1]["loss"] if result.log else float("nan")
    print(f"train: {len(result.log)} steps, final loss {final:.4f}, checkpoints {sorted(result.checkpoints.values())}")
    return EXIT_OK


# -----------------------------------------------------------------------------
# sample
# -----------------------------------------------------------------------------


def _find_checkpoint(cfg: RunConfig) -> str:
    if cfg.checkpoint:
        return cfg.checkpoint
    train_dir = os.path.join(cfg.out, "train")
    if os.path.isdir(train_dir):
        stages = sorted(f for f in os.listdir(train_dir) if f.endswith(".ckpt"))
        if stages:
            return os.path.join(train_dir, stages[-1])
    raise DataError("no checkpoint configured and none found under the out directory")


def _load_identity_image(path: str) -> np.ndarray:
    if path.endswith(".png"):
        from PIL import Image

        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
        return arr
    arrays = read_tensors(path)
    for key in ("z", "s"):
        if key in arrays:
            return arrays[key]
    raise DataError(f"{path}: no identity image under keys 'z' or 's'")


def _auto_requests(cfg: RunConfig, n: int, rng: Rng):
    """Deterministic request protocol: fresh subject, pipeline-style prompt."""
    out = []
    for i in range(n):
        r = rng.child("request", i)
        spec = random_subject(r.child("subject"))
        _, z = render_subject(spec, r.child("render"))
        attrs = sample_prompt(spec, r.child("prompt"))
        seed = int(r.child("seed").integers(0, 2 ** 31))
        out.append({"z": z, "tokens": render_prompt(attrs), "seed": seed, "z_path": None})
    return out


def _requests_from_config(cfg: RunConfig):
    rows = []
    for row in cfg.sample.requests:
        known = {"z_path", "prompt", "omega_I", "omega_T", "variant", "t_bar", "drop_set", "steps", "seed", "method"}
        unknown = set(row) - known
        if unknown:
            raise ConfigError(f"unknown request keys: {sorted(unknown)}")
        if "z_path" not in row or "prompt" not in row:
            raise ConfigError("each request needs z_path and prompt")
        rows.append({
            "z": _load_identity_image(row["z_path"]),
            "tokens": str(row["prompt"]).split(),
            "seed": int(row.get("seed", cfg.seed)),
            "z_path": row["z_path"],
            "overrides": {k: row[k] for k in ("omega_I", "omega_T", "variant", "t_bar", "drop_set", "steps", "method") if k in row},
        })
    return rows


def _guidance_for(cfg: RunConfig, overrides: dict) -> tuple[GuidanceConfig, int, str]:
    g = cfg.guidance
    return (
        GuidanceConfig(
            omega_i=float(overrides.get("omega_I", g.omega_I)),
            omega_t=float(overrides.get("omega_T", g.omega_T)),
            variant=str(overrides.get("variant", g.variant)),
            t_bar=int(overrides.get("t_bar", g.t_bar)),
            drop_set=str(overrides.get("drop_set", g.drop_set)),
        ),
        int(overrides.get("steps", g.steps)),
        str(overrides.get("method", g.method)),
    )


def _run_requests(cfg: RunConfig, model: SugarModel, bundle: EmbedderBundle, requests, out_dir: str):
    sched = cfg.schedule.build()
    os.makedirs(out_dir, exist_ok=True)
    produced = []
    for i, row in enumerate(requests):
        guidance, steps, method = _guidance_for(cfg, row.get("overrides", {}))
        req = SampleRequest(z=row["z"], prompt=row["tokens"], guidance=guidance,
                            steps=steps, seed=row["seed"], method=method)
        video, trace = sample(model, req, sched, bundle)
        rdir = os.path.join(out_dir, f"req_{i:03d}")
        os.makedirs(rdir, exist_ok=True)
        write_tensors(os.path.join(rdir, "video.tensors"), {"video": video, "z": row["z"]})
        report.contact_sheet(video, os.path.join(rdir, "sheet.png"))
        trace["request"] = {
            "z_path": row.get("z_path"), "prompt": " ".join(row["tokens"]), "seed": row["seed"],
            "omega_I": guidance.omega_i, "omega_T": guidance.omega_t, "variant": guidance.variant,
            "t_bar": guidance.t_bar, "drop_set": guidance.drop_set, "steps": steps, "method": method,
        }
        _write_json(os.path.join(rdir, "trace.json"), trace)
        produced.append((video, row["z"], row["tokens"]))
    return produced


def cmd_sample(cfg: RunConfig) -> int:
    bundle = _bundle_for(cfg)
    model = SugarModel.load(_find_checkpoint(cfg))
    requests = _requests_from_config(cfg) or _auto_requests(cfg, cfg.sample.count, Rng(cfg.seed).child("sample"))
    produced = _run_requests(cfg, model, bundle, requests, os.path.join(cfg.out, "samples"))
    print(f"sample: wrote {len(produced)} videos under {os.path.join(cfg.out, 'samples')}")
    return EXIT_OK


# -----------------------------------------------------------------------------
# eval
# -----------------------------------------------------------------------------


def _evaluate_dir(cfg: RunConfig, bundle: EmbedderBundle, videos_dir: str, out_dir: str) -> dict:
    if not os.path.isdir(videos_dir):
        raise DataError(f"no sample directory at {videos_dir}")
    rows = []
    for name in sorted(os.listdir(videos_dir)):
        rdir = os.path.join(videos_dir, name)
        container = os.path.join(rdir, "video.tensors")
        trace_path = os.path.join(rdir, "trace.json")
        if not (os.path.exists(container) and os.path.exists(trace_path)):
            continue
        arrays = read_tensors(container)
        with open(trace_path, "r", encoding="utf-8") as fh:
            trace = json.load(fh)
        tokens = trace["prompt"].split()
        rep = evaluate_video(arrays["video"], arrays["z"], tokens, bundle)
        rows.append({"name": name, "prompt": trace["prompt"], **rep.to_dict()})
    if not rows:
        raise DataError(f"no evaluable samples under {videos_dir}")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    summary = {
        col: float(np.mean([r[field] for r in rows]))
        for field, col in METRIC_COLUMNS.items()
    }
    summary["n_videos"] = len(rows)
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    report.save_metric_bars({k: v for k, v in summary.items() if k != "n_videos"},
                            os.path.join(out_dir, "metrics.png"))
    return summary


def cmd_eval(cfg: RunConfig, videos_dir: str | None = None) -> int:
    bundle = _bundle_for(cfg)
    videos_dir = videos_dir or os.path.join(cfg.out, "samples")
    summary = _evaluate_dir(cfg, bundle, videos_dir, os.path.join(cfg.out, "eval"))
    print("eval:", json.dumps(summary, sort_keys=True))
    return EXIT_OK


# -----------------------------------------------------------------------------
# ablate
# -----------------------------------------------------------------------------

_TRAIN_PREFIXES = ("model.", "strategy.", "dropout.", "schedule.")


def _preset_cells(cfg: RunConfig) -> list[tuple[str, dict]]:
    preset = cfg.ablate.preset
    if preset is None:
        cells = [(c["name"], dict(c.get("overrides", {}))) for c in cfg.ablate.cells]
        return cells or [("base", {})]
    if preset == "guidance_table":
        return [
            (f"wT{wt}_wI{wi}", {"guidance.omega_T": wt, "guidance.omega_I": wi})
            for wt, wi in GUIDANCE_OPERATING_POINTS
        ]
    if preset == "omega_i_sweep":
        return [
            (f"wI{wi}", {"guidance.omega_T": 7.5, "guidance.omega_I": wi})
            for wi in (2.5, 3.0, 4.0, 5.0, 7.5)
        ]
    if preset == "designs":
        return [(f"design_{d}", {"model.design": d}) for d in ("A", "B", "C", "D", "E")]
    if preset == "strategies":
        return [
            ("mix_p0.0", {"strategy.kind": "MIX", "strategy.p": 0.0}),
            ("mix_p0.5", {"strategy.kind": "MIX", "strategy.p": 0.5}),
            ("mix_p1.0", {"strategy.kind": "MIX", "strategy.p": 1.0}),
            ("ts", {"strategy.kind": "TS"}),
            ("tsf", {"strategy.kind": "TSF"}),
        ]
    if preset == "drop_sets":
        gate = {"guidance.t_bar": 900, "guidance.omega_T": 7.5, "guidance.omega_I": 7.5}
        return [
            ("drop_none", {**gate, "guidance.drop_set": "none"}),
            ("drop_fine", {**gate, "guidance.drop_set": "fine_only"}),
            ("drop_fine_and_coarse", {**gate, "guidance.drop_set": "fine_and_coarse"}),
            ("trained_without_dropping", {
                **gate, "guidance.drop_set": "fine_only",
                "dropout.p_fine": 0.0, "dropout.p_coarse": 0.0, "dropout.p_text": 0.0,
            }),
        ]
    if preset == "video_vs_image":
        return [
            ("tsf_video", {"strategy.kind": "TSF", "strategy.image_mode": False}),
            ("tsf_image", {"strategy.kind": "TSF", "strategy.image_mode": True}),
        ]
    raise ConfigError(f"unknown ablate preset {preset!r}")


def _run_cell(cfg: RunConfig, index: int, name: str, overrides: dict) -> dict:
    cell_cfg = apply_overrides(cfg, overrides)
    bundle = _bundle_for(cell_cfg)
    cell_rng = Rng(cfg.seed).child("ablate-cell", index)
    needs_train = any(k.startswith(_TRAIN_PREFIXES) for k in overrides)
    cell_dir = os.path.join(cfg.out, "ablate", f"cell_{index:02d}_{name}")
    if needs_train or cell_cfg.checkpoint is None and not os.path.isdir(os.path.join(cfg.out, "train")):
        real_ex, synth_ex = _load_examples(cell_cfg, bundle)
        model = SugarModel(cell_cfg.model, rng=cell_rng.child("model-init"))
        run_strategy(model, cell_cfg.strategy, real_ex, synth_ex, cell_cfg.schedule.build(),
                     seed=int(cell_rng.child("train-seed").integers(0, 2 ** 31)),
                     dropout=cell_cfg.dropout)
    else:
        model = SugarModel.load(_find_checkpoint(cell_cfg))
    requests = _auto_requests(cell_cfg, cell_cfg.ablate.samples_per_cell, cell_rng.child("requests"))
    produced = _run_requests(cell_cfg, model, bundle, requests, os.path.join(cell_dir, "samples"))
    summary = _evaluate_dir(cell_cfg, bundle, os.path.join(cell_dir, "samples"), os.path.join(cell_dir, "eval"))
    metrics = {k: v for k, v in summary.items() if k != "n_videos"}
    return {"cell": name, "index": index, "overrides": overrides, "metrics": metrics}


def cmd_ablate(cfg: RunConfig) -> int:
    cells = _preset_cells(cfg)
    workers = max(1, cfg.ablate.workers)
    if workers == 1:
        rows = [_run_cell(cfg, i, name, ov) for i, (name, ov) in enumerate(cells)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell, cfg, i, name, ov) for i, (name, ov) in enumerate(cells)]
            rows = [f.result() for f in futures]
    rows.sort(key=lambda r: r["index"])
    out_dir = os.path.join(cfg.out, "ablate")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.jsonl"), "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    metric_keys = list(rows[0]["metrics"])
    with open(os.path.join(out_dir, "results.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell"] + metric_keys)
        for row in rows:
            writer.writerow([row["cell"]] + [row["metrics"][k] for k in metric_keys])
    report.save_sweep_figure(rows, metric_keys, os.path.join(out_dir, "sweep.png"))
    print(f"ablate: {len(rows)} cells -> {out_dir}")
    return EXIT_OK


# -----------------------------------------------------------------------------
# entry point
# -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sugar", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("data", "build the synthetic and real datasets"),
        ("train", "train a model with the configured strategy"),
        ("sample", "generate videos from a checkpoint"),
        ("eval", "score sampled videos"),
        ("ablate", "run a sweep of train/sample/eval cells"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the run-config JSON")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        if name in ("sample", "ablate"):
            p.add_argument("--checkpoint", default=None, help="checkpoint path (overrides config)")
        if name == "eval":
            p.add_argument("--videos", default=None, help="directory of sampled videos")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        overrides = {}
        if args.out:
            overrides["out"] = args.out
        if getattr(args, "checkpoint", None):
            overrides["checkpoint"] = args.checkpoint
        if overrides:
            cfg = apply_overrides(cfg, overrides)
        _echo(cfg)
        if args.command == "data":
            return cmd_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "sample":
            return cmd_sample(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, videos_dir=getattr(args, "videos", None))
        if args.command == "ablate":
            return cmd_ablate(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, PromptError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, ShapeError, FlowError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
