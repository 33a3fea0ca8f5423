"""``perceiver-ts`` command line: synth, train, eval, impute, ablate, attn, profile.

Configs are JSON documents with the sections listed in ``DEFAULTS``;
``--set section.key=value`` overrides win over file values. Exit codes:
0 success, 1 validation error, 2 runtime abort.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .ablation import builtin_suite, run_ablation
from .data import SynthSpec, chronological_split, load_csv, sine_suite_spec, synth_generate, window_array, write_csv
from .errors import ConfigError, DataError, DimensionError, SamplingError, TrainingAbort
from .evaluation import evaluate_forecast, evaluate_imputation, export_attention, profile_variants
from .formulation import sample_plan
from .model import Forecaster, ModelConfig, load_checkpoint, save_checkpoint
from .training import (TrainConfig, optimizer_from_extra, save_optimizer_checkpoint, train, write_history)

log = logging.getLogger("perceiver_ts")

DEFAULTS: dict = {
    "data": {"path": None, "synth": None, "split": [0.7, 0.1, 0.2], "standardize": False},
    "model": {"lookback": 96, "horizon": 24, "patch_len": 12},
    "train": {},
    "eval": {"split": "test", "stride": 1, "batch_size": 256, "mask_patch_len": 24, "mask_ratio": 0.25,
             "mask_seed": 0},
    "ablate": {"suites": ["formulation", "decoder", "encoder"], "seeds": [0, 1, 2, 3, 4]},
    "attn": {"split": "test", "windows": [0], "strategy": "standard", "plan_seed": 0},
    "profile": {"token_counts": [56, 112, 224, 448], "n_channels": 7, "patch_len": 12,
                "variants": ["latent_bottleneck", "full_self_attn", "decoupled_self_attn"]},
}
OPEN_SECTIONS = {"model": ModelConfig, "train": TrainConfig}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path: Optional[str], overrides: Sequence[str], seed: Optional[int]) -> dict:
    """Merge defaults, the config file and ``--set`` overrides, then validate keys."""
    cfg = copy.deepcopy(DEFAULTS)
    sources = []
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        sources.append((doc, path))
    ov: dict = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected section.key=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        if len(parts) != 2:
            raise ConfigError(f"--set {item!r}: key must be section.key")
        ov.setdefault(parts[0], {})[parts[1]] = _parse_value(value)
    sources.append((ov, "--set"))
    errs = []
    for doc, origin in sources:
        for section, body in doc.items():
            if section not in cfg:
                errs.append(f"{origin}: unknown section {section!r}")
                continue
            if not isinstance(body, dict):
                errs.append(f"{origin}: section {section!r} must be an object")
                continue
            allowed = (set(OPEN_SECTIONS[section].__dataclass_fields__) if section in OPEN_SECTIONS
                       else set(cfg[section]))
            for k, v in body.items():
                if k not in allowed:
                    errs.append(f"{origin}: unknown key {section}.{k}")
                else:
                    cfg[section][k] = v
    if errs:
        raise ConfigError("; ".join(errs))
    if seed is not None:
        cfg["model"]["seed"] = seed
        cfg["train"]["seed"] = seed
    return cfg


def build_bundle(cfg: dict):
    d = cfg["data"]
    if d["path"] and d["synth"]:
        raise ConfigError("data.path and data.synth are mutually exclusive")
    if d["path"]:
        series = load_csv(d["path"])
    else:
        spec = SynthSpec.from_dict(d["synth"]) if d["synth"] else sine_suite_spec()
        series = synth_generate(spec)
    bundle = chronological_split(series, tuple(d["split"]))
    return bundle.standardized() if d["standardize"] else bundle


def model_config(cfg: dict, n_channels: int) -> ModelConfig:
    m = dict(cfg["model"])
    if m.setdefault("n_channels", n_channels) != n_channels:
        raise ConfigError(f"model.n_channels={m['n_channels']} but the data has {n_channels} channels")
    return ModelConfig.from_dict(m).validate()


def resolve(cfg: dict, *, need_data: bool = True):
    """Validate everything that can be checked without computing; returns (bundle, model cfg, train cfg)."""
    tcfg = TrainConfig.from_dict(cfg["train"]).validate()
    if not need_data:
        return None, None, tcfg
    bundle = build_bundle(cfg)
    mcfg = model_config(cfg, bundle.series.n_channels)
    for split in ("train", "val", "test"):
        a, b = bundle.range(split)
        if b - a < mcfg.lookback + mcfg.horizon:
            raise ConfigError(f"{split} split has {b - a} steps, fewer than L+H={mcfg.lookback + mcfg.horizon}")
    return bundle, mcfg, tcfg


def _emit(paths) -> None:
    for p in paths:
        print(p)


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def _load_models(paths: Sequence[str]) -> list[Forecaster]:
    if not paths:
        raise ConfigError("at least one --checkpoint is required")
    models = []
    for p in paths:
        if not Path(p).exists():
            raise ConfigError(f"missing checkpoint: {p}")
        config, params, _, _ = load_checkpoint(p)
        models.append(Forecaster(config, params))
    return models


def _check_models(models, bundle) -> None:
    for m in models:
        if m.config.n_channels != bundle.series.n_channels:
            raise ConfigError(f"checkpoint expects {m.config.n_channels} channels, data has "
                              f"{bundle.series.n_channels}")


def cmd_synth(args, cfg) -> list[Path]:
    spec_dict = cfg["data"]["synth"]
    spec = SynthSpec.from_dict(spec_dict) if spec_dict else sine_suite_spec()
    if args.seed is not None:
        spec.seed = args.seed
    if spec.length < 1:
        raise ConfigError(f"synth length must be >= 1, got {spec.length}")
    if args.dry_run:
        return []
    series = synth_generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "synth.csv"
    write_csv(series, csv_path)
    manifest = {"equation": spec.equation(), "seed": spec.seed, "length": spec.length,
                "channels": series.channel_names}
    return [csv_path, _write_json(out / "synth_manifest.json", manifest)]


def cmd_train(args, cfg) -> list[Path]:
    if args.resume:
        config, params, meta, extra = load_checkpoint(args.resume)
        cfg["model"] = config.to_dict()
    bundle, mcfg, tcfg = resolve(cfg)
    if args.dry_run:
        return []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start_epoch, optimizer = 0, None
    model = Forecaster(mcfg)
    if args.resume:
        model = Forecaster(config, params)
        start_epoch = int(meta.get("epoch", -1)) + 1
        optimizer = optimizer_from_extra(extra, int(meta.get("step", 0)))
    result = train(model, bundle, tcfg, checkpoint_dir=out, optimizer=optimizer, start_epoch=start_epoch)
    if result.best_epoch is None:  # no epoch ran: persist the initial parameters
        save_checkpoint(out / "best.npz", mcfg, model.params, meta={"epoch": start_epoch - 1})
        save_optimizer_checkpoint(out / "last.npz", model, result.optimizer, start_epoch - 1, tcfg)
    hist = out / "history.jsonl"
    if args.resume and hist.exists():
        prev = [json.loads(line) for line in hist.read_text().splitlines() if line.strip()]
        write_history([r for r in prev if r["epoch"] < start_epoch] + result.history, hist)
    else:
        write_history(result.history, hist)
    run = _write_json(out / "run_config.json", cfg)
    return [out / "best.npz", out / "last.npz", hist, run]


def cmd_eval(args, cfg) -> list[Path]:
    bundle = build_bundle(cfg)
    models = _load_models(args.checkpoint)
    _check_models(models, bundle)
    if args.dry_run:
        return []
    e = cfg["eval"]
    report = evaluate_forecast(models, bundle, split=e["split"], stride=e["stride"], batch_size=e["batch_size"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval_report.json"
    report.write(path)
    return [path]


def cmd_impute(args, cfg) -> list[Path]:
    bundle = build_bundle(cfg)
    models = _load_models(args.checkpoint)
    _check_models(models, bundle)
    e = cfg["eval"]
    if args.dry_run:
        return []
    report = evaluate_imputation(models, bundle, mask_patch_len=e["mask_patch_len"], mask_ratio=e["mask_ratio"],
                                 seed=e["mask_seed"], split=e["split"],
                                 stride=e["stride"], batch_size=e["batch_size"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "impute_report.json"
    report.write(path)
    return [path]


def cmd_ablate(args, cfg) -> list[Path]:
    bundle, mcfg, tcfg = resolve(cfg)
    a = cfg["ablate"]
    suites = [builtin_suite(name, mcfg.to_dict(), tcfg.to_dict(), a["seeds"],
                            mask_patch_len=cfg["eval"]["mask_patch_len"]) for name in a["suites"]]
    if args.dry_run:
        return []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache: dict = {}
    paths = []
    failed = False
    for suite in suites:
        report = run_ablation(suite, bundle, cache=cache)
        failed |= any(r["error"] for r in report.rows)
        p = out / f"ablation_{suite.name}.json"
        p.write_text(report.to_json() + "\n", encoding="utf-8")
        paths.append(p)
    if failed:
        _emit(paths)
        raise TrainingAbort("one or more ablation variants failed; see the error fields in the reports")
    return paths


def cmd_attn(args, cfg) -> list[Path]:
    bundle = build_bundle(cfg)
    (model,) = _load_models(args.checkpoint[:1])
    _check_models([model], bundle)
    a = cfg["attn"]
    mc = model.config
    windows, origins = window_array(bundle, a["split"], mc.lookback, mc.horizon, 1)
    for w in a["windows"]:
        if not 0 <= int(w) < len(windows):
            raise ConfigError(f"attn.windows: index {w} outside 0..{len(windows) - 1}")
    if args.dry_run:
        return []
    rng = np.random.default_rng(a["plan_seed"])
    paths = []
    for w in a["windows"]:
        plan = sample_plan(mc.grid, mc.lookback, a["strategy"], rng)
        exp = export_attention(model, windows[w], plan, args.out, stem=f"attn_w{w}",
                               channel_names=bundle.series.channel_names, origin=int(origins[w]))
        paths.extend(exp.paths)
    return paths


def cmd_profile(args, cfg) -> list[Path]:
    p = cfg["profile"]
    if len(p["token_counts"]) < 3:
        raise ConfigError(f"grid too small: need >= 3 token counts, got {len(p['token_counts'])}")
    model_kw = {k: v for k, v in cfg["model"].items()
                if k not in ("lookback", "horizon", "patch_len", "n_channels", "encoder_variant")}
    model_kw.setdefault("max_patches", None)
    if args.dry_run:
        return []
    result = profile_variants(p["token_counts"], n_channels=p["n_channels"], patch_len=p["patch_len"],
                              variants=p["variants"], **model_kw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "profile.json"
    path.write_text(result.to_json() + "\n", encoding="utf-8")
    return [path]


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "impute": cmd_impute,
            "ablate": cmd_ablate, "attn": cmd_attn, "profile": cmd_profile}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perceiver-ts", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default="runs")
        sp.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("eval", "impute", "attn"):
            sp.add_argument("--checkpoint", action="append", default=[], help="model checkpoint (repeatable)")
        if name == "train":
            sp.add_argument("--resume", help="continue from a last.npz checkpoint")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_run_config(args.config, args.set, args.seed)
        paths = COMMANDS[args.command](args, cfg)
        if args.dry_run:
            print(json.dumps(cfg, sort_keys=True, indent=1))
        _emit(paths)
        return 0
    except (ConfigError, DataError, DimensionError, SamplingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingAbort, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
